"""NCE, AUC, activeness segments and per-day metric frames."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

P_CLAMP = 1e-7
FRAME_VERSION = 1
SEGMENT_QUANTILES = (0.2, 0.4, 0.6, 0.8)


class UndefinedMetricError(ValueError):
    """Metric is undefined for the given labels (e.g. a single class)."""


def entropy(q: float) -> float:
    return float(-q * np.log(q) - (1.0 - q) * np.log(1.0 - q))


def cross_entropy(predictions, labels) -> float:
    p = np.clip(np.asarray(predictions, dtype=np.float64), P_CLAMP, 1.0 - P_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def nce(predictions, labels) -> float:
    """Mean binary cross-entropy normalised by the entropy of the positive rate.

    1.0 is the base-rate predictor; lower is better. Natural log throughout.
    """
    y = np.asarray(labels, dtype=np.float64)
    if len(y) != len(np.asarray(predictions)):
        raise ValueError("predictions and labels differ in length")
    q = float(y.mean()) if len(y) else 0.0
    if not 0.0 < q < 1.0:
        raise UndefinedMetricError("label entropy is zero (need both classes)")
    return cross_entropy(predictions, y) / entropy(q)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def maybe(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetricError:
        return None


# ---------------------------------------------------------------------------
# Activeness segments


def segment_edges(train_counts, quantiles: Sequence[float] = SEGMENT_QUANTILES) -> np.ndarray:
    """Deduplicated quantile edges of per-user training engagement counts."""
    c = np.asarray(train_counts, dtype=np.float64)
    if len(c) == 0:
        return np.zeros(0)
    return np.unique(np.quantile(c, quantiles))


def assign_segments(counts, edges) -> np.ndarray:
    return np.searchsorted(edges, np.asarray(counts, dtype=np.float64), side="right")


def segment_nce(counts, labels, predictions, edges) -> list[float | None]:
    seg = assign_segments(counts, edges)
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    return [maybe(nce, predictions[seg == b], labels[seg == b]) for b in range(len(edges) + 1)]


@dataclass
class SegmentReport:
    edges: list[float]
    counts: list[int]
    nce_base: list[float | None]
    nce_model: list[float | None]

    @property
    def delta(self) -> list[float | None]:
        return [None if a is None or b is None else b - a
                for a, b in zip(self.nce_base, self.nce_model)]

    @property
    def relative_delta_pct(self) -> list[float | None]:
        return [None if a is None or b is None else 100.0 * (b / a - 1.0)
                for a, b in zip(self.nce_base, self.nce_model)]


def segment_report(example_counts, labels, base_predictions, model_predictions,
                   train_counts) -> SegmentReport:
    """Per-activeness-bucket NCE of two models; negative delta means ``model`` is better.

    ``train_counts`` is the training-period engagement count of every user
    (bucket edges come from its quantiles); ``example_counts`` is that count
    for the user of each evaluation example.
    """
    edges = segment_edges(train_counts)
    seg = assign_segments(example_counts, edges)
    n_buckets = len(edges) + 1
    return SegmentReport(
        edges=[float(e) for e in edges],
        counts=[int(np.sum(seg == b)) for b in range(n_buckets)],
        nce_base=segment_nce(example_counts, labels, base_predictions, edges),
        nce_model=segment_nce(example_counts, labels, model_predictions, edges),
    )


# ---------------------------------------------------------------------------
# Frames


@dataclass
class MetricsFrame:
    day: int
    nce: list[float | None] = field(default_factory=list)
    auc: list[float | None] = field(default_factory=list)
    positive_rate: list[float | None] = field(default_factory=list)
    n_eval: int = 0
    active_params: dict[str, int] = field(default_factory=dict)
    dense_params: int = 0
    distinct_raw_ids: dict[str, int] = field(default_factory=dict)
    collision_rates: dict[str, float] = field(default_factory=dict)
    segment_edges: list[float] = field(default_factory=list)
    segment_nce: list[float | None] = field(default_factory=list)
    absent: bool = False
    label: str = ""

    @property
    def total_active_params(self) -> int:
        return self.dense_params + sum(self.active_params.values())

    def mean_nce(self) -> float | None:
        vals = [v for v in self.nce if v is not None]
        return float(np.mean(vals)) if vals else None

    def to_json(self) -> str:
        d = asdict(self)
        d["frame_version"] = FRAME_VERSION
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MetricsFrame":
        d = json.loads(line)
        version = d.pop("frame_version", None)
        if version != FRAME_VERSION:
            raise ValueError(f"frame version {version} is not supported (expected {FRAME_VERSION})")
        return cls(**d)


def write_frames(path, frames: Sequence[MetricsFrame]) -> None:
    with open(path, "w") as fh:
        for f in frames:
            fh.write(f.to_json() + "\n")


def read_frames(path) -> list[MetricsFrame]:
    frames, versions = [], set()
    with open(path) as fh:
        for line in fh:
            if line.strip():
                versions.add(json.loads(line).get("frame_version"))
                if versions != {FRAME_VERSION}:
                    raise ValueError(
                        f"{path}: incompatible frame schema versions {sorted(map(str, versions))}"
                    )
                frames.append(MetricsFrame.from_json(line))
    return frames


def relative_pct(values, baseline: float) -> list[float | None]:
    return [None if v is None else 100.0 * (v / baseline - 1.0) for v in values]


def format_table(header: Sequence[str], rows: Sequence[Sequence], floatfmt: str = "{:.4f}") -> str:
    """Render rows as aligned, whitespace-separated column text."""
    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return floatfmt.format(v)
        return str(v)

    cells = [list(map(str, header))] + [[cell(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells) + "\n"
