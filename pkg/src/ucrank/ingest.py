"""MovieLens ingestion and the synthetic dynamic-inventory log generator."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import SECONDS_PER_DAY, ConfigError, DatasetMeta, EventLog, seed_rng

ITEM_ID_BASE = 1_000_000_000
SIDECAR_VERSION = 1


class ParseError(ValueError):
    pass


# ---------------------------------------------------------------------------
# MovieLens


@dataclass
class MovieLensProtocolConfig:
    positive_threshold: float = 4.0
    ic_list_cap: int = 512
    uc_list_cap: int = 512
    train_fraction: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie strictly between 0 and 1")
        if self.ic_list_cap < 1 or self.uc_list_cap < 1:
            raise ConfigError("list caps must be at least 1")


def _locate_bad_line(path) -> str:
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.strip().split(",")
            if lineno == 1 and parts and parts[0] == "userId":
                continue
            if not line.strip():
                continue
            try:
                if len(parts) != 4:
                    raise ValueError
                int(parts[0]), int(parts[1]), float(parts[2]), int(parts[3])
            except ValueError:
                return f"{path}:{lineno}: malformed rating line {line.strip()!r}"
    return f"{path}: malformed ratings file"


def parse_movielens(path, config: MovieLensProtocolConfig | None = None):
    """Read a MovieLens ``ratings.csv`` into a time-sorted single-task log.

    Returns ``(events, meta)``; label is 1 iff rating >= threshold.
    """
    import pandas as pd

    config = config or MovieLensProtocolConfig()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path) as fh:
        first = fh.readline()
    if not first.strip():
        raise ParseError(f"{path}: empty ratings file")
    has_header = not first.split(",")[0].strip().lstrip("-").isdigit()
    try:
        df = pd.read_csv(
            path,
            header=0 if has_header else None,
            names=["userId", "movieId", "rating", "timestamp"],
            dtype={"userId": np.int64, "movieId": np.int64, "rating": np.float64,
                   "timestamp": np.int64},
            engine="c",
        )
    except (ValueError, pd.errors.ParserError):
        raise ParseError(_locate_bad_line(path)) from None
    if df.isnull().values.any():
        raise ParseError(_locate_bad_line(path))
    if len(df) == 0:
        raise ParseError(f"{path}: empty ratings file")
    events = EventLog.from_columns(
        df["userId"].to_numpy().astype(np.uint64),
        df["movieId"].to_numpy().astype(np.uint64),
        df["timestamp"].to_numpy(),
        0,
        (df["rating"].to_numpy() >= config.positive_threshold).astype(np.uint8),
    )
    return events, events.meta(num_tasks=1)


def movielens_split(events: EventLog, config: MovieLensProtocolConfig | None = None):
    """Per-user temporal split: each user's earliest ``train_fraction`` go to train.

    Ties in time break by item id. Users with fewer than two events go
    entirely to train; everyone else keeps at least one event on each side.
    """
    config = config or MovieLensProtocolConfig()
    n = len(events)
    if n == 0:
        return EventLog(), EventLog()
    rec = events.records
    order = np.lexsort((rec["item_id"], rec["timestamp"], rec["user_id"]))
    users = rec["user_id"][order]
    starts = np.flatnonzero(np.r_[True, users[1:] != users[:-1]])
    counts = np.diff(np.r_[starts, n])
    n_train = np.floor(counts * config.train_fraction + 0.5).astype(np.int64)
    n_train = np.where(counts < 2, counts, np.clip(n_train, 1, counts - 1))
    rank = np.arange(n) - np.repeat(starts, counts)
    is_train = np.empty(n, dtype=bool)
    is_train[order] = rank < np.repeat(n_train, counts)
    return EventLog(rec[is_train]), EventLog(rec[~is_train])


# ---------------------------------------------------------------------------
# Synthetic generator


@dataclass
class SyntheticConfig:
    num_users: int = 2000
    items_born_per_day: int = 300
    item_lifespan_days: int = 14
    popularity_skew: float = 1.0
    activeness_segment_weights: list[float] = field(
        default_factory=lambda: [0.04, 0.08, 0.16, 0.28, 0.44])
    num_tasks: int = 1
    events_per_day: int = 12_000
    drift_rate: float = 0.0
    latent_dim: int = 4
    num_days: int = 60
    signal_scale: float = 1.5
    base_logit: float = -0.8
    user_bias_std: float = 1.5
    item_bias_std: float = 0.5
    task_offset_std: float = 0.5
    start_day: int = 19_000
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("num_users", "items_born_per_day", "item_lifespan_days", "num_tasks",
                     "events_per_day", "latent_dim", "num_days"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.popularity_skew < 0 or self.drift_rate < 0:
            raise ConfigError("popularity_skew and drift_rate must be non-negative")
        w = np.asarray(self.activeness_segment_weights, dtype=np.float64)
        if len(w) != 5 or np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ConfigError("activeness_segment_weights must be 5 positive weights summing to 1")
        if self.num_users < 5:
            raise ConfigError("num_users must cover the five activeness segments")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticTruth:
    """Ground truth kept alongside a generated log."""

    config: SyntheticConfig
    user_ids: np.ndarray
    user_segment: np.ndarray
    per_day: list[dict]
    event_prob: np.ndarray | None = None

    def item_rank(self, item_ids) -> np.ndarray:
        """Popularity rank within the item's birth cohort (0 = most popular)."""
        return (np.asarray(item_ids, dtype=np.int64) - ITEM_ID_BASE) % self.config.items_born_per_day

    def item_birth_day(self, item_ids) -> np.ndarray:
        return (np.asarray(item_ids, dtype=np.int64) - ITEM_ID_BASE) // self.config.items_born_per_day

    def write_sidecar(self, path: str | os.PathLike) -> None:
        """Key-value text: ``key value`` lines; per-day rows as ``day.<d>.<field> value``."""
        lines = [f"sidecar_version {SIDECAR_VERSION}"]
        for k, v in self.config.to_dict().items():
            if isinstance(v, list):
                v = ",".join(repr(x) for x in v)
            lines.append(f"config.{k} {v}")
        for row in self.per_day:
            d = row["day"]
            lines += [f"day.{d}.{k} {v}" for k, v in row.items() if k != "day"]
        lines += [f"user.{u}.segment {s}" for u, s in zip(self.user_ids.tolist(),
                                                          self.user_segment.tolist())]
        Path(path).write_text("\n".join(lines) + "\n")

    @staticmethod
    def read_sidecar(path: str | os.PathLike) -> dict[str, str]:
        out = {}
        for line in Path(path).read_text().splitlines():
            if line.strip():
                k, v = line.split(" ", 1)
                out[k] = v
        return out


def _drift_planes(vectors: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One fixed unit direction per row, orthogonal to it: the row's rotation plane."""
    unit = vectors / np.maximum(np.linalg.norm(vectors, axis=1, keepdims=True), 1e-12)
    r = rng.standard_normal(vectors.shape)
    r -= np.sum(r * unit, axis=1, keepdims=True) * unit
    return r / np.maximum(np.linalg.norm(r, axis=1, keepdims=True), 1e-12)


def _rotate(vectors: np.ndarray, planes: np.ndarray, angle: float) -> np.ndarray:
    """Rotate each row by ``angle`` radians towards its plane direction."""
    if angle == 0:
        return vectors
    return np.cos(angle) * vectors + np.sin(angle) * np.linalg.norm(vectors, axis=1, keepdims=True) * planes


def generate_synthetic(config: SyntheticConfig) -> tuple[EventLog, SyntheticTruth]:
    """Simulate a dynamic-inventory interaction log.

    A fixed user population is split evenly into five activeness segments;
    segment ``s`` receives ``activeness_segment_weights[s]`` of all events.
    Each day a cohort of items is born (cohort rank r has popularity weight
    ``(1 + r) ** -popularity_skew``) and lives ``item_lifespan_days`` days.
    Labels come from a logistic latent-factor model
    ``signal_scale * <u, i> + b_u + b_i + base_logit + task_offset``. Each
    user vector turns by ``drift_rate`` radians per day inside its own fixed
    random plane, so the angle to its starting taste grows linearly.
    """
    cfg = config
    rng = seed_rng(cfg.rng_seed, "population")
    U, k = cfg.num_users, cfg.latent_dim
    user_ids = np.arange(1, U + 1, dtype=np.uint64)
    segment = np.repeat(np.arange(5), int(np.ceil(U / 5)))[:U]
    rng.shuffle(segment)
    seg_sizes = np.bincount(segment, minlength=5)
    weights = np.asarray(cfg.activeness_segment_weights)
    user_p = weights[segment] / seg_sizes[segment]
    user_p /= user_p.sum()
    scale = k ** -0.25
    user_vec0 = rng.standard_normal((U, k)) * scale
    planes = _drift_planes(user_vec0, seed_rng(cfg.rng_seed, "drift")) if cfg.drift_rate else None
    user_bias = rng.standard_normal(U) * cfg.user_bias_std
    task_offset = rng.standard_normal(cfg.num_tasks) * cfg.task_offset_std
    task_offset[0] = 0.0

    n_born = cfg.items_born_per_day
    pop = (1.0 + np.arange(n_born)) ** -cfg.popularity_skew
    cohorts: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    parts, probs = [], []
    per_day = []
    seen_users: set[int] = set()
    for day in range(cfg.num_days):
        drng = seed_rng(cfg.rng_seed, "day", day)
        user_vec = _rotate(user_vec0, planes, cfg.drift_rate * day) if planes is not None else user_vec0
        cohorts[day] = (drng.standard_normal((n_born, k)) * scale,
                        drng.standard_normal(n_born) * cfg.item_bias_std)
        cohorts.pop(day - cfg.item_lifespan_days, None)
        live_days = np.array(sorted(cohorts))
        n_live = len(live_days) * n_born

        n = cfg.events_per_day
        u_idx = drng.choice(U, size=n, p=user_p)
        slot = drng.choice(n_live, size=n, p=np.tile(pop, len(live_days)) / (pop.sum() * len(live_days)))
        c_day = live_days[slot // n_born]
        rank = slot % n_born
        item_vec = np.stack([cohorts[c][0] for c in live_days])[slot // n_born, rank]
        item_bias = np.stack([cohorts[c][1] for c in live_days])[slot // n_born, rank]
        task = drng.integers(0, cfg.num_tasks, size=n)
        logit = (cfg.signal_scale * np.sum(user_vec[u_idx] * item_vec, axis=1)
                 + user_bias[u_idx] + item_bias + cfg.base_logit + task_offset[task])
        label = (drng.random(n) < 1.0 / (1.0 + np.exp(-logit))).astype(np.uint8)
        ts = (cfg.start_day + day) * SECONDS_PER_DAY + drng.integers(0, SECONDS_PER_DAY, size=n)
        item_ids = (ITEM_ID_BASE + c_day * n_born + rank).astype(np.uint64)
        order = np.argsort(ts, kind="stable")
        log = EventLog.from_columns(user_ids[u_idx][order], item_ids[order], ts[order],
                                    task[order], label[order], sort=False)
        parts.append(log.records)
        probs.append(1.0 / (1.0 + np.exp(-logit[order])))

        day_items = np.unique(item_ids)
        seen_users.update(np.unique(u_idx).tolist())
        per_day.append(dict(day=day, events=n, positives=int(label.sum()),
                            distinct_users=int(len(np.unique(u_idx))),
                            distinct_items=int(len(day_items)),
                            live_items=n_live, born_items_cumulative=(day + 1) * n_born,
                            cumulative_users=len(seen_users)))

    records = np.concatenate(parts) if parts else np.zeros(0, dtype=EventLog().records.dtype)
    events = EventLog(records)
    # items can first appear on any day of their lifespan, so count first sightings
    days = (events.timestamp // SECONDS_PER_DAY) - cfg.start_day
    first_seen = {}
    for it, d in zip(events.item_id.tolist(), days.tolist()):
        if it not in first_seen:
            first_seen[it] = d
    new_per_day = np.bincount(np.fromiter(first_seen.values(), dtype=np.int64), minlength=cfg.num_days)
    for row, c in zip(per_day, np.cumsum(new_per_day)):
        row["cumulative_items"] = int(c)
    return events, SyntheticTruth(cfg, user_ids, segment, per_day,
                                  np.concatenate(probs) if probs else np.zeros(0))


def synthetic_meta(events: EventLog, config: SyntheticConfig) -> DatasetMeta:
    bounds = [(config.start_day + d) * SECONDS_PER_DAY for d in range(config.num_days + 1)]
    return DatasetMeta(num_tasks=config.num_tasks, day_boundaries=bounds,
                       user_count=int(len(np.unique(events.user_id))),
                       item_count=int(len(np.unique(events.item_id))))
