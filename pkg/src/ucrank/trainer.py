"""Recurrent day-by-day training, sweeps, drift probes and the MovieLens run."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__, kernels
from .clustering import ClusterMap, CoEngagementGraph, update_clusters
from .core import SECONDS_PER_DAY, ConfigError, EventLog, Formulation, ModelConfig, day_boundaries, split_by_days
from .ingest import MovieLensProtocolConfig, SyntheticConfig, generate_synthetic, movielens_split, parse_movielens
from .listbuilder import EngagementIndex, Examples, ListSpec, featurize
from .metrics import MetricsFrame, auc, format_table, maybe, nce, relative_pct, segment_edges, segment_nce, write_frames
from .model import RankingModel

log = logging.getLogger(__name__)

STRATEGIES = {
    "ic-sampling": Formulation.IC,
    "uc-sampling": Formulation.UC,
    "uc-clustering": Formulation.UC,
    "hybrid": Formulation.HYBRID,
}
SWEEP_AXES = ("hash_size", "embed_dim", "strategy", "pooling")


def _check_strategy(name: str) -> str:
    key = name.lower().replace("_", "-")
    if key not in STRATEGIES:
        raise ConfigError(f"unknown strategy {name!r}; choose from {sorted(STRATEGIES)}")
    return key


@dataclass
class StrategyConfig:
    """How ChannelLists are built for a run."""

    name: str = "uc-sampling"
    ic_cap: int = 64
    uc_cap: int = 64
    seed: int = 0
    max_cluster_size: int = 256
    max_remap_ratio: float = 0.2
    graph_decay: float = 1.0
    graph_min_weight: float = 2.0
    max_users_per_item: int = 64

    def __post_init__(self):
        self.name = _check_strategy(self.name)
        if self.ic_cap < 1 or self.uc_cap < 1:
            raise ConfigError("list caps must be at least 1")

    @property
    def formulation(self) -> Formulation:
        return STRATEGIES[self.name]

    def list_spec(self, num_types: int) -> ListSpec:
        f = self.formulation
        return ListSpec(
            num_types=num_types,
            ic_cap=self.ic_cap if f in (Formulation.IC, Formulation.HYBRID) else 0,
            uc_cap=self.uc_cap if f in (Formulation.UC, Formulation.HYBRID) else 0,
            uc_mode="clustering" if self.name == "uc-clustering" else "sampling",
            seed=self.seed,
        )


@dataclass
class RecurrentSchedule:
    """Ordered day partitions plus the per-day protocol knobs.

    Day ``t`` (1-based) is evaluated on its first ``eval_head_size`` events
    with the parameters left after training on days ``1..t-1``; only then is
    it trained on.
    """

    days: list[EventLog]
    eval_head_size: int = 10_000
    passes_per_day: int = 1
    warm_start: bool = True
    batch_size: int = 256

    def __post_init__(self):
        if self.eval_head_size < 0 or self.passes_per_day < 0 or self.batch_size < 1:
            raise ConfigError("eval_head_size/passes_per_day must be >= 0 and batch_size >= 1")


@dataclass
class RunResult:
    frames: list[MetricsFrame]
    model: RankingModel
    index: EngagementIndex
    cluster_map: ClusterMap | None = None
    train_losses: list[float] = field(default_factory=list)
    cluster_stats: list[dict] = field(default_factory=list)
    ordinal: int = 0


def evaluate(model: RankingModel, ex: Examples, train_counts=None, day: int = 0,
             label: str = "") -> MetricsFrame:
    """Metrics of frozen ``model`` on ``ex``; per task, plus activeness buckets."""
    frame = MetricsFrame(day=day, label=label, n_eval=len(ex), dense_params=model.dense_param_count)
    for name, t in model.tables.items():
        g = t.report_growth()
        frame.active_params[name] = int(g.active_params)
        frame.distinct_raw_ids[name] = int(g.distinct_raw_ids)
        frame.collision_rates[name] = float(g.collision_rate)
    if len(ex) == 0:
        frame.absent = True
        return frame
    probs = model.predict(ex)
    p = probs[np.arange(len(ex)), ex.tasks]
    for k in range(model.config.num_tasks):
        sel = ex.tasks == k
        frame.nce.append(maybe(nce, p[sel], ex.labels[sel]))
        frame.auc.append(maybe(auc, p[sel], ex.labels[sel]))
        frame.positive_rate.append(float(ex.labels[sel].mean()) if sel.any() else None)
    if train_counts is not None and len(train_counts):
        edges = segment_edges(train_counts)
        frame.segment_edges = [float(e) for e in edges]
        frame.segment_nce = segment_nce(ex.activity, ex.labels, p, edges)
    return frame


def _train_pass(model: RankingModel, ex: Examples, batch_size: int) -> list[float]:
    losses = []
    for lo in range(0, len(ex), batch_size):
        batch = ex.take(slice(lo, lo + batch_size))
        losses.append(model.train_step(batch))
    return losses


def run_recurrent(model: RankingModel, schedule: RecurrentSchedule, strategy: StrategyConfig,
                  label: str = "", progress=None) -> RunResult:
    """Train day by day, evaluating each next day's head before training on it.

    Each day is featurized once, causally, when its turn comes; the head
    rows are scored with frozen parameters and then the whole day (head
    included) is trained for ``passes_per_day`` passes in log order.
    Returns one frame per evaluated day (days 2..D, 1-based).
    """
    if model.config.formulation != strategy.formulation:
        raise ConfigError(f"strategy {strategy.name} needs a {strategy.formulation.value} model")
    num_types = model.config.num_tasks
    spec = strategy.list_spec(num_types)
    index = EngagementIndex()
    clustered = spec.uc_mode == "clustering" and spec.uc_cap > 0
    cmap = ClusterMap(strategy.max_cluster_size, strategy.max_remap_ratio) if clustered else None
    graph = CoEngagementGraph(strategy.graph_decay, strategy.graph_min_weight,
                              strategy.max_users_per_item, seed=strategy.seed) if clustered else None
    result = RunResult(frames=[], model=model, index=index, cluster_map=cmap)
    fresh_config = model.config

    for d, day_events in enumerate(schedule.days):
        day_no = d + 1
        train_counts = np.fromiter(index.activity.values(), dtype=np.int64)
        ex = featurize(day_events, index, spec, ordinal_offset=result.ordinal, cluster_map=cmap)
        result.ordinal += len(day_events)
        if d > 0:
            head = ex.take(slice(0, schedule.eval_head_size))
            frame = evaluate(result.model, head, train_counts, day=day_no, label=label)
            result.frames.append(frame)
            if progress:
                progress(frame)
        if not schedule.warm_start and d > 0:
            result.model = RankingModel(fresh_config, result.model.table_dtype)
        for _ in range(schedule.passes_per_day):
            result.train_losses.extend(_train_pass(result.model, ex, schedule.batch_size))
        if clustered:
            graph.add_day(day_events)
            users, adj = graph.graph()
            cmap, st = update_clusters(cmap, users, adj)
            result.cluster_map = cmap
            result.cluster_stats.append(dict(day=day_no, **asdict(st)))
    return result


# ---------------------------------------------------------------------------
# Drift probe


@dataclass
class DriftCurve:
    windows: list[int]
    nce: list[float | None]

    def present(self):
        pts = [(w, v) for w, v in zip(self.windows, self.nce) if v is not None]
        return np.array([p[0] for p in pts], dtype=np.float64), np.array([p[1] for p in pts])

    def spearman(self) -> float:
        w, v = self.present()
        return float(stats.spearmanr(w, v).statistic)

    def slope_ci(self, level: float = 0.95) -> tuple[float, float, float]:
        """OLS slope of NCE on window index with a two-sided t interval."""
        w, v = self.present()
        fit = stats.linregress(w, v)
        half = stats.t.ppf(0.5 + level / 2, len(w) - 2) * fit.stderr
        return float(fit.slope), float(fit.slope - half), float(fit.slope + half)


def run_drift_probe(model: RankingModel, future_events: EventLog, window_size: int,
                    index: EngagementIndex, strategy: StrategyConfig, cluster_map=None,
                    ordinal_offset: int = 0, start: int | None = None,
                    num_windows: int | None = None) -> DriftCurve:
    """NCE of a frozen model over consecutive time windows of ``window_size`` seconds.

    Lists keep being built from the growing engagement index (that is data,
    not parameters); the model itself is never updated. Windows without
    both label classes are reported as ``None``.
    """
    if window_size <= 0:
        raise ConfigError("window_size must be positive")
    spec = strategy.list_spec(model.config.num_tasks)
    ex = featurize(future_events, index, spec, ordinal_offset=ordinal_offset, cluster_map=cluster_map)
    t0 = int(future_events.timestamp[0]) if start is None and len(future_events) else (start or 0)
    win = (ex.timestamps - t0) // window_size
    n = num_windows if num_windows is not None else (int(win.max()) + 1 if len(win) else 0)
    probs = model.predict(ex) if len(ex) else np.zeros((0, model.config.num_tasks))
    p = probs[np.arange(len(ex)), ex.tasks]
    out = []
    for w in range(n):
        sel = win == w
        out.append(maybe(nce, p[sel], ex.labels[sel]) if sel.any() else None)
    return DriftCurve(list(range(n)), out)


def probe_after_prefix(cfg: "ExperimentConfig", train_days: int, window_days: float = 1.0,
                       days: list[EventLog] | None = None) -> DriftCurve:
    """Train recurrently on the first ``train_days`` days, then freeze and probe the rest."""
    days = load_days(cfg) if days is None else days
    if not 1 <= train_days < len(days):
        raise ConfigError(f"train_days must be in [1, {len(days) - 1}] for {len(days)} days")
    schedule = RecurrentSchedule(days[:train_days], cfg.eval_head_size, cfg.passes_per_day,
                                 cfg.warm_start, cfg.batch_size)
    res = run_recurrent(build_model(cfg), schedule, cfg.strategy, label="drift")
    future = days[train_days]
    for d in days[train_days + 1:]:
        future = future.concat(d)
    first = days[train_days]
    start = int(first.timestamp[0]) // SECONDS_PER_DAY * SECONDS_PER_DAY if len(first) else None
    return run_drift_probe(res.model, future, int(window_days * SECONDS_PER_DAY), res.index,
                           cfg.strategy, res.cluster_map, ordinal_offset=res.ordinal, start=start)


# ---------------------------------------------------------------------------
# Experiment configuration


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one run; serialisable to TOML sections."""

    kind: str = "recurrent"
    model: ModelConfig = field(default_factory=ModelConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    synthetic: SyntheticConfig | None = None
    events_path: str | None = None
    eval_head_size: int = 10_000
    passes_per_day: int = 1
    warm_start: bool = True
    batch_size: int = 256
    table_tracker: str = "exact"
    movielens: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("recurrent", "movielens"):
            raise ConfigError(f"unknown run kind {self.kind!r}")
        if self.kind == "recurrent" and (self.synthetic is None) == (self.events_path is None):
            raise ConfigError("a recurrent run needs exactly one of [synthetic] or events_path")
        if self.kind == "movielens" and "ratings" not in self.movielens:
            raise ConfigError("a movielens run needs [movielens] ratings = <path>")
        if self.table_tracker not in ("exact", "hll"):
            raise ConfigError("table_tracker must be 'exact' or 'hll'")
        self.model.formulation = self.strategy.formulation

    def to_dict(self) -> dict:
        d = {"run": {"kind": self.kind, "eval_head_size": self.eval_head_size,
                     "passes_per_day": self.passes_per_day, "warm_start": self.warm_start,
                     "batch_size": self.batch_size, "table_tracker": self.table_tracker},
             "model": self.model.to_dict(), "strategy": asdict(self.strategy)}
        if self.events_path is not None:
            d["run"]["events_path"] = self.events_path
        if self.synthetic is not None:
            d["synthetic"] = self.synthetic.to_dict()
        if self.movielens:
            d["movielens"] = dict(self.movielens)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {"run", "model", "strategy", "synthetic", "movielens"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        run = dict(d.get("run", {}))
        allowed = {f.name for f in fields(cls)} - {"model", "strategy", "synthetic", "movielens"}
        bad = set(run) - allowed
        if bad:
            raise ConfigError(f"unknown [run] keys: {sorted(bad)}")
        strat = dict(d.get("strategy", {}))
        bad = set(strat) - {f.name for f in fields(StrategyConfig)}
        if bad:
            raise ConfigError(f"unknown [strategy] keys: {sorted(bad)}")
        model = dict(d.get("model", {}))
        try:
            return cls(
                model=ModelConfig.from_dict(model),
                strategy=StrategyConfig(**strat),
                synthetic=SyntheticConfig.from_dict(d["synthetic"]) if "synthetic" in d else None,
                movielens=dict(d.get("movielens", {})),
                **run,
            )
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def with_override(self, dotted: str, value) -> "ExperimentConfig":
        """Copy with one ``section.key`` replaced (sections as in the TOML layout)."""
        d = self.to_dict()
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        d.setdefault(section, {})[key] = value
        return ExperimentConfig.from_dict(d)


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    """Read a TOML config, or a run manifest (JSON with a ``config`` entry)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    text = path.read_text()
    if path.suffix == ".json":
        d = json.loads(text)
        d = d.get("config", d)
    else:
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        try:
            d = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
    return ExperimentConfig.from_dict(d)


def load_days(cfg: ExperimentConfig) -> list[EventLog]:
    if cfg.synthetic is not None:
        events, _ = generate_synthetic(cfg.synthetic)
        start = cfg.synthetic.start_day * 86_400
        bounds = [start + 86_400 * d for d in range(cfg.synthetic.num_days + 1)]
    else:
        events = EventLog.load(cfg.events_path)
        bounds = day_boundaries(events.timestamp)
    return split_by_days(events, bounds)


def build_model(cfg: ExperimentConfig) -> RankingModel:
    return RankingModel(cfg.model, table_tracker=cfg.table_tracker)


def run_experiment(cfg: ExperimentConfig, days: list[EventLog] | None = None, label: str = "",
                   progress=None) -> RunResult:
    days = load_days(cfg) if days is None else days
    schedule = RecurrentSchedule(days, cfg.eval_head_size, cfg.passes_per_day, cfg.warm_start,
                                 cfg.batch_size)
    return run_recurrent(build_model(cfg), schedule, cfg.strategy, label=label or cfg.strategy.name,
                         progress=progress)


# ---------------------------------------------------------------------------
# Sweeps


@dataclass
class SweepTable:
    axis: str
    values: list
    scores: list[float | None]
    baseline: object
    frames: dict = field(default_factory=dict)

    @property
    def relative_pct(self) -> list[float | None]:
        base = self.scores[self.values.index(self.baseline)]
        return relative_pct(self.scores, base)

    def format(self) -> str:
        rows = []
        for v, s, r in zip(self.values, self.scores, self.relative_pct):
            rows.append([str(v), s, "-" if v == self.baseline else r])
        return format_table([self.axis, "nce", "rel_nce_pct"], rows)


def score_frames(frames: list[MetricsFrame], last_days: int) -> float | None:
    """Mean NCE over the final ``last_days`` present frames."""
    vals = [f.mean_nce() for f in frames if not f.absent and f.mean_nce() is not None]
    vals = vals[-last_days:] if last_days > 0 else vals
    return float(np.mean(vals)) if vals else None


def run_sweep(base: ExperimentConfig, axis: str, values: list, baseline=None,
              last_days: int = 10, days: list[EventLog] | None = None) -> SweepTable:
    """One full recurrent run per value of ``axis``; everything else (seed included) fixed."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    baseline = values[0] if baseline is None else baseline
    if baseline not in values:
        raise ConfigError(f"baseline {baseline!r} is not among the swept values")
    days = load_days(base) if days is None else days
    key = "strategy.name" if axis == "strategy" else f"model.{axis}"
    scores, frames = [], {}
    for v in values:
        cfg = base.with_override(key, v)
        res = run_experiment(cfg, days, label=f"{axis}={v}")
        frames[v] = res.frames
        scores.append(score_frames(res.frames, last_days))
    return SweepTable(axis, list(values), scores, baseline, frames)


# ---------------------------------------------------------------------------
# MovieLens


def run_movielens(cfg: ExperimentConfig, formulations=("ic-sampling", "uc-sampling", "hybrid"),
                  events: EventLog | None = None) -> dict[str, float]:
    """Static 4:1 per-user temporal split; test AUC per formulation.

    Training examples are featurized causally in streaming chunks (lists
    are ``cfg.strategy`` caps, attentive pooling per ``cfg.model``); test
    examples only see the engagement index of the training set.
    ``movielens`` section keys: ``ratings``, ``epochs`` (1),
    ``user_fraction`` (1.0), ``chunk`` (50_000).
    """
    ml = cfg.movielens
    proto = MovieLensProtocolConfig(**{k: ml[k] for k in
                                       ("positive_threshold", "ic_list_cap", "uc_list_cap",
                                        "train_fraction") if k in ml})
    if events is None:
        events, _ = parse_movielens(ml["ratings"], proto)
    frac = float(ml.get("user_fraction", 1.0))
    if frac < 1.0:
        keep = kernels.hash_slots(events.user_id, cfg.strategy.seed, 1 << 30) < frac * (1 << 30)
        events = events[keep]
    train, test = movielens_split(events, proto)
    epochs = int(ml.get("epochs", 1))
    chunk = int(ml.get("chunk", 50_000))
    out = {}
    for name in formulations:
        strat = StrategyConfig(**{**asdict(cfg.strategy), "name": name,
                                  "ic_cap": proto.ic_list_cap, "uc_cap": proto.uc_list_cap})
        mcfg = ModelConfig.from_dict({**cfg.model.to_dict(), "formulation": strat.formulation.value,
                                      "num_tasks": 1})
        model = RankingModel(mcfg, table_tracker=cfg.table_tracker)
        spec = strat.list_spec(1)
        for _ in range(epochs):
            index = EngagementIndex()
            for lo in range(0, len(train), chunk):
                ex = featurize(train[lo:lo + chunk], index, spec, ordinal_offset=lo)
                _train_pass(model, ex, cfg.batch_size)
        scores, labels = [], []
        for lo in range(0, len(test), chunk):
            ex = featurize(test[lo:lo + chunk], index, spec, ordinal_offset=len(train) + lo,
                           update_index=False)
            scores.append(model.predict(ex)[:, 0])
            labels.append(ex.labels)
        out[name] = auc(np.concatenate(scores), np.concatenate(labels))
        log.info("movielens %s auc=%.4f", name, out[name])
    return out


# ---------------------------------------------------------------------------
# Run directories


def write_run(run_dir: str | os.PathLike, cfg: ExperimentConfig, result: RunResult | None = None,
              extra: dict | None = None) -> Path:
    """Fixed layout: manifest.json, frames.jsonl, checkpoints/, reports/."""
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run_dir / "reports").mkdir(exist_ok=True)
    manifest = {"config": cfg.to_dict(), "version": __version__, "kernel_backend": kernels.BACKEND,
                "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}
    if extra:
        manifest.update(extra)
    if result is not None:
        write_frames(run_dir / "frames.jsonl", result.frames)
        result.model.save(run_dir / "checkpoints" / "model.npz")
        if result.cluster_map is not None:
            result.cluster_map.save(run_dir / "checkpoints" / "clusters.txt")
        manifest["n_frames"] = len(result.frames)
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return run_dir
