"""Command-line entry point: ``ucrank <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error
(including missing input files).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from . import __version__
from .clustering import ClusterMap
from .core import ConfigError
from .ingest import (
    MovieLensProtocolConfig, SyntheticConfig, generate_synthetic, parse_movielens, synthetic_meta,
)
from .metrics import MetricsFrame, format_table, read_frames, write_frames
from .trainer import (
    SWEEP_AXES, ExperimentConfig, load_config, load_days, probe_after_prefix, run_experiment,
    run_movielens, run_sweep, write_run,
)

log = logging.getLogger("ucrank")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(str(p))
    return p


def _parse_value(text: str):
    """Interpret an override value as a TOML literal, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _read_toml(path) -> dict:
    try:
        return tomllib.loads(_require_file(path).read_text())
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None


def _synthetic_from_file(path) -> SyntheticConfig:
    d = _read_toml(path)
    return SyntheticConfig.from_dict(d.get("synthetic", d))


def _experiment_config(args) -> ExperimentConfig:
    """Config file first, then source flags, then explicit flags, then ``--set`` pairs."""
    sources = [s for s in ("synthetic", "events", "movielens") if getattr(args, s, None)]
    if len(sources) > 1:
        raise UsageError(f"conflicting data sources: {', '.join('--' + s for s in sources)}")
    if args.config:
        cfg = load_config(args.config)
    elif args.synthetic:
        cfg = ExperimentConfig(synthetic=_synthetic_from_file(args.synthetic))
    elif args.events:
        cfg = ExperimentConfig(events_path=str(args.events))
    elif args.movielens:
        cfg = ExperimentConfig(kind="movielens", movielens={"ratings": str(args.movielens)})
    else:
        raise UsageError("give --config or one data source (--synthetic, --events, --movielens)")

    d = cfg.to_dict()
    if args.config and args.synthetic:
        d["synthetic"] = _synthetic_from_file(args.synthetic).to_dict()
        d["run"].pop("events_path", None)
        d["run"]["kind"] = "recurrent"
    elif args.config and args.events:
        d.pop("synthetic", None)
        d["run"]["events_path"] = str(args.events)
        d["run"]["kind"] = "recurrent"
    elif args.config and args.movielens:
        d["run"]["kind"] = "movielens"
        d.setdefault("movielens", {})["ratings"] = str(args.movielens)
    flag_keys = {"strategy": "strategy.name", "pooling": "model.pooling",
                 "hash_size": "model.hash_size", "embed_dim": "model.embed_dim",
                 "num_days": "synthetic.num_days", "seed": "model.rng_seed"}
    pairs = [(key, getattr(args, attr)) for attr, key in flag_keys.items()
             if getattr(args, attr, None) is not None]
    for item in args.set or []:
        key, eq, value = item.partition("=")
        if not eq:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        pairs.append((key.strip(), _parse_value(value.strip())))
    for key, value in pairs:
        section, _, name = key.partition(".")
        if not name:
            raise UsageError(f"override {key!r} must look like section.key")
        if section == "synthetic" and "synthetic" not in d:
            raise UsageError(f"override {key!r} needs a synthetic data source")
        d.setdefault(section, {})[name] = value
    cfg = ExperimentConfig.from_dict(d)
    if cfg.events_path is not None:
        _require_file(cfg.events_path)
    if cfg.kind == "movielens":
        _require_file(cfg.movielens["ratings"])
    return cfg


def _progress(frame: MetricsFrame) -> None:
    nce = frame.mean_nce()
    log.info("day %d  nce=%s  active_params=%d", frame.day,
             "-" if nce is None else f"{nce:.4f}", frame.total_active_params)


def _emit(text: str, out_dir: Path | None, name: str) -> None:
    sys.stdout.write(text)
    if out_dir is not None:
        (out_dir / "reports").mkdir(parents=True, exist_ok=True)
        (out_dir / "reports" / name).write_text(text)


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args) -> int:
    out = Path(args.out)
    if args.movielens:
        proto = MovieLensProtocolConfig(positive_threshold=args.threshold)
        events, meta = parse_movielens(_require_file(args.movielens), proto)
        sidecar = None
    else:
        syn = _synthetic_from_file(args.synthetic)
        events, truth = generate_synthetic(syn)
        meta = synthetic_meta(events, syn)
        sidecar = truth
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / ("events.csv" if args.format == "csv" else "events.bin")
    if args.format == "csv":
        events.write_csv(log_path)
    else:
        events.write_binary(log_path)
    if sidecar is not None:
        sidecar.write_sidecar(out / "sidecar.txt")
    else:
        (out / "sidecar.txt").write_text(
            "sidecar_version 1\n"
            f"source.path {Path(args.movielens).resolve()}\n"
            f"config.positive_threshold {args.threshold}\n"
            f"totals.events {len(events)}\ntotals.users {meta.user_count}\n"
            f"totals.items {meta.item_count}\ntotals.days {meta.num_days}\n"
            f"totals.positives {int(events.label.sum())}\n"
        )
    rows = [["events", len(events)], ["users", meta.user_count], ["items", meta.item_count],
            ["days", meta.num_days], ["positives", int(events.label.sum())]]
    sys.stdout.write(format_table(["quantity", "count"], rows))
    log.info("wrote %s", log_path)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _experiment_config(args)
    out = Path(args.out)
    if cfg.kind == "movielens":
        formulations = args.formulations.split(",") if args.formulations else \
            ["ic-sampling", "uc-sampling", "hybrid"]
        aucs = run_movielens(cfg, formulations)
        write_run(out, cfg, extra={"auc": aucs})
        _emit(format_table(["formulation", "auc"], [[k, v] for k, v in aucs.items()]), out, "auc.txt")
        return EXIT_OK
    result = run_experiment(cfg, progress=_progress)
    write_run(out, cfg, result, extra={"cluster_stats": result.cluster_stats} if result.cluster_stats else None)
    frames = [f for f in result.frames if not f.absent]
    if frames:
        last = frames[-1]
        sys.stdout.write(f"final day {last.day}: nce={last.mean_nce():.4f} "
                         f"active_params={last.total_active_params}\n")
    return EXIT_OK


def _frames_by_day(frames: list[MetricsFrame]) -> dict[int, MetricsFrame]:
    return {f.day: f for f in frames}


def report_tables(runs: list[tuple[str, list[MetricsFrame]]]) -> dict[str, str]:
    """Column-text tables comparing each run against the first one.

    Relative values are ``100 * (run / baseline - 1)``; negative means the
    run has lower (better) NCE than the baseline.
    """
    names = [n for n, _ in runs]
    by_day = [_frames_by_day(fr) for _, fr in runs]
    days = sorted(set().union(*[set(b) for b in by_day]))
    base = by_day[0]
    tables = {}

    rows = []
    for day in days:
        row: list = [day]
        b = base.get(day)
        b_nce = None if b is None or b.absent else b.mean_nce()
        for run in by_day:
            f = run.get(day)
            v = None if f is None or f.absent else f.mean_nce()
            row.append(v)
            row.append(None if v is None or b_nce is None else 100.0 * (v / b_nce - 1.0))
        rows.append(row)
    header = ["day"] + [c for n in names for c in (f"nce:{n}", f"rel_pct:{n}")]
    tables["nce.txt"] = format_table(header, rows)

    rows = [[day] + [None if run.get(day) is None else run[day].total_active_params for run in by_day]
            for day in days]
    tables["growth.txt"] = format_table(["day"] + [f"active_params:{n}" for n in names], rows)

    n_seg = max((len(f.segment_nce) for fr in by_day for f in fr.values()), default=0)
    if n_seg:
        rows = []
        for s in range(n_seg):
            row: list = [s]
            for run in by_day:
                deltas = []
                for day, f in run.items():
                    b = base.get(day)
                    if b is None or len(f.segment_nce) <= s or len(b.segment_nce) <= s:
                        continue
                    if f.segment_nce[s] is not None and b.segment_nce[s] is not None:
                        deltas.append(100.0 * (f.segment_nce[s] / b.segment_nce[s] - 1.0))
                row.append(float(np.mean(deltas)) if deltas else None)
            rows.append(row)
        tables["segments.txt"] = format_table(["segment"] + [f"rel_pct:{n}" for n in names], rows)
    return tables


def cmd_report(args) -> int:
    runs = []
    for p in args.frames:
        path = _require_file(p)
        runs.append((path.parent.name if path.name == "frames.jsonl" else path.stem, read_frames(path)))
    out = Path(args.out) if args.out else None
    for name, text in report_tables(runs).items():
        if args.table == "all" or name.startswith(args.table):
            sys.stdout.write(f"# {name[:-4]}\n")
            _emit(text, out, name)
    return EXIT_OK


def _parse_axis_values(axis: str, raw: str) -> list:
    vals = [v.strip() for v in raw.split(",") if v.strip()]
    if axis in ("hash_size", "embed_dim"):
        try:
            return [int(v) for v in vals]
        except ValueError:
            raise UsageError(f"--values for {axis} must be integers") from None
    return vals


def cmd_sweep(args) -> int:
    cfg = _experiment_config(args)
    values = _parse_axis_values(args.axis, args.values)
    baseline = _parse_axis_values(args.axis, args.baseline)[0] if args.baseline else None
    table = run_sweep(cfg, args.axis, values, baseline=baseline, last_days=args.last_days)
    out = Path(args.out)
    write_run(out, cfg, extra={"sweep": {"axis": args.axis, "values": values,
                                         "baseline": table.baseline, "last_days": args.last_days,
                                         "scores": table.scores}})
    for v, frames in table.frames.items():
        write_frames(out / f"frames_{args.axis}_{v}.jsonl", frames)
    _emit(table.format(), out, f"sweep_{args.axis}.txt")
    return EXIT_OK


def cmd_drift(args) -> int:
    cfg = _experiment_config(args)
    if cfg.kind != "recurrent":
        raise UsageError("drift needs a recurrent (day-partitioned) data source")
    days = load_days(cfg)
    if not 1 <= args.train_days < len(days):
        raise UsageError(f"--train-days must be in [1, {len(days) - 1}] for {len(days)} days")
    curve = probe_after_prefix(cfg, args.train_days, args.window_days, days)
    rho = curve.spearman() if len(curve.present()[0]) > 1 else None
    slope = curve.slope_ci() if len(curve.present()[0]) > 2 else (None, None, None)
    out = Path(args.out)
    frames = [MetricsFrame(day=w, nce=[v], absent=v is None, label="drift")
              for w, v in zip(curve.windows, curve.nce)]
    write_run(out, cfg, extra={"drift": {"train_days": args.train_days, "window_days": args.window_days,
                                         "spearman": rho, "slope": slope[0],
                                         "slope_ci95": [slope[1], slope[2]]}})
    write_frames(out / "frames.jsonl", frames)
    text = format_table(["window", "nce"], [[w, v] for w, v in zip(curve.windows, curve.nce)])
    text += f"# spearman {rho if rho is None else f'{rho:.4f}'}\n"
    if slope[0] is not None:
        text += f"# slope {slope[0]:.3e} ci95 [{slope[1]:.3e}, {slope[2]:.3e}]\n"
    _emit(text, out, "drift.txt")
    return EXIT_OK


def cmd_clusters(args) -> int:
    cmap = ClusterMap.load(_require_file(args.checkpoint))
    text = format_table(["cluster_size", "count"], cmap.size_histogram())
    _emit(text, Path(args.out) if args.out else None, "cluster_sizes.txt")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_source_flags(p: argparse.ArgumentParser, config_required: bool = False) -> None:
    p.add_argument("--config", required=config_required, help="TOML config or a run manifest.json")
    p.add_argument("--synthetic", help="synthetic generator config (TOML); replaces the data source")
    p.add_argument("--events", help="canonical event log (binary or CSV); replaces the data source")
    p.add_argument("--movielens", help="MovieLens ratings.csv; switches to the static split protocol")
    p.add_argument("--strategy", help="ic-sampling, uc-sampling, uc-clustering or hybrid")
    p.add_argument("--pooling", choices=["SUM", "ATTENTION"])
    p.add_argument("--hash-size", type=int)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--num-days", type=int, help="synthetic days to generate")
    p.add_argument("--seed", type=int, help="model initialisation seed")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override any config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = argparse.ArgumentParser(prog="ucrank", description=__doc__.splitlines()[0],
                                     parents=[common])
    parser.add_argument("--version", action="version", version=f"ucrank {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    p = add("ingest", help="write a canonical event log and sidecar")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--movielens", help="MovieLens ratings.csv")
    src.add_argument("--synthetic", help="synthetic generator config (TOML)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", choices=["binary", "csv"], default="binary")
    p.add_argument("--threshold", type=float, default=4.0, help="MovieLens positive rating threshold")
    p.set_defaults(func=cmd_ingest)

    p = add("train", help="recurrent or MovieLens training run")
    _add_source_flags(p)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--formulations", help="comma list for MovieLens runs")
    p.set_defaults(func=cmd_train)

    p = add("report", help="tables from one or more frames files")
    p.add_argument("frames", nargs="+", help="frames.jsonl files; the first is the baseline")
    p.add_argument("--table", choices=["all", "nce", "growth", "segments"], default="all")
    p.add_argument("--out", help="also write tables under OUT/reports/")
    p.set_defaults(func=cmd_report)

    p = add("sweep", help="one recurrent run per value of an axis")
    _add_source_flags(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--baseline", help="value that relative NCE is measured against (default: first)")
    p.add_argument("--last-days", type=int, default=10, help="score = mean NCE over the final N days")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = add("drift", help="train on a prefix of days, then score the frozen model per window")
    _add_source_flags(p)
    p.add_argument("--train-days", type=int, required=True)
    p.add_argument("--window-days", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_drift)

    p = add("clusters", help="cluster-size histogram of a saved cluster map")
    p.add_argument("checkpoint", help="checkpoints/clusters.txt of a uc-clustering run")
    p.add_argument("--out")
    p.set_defaults(func=cmd_clusters)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"ucrank: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"ucrank: error: no such file: {e.filename or e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, IsADirectoryError) as e:
        print(f"ucrank: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # any other failure is a runtime error
        log.debug("failure", exc_info=True)
        print(f"ucrank: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
