import json

import numpy as np
import pytest

from ucrank.core import ConfigError, EventLog, Formulation, ModelConfig, split_by_days
from ucrank.ingest import SyntheticConfig
from ucrank.listbuilder import EngagementIndex, featurize
from ucrank.metrics import read_frames
from ucrank.model import RankingModel
from ucrank.trainer import (
    ExperimentConfig, RecurrentSchedule, StrategyConfig, evaluate, load_config, load_days,
    run_drift_probe, run_experiment, run_movielens, run_recurrent, run_sweep, score_frames,
    write_run,
)

DAY = 86_400


def tiny_cfg(strategy="uc-sampling", **run):
    syn = SyntheticConfig(num_users=60, items_born_per_day=15, item_lifespan_days=3,
                          events_per_day=300, num_days=4, num_tasks=2)
    model = ModelConfig(embed_dim=4, hash_size=1 << 10, interaction_hidden_dims=[8],
                        num_tasks=2, learning_rate=0.1, dense_learning_rate=0.05)
    return ExperimentConfig(model=model, strategy=StrategyConfig(name=strategy, ic_cap=8, uc_cap=8),
                            synthetic=syn, eval_head_size=100, **run)


def frames_json(frames):
    return [f.to_json() for f in frames]


def test_strategy_config():
    assert StrategyConfig("IC_sampling").name == "ic-sampling"
    with pytest.raises(ConfigError):
        StrategyConfig("item-magic")
    with pytest.raises(ConfigError):
        StrategyConfig(uc_cap=0)
    spec = StrategyConfig("hybrid", ic_cap=3, uc_cap=5).list_spec(2)
    assert (spec.ic_cap, spec.uc_cap, spec.num_types) == (3, 5, 2)
    assert StrategyConfig("ic-sampling").list_spec(1).uc_cap == 0
    assert StrategyConfig("uc-clustering").list_spec(1).uc_mode == "clustering"
    assert StrategyConfig("uc-clustering").formulation == Formulation.UC


def test_schedule_validation():
    with pytest.raises(ConfigError):
        RecurrentSchedule([], passes_per_day=-1)
    with pytest.raises(ConfigError):
        RecurrentSchedule([], batch_size=0)


def test_frames_cover_days_two_onwards():
    res = run_experiment(tiny_cfg())
    assert [f.day for f in res.frames] == [2, 3, 4]
    assert all(f.n_eval == 100 and len(f.nce) == 2 for f in res.frames)
    assert res.ordinal == 4 * 300
    assert len(res.train_losses) == 4 * int(np.ceil(300 / 256))


def test_run_is_deterministic():
    cfg = tiny_cfg("hybrid")
    assert frames_json(run_experiment(cfg).frames) == frames_json(run_experiment(cfg).frames)


def test_zero_passes_leaves_model_at_initialisation():
    cfg = tiny_cfg(passes_per_day=0)
    res = run_experiment(cfg)
    fresh = RankingModel(cfg.model, table_tracker=cfg.table_tracker)
    for name, v in fresh.params.items():
        assert np.array_equal(v, res.model.params[name])
    for name, t in fresh.tables.items():
        assert np.array_equal(t.values, res.model.tables[name].values)
    assert res.train_losses == []
    # the index still grows, so lists differ from day to day, but no learning happens
    assert len(res.index.activity) > 0


def test_day_is_evaluated_before_it_is_trained():
    cfg = tiny_cfg("ic-sampling")
    days = load_days(cfg)
    res = run_experiment(cfg, days)
    # replay by hand: train on day 1 only, then score day 2's head
    model = RankingModel(cfg.model)
    spec = cfg.strategy.list_spec(2)
    index = EngagementIndex()
    ex1 = featurize(days[0], index, spec, ordinal_offset=0)
    for lo in range(0, len(ex1), cfg.batch_size):
        model.train_step(ex1.take(slice(lo, lo + cfg.batch_size)))
    counts = np.fromiter(index.activity.values(), dtype=np.int64)
    ex2 = featurize(days[1], index, spec, ordinal_offset=len(days[0]))
    frame = evaluate(model, ex2.take(slice(0, cfg.eval_head_size)), counts, day=2,
                     label=cfg.strategy.name)
    assert frame.to_json() == res.frames[0].to_json()


def test_cold_restart_differs_from_warm_start():
    warm = run_experiment(tiny_cfg())
    cold = run_experiment(tiny_cfg(warm_start=False))
    assert frames_json(warm.frames)[0] == frames_json(cold.frames)[0]
    assert frames_json(warm.frames)[1:] != frames_json(cold.frames)[1:]


def test_empty_day_yields_absent_frame():
    cfg = tiny_cfg()
    days = load_days(cfg)
    days[2] = EventLog()
    res = run_experiment(cfg, days)
    assert [f.absent for f in res.frames] == [False, True, False]
    assert res.frames[1].nce == [] and res.frames[1].n_eval == 0
    assert score_frames(res.frames, 10) == pytest.approx(
        np.mean([res.frames[0].mean_nce(), res.frames[2].mean_nce()]))


def test_strategy_must_match_model():
    cfg = tiny_cfg()
    model = RankingModel(ModelConfig(formulation="IC", embed_dim=4, hash_size=64))
    with pytest.raises(ConfigError):
        run_recurrent(model, RecurrentSchedule(load_days(cfg)), StrategyConfig("uc-sampling"))


def test_clustering_strategy_maintains_a_map():
    cfg = tiny_cfg("uc-clustering")
    cfg.strategy.max_cluster_size = 10
    res = run_experiment(cfg)
    assert res.cluster_map is not None and len(res.cluster_stats) == 4
    assert max(res.cluster_map.sizes().values()) <= 10
    for st in res.cluster_stats:
        assert st["remapped"] <= int(np.floor(cfg.strategy.max_remap_ratio * st["tracked_users"] + 1e-9))


def test_active_params_recorded_per_table():
    res = run_experiment(tiny_cfg("hybrid"))
    for f in res.frames:
        assert set(f.active_params) == {"user", "item"}
        assert f.total_active_params == f.dense_params + sum(f.active_params.values())
    grow = [f.active_params["item"] for f in res.frames]
    assert grow == sorted(grow)


def test_config_round_trip_and_overrides(tmp_path):
    cfg = tiny_cfg("ic-sampling")
    back = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back.to_dict() == cfg.to_dict()
    moved = cfg.with_override("strategy.name", "uc-sampling")
    assert moved.model.formulation == Formulation.UC
    assert cfg.with_override("model.hash_size", 77).model.hash_size == 77
    with pytest.raises(ConfigError):
        cfg.with_override("hash_size", 3)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**cfg.to_dict(), "extra": {}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**cfg.to_dict(), "run": {"kind": "recurrent", "bogus": 1}})
    with pytest.raises(ConfigError):
        ExperimentConfig(synthetic=None, events_path=None)
    with pytest.raises(ConfigError):
        ExperimentConfig(kind="movielens")


def test_load_config_toml_and_manifest(tmp_path):
    toml = tmp_path / "c.toml"
    toml.write_text('[run]\neval_head_size = 50\n[strategy]\nname = "hybrid"\n'
                    '[model]\nembed_dim = 4\nhash_size = 128\n[synthetic]\nnum_users = 20\n'
                    'num_days = 3\n')
    cfg = load_config(toml)
    assert cfg.model.formulation == Formulation.HYBRID and cfg.synthetic.num_users == 20
    run_dir = write_run(tmp_path / "run", cfg)
    assert load_config(run_dir / "manifest.json").to_dict() == cfg.to_dict()
    bad = tmp_path / "bad.toml"
    bad.write_text("[run\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "nope.toml")


def test_events_path_source(tmp_path):
    cfg = tiny_cfg()
    days = load_days(cfg)
    ev = days[0]
    for d in days[1:]:
        ev = ev.concat(d)
    ev.write_binary(tmp_path / "ev.bin")
    d = cfg.to_dict()
    del d["synthetic"]
    d["run"]["events_path"] = str(tmp_path / "ev.bin")
    from_file = ExperimentConfig.from_dict(d)
    assert [len(x) for x in load_days(from_file)] == [len(x) for x in days]
    assert frames_json(run_experiment(from_file).frames) == frames_json(run_experiment(cfg).frames)


def test_write_run_layout(tmp_path):
    cfg = tiny_cfg("uc-clustering")
    res = run_experiment(cfg)
    out = write_run(tmp_path / "r", cfg, res)
    assert (out / "manifest.json").exists() and (out / "reports").is_dir()
    assert (out / "checkpoints" / "model.npz").exists()
    assert (out / "checkpoints" / "clusters.txt").exists()
    assert frames_json(read_frames(out / "frames.jsonl")) == frames_json(res.frames)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["n_frames"] == 3 and manifest["config"] == cfg.to_dict()
    reloaded = RankingModel.load(out / "checkpoints" / "model.npz")
    ex = featurize(load_days(cfg)[0], EngagementIndex(), cfg.strategy.list_spec(2),
                   cluster_map=res.cluster_map)
    assert np.array_equal(reloaded.predict(ex), res.model.predict(ex))


def test_single_value_sweep_is_its_own_baseline():
    table = run_sweep(tiny_cfg(), "hash_size", [256], last_days=2)
    assert table.relative_pct == [0.0]
    assert table.format().splitlines()[1].split()[-1] == "-"


def test_sweep_validation():
    with pytest.raises(ConfigError):
        run_sweep(tiny_cfg(), "learning_rate", [1])
    with pytest.raises(ConfigError):
        run_sweep(tiny_cfg(), "hash_size", [])
    with pytest.raises(ConfigError):
        run_sweep(tiny_cfg(), "hash_size", [64], baseline=128)


def test_sweep_matches_individual_runs():
    cfg = tiny_cfg()
    table = run_sweep(cfg, "embed_dim", [2, 4], last_days=2)
    for v, score in zip(table.values, table.scores):
        res = run_experiment(cfg.with_override("model.embed_dim", v))
        assert score == pytest.approx(score_frames(res.frames, 2))


def test_drift_probe_windows_and_empty_window():
    cfg = tiny_cfg()
    days = load_days(cfg)
    res = run_recurrent(RankingModel(cfg.model), RecurrentSchedule(days[:2]), cfg.strategy)
    before = {n: v.copy() for n, v in res.model.params.items()}
    future = days[2].concat(days[3])
    start = 19_002 * DAY
    curve = run_drift_probe(res.model, future, DAY // 2, res.index, cfg.strategy,
                            ordinal_offset=res.ordinal, start=start, num_windows=5)
    assert curve.windows == [0, 1, 2, 3, 4]
    assert curve.nce[4] is None and all(v is not None for v in curve.nce[:4])
    for n, v in before.items():
        assert np.array_equal(v, res.model.params[n])
    w, v = curve.present()
    assert w.tolist() == [0, 1, 2, 3]
    slope, lo, hi = curve.slope_ci()
    assert lo <= slope <= hi
    with pytest.raises(ConfigError):
        run_drift_probe(res.model, future, 0, res.index, cfg.strategy)


def test_movielens_protocol_on_a_small_log():
    rng = np.random.default_rng(0)
    n_users, n_items = 80, 40
    taste = rng.standard_normal(n_users)
    appeal = rng.standard_normal(n_items)
    rows = []
    for u in range(n_users):
        for t, i in enumerate(rng.choice(n_items, 15, replace=False)):
            p = 1 / (1 + np.exp(-2 * (taste[u] + appeal[i])))
            rows.append((u + 1, i + 1, 1000 * u + t, rng.random() < p))
    u, i, t, y = map(np.array, zip(*rows))
    ev = EventLog.from_columns(u, i, t, 0, y)
    cfg = ExperimentConfig(kind="movielens", movielens={"ratings": "unused", "epochs": 2},
                           model=ModelConfig(embed_dim=4, hash_size=1 << 10,
                                             interaction_hidden_dims=[8], learning_rate=0.1),
                           batch_size=32)
    out = run_movielens(cfg, ("ic-sampling", "uc-sampling"), events=ev)
    assert set(out) == {"ic-sampling", "uc-sampling"}
    assert all(0.0 <= v <= 1.0 for v in out.values())
    assert out == run_movielens(cfg, ("ic-sampling", "uc-sampling"), events=ev)


def test_split_by_days_feeds_the_schedule():
    cfg = tiny_cfg()
    days = load_days(cfg)
    assert len(days) == 4 and all(len(d) == 300 for d in days)
    joined = days[0]
    for d in days[1:]:
        joined = joined.concat(d)
    again = split_by_days(joined, [(19_000 + k) * DAY for k in range(5)])
    assert all(a == b for a, b in zip(again, days))
