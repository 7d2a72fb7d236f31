"""End-to-end tests for the training workflow and sweeps on a tiny experiment."""
import csv
import json

import pytest

from src.models.checkpoint import load_checkpoint
from src.models.state import create_initial_state
from src.modules.progress_tracker import read_log
from src.modules.sequence_forge import load_suite, sample_training_batch
from src.pipeline.sweep import grid_points, plan_sweep, run_sweep
from src.pipeline.training_run import (
    MANIFEST,
    STORE_FILE,
    TRAIN_STREAM,
    TrainingRun,
    checkpoint_path,
    load_run_store,
    train_run,
    train_step,
)
from src.utils.errors import ConfigError, HashMismatchError, SweepError
from src.utils.rng import RngStream


def test_run_directory_layout(tiny_experiment, tmp_path):
    config = tiny_experiment()
    result = train_run(config, tmp_path / "run")
    root = tmp_path / "run"
    for name in (MANIFEST, STORE_FILE, "metrics.csv", "aggregate.csv",
                 "suites/icl-2w4s.icls", "suites/iwl-acc.icls", "suites/probe.icls"):
        assert (root / name).exists(), name
    manifest = json.loads((root / MANIFEST).read_text())
    assert manifest["model"]["label_vocab"] == 18
    assert set(manifest["suites"]) == {"icl-2w4s", "iwl-acc", "probe"}
    assert load_run_store(root).digest() == manifest["store_hash"]

    for seed in (0, 1):
        seed_dir = root / f"seed-{seed}"
        assert result.checkpoints[seed] == [checkpoint_path(seed_dir, s) for s in (0, 3, 6)]
        assert [p.name for p in sorted((seed_dir / "checkpoints").iterdir())] == [
            "step-00000000.iclf", "step-00000003.iclf", "step-00000006.iclf"]
        log = read_log(seed_dir / "metrics.csv")
        assert [s for s, _ in log.series("icl-2w4s")] == [0, 3, 6]
        assert [s for s, _ in log.series("iwl-acc")] == [0, 3, 6]
        assert [s for s, _ in log.series("train-loss")] == [3, 6]
        assert [s for s, _ in log.series("probe-label-image-max")] == [0, 3, 6]
        assert all(0.0 <= v <= 1.0 for _, v in log.series("icl-2w4s"))
        assert load_checkpoint(checkpoint_path(seed_dir, 6)).step == 6


def test_aggregate_covers_both_seeds(tiny_experiment, tmp_path):
    train_run(tiny_experiment(), tmp_path / "run")
    with open(tmp_path / "run" / "aggregate.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows
    assert all(r["n"] == "2" for r in rows)
    assert {r["split"] for r in rows} >= {"icl-2w4s", "iwl-acc", "train-loss"}
    merged = read_log(tmp_path / "run" / "metrics.csv")
    assert merged.seeds == [0, 1]


def test_runs_are_reproducible(tiny_experiment, tmp_path):
    config = tiny_experiment(train={"seeds": [0]})
    a = train_run(config, tmp_path / "a")
    b = train_run(config, tmp_path / "b")
    assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()
    assert (tmp_path / "a" / STORE_FILE).read_bytes() == (tmp_path / "b" / STORE_FILE).read_bytes()
    last_a = load_checkpoint(a.checkpoints[0][-1]).model.params
    last_b = load_checkpoint(b.checkpoints[0][-1]).model.params
    for name in last_a:
        assert (last_a[name] == last_b[name]).all()


def test_resume_matches_uninterrupted_run(tiny_experiment, tmp_path):
    config = tiny_experiment()
    root = tmp_path / "run"
    train_run(config, root)
    before = {s: (root / f"seed-{s}" / "metrics.csv").read_bytes() for s in (0, 1)}
    final = load_checkpoint(checkpoint_path(root / "seed-0", 6)).model.params

    checkpoint_path(root / "seed-0", 6).unlink()
    train_run(config, root, resume=True)
    for s in (0, 1):
        assert (root / f"seed-{s}" / "metrics.csv").read_bytes() == before[s]
    resumed = load_checkpoint(checkpoint_path(root / "seed-0", 6)).model.params
    for name in final:
        assert (resumed[name] == final[name]).all()


def test_resume_rejects_a_changed_store(tiny_experiment, tmp_path):
    config = tiny_experiment(train={"seeds": [0]})
    root = tmp_path / "run"
    train_run(config, root)
    data = bytearray((root / STORE_FILE).read_bytes())
    data[-1] ^= 0xFF
    (root / STORE_FILE).write_bytes(bytes(data))
    with pytest.raises(HashMismatchError):
        train_run(config, root, resume=True)


def test_resume_rejects_a_changed_config(tiny_experiment, tmp_path):
    root = tmp_path / "run"
    train_run(tiny_experiment(train={"seeds": [0]}), root)
    with pytest.raises(ConfigError):
        train_run(tiny_experiment(train={"seeds": [0], "max_lr": 1e-3}), root, resume=True)


def test_frozen_suites_are_reused(tiny_experiment, tmp_path):
    config = tiny_experiment(train={"seeds": [0]})
    root = tmp_path / "run"
    train_run(config, root)
    run = TrainingRun(config, root)
    run.prepare(resume=True)
    on_disk = load_suite(root / "suites" / "icl-2w4s.icls", run.store)
    assert run.suites["icl-2w4s"] == on_disk
    assert run.probe_suite is not None


def test_train_step(tiny_experiment, tmp_path):
    config = tiny_experiment()
    run = TrainingRun(config, tmp_path / "run")
    run.prepare()
    state = create_initial_state(run.model_config, seed=0)
    rng = RngStream(0, TRAIN_STREAM)
    batch = sample_training_batch(run.store, config.mix, config.recipe, rng, step=1,
                                  batch_size=config.train.batch_size, probs=run.class_probs)
    loss = train_step(state, batch, run.store, config.train)
    assert loss > 0
    assert state.step == 1
    assert state.adam.step == 1
    with pytest.raises(ConfigError):
        train_step(state, batch[:3], run.store, config.train)
    assert state.step == 1


def test_model_shape_must_match_store(tiny_experiment, tmp_path):
    config = tiny_experiment(model={"exemplar_shape": [7]})
    with pytest.raises(ConfigError):
        train_run(config, tmp_path / "run")


def test_sweep_over_swap_rate(tiny_experiment, tmp_path):
    config = tiny_experiment(train={"seeds": [0]}, probe={"every": 0},
                             sweep={"axes": {"swap-rate": [0.0, 0.5]}})
    assert grid_points(config) == [{"swap-rate": 0.0}, {"swap-rate": 0.5}]
    children = run_sweep(config, tmp_path / "sweep", workers=1)
    assert [c.name for c in children] == ["swap-rate=0.0", "swap-rate=0.5"]
    assert children[1].config.mix.p_label_swap == 0.5
    assert children[1].config.sweep is None
    for child in children:
        assert (child.run_dir / "aggregate.csv").exists()
    with open(tmp_path / "sweep" / "comparison.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["child"] for r in rows} == {"swap-rate=0.0", "swap-rate=0.5"}
    assert {r["split"] for r in rows} >= {"icl-2w4s", "iwl-acc"}
    status = (tmp_path / "sweep" / "sweep-status.csv").read_text().splitlines()
    assert status == ["child,status,error", "swap-rate=0.0,ok,", "swap-rate=0.5,ok,"]


def test_sweep_records_failed_children(tiny_experiment, tmp_path):
    config = tiny_experiment(train={"seeds": [0]}, probe={"every": 0},
                             sweep={"axes": {"class-count": [12, 500]}})
    children = plan_sweep(config, tmp_path / "sweep")
    assert children[0].config.store.base_classes == 12
    with pytest.raises(SweepError, match="class-count=500"):
        run_sweep(config, tmp_path / "sweep", workers=1)
    with open(tmp_path / "sweep" / "sweep-status.csv", newline="") as fh:
        status = {r["child"]: r for r in csv.DictReader(fh)}
    assert status["class-count=12"]["status"] == "ok"
    assert status["class-count=500"]["status"] == "failed"
    assert status["class-count=500"]["error"].startswith("SplitError")
    assert (tmp_path / "sweep" / "comparison.csv").exists()
