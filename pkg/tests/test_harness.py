import json
import math

import numpy as np
import pytest

from rotrnn.errors import CheckpointError, ConfigError, NumericError
from rotrnn.harness import checkpoint as ck
from rotrnn.harness.cli import main
from rotrnn.harness.config import (
    ExperimentConfig,
    LogSection,
    ModelSection,
    OptimSection,
    config_from_dict,
    copy_task_config,
    load_config,
    lr_at,
)
from rotrnn.harness.probe import analytic_norm, bench_scan, probe_norms
from rotrnn.harness.train import train_loop
from rotrnn.model import init_model, model_forward
from rotrnn.tasks import TaskSpec, generate


def tiny_config(**over) -> ExperimentConfig:
    cfg = ExperimentConfig(
        task=TaskSpec(kind="majority", T=12, vocab=2, n_signal=3, noise_vocab=2, n_train=4096, n_val=64, n_test=64),
        model=ModelSection(d_model=8, d_state=8, n_layers=2, n_heads=2, dropout=0.1, theta_max=1.0),
        optim=OptimSection(glr=3e-3, lr=3e-3, batch=8, iters=12, warmup=3),
        log=LogSection(log_every=4, n_eval=32, t_buckets=3),
    )
    return cfg.replace(**over) if over else cfg


# --- config -----------------------------------------------------------------


def test_defaults_follow_listops_row():
    cfg = ExperimentConfig()
    m, o = cfg.model, cfg.optim
    assert (m.d_model, m.d_state, m.n_layers, m.n_heads) == (128, 256, 6, 32)
    assert (o.glr, o.lr, o.batch, o.weight_decay, o.iters) == (1e-3, 1e-3, 32, 0.05, 80_000)
    assert m.dropout == 0.0 and (m.gamma_min, m.gamma_max) == (0.5, 0.999) and math.isclose(m.theta_max, math.pi / 100)
    assert o.schedule == "cosine" and o.clip_norm is None


def test_json_round_trip(tmp_path):
    cfg = tiny_config()
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    assert load_config(path) == cfg
    assert config_from_dict(json.loads(cfg.to_json())).hash() == cfg.hash()


@pytest.mark.parametrize("patch", [
    {"optimiser": {}},
    {"optim": {"learning_rate": 1e-3}},
    {"task": {"lenght": 10}},
    {"optim": {"batch": 3.5}},
    {"optim": {"batch": None}},
    {"model": {"readout": 3}},
    {"optim": {"clip_norm": "big"}},
    {"model": {"d_state": 10, "n_heads": 4}},
    {"model": {"gamma_min": 0.99, "gamma_max": 0.9}},
    {"task": {"kind": "white_noise"}},
    {"log": {"n_eval": 10_000}},
    {"optim": {"iters": -1}},
])
def test_bad_configs_rejected(patch):
    d = ExperimentConfig().to_dict()
    for sec, vals in patch.items():
        if sec in d and isinstance(d[sec], dict):
            d[sec].update(vals)
        else:
            d[sec] = vals
    with pytest.raises(ConfigError):
        config_from_dict(d)


def test_bad_json_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_replace_and_hash():
    cfg = tiny_config()
    assert cfg.replace(out_dir="elsewhere").hash() == cfg.hash()
    assert cfg.replace(seed=5).hash() != cfg.hash()
    with pytest.raises(ConfigError):
        cfg.replace(**{"optim.nope": 1})


def test_copy_needs_last_readout():
    with pytest.raises(ConfigError):
        copy_task_config(**{"model.readout": "pool"}).model_config()
    assert copy_task_config().model_config().n_outputs == 10


def test_schedule():
    o = OptimSection(iters=100, warmup=10)
    assert math.isclose(lr_at(o, 0), 0.1) and math.isclose(lr_at(o, 9), 1.0)
    assert math.isclose(lr_at(o, 10), 1.0)
    assert math.isclose(lr_at(o, 55), 0.5)
    assert lr_at(o, 100) < 1e-12
    assert lr_at(OptimSection(schedule="constant", iters=100), 70) == 1.0
    floor = OptimSection(iters=10, min_lr_frac=0.1)
    assert math.isclose(lr_at(floor, 10), 0.1)


# --- checkpoints --------------------------------------------------------------


def _model():
    return init_model(tiny_config().model_config(), 0)


def test_checkpoint_round_trip_byte_identical(tmp_path):
    m = _model()
    ck.save_checkpoint(tmp_path / "a", m, "h")
    loaded, manifest = ck.load_checkpoint(tmp_path / "a", expected_hash="h")
    ck.save_checkpoint(tmp_path / "b", loaded, "h")
    for f in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    assert all(np.array_equal(m.params[k], loaded.params[k]) for k in m.params)
    assert all(np.array_equal(m.state[k], loaded.state[k]) for k in m.state)


def test_manifest_lists_every_leaf_once(tmp_path):
    m = _model()
    ck.save_checkpoint(tmp_path, m)
    names = [leaf["name"] for leaf in ck.read_manifest(tmp_path)["leaves"]]
    assert len(names) == len(set(names))
    assert set(names) == set(m.params) | {ck.STATE_PREFIX + k for k in m.state}


def test_array_file_layout(tmp_path):
    a = np.arange(6.0).reshape(2, 3)
    ck.save_arrays(tmp_path, {"x": a})
    raw = (tmp_path / "x.f64").read_bytes()
    assert raw == a.astype("<f8").tobytes() and len(raw) == 48


def test_corrupted_length_names_leaf(tmp_path):
    m = _model()
    ck.save_checkpoint(tmp_path, m)
    f = tmp_path / "blocks.1.rnn.thetas.f64"
    f.write_bytes(f.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="blocks.1.rnn.thetas"):
        ck.load_checkpoint(tmp_path)


def test_version_and_hash_mismatch(tmp_path):
    ck.save_checkpoint(tmp_path, _model(), "abc")
    with pytest.raises(CheckpointError):
        ck.load_checkpoint(tmp_path, expected_hash="xyz")
    man = json.loads((tmp_path / "manifest.json").read_text())
    man["version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(CheckpointError, match="version"):
        ck.load_checkpoint(tmp_path)


def test_shape_mismatch(tmp_path):
    m = _model()
    m.params["classifier.b"] = np.zeros(5)
    ck.save_checkpoint(tmp_path, m)
    with pytest.raises(CheckpointError, match="classifier.b"):
        ck.load_checkpoint(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(CheckpointError):
        ck.load_arrays(tmp_path)


def test_dataset_export(tmp_path):
    spec = TaskSpec(kind="copy", T=25, pattern_len=3)
    ck.export_dataset(tmp_path, spec, "val", 0, 10)
    arrays, man = ck.load_arrays(tmp_path)
    batch, labels = generate(spec, "val", 0, 10)
    assert np.array_equal(arrays["inputs"].astype(np.int64), batch.data)
    assert np.array_equal(arrays["labels"].astype(np.int64), labels)
    assert man["meta"]["task"]["T"] == 25


# --- training loop ----------------------------------------------------------------


def test_iters_zero_writes_only_initial_checkpoint(tmp_path):
    res = train_loop(tiny_config(**{"optim.iters": 0}), tmp_path)
    assert res.steps == 0
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["init"]
    assert not (tmp_path / "metrics.jsonl").exists()


def test_training_artifacts_and_determinism(tmp_path):
    cfg = tiny_config()
    a = train_loop(cfg, tmp_path / "a")
    b = train_loop(cfg, tmp_path / "b")
    ma = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    assert ma == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert (tmp_path / "a" / "norms.csv").read_bytes() == (tmp_path / "b" / "norms.csv").read_bytes()
    recs = [json.loads(line) for line in ma.decode().splitlines()]
    assert [r["step"] for r in recs] == [0, 4, 8, 12]
    assert all(len(r["norms"]) == 2 for r in recs) and "elapsed_s" not in recs[0]
    rows = (tmp_path / "a" / "norms.csv").read_text().splitlines()
    assert rows[0] == "step,layer,t_bucket,mean_norm" and len(rows) == 1 + 4 * 2 * 3
    assert sorted(p.name for p in (tmp_path / "a" / "checkpoints").iterdir()) == ["best", "final", "init"]
    assert a.steps == b.steps == 12
    final, _ = ck.load_checkpoint(tmp_path / "a" / "checkpoints" / "final", expected_hash=cfg.hash())
    vb, vl = generate(cfg.task, "val", 0, cfg.log.n_eval)
    assert np.isfinite(model_forward(final, vb)).all()


def test_seed_changes_run(tmp_path):
    train_loop(tiny_config(), tmp_path / "a")
    train_loop(tiny_config(seed=1), tmp_path / "b")
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() != (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_early_stop(tmp_path):
    res = train_loop(tiny_config(**{"log.stop_at_val_acc": 0.0}), tmp_path)
    assert res.reached_step == 4 and res.steps == 4


def _raise_numeric(*a, **k):
    raise NumericError("non-finite loss nan; parameter norms: {}")


def test_nan_aborts_with_diagnostics(tmp_path, monkeypatch):
    import rotrnn.harness.train as tr

    monkeypatch.setattr(tr, "loss_and_grads", _raise_numeric)
    with pytest.raises(NumericError):
        train_loop(tiny_config(), tmp_path)
    diag = json.loads((tmp_path / "diagnostics.json").read_text())
    assert diag["step"] == 0 and "encoder.w" in diag["param_norms"]


# --- probes -----------------------------------------------------------------------


def test_analytic_norm():
    assert np.allclose(analytic_norm(0.5, 3), [0.75, 0.9375, 1 - 0.5**6])
    e = analytic_norm(0.9, 400, c=0.5)
    assert np.isclose(e[0], 1 - 0.5 * 0.81) and np.isclose(e[-1], (1 - 0.5 * 0.81) / (1 - 0.81), rtol=1e-6)


@pytest.mark.parametrize("c", [1.0, 0.5])
def test_probe_small(c):
    res = probe_norms(0.8, T=64, batch=4096, d_h=8, sub_batch=1000, seed=1, c=c, with_lru=True)
    assert res.max_rel_dev < 0.06
    assert np.max(np.abs(res.lru_empirical - res.lru_analytic) / res.lru_analytic) < 0.1


def test_probe_rejects():
    with pytest.raises(ConfigError):
        probe_norms(1.0)
    with pytest.raises(ConfigError):
        probe_norms(0.9, d_h=3)


def test_bench_scan_fields():
    out = bench_scan(T=256, d_h=4, batch=2, workers=2, repeat=1)
    assert out["T"] == 256 and out["sequential_throughput"] > 0 and out["parallel_throughput"] > 0


# --- CLI ----------------------------------------------------------------------------


def test_cli_usage_errors(capsys):
    assert main(["train", "--config", "x.json", "--bogus"]) == 1
    assert main(["frobnicate"]) == 1
    assert main([]) == 1
    assert main(["train", "--config", "/nonexistent.json"]) == 1
    assert main(["probe-norms", "--gamma", "1.5", "--T", "4", "--batch", "4"]) == 1


def test_cli_export_and_train_and_eval(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(tiny_config().to_json())
    assert main(["export-config", "--preset", "copy", "--out", str(tmp_path / "copy.json")]) == 0
    assert load_config(tmp_path / "copy.json") == copy_task_config()
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--out", str(out), "--iters", "4"]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["steps"] == 4
    assert main(["eval", "--config", str(cfg_path), "--checkpoint", str(out / "checkpoints" / "final")]) == 1
    rec = json.loads((out / "config.json").read_text())
    (tmp_path / "resolved.json").write_text(json.dumps(rec))
    assert main(["eval", "--config", str(tmp_path / "resolved.json"), "--checkpoint",
                 str(out / "checkpoints" / "final"), "--n", "16"]) == 0
    res = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert res["n"] == 16 and 0 <= res["accuracy"] <= 1


def test_cli_numeric_failure_exit_2(tmp_path, monkeypatch):
    import rotrnn.harness.train as tr

    monkeypatch.setattr(tr, "loss_and_grads", _raise_numeric)
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(tiny_config().to_json())
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "r")]) == 2


def test_cli_check_grads(capsys):
    assert main(["check-grads", "--seed", "3"]) == 0
    assert "max relative error" in capsys.readouterr().out


def test_cli_probe(tmp_path, capsys):
    csv = tmp_path / "p.csv"
    assert main(["probe-norms", "--gamma", "0.9", "--T", "32", "--batch", "4096", "--d-h", "8", "--lru",
                 "--tol", "0.1", "--out", str(csv)]) == 0
    lines = csv.read_text().splitlines()
    assert lines[0] == "t,empirical,analytic,lru_empirical,lru_analytic" and len(lines) == 33
    assert main(["probe-norms", "--gamma", "0.9", "--T", "32", "--batch", "64", "--tol", "1e-9"]) == 2


def test_cli_bench(capsys):
    assert main(["bench-scan", "--T", "128", "--repeat", "1", "--d-h", "4"]) == 0
    assert "speedup" in json.loads(capsys.readouterr().out)


def test_parallel_scan_not_slower_at_long_t():
    out = bench_scan(T=4096, d_h=32, batch=8, workers=2, repeat=3)
    assert out["parallel_throughput"] >= out["sequential_throughput"]
