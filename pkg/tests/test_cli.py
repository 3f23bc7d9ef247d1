import json

import numpy as np
import pytest

import tppt.cli as cli
from tppt import checkpoint
from tppt import config as config_mod
from tppt.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, EXIT_PRETRAIN, main
from tppt.errors import ConfigError, ContractError, NumericalError
from tppt.evaluation import MetricsLog, read_accuracy_matrix

SMALL = {
    "seeds": [0],
    "data": {"n_classes": 4, "train_per_class": 8, "test_per_class": 5, "pretrain_per_class": 20},
    "encoder": {"depth": 2, "model_dim": 16, "heads": 2, "mlp_dim": 32},
    "pretrain": {"steps": 200, "batch_classes": 4},
    "train": {"n_tasks": 2, "epochs": 1, "batch_size": 16, "prompts_per_task": 2},
}


def write_config(tmp_path, raw=SMALL, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return path


def test_defaults_follow_training_recipe():
    cfg = config_mod.from_dict({})
    t = cfg.train
    assert (t.batch_size, t.epochs, t.lr, t.length_v, t.length_t, t.prompts_per_task,
            t.exemplars_per_class, t.alpha, t.n_tasks) == (64, 10, 0.1, 4, 4, 10, 20, 1.0, 10)
    assert cfg.mode == "tppt-v" and cfg.encoder.vocab_size == cfg.data.vocab_size


@pytest.mark.parametrize("raw, field", [
    ({"trian": {}}, "trian"),
    ({"train": {"epoch": 3}}, "train.epoch"),
    ({"data": {"n_classes": 1}}, "data"),
    ({"train": {"lr": "fast"}}, "train.lr"),
    ({"train": {"epochs": 1.5}}, "train.epochs"),
    ({"mode": "tppt-x"}, "mode"),
    ({"seeds": []}, "seeds"),
    ({"train": {"n_tasks": 3}}, "n_tasks"),
])
def test_invalid_configs_name_the_field(raw, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        config_mod.from_dict(raw)


def test_overrides():
    raw = config_mod.apply_overrides({"train": {"lr": 0.2}}, ["train.lr=0.05", "mode=joint", "seeds=[1,2]",
                                                              "output_dir=out/x"])
    cfg = config_mod.from_dict(raw)
    assert cfg.train.lr == 0.05 and cfg.mode == "joint" and cfg.seeds == (1, 2)
    assert cfg.output_dir == "out/x"
    with pytest.raises(ConfigError):
        config_mod.apply_overrides({}, ["train.nope.deeper=1"])
    with pytest.raises(ConfigError):
        config_mod.apply_overrides({}, ["lr"])
    with pytest.raises(ConfigError):
        config_mod.from_dict(config_mod.apply_overrides({}, ["train.nope=1"]))


def test_joint_mode_ignores_task_divisibility():
    assert config_mod.from_dict({"mode": "joint", "train": {"n_tasks": 3}}).mode == "joint"


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = write_config(tmp)
    out = tmp / "out"
    code = main(["run", str(cfg), "--out", str(out), "--seeds", "0,1", "--mode", "tppt-vt"])
    return code, out, tmp


def test_run_writes_artifacts(small_run):
    code, out, _ = small_run
    assert code == EXIT_OK
    assert (out / "encoder.bin").is_file() and (out / "aggregate.csv").is_file()
    for seed in (0, 1):
        d = out / f"seed_{seed}"
        for name in ("metrics.json", "accuracy_matrix.csv", "stage_metrics.csv", "summary.csv", "pool.bin"):
            assert (d / name).is_file(), name
        mlog = MetricsLog.from_json((d / "metrics.json").read_text())
        assert mlog.verify() and mlog.seed == seed
        assert read_accuracy_matrix(d / "accuracy_matrix.csv") == mlog.accuracy_matrix
        assert mlog.config["mode"] == "tppt-vt" and mlog.config["seeds"] == [0, 1]
        assert mlog.config["train"]["epochs"] == 1
        assert "zero_shot_accuracy" in mlog.extra["pretraining"]
    agg = (out / "aggregate.csv").read_text().splitlines()
    assert agg[0] == "metric,mean,std,n_seeds" and len(agg) == 7


def test_config_echo_is_fully_resolved(small_run):
    _, out, tmp = small_run
    echo = MetricsLog.from_json((out / "seed_0" / "metrics.json").read_text()).config
    resolved = config_mod.load(tmp / "cfg.json", ["output_dir=" + json.dumps(str(out)), "seeds=[0,1]",
                                                  "mode=\"tppt-vt\""])
    assert echo == resolved.to_dict()


def test_rerun_with_saved_encoder_is_byte_identical(small_run, tmp_path):
    _, out, tmp = small_run
    again = tmp_path / "again"
    code = main(["run", str(tmp / "cfg.json"), "--out", str(again), "--seeds", "0", "--mode", "tppt-vt",
                 "--set", f"encoder_path={json.dumps(str(out / 'encoder.bin'))}"])
    assert code == EXIT_OK
    for name in ("summary.csv", "pool.bin", "accuracy_matrix.csv"):
        assert (again / "seed_0" / name).read_bytes() == (out / "seed_0" / name).read_bytes()
    assert (again / "encoder.bin").read_bytes() == (out / "encoder.bin").read_bytes()


def test_zero_shot_mode_touches_nothing(tmp_path):
    cfg = write_config(tmp_path)
    code = main(["run", str(cfg), "--out", str(tmp_path / "zs"), "--mode", "zero-shot"])
    assert code == EXIT_OK
    assert not (tmp_path / "zs" / "seed_0" / "pool.bin").exists()
    mlog = MetricsLog.from_json((tmp_path / "zs" / "seed_0" / "metrics.json").read_text())
    assert mlog.loss_curve == []


def test_exit_codes(tmp_path, capsys, monkeypatch):
    assert main(["run", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    bad = write_config(tmp_path, {**SMALL, "train": {"bogus": 1}}, "bad.json")
    assert main(["run", str(bad)]) == EXIT_CONFIG
    assert "train.bogus" in capsys.readouterr().err
    cfg = write_config(tmp_path)
    assert main(["run", str(cfg), "--out", str(tmp_path / "o"),
                 "--set", "encoder_path=\"/nonexistent/enc.bin\""]) == EXIT_CONFIG
    assert main(["run", str(cfg), "--out", str(tmp_path / "o"), "--set", "pretrain.steps=0"]) == EXIT_PRETRAIN

    def boom(*a, **k):
        raise NumericalError("non-finite loss")

    monkeypatch.setattr(cli, "run_stream", boom)
    assert main(["run", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_NUMERICAL


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"not a checkpoint at all")
    with pytest.raises(ContractError):
        checkpoint.load(tmp_path / "x.bin")
    blob = checkpoint.dumps({"a": np.arange(3.0)})
    with pytest.raises(ContractError):
        checkpoint.loads(blob[:-4])
    arrays, meta = checkpoint.loads(checkpoint.dumps({"a": np.arange(3.0), "b": np.array([[1, 2]])}, {"k": 1}))
    assert arrays["a"].tolist() == [0.0, 1.0, 2.0] and arrays["b"].dtype == np.int64 and meta == {"k": 1}
