import json
from pathlib import Path

import pytest

from sparseswin import SparseSwinConfig, SparTaConfig, cli
from sparseswin.config import PROFILES, load_run_config, parse_run_config
from sparseswin.data import AugmentConfig
from sparseswin.errors import ConfigError, NonFiniteError
from sparseswin.regularizers import RegConfig
from sparseswin.serde import to_plain
from sparseswin.train import TrainConfig

GOLDEN = Path(__file__).parent / "golden"


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


# --- config loading --------------------------------------------------------------

@pytest.mark.parametrize("name", PROFILES)
def test_profiles_load(name):
    cfg = load_run_config(name, env={})
    assert cfg.data.augment.target_size == cfg.model.input_size


def test_profiles_encode_training_setups():
    inet, cifar = load_run_config("imagenet100", {}), load_run_config("cifar", {})
    assert (inet.train.optimizer, inet.train.lr, inet.train.batch) == ("adam", 1e-4, 128)
    assert inet.train.freeze_stages == (1, 2)
    assert (cifar.train.optimizer, cifar.train.lr, cifar.train.weight_decay) == ("adamw", 1e-5, 0.01)


def test_unknown_key_rejected_with_path():
    with pytest.raises(ConfigError, match=r"'train\.reg\.lamda'"):
        parse_run_config({"train": {"reg": {"kind": "l1", "lamda": 1e-4}}})
    with pytest.raises(ConfigError, match=r"'model\.sparta\.tokens'"):
        parse_run_config({"model": {"sparta": {"tokens": 4}}})


def test_type_errors_name_the_key():
    with pytest.raises(ConfigError, match=r"train\.lr"):
        parse_run_config({"train": {"lr": "fast"}})


def test_json_syntax_error_has_line_and_column(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "train": {"lr": 1e-4,}\n}\n')
    with pytest.raises(ConfigError, match=r"bad\.json:2:\d+"):
        load_run_config(str(p), env={})


def test_seed_env_override():
    assert load_run_config("tiny", env={"SPARSESWIN_SEED": "17"}).train.seed == 17
    with pytest.raises(ConfigError):
        load_run_config("tiny", env={"SPARSESWIN_SEED": "x"})


def test_config_round_trip():
    cfg = load_run_config("cifar", {})
    assert parse_run_config(cfg.to_dict()) == cfg
    assert cfg.to_dict()["train"]["reg"] == {"kind": "none", "lambda": 0.0, "reduction": "sum"}


def test_help_documents_every_key(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--help"])
    text = capsys.readouterr().out
    from sparseswin.config import DataConfig
    for cls in (SparseSwinConfig, SparTaConfig, TrainConfig, RegConfig, DataConfig, AugmentConfig):
        for key in to_plain(cls()):
            assert f"{key}=" in text, f"{cls.__name__}.{key} missing from --help"


# --- describe / params / flops -----------------------------------------------------

def test_describe_default(capsys):
    code, out, _ = run(capsys, "describe", "--config", "imagenet100")
    assert code == 0
    assert out.strip().endswith("224² → 56²×96 → 28²×192 → 14²×384 → 7²×768 → (49, 512)")


def test_describe_tiny_ends_at_configured_tokens(capsys):
    code, out, _ = run(capsys, "describe", "--config", "tiny", "--json")
    desc = json.loads(out)
    assert code == 0 and desc["chain"][5] == ["sparta", [16, 32]]


def test_describe_448_is_config_error(capsys):
    code, _, err = run(capsys, "describe", "--config", "imagenet100", "--input", "448")
    assert code == 2 and "196" in err


def test_bad_config_exit_2(capsys, tmp_path):
    path = write_json(tmp_path / "c.json", {"model": {"bogus": 1}})
    code, _, err = run(capsys, "describe", "--config", path)
    assert code == 2 and "model.bogus" in err


def test_params_deterministic_and_golden(capsys):
    code, a, _ = run(capsys, "params", "--config", "tiny", "--json")
    _, b, _ = run(capsys, "params", "--config", "tiny", "--json")
    assert code == 0 and a == b
    assert a == (GOLDEN / "params_tiny.json").read_text()


def test_params_human_report_mentions_reference(capsys):
    code, out, _ = run(capsys, "params", "--config", "tiny")
    assert code == 0 and "17,580,000" in out and "total" in out


def test_flops_sparta_msa_equal_across_inputs(capsys):
    _, a, _ = run(capsys, "flops", "--config", "imagenet100", "--input", "224", "--json")
    _, b, _ = run(capsys, "flops", "--config", "imagenet100", "--input", "448", "--json")
    a, b = json.loads(a), json.loads(b)
    assert list(a) == sorted(a)
    assert a["sparta_msa"] == b["sparta_msa"] and a["sparta_mlp"] == b["sparta_mlp"]
    assert b["backbone"] > a["backbone"]


def test_report_written_to_out(capsys, tmp_path):
    target = tmp_path / "r" / "flops.json"
    code, out, _ = run(capsys, "flops", "--config", "tiny", "--out", str(target))
    assert code == 0 and json.loads(target.read_text())["input_size"] == 64


# --- gradcheck --------------------------------------------------------------------

def test_gradcheck_sparta_subset(capsys):
    code, out, _ = run(capsys, "gradcheck", "--module", "sparta", "--seeds", "2", "--json")
    rows = json.loads(out)
    assert code == 0
    assert {r["group"] for r in rows} == {"sparta"}
    assert all(r["passed"] and r["worst_rel_err"] < 1e-4 for r in rows)


def test_gradcheck_fault_injection_exit_1(capsys):
    code, out, err = run(capsys, "gradcheck", "--module", "tensor", "--seeds", "1", "--inject-fault", "softmax")
    assert code == 1
    assert "gradcheck failed: softmax" in err
    assert "FAIL" in out


def test_gradcheck_unknown_fault_is_config_error(capsys):
    code, _, _ = run(capsys, "gradcheck", "--module", "tensor", "--seeds", "1", "--inject-fault", "nope")
    assert code == 2


# --- train / eval -----------------------------------------------------------------

def tiny_run_config(tmp_path, **train):
    doc = json.loads(Path(cli.__file__).with_name("profiles").joinpath("tiny.json").read_text())
    doc["train"].update(train)
    doc["data"].update(synthetic_train=32, synthetic_test=16)
    return write_json(tmp_path / "tiny.json", doc)


def test_train_then_eval_reproduces_top1(capsys, tmp_path):
    cfg = tiny_run_config(tmp_path, batch=8)
    out_dir = tmp_path / "run"
    code, out, _ = run(capsys, "train", "--config", cfg, "--steps", "3", "--out", str(out_dir))
    assert code == 0
    top1 = out.strip().splitlines()[-1]
    assert top1.startswith("top1=")
    assert (out_dir / "metrics.csv").read_text().count("\n") == 4
    code, out, _ = run(capsys, "eval", "--config", cfg, "--checkpoint", str(out_dir / "checkpoint.sswn"))
    assert code == 0 and out.strip() == top1


def test_eval_bad_checkpoint_exit_3(capsys, tmp_path):
    bad = tmp_path / "bad.sswn"
    bad.write_bytes(b"NOPE" + bytes(16))
    code, _, err = run(capsys, "eval", "--config", "tiny", "--checkpoint", str(bad))
    assert code == 3 and "magic" in err


def test_missing_cifar_data_exit_3(capsys, tmp_path):
    doc = {"model": {"input_size": 64, "embed_dim": 8, "depths": [2, 2, 2], "heads": [2, 4, 8],
                     "window": 2, "shift": 1, "num_classes": 10,
                     "sparta": {"t": 4, "e": 16, "heads": 4}},
           "data": {"source": "cifar10", "path": [str(tmp_path / "missing.bin")]}}
    code, _, err = run(capsys, "train", "--config", write_json(tmp_path / "c.json", doc),
                       "--out", str(tmp_path / "o"))
    assert code == 3 and "missing.bin" in err


def test_numeric_abort_exit_4(capsys, tmp_path, monkeypatch):
    def boom(self):
        raise NonFiniteError("step 1: matmul produced non-finite values")

    monkeypatch.setattr("sparseswin.train.Trainer.train_step", boom)
    code, _, err = run(capsys, "train", "--config", tiny_run_config(tmp_path), "--steps", "1",
                       "--out", str(tmp_path / "o"))
    assert code == 4 and "matmul" in err


def test_sweep_writes_five_metric_files(capsys, tmp_path):
    out_dir = tmp_path / "sweep"
    code, out, _ = run(capsys, "sweep", "--config", tiny_run_config(tmp_path, batch=8), "--steps", "2",
                       "--out", str(out_dir), "--json")
    rows = json.loads(out)
    assert code == 0 and len(rows) == 5
    assert sorted(p.name for p in out_dir.glob("metrics_*.csv")) == [
        "metrics_l1_1e-04.csv", "metrics_l1_1e-05.csv", "metrics_l2_1e-04.csv", "metrics_l2_1e-05.csv",
        "metrics_none.csv"]
    assert (out_dir / "sweep.csv").read_text().count("\n") == 6
