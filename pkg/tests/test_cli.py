import csv
import json

import numpy as np
import pytest

from cetn import autodiff as ad
from cetn import cli, trainer
from cetn.model import CETN, NumericError

TINY = """
[model]
embedding_dim = 4
value_dim = 3
hidden_dims = [16, 8]

[train]
batch_size = 256
max_epochs = 2
eval_batch_size = 2000
"""


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(TINY)
    return p


@pytest.fixture
def trained(tmp_path, tiny_config, small_prepared_dir):
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(tiny_config), "--data", str(small_prepared_dir), "--out", str(out)]) == 0
    return out


def test_prepare_prints_sizes_and_is_deterministic(tmp_path, small_csv, capsys):
    raw, schema = small_csv
    for name in ("a", "b"):
        assert cli.main(["prepare", "--schema", str(schema), "--csv", str(raw), "--out", str(tmp_path / name)]) == 0
    out = capsys.readouterr().out
    assert "total_features" in out and "sizes\ttrain=2100 val=600 test=300" in out
    for f in ("train.npz", "val.npz", "test.npz", "vocab.json", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_prepare_header_mismatch_exits_2(tmp_path, small_csv, capsys):
    raw, schema = small_csv
    d = json.loads(schema.read_text())
    d["fields"].append("zzz")
    schema.write_text(json.dumps(d))
    assert cli.main(["prepare", "--schema", str(schema), "--csv", str(raw), "--out", str(tmp_path / "o")]) == 2
    assert "'zzz'" in capsys.readouterr().err


def test_train_writes_metrics(trained):
    m = json.loads((trained / "metrics.json").read_text())
    assert set(m) >= {"val_auc", "val_logloss", "test_auc", "test_logloss", "best_epoch"}
    assert 0.0 <= m["test_auc"] <= 1.0
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["model"]["hidden_dims"] == [16, 8]


def test_train_zero_epochs(tmp_path, tiny_config, small_prepared_dir):
    out = tmp_path / "z"
    args = ["train", "--config", str(tiny_config), "--data", str(small_prepared_dir), "--out", str(out)]
    assert cli.main(args + ["--override", "train.max_epochs=0"]) == 0
    assert json.loads((out / "metrics.json").read_text())["epochs"] == 0


def test_missing_data_exits_2(tmp_path, tiny_config, capsys):
    assert cli.main(["train", "--config", str(tiny_config), "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["train", "--out", str(tmp_path / "o")]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_numeric_abort_exits_3(tmp_path, tiny_config, small_prepared_dir, monkeypatch, capsys):
    def boom(*a, **k):
        raise NumericError("non-finite gradient for parameter main.v.W1")

    monkeypatch.setattr(trainer, "train_step", boom)
    args = ["train", "--config", str(tiny_config), "--data", str(small_prepared_dir), "--out", str(tmp_path / "o")]
    assert cli.main(args) == 3
    assert "epoch 0 step 0" in capsys.readouterr().err


def test_eval_with_baseline(tmp_path, trained, small_prepared_dir, capsys):
    base = tmp_path / "base.json"
    base.write_text('{"auc": 0.55, "logloss": 0.7}')
    capsys.readouterr()
    assert cli.main(["eval", "--checkpoint", str(trained / "model.ckpt"), "--data", str(small_prepared_dir), "--baseline", str(base)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("test auc=") and "relaimpr auc=" in out
    base.write_text('{"auc": 0.5, "logloss": 0.7}')
    assert cli.main(["eval", "--checkpoint", str(trained / "model.ckpt"), "--data", str(small_prepared_dir), "--baseline", str(base)]) == 2


def test_repr_dump(tmp_path, trained, small_prepared_dir):
    out = tmp_path / "repr.csv"
    args = ["repr-dump", "--checkpoint", str(trained / "model.ckpt"), "--data", str(small_prepared_dir), "--n", "10", "--out", str(out)]
    assert cli.main(args) == 0
    rows = list(csv.reader(out.open()))
    assert len(rows) == 1 + 30
    assert all(len(r) == 3 + 2 for r in rows)
    assert [r[1] for r in rows[1:4]] == ["main", "ep", "ip"]
    first = out.read_bytes()
    assert cli.main(args) == 0 and out.read_bytes() == first
    assert cli.main(args[:-4] + ["--n", "100000", "--out", str(out)]) == 2


def test_alpha_override_matches_cl_ablation(tmp_path, tiny_config, small_prepared_dir):
    base = ["train", "--config", str(tiny_config), "--data", str(small_prepared_dir)]
    assert cli.main(base + ["--override", "loss.alpha=0", "--out", str(tmp_path / "a")]) == 0
    assert cli.main(base + ["--override", "model.ablations=['CL']", "--out", str(tmp_path / "b")]) == 0
    a, _ = CETN.load(tmp_path / "a" / "model.ckpt")
    b, _ = CETN.load(tmp_path / "b" / "model.ckpt")
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_ablate_emits_seven_rows(tmp_path, tiny_config, small_prepared_dir):
    out = tmp_path / "abl"
    args = ["ablate", "--config", str(tiny_config), "--data", str(small_prepared_dir), "--out", str(out), "--override", "train.max_epochs=1"]
    assert cli.main(args) == 0
    rows = list(csv.DictReader((out / "ablation.csv").open()))
    assert [r["variant"] for r in rows] == ["full", "-A", "-CL", "-COS", "-K", "-P", "-T"]
    by = {r["variant"]: r for r in rows}
    assert float(by["-CL"]["max_abs_cl_term"]) == 0.0 and float(by["-COS"]["max_abs_cos_term"]) == 0.0
    assert float(by["full"]["max_abs_cl_term"]) > 0.0
    for name in ("full", "a", "cl", "cos", "k", "p", "t"):
        assert (out / name / "metrics.json").exists()


def test_selfcheck_passes(capsys):
    assert cli.main(["selfcheck", "--trials", "1"]) == 0
    assert "checks passed" in capsys.readouterr().out


def test_selfcheck_detects_corrupted_derivative(monkeypatch, capsys):
    orig = ad._leaky_relu_grad
    monkeypatch.setattr(ad, "_leaky_relu_grad", lambda g, pos, slope: orig(g, pos, 0.05))
    assert cli.main(["selfcheck", "--trials", "1"]) == 1
    assert "FAIL" in capsys.readouterr().out
