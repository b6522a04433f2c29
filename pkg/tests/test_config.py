import json

import pytest

from cetn.config import ExperimentConfig, ablation_config, apply_overrides, from_dict, load_config, parse_value
from cetn.data import ConfigurationError


def test_defaults():
    cfg = ExperimentConfig()
    assert (cfg.loss.alpha, cfg.loss.beta1, cfg.loss.beta2, cfg.loss.tau) == (0.2, 0.3, 0.2, 0.2)
    assert (cfg.train.lr, cfg.train.batch_size, cfg.train.patience) == (0.001, 10000, 2)
    assert cfg.model.embedding_dim == 20 and cfg.model.hidden_dims == (400, 400, 400)


def test_toml_and_overrides(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('[model]\nhidden_dims = [32, 16]\n[loss]\nalpha = 1\n[train]\nmax_epochs = 4\n')
    cfg = load_config(p, ["loss.tau=0.5", "model.ablations=['CL', 'T']", 'data.path="x"'])
    assert cfg.model.hidden_dims == (32, 16)
    assert cfg.loss.alpha == 1.0 and isinstance(cfg.loss.alpha, float)
    assert cfg.loss.tau == 0.5 and cfg.train.max_epochs == 4
    assert cfg.model.ablations == ("CL", "T") and cfg.data.path == "x"


def test_echo_round_trips(tmp_path):
    cfg = load_config(None, ["train.seed=11", "model.kind=simmhn"])
    p = tmp_path / "echo.json"
    p.write_text(cfg.dumps())
    again = load_config(p)
    assert again == cfg and again.dumps() == cfg.dumps()


def test_parse_value():
    assert parse_value("3") == 3 and parse_value("true") is True
    assert parse_value("bare") == "bare" and parse_value("[1, 2]") == [1, 2]


@pytest.mark.parametrize(
    "override",
    ["loss.nope=1", "nosection.x=1", "alpha=1", "loss.alpha", "loss.tau=0", "model.ablations=['Z']", "train.monitor='f1'"],
)
def test_bad_overrides(override):
    with pytest.raises(ConfigurationError):
        load_config(None, [override])


def test_unknown_section():
    with pytest.raises(ConfigurationError):
        from_dict({"optim": {"lr": 1}})


def test_ablation_config_keeps_everything_else():
    cfg = apply_overrides(ExperimentConfig(), ["train.seed=5"])
    ab = ablation_config(cfg, ("K",))
    assert ab.model.ablations == ("K",) and ab.train.seed == 5 and cfg.model.ablations == ()
    assert json.loads(ab.dumps())["model"]["ablations"] == ["K"]
