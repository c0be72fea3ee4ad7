from pathlib import Path

import pytest
import yaml

from ctkd.config import ConfigError, dump_config, load_config, parse_config


def test_defaults():
    cfg = parse_config({})
    assert cfg.temperature.tau_init == 1.0 and cfg.temperature.tau_range == 20.0
    assert cfg.temperature.hidden == 256
    assert (cfg.curriculum.lambda_min, cfg.curriculum.lambda_max, cfg.curriculum.e_loops) == (0.0, 1.0, 10)
    assert (cfg.loss.alpha_ce, cfg.loss.alpha_kd) == (0.1, 0.9)
    assert cfg.optimizer.momentum == 0.9 and cfg.optimizer.weight_decay == 5e-4
    assert cfg.learnable


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError) as err:
        parse_config({"bogus": 1, "loss": {"beta": 2}})
    assert sorted(err.value.problems) == ["bogus: unknown key", "loss.beta: unknown key"]


def test_every_violation_listed():
    with pytest.raises(ConfigError) as err:
        parse_config({"epochs": -1, "batch_size": 0, "optimizer": {"lr": 0},
                      "curriculum": {"lambda_min": 2.0}})
    locs = {p.split(":")[0] for p in err.value.problems}
    assert locs == {"epochs", "batch_size", "optimizer.lr", "curriculum"}


def test_fixed_tau_replaces_module():
    cfg = parse_config({"tau_fixed": 4})
    assert cfg.temperature is None and not cfg.learnable


def test_tau_source_required():
    with pytest.raises(ConfigError):
        parse_config({"temperature": None})


@pytest.mark.parametrize("alias,name", [("fixed", "fixed_lambda"), ("delayed", "delayed_fixed"),
                                        ("cosine", "cosine"), ("linear", "linear")])
def test_strategy_aliases(alias, name):
    cfg = parse_config({"curriculum": {"strategy": alias}})
    assert cfg.curriculum.schedule().strategy == name


def test_idx_needs_paths():
    with pytest.raises(ConfigError) as err:
        parse_config({"dataset": {"kind": "idx"}})
    assert len(err.value.problems) == 1 and "train_images" in err.value.problems[0]


def test_yaml_round_trip(tmp_path):
    cfg = parse_config({"seed": 3, "curriculum": {"strategy": "linear", "e_loops": 4}})
    back = load_config(dump_config(cfg, tmp_path / "c.yaml"))
    assert back == cfg and back.digest() == cfg.digest()


def test_digest_ignores_output_dir():
    a = parse_config({"out": "x"})
    assert a.digest() == parse_config({"out": "y"}).digest()
    assert a.digest() != parse_config({"seed": 1}).digest()


def test_bad_yaml(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("- just\n- a list\n")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")


def test_overrides_skip_none():
    cfg = parse_config({"seed": 2})
    assert cfg.with_overrides(seed=None).seed == 2
    assert cfg.with_overrides(tau_fixed=2.0).temperature is None
    assert yaml.safe_load(yaml.safe_dump(cfg.echo()))["seed"] == 2


def test_shipped_desk_config_matches_defaults():
    root = Path(__file__).resolve().parents[1]
    assert load_config(root / "configs" / "desk.yaml") == parse_config({})
    assert load_config(root / "configs" / "idx.yaml").student.arch == "small_cnn"
