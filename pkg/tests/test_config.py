import json

import pytest

from ddyk.config import ConfigError, RunConfig, from_dict, load_config, write_snapshot


def test_defaults():
    cfg = load_config(None)
    assert cfg.td3.policy_delay == 4 and cfg.td3.gamma == 0.99
    assert cfg.env.tank.noise_var == 0.015
    assert cfg.hankel.L == 10 and cfg.hankel.ridge == 1e-6
    assert cfg.seeds == (0, 1, 2, 3, 4)


def test_nested_overrides():
    cfg = from_dict({"env": {"tank": {"r_tank": 0.3}, "setpoints": [0.7, 0.3]}, "td3": {"batch_size": 32}})
    assert cfg.env.tank.r_tank == 0.3 and cfg.env.setpoints == (0.7, 0.3)
    assert cfg.td3.batch_size == 32 and cfg.td3.policy_delay == 4


@pytest.mark.parametrize(
    "doc, match",
    [
        ({"bogus": 1}, "unknown key"),
        ({"env": {"tank": {"radius": 1}}}, r"config\.env\.tank: unknown key"),
        ({"td3": {"gamma": 1.5}}, "gamma"),
        ({"seeds": []}, "seeds"),
        ({"episodes": -1}, "episodes"),
        ({"env": {"setpoints": [1.4]}}, "setpoints"),
        ({"hankel": {"mode": "chirp"}}, "mode"),
        ({"env": "tank"}, "expected an object"),
    ],
)
def test_validation_errors(doc, match):
    with pytest.raises(ConfigError, match=match):
        from_dict(doc)


def test_snapshot_round_trip(tmp_path):
    cfg = from_dict({"seeds": [3, 7], "noise": False, "hankel": {"order_bound": 5}})
    path = write_snapshot(cfg, tmp_path / "config.snapshot")
    again = load_config(path)
    assert again == cfg
    write_snapshot(again, tmp_path / "second")
    assert (tmp_path / "second").read_bytes() == path.read_bytes()


def test_noise_flag_reaches_env():
    assert RunConfig(noise=False).env_config().noise is False


def test_unreadable_config(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(tmp_path / "bad.json")
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.json")
