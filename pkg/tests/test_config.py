import json

import pytest

from u2ad.config import RunConfig, env_overrides, from_dict, load_config
from u2ad.errors import ConfigError


def test_defaults_match_cited_values():
    cfg = RunConfig().validate()
    u, d, m = cfg.uncertainty, cfg.detection, cfg.model
    assert (u.mc_samples, u.temperature, u.mask_ratio, u.refresh_interval) == (10, 1.0, 0.75, 10)
    assert (m.patch_size, m.edge_weight) == (8, 0.1)
    assert (d.percentile, d.top_k, u.top_k) == (0.20, 3, 3)
    assert cfg.eval.folds == 5


@pytest.mark.parametrize(
    "data",
    [
        {"bogus": {}},
        {"uncertainty": {"mc_sample": 10}},
        {"uncertainty": {"mc_samples": 1}},
        {"uncertainty": {"mask_ratio": 1.0}},
        {"model": {"embed_dim": 30, "num_heads": 4}},
        {"detection": {"connectivity": 6}},
        {"schedule": {"stage1_epochs": 500}},
    ],
)
def test_invalid_config_rejected(data):
    with pytest.raises(ConfigError):
        from_dict(data)


def test_precedence(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("uncertainty: {mc_samples: 5, temperature: 2.0}\nio: {seed: 3}\n")
    env = {"U2AD_UNCERTAINTY__MC_SAMPLES": "7", "U2AD_IO__SEED": "4", "OTHER": "x"}
    cfg = load_config(path, {"io": {"seed": 9}}, env)
    assert cfg.uncertainty.mc_samples == 7  # env beats file
    assert cfg.uncertainty.temperature == 2.0  # file beats default
    assert cfg.io.seed == 9  # explicit beats env
    assert env_overrides(env) == {"uncertainty": {"mc_samples": 7}, "io": {"seed": 4}}


def test_env_unknown_key_rejected():
    with pytest.raises(ConfigError):
        load_config(None, None, {"U2AD_UNCERTAINTY__NOPE": "1"})


def test_missing_or_bad_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("- a\n- b\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_snapshot_roundtrip():
    cfg = from_dict({"uncertainty": {"mc_samples": 4}, "eval": {"k_values": [2, 4]}})
    again = from_dict(json.loads(cfg.snapshot()))
    assert again == cfg
