import json

import pytest

from quality_fusion.config import ExperimentConfig
from quality_fusion.errors import ConfigError


def test_defaults():
    cfg = ExperimentConfig()
    assert (cfg.N, cfg.C, cfg.K, cfg.I) == (16, 16, 16, 4)
    assert cfg.epsilon == 1e-6
    assert cfg.hidden == 32
    assert cfg.reliability_mode == "combined"


def test_from_json(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"K": 8, "I": 2, "lr": 0.05, "mlp_hidden": None, "epochs": 10.0}))
    cfg = ExperimentConfig.from_json(path)
    assert (cfg.K, cfg.I, cfg.lr, cfg.epochs) == (8, 2, 0.05, 10)
    assert isinstance(cfg.epochs, int)
    assert cfg.mlp_hidden is None


@pytest.mark.parametrize(
    "data",
    [
        {"unknown": 1},
        {"K": 0},
        {"epochs": 2.5},
        {"alpha_init": 1.0},
        {"reliability_mode": "cosine"},
        {"exclusive_fraction": 1.5},
        {"seed": None},
        {"lr": "fast"},
    ],
)
def test_invalid_values(data):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(data)


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json(bad)
    listing = tmp_path / "list.json"
    listing.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json(listing)


def test_replace_ignores_none():
    cfg = ExperimentConfig().replace(seed=None, epochs=5)
    assert cfg.seed == 0 and cfg.epochs == 5


def test_digest_is_stable_and_sensitive():
    a = ExperimentConfig()
    assert a.digest(mr=0.3) == ExperimentConfig().digest(mr=0.3)
    assert a.digest(mr=0.3) != a.digest(mr=0.4)
    assert a.digest() != a.replace(K=8).digest()
    assert len(a.digest()) == 16


def test_roundtrip_through_dict():
    cfg = ExperimentConfig(K=4, mlp_hidden=7)
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
