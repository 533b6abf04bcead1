import json

import pytest

from puq.config import RunConfig, load_config
from puq.core import ConfigError


def test_defaults_resolve():
    cfg = load_config().resolve()
    assert cfg.method == "e-puq" and cfg.K == 12 and cfg.n_samples == 12
    assert len(cfg.grid.grid1) == 50 and len(cfg.grid.grid2) == 101 and len(cfg.grid.grid3) == 20


def test_da_defaults():
    cfg = load_config(overrides={"method": "da-puq", "task.shape": [20, 20, 3]}).resolve()
    assert cfg.K == 100 and cfg.n_samples == 100


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError):
        load_config(overrides={"bogus": 1})
    with pytest.raises(ConfigError):
        load_config(overrides={"risk.gamma": 0.1})


def test_bad_values():
    with pytest.raises(ConfigError):
        load_config(overrides={"risk.alpha": 1.5})
    with pytest.raises(ConfigError):
        load_config(overrides={"task.rho": 1.0})
    with pytest.raises(ConfigError):
        load_config(overrides={"patch.mode": "local-tiling", "patch.patch_h": 3, "patch.patch_w": 3})
    with pytest.raises(ConfigError):
        load_config(overrides={"task.kind": "files"})


def test_resolve_checks():
    with pytest.raises(ConfigError, match="n_samples"):
        load_config(overrides={"method": "da-puq", "K": 10, "n_samples": 5}).resolve()
    with pytest.raises(ConfigError, match="K=13"):
        load_config(overrides={"method": "da-puq", "K": 13}).resolve()
    with pytest.raises(ConfigError):
        load_config(overrides={"K": 4}).resolve()  # e-puq needs K = d
    with pytest.raises(ConfigError, match="grid3"):
        load_config(overrides={"method": "rda-puq", "K_max": 10, "grid.grid3": [0.05, 1.0]}).resolve()


def test_dump_roundtrip(tmp_path):
    cfg = load_config(overrides={"method": "da-puq", "seed": 7, "task.rho": 0.5}).resolve()
    path = tmp_path / "c.json"
    path.write_text(cfg.dump())
    back = load_config(path)
    assert back == cfg and back.resolve() == cfg


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "a.json").write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "a.json")
    (tmp_path / "b.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "b.json")


def test_overrides_apply_over_file(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"seed": 1, "task": {"rho": 0.2}}))
    cfg = load_config(tmp_path / "c.json", {"seed": 9, "n_cal": None})
    assert cfg.seed == 9 and cfg.task.rho == 0.2 and cfg.n_cal == RunConfig().n_cal
