import math

import numpy as np
import pytest

import fedssl


def test_taxonomy():
    assert fedssl.CLASS_NAMES[fedssl.map_class("normal")] == "Normal"
    assert fedssl.CLASS_NAMES[fedssl.map_class("neptune")] == "DoS"
    assert fedssl.CLASS_NAMES[fedssl.map_class("worm")] == "R2L"
    with pytest.raises(fedssl.LabelError):
        fedssl.map_class("not-an-attack")


def test_default_budgets():
    arch = fedssl.ArchitectureSpec()
    assert arch.input_dim == 122
    assert fedssl.count_params(arch) == 53949
    assert fedssl.count_flops(arch) == 245056
    arch.conv = [(8, 3, 1, 2)]
    assert fedssl.count_params(arch) < 53949


def ntxent_oracle(za, zb, tau):
    def norm(m):
        return m / np.linalg.norm(m, axis=0, keepdims=True)

    za, zb = norm(za), norm(zb)
    b = za.shape[1]
    total = 0.0
    for u, v in ((za, zb), (zb, za)):
        for i in range(b):
            pos = math.exp(u[:, i] @ v[:, i] / tau)
            den = sum(math.exp(u[:, i] @ v[:, k] / tau) for k in range(b))
            den += sum(math.exp(u[:, i] @ u[:, k] / tau) for k in range(b) if k != i)
            total += -math.log(pos / den)
    return total / (2 * b)


def test_ntxent_matches_oracle():
    rng = np.random.default_rng(3)
    za = rng.normal(size=(6, 9))
    zb = rng.normal(size=(6, 9))
    loss, ga, gb = fedssl.ntxent(za, zb, 0.5)
    assert loss == pytest.approx(ntxent_oracle(za, zb, 0.5), abs=1e-10)
    assert ga.shape == za.shape and gb.shape == zb.shape
    with pytest.raises(fedssl.ConfigError):
        fedssl.ntxent(za, zb, 0.0)


def test_cross_entropy_uniform():
    loss, grad = fedssl.cross_entropy(np.zeros((5, 4)), [0, 1, 2, 3])
    assert loss == pytest.approx(math.log(5))
    assert grad.shape == (5, 4)


def test_metrics():
    r = fedssl.metrics([0, 0, 1, 1], [0, 1, 1, 1], 2)
    assert r["accuracy"] == pytest.approx(75.0)
    with pytest.raises(fedssl.DataError):
        fedssl.metrics([0, 1], [0], 2)
    ratios = fedssl.imbalance_ratios([77054, 53385, 14077, 3749, 252])
    assert ratios[4] == pytest.approx(305.77, abs=0.01)


def test_config_round_trip():
    cfg = fedssl.RunConfig.parse("[federation]\nrounds = 2\nclients = 3\n")
    back = fedssl.RunConfig.parse(cfg.to_ini())
    assert back.to_ini() == cfg.to_ini()
    with pytest.raises(fedssl.ConfigError):
        fedssl.RunConfig.parse("[federation]\nroundz = 2\n")


def test_prepare_train_report(tmp_path):
    raw = tmp_path / "raw"
    fedssl.write_synthetic(raw, 1500, 400, 5)
    cfg = fedssl.RunConfig.parse(
        "[partition]\nserver_labeled_count = 500\nclient_unlabeled_total = 700\n"
        "[federation]\nclients = 2\nrounds = 1\nclient_epochs = 1\nclient_batch = 128\nserver_batch = 64\n"
    )
    cfg.data_root = str(raw)
    cfg.seeds = [1]
    cfg.embedding_samples = 0
    info = fedssl.prepare(cfg, 1, tmp_path / "prepared")
    assert info["dim"] == 122
    assert info["server"] == 500
    assert sum(info["clients"]) == 700
    summary = fedssl.train(cfg, tmp_path / "prepared", tmp_path / "run")
    acc = summary["multiclass"]["accuracy"]
    assert 0.0 <= acc <= 100.0
    assert summary["binary"]["accuracy"] >= 0.0
    assert len(fedssl.report(tmp_path / "run" / "seed_1")) > 0
    with pytest.raises(fedssl.DataError):
        fedssl.report(tmp_path)


def test_shipped_config_is_the_default(monkeypatch):
    import pathlib

    monkeypatch.delenv(fedssl.DATA_ROOT_ENV, raising=False)
    path = pathlib.Path(__file__).resolve().parents[2] / "configs" / "default.ini"
    assert fedssl.RunConfig.load(path).to_ini() == fedssl.RunConfig.default().to_ini()
