import json

import numpy as np
import pytest

import mmvae

DESK = {
    "simulate": {
        "patients": 40,
        "instruments": {"compact": {"count": 2, "items": 4, "levels": 3}},
        "covariates": False,
    },
    "train": {"latent_dim": 2, "epochs": 2, "vae_updates_per_epoch": 10, "hidden": [4], "learning_rate": 0.01},
    "test": {"bootstrap": {"replicates": 3}},
    "meta": {"bootstrap_replicates": 20, "null_replicates": 5},
}


@pytest.fixture(scope="module")
def config():
    return mmvae.Config(json.dumps(DESK), seed=3)


@pytest.fixture(scope="module")
def dataset(config):
    data, truth = mmvae.simulate(config)
    assert "latent_mean" in truth
    return data


@pytest.fixture(scope="module")
def model(dataset, config):
    return mmvae.train(dataset, config)


def test_config_round_trip(config):
    again = mmvae.Config(config.to_json())
    assert again.to_json() == config.to_json()
    with pytest.raises(mmvae.MmvaeError):
        mmvae.Config('{"train": {"unknown": 1}}')


def test_dataset_text_round_trip(dataset):
    assert dataset.patient_count == 40
    assert dataset.instruments == ["S1", "S2"]
    again = mmvae.Dataset.from_text(dataset.to_text())
    assert again.to_text() == dataset.to_text()
    totals = dataset.sum_scores(0)
    assert all(0 <= t <= 8 for _, _, t in totals)


def test_train_and_checkpoint(tmp_path, model):
    assert model.latent_dim == 2
    assert model.epochs_done == 2
    assert len(model.trace) == 2
    path = str(tmp_path / "model.ckpt")
    model.save(path)
    assert np.array_equal(mmvae.Model.load(path).fixed_effects, model.fixed_effects)


def test_test_and_effects(model, dataset, config):
    res = mmvae.lr_test(model, dataset, config)
    assert res["block"] == "switch"
    assert len(res["null_lambdas"]) == 3
    assert 0 < res["p_value"] <= 1
    rows = mmvae.effects(model, dataset, config)
    assert [r["instrument"] for r in rows] == ["S1", "S2"]


def test_inject_adds_points(dataset):
    injected, report = mmvae.inject(dataset, rate=2.0, period=1.0, seed=5)
    assert report["points_added"] > 0
    before = sum(t for _, _, t in dataset.sum_scores(0))
    after = sum(t for _, _, t in injected.sum_scores(0))
    assert after > before


def test_meta(dataset, config):
    out = mmvae.meta(dataset, config)
    assert len(out["fits"]) == 2
    assert {f["status"] for f in out["fits"]} <= {"fitted", "not_converged", "skipped", "failed"}


def test_fit_lmm_recovers_fixed_effect():
    rng = np.random.default_rng(0)
    X, T, Z = [], [], []
    for _ in range(80):
        t = np.arange(5.0)
        x = np.column_stack([np.ones(5), t])
        u = rng.normal(0, 0.5)
        X.append(x)
        T.append(np.ones((5, 1)))
        Z.append((x @ np.array([1.0, 0.3]) + u + rng.normal(0, 0.2, 5)).reshape(5, 1))
    out = mmvae.fit_lmm(X, T, Z, "REML")
    assert out["converged"]
    assert abs(out["B"][1, 0] - 0.3) < 0.05
