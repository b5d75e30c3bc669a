import json
from dataclasses import replace

import numpy as np
import pytest

from hwtransfer import model as mdl
from hwtransfer.dataset import Examples, NormStats, SplitSpec, extract_examples, split_train
from hwtransfer.model import (
    DynamicsModel,
    FineTuneConfig,
    InsufficientDataError,
    ModelLoadError,
    TrainConfig,
)
from hwtransfer.tank_sim import TankConfig, simulate_household

from conftest import make_profile
from oracles import gradient_check_failures

IDENTITY = NormStats(np.zeros(3), np.ones(3))


def tiny(W1, b1, W2, b2, W3, b3, h1=1, h2=1, norm=IDENTITY):
    flat = np.concatenate([np.ravel(a) for a in (W1, b1, W2, b2, W3, b3)]).astype(float)
    return DynamicsModel(norm, flat, h1, h2, {})


def ex(x, y):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return Examples(x, np.asarray(y, dtype=float), np.arange(len(x)))


def test_hand_forward_pass():
    m = tiny([1, 0, 0], [0], [1], [-2], [3], [1])
    assert mdl.predict(m, [4.0, 123.0, -9.0]) == 7.0


def test_constant_network():
    m = tiny(np.zeros((4, 3)), np.zeros(4), np.zeros((2, 4)), np.zeros(2), np.zeros((1, 2)), [45.0], h1=4, h2=2)
    np.testing.assert_array_equal(mdl.predict(m, np.random.default_rng(0).normal(size=(10, 3))), 45.0)


def test_normalization_identity():
    norm = NormStats(np.array([1.0, 2.0, 3.0]), np.array([2.0, 2.0, 2.0]))
    np.testing.assert_array_equal(mdl._standardize(norm, norm.mean), np.zeros(3))


def test_predict_rejects_non_finite():
    m = tiny([1, 0, 0], [0], [1], [-2], [3], [1])
    with pytest.raises(ValueError):
        mdl.predict(m, [np.nan, 0, 0])


def test_init_glorot_and_deterministic():
    cfg = TrainConfig(seed=3)
    a, b = mdl.init(cfg, IDENTITY), mdl.init(cfg, IDENTITY)
    np.testing.assert_array_equal(a.params, b.params)
    assert not np.array_equal(a.params, mdl.init(replace(cfg, seed=4), IDENTITY).params)
    for name, (fo, fi) in (("W1", (32, 3)), ("W2", (32, 32)), ("W3", (1, 32))):
        bound = np.sqrt(6 / (fi + fo))
        assert a.layers[name].shape == (fo, fi)
        assert np.abs(a.layers[name]).max() <= bound
    for name in ("b1", "b2", "b3"):
        assert not a.layers[name].any()


def test_l2_term_alone():
    # single non-zero weight w = 2, output already equals the target
    m = tiny([0, 0, 0], [0], [0], [0], [2], [45])
    loss, g = mdl.loss_and_grad(m, ex([1, 1, 1], [45]), 0.5)
    assert loss == pytest.approx(2.0)
    assert g["W3"][0, 0] == pytest.approx(2.0)
    assert g["W1"].sum() == 0 and g["b3"][0] == 0


def test_perfect_fit_has_zero_data_gradient():
    m = tiny([1, 0, 0], [0], [1], [-2], [3], [1])
    loss, g = mdl.loss_and_grad(m, ex([[4, 0, 0], [5, 0, 0]], [7, 10]), 0.0)
    assert loss == 0
    assert all(not v.any() for v in g.values())


def test_gradients_match_central_differences():
    assert gradient_check_failures(np.random.default_rng(2024), 100) == 0


def test_mae_hand_example():
    # output = t0 with identity layers
    m = tiny([0, 0, 1], [0], [1], [0], [1], [0])
    assert mdl.evaluate_mae(m, ex([[0, 0, 44], [0, 0, 46]], [45, 45])) == 1.0


def test_evaluate_is_read_only_and_permutation_invariant(rng):
    m = mdl.init(TrainConfig(h1=4, h2=4), IDENTITY)
    data = ex(rng.normal(size=(30, 3)), rng.normal(size=30))
    before = m.params.tobytes()
    a = mdl.evaluate_mae(m, data)
    perm = rng.permutation(30)
    assert mdl.evaluate_mae(m, data.subset(perm)) == pytest.approx(a, rel=1e-15)
    assert m.params.tobytes() == before
    with pytest.raises(ValueError):
        mdl.evaluate_mae(m, Examples.empty())


def test_fold_normalization(rng):
    norm = NormStats(rng.normal(size=3) * 10, rng.uniform(0.1, 5, size=3))
    m = replace(mdl.init(TrainConfig(seed=1), norm), params=rng.normal(size=mdl.n_params(32, 32)))
    x = rng.normal(size=(50, 3)) * norm.sd + norm.mean
    w1, b1 = mdl.fold_normalization(m)
    v = m.layers
    r1 = np.maximum(x @ w1.T + b1, 0)
    r2 = np.maximum(r1 @ v["W2"].T + v["b2"], 0)
    folded = r2 @ v["W3"][0] + v["b3"][0]
    np.testing.assert_allclose(folded, mdl.predict(m, x), atol=1e-10, rtol=0)


@pytest.fixture(scope="module")
def local_set():
    s, _ = simulate_household(TankConfig(), make_profile(rate=0.8, mean=9.0, sd=3.6), 40)
    return split_train(extract_examples(s), SplitSpec(4))


def test_train_deterministic_and_improves(local_set):
    cfg = TrainConfig(epochs=20, seed=5)
    a, b = mdl.train(local_set, cfg), mdl.train(local_set, cfg)
    np.testing.assert_array_equal(a.params, b.params)
    start = mdl.init(cfg, a.norm)
    assert mdl.evaluate_mae(a, local_set) <= mdl.evaluate_mae(start, local_set)
    zero = mdl.train(local_set, replace(cfg, epochs=0))
    np.testing.assert_array_equal(zero.params, start.params)


def test_train_small_set_uses_full_batch():
    data = ex([[0, 0, 50], [1, 2, 51], [2, 4, 52]], [50, 49, 48])
    m = mdl.train(data, TrainConfig(epochs=3, batch_size=64))
    assert np.all(np.isfinite(m.params))
    with pytest.raises(InsufficientDataError):
        mdl.train(Examples.empty(), TrainConfig())


def test_fine_tune_semantics(local_set):
    cfg = TrainConfig(epochs=60, seed=2)
    base = mdl.train(local_set, cfg, {"variant": "ptm_large"})
    same = mdl.fine_tune(base, local_set, cfg, FineTuneConfig(epoch_scale=0.0))
    np.testing.assert_array_equal(same.params, base.params)
    same = mdl.fine_tune(base, local_set, cfg, FineTuneConfig(lr_scale=0.0))
    np.testing.assert_array_equal(same.params, base.params)
    tuned = mdl.fine_tune(base, local_set, cfg, FineTuneConfig())
    assert tuned.norm is base.norm
    assert tuned.metadata["base"]["variant"] == "ptm_large"
    assert tuned.metadata["finetune_epochs"] == 12
    assert mdl.evaluate_mae(tuned, local_set) <= 1.05 * mdl.evaluate_mae(base, local_set)
    refit = mdl.fine_tune(base, local_set.subset(np.arange(50)), cfg, FineTuneConfig(freeze_norm=False))
    assert not np.array_equal(refit.norm.mean, base.norm.mean)
    with pytest.raises(InsufficientDataError):
        mdl.fine_tune(base, Examples.empty(), cfg, FineTuneConfig())


@pytest.mark.parametrize("kw", [{"h1": 0}, {"lr": 1.0}, {"epochs": -1}, {"batch_size": 0}])
def test_train_config_rejects(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_save_load_round_trip(tmp_path, rng):
    norm = NormStats(rng.normal(size=3), rng.uniform(0.5, 2, size=3))
    m = replace(mdl.init(TrainConfig(h1=8, h2=5), norm, {"variant": "local", "seed": 1}),
                params=rng.normal(size=mdl.n_params(8, 5)))
    path = tmp_path / "m.json"
    mdl.save(m, path)
    back = mdl.load(path)
    np.testing.assert_array_equal(back.params, m.params)
    np.testing.assert_array_equal(back.norm.mean, m.norm.mean)
    np.testing.assert_array_equal(back.norm.sd, m.norm.sd)
    assert back.metadata == m.metadata and (back.h1, back.h2) == (8, 5)
    x = rng.normal(size=(100, 3))
    np.testing.assert_array_equal(mdl.predict(back, x), mdl.predict(m, x))


def test_load_errors(tmp_path, rng):
    m = mdl.init(TrainConfig(h1=4, h2=4), IDENTITY)
    path = tmp_path / "m.json"
    mdl.save(m, path)
    doc = json.loads(path.read_text())
    doc["shapes"]["W2"] = [4, 5]
    path.write_text(json.dumps(doc))
    with pytest.raises(ModelLoadError, match="shape"):
        mdl.load(path)
    doc = json.loads(json.dumps(mdl.to_dict(m)))
    doc["params"]["W1"] = doc["params"]["W1"][:2]
    path.write_text(json.dumps(doc))
    with pytest.raises(ModelLoadError, match="W1"):
        mdl.load(path)
    path.write_text("{not json")
    with pytest.raises(ModelLoadError):
        mdl.load(path)
    with pytest.raises(ModelLoadError, match="not found"):
        mdl.load(tmp_path / "missing.json")
