import numpy as np
import pytest

from nettrim.admm import (
    AdmmConfig,
    check_feasible,
    gram_cache,
    prune_layer,
    prune_neuron,
    row_scale,
    weight_scale,
)
from nettrim.experiments import gen_sparse_weights
from nettrim.oracle import lp_vertex_oracle
from nettrim.tensor import l1_norm

TIGHT = AdmmConfig(tol_abs=1e-9, tol_rel=1e-9, max_iter=200000, direct_determined=False)


def relu_layer(rng, n, m, p, bias_row=False):
    x = rng.standard_normal((n, p))
    if bias_row:
        x = np.vstack([x, np.ones((1, p))])
    w = rng.standard_normal((x.shape[0], m))
    return x, w, np.maximum(w.T @ x, 0)


@pytest.mark.parametrize("seed", range(8))
def test_matches_lp_oracle(seed):
    rng = np.random.default_rng(seed)
    n, p = rng.integers(1, 4), rng.integers(2, 7)
    x = rng.standard_normal((n, p))
    y = np.maximum(rng.standard_normal(n) @ x, 0)
    ref = lp_vertex_oracle(x, y)
    w = prune_neuron(x, y, 0.0, TIGHT)
    assert np.max(np.abs(w - ref.w)) <= 1e-6


def test_sparse_recovery_large_p():
    rng = np.random.default_rng(3)
    w_true = gen_sparse_weights(40, 3, 7)
    x = rng.standard_normal((40, 120))
    y = np.maximum(w_true @ x, 0)
    w = prune_neuron(x, y, 0.0, AdmmConfig(tol_abs=1e-9, tol_rel=1e-9))
    np.testing.assert_allclose(w, w_true, atol=1e-6)


def test_direct_path_matches_admm(rng):
    x, _, y = relu_layer(rng, 6, 3, 40, bias_row=True)
    direct = prune_layer(x, y, cfg=AdmmConfig())
    assert direct.direct_columns == [0, 1, 2]
    admm = prune_layer(x, y, cfg=TIGHT)
    assert admm.direct_columns == []
    np.testing.assert_allclose(direct.weights, admm.weights, atol=1e-6)


@pytest.mark.parametrize("rows,weights", [(False, False), (True, False), (False, True), (True, True)])
def test_rescalings_keep_the_minimizer(rows, weights):
    rng = np.random.default_rng(11)
    x, _, y = relu_layer(rng, 8, 2, 12, bias_row=True)
    x[:-1] *= 0.05
    base = prune_layer(x, y, cfg=TIGHT)
    cfg = AdmmConfig(tol_abs=1e-9, tol_rel=1e-9, max_iter=200000, direct_determined=False,
                     scale_rows=rows, scale_weights=weights)
    other = prune_layer(x, y, cfg=cfg)
    assert other.converged
    np.testing.assert_allclose(other.objective, base.objective, rtol=1e-5)


@pytest.mark.parametrize("eps", [0.01, 0.3, 2.0])
def test_epsilon_feasible_and_sparser_than_original(rng, eps):
    x, w, y = relu_layer(rng, 10, 4, 60, bias_row=True)
    res = prune_layer(x, y, cfg=AdmmConfig(epsilon=eps, tol_abs=1e-8, tol_rel=1e-8))
    assert res.converged and res.feasible
    om = y > 0
    assert np.linalg.norm((res.weights.T @ x - y)[om]) <= eps * (1 + 1e-4) + 1e-6
    assert np.all((res.weights.T @ x)[~om] <= 1e-5 * max(1.0, np.linalg.norm(y[om])))
    # the trained weights are feasible, so the minimum cannot exceed their l1 norm
    assert res.objective <= l1_norm(w) + 1e-6


def test_objective_decreases_with_epsilon(rng):
    x, _, y = relu_layer(rng, 10, 3, 50)
    objs = [prune_layer(x, y, cfg=AdmmConfig(epsilon=e, tol_abs=1e-8, tol_rel=1e-8)).objective
            for e in (0.0, 0.5, 2.0, 8.0)]
    assert all(a >= b - 1e-6 for a, b in zip(objs, objs[1:]))


def test_columns_are_independent(rng):
    x, _, y = relu_layer(rng, 7, 3, 15)
    cfg = AdmmConfig(tol_abs=1e-9, tol_rel=1e-9, max_iter=100000, direct_determined=False)
    full = prune_layer(x, y, cfg=cfg).weights
    for j in range(3):
        np.testing.assert_allclose(prune_neuron(x, y[j], 0.0, cfg), full[:, j], atol=1e-6)


def test_linear_layer_mask(rng):
    x = rng.standard_normal((4, 10))
    w = rng.standard_normal((4, 2))
    y = w.T @ x
    res = prune_layer(x, y, mask=np.ones_like(y, dtype=bool), cfg=AdmmConfig())
    np.testing.assert_allclose(res.weights, w, atol=1e-8)


def test_gram_cache_reuse(rng):
    x, _, y = relu_layer(rng, 5, 2, 30)
    g = gram_cache(x)
    a = prune_layer(x, y, gram=g)
    b = prune_layer(x, y)
    np.testing.assert_array_equal(a.weights, b.weights)
    with pytest.raises(ValueError):
        prune_layer(x[:4], y, gram=g)


def test_input_validation(rng):
    x, _, y = relu_layer(rng, 3, 2, 5)
    with pytest.raises(ValueError):
        prune_layer(x, y[:, :4])
    with pytest.raises(ValueError):
        prune_layer(x, y, v=np.zeros((2, 4)))
    with pytest.raises(ValueError):
        prune_layer(x, y, mask=np.ones((1, 5), bool))
    for bad in (dict(rho=0), dict(tol_abs=0), dict(epsilon=-1), dict(max_iter=0),
                dict(support_threshold=-1)):
        with pytest.raises(ValueError):
            AdmmConfig(**bad)


def test_max_iter_reports_nonconvergence(rng):
    x, _, y = relu_layer(rng, 6, 2, 8)
    res = prune_layer(x, y, cfg=AdmmConfig(max_iter=3, direct_determined=False))
    assert not res.converged and not res.feasible
    assert res.iterations == 3


def test_helpers():
    x = np.array([[1.0, 1.0], [10.0, 10.0], [0.0, 0.0]])
    d = row_scale(x)
    assert d[2] == 1.0
    assert d[0] * 1.0 == pytest.approx(d[1] * 10.0)
    assert weight_scale(np.zeros(3)) == 1.0
    assert weight_scale(np.array([3.0, 4.0])) == pytest.approx(np.sqrt(12.5))
    ok, viol = check_feasible(np.ones((2, 1)), np.eye(2), np.array([[1.0, 0.0]]),
                              np.zeros((1, 2)), 0.0, 1e-9)
    assert not ok and viol == pytest.approx(1.0)


def test_neuron_trivial_cases():
    x = np.random.default_rng(0).standard_normal((4, 9))
    np.testing.assert_array_equal(prune_neuron(x, np.zeros(9)), np.zeros(4))
    np.testing.assert_allclose(prune_neuron(np.array([[1.0]]), np.array([2.0])), [2.0], atol=1e-8)
