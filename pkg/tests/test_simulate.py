import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from daeflow import dynamics as D
from daeflow import simulate as S
from daeflow.model import embedded_mixture, linear_schedule


def random_params(d, r, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return S.DAEParams(scale * rng.standard_normal((d, r)), rng.standard_normal(r), rng.uniform(-1, 1))


def random_pair(d, seed):
    rng = np.random.default_rng(seed + 1000)
    return rng.standard_normal(d) + 0.5, rng.standard_normal(d)


SCHED = linear_schedule(training_grid=(0.25, 0.6), p="cos")


def test_zero_learning_rate_leaves_params_unchanged():
    p = random_params(20, 2, 0)
    x1, x0 = random_pair(20, 0)
    q = S.sgd_step(p, SCHED, S.SimHyperparams(eta=0.0), x1, x0)
    np.testing.assert_array_equal(q.w, p.w)
    np.testing.assert_array_equal(q.v, p.v)
    assert q.b == p.b


def test_hand_gradient_identity_two_dimensions():
    s = linear_schedule(training_grid=(0.5,))
    w = np.array([[0.7], [-1.2]])
    b, eta = 0.3, 0.1
    x1, x0 = np.array([1.0, -0.5]), np.array([0.2, 0.4])
    xt = 0.5 * x0 + 0.5 * x1
    proj = (w[0, 0] * xt[0] + w[1, 0] * xt[1]) / 2
    f = b * xt + w[:, 0] * proj
    res = f - x1
    # dL/dw_j = sum_i 2 res_i (delta_ij proj + w_i xt_j / 2)
    gw = np.array([sum(2 * res[i] * ((i == j) * proj + w[i, 0] * xt[j] / 2) for i in range(2))
                   for j in range(2)])
    gb = 2 * res @ xt
    q = S.sgd_step(S.DAEParams(w, [0.0], b), s, S.SimHyperparams(eta, 0.0, "identity"), x1, x0)
    np.testing.assert_allclose(q.w[:, 0], w[:, 0] - eta * gw, rtol=1e-14)
    assert q.b == pytest.approx(b - eta / 4 * gb, rel=1e-14)


@pytest.mark.parametrize("act", ["tanh", "relu", "identity"])
def test_expanded_and_direct_gradients_agree(act):
    p = random_params(50, 3, 1)
    x1, x0 = random_pair(50, 1)
    a = S.gradients(p, x1, x0, SCHED, act)
    b = S.gradients_expanded(p, x1, x0, SCHED, act)
    for u, v in zip(a, b):
        np.testing.assert_allclose(u, v, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("act", ["tanh", "relu"])
def test_gradients_match_finite_differences(act):
    d, r, h = 50, 3, 1e-6
    p = random_params(d, r, 2)
    x1, x0 = random_pair(d, 2)
    gw, gv, gb = S.gradients(p, x1, x0, SCHED, act)

    def L(w=p.w, v=p.v, b=p.b):
        return S.loss(S.DAEParams(w, v, b), x1, x0, SCHED, act)

    fw = np.zeros_like(p.w)
    for i in range(d):
        for j in range(r):
            e = np.zeros_like(p.w)
            e[i, j] = h
            fw[i, j] = (L(w=p.w + e) - L(w=p.w - e)) / (2 * h)
    fv = np.array([(L(v=p.v + h * np.eye(r)[j]) - L(v=p.v - h * np.eye(r)[j])) / (2 * h)
                   for j in range(r)])
    fb = (L(b=p.b + h) - L(b=p.b - h)) / (2 * h)
    assert np.linalg.norm(fw - gw) <= 1e-6 * np.linalg.norm(gw)
    assert np.linalg.norm(fv - gv) <= 1e-6 * np.linalg.norm(gv)
    assert abs(fb - gb) <= 1e-6 * abs(gb)


def test_weight_decay_shrinks_all_weights():
    p = random_params(30, 2, 3)
    x1, x0 = random_pair(30, 3)
    hp = S.SimHyperparams(0.2, 0.5)
    q0 = S.sgd_step(p, SCHED, S.SimHyperparams(0.2, 0.0), x1, x0)
    q1 = S.sgd_step(p, SCHED, hp, x1, x0)
    np.testing.assert_allclose(q0.w - q1.w, 2 * 0.2 * 0.5 / 30 * p.w, rtol=1e-12)


# ---------------------------------------------------------------------------
# statistics and initialization

TARGET = embedded_mixture(200, [[2.0, 0.0], [-2.0, 0.0], [0.0, 2.0]], variance=[1.0, 0.5, 1.0],
                          reference=[[1.0, 0.0], [0.0, 1.0]])


def test_zero_weights_give_zero_statistics():
    st0 = S.measure_summary(S.DAEParams(np.zeros((200, 2)), np.zeros(2), 0.0), TARGET)
    for arr in (st0.m, st0.q, st0.g):
        assert np.abs(arr).max() == 0.0


def test_orthonormal_columns_give_identity_overlap():
    Qm = np.linalg.qr(np.random.default_rng(0).standard_normal((200, 2)))[0]
    st0 = S.measure_summary(S.DAEParams(np.sqrt(200) * Qm, np.zeros(2), 0.0), TARGET)
    np.testing.assert_allclose(st0.Qbar, np.eye(2), atol=1e-12)


def test_warm_params_match_warm_summary():
    p = S.init_params("warm", TARGET, 2, 0.2, clusters=[0, 2], norm=0.1)
    a = S.measure_summary(p, TARGET)
    b = D.init_summary("warm", TARGET, 2, 0.2, clusters=[0, 2], norm=0.1)
    np.testing.assert_allclose(a.to_vector(), b.to_vector(), atol=1e-12)


def test_measure_needs_embedding_dimension():
    with pytest.raises(ValueError):
        S.measure_summary(S.DAEParams(np.zeros((10, 1)), [0.0], 0.0), TARGET)


# ---------------------------------------------------------------------------
# training

def test_zero_steps_returns_initial_measurement():
    p0 = S.init_params("cold", TARGET, 2, 0.1, seed=3, scale=0.5)
    p, tr = S.train(p0, TARGET, SCHED, S.SimHyperparams(0.2), 0, seed=1)
    assert len(tr) == 1 and tr.times[0] == 0.0
    np.testing.assert_array_equal(tr.states[0].to_vector(), S.measure_summary(p0, TARGET).to_vector())


def test_training_is_deterministic_and_timed():
    p0 = S.init_params("cold", TARGET, 2, 0.1, seed=3, scale=0.5)
    hp = S.SimHyperparams(0.2)
    a, ta = S.train(p0, TARGET, SCHED, hp, 250, seed=7, measure_every=100)
    b, tb = S.train(p0, TARGET, SCHED, hp, 250, seed=7, measure_every=100)
    np.testing.assert_array_equal(a.w, b.w)
    np.testing.assert_allclose(ta.times, 2 * 0.2 * np.array([0, 100, 200, 250]) / 200)
    for x, y in zip(ta.states, tb.states):
        np.testing.assert_array_equal(x.to_vector(), y.to_vector())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_step():
    p0 = S.init_params("cold", TARGET, 2, 0.1, seed=3, scale=1.0)
    with pytest.raises(FloatingPointError, match="diverged at step"):
        S.train(p0, TARGET, SCHED, S.SimHyperparams(1e6, activation="identity"), 100, seed=0)


def test_default_measure_spacing():
    assert S.default_measure_every(1000, 0.2) == 250
    assert S.steps_for(4.0, 1000, 0.2) == 10000


# ---------------------------------------------------------------------------
# sampling

def test_pure_contraction_sampling():
    s = linear_schedule(n_steps=50, t_final=0.9)
    p = S.DAEParams(np.zeros((30, 1)), [0.0], 0.0)
    X = S.generate_samples(p, s, 5, seed=4)
    _, noise = S.streams(4)
    X0 = noise.standard_normal((5, 30))
    grid = s.sampling_grid
    factor = np.prod(1 + np.diff(grid) * s.dalpha(grid[:-1]) / s.alpha(grid[:-1]))
    np.testing.assert_allclose(X, X0 * factor, rtol=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_sampling_reproducible(seed):
    p = random_params(20, 2, 5)
    s = linear_schedule(epsilon=0.3, n_steps=10)
    a = S.generate_samples(p, s, 1, seed=seed)
    b = S.generate_samples(p, s, 1, seed=seed)
    np.testing.assert_array_equal(a, b)


def test_sampling_keeps_all_times():
    p = random_params(20, 2, 5, scale=0.3)
    s = linear_schedule(epsilon=0.3, n_steps=10)
    out = S.generate_samples(p, s, 3, seed=1, keep="all")
    assert len(out) == s.sampling_grid.size
    np.testing.assert_array_equal(out[-1], S.generate_samples(p, s, 3, seed=1))


def test_projection_of_samples():
    X = np.arange(12.0).reshape(3, 4)
    E = np.eye(4)[:, [1]]
    np.testing.assert_array_equal(S.project_samples(X, E)[:, 0], X[:, 1])


def test_sampled_init_matches_random_overlap_law():
    # Qbar of i.i.d. N(0, s^2) entries concentrates at s^2 I
    p = S.init_params("sampled", TARGET, 2, 0.0, seed=9, scale=1.3)
    st0 = S.measure_summary(p, TARGET)
    assert np.abs(st0.Qbar - 1.69 * np.eye(2)).max() < 5 * 1.69 * math.sqrt(2 / 200)
