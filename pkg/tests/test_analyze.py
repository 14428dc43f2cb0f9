import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from daeflow import analyze as A
from daeflow import dynamics as D
from daeflow import transport as T
from daeflow.model import MixtureTarget, embedded_mixture, linear_schedule


def normal_grid(mu, axes=A.HELLINGER_AXES):
    x = A.axis_points(axes[0])
    return A.DensityGrid.from_values(axes, norm.pdf(x, mu))


# ---------------------------------------------------------------------------
# KDE

def test_identical_points_peak_at_the_point():
    axes = ((-1.0, 1.0, 201),)
    g = A.kde(np.full(2, 0.3), axes=axes)
    assert A.axis_points(axes[0])[np.argmax(g.values)] == pytest.approx(0.3)


def test_kde_of_standard_normal_samples():
    # the sup error fluctuates around 0.014 across seeds; test the median of five
    x = A.axis_points(A.HELLINGER_AXES[0])
    errs = [np.abs(A.kde(np.random.default_rng(s).standard_normal(10_000), bandwidth_scale=1.0).values
                   - norm.pdf(x)).max() for s in range(5)]
    assert np.median(errs) < 0.02


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.5, 2.0))
def test_kde_variance_adds_bandwidth(seed, scale):
    z = np.random.default_rng(seed).normal(0.5, 1.3, 300)
    g = A.kde(z, bandwidth_scale=scale, axes=((-15.0, 15.0, 6001),))
    _, cov = g.moments()
    s2 = np.var(z, ddof=1)
    h2 = (scale * A.silverman_factor(300, 1)) ** 2 * s2
    assert cov[0, 0] == pytest.approx(np.var(z) + h2, rel=1e-6)


def test_kde_rejects_dimension_mismatch():
    with pytest.raises(ValueError):
        A.kde(np.zeros((10, 2)) + np.arange(10)[:, None])


# ---------------------------------------------------------------------------
# Hellinger

def test_hellinger_zero_for_equal_densities():
    p = normal_grid(0.0)
    assert A.hellinger(p, p) == 0.0


def test_hellinger_disjoint_supports():
    axes = ((0.0, 1.0, 101),)
    x = A.axis_points(axes[0])
    p = A.DensityGrid.from_values(axes, (x < 0.3).astype(float))
    q = A.DensityGrid.from_values(axes, (x > 0.7).astype(float))
    assert A.hellinger(p, q) == pytest.approx(2.0, rel=1e-12)


def test_hellinger_of_shifted_normals():
    h = A.hellinger(normal_grid(0.0), normal_grid(1.0))
    assert h == pytest.approx(2 * (1 - math.exp(-1 / 8)), rel=0.02)


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_hellinger_symmetric_and_bounded(a, b):
    p, q = normal_grid(a), normal_grid(b)
    h = A.hellinger(p, q)
    assert h == A.hellinger(q, p)
    assert 0.0 <= h <= 2.0 + 1e-12


def test_hellinger_grid_mismatch():
    with pytest.raises(ValueError, match="identical grids"):
        A.hellinger(normal_grid(0.0), normal_grid(0.0, ((-10.0, 10.0, 999),)))


# ---------------------------------------------------------------------------
# grids

def test_density_grid_csv_round_trip(tmp_path):
    axes = ((-2.0, 2.0, 7), (-1.0, 3.0, 5))
    vals = np.random.default_rng(1).uniform(size=(7, 5))
    g = A.DensityGrid.from_values(axes, vals)
    g.to_csv(tmp_path / "g.csv")
    h = A.DensityGrid.from_csv(tmp_path / "g.csv")
    assert h.axes == g.axes
    np.testing.assert_array_equal(h.values, g.values)


def test_marginal_and_moments():
    axes = ((-8.0, 8.0, 321), (-8.0, 8.0, 321))
    vals = A.gaussian_mixture_on_grid([[1.0, -0.5]], [[1.0, 0.3], [0.3, 2.0]], axes)
    g = A.DensityGrid.from_values(axes, vals)
    mean, cov = g.moments()
    np.testing.assert_allclose(mean, [1.0, -0.5], atol=1e-6)
    np.testing.assert_allclose(cov, [[1.0, 0.3], [0.3, 2.0]], atol=1e-4)
    assert g.marginal(0).mass == pytest.approx(1.0, abs=1e-6)


def test_negative_density_rejected():
    with pytest.raises(ValueError):
        A.DensityGrid(((0.0, 1.0, 3),), [0.1, -0.1, 0.2])


# ---------------------------------------------------------------------------
# pi discretization

def test_concentrated_samples_fill_one_cell():
    centers = A.cell_centers(A.COLLAPSE_PI_AXES)
    c = centers[37]
    _, w = A.discretize_pi(np.tile(c, (200, 1)), bandwidth_scale=0.1)
    assert w[37] > 1 - 1e-9


def test_default_pi_grid():
    centers, w = A.discretize_pi(np.random.default_rng(2).standard_normal((A.COLLAPSE_PI_SAMPLES, 2)))
    assert centers.shape == (100, 2) and w.shape == (100,)
    np.testing.assert_allclose(np.unique(centers[:, 0]), -1.35 + 0.3 * np.arange(10))
    np.testing.assert_allclose(np.unique(centers[:, 1]), -2.25 + 0.5 * np.arange(10))
    assert abs(w.sum() - 1.0) <= 1e-12


def test_uniform_samples_give_near_uniform_weights():
    # uniform over a box that covers the grid with room for the kernels
    z = np.random.default_rng(3).uniform([-3.0, -5.0], [3.0, 5.0], size=(100_000, 2))
    _, w = A.discretize_pi(z)
    assert w.max() / w.min() <= 1.3


def test_grid_must_cover_support():
    z = 50.0 + 0.01 * np.random.default_rng(0).standard_normal((100, 2))
    with pytest.raises(ValueError, match="grid does not cover support"):
        A.discretize_pi(z, bandwidth_scale=0.5)


def test_weight_frame_whitens():
    Q = np.array([[2.0, 0.5], [0.5, 1.0]])
    F = A.weight_frame(Q)
    np.testing.assert_allclose(F @ Q @ F.T, np.eye(2), atol=1e-12)


# ---------------------------------------------------------------------------
# next generation

SCHED = linear_schedule(training_grid=(0.3, 0.7), n_steps=40)
TARGET = embedded_mixture(784, [[2.0, 0.0], [-1.0, 1.5]], variance=1.0,
                          reference=[[1.0, 0.0], [0.0, 1.0]])


def test_unlearned_weights_give_isotropic_gaussian():
    st0 = D.init_summary("cold", TARGET, 2, 0.4)
    nxt, info = A.next_generation_target(st0, SCHED, np.zeros((10, 2)))
    yv = T.y_variance(SCHED, 0.4).terminal
    assert info["yvar"] == yv
    assert nxt.weights.tolist() == [1.0]
    np.testing.assert_allclose(A.target_projected_cov(nxt)[0], yv * np.eye(2), atol=1e-14)
    np.testing.assert_array_equal(nxt.reference_overlaps, 0.0)


@pytest.fixture(scope="module")
def learned():
    st0 = D.init_summary("warm", TARGET, 2, 0.3, clusters=[0, 1], norm=0.5)
    zs = T.sample_Z(st0, SCHED, 2000, seed=5)
    return st0, zs.terminal


def test_next_generation_closure(learned):
    st0, z = learned
    nxt, info = A.next_generation_target(st0, SCHED, z)
    assert isinstance(nxt, MixtureTarget)
    assert info["yvar"] == T.y_variance(SCHED, st0.b).terminal
    assert nxt.weights.sum() == pytest.approx(1.0, abs=1e-12)
    st1 = D.init_summary("cold", nxt, 2, 0.0)
    hp = D.Hyperparams(eta=0.2)
    assert all(np.all(np.isfinite(a)) for a in D.rhs(st1, nxt, SCHED, hp).to_vector()[None])
    traj = D.integrate(st1, nxt, SCHED, hp, 0.1, step=0.05)
    assert np.all(np.isfinite(traj.states[-1].to_vector()))


def test_next_generation_reference_overlaps(learned):
    st0, z = learned
    nxt, info = A.next_generation_target(st0, SCHED, z)
    # E^T of a cluster centroid equals the reference coordinates of its pi cell
    np.testing.assert_allclose(nxt.reference_overlaps, info["centers"] @ info["frame"] @ st0.G,
                               atol=1e-12)


def test_target_top_variance_of_mixture():
    tgt = embedded_mixture(100, [[2.0, 0.0], [-2.0, 0.0]], variance=0.5,
                           reference=[[1.0, 0.0], [0.0, 1.0]])
    assert A.target_top_variance(tgt) == pytest.approx(4.0 + 0.5, rel=1e-12)
