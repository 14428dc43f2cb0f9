"""Reduced description of sampling with a trained autoencoder.

The sampling SDE with the parametrized denoiser splits into an r-dimensional
nonlinear process Z = w^T X / sqrt(d) and an isotropic Gaussian component in
the orthogonal complement of the weight span.  The projection onto a fixed
reference space follows from the overlaps G.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .model import Schedule
from .moments import get_activation

PINV_RTOL = 1e-10
NOISE_BLOCK = 1024


@dataclass(frozen=True)
class TransportCoeffs:
    """Gamma_t and Delta_t evaluated through the schedule for a trained b."""

    schedule: Schedule
    b: float

    def gamma(self, t):
        s = self.schedule
        a = s.alpha(t)
        return s.dbeta(t) - s.dalpha(t) / a * s.beta(t) + s.epsilon(t) * s.beta(t) / a ** 2

    def delta(self, t):
        s = self.schedule
        a = s.alpha(t)
        return self.b * self.gamma(t) + s.dalpha(t) / a - s.epsilon(t) / a ** 2


def coeffs(schedule: Schedule, b: float) -> TransportCoeffs:
    grid = schedule.sampling_grid
    if np.any(np.asarray(schedule.alpha(grid)) <= 0):
        raise ValueError("alpha_t = 0 on the sampling grid; extend t_f < 1")
    return TransportCoeffs(schedule, float(b))


def sym_sqrt(Q) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (Q + Q.T))
    vals = np.where(vals > PINV_RTOL * max(vals.max(), 0.0), vals, 0.0)
    return (vecs * np.sqrt(vals)) @ vecs.T


def pinv_psd(Q) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (Q + Q.T))
    keep = vals > PINV_RTOL * max(vals.max(), 0.0)
    inv = np.where(keep, 1.0 / np.where(keep, vals, 1.0), 0.0)
    return (vecs * inv) @ vecs.T


def _check_psd(Q, tol=1e-8):
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if Q.size and np.linalg.eigvalsh(0.5 * (Q + Q.T)).min() < -tol * max(1.0, np.abs(Q).max()):
        raise ValueError("self-overlap Qbar is not positive semidefinite")
    return Q


def standard_normals(seed, n: int, shape: tuple) -> np.ndarray:
    """(n, *shape) standard normals; row i depends only on (seed, i).

    Rows are generated in fixed blocks, each from its own child stream, so
    the values do not depend on how the rows are later partitioned.
    """
    out = np.empty((n,) + tuple(shape))
    root = np.random.SeedSequence(seed)
    n_blocks = -(-n // NOISE_BLOCK)
    for k, child in enumerate(root.spawn(n_blocks)):
        lo, hi = k * NOISE_BLOCK, min(n, (k + 1) * NOISE_BLOCK)
        out[lo:hi] = np.random.default_rng(child).standard_normal((hi - lo,) + tuple(shape))
    return out


@dataclass
class ZEnsemble:
    """times (T+1,), paths (T+1, n, r) or only the terminal slice (1, n, r)."""

    times: np.ndarray
    paths: np.ndarray
    seed: object

    @property
    def terminal(self) -> np.ndarray:
        return self.paths[-1]


def sample_Z(state, schedule: Schedule, n: int, seed=0, activation="tanh",
             keep_paths: bool = True, antithetic: bool = False) -> ZEnsemble:
    """Euler-Maruyama simulation of the r-dimensional weight-space process.

    ``state`` supplies Qbar, v and b.  With ``antithetic`` the initial draws
    and all increments are negated (odd-activation symmetry tests).
    """
    Q = _check_psd(state.Qbar)
    v = np.asarray(state.v, dtype=float)
    r = Q.shape[0]
    act = get_activation(activation)
    co = coeffs(schedule, state.b)
    grid = schedule.sampling_grid
    T = grid.size - 1
    sign = -1.0 if antithetic else 1.0
    noise = sign * standard_normals(seed, n, (T + 1, r))
    root = sym_sqrt(Q)
    z = noise[:, 0] @ root
    paths = [z.copy()] if keep_paths else None
    gam = np.atleast_1d(co.gamma(grid[:-1]) * np.ones(T))
    dl = np.atleast_1d(co.delta(grid[:-1]) * np.ones(T))
    eps = np.broadcast_to(schedule.epsilon(grid[:-1]), (T,))
    pv = np.broadcast_to(schedule.p(grid[:-1]), (T,))
    for k in range(T):
        h = grid[k + 1] - grid[k]
        drift = dl[k] * z + gam[k] * act.f(z + pv[k] * v) @ Q
        z = z + h * drift + np.sqrt(2.0 * eps[k] * h) * (noise[:, k + 1] @ root)
        if keep_paths:
            paths.append(z.copy())
    arr = np.stack(paths) if keep_paths else z[None]
    times = grid if keep_paths else grid[-1:]
    return ZEnsemble(times, arr, seed)


@dataclass(frozen=True)
class YVariance:
    times: np.ndarray
    values: np.ndarray

    def __call__(self, t):
        return np.interp(t, self.times, self.values)

    @property
    def terminal(self) -> float:
        return float(self.values[-1])


def y_variance(schedule: Schedule, b: float, continuous: bool = False,
               refine: int = 200) -> YVariance:
    """Variance of the isotropic component on the sampling grid.

    Discrete: v_{k+1} = (1 + h_k Delta_k)^2 v_k + 2 eps_k h_k with v_0 = 1.
    Continuous: exp(2 int Delta) [1 + 2 int exp(-2 int Delta) eps], by
    trapezoid quadrature on a grid ``refine`` times finer.
    """
    co = coeffs(schedule, b)
    grid = schedule.sampling_grid
    if not continuous:
        T = grid.size - 1
        h = np.diff(grid)
        dl = np.broadcast_to(co.delta(grid[:-1]), (T,))
        eps = np.broadcast_to(schedule.epsilon(grid[:-1]), (T,))
        vals = np.empty(T + 1)
        vals[0] = 1.0
        for k in range(T):
            vals[k + 1] = (1.0 + h[k] * dl[k]) ** 2 * vals[k] + 2.0 * eps[k] * h[k]
        return YVariance(grid.copy(), vals)
    fine = np.linspace(grid[0], grid[-1], refine * (grid.size - 1) + 1)
    dl = np.broadcast_to(co.delta(fine), fine.shape)
    eps = np.broadcast_to(schedule.epsilon(fine), fine.shape)
    D = cumulative_trapezoid(dl, fine, initial=0.0)
    inner = cumulative_trapezoid(np.exp(-2.0 * D) * eps, fine, initial=0.0)
    vals = np.exp(2.0 * D) * (1.0 + 2.0 * inner)
    return YVariance(grid.copy(), np.interp(grid, fine, vals))


@dataclass
class ProjectedLaw:
    """E^T X = loading Z + N(0, gaussian_cov)."""

    loading: np.ndarray
    gaussian_cov: np.ndarray
    z: np.ndarray
    yvar: float

    @property
    def dim(self) -> int:
        return self.loading.shape[0]


def projected_law(Qbar, G, z: np.ndarray, yvar: float) -> ProjectedLaw:
    Q = _check_psd(Qbar)
    G = np.atleast_2d(np.asarray(G, dtype=float))
    Qp = pinv_psd(Q)
    loading = G.T @ Qp
    R = G.shape[1]
    cov = yvar * (np.eye(R) - G.T @ Qp @ G)
    cov = 0.5 * (cov + cov.T)
    return ProjectedLaw(loading, cov, np.asarray(z), float(yvar))


def project(state, z: ZEnsemble, schedule: Schedule, seed=0, index: int = -1):
    """Projected law at sampling step ``index`` and n samples of E^T X."""
    yv = y_variance(schedule, state.b)
    t = z.times[index]
    law = projected_law(state.Qbar, state.G, z.paths[index], float(yv(t)))
    n = law.z.shape[0]
    xi = standard_normals(seed, n, (law.dim,))
    samples = law.z @ law.loading.T + xi @ sym_sqrt(law.gaussian_cov)
    return law, samples


def density_on_grid(law: ProjectedLaw, axes):
    """Gaussian-mixture density (1/n) sum_i N(x; loading z_i, gaussian_cov) on a grid.

    ``axes`` is a list of (lo, hi, n_points), one per dimension (1 or 2).
    """
    from .analyze import DensityGrid, gaussian_mixture_on_grid, kde

    axes = [tuple(a) for a in axes]
    if len(axes) != law.dim or law.dim not in (1, 2):
        raise ValueError("density grids need one axis per reference dimension (1 or 2)")
    means = law.z @ law.loading.T
    C = law.gaussian_cov
    vals = np.linalg.eigvalsh(C)
    if vals.min() <= 1e-12 * max(1.0, vals.max()):
        warnings.warn("projected Gaussian covariance is singular; smoothing with KDE", stacklevel=2)
        return kde(means, axes=axes)
    return DensityGrid.from_values(axes, gaussian_mixture_on_grid(means, C, axes), normalize=True)


__all__ = [
    "TransportCoeffs", "coeffs", "ZEnsemble", "sample_Z", "YVariance", "y_variance",
    "ProjectedLaw", "projected_law", "project", "density_on_grid", "sym_sqrt", "pinv_psd",
    "standard_normals",
]
