"""Densities on grids, Hellinger distances and the model-collapse chain."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import gaussian_kde

from .model import MixtureTarget, SpectralAtom

DEFAULT_BANDWIDTH = 1.5
HELLINGER_AXES = ((-10.0, 10.0, 1000),)
COLLAPSE_PI_AXES = ((-1.5, 1.5, 10), (-2.5, 2.5, 10))
COLLAPSE_PI_SAMPLES = 4000


# ---------------------------------------------------------------------------
# grids

def _axes(axes):
    out = []
    for a in axes:
        lo, hi, n = float(a[0]), float(a[1]), int(a[2])
        if not hi > lo or n < 2:
            raise ValueError(f"bad grid axis {a!r}")
        out.append((lo, hi, n))
    return tuple(out)


def axis_points(axis) -> np.ndarray:
    lo, hi, n = axis
    return np.linspace(lo, hi, n)


def grid_points(axes) -> np.ndarray:
    """(P, dim) grid points in row-major order."""
    mesh = np.meshgrid(*[axis_points(a) for a in _axes(axes)], indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass
class DensityGrid:
    """Density values on a uniform tensor grid (endpoints included)."""

    axes: tuple
    values: np.ndarray
    raw_mass: float = 1.0

    def __post_init__(self):
        self.axes = _axes(self.axes)
        self.values = np.asarray(self.values, dtype=float).reshape([a[2] for a in self.axes])
        if self.dim not in (1, 2):
            raise ValueError("density grids are 1- or 2-dimensional")
        if np.any(self.values < 0):
            raise ValueError("density values must be nonnegative")

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def cell(self) -> float:
        return float(np.prod([(hi - lo) / (n - 1) for lo, hi, n in self.axes]))

    @property
    def mass(self) -> float:
        """Riemann sum of the values."""
        return float(self.values.sum() * self.cell)

    @property
    def off_grid_mass(self) -> float:
        return max(0.0, 1.0 - self.raw_mass)

    @classmethod
    def from_values(cls, axes, values, normalize: bool = True) -> "DensityGrid":
        g = cls(axes, np.clip(values, 0.0, None))
        raw = g.mass
        if normalize and raw > 0:
            g.values = g.values / raw
        g.raw_mass = raw
        return g

    def marginal(self, axis: int) -> "DensityGrid":
        if self.dim == 1:
            return self
        other = 1 - axis
        lo, hi, n = self.axes[other]
        vals = self.values.sum(axis=other) * (hi - lo) / (n - 1)
        return DensityGrid((self.axes[axis],), vals, self.raw_mass)

    def moments(self):
        """Mean vector and covariance matrix of the normalized grid density."""
        pts = grid_points(self.axes)
        w = self.values.ravel() / self.values.sum()
        mean = w @ pts
        c = pts - mean
        return mean, (c * w[:, None]).T @ c

    def to_csv(self, path) -> None:
        with open(Path(path), "w") as fh:
            fh.write(f"{self.dim}\n")
            for lo, hi, n in self.axes:
                fh.write(f"{lo!r} {hi!r} {n}\n")
            for v in self.values.ravel():
                fh.write(f"{float(v)!r}\n")

    @classmethod
    def from_csv(cls, path) -> "DensityGrid":
        lines = Path(path).read_text().split("\n")
        dim = int(lines[0])
        axes = [tuple(float(x) if i < 2 else int(x) for i, x in enumerate(lines[1 + k].split()))
                for k in range(dim)]
        vals = np.array([float(x) for x in lines[1 + dim:] if x.strip()])
        g = cls(axes, vals)
        g.raw_mass = g.mass
        return g


def gaussian_mixture_on_grid(means, cov, axes, chunk: int = 2048) -> np.ndarray:
    """(1/n) sum_i N(x; means_i, cov) at the grid points, shaped like the grid."""
    axes = _axes(axes)
    means = np.atleast_2d(np.asarray(means, dtype=float))
    R = len(axes)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    pts = grid_points(axes)
    Ci = np.linalg.inv(cov)
    norm = 1.0 / np.sqrt((2 * np.pi) ** R * np.linalg.det(cov))
    dens = np.zeros(pts.shape[0])
    for s in range(0, means.shape[0], chunk):
        diff = pts[:, None, :] - means[None, s:s + chunk, :]
        dens += np.exp(-0.5 * np.einsum("pni,ij,pnj->pn", diff, Ci, diff)).sum(axis=1)
    return (dens * norm / means.shape[0]).reshape([a[2] for a in axes])


def silverman_factor(n: int, dim: int) -> float:
    return (n * (dim + 2) / 4.0) ** (-1.0 / (dim + 4))


def kde(samples, bandwidth_scale: float = DEFAULT_BANDWIDTH, axes=HELLINGER_AXES,
        normalize: bool = True) -> DensityGrid:
    """Gaussian KDE with bandwidth matrix (scale * silverman)^2 * sample covariance."""
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, dim = X.shape
    if n < 2:
        raise ValueError("KDE needs at least two samples")
    axes = _axes(axes)
    if len(axes) != dim:
        raise ValueError("grid dimension differs from sample dimension")
    factor = bandwidth_scale * silverman_factor(n, dim)
    try:
        est = gaussian_kde(X.T, bw_method=factor)
        vals = est(grid_points(axes).T).reshape([a[2] for a in axes])
    except np.linalg.LinAlgError:
        # degenerate sample covariance: small ridge keeps the kernels proper
        C = np.atleast_2d(np.cov(X.T)) + 1e-12 * np.eye(dim)
        vals = gaussian_mixture_on_grid(X, factor ** 2 * C, axes)
    return DensityGrid.from_values(axes, vals, normalize)


def hellinger(p: DensityGrid, q: DensityGrid) -> float:
    """Riemann sum of (sqrt p - sqrt q)^2 (no factor 1/2)."""
    if p.axes != q.axes:
        raise ValueError("Hellinger distance needs identical grids")
    return float(((np.sqrt(p.values) - np.sqrt(q.values)) ** 2).sum() * p.cell)


# ---------------------------------------------------------------------------
# model collapse

def cell_centers(axes) -> np.ndarray:
    """(P, dim) centers of the n_cells per axis, row-major."""
    cs = [lo + (np.arange(n) + 0.5) * (hi - lo) / n for lo, hi, n in _axes_cells(axes)]
    mesh = np.meshgrid(*cs, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def _axes_cells(axes):
    out = []
    for a in axes:
        lo, hi, n = float(a[0]), float(a[1]), int(a[2])
        if not hi > lo or n < 1:
            raise ValueError(f"bad cell axis {a!r}")
        out.append((lo, hi, n))
    return out


def discretize_pi(z_samples, axes=COLLAPSE_PI_AXES, bandwidth_scale: float = DEFAULT_BANDWIDTH):
    """KDE of the samples evaluated at cell centers and normalized to sum 1.

    Returns (centers (P, dim), weights (P,)).
    """
    Z = np.asarray(z_samples, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.shape[1] not in (1, 2):
        raise ValueError("pi discretization supports 1 or 2 dimensions")
    cells = _axes_cells(axes)
    if len(cells) != Z.shape[1]:
        raise ValueError("grid dimension differs from sample dimension")
    centers = cell_centers(cells)
    factor = bandwidth_scale * silverman_factor(Z.shape[0], Z.shape[1])
    try:
        dens = gaussian_kde(Z.T, bw_method=factor)(centers.T)
    except np.linalg.LinAlgError:
        C = np.atleast_2d(np.cov(Z.T)) + 1e-12 * np.eye(Z.shape[1])
        Ci = np.linalg.inv(factor ** 2 * C)
        diff = centers[:, None, :] - Z[None]
        dens = np.exp(-0.5 * np.einsum("pni,ij,pnj->pn", diff, Ci, diff)).sum(axis=1)
    total = dens.sum()
    if not total > 0:
        raise ValueError("grid does not cover support")
    return centers, dens / total


def weight_frame(Qbar):
    """Orthonormal coordinates of span(w): rows map Z = w^T X / sqrt(d) to them.

    Returns F (k, r) with k = rank(Qbar), so that c = F z are coordinates of
    the projection of X on the weight span in an orthonormal basis.
    """
    vals, vecs = np.linalg.eigh(0.5 * (Qbar + Qbar.T))
    keep = vals > 1e-10 * max(vals.max(), 0.0)
    vals, vecs = vals[keep][::-1], vecs[:, keep][:, ::-1]
    return (vecs / np.sqrt(vals)).T


def next_generation_target(state, schedule, z_samples, axes=COLLAPSE_PI_AXES,
                           bandwidth_scale: float = DEFAULT_BANDWIDTH,
                           ambient_dim: int = 784, weight_floor: float = 0.0):
    """Target of generation g+1 from the terminal law of generation g.

    Cluster centroids are the pi cells in orthonormal weight-span coordinates;
    every cluster has covariance yvar(t_f) on the orthogonal complement of the
    weight span and zero inside it.  Reference overlaps are expressed in the
    original reference frame through G.  Returns (target, info dict).
    """
    from .transport import y_variance

    yv = y_variance(schedule, state.b).terminal
    Qb, G = state.Qbar, state.G
    R = G.shape[1]
    F = weight_frame(Qb)
    k = F.shape[0]
    d = int(ambient_dim)
    if k == 0:
        atom = SpectralAtom([yv], 1.0, np.zeros((1, 1)), np.zeros((1, R)), np.eye(R))
        target = MixtureTarget([1.0], np.zeros((1, 1)), (atom,), np.zeros((1, R)))
        return target, {"yvar": yv, "centers": np.zeros((1, 0)), "weights": np.ones(1)}
    coords = np.asarray(z_samples, dtype=float) @ F.T
    centers, w = discretize_pi(coords, axes[:k], bandwidth_scale)
    keep = w > weight_floor
    if not keep.any():
        raise ValueError("empty pi support")
    centers, w = centers[keep], w[keep] / w[keep].sum()
    K = centers.shape[0]
    T = centers @ centers.T
    ref = F @ G                         # (k, R): E^T of the orthonormal span basis, transposed
    P = centers @ ref                   # (K, R)
    from .transport import pinv_psd
    inside = G.T @ pinv_psd(Qb) @ G
    inside = 0.5 * (inside + inside.T)
    outside = np.eye(R) - inside
    atoms = (
        SpectralAtom(np.full(K, yv), (d - k) / d, np.zeros((K, K)), np.zeros((K, R)), outside),
        SpectralAtom(np.zeros(K), k / d, T, P, inside),
    )
    target = MixtureTarget(w, T, atoms, P)
    return target, {"yvar": yv, "centers": centers, "weights": w, "frame": F}


def target_projected_cov(target: MixtureTarget) -> np.ndarray:
    """(K, R, R) covariances of E^T x within each cluster."""
    return np.einsum("ak,aij->kij", target.atom_eigenvalues, target.atom_reference_gram)


def target_density(target: MixtureTarget, axes) -> DensityGrid:
    """Projected target density sum_k pi_k N(P_k, E^T Sigma_k E) on a grid."""
    axes = _axes(axes)
    if len(axes) != target.reference_dim:
        raise ValueError("grid dimension differs from the reference dimension")
    covs = target_projected_cov(target)
    vals = np.zeros([a[2] for a in axes])
    for k, pk in enumerate(target.weights):
        if pk > 0:
            vals += pk * gaussian_mixture_on_grid(target.reference_overlaps[k:k + 1], covs[k], axes)
    return DensityGrid.from_values(axes, vals, normalize=True)


def top_direction_variance(law) -> float:
    """Variance of the first reference coordinate under a projected law."""
    z = law.z @ law.loading.T
    return float(np.var(z[:, 0]) + law.gaussian_cov[0, 0])


def target_top_variance(target: MixtureTarget) -> float:
    """Variance of the first reference coordinate under the target."""
    pi = target.weights
    P = target.reference_overlaps[:, 0]
    within = sum(pi @ a.eigenvalues * a.reference_gram[0, 0] for a in target.atoms)
    mean = pi @ P
    return float(within + pi @ (P - mean) ** 2)


@dataclass
class Generation:
    index: int
    target: MixtureTarget
    state: object
    law: object
    top_variance: float
    info: dict


def collapse_chain(target0: MixtureTarget, schedule, hp, r: int, taus, init: dict,
                   n_samples: int = COLLAPSE_PI_SAMPLES, seed: int = 0, step: float = 0.05,
                   pi_axes=COLLAPSE_PI_AXES, bandwidth_scale: float = DEFAULT_BANDWIDTH,
                   ambient_dim: int = 784, progress=None) -> list:
    """Train, sample and re-target for len(taus) generations (theory side)."""
    from .dynamics import init_summary, integrate
    from .transport import projected_law, sample_Z, y_variance

    gens = []
    target = target0
    for g, tau in enumerate(taus, start=1):
        init_kw = dict(init)
        kind = init_kw.pop("kind", "cold")
        if kind == "sampled":
            init_kw.setdefault("seed", seed + g)
        st0 = init_summary(kind, target, r, **init_kw)
        traj = integrate(st0, target, schedule, hp, tau, step=step, output_times=[tau],
                         exact_b=True)
        st = traj.states[-1]
        zs = sample_Z(st, schedule, n_samples, seed=seed + 1000 * g,
                      activation=hp.activation, keep_paths=False)
        yv = y_variance(schedule, st.b).terminal
        law = projected_law(st.Qbar, st.G, zs.terminal, yv)
        nxt, info = next_generation_target(st, schedule, zs.terminal, pi_axes, bandwidth_scale,
                                           ambient_dim)
        gens.append(Generation(g, target, st, law, top_direction_variance(law), info))
        if progress is not None:
            progress(g, len(taus))
        target = nxt
    return gens


__all__ = [
    "DensityGrid", "grid_points", "axis_points", "gaussian_mixture_on_grid", "kde",
    "silverman_factor", "hellinger", "cell_centers", "discretize_pi", "weight_frame",
    "next_generation_target", "top_direction_variance", "target_top_variance",
    "collapse_chain", "target_density", "target_projected_cov", "Generation", "HELLINGER_AXES", "COLLAPSE_PI_AXES",
]
