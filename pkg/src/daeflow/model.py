"""Target mixtures, interpolation schedules and data ingestion.

A target is a finite Gaussian mixture whose cluster covariances share one
eigenbasis.  Coordinates with the same eigenvalue profile across clusters are
grouped into spectral atoms; every asymptotic quantity only needs per-atom
aggregates (weights, eigenvalues, centroid overlaps).  An optional explicit
embedding keeps the ambient coordinates so that the finite-d simulator can
draw real samples.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

BUCKET_RTOL = 1e-10


def _as_matrix(x, shape=None, name="array"):
    a = np.array(x, dtype=float)
    if shape is not None and a.shape != shape:
        raise ValueError(f"{name} has shape {a.shape}, expected {shape}")
    return a


@dataclass(frozen=True)
class SpectralAtom:
    """A group of coordinates sharing one eigenvalue per cluster.

    ``reference_gram`` is the Gram matrix of the reference basis restricted
    to the atom's coordinates.  It only matters for drawing the random
    finite-d initial overlaps; when omitted it defaults to ``weight * I``.
    """

    eigenvalues: np.ndarray
    weight: float
    centroid_block: np.ndarray
    reference_block: np.ndarray
    reference_gram: np.ndarray | None = None

    def __post_init__(self):
        eig = np.atleast_1d(np.array(self.eigenvalues, dtype=float))
        K = eig.shape[0]
        theta = _as_matrix(self.centroid_block, (K, K), "centroid_block")
        ref = np.array(self.reference_block, dtype=float).reshape(K, -1)
        R = ref.shape[1]
        gram = (float(self.weight) * np.eye(R) if self.reference_gram is None
                else _as_matrix(self.reference_gram, (R, R), "reference_gram"))
        object.__setattr__(self, "eigenvalues", eig)
        object.__setattr__(self, "weight", float(self.weight))
        object.__setattr__(self, "centroid_block", theta)
        object.__setattr__(self, "reference_block", ref)
        object.__setattr__(self, "reference_gram", gram)
        if np.any(eig < 0):
            raise ValueError("atom eigenvalues must be nonnegative")
        if not 0.0 < self.weight <= 1.0 + 1e-12:
            raise ValueError(f"atom weight {self.weight} outside (0, 1]")
        if not np.allclose(theta, theta.T, atol=1e-10):
            raise ValueError("centroid_block must be symmetric")
        if K and np.linalg.eigvalsh(theta).min() < -1e-8 * max(1.0, np.abs(theta).max()):
            raise ValueError("centroid_block must be PSD")


@dataclass(frozen=True)
class Embedding:
    """Ambient coordinates of a target (coordinates are the common eigenbasis).

    centroids: d x K, eigenvalues: d x K (per-coordinate variance of each
    cluster), reference: d x R orthonormal columns spanning the observation
    space E.
    """

    centroids: np.ndarray
    eigenvalues: np.ndarray
    reference: np.ndarray

    def __post_init__(self):
        mu = np.array(self.centroids, dtype=float)
        d = mu.shape[0]
        eig = np.array(self.eigenvalues, dtype=float).reshape(d, -1)
        if eig.shape[1] == 1 and mu.shape[1] > 1:
            eig = np.repeat(eig, mu.shape[1], axis=1)
        ref = np.array(self.reference, dtype=float).reshape(d, -1)
        if eig.shape != mu.shape:
            raise ValueError("eigenvalues must be d x K like the centroids")
        if np.any(eig < 0):
            raise ValueError("eigenvalues must be nonnegative")
        if ref.shape[1] and not np.allclose(ref.T @ ref, np.eye(ref.shape[1]), atol=1e-8):
            raise ValueError("reference basis must have orthonormal columns")
        object.__setattr__(self, "centroids", mu)
        object.__setattr__(self, "eigenvalues", eig)
        object.__setattr__(self, "reference", ref)

    @property
    def d(self) -> int:
        return self.centroids.shape[0]


def _bucket_rows(profiles: np.ndarray, rtol: float = BUCKET_RTOL) -> list[np.ndarray]:
    """Group rows of ``profiles`` that agree within a relative tolerance."""
    order = np.lexsort(profiles.T[::-1])
    groups, current = [], [order[0]]
    ref = profiles[order[0]]
    for i in order[1:]:
        row = profiles[i]
        scale = np.maximum(np.abs(row), np.abs(ref))
        if np.all(np.abs(row - ref) <= rtol * scale):
            current.append(i)
        else:
            groups.append(np.array(current))
            current, ref = [i], row
    groups.append(np.array(current))
    return groups


def atom_partition(emb: Embedding, rtol: float = BUCKET_RTOL) -> list[np.ndarray]:
    """Coordinate index sets of the spectral atoms, in atom order."""
    return _bucket_rows(emb.eigenvalues, rtol)


def atoms_from_embedding(emb: Embedding, rtol: float = BUCKET_RTOL) -> list[SpectralAtom]:
    d = emb.d
    atoms = []
    for idx in atom_partition(emb, rtol):
        mu = emb.centroids[idx]
        ref = emb.reference[idx]
        atoms.append(SpectralAtom(
            eigenvalues=emb.eigenvalues[idx].mean(axis=0),
            weight=len(idx) / d,
            centroid_block=mu.T @ mu,
            reference_block=mu.T @ ref,
            reference_gram=ref.T @ ref,
        ))
    return atoms


@dataclass(frozen=True)
class MixtureTarget:
    """Gaussian mixture sum_c pi_c N(mu(c), Sigma(c)) in spectral-atom form."""

    weights: np.ndarray
    centroid_gram: np.ndarray
    atoms: tuple
    reference_overlaps: np.ndarray
    embedding: Embedding | None = None

    def __post_init__(self):
        pi = np.atleast_1d(np.array(self.weights, dtype=float))
        K = pi.shape[0]
        T = _as_matrix(self.centroid_gram, (K, K), "centroid_gram")
        P = np.array(self.reference_overlaps, dtype=float).reshape(K, -1)
        atoms = tuple(self.atoms)
        object.__setattr__(self, "weights", pi)
        object.__setattr__(self, "centroid_gram", T)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "reference_overlaps", P)
        if np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-12:
            raise ValueError("cluster weights must be a probability vector")
        if not atoms:
            raise ValueError("target needs at least one spectral atom")
        for a in atoms:
            if a.eigenvalues.shape[0] != K:
                raise ValueError("atom eigenvalues must have one entry per cluster")
            if a.reference_block.shape[1] != P.shape[1]:
                raise ValueError("atom reference_block width must equal reference_dim")
        wsum = sum(a.weight for a in atoms)
        if abs(wsum - 1.0) > 1e-12:
            raise ValueError(f"atom weights sum to {wsum!r}, not 1")
        scale = max(1.0, np.abs(T).max())
        if not np.allclose(sum(a.centroid_block for a in atoms), T, atol=1e-8 * scale):
            raise ValueError("atom centroid blocks must sum to the centroid Gram matrix")
        if not np.allclose(sum(a.reference_block for a in atoms), P, atol=1e-8 * scale):
            raise ValueError("atom reference blocks must sum to the reference overlaps")
        if np.linalg.eigvalsh(T).min() < -1e-8 * scale:
            raise ValueError("centroid Gram matrix must be PSD")
        emb = self.embedding
        if emb is not None:
            mu, E = emb.centroids, emb.reference
            if mu.shape[1] != K or E.shape[1] != P.shape[1]:
                raise ValueError("embedding dimensions disagree with the abstract target")
            if not (np.allclose(mu.T @ mu, T, atol=1e-8 * scale)
                    and np.allclose(mu.T @ E, P, atol=1e-8 * scale)):
                raise ValueError("embedding disagrees with T or P")
            lam_emb = float(pi @ emb.eigenvalues.mean(axis=0))
            if abs(lam_emb - average_eigenvalue(self)) > 1e-8 * max(1.0, lam_emb):
                raise ValueError("embedding disagrees with the atom spectrum")

    @property
    def n_clusters(self) -> int:
        return self.weights.shape[0]

    @property
    def reference_dim(self) -> int:
        return self.reference_overlaps.shape[1]

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    # stacked per-atom arrays used by the ODE right-hand sides
    @property
    def atom_eigenvalues(self) -> np.ndarray:
        return np.stack([a.eigenvalues for a in self.atoms])

    @property
    def atom_weights(self) -> np.ndarray:
        return np.array([a.weight for a in self.atoms])

    @property
    def atom_theta(self) -> np.ndarray:
        return np.stack([a.centroid_block for a in self.atoms])

    @property
    def atom_reference(self) -> np.ndarray:
        return np.stack([a.reference_block for a in self.atoms])

    @property
    def atom_reference_gram(self) -> np.ndarray:
        return np.stack([a.reference_gram for a in self.atoms])

    @classmethod
    def from_embedding(cls, weights, centroids, eigenvalues, reference,
                       rtol: float = BUCKET_RTOL) -> "MixtureTarget":
        emb = Embedding(centroids, eigenvalues, reference)
        atoms = atoms_from_embedding(emb, rtol)
        return cls(weights=weights,
                   centroid_gram=emb.centroids.T @ emb.centroids,
                   atoms=tuple(atoms),
                   reference_overlaps=emb.centroids.T @ emb.reference,
                   embedding=emb)


def average_eigenvalue(target: MixtureTarget) -> float:
    """Lambda = sum_k pi_k sum_a nu_a rho_a(k)."""
    return float(target.weights @ (target.atom_weights @ target.atom_eigenvalues))


def sample_target(target: MixtureTarget, n: int, seed=None) -> np.ndarray:
    if target.embedding is None:
        raise ValueError("abstract target cannot be sampled")
    rng = np.random.default_rng(seed)
    return _draw(target.embedding, target.weights, n, rng)


def _draw(emb: Embedding, pi: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    ks = rng.choice(pi.shape[0], size=n, p=pi)
    z = rng.standard_normal((n, emb.d))
    return emb.centroids[:, ks].T + np.sqrt(emb.eigenvalues[:, ks].T) * z


def covariance_target_from_data(rows, normalizer: float = 1.0, reference_dim: int = 2,
                                rtol: float = BUCKET_RTOL) -> MixtureTarget:
    """Single centered cluster with the empirical covariance of ``rows``.

    The embedding lives in the eigenbasis of the covariance, ordered by
    decreasing eigenvalue, so the reference space (top ``reference_dim``
    principal directions) is spanned by the first coordinate vectors.
    """
    X = np.asarray(rows, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need at least two data rows")
    X = (X - X.mean(axis=0)) / normalizer
    cov = X.T @ X / (X.shape[0] - 1)
    eig = np.clip(np.linalg.eigvalsh(cov)[::-1], 0.0, None)
    # round-off eigenvalues of a rank-deficient covariance are exact zeros
    eig[eig < 1e-12 * max(eig[0], 1e-300)] = 0.0
    return spectrum_target(eig, reference_dim, rtol)


def spectrum_target(eigenvalues, reference_dim: int = 2,
                    rtol: float = BUCKET_RTOL) -> MixtureTarget:
    """Centered single-cluster target with the given covariance spectrum."""
    eig = np.asarray(eigenvalues, dtype=float)
    d = eig.shape[0]
    E = np.eye(d)[:, :reference_dim]
    return MixtureTarget.from_embedding([1.0], np.zeros((d, 1)), eig[:, None], E, rtol)


def power_law_target(d: int = 784, top: float = 3.0, exponent: float = 1.0,
                     reference_dim: int = 2) -> MixtureTarget:
    """Heavy-tailed spectrum rho_i = top * i**(-exponent), a stand-in for image data."""
    eig = top * np.arange(1, d + 1, dtype=float) ** (-exponent)
    return spectrum_target(eig, reference_dim)


def embedded_mixture(d: int, centroids, weights=None, variance=1.0,
                     reference=None) -> MixtureTarget:
    """Mixture with centroids and reference vectors given in the leading coordinates.

    ``centroids`` is a list of K short vectors; each is zero-padded to length
    d.  ``variance`` is a scalar (all clusters isotropic) or a list of K
    per-cluster isotropic variances.  ``reference`` defaults to the
    normalized first centroid.
    """
    K = len(centroids)
    mu = np.zeros((d, K))
    for k, c in enumerate(centroids):
        c = np.asarray(c, dtype=float)
        mu[: c.shape[0], k] = c
    pi = np.full(K, 1.0 / K) if weights is None else np.asarray(weights, dtype=float)
    var = np.broadcast_to(np.asarray(variance, dtype=float), (K,))
    eig = np.tile(var, (d, 1))
    if reference is None:
        nrm = np.linalg.norm(mu[:, 0])
        E = (mu[:, :1] / nrm) if nrm > 0 else np.eye(d)[:, :1]
    else:
        E = np.zeros((d, len(reference)))
        for j, e in enumerate(reference):
            e = np.asarray(e, dtype=float)
            E[: e.shape[0], j] = e
    return MixtureTarget.from_embedding(pi, mu, eig, E)


# ---------------------------------------------------------------------------
# schedules

Fn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Schedule:
    """Interpolant x_t = alpha_t x0 + beta_t x1 with sampler and training settings."""

    alpha: Fn
    beta: Fn
    dalpha: Fn
    dbeta: Fn
    epsilon: Fn
    p: Fn
    training_grid: tuple
    sampling_grid: np.ndarray
    name: str = "custom"
    spec: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "training_grid", tuple(float(t) for t in self.training_grid))
        object.__setattr__(self, "sampling_grid", np.asarray(self.sampling_grid, dtype=float))

    @property
    def t_final(self) -> float:
        return float(self.sampling_grid[-1])

    def grid_arrays(self):
        """alpha, beta, p on the training grid."""
        t = np.array(self.training_grid)
        return self.alpha(t), self.beta(t), self.p(t)

    def averages(self):
        """E_t[beta], E_t[beta^2], E_t[alpha^2] over the training grid."""
        a, b, _ = self.grid_arrays()
        return float(b.mean()), float((b ** 2).mean()), float((a ** 2).mean())

    def replace(self, **kw) -> "Schedule":
        from dataclasses import replace
        return replace(self, **kw)


def uniform_grid(n_steps: int = 100, t_final: float = 0.95) -> np.ndarray:
    """Times t_k = k/N for all k with t_k <= t_final."""
    k = np.arange(n_steps + 1)
    t = k / n_steps
    return t[t <= t_final + 1e-12]


def _const(c: float) -> Fn:
    return lambda t: np.full(np.shape(t), float(c)) if np.ndim(t) else float(c)


def _p_fn(p) -> Fn:
    if p is None or p == "zero" or p == 0:
        return _const(0.0)
    if p == "cos":
        return lambda t: np.cos(np.pi * np.asarray(t, dtype=float))
    if callable(p):
        return p
    return _const(float(p))


def _eps_fn(eps) -> Fn:
    return eps if callable(eps) else _const(float(eps))


def linear_schedule(training_grid=(0.5,), epsilon=0.0, p="zero", n_steps=100,
                    t_final=0.95) -> Schedule:
    spec = dict(kind="linear", training_grid=list(training_grid), epsilon=epsilon,
                p=p, n_steps=n_steps, t_final=t_final)
    return Schedule(
        alpha=lambda t: 1.0 - np.asarray(t, dtype=float),
        beta=lambda t: np.asarray(t, dtype=float) * 1.0,
        dalpha=lambda t: -np.ones_like(np.asarray(t, dtype=float)),
        dbeta=lambda t: np.ones_like(np.asarray(t, dtype=float)),
        epsilon=_eps_fn(epsilon), p=_p_fn(p),
        training_grid=training_grid, sampling_grid=uniform_grid(n_steps, t_final),
        name="linear", spec=spec if not callable(epsilon) and not callable(p) else {})


def cosine_schedule(training_grid=(0.5,), epsilon=0.0, p="zero", n_steps=100,
                    t_final=0.95) -> Schedule:
    """alpha_t = cos(pi t^4 / 2), beta_t = sin(pi t^4 / 2)."""
    spec = dict(kind="cosine", training_grid=list(training_grid), epsilon=epsilon,
                p=p, n_steps=n_steps, t_final=t_final)

    def arg(t):
        return 0.5 * np.pi * np.asarray(t, dtype=float) ** 4

    def darg(t):
        return 2.0 * np.pi * np.asarray(t, dtype=float) ** 3

    return Schedule(
        alpha=lambda t: np.cos(arg(t)), beta=lambda t: np.sin(arg(t)),
        dalpha=lambda t: -np.sin(arg(t)) * darg(t), dbeta=lambda t: np.cos(arg(t)) * darg(t),
        epsilon=_eps_fn(epsilon), p=_p_fn(p),
        training_grid=training_grid, sampling_grid=uniform_grid(n_steps, t_final),
        name="cosine", spec=spec if not callable(epsilon) and not callable(p) else {})


def tabulated_schedule(times, alpha_values, beta_values, training_grid=(0.5,),
                       epsilon=0.0, p="zero", n_steps=100, t_final=0.95) -> Schedule:
    """Piecewise-linear interpolation of tabulated alpha, beta.

    Derivatives are centered finite differences on the table (one-sided at
    the ends), interpolated linearly between table points.
    """
    ts = np.asarray(times, dtype=float)
    av = np.asarray(alpha_values, dtype=float)
    bv = np.asarray(beta_values, dtype=float)
    da = np.gradient(av, ts)
    db = np.gradient(bv, ts)
    spec = dict(kind="tabulated", times=ts.tolist(), alpha=av.tolist(), beta=bv.tolist(),
                training_grid=list(training_grid), epsilon=epsilon, p=p,
                n_steps=n_steps, t_final=t_final)
    return Schedule(
        alpha=lambda t: np.interp(t, ts, av), beta=lambda t: np.interp(t, ts, bv),
        dalpha=lambda t: np.interp(t, ts, da), dbeta=lambda t: np.interp(t, ts, db),
        epsilon=_eps_fn(epsilon), p=_p_fn(p),
        training_grid=training_grid, sampling_grid=uniform_grid(n_steps, t_final),
        name="tabulated", spec=spec if not callable(epsilon) and not callable(p) else {})


def custom_schedule(alpha, beta, dalpha, dbeta, training_grid=(0.5,), epsilon=0.0,
                    p="zero", n_steps=100, t_final=0.95, sampling_grid=None) -> Schedule:
    grid = uniform_grid(n_steps, t_final) if sampling_grid is None else sampling_grid
    return Schedule(alpha=alpha, beta=beta, dalpha=dalpha, dbeta=dbeta,
                    epsilon=_eps_fn(epsilon), p=_p_fn(p), training_grid=training_grid,
                    sampling_grid=grid)


def schedule_from_dict(spec: dict) -> Schedule:
    spec = dict(spec)
    kind = spec.pop("kind", "linear")
    if kind == "linear":
        return linear_schedule(**spec)
    if kind == "cosine":
        return cosine_schedule(**spec)
    if kind == "tabulated":
        return tabulated_schedule(spec.pop("times"), spec.pop("alpha"), spec.pop("beta"), **spec)
    raise ValueError(f"unknown schedule kind {kind!r}")


@dataclass
class ValidationReport:
    problems: list

    @property
    def ok(self) -> bool:
        return not self.problems

    def __str__(self):
        return "ok" if self.ok else ", ".join(self.problems)


def validate_schedule(s: Schedule, atol: float = 1e-9) -> ValidationReport:
    probs = []
    for name, fn, t, want in (("α(0)", s.alpha, 0.0, 1.0), ("β(0)", s.beta, 0.0, 0.0),
                              ("α(1)", s.alpha, 1.0, 0.0), ("β(1)", s.beta, 1.0, 1.0)):
        val = float(fn(np.array([t]))[0])
        if abs(val - want) > atol:
            probs.append(f"{name}≠{want:g}")
    grid = s.sampling_grid
    if grid.size < 2 or grid[0] != 0.0:
        probs.append("sampling grid must start at t=0 and have at least two points")
    bad = np.nonzero(np.diff(grid) <= 0)[0]
    if bad.size:
        probs.append(f"sampling grid not strictly increasing at t={grid[bad[0] + 1]:g}")
    if grid.size and grid[-1] >= 1.0:
        probs.append(f"t_f={grid[-1]:g} must be < 1")
    if grid.size:
        a, b = s.alpha(grid), s.beta(grid)
        zero = np.nonzero(a ** 2 + b ** 2 <= 0)[0]
        if zero.size:
            probs.append(f"α²+β²=0 at t={grid[zero[0]]:g}")
        eps = np.broadcast_to(s.epsilon(grid), grid.shape)
        neg = np.nonzero(eps < 0)[0]
        if neg.size:
            probs.append(f"ε<0 at t={grid[neg[0]]:g}")
    tg = np.array(s.training_grid)
    if tg.size == 0:
        probs.append("training grid is empty")
    elif np.any((tg < 0) | (tg > 1)):
        probs.append(f"training time {tg[(tg < 0) | (tg > 1)][0]:g} outside [0,1]")
    return ValidationReport(probs)


# ---------------------------------------------------------------------------
# file formats

def write_matrix(path, a) -> None:
    """Dense float64 matrix: a text header line "rows cols" then raw little-endian data."""
    a = np.atleast_2d(np.asarray(a, dtype="<f8"))
    with open(path, "wb") as fh:
        fh.write(f"{a.shape[0]} {a.shape[1]}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(a).tobytes())


def read_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        rows, cols = (int(x) for x in fh.readline().split())
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != rows * cols:
        raise ValueError(f"{path}: header says {rows}x{cols}, found {data.size} values")
    return data.reshape(rows, cols).astype(float)


def target_to_dict(target: MixtureTarget) -> dict:
    return {
        "kind": "mixture",
        "weights": target.weights.tolist(),
        "centroid_gram": target.centroid_gram.tolist(),
        "reference_overlaps": target.reference_overlaps.tolist(),
        "atoms": [
            {"eigenvalues": a.eigenvalues.tolist(), "weight": a.weight,
             "centroid_block": a.centroid_block.tolist(),
             "reference_block": a.reference_block.tolist(),
             "reference_gram": a.reference_gram.tolist()}
            for a in target.atoms
        ],
    }


def target_from_dict(spec: dict, base_dir: str | Path = ".") -> MixtureTarget:
    """Build a target from a declarative key-value tree.

    kinds: ``mixture`` (abstract atoms), ``embedded`` (centroids in leading
    coordinates of R^d), ``covariance_file`` (dense matrix of data rows),
    ``power_law`` (synthetic heavy spectrum).
    """
    spec = dict(spec)
    kind = spec.pop("kind", "mixture")
    if kind == "mixture":
        atoms = tuple(SpectralAtom(**a) for a in spec["atoms"])
        return MixtureTarget(spec["weights"], spec["centroid_gram"], atoms,
                             spec["reference_overlaps"])
    if kind == "embedded":
        return embedded_mixture(int(spec["d"]), spec["centroids"], spec.get("weights"),
                                spec.get("variance", 1.0), spec.get("reference"))
    if kind == "covariance_file":
        path = Path(base_dir) / spec["path"]
        return covariance_target_from_data(read_matrix(path), float(spec.get("normalizer", 1.0)),
                                           int(spec.get("reference_dim", 2)))
    if kind == "power_law":
        return power_law_target(int(spec.get("d", 784)), float(spec.get("top", 3.0)),
                                float(spec.get("exponent", 1.0)),
                                int(spec.get("reference_dim", 2)))
    raise ValueError(f"unknown target kind {kind!r}")


__all__ = [
    "SpectralAtom", "Embedding", "MixtureTarget", "Schedule", "ValidationReport",
    "average_eigenvalue", "sample_target", "covariance_target_from_data", "spectrum_target",
    "power_law_target", "embedded_mixture", "linear_schedule", "cosine_schedule",
    "tabulated_schedule", "custom_schedule", "schedule_from_dict", "validate_schedule",
    "uniform_grid", "write_matrix", "read_matrix", "target_to_dict", "target_from_dict",
    "atoms_from_embedding", "atom_partition",
]
