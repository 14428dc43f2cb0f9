"""Gaussian expectations of activation products in one to four dimensions.

Every integral appearing in the summary-statistic dynamics has the form
E[prod_j f_j(xi_j)] with xi ~ N(mean, cov) and f_j one of sigma(. + shift),
sigma'(. + shift) or the identity.  Polynomial integrands (identity) use
tensorized Gauss-Hermite quadrature on the eigen-factor of the covariance,
which is exact.  Everything else uses nested conditional quadrature:
coordinates are integrated one at a time conditionally on the previous ones,
and each conditional 1-d integral is split into Gauss-Legendre panels at the
kinks (ReLU) or at the points where a smooth activation bends fastest
(tanh).  Gauss-Hermite converges slowly for tanh' once the scale exceeds
one, while the panel rule stays near machine precision.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, NamedTuple, Sequence

import numpy as np

DEFAULT_ORDER = {0: 1, 1: 40, 2: 40, 3: 20, 4: 12}
# nodes per dimension for the panel rule (split across the panels of a level)
DEFAULT_NODES = {0: 1, 1: 96, 2: 64, 3: 32, 4: 24}
NEAR_DET = 4.0
PREIMAGE_OFFSETS = (-5.0, -2.0, 0.0, 2.0, 5.0)
# Gauss-Legendre nodes per panel at least this many (10 reach 1e-8 for tanh)
MIN_PANEL_ORDER = {1: 10, 2: 10, 3: 10, 4: 6}
BASE_PANELS_SD = (-3.0, 0.0, 3.0)
ZERO_MODE = 1e-12
TRUNCATE_SD = 8.5
_MAX_POINTS = 4_000_000


# ---------------------------------------------------------------------------
# activations and factors

@dataclass(frozen=True)
class Activation:
    name: str
    f: Callable
    df: Callable
    kinks: tuple = ()
    odd: bool = False
    # points where a smooth activation changes fastest; used only to split
    # quadrature panels
    breaks: tuple = ()

    def __call__(self, x):
        return self.f(x)


def _tanh_prime(x):
    return 1.0 - np.tanh(x) ** 2


TANH = Activation("tanh", np.tanh, _tanh_prime, odd=True, breaks=(-1.5, 0.0, 1.5))
RELU = Activation("relu", lambda x: np.maximum(x, 0.0), lambda x: (x > 0).astype(float), kinks=(0.0,))
IDENTITY = Activation("identity", lambda x: x * 1.0, lambda x: np.ones_like(x), odd=True)

ACTIVATIONS = {"tanh": TANH, "relu": RELU, "identity": IDENTITY, "linear": IDENTITY}


def get_activation(act) -> Activation:
    if isinstance(act, Activation):
        return act
    try:
        return ACTIVATIONS[act]
    except KeyError:
        raise ValueError(f"unknown activation {act!r}") from None


def custom_activation(f, df, name="custom", kinks=(), odd=False, breaks=()) -> Activation:
    """Wrap a user scalar function and its derivative (both vectorized)."""
    return Activation(name, f, df, tuple(kinks), odd, tuple(breaks))


class Factor(NamedTuple):
    kind: str  # "act", "dact" or "lin"
    shift: float = 0.0


def ACT(shift: float = 0.0) -> Factor:
    return Factor("act", float(shift))


def ACT_PRIME(shift: float = 0.0) -> Factor:
    return Factor("dact", float(shift))


LINEAR = Factor("lin", 0.0)


@dataclass(frozen=True)
class FactorList:
    factors: tuple
    activation: Activation = TANH

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        object.__setattr__(self, "activation", get_activation(self.activation))
        for f in self.factors:
            if f.kind not in ("act", "dact", "lin"):
                raise ValueError(f"unknown factor kind {f.kind!r}")

    def __len__(self):
        return len(self.factors)


@dataclass(frozen=True)
class GaussianSpec:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        m = np.atleast_1d(np.array(self.mean, dtype=float))
        c = np.atleast_2d(np.array(self.cov, dtype=float))
        n = m.shape[0]
        if c.shape != (n, n):
            raise ValueError(f"covariance shape {c.shape} does not match mean length {n}")
        if not 1 <= n <= 4:
            raise ValueError("Gaussian dimension must be between 1 and 4")
        if np.abs(c - c.T).max() > 1e-12 * max(1.0, np.abs(c).max()):
            raise ValueError("covariance must be symmetric")
        c = 0.5 * (c + c.T)
        if np.linalg.eigvalsh(c).min() < -1e-10 * max(1.0, np.abs(c).max()):
            raise ValueError("covariance must be positive semidefinite")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", c)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class Quadrature:
    """Quadrature settings.  ``order`` is the number of nodes per dimension
    (split across the panels of the nested rule); ``panel_order`` fixes the
    Gauss-Legendre order per panel instead.  ``None`` selects the
    dimension-dependent default."""

    order: int | None = None
    panel_order: int | None = None


@dataclass(frozen=True)
class MonteCarlo:
    n: int = 1_000_000
    seed: int = 0


def _apply(values: np.ndarray, factors: Sequence[Factor], act: Activation) -> np.ndarray:
    out = None
    for j, fac in enumerate(factors):
        y = values[..., j]
        if fac.kind == "act":
            term = act.f(y + fac.shift)
        elif fac.kind == "dact":
            term = act.df(y + fac.shift)
        else:
            term = y
        out = term if out is None else out * term
    return np.ones(values.shape[:-1]) if out is None else out


# ---------------------------------------------------------------------------
# quadrature rules

@lru_cache(maxsize=64)
def _gh_rule(k: int, order: int):
    """Tensor Gauss-Hermite rule for N(0, I_k): nodes (P, k), weights (P,)."""
    if k == 0:
        return np.zeros((1, 0)), np.ones(1)
    x, w = np.polynomial.hermite_e.hermegauss(order)
    w = w / w.sum()
    grids = np.meshgrid(*([x] * k), indexing="ij")
    wgrids = np.meshgrid(*([w] * k), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


@lru_cache(maxsize=16)
def _gl_rule(order: int):
    x, w = np.polynomial.legendre.leggauss(order)
    return x, w


def _batch_inputs(means, covs):
    means = np.asarray(means, dtype=float)
    if means.ndim == 1:
        means = means[None]
    B, n = means.shape
    covs = np.asarray(covs, dtype=float)
    if covs.ndim == 2:
        covs = np.broadcast_to(covs, (B, n, n))
    if covs.shape != (B, n, n):
        raise ValueError(f"covariance batch shape {covs.shape} does not match means {means.shape}")
    return means, 0.5 * (covs + np.swapaxes(covs, 1, 2))


def expect_batch(means, covs, factors: Sequence[Factor], activation=TANH,
                 order: int | None = None, panel_order: int | None = None) -> np.ndarray:
    """Quadrature expectation for a batch of Gaussians sharing one factor list.

    means: (B, n); covs: (B, n, n) or a shared (n, n).  Returns (B,).
    """
    act = get_activation(activation)
    means, covs = _batch_inputs(means, covs)
    if means.shape[1] != len(factors):
        raise ValueError("number of factors must equal the Gaussian dimension")
    factors = tuple(factors)
    # canonical coordinate order, so permuted inputs give identical results
    order_key = sorted(range(len(factors)), key=lambda j: (
        factors[j].kind, factors[j].shift, -covs[0, j, j], means[0, j]))
    factors = tuple(factors[j] for j in order_key)
    means = means[:, order_key]
    covs = covs[:, order_key][:, :, order_key]
    kinks = [tuple(kp - f.shift for kp in act.kinks + act.breaks) if f.kind != "lin" else ()
             for f in factors]
    if order is None and act is IDENTITY:
        # polynomial integrand of degree <= 2n: Gauss-Hermite with n+1 nodes is exact
        order = len(factors) + 1
    return expect_function(means, covs, lambda pts, rows: _apply(pts, factors, act)[..., None],
                           kinks, order, panel_order)[:, 0]


def expect_function(means, covs, fn, kinks=None, order: int | None = None,
                    panel_order: int | None = None) -> np.ndarray:
    """E[fn(xi)] for a batch of Gaussians and a vector-valued integrand.

    ``fn(points, rows)`` maps points (b, P, n) of the batch rows ``rows``
    (a slice) to values (b, P, F).  ``kinks`` lists, per
    coordinate, the positions where the integrand is not smooth; when any
    are present the nested panel rule is used.  Returns (B, F).
    """
    means, covs = _batch_inputs(means, covs)
    B, n = means.shape
    kinks = [()] * n if kinks is None else [tuple(k) for k in kinks]
    if any(kinks):
        return _nested_expect(means, covs, fn, kinks, order, panel_order)
    return _gh_expect(means, covs, fn, order)


def _gh_expect(means, covs, fn, order):
    B, n = means.shape
    vals, vecs = np.linalg.eigh(covs)
    vals = np.clip(vals, 0.0, None)
    keep = vals > np.maximum(ZERO_MODE, 1e-14 * vals.max(axis=1, keepdims=True))
    k = int(keep.sum(axis=1).max())
    nodes, weights = _gh_rule(k, order or DEFAULT_ORDER.get(k, 8))
    if k == 0:
        return fn(means[:, None, :], slice(0, B))[:, 0, :]
    # top-k modes; modes below threshold are zeroed so they pin to the mean
    lam = np.where(keep, vals, 0.0)[:, -k:]
    L = vecs[:, :, -k:] * np.sqrt(lam)[:, None, :]
    P = nodes.shape[0]
    chunk = max(1, _MAX_POINTS // max(1, B * n))
    out = None
    for s in range(0, P, chunk):
        pts = means[:, None, :] + np.einsum("pk,bnk->bpn", nodes[s:s + chunk], L)
        part = np.einsum("bpf,p->bf", fn(pts, slice(0, B)), weights[s:s + chunk])
        out = part if out is None else out + part
    return out


def _merge_identical(means, covs, tol=1e-12):
    """Group coordinates that are almost surely equal across the whole batch."""
    n = means.shape[1]
    rep, groups = [], []
    for j in range(n):
        for g, i in enumerate(rep):
            scale = max(1.0, np.abs(covs[:, i, i]).max())
            same = (np.abs(means[:, i] - means[:, j]).max() <= tol * max(1.0, np.abs(means[:, i]).max())
                    and np.abs(covs[:, i, i] - covs[:, i, j]).max() <= tol * scale
                    and np.abs(covs[:, j, j] - covs[:, i, j]).max() <= tol * scale)
            if same:
                groups[g].append(j)
                break
        else:
            rep.append(j)
            groups.append([j])
    return rep, groups


def _level_breaks(m, C, pts, j, level_kinks, cm, sd_j):
    """Breakpoints (B, N, nb) along level j.

    Besides the fixed kinks of coordinate j and a few baseline points at
    fixed conditional z-scores, a kink of a later coordinate i
    that is nearly determined by coordinates 0..j becomes a near-kink along
    coordinate j; its preimage is added so the outer panels stay smooth.
    """
    B, N = pts.shape[0], pts.shape[1]
    cols = [np.broadcast_to(np.float64(kp), (B, N)) for kp in level_kinks[j]]
    # baseline panels resolve the Gaussian weight itself
    cols += [cm + z * sd_j[:, None] for z in BASE_PANELS_SD]
    k = m.shape[1]
    for i in range(j + 1, k):
        if not level_kinks[i]:
            continue
        S = C[:, :j + 1, :j + 1]
        c = C[:, :j + 1, i]
        coef = np.einsum("bij,bj->bi", np.linalg.pinv(S, rcond=1e-12, hermitian=True), c)
        resid = np.sqrt(np.clip(C[:, i, i] - np.einsum("bj,bj->b", coef, c), 0.0, None))
        slope = coef[:, j]
        active = (np.abs(slope) * sd_j > NEAR_DET * resid) & (np.abs(slope) > 0)
        if not active.any():
            continue
        base = m[:, i:i + 1] - slope[:, None] * m[:, j:j + 1]
        if j:
            base = base + np.einsum("bnj,bj->bn", pts - m[:, None, :j], coef[:, :j])
        safe = np.where(active, slope, 1.0)[:, None]
        # the smoothed step has width resid/|slope| along coordinate j
        width = (resid / np.where(active, np.abs(slope), 1.0))[:, None]
        for kp in level_kinks[i]:
            centre = (kp - base) / safe
            for off in PREIMAGE_OFFSETS:
                cols.append(np.where(active[:, None], centre + off * width, np.nan))
    if not cols:
        return np.zeros((B, N, 0))
    return np.stack(cols, axis=2)


def _expand_level(m, C, pts, j, level_kinks, nodes, panel_order):
    """Nodes (B, N, P) and weights (B, N, P) of level j given prefixes pts (B, N, j)."""
    B, N = pts.shape[0], pts.shape[1]
    if j == 0:
        cm = np.broadcast_to(m[:, :1], (B, N))
        cv = C[:, 0, 0].copy()
    else:
        S = C[:, :j, :j]
        c = C[:, :j, j]
        coef = np.einsum("bij,bj->bi", np.linalg.pinv(S, rcond=1e-12, hermitian=True), c)
        cm = m[:, j:j + 1] + np.einsum("bnj,bj->bn", pts - m[:, None, :j], coef)
        cv = C[:, j, j] - np.einsum("bj,bj->b", coef, c)
    sd = np.sqrt(np.clip(cv, 0.0, None))
    random = sd > 1e-7 * np.sqrt(max(1.0, np.abs(C[:, j, j]).max()))
    if level_kinks[j] or any(level_kinks[j + 1:]):
        breaks = _level_breaks(m, C, pts, j, level_kinks, cm, sd)
    else:
        breaks = np.zeros((B, N, 0))
    if breaks.shape[2]:
        lo = cm - TRUNCATE_SD * sd[:, None]
        hi = cm + TRUNCATE_SD * sd[:, None]
        inner = np.sort(np.clip(np.where(np.isnan(breaks), hi[..., None], breaks),
                                lo[..., None], hi[..., None]), axis=2)
        edges = np.concatenate([lo[..., None], inner, hi[..., None]], axis=2)
        n_pan = edges.shape[2] - 1
        gl_x, gl_w = _gl_rule(panel_order or max(MIN_PANEL_ORDER.get(m.shape[1], 6), -(-nodes // n_pan)))
        a, b = edges[..., :-1, None], edges[..., 1:, None]
        half = 0.5 * (b - a)
        x = (0.5 * (a + b) + half * gl_x).reshape(B, N, -1)
        safe_sd = np.where(random, sd, 1.0)[:, None, None]
        z = (x - cm[..., None]) / safe_sd
        w = (half * gl_w).reshape(B, N, -1) * np.exp(-0.5 * z * z) / (np.sqrt(2 * np.pi) * safe_sd)
    else:
        gh_x, gh_w = _gh_rule(1, nodes)
        x = cm[..., None] + sd[:, None, None] * gh_x[:, 0]
        w = np.broadcast_to(gh_w, x.shape)
    if not random.all():
        # deterministic coordinate: a single node at the conditional mean
        det = ~random
        x = np.array(x, copy=True)
        w = np.array(w, copy=True)
        x[det] = cm[det][..., None]
        w[det] = 0.0
        w[det, :, 0] = 1.0
    return x, w


def _nested_rule(m, C, level_kinks, nodes, panel_order, pts=None, wts=None, budget=None):
    """Yield blocks of nodes (B, P, k) and weights (B, P) of the nested rule.

    ``nodes`` is the target number of nodes per level; ``panel_order``, when
    given, fixes the Gauss-Legendre order per panel instead.  Prefixes are
    split into chunks whenever the next level would exceed ``budget`` points.
    """
    B, k = m.shape
    budget = budget or max(1, _MAX_POINTS // max(1, k))
    if pts is None:
        pts, wts = np.zeros((B, 1, 0)), np.ones((B, 1))
    j = pts.shape[2]
    if j == k:
        yield pts, wts
        return
    per = panel_order * 4 if panel_order else nodes
    step = max(1, budget // max(1, B * per * 2))
    for s in range(0, pts.shape[1], step):
        p, w0 = pts[:, s:s + step], wts[:, s:s + step]
        x, w = _expand_level(m, C, p, j, level_kinks, nodes, panel_order)
        N, P = p.shape[1], x.shape[2]
        new_p = np.concatenate([np.repeat(p, P, axis=1), x.reshape(B, N * P, 1)], axis=2)
        new_w = (w0[:, :, None] * w).reshape(B, N * P)
        keep = (new_w > 1e-300).any(axis=0)
        if not keep.all():
            new_p, new_w = new_p[:, keep], new_w[:, keep]
        yield from _nested_rule(m, C, level_kinks, nodes, panel_order, new_p, new_w, budget)


def _nested_expect(means, covs, fn, kinks, order, panel_order):
    B, n = means.shape
    rep, groups = _merge_identical(means, covs)
    k = len(rep)
    nodes = order or DEFAULT_NODES.get(k, 16)
    level_kinks = [sorted({kp for i in members for kp in kinks[i]}) for members in groups]
    col = [next(g for g, mem in enumerate(groups) if i in mem) for i in range(n)]
    per = panel_order * 4 if panel_order else nodes
    bchunk = max(1, _MAX_POINTS // max(1, per * n))
    outs = []
    for s in range(0, B, bchunk):
        m = means[s:s + bchunk][:, rep]
        C = covs[s:s + bchunk][:, rep][:, :, rep]
        rows = slice(s, s + m.shape[0])
        acc = None
        for pts, wts in _nested_rule(m, C, level_kinks, nodes, panel_order):
            part = np.einsum("bpf,bp->bf", fn(pts[..., col], rows), wts)
            acc = part if acc is None else acc + part
        outs.append(acc)
    return np.concatenate(outs, axis=0)


def monte_carlo(spec: GaussianSpec, factors: FactorList, n: int, seed=0,
                chunk: int = 1 << 20):
    """Plain Monte Carlo estimate and its standard error."""
    rng = np.random.default_rng(seed)
    vals, vecs = np.linalg.eigh(spec.cov)
    L = vecs * np.sqrt(np.clip(vals, 0.0, None))
    s1 = s2 = 0.0
    done = 0
    while done < n:
        m = min(chunk, n - done)
        pts = spec.mean + rng.standard_normal((m, spec.dim)) @ L.T
        f = _apply(pts, factors.factors, factors.activation)
        s1 += f.sum()
        s2 += (f * f).sum()
        done += m
    mean = s1 / n
    var = max(s2 / n - mean * mean, 0.0)
    return mean, np.sqrt(var / n)


def expect(spec: GaussianSpec, factors, method=Quadrature()) -> float:
    """E[prod_j factor_j(xi_j)] for xi ~ N(spec.mean, spec.cov)."""
    if not isinstance(factors, FactorList):
        factors = FactorList(factors)
    if len(factors) != spec.dim:
        raise ValueError("number of factors must equal the Gaussian dimension")
    if isinstance(method, MonteCarlo):
        return float(monte_carlo(spec, factors, method.n, method.seed)[0])
    if method.order is not None and method.order < 2:
        raise ValueError("quadrature order must be at least 2")
    return float(expect_batch(spec.mean, spec.cov, factors.factors, factors.activation,
                              method.order, method.panel_order)[0])


# ---------------------------------------------------------------------------
# covariance blocks

class Var(NamedTuple):
    """A local field: ``omega`` at time t (alpha_t lambda0 + beta_t lambda1),
    the data field ``lambda1`` or the noise field ``lambda0``, for weight column ``index``."""
    kind: str
    index: int
    t: float = 0.0


def joint_gaussian(variables: Sequence[Var], Qbar, Qc, Mc, alpha, beta):
    """Mean and covariance of a list of local fields, batched over clusters.

    Qbar: (r, r); Qc: (K, r, r) or (r, r); Mc: (K, r) or (r,).  ``alpha``,
    ``beta`` are callables of t.  Returns means (K, n), covs (K, n, n).
    lambda0 ~ N(0, Qbar), lambda1 ~ N(Mc, Qc), independent.
    """
    Qbar = np.asarray(Qbar, dtype=float)
    Qc = np.asarray(Qc, dtype=float)
    Mc = np.asarray(Mc, dtype=float)
    if Qc.ndim == 2:
        Qc = Qc[None]
    if Mc.ndim == 1:
        Mc = Mc[None]
    K = Qc.shape[0]
    n = len(variables)
    coef = []
    for v in variables:
        if v.kind == "omega":
            coef.append((float(alpha(v.t)), float(beta(v.t))))
        elif v.kind == "lambda1":
            coef.append((0.0, 1.0))
        elif v.kind == "lambda0":
            coef.append((1.0, 0.0))
        else:
            raise ValueError(f"unknown field kind {v.kind!r}")
    idx = [v.index for v in variables]
    a = np.array([c[0] for c in coef])
    b = np.array([c[1] for c in coef])
    means = Mc[:, idx] * b
    Qb = Qbar[np.ix_(idx, idx)]
    Qk = Qc[:, idx][:, :, idx]
    covs = np.outer(a, a) * Qb + np.outer(b, b) * Qk
    return means, np.broadcast_to(covs, (K, n, n)).copy()


BLOCK_KINDS = {
    # kind: (number of omega fields, trailing field kinds)
    "Omega": (None, ()),
    "Omega_tt": (2, ()),
    "Omega3": (3, ()),
    "Omega4": (4, ()),
    "Phi3": (2, ("lambda1",)),
    "Phi4": (3, ("lambda1",)),
    "Psi3": (2, ("lambda0",)),
    "Psi4": (3, ("lambda0",)),
    "P411": (2, ("lambda1", "lambda1")),
    "P401": (2, ("lambda0", "lambda1")),
    "P400": (2, ("lambda0", "lambda0")),
}


def block_variables(kind: str, times: Sequence[float], indices: Sequence[int]) -> list[Var]:
    if kind not in BLOCK_KINDS:
        raise ValueError(f"unknown block kind {kind!r}")
    n_omega, tail = BLOCK_KINDS[kind]
    indices = list(indices)
    if n_omega is None:
        t = times[0] if np.ndim(times) else times
        return [Var("omega", i, float(t)) for i in indices]
    if len(indices) != n_omega + len(tail):
        raise ValueError(f"{kind} needs {n_omega + len(tail)} indices")
    times = list(times) + [0.0] * n_omega
    out = [Var("omega", i, float(t)) for i, t in zip(indices[:n_omega], times[:n_omega])]
    out += [Var(k, i) for k, i in zip(tail, indices[n_omega:])]
    return out


def build_block(kind: str, Qbar, Qc, Mc, schedule, times, indices) -> GaussianSpec:
    """Gaussian of the named covariance block for one cluster.

    ``schedule`` supplies alpha and beta.  Blocks are assembled from the
    pairwise field covariances, so they are symmetric by construction.
    """
    variables = block_variables(kind, times, indices)
    means, covs = joint_gaussian(variables, Qbar, Qc, Mc, schedule.alpha, schedule.beta)
    return GaussianSpec(means[0], covs[0])


__all__ = [
    "Activation", "TANH", "RELU", "IDENTITY", "get_activation", "custom_activation",
    "Factor", "ACT", "ACT_PRIME", "LINEAR", "FactorList", "GaussianSpec", "Quadrature",
    "MonteCarlo", "expect", "expect_batch", "expect_function", "monte_carlo", "Var", "joint_gaussian",
    "build_block", "block_variables", "BLOCK_KINDS",
]
