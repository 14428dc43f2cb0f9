"""Finite-dimensional reference: online SGD on the autoencoder and sampling.

The network is f(t, x) = b x + w sigma(w^T x / sqrt(d) + p_t v) / sqrt(d) with
tied weights.  One SGD step uses a fresh pair (x1 ~ target, x0 ~ N(0, I))
and differentiates the loss averaged over the training grid:

    w <- w - eta grad_w L - (2 eta lambda / d) w
    v <- v - (eta / d) grad_v L - (2 eta lambda / d) v
    b <- b - (eta / d^2) dL/db

so that training time theta = 2 eta n / d and weight decay acts at rate
lambda per unit theta, as in the limiting equations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import SummaryState, Trajectory
from .model import MixtureTarget, Schedule, _draw, atom_partition
from .moments import get_activation


@dataclass
class DAEParams:
    w: np.ndarray
    v: np.ndarray
    b: float

    def __post_init__(self):
        self.w = np.atleast_2d(np.asarray(self.w, dtype=float))
        self.v = np.atleast_1d(np.asarray(self.v, dtype=float))
        self.b = float(self.b)
        if self.v.shape[0] != self.w.shape[1]:
            raise ValueError("v must have one entry per weight column")

    @property
    def d(self) -> int:
        return self.w.shape[0]

    @property
    def r(self) -> int:
        return self.w.shape[1]

    def copy(self) -> "DAEParams":
        return DAEParams(self.w.copy(), self.v.copy(), self.b)


@dataclass(frozen=True)
class SimHyperparams:
    eta: float
    weight_decay: float = 0.0
    activation: object = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "activation", get_activation(self.activation))


def _sim_hp(hp) -> SimHyperparams:
    if isinstance(hp, SimHyperparams):
        return hp
    return SimHyperparams(hp.eta, hp.weight_decay, hp.activation)


def streams(seed):
    """Independent generators for data sampling and for sampling-SDE noise."""
    data, noise = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(data), np.random.default_rng(noise)


# ---------------------------------------------------------------------------
# network and gradients

def denoise(params: DAEParams, x, t: float, schedule: Schedule, activation="tanh"):
    """f(t, x) for rows of x (n, d)."""
    act = get_activation(activation)
    sd = math.sqrt(params.d)
    h = x @ params.w / sd + float(schedule.p(t)) * params.v
    return params.b * x + act.f(h) @ params.w.T / sd


def loss(params: DAEParams, x1, x0, schedule: Schedule, activation="tanh") -> float:
    """Training-grid average of |x1 - f(t, alpha_t x0 + beta_t x1)|^2 for one pair."""
    vals = []
    for t in schedule.training_grid:
        xt = float(schedule.alpha(t)) * x0 + float(schedule.beta(t)) * x1
        e = denoise(params, xt[None], t, schedule, activation)[0] - x1
        vals.append(e @ e)
    return float(np.mean(vals))


def gradients(params: DAEParams, x1, x0, schedule: Schedule, activation="tanh"):
    """(grad_w, grad_v, dL/db) of the grid-averaged loss, by the chain rule."""
    act = get_activation(activation)
    w, v, b = params.w, params.v, params.b
    sd = math.sqrt(params.d)
    gw = np.zeros_like(w)
    gv = np.zeros_like(v)
    gb = 0.0
    grid = schedule.training_grid
    for t in grid:
        pt = float(schedule.p(t))
        xt = float(schedule.alpha(t)) * x0 + float(schedule.beta(t)) * x1
        h = xt @ w / sd + pt * v
        s, ds = act.f(h), act.df(h)
        e = b * xt + w @ s / sd - x1
        ew = e @ w
        gw += 2.0 * (np.outer(e, s) / sd + np.outer(xt, ew * ds) / params.d)
        gv += 2.0 * pt * ew * ds / sd
        gb += 2.0 * float(e @ xt)
    n = len(grid)
    return gw / n, gv / n, gb / n


def gradients_expanded(params: DAEParams, x1, x0, schedule: Schedule, activation="tanh"):
    """Same gradients written through the local fields lambda1, lambda0 and Qbar."""
    act = get_activation(activation)
    w, v, b = params.w, params.v, params.b
    d = params.d
    sd = math.sqrt(d)
    Q = w.T @ w / d
    l1 = x1 @ w / sd
    l0 = x0 @ w / sd
    gw = np.zeros_like(w)
    gv = np.zeros_like(v)
    gb = 0.0
    grid = schedule.training_grid
    for t in grid:
        al, be, pt = float(schedule.alpha(t)), float(schedule.beta(t)), float(schedule.p(t))
        om = al * l0 + be * l1
        s, ds = act.f(om + pt * v), act.df(om + pt * v)
        resid = (1.0 - b * be) * l1 - b * al * l0
        inner = ds * (Q @ s - resid)
        xt = al * x0 + be * x1
        src = (1.0 - b * be) * x1 - b * al * x0
        gw += 2.0 * (w @ np.outer(s, s) / d - np.outer(src, s) / sd + np.outer(xt, inner) / sd)
        gv += 2.0 * pt * inner
        e = b * xt + w @ s / sd - x1
        gb += 2.0 * float(e @ xt)
    n = len(grid)
    return gw / n, gv / n, gb / n


def sgd_step(params: DAEParams, schedule: Schedule, hp, x1, x0) -> DAEParams:
    """One online step on the fresh pair (x1, x0)."""
    hp = _sim_hp(hp)
    d = params.d
    gw, gv, gb = gradients(params, x1, x0, schedule, hp.activation)
    decay = 2.0 * hp.eta * hp.weight_decay / d
    w = params.w - hp.eta * gw - decay * params.w
    v = params.v - hp.eta / d * gv - decay * params.v
    b = params.b - hp.eta / d ** 2 * gb
    return DAEParams(w, v, b)


# ---------------------------------------------------------------------------
# statistics

def measure_summary(params: DAEParams, target: MixtureTarget) -> SummaryState:
    """Per-atom statistics of the weights, grouped by the target's spectral atoms."""
    emb = target.embedding
    if emb is None:
        raise ValueError("measuring statistics needs a target with an embedding")
    if emb.d != params.d:
        raise ValueError(f"network dimension {params.d} differs from target dimension {emb.d}")
    parts = atom_partition(emb)
    if len(parts) != target.n_atoms:
        raise ValueError("embedding partition does not match the target atoms")
    w, d = params.w, params.d
    sd = math.sqrt(d)
    m = np.stack([emb.centroids[idx].T @ w[idx] / sd for idx in parts])
    q = np.stack([w[idx].T @ w[idx] / d for idx in parts])
    g = np.stack([w[idx].T @ emb.reference[idx] / sd for idx in parts])
    return SummaryState(params.b, params.v.copy(), m, q, g)


def init_params(kind: str, target: MixtureTarget, r: int, b0: float = 0.0, seed=0,
                **spec) -> DAEParams:
    """Finite-d counterpart of dynamics.init_summary (cold or warm)."""
    emb = target.embedding
    if emb is None:
        raise ValueError("finite-d initialization needs a target with an embedding")
    d = emb.d
    if kind in ("cold", "sampled"):
        s = float(spec.get("scale", 1.0 if kind == "sampled" else 0.0))
        rng = np.random.default_rng(seed)
        return DAEParams(s * rng.standard_normal((d, r)), np.zeros(r), b0)
    if kind == "warm":
        clusters = list(spec["clusters"])
        norm = float(spec.get("norm", 0.1))
        if len(clusters) != r:
            raise ValueError(f"warm start needs {r} cluster indices")
        w = np.zeros((d, r))
        for gi, k in enumerate(clusters):
            mu = emb.centroids[:, k]
            nrm = np.linalg.norm(mu)
            if nrm <= 1e-14:
                raise ValueError("warm start along a zero-norm centroid is undefined")
            w[:, gi] = norm * math.sqrt(d) * mu / nrm
        return DAEParams(w, np.zeros(r), b0)
    raise ValueError(f"unknown init kind {kind!r}")


def default_measure_every(d: int, eta: float) -> int:
    return max(1, math.ceil(d / (2.0 * eta) * 0.1))


def train(params0: DAEParams, target: MixtureTarget, schedule: Schedule, hp, n_steps: int,
          seed=0, measure_every: int | None = None, block: int = 512, progress=None):
    """Online SGD for ``n_steps`` fresh samples; returns (params, Trajectory)."""
    hp = _sim_hp(hp)
    if target.embedding is None:
        raise ValueError("training needs a target with an embedding")
    d = params0.d
    every = measure_every or default_measure_every(d, hp.eta)
    data_rng, _ = streams(seed)
    emb, pi = target.embedding, target.weights
    p = params0.copy()
    times, states = [0.0], [measure_summary(p, target)]
    step = 0
    while step < n_steps:
        nb = min(block, n_steps - step)
        X1 = _draw(emb, pi, nb, data_rng)
        X0 = data_rng.standard_normal((nb, d))
        for j in range(nb):
            p = sgd_step(p, schedule, hp, X1[j], X0[j])
            step += 1
            if not (np.isfinite(p.w).all() and np.isfinite(p.b) and np.isfinite(p.v).all()):
                raise FloatingPointError(f"SGD diverged at step {step}")
            if step % every == 0 or step == n_steps:
                times.append(2.0 * hp.eta * step / d)
                states.append(measure_summary(p, target))
        if progress is not None:
            progress(step, n_steps)
    return p, Trajectory(np.array(times), states, target)


def steps_for(theta: float, d: int, eta: float) -> int:
    return int(round(theta * d / (2.0 * eta)))


# ---------------------------------------------------------------------------
# expected increments (finite-d oracle for the limiting equations)

@dataclass
class IncrementEstimate:
    """Sample means of the statistic increments, per unit theta, with standard errors."""

    rate: SummaryState
    quad_q: np.ndarray
    se_quad: np.ndarray
    se_m: np.ndarray
    se_q: np.ndarray
    se_g: np.ndarray
    se_v: np.ndarray
    n: int


def expected_increment(params: DAEParams, target: MixtureTarget, schedule: Schedule, hp,
                       n_samples: int = 100_000, seed=0, batch: int = 500) -> IncrementEstimate:
    """Monte-Carlo mean of one SGD step's change of every statistic, divided by 2 eta / d.

    The q-rate is split into the part linear in the step (w dw^T + dw w^T)/d
    and the quadratic part dw dw^T / d, reported separately in ``quad_q``.
    """
    hp = _sim_hp(hp)
    act = hp.activation
    emb = target.embedding
    if emb is None:
        raise ValueError("the increment oracle needs a target with an embedding")
    parts = atom_partition(emb)
    rng = np.random.default_rng(seed)
    w, v, b = params.w, params.v, params.b
    d, r = params.d, params.r
    sd = math.sqrt(d)
    scale = d / (2.0 * hp.eta)
    decay = 2.0 * hp.eta * hp.weight_decay / d
    Q = w.T @ w / d
    grid = schedule.training_grid
    sums = {k: 0.0 for k in ("m", "m2", "g", "g2", "ql", "ql2", "qq", "qq2", "v", "v2", "b")}
    done = 0
    while done < n_samples:
        nb = min(batch, n_samples - done)
        X1 = _draw(emb, target.weights, nb, rng)
        X0 = rng.standard_normal((nb, d))
        l1 = X1 @ w / sd
        l0 = X0 @ w / sd
        dW = np.zeros((nb, d, r))
        dv = np.zeros((nb, r))
        db = np.zeros(nb)
        for t in grid:
            al, be, pt = float(schedule.alpha(t)), float(schedule.beta(t)), float(schedule.p(t))
            om = al * l0 + be * l1
            s, ds = act.f(om + pt * v), act.df(om + pt * v)
            resid = (1.0 - b * be) * l1 - b * al * l0
            inner = ds * (s @ Q - resid)                    # Q symmetric
            Xt = al * X0 + be * X1
            src = (1.0 - b * be) * X1 - b * al * X0
            gw = 2.0 * ((s @ w.T)[:, :, None] * s[:, None, :] / d
                        - src[:, :, None] * s[:, None, :] / sd
                        + Xt[:, :, None] * inner[:, None, :] / sd)
            dW -= hp.eta * gw / len(grid)
            dv -= hp.eta / d * 2.0 * pt * inner / len(grid)
            E = b * Xt + (s @ w.T) / sd - X1
            db -= hp.eta / d ** 2 * 2.0 * np.einsum("nd,nd->n", E, Xt) / len(grid)
        dW -= decay * w[None]
        dv -= decay * v[None]
        m_inc = np.stack([np.einsum("dk,ndg->nkg", emb.centroids[idx], dW[:, idx]) / sd
                          for idx in parts], axis=1) * scale
        g_inc = np.stack([np.einsum("ndg,dj->ngj", dW[:, idx], emb.reference[idx]) / sd
                          for idx in parts], axis=1) * scale
        ql = np.stack([(np.einsum("dg,nde->nge", w[idx], dW[:, idx])
                        + np.einsum("ndg,de->nge", dW[:, idx], w[idx])) / d
                       for idx in parts], axis=1) * scale
        qq = np.stack([np.einsum("ndg,nde->nge", dW[:, idx], dW[:, idx]) / d
                       for idx in parts], axis=1) * scale
        vv = dv * scale
        for key, arr in (("m", m_inc), ("g", g_inc), ("ql", ql), ("qq", qq), ("v", vv)):
            sums[key] = sums[key] + arr.sum(axis=0)
            sums[key + "2"] = sums[key + "2"] + (arr ** 2).sum(axis=0)
        sums["b"] += (db * scale).sum()
        done += nb
    n = float(n_samples)

    def mean_se(key):
        mu = sums[key] / n
        var = np.maximum(sums[key + "2"] / n - mu ** 2, 0.0)
        return mu, np.sqrt(var / n)

    m, se_m = mean_se("m")
    g, se_g = mean_se("g")
    ql, se_ql = mean_se("ql")
    qq, se_qq = mean_se("qq")
    vr, se_v = mean_se("v")
    rate = SummaryState(sums["b"] / n, vr, m, ql + qq, g)
    return IncrementEstimate(rate, qq, se_qq, se_m, np.sqrt(se_ql ** 2 + se_qq ** 2), se_g, se_v,
                             n_samples)


# ---------------------------------------------------------------------------
# sampling

def generate_samples(params: DAEParams, schedule: Schedule, n: int, seed=0, activation="tanh",
                     keep: str = "terminal"):
    """Euler-Maruyama sampling from X_0 ~ N(0, I_d) with the trained denoiser.

    Returns the terminal samples (n, d), or a list of (n, d) arrays at every
    grid time when ``keep="all"``.
    """
    act = get_activation(activation)
    grid = schedule.sampling_grid
    if np.any(schedule.alpha(grid) <= 0):
        raise ValueError("alpha_t = 0 on the sampling grid; extend t_f < 1")
    _, noise_rng = streams(seed)
    d = params.d
    sd = math.sqrt(d)
    X = noise_rng.standard_normal((n, d))
    out = [X.copy()] if keep == "all" else None
    for k in range(grid.size - 1):
        t, h = grid[k], grid[k + 1] - grid[k]
        a, da = float(schedule.alpha(t)), float(schedule.dalpha(t))
        be, dbe = float(schedule.beta(t)), float(schedule.dbeta(t))
        eps, pt = float(schedule.epsilon(t)), float(schedule.p(t))
        gam = dbe - da / a * be + eps * be / a ** 2
        lin = da / a - eps / a ** 2
        f = params.b * X + act.f(X @ params.w / sd + pt * params.v) @ params.w.T / sd
        X = X + h * (gam * f + lin * X) + math.sqrt(2.0 * eps * h) * noise_rng.standard_normal((n, d))
        if keep == "all":
            out.append(X.copy())
    return out if keep == "all" else X


def project_samples(X, reference) -> np.ndarray:
    """E^T x for rows of X."""
    return np.asarray(X) @ np.asarray(reference)


__all__ = [
    "DAEParams", "SimHyperparams", "denoise", "loss", "gradients", "gradients_expanded",
    "sgd_step", "measure_summary", "init_params", "train", "steps_for", "expected_increment",
    "IncrementEstimate", "generate_samples", "project_samples", "default_measure_every", "streams",
]
