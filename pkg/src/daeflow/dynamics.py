"""Limiting ODEs of the summary statistics under online SGD.

The state stores, for each spectral atom a, its contribution m_a to the
centroid overlaps M, q_a to the self-overlap Qbar = w^T w / d and g_a to the
reference overlaps G.  Cluster-resolved overlaps are Q(c) = sum_a rho_a(c) q_a.

For each training time t and cluster c the linear part of every increment has
the form

    dX_a = (L0 + rho_a(c) L1) X_a + s (source)_a - lambda X_a,

with r x r matrices L0, L1 and a source vector s that depend only on the
aggregate statistics.  X is m^k (source theta^{ck}), g (source P^c) or q
(source m^c, then symmetrized).  The quadratic q-term, which carries the
learning rate, is evaluated by one joint quadrature over the local fields:
the lambda fields enter polynomially and are integrated out exactly by
Gaussian conditioning on the omega fields.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import MixtureTarget, Schedule, average_eigenvalue
from .moments import (LINEAR, Factor, Var, expect_batch, expect_function, get_activation,
                      joint_gaussian)

DEN_FLOOR = 1e-12
NUM_ZERO = 1e-14

# alternative readings of individual terms, kept for comparison with the
# finite-d oracle (the default implements the derived coefficients)
ALTERNATES = frozenset({"theta_Qc", "d10_alpha_sq", "quad_eps_at_t", "v_without_p"})


def safe_div(num, den):
    """num / den with |den| floored at DEN_FLOOR; 0 where num is negligible too."""
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    small = np.abs(den) < DEN_FLOOR
    den_f = np.where(small, np.where(den < 0, -DEN_FLOOR, DEN_FLOOR), den)
    out = num / den_f
    return np.where(small & (np.abs(num) < NUM_ZERO), 0.0, out)


# ---------------------------------------------------------------------------
# state and hyperparameters

@dataclass
class SummaryState:
    """b: scalar, v: (r,), m: (A, K, r), q: (A, r, r), g: (A, r, R)."""

    b: float
    v: np.ndarray
    m: np.ndarray
    q: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        self.b = float(self.b)
        self.v = np.atleast_1d(np.asarray(self.v, dtype=float))
        r = self.v.shape[0]
        self.m = np.asarray(self.m, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        self.g = np.asarray(self.g, dtype=float)
        A = self.q.shape[0]
        if self.q.shape != (A, r, r):
            raise ValueError(f"q has shape {self.q.shape}, expected ({A}, {r}, {r})")
        if self.m.ndim != 3 or self.m.shape[0] != A or self.m.shape[2] != r:
            raise ValueError(f"m has shape {self.m.shape}, expected ({A}, K, {r})")
        if self.g.ndim != 3 or self.g.shape[:2] != (A, r):
            raise ValueError(f"g has shape {self.g.shape}, expected ({A}, {r}, R)")

    @property
    def r(self) -> int:
        return self.v.shape[0]

    @property
    def M(self) -> np.ndarray:
        """(K, r): M[c, gamma] = w_gamma . mu(c) / sqrt(d)."""
        return self.m.sum(axis=0)

    @property
    def Qbar(self) -> np.ndarray:
        return self.q.sum(axis=0)

    def Qc(self, target: MixtureTarget) -> np.ndarray:
        """(K, r, r) cluster-resolved overlaps sum_a rho_a(c) q_a."""
        return np.einsum("ak,ars->krs", target.atom_eigenvalues, self.q)

    @property
    def G(self) -> np.ndarray:
        return self.g.sum(axis=0)

    def copy(self) -> "SummaryState":
        return SummaryState(self.b, self.v.copy(), self.m.copy(), self.q.copy(), self.g.copy())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.b], self.v, self.m.ravel(), self.q.ravel(), self.g.ravel()])

    def like(self, vec: np.ndarray) -> "SummaryState":
        """State with this state's shapes filled from a flat vector."""
        r, i = self.r, 1
        v = vec[i:i + r]
        i += r
        m = vec[i:i + self.m.size].reshape(self.m.shape)
        i += self.m.size
        q = vec[i:i + self.q.size].reshape(self.q.shape)
        i += self.q.size
        g = vec[i:i + self.g.size].reshape(self.g.shape)
        return SummaryState(vec[0], v, m, q, g)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.to_vector()).all())


@dataclass(frozen=True)
class Hyperparams:
    """Learning rate, weight decay and evaluation settings of the ODE."""

    eta: float
    weight_decay: float = 0.0
    include_quadratic: bool = True
    activation: object = "tanh"
    order: int | None = None
    panel_order: int | None = None
    alternates: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        object.__setattr__(self, "activation", get_activation(self.activation))
        alt = frozenset(self.alternates)
        unknown = alt - ALTERNATES
        if unknown:
            raise ValueError(f"unknown alternates {sorted(unknown)}")
        object.__setattr__(self, "alternates", alt)


def _check_dims(state: SummaryState, target: MixtureTarget):
    A, K, R = target.n_atoms, target.n_clusters, target.reference_dim
    if state.m.shape[:2] != (A, K) or state.q.shape[0] != A or state.g.shape[2] != R:
        raise ValueError(
            f"state shapes m{state.m.shape} q{state.q.shape} g{state.g.shape} "
            f"do not match target (atoms={A}, clusters={K}, R={R})")


# ---------------------------------------------------------------------------
# skip connection

def rhs_b(b: float, Lambda: float, schedule: Schedule) -> float:
    """db/dtheta = E_t[beta_t (1 - b beta_t) Lambda - b alpha_t^2]."""
    a, be, _ = schedule.grid_arrays()
    return float(np.mean(be * (1.0 - b * be) * Lambda - b * a * a))


def b_fixed_point(Lambda: float, schedule: Schedule) -> float:
    eb, eb2, ea2 = schedule.averages()
    return Lambda * eb / (Lambda * eb2 + ea2)


def b_closed_form(tau: float, b0: float, Lambda: float, schedule: Schedule) -> float:
    """Exact solution of the linear b equation."""
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    eb, eb2, ea2 = schedule.averages()
    rate = Lambda * eb2 + ea2
    if rate == 0.0:
        return b0 + Lambda * eb * tau
    bstar = Lambda * eb / rate
    return bstar + (b0 - bstar) * math.exp(-rate * tau)


# ---------------------------------------------------------------------------
# integrals

class _Integrals:
    """Memoized local-field expectations, batched over clusters.

    A call takes (Var, factor kind) pairs; the key is order-independent so
    repeated integrals within one right-hand side are evaluated once.
    """

    def __init__(self, state: SummaryState, target: MixtureTarget, schedule: Schedule,
                 hp: Hyperparams):
        self.Qbar = state.Qbar
        self.Qc = state.Qc(target)
        self.M = state.M
        self.v = state.v
        self.schedule = schedule
        self.hp = hp
        self.cache = {}

    def shift(self, var: Var) -> float:
        if var.kind != "omega":
            return 0.0
        return float(self.schedule.p(var.t)) * self.v[var.index]

    def __call__(self, *items) -> np.ndarray:
        key = tuple(sorted(items))
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        variables = [it[0] for it in key]
        factors = [Factor(kind, self.shift(var)) if kind != "lin" else LINEAR
                   for var, kind in key]
        means, covs = joint_gaussian(variables, self.Qbar, self.Qc, self.M,
                                     self.schedule.alpha, self.schedule.beta)
        val = expect_batch(means, covs, factors, self.hp.activation,
                           self.hp.order, self.hp.panel_order)
        self.cache[key] = val
        return val


def _om(g, t):
    return Var("omega", g, t)


def _l1(g):
    return Var("lambda1", g)


def _l0(g):
    return Var("lambda0", g)


# ---------------------------------------------------------------------------
# linear part

def _linear_coeffs(state, target, schedule, hp, I: _Integrals):
    """Grid-averaged L0 (K, r, r), L1 (K, r, r), source (K, r) and the v-source (K, r)."""
    r, K = state.r, target.n_clusters
    Qb = state.Qbar
    Qc = I.Qc
    M = I.M
    b = state.b
    alt = hp.alternates
    L0 = np.zeros((K, r, r))
    L1 = np.zeros((K, r, r))
    src = np.zeros((K, r))
    vsrc = np.zeros((K, r))
    grid = schedule.training_grid
    for t in grid:
        al, be, pt = float(schedule.alpha(t)), float(schedule.beta(t)), float(schedule.p(t))
        a_t = 1.0 - b * be
        Om = al * al * Qb + be * be * Qc  # (K, r, r)
        coupling = Qc if "theta_Qc" in alt else np.broadcast_to(Qb, Qc.shape)
        for g in range(r):
            wg = _om(g, t)
            Is = I((wg, "act"))
            Iso = I((wg, "act"), (wg, "lin"))
            J1 = Iso - be * M[:, g] * Is
            Ogg = Om[:, g, g]
            L0[:, g, g] += safe_div(-b * al * al * J1, Ogg)
            L1[:, g, g] += safe_div(a_t * be * J1, Ogg)
            Il1 = I((_l1(g), "lin"), (wg, "dact"))
            Il0 = I((_l0(g), "lin"), (wg, "dact"))
            Il1o = I((_l1(g), "lin"), (wg, "dact"), (wg, "lin"))
            Il0o = I((_l0(g), "lin"), (wg, "dact"), (wg, "lin"))
            Il11 = I((_l1(g), "lin"), (_l1(g), "lin"), (wg, "dact"))
            Il00 = I((_l0(g), "lin"), (_l0(g), "lin"), (wg, "dact"))
            qg, Qg = Qb[g, g], Qc[:, g, g]
            # denominators reduced with Omega = alpha^2 Qbar + beta^2 Q(c)
            L0[:, g, g] += safe_div(a_t * (Il1o - be * Il11), np.full(K, qg))
            L0[:, g, g] -= safe_div(al * al * b * Il00, np.full(K, qg))
            L1[:, g, g] += safe_div(be * a_t * (Il11 - M[:, g] * Il1), Qg)
            br10 = Il0o - al * Il00 - M[:, g] * be * Il0
            if "d10_alpha_sq" in alt:
                L1[:, g, g] -= safe_div(al * al * b * br10, be * Qg)
            else:
                L1[:, g, g] -= safe_div(al * b * br10, Qg)
            src[:, g] += a_t * Is + be * a_t * Il1 - al * be * b * Il0
            vsrc[:, g] += (pt if "v_without_p" not in alt else 1.0) * (a_t * Il1 - b * al * Il0)
            for d in range(r):
                wd = _om(d, t)
                Iss = I((wg, "act"), (wd, "act"))
                L0[:, g, d] -= Iss
                Ips = I((wg, "dact"), (wd, "act"))
                src[:, g] -= be * coupling[:, g, d] * Ips
                vsrc[:, g] -= (pt if "v_without_p" not in alt else 1.0) * Qb[g, d] * Ips
                if d == g:
                    Ipsw = I((wg, "dact"), (wg, "act"), (wg, "lin"))
                    J = Ipsw - be * M[:, g] * Ips
                    L0[:, g, g] -= safe_div(al * al * Qb[g, g] * J, Ogg)
                    L1[:, g, g] -= safe_div(be * be * Qb[g, g] * J, Ogg)
                    continue
                J2 = I((wg, "dact"), (wd, "act"), (wg, "lin")) - be * M[:, g] * Ips
                J3 = I((wg, "dact"), (wd, "act"), (wd, "lin")) - be * M[:, d] * Ips
                det = Ogg * Om[:, d, d] - Om[:, g, d] ** 2
                on_g = safe_div(Qb[g, d] * (J2 * Om[:, d, d] - J3 * Om[:, g, d]), det)
                on_d = safe_div(Qb[g, d] * (J3 * Ogg - J2 * Om[:, g, d]), det)
                L0[:, g, g] -= al * al * on_g
                L1[:, g, g] -= be * be * on_g
                L0[:, g, d] -= al * al * on_d
                L1[:, g, d] -= be * be * on_d
    n = len(grid)
    return L0 / n, L1 / n, src / n, vsrc / n


def _apply_linear(L0, L1, target: MixtureTarget):
    """Atom operators A0 + A1[a] (A, r, r) after averaging over clusters."""
    pi = target.weights
    A0 = np.einsum("c,cgd->gd", pi, L0)
    A1 = np.einsum("c,ac,cgd->agd", pi, target.atom_eigenvalues, L1)
    return A0[None] + A1


# ---------------------------------------------------------------------------
# quadratic part

def _conditional(Yvars, Lvars, Qbar, Qc, M, schedule):
    """Joint Gaussian of fields Y and regression of fields L on Y.

    Returns (mY, CY, mL, A, S) with E[L|Y] = mL + A (Y - mY) and
    Cov[L|Y] = S, all batched over clusters.
    """
    means, covs = joint_gaussian(list(Yvars) + list(Lvars), Qbar, Qc, M,
                                 schedule.alpha, schedule.beta)
    n = len(Yvars)
    mY, CY = means[:, :n], covs[:, :n, :n]
    mL, CLY, CLL = means[:, n:], covs[:, n:, :n], covs[:, n:, n:]
    A = np.einsum("bln,bnm->blm", CLY, np.linalg.pinv(CY, rcond=1e-12, hermitian=True))
    S = CLL - np.einsum("bln,bmn->blm", A, CLY)
    return mY, CY, mL, A, S


def _quad_joint(state, target, schedule, hp, t, tp):
    """E0, E1 (K, r, r) for one (t, t') pair by a joint quadrature."""
    r = state.r
    act = hp.activation
    b = state.b
    Qb, Qc, M, v = state.Qbar, state.Qc(target), state.M, state.v
    same = t == tp
    times = [t] if same else [t, tp]
    Yvars = [_om(g, s) for s in times for g in range(r)]
    Lvars = [_l1(g) for g in range(r)] + [_l0(g) for g in range(r)]
    mY, CY, mL, A, S = _conditional(Yvars, Lvars, Qb, Qc, M, schedule)
    al, be = float(schedule.alpha(t)), float(schedule.beta(t))
    alp, bep = float(schedule.alpha(tp)), float(schedule.beta(tp))
    a, c = 1.0 - b * be, b * al
    ap, cp = 1.0 - b * bep, b * alp
    shift_t = float(schedule.p(t)) * v
    shift_tp = float(schedule.p(tp)) * v
    off = 0 if same else r
    # combination e_gamma = (a lam1 - c lam0) at t and at t'
    u_t = np.concatenate([a * np.eye(r), -c * np.eye(r)], axis=1)      # (r, 2r)
    u_tp = np.concatenate([ap * np.eye(r), -cp * np.eye(r)], axis=1)
    cond_cov = np.einsum("gl,blm,dm->bgd", u_t, S, u_tp)              # (K, r, r)
    eps_at_t = "quad_eps_at_t" in hp.alternates
    K = mY.shape[0]

    def fn(pts, rows):
        y_t = pts[..., :r] + shift_t
        y_tp = pts[..., off:off + r] + shift_tp
        s_t, ds_t = act.f(y_t), act.df(y_t)
        s_tp, ds_tp = act.f(y_tp), act.df(y_tp)
        u_t_ = s_t @ Qb          # (b, P, r): (Qbar sigma^t)_gamma
        u_tp_ = s_tp @ Qb
        ell = mL[rows][:, None, :] + np.einsum("bln,bpn->bpl", A[rows], pts - mY[rows][:, None, :])
        e_t = ell @ u_t.T        # (b, P, r)
        e_tp = ell @ u_tp.T
        T1 = s_t[..., :, None] * s_tp[..., None, :]
        u2 = u_t_ if eps_at_t else u_tp_
        T2 = s_t[..., :, None] * (u2 * ds_tp)[..., None, :]
        T3 = s_t[..., :, None] * (ds_tp * e_tp)[..., None, :]
        T4 = (ds_t * u_t_)[..., :, None] * (ds_tp * u_tp_)[..., None, :]
        T5 = (ds_t * u_t_)[..., :, None] * (ds_tp * e_tp)[..., None, :]
        T6 = (ds_t[..., :, None] * ds_tp[..., None, :]
              * (e_t[..., :, None] * e_tp[..., None, :] + cond_cov[rows][:, None]))
        common = 0.5 * T4 - T5 + 0.5 * T6
        E0 = 0.5 * c * cp * T1 + c * alp * (T2 - T3) + al * alp * common
        E1 = 0.5 * a * ap * T1 - bep * a * (T2 - T3) + be * bep * common
        return np.stack([E0, E1], axis=2).reshape(pts.shape[0], pts.shape[1], 2 * r * r)

    # smooth breakpoints only while the joint dimension keeps the panel rule cheap
    points = act.kinks + (act.breaks if len(Yvars) <= 2 else ())
    kinks = []
    if points:
        for s, sh in ((t, shift_t), (tp, shift_tp))[: len(times)]:
            kinks += [tuple(kp - sh[g] for kp in points) for g in range(r)]
    else:
        kinks = None
    out = expect_function(mY, CY, fn, kinks, hp.order, hp.panel_order)
    out = out.reshape(K, 2, r, r)
    return out[:, 0], out[:, 1]


def _quad_indexed(state, target, schedule, hp, t, tp, I: _Integrals):
    """E0, E1 (K, r, r) for one (t, t') pair from individual integrals."""
    r = state.r
    b = state.b
    Qb = state.Qbar
    al, be = float(schedule.alpha(t)), float(schedule.beta(t))
    alp, bep = float(schedule.alpha(tp)), float(schedule.beta(tp))
    a, c = 1.0 - b * be, b * al
    ap, cp = 1.0 - b * bep, b * alp
    t_eps = t if "quad_eps_at_t" in hp.alternates else tp
    K = target.n_clusters
    E0 = np.zeros((K, r, r))
    E1 = np.zeros((K, r, r))
    for g in range(r):
        for d in range(r):
            wg, wd = _om(g, t), _om(d, tp)
            T1 = I((wg, "act"), (wd, "act"))
            T2 = sum(I((wg, "act"), (_om(e, t_eps), "act"), (wd, "dact")) * Qb[e, d]
                     for e in range(r))
            T3 = (ap * I((wg, "act"), (wd, "dact"), (_l1(d), "lin"))
                  - cp * I((wg, "act"), (wd, "dact"), (_l0(d), "lin")))
            T4 = sum(I((wg, "dact"), (_om(e, t), "act"), (wd, "dact"), (_om(i, tp), "act"))
                     * Qb[g, e] * Qb[d, i] for e in range(r) for i in range(r))
            T5 = sum((ap * I((wg, "dact"), (_om(e, t), "act"), (wd, "dact"), (_l1(d), "lin"))
                      - cp * I((wg, "dact"), (_om(e, t), "act"), (wd, "dact"), (_l0(d), "lin")))
                     * Qb[e, g] for e in range(r))
            T6 = (a * ap * I((wg, "dact"), (wd, "dact"), (_l1(g), "lin"), (_l1(d), "lin"))
                  - ap * c * I((wg, "dact"), (wd, "dact"), (_l0(g), "lin"), (_l1(d), "lin"))
                  - cp * a * I((wg, "dact"), (wd, "dact"), (_l0(d), "lin"), (_l1(g), "lin"))
                  + c * cp * I((wg, "dact"), (wd, "dact"), (_l0(g), "lin"), (_l0(d), "lin")))
            common = 0.5 * T4 - T5 + 0.5 * T6
            E0[:, g, d] = 0.5 * c * cp * T1 + c * alp * (T2 - T3) + al * alp * common
            E1[:, g, d] = 0.5 * a * ap * T1 - bep * a * (T2 - T3) + be * bep * common
    return E0, E1


def quadratic_q(state, target, schedule, hp, method: str = "auto", I=None) -> np.ndarray:
    """Quadratic (learning-rate) contribution to dq_a/dtheta, symmetrized, (A, r, r)."""
    r = state.r
    grid = schedule.training_grid
    K = target.n_clusters
    E0 = np.zeros((K, r, r))
    E1 = np.zeros((K, r, r))
    I = I or _Integrals(state, target, schedule, hp)
    for t in grid:
        for tp in grid:
            joint = method == "joint" or (method == "auto" and (1 if t == tp else 2) * r <= 4)
            if joint:
                e0, e1 = _quad_joint(state, target, schedule, hp, t, tp)
            else:
                e0, e1 = _quad_indexed(state, target, schedule, hp, t, tp, I)
            E0 += e0
            E1 += e1
    n2 = len(grid) ** 2
    pi = target.weights
    X0 = np.einsum("c,cgd->gd", pi, E0) / n2
    X1 = np.einsum("c,ac,cgd->agd", pi, target.atom_eigenvalues, E1) / n2
    out = 2.0 * hp.eta * target.atom_weights[:, None, None] * (X0[None] + X1)
    return out + np.swapaxes(out, 1, 2)


# ---------------------------------------------------------------------------
# right-hand sides

def rhs(state: SummaryState, target: MixtureTarget, schedule: Schedule,
        hp: Hyperparams, quadratic_method: str = "auto") -> SummaryState:
    """Time derivative of every statistic (as a SummaryState of rates)."""
    _check_dims(state, target)
    I = _Integrals(state, target, schedule, hp)
    L0, L1, src, vsrc = _linear_coeffs(state, target, schedule, hp, I)
    lam = hp.weight_decay
    pi = target.weights
    Aop = _apply_linear(L0, L1, target)                    # (A, r, r)
    # m: source theta_a^{ck}
    dm = (np.einsum("agd,akd->akg", Aop, state.m)
          + np.einsum("c,cg,ack->akg", pi, src, target.atom_theta) - lam * state.m)
    dg = (np.einsum("agd,adj->agj", Aop, state.g)
          + np.einsum("c,cg,acj->agj", pi, src, target.atom_reference) - lam * state.g)
    lin_q = (np.einsum("age,aed->agd", Aop, state.q)
             + np.einsum("c,cg,acd->agd", pi, src, state.m) - lam * state.q)
    dq = lin_q + np.swapaxes(lin_q, 1, 2)
    if hp.include_quadratic:
        dq = dq + quadratic_q(state, target, schedule, hp, quadratic_method, I)
    dv = pi @ vsrc - lam * state.v
    db = rhs_b(state.b, average_eigenvalue(target), schedule)
    return SummaryState(db, dv, dm, dq, dg)


def rhs_m(state, target, schedule, hp) -> np.ndarray:
    return rhs(state, target, schedule, replace(hp, include_quadratic=False)).m


def rhs_g(state, target, schedule, hp) -> np.ndarray:
    return rhs(state, target, schedule, replace(hp, include_quadratic=False)).g


def rhs_q(state, target, schedule, hp) -> np.ndarray:
    return rhs(state, target, schedule, hp).q


def rhs_v(state, target, schedule, hp) -> np.ndarray:
    return rhs(state, target, schedule, replace(hp, include_quadratic=False)).v


# ---------------------------------------------------------------------------
# integration

@dataclass
class Trajectory:
    times: np.ndarray
    states: list
    target: MixtureTarget | None = None

    def __len__(self):
        return len(self.states)

    def stat(self, name: str) -> np.ndarray:
        """Stack a statistic over time: 'b', 'v', 'M', 'Qbar', 'G' or 'Qc'."""
        if name == "Qc":
            return np.stack([s.Qc(self.target) for s in self.states])
        return np.stack([np.asarray(getattr(s, name)) for s in self.states])

    def to_csv(self, path) -> None:
        write_trajectory_csv(path, self.times, self.states, self.target)


def trajectory_header(K: int, r: int, R: int) -> list[str]:
    cols = ["theta", "b"] + [f"v_{g}" for g in range(r)]
    cols += [f"M_{c}_{g}" for c in range(K) for g in range(r)]
    cols += [f"Qbar_{g}_{d}" for g in range(r) for d in range(r)]
    cols += [f"Q_{c}_{g}_{d}" for c in range(K) for g in range(r) for d in range(r)]
    cols += [f"G_{g}_{j}" for g in range(r) for j in range(R)]
    return cols


def trajectory_row(theta: float, b, v, M, Qbar, Qc, G) -> list[float]:
    return ([float(theta), float(b)] + list(np.ravel(v)) + list(np.ravel(M))
            + list(np.ravel(Qbar)) + list(np.ravel(Qc)) + list(np.ravel(G)))


def write_trajectory_csv(path, times, states, target) -> None:
    s0 = states[0]
    K, r, R = s0.M.shape[0], s0.r, s0.G.shape[1]
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(trajectory_header(K, r, R))
        for th, s in zip(times, states):
            w.writerow([repr(float(x)) for x in trajectory_row(th, s.b, s.v, s.M, s.Qbar, s.Qc(target), s.G)])


def read_trajectory_csv(path) -> dict:
    """Columns of a trajectory CSV as float arrays keyed by header name."""
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    head, data = rows[0], np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))
    return {h: data[:, i] for i, h in enumerate(head)}


_TERMS = ("b", "v", "m", "q", "g")


def _nonfinite_term(st: SummaryState) -> str:
    for name in _TERMS:
        if not np.isfinite(np.asarray(getattr(st, name))).all():
            return name
    return "?"


def integrate(state0: SummaryState, target: MixtureTarget, schedule: Schedule,
              hp: Hyperparams, tau_end: float, method: str = "rk4", step: float = 0.01,
              output_times: Sequence[float] | None = None, exact_b: bool = False,
              progress=None) -> Trajectory:
    """Fixed-step integration of all statistics from 0 to ``tau_end``.

    Output states are recorded at ``output_times`` (each rounded to the step
    grid); by default at every step.  With ``exact_b`` the skip connection is
    taken from the closed form instead of being integrated.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if method not in ("rk4", "euler"):
        raise ValueError(f"unknown integration method {method!r}")
    _check_dims(state0, target)
    n_steps = int(round(tau_end / step))
    if abs(n_steps * step - tau_end) > 1e-9 * max(1.0, tau_end):
        n_steps = int(math.ceil(tau_end / step - 1e-9))
    if output_times is None:
        record = set(range(n_steps + 1))
    else:
        record = {min(n_steps, int(round(t / step))) for t in output_times}
    Lam = average_eigenvalue(target)
    b0 = state0.b

    theta = 0.0

    def diverged(vec):
        return FloatingPointError(
            f"non-finite value in term {_nonfinite_term(state0.like(vec))!r} at theta={theta:.6g}")

    def f(vec):
        # intermediate RK stages can blow up before the step completes
        if not np.isfinite(vec).all():
            raise diverged(vec)
        try:
            out = rhs(state0.like(vec), target, schedule, hp).to_vector()
        except np.linalg.LinAlgError:
            raise FloatingPointError(f"singular statistics at theta={theta:.6g}") from None
        if not np.isfinite(out).all():
            raise diverged(vec + out)
        return out

    x = state0.to_vector()
    times, states = [], []
    if 0 in record:
        times.append(0.0)
        states.append(state0.copy())
    for k in range(n_steps):
        theta = k * step
        h = min(step, tau_end - k * step)
        if method == "euler":
            x = x + h * f(x)
        else:
            k1 = f(x)
            k2 = f(x + 0.5 * h * k1)
            k3 = f(x + 0.5 * h * k2)
            k4 = f(x + h * k3)
            x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        tau = (k + 1) * step if k + 1 < n_steps else tau_end
        if exact_b:
            x[0] = b_closed_form(tau, b0, Lam, schedule)
        theta = tau
        if not np.isfinite(x).all():
            raise diverged(x)
        if k + 1 in record:
            times.append(tau)
            states.append(state0.like(x.copy()))
        if progress is not None:
            progress(k + 1, n_steps)
    return Trajectory(np.array(times), states, target)


# ---------------------------------------------------------------------------
# initial conditions

def _zero_state(target: MixtureTarget, r: int, b0: float) -> SummaryState:
    A, K, R = target.n_atoms, target.n_clusters, target.reference_dim
    return SummaryState(b0, np.zeros(r), np.zeros((A, K, r)), np.zeros((A, r, r)),
                        np.zeros((A, r, R)))


def init_summary(kind: str, target: MixtureTarget, r: int, b0: float = 0.0, **spec) -> SummaryState:
    """Initial statistics.

    kind="cold", scale s: law of i.i.d. N(0, s^2/d) weights, Qbar = s^2 I.
    kind="warm", clusters [k_1..k_r], norm: column gamma = norm sqrt(d) mu(k_gamma)/|mu(k_gamma)|.
    kind="sampled", scale s, d, seed: cold start plus the O(1/sqrt(d)) Gaussian
    overlaps of a random initialization, which break the symmetric fixed point.
    kind="explicit", state: passed through unchanged.
    """
    if kind == "explicit":
        st = spec["state"]
        if not isinstance(st, SummaryState):
            st = SummaryState(**st)
        _check_dims(st, target)
        return st
    st = _zero_state(target, r, b0)
    nu = target.atom_weights
    if kind == "cold":
        s = float(spec.get("scale", 0.0))
        st.q = (s * s) * nu[:, None, None] * np.eye(r)[None]
        return st
    if kind == "sampled":
        s = float(spec.get("scale", 1.0))
        d = int(spec["d"])
        rng = np.random.default_rng(spec.get("seed", 0))
        st.q = (s * s) * nu[:, None, None] * np.eye(r)[None]
        theta, P, Rg = target.atom_theta, target.atom_reference, target.atom_reference_gram
        K = target.n_clusters
        for a in range(target.n_atoms):
            C = np.block([[theta[a], P[a]], [P[a].T, Rg[a]]]) * (s * s / d)
            vals, vecs = np.linalg.eigh(0.5 * (C + C.T))
            L = vecs * np.sqrt(np.clip(vals, 0.0, None))
            z = L @ rng.standard_normal((C.shape[0], r))
            st.m[a] = z[:K]
            st.g[a] = z[K:].T
        return st
    if kind == "warm":
        clusters = list(spec["clusters"])
        norm = float(spec.get("norm", 0.1))
        if len(clusters) != r:
            raise ValueError(f"warm start needs {r} cluster indices, got {len(clusters)}")
        T = target.centroid_gram
        scale = np.array([T[k, k] for k in clusters])
        if np.any(scale <= 1e-14):
            raise ValueError("warm start along a zero-norm centroid is undefined")
        inv = norm / np.sqrt(scale)
        theta, P = target.atom_theta, target.atom_reference
        st.m = theta[:, :, clusters] * inv[None, None, :]
        st.q = theta[:, clusters][:, :, clusters] * np.outer(inv, inv)[None]
        st.g = P[:, clusters, :] * inv[None, :, None]
        Qb = st.Qbar
        if np.linalg.eigvalsh(Qb).min() < -1e-8:
            raise ValueError("warm specification implies a non-PSD self-overlap")
        return st
    raise ValueError(f"unknown init kind {kind!r}")


# ---------------------------------------------------------------------------
# linear model

@dataclass(frozen=True)
class LinearFixedPoint:
    M: float
    Qbar: float
    trivial: bool
    note: str = ""


def linear_fixed_point(schedule: Schedule, rho: float, weight_decay: float) -> LinearFixedPoint:
    """Fixed point of the r=1 identity-activation model on the binary mixture
    N(+-mu, I) with |mu|^2 = rho.  Qbar follows the closed form and M^2 = rho Qbar.
    """
    eb, eb2, ea2 = schedule.averages()
    num = (eb * ea2 / (eb2 + ea2)) * rho - weight_decay / 2.0
    den = eb2 * (1.0 + rho) + ea2
    if num <= 0.0:
        return LinearFixedPoint(0.0, 0.0, True, "trivial fixed point Qbar=0")
    Qb = num / den
    return LinearFixedPoint(math.sqrt(rho * Qb), Qb, False)


__all__ = [
    "SummaryState", "Hyperparams", "ALTERNATES", "safe_div", "rhs", "rhs_b", "rhs_m",
    "rhs_g", "rhs_q", "rhs_v", "b_closed_form", "b_fixed_point", "quadratic_q",
    "integrate", "Trajectory", "init_summary", "linear_fixed_point", "LinearFixedPoint",
    "trajectory_header", "trajectory_row", "write_trajectory_csv", "read_trajectory_csv",
]
