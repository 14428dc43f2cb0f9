"""Compare the two readings of the theta-coupled term in dm/dtheta with a
finite-d Monte-Carlo average of one SGD step.

    python scripts/theta_probe.py --d 2000 --n 20000
"""
import argparse
import dataclasses
import math

import numpy as np

from daeflow import dynamics as D
from daeflow import simulate as S
from daeflow.model import embedded_mixture, linear_schedule


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--d", type=int, default=2000)
    ap.add_argument("--n", type=int, default=20_000)
    ap.add_argument("--variance", type=float, default=0.25)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    d = args.d
    tg = embedded_mixture(d, [[2.0], [-2.0]], variance=args.variance)
    s = linear_schedule(training_grid=(0.8,))
    rng = np.random.default_rng(0)
    w = 0.3 * rng.standard_normal((d, 1))
    w[0, 0] += 0.6 * math.sqrt(d)
    p = S.DAEParams(w, np.zeros(1), 0.2)
    st0 = S.measure_summary(p, tg)
    hp = D.Hyperparams(eta=0.05)
    literal = D.rhs(st0, tg, s, hp).m.ravel()
    alt = D.rhs(st0, tg, s, dataclasses.replace(hp, alternates=frozenset({"theta_Qc"}))).m.ravel()
    est = S.expected_increment(p, tg, s, hp, n_samples=args.n, seed=args.seed, batch=250)
    print(f"M = {st0.M.ravel()}, Qbar = {st0.Qbar.ravel()}, Qc = {st0.Qc(tg).ravel()}")
    print(f"oracle     {est.rate.m.ravel()}  se {est.se_m.ravel()}")
    print(f"literal    {literal}")
    print(f"Qc reading {alt}")


if __name__ == "__main__":
    main()
