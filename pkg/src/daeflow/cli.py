"""Experiment runner: declarative configs, run modes and emitted data files.

Usage::

    daeflow run <config|preset> [--out DIR] [--seed N] [--threads K]
    daeflow presets
    daeflow validate <config|preset>

Output goes to ``--out`` or, by default, to ``$DAEFLOW_OUT/<name>`` (falling
back to ``./runs/<name>``).
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import analyze, dynamics, model, simulate, transport

SPEC_VERSION = 1
MODES = ("theory-train", "sim-train", "sample", "compare", "collapse")
OUT_ENV = "DAEFLOW_OUT"
_INIT_KINDS = ("cold", "warm", "sampled", "explicit")


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""


# ---------------------------------------------------------------------------
# config

@dataclass
class ExperimentConfig:
    name: str
    mode: str
    target: dict
    schedule: dict
    model: dict
    training: dict = field(default_factory=dict)
    sampling: dict = field(default_factory=dict)
    simulation: dict = field(default_factory=dict)
    collapse: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=lambda: {"run": 0})
    description: str = ""
    budget_minutes: float | None = None
    spec_version: int = SPEC_VERSION
    base_dir: str = "."
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def seed(self) -> int:
        return int(self.seeds.get("run", 0))


def preset_dir():
    return resources.files("daeflow") / "presets"


def list_presets() -> list[tuple[str, str]]:
    """(name, one-line description) for every shipped preset."""
    out = []
    for entry in sorted(preset_dir().iterdir(), key=lambda p: p.name):
        if entry.name.endswith(".yaml"):
            doc = yaml.safe_load(entry.read_text())
            out.append((entry.name[:-5], str(doc.get("description", ""))))
    return out


def _require(d: dict, key: str, path: str):
    if not isinstance(d, dict) or key not in d:
        raise ConfigError(f"{path}.{key}: required field missing")
    return d[key]


def _number(value, path: str, positive=False, nonneg=False) -> float:
    try:
        x = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: expected a number, got {value!r}") from None
    if not np.isfinite(x) or (positive and x <= 0) or (nonneg and x < 0):
        raise ConfigError(f"{path}: invalid value {value!r}")
    return x


def load_config(source, overrides: dict | None = None) -> ExperimentConfig:
    """Parse a config file path or preset name and validate it."""
    path = Path(str(source))
    if path.is_file():
        raw = yaml.safe_load(path.read_text())
        base = str(path.resolve().parent)
    else:
        entry = preset_dir() / f"{source}.yaml"
        if not entry.is_file():
            raise ConfigError(f"config: no file or preset named {source!r}")
        raw = yaml.safe_load(entry.read_text())
        base = "."
    if overrides:
        raw = copy.deepcopy(raw)
        for key, value in overrides.items():
            node = raw
            *head, last = key.split(".")
            for h in head:
                node = node.setdefault(h, {})
            node[last] = value
    return validate_config(raw, base)


def validate_config(raw, base_dir: str = ".") -> ExperimentConfig:
    """Check every mode-required field before any compute."""
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    ver = raw.get("spec_version", SPEC_VERSION)
    if ver != SPEC_VERSION:
        raise ConfigError(f"config.spec_version: unsupported version {ver!r}")
    mode = _require(raw, "mode", "config")
    if mode not in MODES:
        raise ConfigError(f"config.mode: must be one of {', '.join(MODES)}")
    cfg = ExperimentConfig(
        name=str(raw.get("name", "run")), mode=mode,
        target=_require(raw, "target", "config"), schedule=_require(raw, "schedule", "config"),
        model=_require(raw, "model", "config"), training=raw.get("training") or {},
        sampling=raw.get("sampling") or {}, simulation=raw.get("simulation") or {},
        collapse=raw.get("collapse") or {}, seeds=raw.get("seeds") or {"run": 0},
        description=str(raw.get("description", "")), budget_minutes=raw.get("budget_minutes"),
        spec_version=ver, base_dir=base_dir, raw=raw)
    _validate_target(cfg.target, base_dir)
    try:
        model.schedule_from_dict(cfg.schedule)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"config.schedule: {exc}") from None
    m = cfg.model
    r = _require(m, "r", "config.model")
    if not isinstance(r, int) or r < 1:
        raise ConfigError("config.model.r: must be a positive integer")
    _number(_require(m, "eta", "config.model"), "config.model.eta", positive=True)
    _number(m.get("weight_decay", 0.0), "config.model.weight_decay", nonneg=True)
    if m.get("activation", "tanh") not in ("tanh", "relu", "identity", "linear"):
        raise ConfigError("config.model.activation: must be tanh, relu or identity")
    init = m.get("init", {"kind": "cold"})
    if not isinstance(init, dict) or init.get("kind", "cold") not in _INIT_KINDS:
        raise ConfigError(f"config.model.init.kind: must be one of {', '.join(_INIT_KINDS)}")
    if mode != "collapse":
        _number(_require(cfg.training, "tau", "config.training"), "config.training.tau",
                nonneg=True)
    for i, c in enumerate(cfg.training.get("checkpoints", []) or []):
        _number(c, f"config.training.checkpoints[{i}]", nonneg=True)
    if mode in ("sample", "compare", "collapse"):
        axes = _require(cfg.sampling, "axes", "config.sampling")
        _validate_axes(axes, "config.sampling.axes")
    if mode in ("sim-train", "compare") and cfg.target.get("kind") not in ("mixture", "power_law",
                                                                          "spectrum"):
        raise ConfigError("config.target.kind: simulation needs a target with an embedding")
    if mode == "collapse":
        c = cfg.collapse
        g = _require(c, "generations", "config.collapse")
        if not isinstance(g, int) or g < 1:
            raise ConfigError("config.collapse.generations: must be a positive integer")
        taus = _require(c, "tau", "config.collapse")
        taus = taus if isinstance(taus, list) else [taus] * g
        if len(taus) != g:
            raise ConfigError("config.collapse.tau: need one value per generation")
        for i, t in enumerate(taus):
            _number(t, f"config.collapse.tau[{i}]", positive=True)
        _validate_axes(c.get("pi_axes", analyze.COLLAPSE_PI_AXES), "config.collapse.pi_axes")
    return cfg


def _validate_axes(axes, path):
    if not isinstance(axes, (list, tuple)) or not axes:
        raise ConfigError(f"{path}: expected a list of [lo, hi, n] triples")
    for i, a in enumerate(axes):
        if not isinstance(a, (list, tuple)) or len(a) != 3 or not float(a[1]) > float(a[0]):
            raise ConfigError(f"{path}[{i}]: expected [lo, hi, n] with hi > lo")


def _validate_target(t, base_dir):
    kind = t.get("kind") if isinstance(t, dict) else None
    if kind == "mixture":
        _number(_require(t, "d", "config.target"), "config.target.d", positive=True)
        cents = _require(t, "centroids", "config.target")
        if not isinstance(cents, list) or not cents:
            raise ConfigError("config.target.centroids: expected a nonempty list")
    elif kind == "power_law":
        _number(_require(t, "d", "config.target"), "config.target.d", positive=True)
    elif kind == "spectrum":
        _require(t, "eigenvalues", "config.target")
    elif kind == "file":
        p = Path(base_dir) / _require(t, "path", "config.target")
        if not p.is_file():
            raise ConfigError(f"config.target.path: file {str(p)!r} does not exist")
    else:
        raise ConfigError("config.target.kind: must be mixture, power_law, spectrum or file")


# ---------------------------------------------------------------------------
# builders

def build_target(cfg: ExperimentConfig) -> model.MixtureTarget:
    t = dict(cfg.target)
    kind = t.pop("kind")
    if kind == "mixture":
        return model.embedded_mixture(int(t["d"]), t["centroids"], t.get("weights"),
                                      t.get("variance", 1.0), t.get("reference"))
    if kind == "power_law":
        return model.power_law_target(int(t["d"]), float(t.get("top", 3.0)),
                                      float(t.get("exponent", 1.0)), int(t.get("reference_dim", 2)))
    if kind == "spectrum":
        return model.spectrum_target(t["eigenvalues"], int(t.get("reference_dim", 2)))
    spec = yaml.safe_load((Path(cfg.base_dir) / t["path"]).read_text())
    return model.target_from_dict(spec, cfg.base_dir)


def build_schedule(cfg: ExperimentConfig) -> model.Schedule:
    return model.schedule_from_dict(cfg.schedule)


def build_hyperparams(cfg: ExperimentConfig) -> dynamics.Hyperparams:
    m = cfg.model
    return dynamics.Hyperparams(
        eta=float(m["eta"]), weight_decay=float(m.get("weight_decay", 0.0)),
        include_quadratic=bool(m.get("include_quadratic", True)),
        activation=m.get("activation", "tanh"), alternates=frozenset(m.get("alternates", ())))


def _init_spec(cfg, target):
    init = dict(cfg.model.get("init", {"kind": "cold"}))
    kind = init.pop("kind", "cold")
    if kind == "sampled":
        init.setdefault("d", target.embedding.d if target.embedding is not None else 1000)
        init.setdefault("seed", cfg.seed)
    return kind, init


def theory_init(cfg, target) -> dynamics.SummaryState:
    kind, init = _init_spec(cfg, target)
    return dynamics.init_summary(kind, target, int(cfg.model["r"]),
                                 float(cfg.model.get("b0", 0.0)), **init)


def _checkpoints(cfg) -> list[float]:
    tau = float(cfg.training.get("tau", 0.0))
    cps = cfg.training.get("checkpoints") or [tau]
    return sorted({float(c) for c in cps})


def _output_times(cfg):
    tau = float(cfg.training["tau"])
    every = float(cfg.training.get("record_every", 0.1))
    grid = np.round(np.arange(0.0, tau + 1e-9, every), 10).tolist()
    return sorted(set(grid) | set(_checkpoints(cfg)) | {tau})


# ---------------------------------------------------------------------------
# modes

class Run:
    """Holds the output directory and the list of written files."""

    def __init__(self, out: Path):
        self.out = out
        self.files: list[str] = []
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name


def _fmt(x) -> str:
    return repr(float(x))


def _write_table(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _theory_trajectory(cfg, target, schedule, hp, state0=None, progress=None):
    st0 = theory_init(cfg, target) if state0 is None else state0
    return dynamics.integrate(st0, target, schedule, hp, float(cfg.training["tau"]),
                              step=float(cfg.training.get("step", 0.02)),
                              output_times=_output_times(cfg), progress=progress)


def _state_at(traj, tau):
    i = int(np.argmin(np.abs(traj.times - tau)))
    return traj.states[i]


def _theory_density(state, schedule, hp, axes, n, seed, index=-1):
    zs = transport.sample_Z(state, schedule, n, seed, hp.activation, keep_paths=index != -1)
    law, _ = transport.project(state, zs, schedule, seed, index)
    return law, transport.density_on_grid(law, axes)


def _sim_params0(cfg, target):
    kind, init = _init_spec(cfg, target)
    init.pop("d", None)
    seed = init.pop("seed", cfg.seed)
    if kind == "explicit":
        raise ConfigError("config.model.init.kind: explicit states have no finite-d counterpart")
    return simulate.init_params(kind, target, int(cfg.model["r"]),
                                float(cfg.model.get("b0", 0.0)), seed=seed, **init)


def _sim_run(cfg, target, schedule, hp, checkpoints, progress=None):
    """Train finite-d in segments; returns (trajectory, {tau: params})."""
    p = _sim_params0(cfg, target)
    d = p.d
    every = simulate.default_measure_every(d, hp.eta)
    snaps, times, states = {}, [0.0], [simulate.measure_summary(p, target)]
    done = 0
    for k, tau in enumerate(checkpoints):
        n = simulate.steps_for(tau, d, hp.eta) - done
        p, tr = simulate.train(p, target, schedule, hp, max(n, 0), seed=(cfg.seed, k),
                               measure_every=every)
        offset = 2.0 * hp.eta * done / d
        times.extend((tr.times[1:] + offset).tolist())
        states.extend(tr.states[1:])
        done += max(n, 0)
        snaps[tau] = p.copy()
        if progress is not None:
            progress(k + 1, len(checkpoints))
    return dynamics.Trajectory(np.array(times), states, target), snaps


def _sim_density(params, schedule, hp, target, axes, n, seed, bw):
    X = simulate.generate_samples(params, schedule, n, seed, hp.activation)
    Y = simulate.project_samples(X, target.embedding.reference)
    return Y, analyze.kde(Y, bw, axes)


def run_theory_train(cfg, run: Run, log):
    target, schedule, hp = build_target(cfg), build_schedule(cfg), build_hyperparams(cfg)
    traj = _theory_trajectory(cfg, target, schedule, hp)
    traj.to_csv(run.path("theory_trajectory.csv"))
    last = traj.states[-1]
    info = {"final": _state_summary(last)}
    if cfg.model.get("activation") in ("identity", "linear") and target.n_clusters == 2:
        rho = float(target.centroid_gram[0, 0])
        fp = dynamics.linear_fixed_point(schedule, rho, hp.weight_decay)
        info["linear_fixed_point"] = {"M": fp.M, "Qbar": fp.Qbar, "note": fp.note}
    log(f"theory trajectory to tau={traj.times[-1]:g}")
    return info


def run_sim_train(cfg, run: Run, log):
    target, schedule, hp = build_target(cfg), build_schedule(cfg), build_hyperparams(cfg)
    traj, snaps = _sim_run(cfg, target, schedule, hp, [float(cfg.training["tau"])])
    traj.to_csv(run.path("sim_trajectory.csv"))
    p = snaps[float(cfg.training["tau"])]
    model.write_matrix(run.path("sim_weights.txt"), p.w)
    log(f"simulated {simulate.steps_for(float(cfg.training['tau']), p.d, hp.eta)} SGD steps")
    return {"final": _state_summary(traj.states[-1])}


def run_sample(cfg, run: Run, log):
    target, schedule, hp = build_target(cfg), build_schedule(cfg), build_hyperparams(cfg)
    traj = _theory_trajectory(cfg, target, schedule, hp)
    traj.to_csv(run.path("theory_trajectory.csv"))
    axes = cfg.sampling["axes"]
    n = int(cfg.sampling.get("n_samples", 4000))
    target_density = analyze.target_density(target, axes)
    target_density.to_csv(run.path("density_target.csv"))
    rows = []
    for k, tau in enumerate(_checkpoints(cfg)):
        st = _state_at(traj, tau)
        law, dens = _theory_density(st, schedule, hp, axes, n, (cfg.seed, 1, k))
        dens.to_csv(run.path(f"density_theory_tau{tau:g}.csv"))
        rows.append([tau, analyze.hellinger(dens, target_density), law.yvar,
                     analyze.top_direction_variance(law), st.b])
        log(f"tau={tau:g}: hellinger to target {rows[-1][1]:.4f}")
    _write_table(run.path("sample_summary.csv"),
                 ["tau", "hellinger_theory_target", "yvar", "top_variance", "b"], rows)
    bstar = dynamics.b_fixed_point(model.average_eigenvalue(target), schedule)
    return {"target_top_variance": analyze.target_top_variance(target),
            "b_fixed_point": bstar, "checkpoints": rows}


def run_compare(cfg, run: Run, log):
    target, schedule, hp = build_target(cfg), build_schedule(cfg), build_hyperparams(cfg)
    cps = _checkpoints(cfg)
    sim_traj, snaps = _sim_run(cfg, target, schedule, hp, cps)
    sim_traj.to_csv(run.path("sim_trajectory.csv"))
    # theory starts from the measured initial statistics of the simulated network
    st0 = sim_traj.states[0] if cfg.model.get("init", {}).get("kind") == "sampled" else None
    traj = _theory_trajectory(cfg, target, schedule, hp, st0)
    traj.to_csv(run.path("theory_trajectory.csv"))
    gaps = trajectory_gap(traj, sim_traj)
    axes = cfg.sampling["axes"]
    n = int(cfg.sampling.get("n_samples", 4000))
    bw = float(cfg.sampling.get("bandwidth_scale", analyze.DEFAULT_BANDWIDTH))
    target_density = analyze.target_density(target, axes)
    target_density.to_csv(run.path("density_target.csv"))
    rows = []
    for k, tau in enumerate(cps):
        _, th = _theory_density(_state_at(traj, tau), schedule, hp, axes, n, (cfg.seed, 1, k))
        _, sm = _sim_density(snaps[tau], schedule, hp, target, axes, n, (cfg.seed, 2, k), bw)
        th.to_csv(run.path(f"density_theory_tau{tau:g}.csv"))
        sm.to_csv(run.path(f"density_sim_tau{tau:g}.csv"))
        rows.append([tau, analyze.hellinger(th, target_density),
                     analyze.hellinger(sm, target_density), analyze.hellinger(th, sm)])
        log(f"tau={tau:g}: H(theory,target)={rows[-1][1]:.4f} H(theory,sim)={rows[-1][3]:.4f}")
    _write_table(run.path("hellinger.csv"),
                 ["tau", "hellinger_theory_target", "hellinger_sim_target",
                  "hellinger_theory_sim"], rows)
    report = {"sup_gap": gaps, "hellinger": rows}
    with open(run.path("report.json"), "w") as fh:
        json.dump(report, fh, indent=2)
    return report


def run_collapse(cfg, run: Run, log):
    target, schedule, hp = build_target(cfg), build_schedule(cfg), build_hyperparams(cfg)
    c = cfg.collapse
    g = int(c["generations"])
    taus = c["tau"] if isinstance(c["tau"], list) else [c["tau"]] * g
    pi_axes = tuple(tuple(a) for a in c.get("pi_axes", analyze.COLLAPSE_PI_AXES))
    pi_n = int(c.get("pi_samples", analyze.COLLAPSE_PI_SAMPLES))
    bw = float(c.get("bandwidth_scale", analyze.DEFAULT_BANDWIDTH))
    kind, init = _init_spec(cfg, target)
    init["kind"] = kind
    init.pop("seed", None)
    gens = analyze.collapse_chain(
        target, schedule, hp, int(cfg.model["r"]), [float(t) for t in taus], init,
        n_samples=pi_n, seed=cfg.seed, step=float(cfg.training.get("step", 0.05)),
        pi_axes=pi_axes, bandwidth_scale=bw,
        ambient_dim=target.embedding.d if target.embedding is not None else 784,
        progress=lambda i, n: log(f"generation {i}/{n} done"))
    axes = cfg.sampling["axes"]
    analyze.target_density(target, axes).to_csv(run.path("density_generation0.csv"))
    rows = [[0, analyze.target_top_variance(target), float("nan")]]
    for gen in gens:
        dens = transport.density_on_grid(gen.law, axes)
        dens.to_csv(run.path(f"density_generation{gen.index}.csv"))
        rows.append([gen.index, gen.top_variance, gen.state.b])
    _write_table(run.path("collapse_summary.csv"), ["generation", "top_variance", "b"], rows)
    return {"pi_discretization": {"samples": pi_n, "axes": [list(a) for a in pi_axes],
                                  "cells": [int(a[2]) for a in pi_axes], "bandwidth_scale": bw},
            "top_variance": [r[1] for r in rows]}


RUNNERS = {"theory-train": run_theory_train, "sim-train": run_sim_train, "sample": run_sample,
           "compare": run_compare, "collapse": run_collapse}


def trajectory_gap(theory: dynamics.Trajectory, sim: dynamics.Trajectory) -> dict:
    """Sup-norm gaps of M, Qbar and b at the simulated measurement times."""
    out = {}
    for name in ("M", "Qbar", "b"):
        def get(st):
            return np.atleast_1d(np.asarray(st.b if name == "b" else getattr(st, name)))
        gap = 0.0
        for t, st in zip(sim.times, sim.states):
            i = int(np.argmin(np.abs(theory.times - t)))
            if abs(theory.times[i] - t) < 1e-6:
                gap = max(gap, float(np.abs(get(st) - get(theory.states[i])).max()))
        out[name] = gap
    return out


def _state_summary(st) -> dict:
    return {"b": float(st.b), "M": np.asarray(st.M).tolist(), "Qbar": np.asarray(st.Qbar).tolist()}


# ---------------------------------------------------------------------------
# entry points

def inputs_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.raw, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def default_out(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUT_ENV, "runs")) / cfg.name


def run(cfg: ExperimentConfig, out=None, threads: int | None = None, log=print) -> dict:
    """Execute the configured mode; returns the manifest (also written to manifest.json)."""
    import scipy
    from threadpoolctl import threadpool_limits

    r = Run(Path(out) if out is not None else default_out(cfg))
    t0 = time.perf_counter()
    with threadpool_limits(limits=threads):
        result = RUNNERS[cfg.mode](cfg, r, log)
    wall = time.perf_counter() - t0
    manifest = {
        "spec_version": cfg.spec_version, "name": cfg.name, "mode": cfg.mode,
        "inputs_hash": inputs_hash(cfg), "seeds": cfg.seeds, "config": cfg.raw,
        "versions": {"daeflow": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "wall_time_s": wall, "budget_minutes": cfg.budget_minutes,
        "outputs": sorted(r.files), "result": result,
    }
    with open(r.out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, default=_json_default)
    return manifest


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    return str(o)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="daeflow", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)
    p_run = sub.add_parser("run", help="run a config file or preset")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--threads", type=int, default=None)
    sub.add_parser("presets", help="list shipped presets")
    p_val = sub.add_parser("validate", help="validate a config without running it")
    p_val.add_argument("config")
    args = ap.parse_args(argv)

    if args.cmd == "presets":
        for name, desc in list_presets():
            print(f"{name}\t{desc}")
        return 0
    try:
        overrides = {"seeds.run": args.seed} if getattr(args, "seed", None) is not None else None
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.cmd == "validate":
        print(f"{cfg.name}: ok ({cfg.mode})")
        return 0
    try:
        manifest = run(cfg, args.out, args.threads,
                       log=lambda msg: print(msg, file=sys.stderr, flush=True))
    except FloatingPointError as exc:
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        return 3
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({"outputs": manifest["outputs"], "wall_time_s": manifest["wall_time_s"]}))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
