import json

import numpy as np
import pytest
import yaml

from daeflow import cli, dynamics


def preset_raw(name):
    return yaml.safe_load((cli.preset_dir() / f"{name}.yaml").read_text())


def write_config(tmp_path, raw, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(raw))
    return str(path)


def small_compare(tmp_path):
    raw = preset_raw("fig1_binary")
    raw["target"]["d"] = 200
    raw["training"].update(tau=0.4, step=0.05, checkpoints=[0.2, 0.4])
    raw["sampling"].update(n_samples=300, axes=[[-8.0, 8.0, 200]])
    raw["schedule"]["n_steps"] = 20
    return write_config(tmp_path, raw)


def test_presets_listed(capsys):
    names = [n for n, _ in cli.list_presets()]
    for required in ("fig1_binary", "fig1_trimodal", "figA_trimodal_relu", "mnist_standin",
                     "collapse", "linear_fixed_point"):
        assert required in names
    assert cli.main(["presets"]) == 0
    assert "linear_fixed_point" in capsys.readouterr().out


@pytest.mark.parametrize("name", [n for n, _ in cli.list_presets()])
def test_every_preset_validates(name):
    cfg = cli.load_config(name)
    assert cfg.name == name and cfg.description
    assert cli.main(["validate", name]) == 0


@pytest.mark.parametrize("edit, path", [
    (lambda r: r["model"].pop("eta"), "config.model.eta"),
    (lambda r: r["model"].update(eta=-1.0), "config.model.eta"),
    (lambda r: r["model"].update(activation="gelu"), "config.model.activation"),
    (lambda r: r["training"].pop("tau"), "config.training.tau"),
    (lambda r: r["training"].update(checkpoints=[1.0, "x"]), "config.training.checkpoints[1]"),
    (lambda r: r.update(mode="train"), "config.mode"),
    (lambda r: r["target"].update(kind="file", path="missing.yaml"), "config.target.path"),
    (lambda r: r["sampling"].update(axes=[[1.0, 0.0, 10]]), "config.sampling.axes[0]"),
])
def test_invalid_config_reports_field_path(tmp_path, capsys, edit, path):
    raw = preset_raw("fig1_binary")
    edit(raw)
    assert cli.main(["validate", write_config(tmp_path, raw)]) == 2
    assert capsys.readouterr().err.startswith(f"error: {path}")


def test_collapse_requires_generations(tmp_path):
    raw = preset_raw("collapse")
    raw["collapse"].pop("generations")
    with pytest.raises(cli.ConfigError, match="config.collapse.generations"):
        cli.validate_config(raw)


def test_unknown_preset():
    assert cli.main(["validate", "no_such_preset"]) == 2


def test_linear_preset_reaches_fixed_point(tmp_path):
    man = cli.run(cli.load_config("linear_fixed_point"), tmp_path, log=lambda m: None)
    fp = man["result"]["linear_fixed_point"]
    final = man["result"]["final"]
    assert abs(final["M"][0][0] - fp["M"]) < 1e-4
    assert abs(final["Qbar"][0][0] - fp["Qbar"]) < 1e-4
    tr = dynamics.read_trajectory_csv(tmp_path / "theory_trajectory.csv")
    assert tr["theta"][-1] == pytest.approx(60.0)


def test_compare_outputs_are_byte_identical(tmp_path):
    cfg = small_compare(tmp_path)
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert cli.main(["run", cfg, "--out", str(out), "--threads", "1"]) == 0
        outs.append(out)
    man = json.loads((outs[0] / "manifest.json").read_text())
    csvs = [f for f in man["outputs"] if f.endswith(".csv")]
    assert {"hellinger.csv", "density_theory_tau0.4.csv", "density_sim_tau0.2.csv"} <= set(csvs)
    for f in csvs:
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes(), f


def test_manifest_contents(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["run", small_compare(tmp_path), "--out", str(out), "--seed", "4"]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["seeds"] == {"run": 4}
    assert len(man["inputs_hash"]) == 64
    assert set(man["versions"]) >= {"daeflow", "python", "numpy", "scipy"}
    assert man["wall_time_s"] > 0
    rows = np.loadtxt(out / "hellinger.csv", delimiter=",", skiprows=1)
    assert rows.shape == (2, 4) and np.all((rows[:, 1:] >= 0) & (rows[:, 1:] <= 2))


def test_seed_override_changes_hash(tmp_path):
    a = cli.load_config("fig1_binary")
    b = cli.load_config("fig1_binary", {"seeds.run": 1})
    assert cli.inputs_hash(a) != cli.inputs_hash(b)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_status(tmp_path, capsys):
    raw = preset_raw("linear_fixed_point")
    raw["model"].update(eta=1.0, weight_decay=0.0)
    raw["model"]["init"] = {"kind": "explicit", "state": {"b": 0.0, "v": [0.0], "m": [[[30.0], [-30.0]]],
                                                         "q": [[[900.0]]], "g": [[[30.0]]]}}
    raw["training"].update(tau=50.0, step=2.0)
    code = cli.main(["run", write_config(tmp_path, raw), "--out", str(tmp_path / "o")])
    assert code == 3
    assert "numerical divergence" in capsys.readouterr().err


def test_default_output_root(monkeypatch, tmp_path):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path))
    assert cli.default_out(cli.load_config("fig1_binary")) == tmp_path / "fig1_binary"
