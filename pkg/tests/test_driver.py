import json

import numpy as np
import pytest

from msfem import io as msio
from msfem.driver import (ConfigError, ExperimentConfig, cli_converge, cli_run,
                          initial_data_for, load_config, main)
from msfem.mesh import build_uniform_periodic_mesh
from msfem.scheme import Discretization, initial_state


def write_config(tmp_path, doc):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


# ------------------------------------------------------------------- config

def test_config_expansion_and_roundtrip(tmp_path):
    path = write_config(tmp_path, {"preset": "experiment1", "t_final": 0.002,
                                   "tau": 1e-3, "level": 1})
    cfg = load_config(path)
    assert cfg.components == 3
    assert cfg.specific_volumes == [0.35, 0.35, 0.8]
    assert cfg.shear_viscosity == pytest.approx(1e-2)
    # round-trip: parsing the serialized form reproduces the config
    again = ExperimentConfig.from_dict(cfg.to_dict())
    assert again == cfg
    assert again.to_dict() == cfg.to_dict()


def test_config_rejects_unknown_key(tmp_path):
    path = write_config(tmp_path, {"preset": "experiment1", "viscosity": 1.0})
    with pytest.raises(ConfigError, match="viscosity"):
        load_config(path)


def test_config_rejects_preset_conflict(tmp_path):
    path = write_config(tmp_path, {"preset": "experiment1",
                                   "specific_volumes": [0.5, 0.3, 0.2]})
    with pytest.raises(ConfigError, match="specific_volumes"):
        load_config(path)


def test_config_rejects_bad_values(tmp_path):
    with pytest.raises(ConfigError, match="tau"):
        ExperimentConfig.from_dict({"preset": "experiment1", "tau": -1.0})
    with pytest.raises(ConfigError, match="t_final"):
        ExperimentConfig.from_dict({"preset": "experiment1", "tau": 1e-2,
                                    "t_final": 1e-3})
    with pytest.raises(ConfigError, match="specific_volumes"):
        ExperimentConfig.from_dict({"preset": "custom", "level": 1, "tau": 1e-3,
                                    "t_final": 1e-2, "components": 2,
                                    "specific_volumes": [0.5, 0.5, 0.5],
                                    "shear_viscosity": 1e-3})


def test_malformed_json_reports_parse_error(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not valid")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(path)


# ------------------------------------------------------------- initial data

def test_experiment1_frame_values():
    cfg = ExperimentConfig.from_dict({"preset": "experiment1"})
    data = initial_data_for(cfg)
    rho1 = data.densities[0]
    # inside the vertical band
    assert rho1(np.array([0.15]), np.array([0.5]))[0] == pytest.approx(1.1)
    # outside every band
    assert rho1(np.array([0.5]), np.array([0.5]))[0] == pytest.approx(0.2)
    # band overlap still gives the plateau value, not a double count
    assert rho1(np.array([0.15]), np.array([0.85]))[0] == pytest.approx(1.1)
    rho2 = data.densities[1]
    assert rho2(np.array([0.5]), np.array([0.6]))[0] == pytest.approx(1.1)
    assert rho2(np.array([0.9]), np.array([0.9]))[0] == pytest.approx(0.2)


def test_experiment1_velocity_formula():
    cfg = ExperimentConfig.from_dict({"preset": "experiment1"})
    data = initial_data_for(cfg)
    ux, uy = data.velocity(np.array([0.5]), np.array([0.25]))
    assert ux[0] == pytest.approx(-1.0)
    assert uy[0] == pytest.approx(0.0, abs=1e-15)


def test_experiment1_nodal_values_restricted_to_plateau_set():
    cfg = ExperimentConfig.from_dict({"preset": "experiment1", "level": 4})
    params = cfg.mixture_params()
    disc = Discretization(build_uniform_periodic_mesh(32), params)
    st = initial_state(initial_data_for(cfg), params, disc)
    vals = np.unique(np.round(st.rho[0], 12))
    assert set(vals) == {0.2, 1.1}


def test_experiment2_data_positive():
    cfg = ExperimentConfig.from_dict({"preset": "experiment2", "level": 3})
    params = cfg.mixture_params()
    disc = Discretization(build_uniform_periodic_mesh(16), params)
    st = initial_state(initial_data_for(cfg), params, disc)
    assert st.rho.min() > 0.0
    assert params.mobility_scale == pytest.approx(0.1)


# ----------------------------------------------------------------- cli: run

def test_cli_run_writes_outputs_and_passes(tmp_path):
    cfg = ExperimentConfig.from_dict({
        "preset": "convergence2", "level": 1, "tau": 1e-3, "t_final": 3e-3,
        "out_dir": str(tmp_path / "out"), "snapshot_times": [0.0, 3e-3],
        "vtu": True})
    rc = cli_run(cfg)
    assert rc == 0
    out = tmp_path / "out"
    diag = msio.read_diagnostics_csv(out / "diagnostics.csv")
    assert diag["t"].shape == (3,)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "ok"
    assert all(c["pass"] for c in summary["checks"].values())
    assert (out / "config.json").exists()
    assert (out / "fields_0_p1.csv").exists()
    assert (out / "fields_0.vtu").exists()
    assert (out / "fields_0.003_p1.csv").exists()


def test_cli_run_single_step(tmp_path):
    cfg = ExperimentConfig.from_dict({
        "preset": "convergence2", "level": 1, "tau": 1e-3, "t_final": 1e-3,
        "out_dir": str(tmp_path / "single")})
    assert cli_run(cfg) == 0
    diag = msio.read_diagnostics_csv(tmp_path / "single" / "diagnostics.csv")
    assert diag["t"].shape == (1,)


def test_main_rejects_malformed_config(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"preset": "experiment1", "bogus_key": 1}))
    rc = main(["run", "--config", str(path)])
    assert rc != 0
    assert "bogus_key" in capsys.readouterr().err


def test_main_exp1_smoke(tmp_path):
    rc = main(["exp1", "--level", "1", "--tau", "1e-3", "--tfinal", "0.002",
               "--out", str(tmp_path / "e1")])
    assert rc == 0
    summary = json.loads((tmp_path / "e1" / "summary.json").read_text())
    assert summary["status"] == "ok"


# ------------------------------------------------------------ cli: converge

def test_cli_converge_writes_table(tmp_path):
    cfg = ExperimentConfig.from_dict({
        "preset": "convergence2", "tau": 2e-3, "t_final": 6e-3,
        "out_dir": str(tmp_path / "conv")})
    rc = cli_converge(cfg, levels=[1], ref_level=2)
    assert rc == 0
    table = (tmp_path / "conv" / "eoc_table.csv").read_text().splitlines()
    assert table[0].startswith("level,err_rho,eoc_rho")
    assert len(table) == 2
    # single level: errors present, eoc undefined
    cells = table[1].split(",")
    assert float(cells[1]) > 0.0
    assert cells[2] == ""
    assert (tmp_path / "conv" / "diagnostics_level1.csv").exists()
    assert (tmp_path / "conv" / "diagnostics_level2.csv").exists()


def test_cli_converge_rejects_bad_ladder(tmp_path):
    cfg = ExperimentConfig.from_dict({
        "preset": "convergence2", "tau": 1e-3, "t_final": 2e-3,
        "out_dir": str(tmp_path / "bad")})
    assert cli_converge(cfg, levels=[3], ref_level=3) == 2


# -------------------------------------------------------------------- fields

def test_write_fields_roundtrip_bitwise(tmp_path):
    cfg = ExperimentConfig.from_dict({"preset": "experiment1", "level": 1})
    params = cfg.mixture_params()
    disc = Discretization(build_uniform_periodic_mesh(4), params)
    st = initial_state(initial_data_for(cfg), params, disc)
    st.p = np.random.default_rng(0).standard_normal(disc.n1)
    msio.write_fields(st, disc, tmp_path, tag="t0", vtu=True)
    p1 = msio.read_fields_csv(tmp_path / "fields_t0_p1.csv")
    assert np.array_equal(p1["rho_1"], st.rho[0])
    assert np.array_equal(p1["p"], st.p)
    assert np.array_equal(p1["rho"], st.rho.sum(axis=0))
    p2 = msio.read_fields_csv(tmp_path / "fields_t0_p2.csv")
    assert np.array_equal(p2["u_x"], st.u[:disc.n2])
    assert np.array_equal(p2["u_y"], st.u[disc.n2:])
    vtu = (tmp_path / "fields_t0.vtu").read_text()
    assert "UnstructuredGrid" in vtu and 'Name="rho_1"' in vtu


def test_uniform_state_gives_constant_columns(tmp_path):
    from test_scheme import make_disc, uniform_steady_state
    disc = make_disc(n=2)
    st = uniform_steady_state(disc)
    msio.write_fields(st, disc, tmp_path, tag="u")
    p1 = msio.read_fields_csv(tmp_path / "fields_u_p1.csv")
    assert np.ptp(p1["rho_1"]) == 0.0
    assert np.ptp(p1["p"]) == 0.0


def test_mesh_export(tmp_path):
    mesh = build_uniform_periodic_mesh(2)
    msio.write_mesh_csv(mesh, tmp_path / "nodes.csv", tmp_path / "elems.csv")
    msio.write_mesh_vtu(mesh, tmp_path / "mesh.vtu")
    nodes = (tmp_path / "nodes.csv").read_text().splitlines()
    # periodic vertices are duplicated on export: a 2x2 torus unrolls to a
    # 3x3 grid of corner points
    assert len(nodes) == 1 + 9
    elems = (tmp_path / "elems.csv").read_text().splitlines()
    assert len(elems) == 1 + mesh.num_triangles
    vtu = (tmp_path / "mesh.vtu").read_text()
    import re
    npts = int(re.search(r'NumberOfPoints="(\d+)"', vtu).group(1))
    assert npts == 9
