"""Experiment presets, JSON configuration, and the command-line interface.

Subcommands: `run` (config-driven simulation), `exp1`/`exp2` (the two
three-component scenarios with desk-scale defaults), and `converge` (the
two-component refinement ladder against a finer reference).  Every run
directory receives the fully expanded config, a per-step diagnostics CSV,
and a machine-readable summary with a PASS/FAIL verdict per monitored
invariant.
"""

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from msfem import io as msio
from msfem.diagnostics import ErrorReport, error_norms
from msfem.mesh import build_uniform_periodic_mesh, mesh_level_to_resolution
from msfem.model import MixtureParams
from msfem.scheme import (Discretization, InitialData, NewtonError,
                          SolverConfig, initial_state, run)


class ConfigError(ValueError):
    """Configuration document is malformed; the message names the bad key."""


PRESET_DEFAULTS = {
    "convergence2": dict(components=2, specific_volumes=[0.3, 0.7],
                         shear_viscosity=1e-3, bulk_viscosity=0.0,
                         mobility_scale=1.0, level=3, tau=1e-3, t_final=0.1),
    "experiment1": dict(components=3, specific_volumes=[0.35, 0.35, 0.8],
                        shear_viscosity=1e-2, bulk_viscosity=0.0,
                        mobility_scale=1.0, level=4, tau=1e-3, t_final=0.05),
    "experiment2": dict(components=3, specific_volumes=[0.35, 0.65, 0.5],
                        shear_viscosity=1e-1, bulk_viscosity=0.0,
                        mobility_scale=0.1, level=4, tau=1e-3, t_final=0.05),
}

# fields a preset pins; overriding them in a config is a conflict
PRESET_LOCKED = {
    "experiment1": ("components", "specific_volumes"),
    "experiment2": ("components", "specific_volumes"),
    "convergence2": ("components",),
}

CONFIG_KEYS = ("preset", "level", "tau", "t_final", "components",
               "specific_volumes", "shear_viscosity", "bulk_viscosity",
               "mobility_scale", "snapshot_times", "out_dir", "vtu",
               "newton_tol", "newton_max_iter")


@dataclass
class ExperimentConfig:
    preset: str
    level: int
    tau: float
    t_final: float
    components: int
    specific_volumes: list
    shear_viscosity: float
    bulk_viscosity: float = 0.0
    mobility_scale: float = 1.0
    snapshot_times: list = field(default_factory=list)
    out_dir: str = "out"
    vtu: bool = False
    newton_tol: float = 1e-9
    newton_max_iter: int = 25

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        for key in doc:
            if key not in CONFIG_KEYS:
                raise ConfigError(f"unknown config key: {key!r}")
        preset = doc.get("preset", "custom")
        if preset != "custom" and preset not in PRESET_DEFAULTS:
            raise ConfigError(f"unknown value for key 'preset': {preset!r}")
        merged = dict(PRESET_DEFAULTS.get(preset, {}))
        for key in PRESET_LOCKED.get(preset, ()):
            if key in doc and doc[key] != merged[key]:
                raise ConfigError(
                    f"key {key!r} conflicts with preset {preset!r}")
        merged.update(doc)
        merged["preset"] = preset
        missing = [k for k in ("level", "tau", "t_final", "components",
                               "specific_volumes", "shear_viscosity")
                   if k not in merged]
        if missing:
            raise ConfigError(f"missing config key: {missing[0]!r}")
        try:
            cfg = cls(**merged)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    def validate(self):
        if self.level < 1:
            raise ConfigError("key 'level': mesh level must be >= 1")
        if self.tau <= 0:
            raise ConfigError("key 'tau': time step must be positive")
        if self.t_final < self.tau:
            raise ConfigError("key 't_final': must be at least one step")
        if len(self.specific_volumes) != self.components:
            raise ConfigError("key 'specific_volumes': length must equal 'components'")
        try:
            self.mixture_params()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.preset in ("experiment1", "experiment2") and self.components != 3:
            raise ConfigError("key 'components': preset requires 3 components")

    def mixture_params(self) -> MixtureParams:
        return MixtureParams(self.components, list(self.specific_volumes),
                             shear_viscosity=self.shear_viscosity,
                             bulk_viscosity=self.bulk_viscosity,
                             mobility_scale=self.mobility_scale)

    def solver_config(self) -> SolverConfig:
        return SolverConfig(tau=self.tau, t_final=self.t_final,
                            newton_tol=self.newton_tol,
                            newton_max_iter=self.newton_max_iter)

    def to_dict(self) -> dict:
        return {
            "preset": self.preset, "level": self.level, "tau": self.tau,
            "t_final": self.t_final, "components": self.components,
            "specific_volumes": list(self.specific_volumes),
            "shear_viscosity": self.shear_viscosity,
            "bulk_viscosity": self.bulk_viscosity,
            "mobility_scale": self.mobility_scale,
            "snapshot_times": list(self.snapshot_times),
            "out_dir": self.out_dir, "vtu": self.vtu,
            "newton_tol": self.newton_tol,
            "newton_max_iter": self.newton_max_iter,
        }


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# initial data for the presets

def _frame_band(t):
    return ((t >= 0.1) & (t < 0.2)) | ((t > 0.8) & (t <= 0.9))


def _standard_velocity(x, y):
    return (-np.sin(np.pi * x) ** 2 * np.sin(2 * np.pi * y),
            np.sin(2 * np.pi * x) * np.sin(np.pi * y) ** 2)


def initial_data_for(cfg: ExperimentConfig) -> InitialData:
    if cfg.preset == "convergence2" or (cfg.preset == "custom" and cfg.components == 2):
        return InitialData(
            densities=[lambda x, y: 1.0 + 0.8 * np.sin(4 * np.pi * x)
                       * np.sin(2 * np.pi * y)],
            velocity=_standard_velocity)
    if cfg.preset == "experiment1":
        return InitialData(
            densities=[
                lambda x, y: 0.2 + 0.9 * (_frame_band(x) | _frame_band(y)),
                lambda x, y: 0.2 + 0.9 * ((x - 0.5) ** 2 + (y - 0.5) ** 2
                                          <= 0.25 ** 2),
            ],
            velocity=_standard_velocity)
    if cfg.preset == "experiment2":
        def bubble(cx, cy):
            return lambda x, y: 0.5 + 0.49999 * np.tanh(
                (np.sqrt((x - cx) ** 2 + (y - cy) ** 2) - 0.25)
                / (1e-2 * np.sqrt(2.0)))
        return InitialData(densities=[bubble(0.4, 0.4), bubble(0.6, 0.6)],
                           velocity=_standard_velocity)
    raise ConfigError(f"no initial data defined for preset {cfg.preset!r} "
                      f"with {cfg.components} components")


# ---------------------------------------------------------------------------
# invariant verdicts

def invariant_summary(records, initial_masses, initial_energy, tau: float,
                      params: MixtureParams, equal_volumes: bool) -> dict:
    """PASS/FAIL per monitored identity, with the worst observed value."""
    masses = np.array([r.partial_masses for r in records])
    all_masses = np.vstack([initial_masses, masses])
    drift = np.abs(np.diff(all_masses, axis=0)) / np.abs(initial_masses)
    energies = np.array([r.e_total for r in records])
    all_e = np.concatenate([[initial_energy], energies])
    e_rise = np.diff(all_e) - 1e-9 * (1.0 + np.abs(all_e[:-1]))
    balance = np.array([r.energy_balance_residual for r in records])
    balance_tol = 1e-7 * (1.0 + np.abs(all_e[:-1]) / tau)

    checks = {
        "partial_mass_drift": {
            "worst": float(drift.max()), "tolerance": 1e-11,
            "pass": bool(drift.max() <= 1e-11)},
        "pointwise_constraint": {
            "worst": float(max(r.constraint_max for r in records)),
            "tolerance": 1e-10,
            "pass": bool(max(r.constraint_max for r in records) <= 1e-10)},
        "energy_monotone": {
            "worst": float(e_rise.max()), "tolerance": 0.0,
            "pass": bool(e_rise.max() <= 0.0)},
        "numerical_dissipation_nonnegative": {
            "worst": float(min(r.d_num for r in records)), "tolerance": -1e-12,
            "pass": bool(min(r.d_num for r in records) >= -1e-12)},
        "viscous_dissipation_nonnegative": {
            "worst": float(min(r.visc_dissipation for r in records)),
            "tolerance": -1e-12,
            "pass": bool(min(r.visc_dissipation for r in records) >= -1e-12)},
        "diffusive_dissipation_nonnegative": {
            "worst": float(min(r.diff_dissipation for r in records)),
            "tolerance": -1e-12,
            "pass": bool(min(r.diff_dissipation for r in records) >= -1e-12)},
        "energy_balance": {
            "worst": float(np.max(np.abs(balance) / balance_tol)),
            "tolerance": 1.0,
            "pass": bool(np.all(np.abs(balance) <= balance_tol))},
        "positivity_monitor": {
            "worst": float(min(r.min_nodal_density for r in records)),
            "tolerance": 0.0,
            "pass": bool(min(r.min_nodal_density for r in records) > 0.0)},
    }
    if equal_volumes:
        worst = float(max(r.div_defect for r in records))
        checks["divergence_defect"] = {
            "worst": worst, "tolerance": 1e-10, "pass": bool(worst <= 1e-10)}
    return checks


# ---------------------------------------------------------------------------
# commands

def _thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("MSFEM_THREADS", "1")))
    except ValueError:
        return 1


def cli_run(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2,
                                                sort_keys=True) + "\n")

    params = cfg.mixture_params()
    mesh = build_uniform_periodic_mesh(mesh_level_to_resolution(cfg.level))
    disc = Discretization(mesh, params)
    data = initial_data_for(cfg)
    state0 = initial_state(data, params, disc)
    solver_cfg = cfg.solver_config()

    snapshot_steps = sorted({
        int(round(t / cfg.tau)) for t in cfg.snapshot_times
        if -0.5 * cfg.tau <= t <= cfg.t_final + 0.5 * cfg.tau})
    if 0 in snapshot_steps:
        msio.write_fields(state0, disc, out, tag="0", vtu=cfg.vtu)

    initial_masses = disc.bvec @ state0.rho.T
    from msfem.diagnostics import total_energy
    e_kin0, e_int0 = total_energy(state0, disc)

    records = []
    step_counter = {"k": 0}
    writer = msio.DiagnosticsWriter(out / "diagnostics.csv", params.N)

    def observer(state, record):
        step_counter["k"] += 1
        records.append(record)
        writer(record)
        if step_counter["k"] in snapshot_steps:
            msio.write_fields(state, disc, out,
                              tag=f"{record.t:.6g}", vtu=cfg.vtu)

    try:
        run(state0, solver_cfg, disc, observer=observer)
    except NewtonError as err:
        writer.close()
        msio.write_summary_json(out / "summary.json", {
            "status": "newton_failure", "step": err.step,
            "residual_norm": err.residual_norm, "config": cfg.to_dict()})
        print(f"newton failure at step {err.step}: {err}", file=sys.stderr)
        return 2
    writer.close()

    equal_volumes = bool(np.ptp(params.specific_volumes) == 0.0)
    checks = invariant_summary(records, initial_masses, e_kin0 + e_int0,
                               cfg.tau, params, equal_volumes)
    ok = all(c["pass"] for c in checks.values())
    msio.write_summary_json(out / "summary.json", {
        "status": "ok" if ok else "invariant_violation",
        "checks": checks,
        "steps": len(records),
        "final_time": records[-1].t if records else 0.0,
        "config": cfg.to_dict(),
    })
    for name, c in checks.items():
        print(f"{name}: {'PASS' if c['pass'] else 'FAIL'} "
              f"(worst {c['worst']:.3e}, tol {c['tolerance']:.3e})")
    return 0 if ok else 1


def _converge_level(args) -> tuple[int, object]:
    """Run one ladder level; module-level so a process pool can pickle it."""
    level, cfg_doc = args
    cfg = ExperimentConfig.from_dict(cfg_doc)
    params = cfg.mixture_params()
    mesh = build_uniform_periodic_mesh(mesh_level_to_resolution(level))
    disc = Discretization(mesh, params)
    state0 = initial_state(initial_data_for(cfg), params, disc)
    traj = run(state0, cfg.solver_config(), disc, store_states=True)
    return level, traj


def cli_converge(cfg: ExperimentConfig, levels: list[int], ref_level: int) -> int:
    if any(k >= ref_level for k in levels):
        print("all ladder levels must lie below the reference level",
              file=sys.stderr)
        return 2
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2,
                                                sort_keys=True) + "\n")

    all_levels = list(levels) + [ref_level]
    jobs = [(k, cfg.to_dict()) for k in all_levels]
    workers = min(_thread_cap(), len(jobs))
    results = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for level, traj in pool.map(_converge_level, jobs):
                results[level] = traj
    else:
        for job in jobs:
            level, traj = _converge_level(job)
            results[level] = traj

    params = cfg.mixture_params()
    discs = {k: Discretization(
        build_uniform_periodic_mesh(mesh_level_to_resolution(k)), params)
        for k in all_levels}
    for k in all_levels:
        msio.write_diagnostics_csv(out / f"diagnostics_level{k}.csv",
                                   results[k].diagnostics, params.N)

    report = ErrorReport(levels=list(levels),
                         spacings=[1.0 / mesh_level_to_resolution(k)
                                   for k in levels],
                         err_rho=[], err_mu=[], err_u=[], err_p=[])
    for k in levels:
        errs = error_norms(results[k], results[ref_level], discs[k],
                           discs[ref_level], cfg.tau)
        report.err_rho.append(errs["err_rho"])
        report.err_mu.append(errs["err_mu"])
        report.err_u.append(errs["err_u"])
        report.err_p.append(errs["err_p"])
    report.finalize()
    msio.write_eoc_csv(out / "eoc_table.csv", report)

    header = f"{'level':>5} {'err_rho':>12} {'eoc':>6} {'err_mu':>12} {'eoc':>6} " \
             f"{'err_u':>12} {'eoc':>6} {'err_p':>12} {'eoc':>6}"
    print(header)
    for i, k in enumerate(levels):
        def fmt(v):
            return "    --" if v is None else f"{v:6.2f}"
        print(f"{k:>5} {report.err_rho[i]:12.4e} {fmt(report.eoc_rho[i])} "
              f"{report.err_mu[i]:12.4e} {fmt(report.eoc_mu[i])} "
              f"{report.err_u[i]:12.4e} {fmt(report.eoc_u[i])} "
              f"{report.err_p[i]:12.4e} {fmt(report.eoc_p[i])}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def _add_common(p):
    p.add_argument("--level", type=int, help="mesh level k (grid n = 2^(k+1))")
    p.add_argument("--tau", type=float, help="time step")
    p.add_argument("--tfinal", type=float, help="final time")
    p.add_argument("--out", help="output directory")
    p.add_argument("--snapshots", help="comma-separated snapshot times")
    p.add_argument("--vtu", action="store_true", help="also write VTU snapshots")


def _apply_overrides(doc: dict, args) -> dict:
    if args.level is not None:
        doc["level"] = args.level
    if args.tau is not None:
        doc["tau"] = args.tau
    if args.tfinal is not None:
        doc["t_final"] = args.tfinal
    if args.out is not None:
        doc["out_dir"] = args.out
    if args.snapshots:
        try:
            doc["snapshot_times"] = [float(s) for s in args.snapshots.split(",")]
        except ValueError as exc:
            raise ConfigError(f"key 'snapshot_times': {exc}") from exc
    if args.vtu:
        doc["vtu"] = True
    return doc


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="msfem",
        description="Structure-preserving mixture-flow solver on the periodic "
                    "unit square")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate from a JSON config")
    p_run.add_argument("--config", required=True)
    _add_common(p_run)

    for name in ("exp1", "exp2"):
        p = sub.add_parser(name, help=f"three-component experiment "
                                      f"{'I' if name == 'exp1' else 'II'}")
        _add_common(p)

    p_conv = sub.add_parser("converge", help="refinement ladder and EOC table")
    p_conv.add_argument("--config")
    p_conv.add_argument("--levels", default="1,2,3",
                        help="comma-separated ladder levels")
    p_conv.add_argument("--ref", type=int, default=4, help="reference level")
    p_conv.add_argument("--volumes", help="comma-separated specific volumes")
    _add_common(p_conv)

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            cfg = load_config(args.config)
            doc = _apply_overrides(cfg.to_dict(), args)
            return cli_run(ExperimentConfig.from_dict(doc))
        if args.command in ("exp1", "exp2"):
            doc = {"preset": "experiment1" if args.command == "exp1"
                   else "experiment2"}
            doc = _apply_overrides(doc, args)
            return cli_run(ExperimentConfig.from_dict(doc))
        if args.command == "converge":
            doc = json.loads(Path(args.config).read_text()) if args.config \
                else {"preset": "convergence2"}
            if args.volumes:
                doc["specific_volumes"] = [float(v)
                                           for v in args.volumes.split(",")]
            doc = _apply_overrides(doc, args)
            cfg = ExperimentConfig.from_dict(doc)
            levels = [int(s) for s in args.levels.split(",")]
            return cli_converge(cfg, levels, args.ref)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NewtonError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
