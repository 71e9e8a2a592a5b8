"""Output writers: diagnostics CSV, field snapshots (CSV/VTU), mesh export.

Floats are written with 17 significant digits so every value round-trips
bitwise through the text files; invariant audits on the CSV output are then
as good as in-memory checks.  VTU files are plain-text XML unstructured
grids with the periodic vertices duplicated, so standard viewers render the
seam triangles correctly.
"""

import csv
import json
from pathlib import Path

import numpy as np

from msfem.diagnostics import ErrorReport, StepDiagnostics
from msfem.mesh import PeriodicMesh
from msfem.scheme import Discretization, State


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def diagnostics_header(N: int) -> list[str]:
    cols = ["t"]
    cols += [f"mass_{i + 1}" for i in range(N)]
    cols += ["constraint_max", "min_nodal_density", "e_kin", "e_int", "e_total",
             "d_num", "visc_dissipation", "diff_dissipation",
             "energy_balance_residual", "e_rel", "div_defect"]
    return cols


def diagnostics_row(d: StepDiagnostics) -> list[str]:
    vals = [d.t, *d.partial_masses, d.constraint_max, d.min_nodal_density,
            d.e_kin, d.e_int, d.e_total, d.d_num, d.visc_dissipation,
            d.diff_dissipation, d.energy_balance_residual, d.e_rel, d.div_defect]
    return [_fmt(float(v)) for v in vals]


class DiagnosticsWriter:
    """Streams one CSV row per accepted step."""

    def __init__(self, path, N: int):
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(diagnostics_header(N))

    def __call__(self, d: StepDiagnostics):
        self._writer.writerow(diagnostics_row(d))

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_diagnostics_csv(path, records: list[StepDiagnostics], N: int):
    with DiagnosticsWriter(path, N) as w:
        for d in records:
            w(d)


def read_diagnostics_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    data = np.array(rows) if rows else np.zeros((0, len(header)))
    return {name: data[:, k] for k, name in enumerate(header)}


# ---------------------------------------------------------------------------
# field snapshots

def write_fields(state: State, disc: Discretization, out_dir, tag: str,
                 vtu: bool = False) -> list[Path]:
    """Write nodal snapshots: P1 fields and velocity CSVs, optionally a VTU."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    N = disc.N
    files = []

    p1_path = out_dir / f"fields_{tag}_p1.csv"
    with open(p1_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"] + [f"rho_{i + 1}" for i in range(N)] + ["rho", "p"])
        coords = disc.ctx.p1.dof_coords
        total = state.rho.sum(axis=0)
        for a in range(disc.n1):
            row = [coords[a, 0], coords[a, 1], *state.rho[:, a], total[a], state.p[a]]
            w.writerow([_fmt(float(v)) for v in row])
    files.append(p1_path)

    p2_path = out_dir / f"fields_{tag}_p2.csv"
    with open(p2_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "u_x", "u_y"])
        coords = disc.ctx.p2.dof_coords
        for a in range(disc.n2):
            row = [coords[a, 0], coords[a, 1], state.u[a], state.u[disc.n2 + a]]
            w.writerow([_fmt(float(v)) for v in row])
    files.append(p2_path)

    if vtu:
        vtu_path = out_dir / f"fields_{tag}.vtu"
        point_data = {f"rho_{i + 1}": state.rho[i] for i in range(N)}
        point_data["rho"] = state.rho.sum(axis=0)
        point_data["p"] = state.p
        vectors = {"u": np.stack([state.u[:disc.n1], state.u[disc.n2:disc.n2 + disc.n1]],
                                 axis=1)}
        _write_vtu(vtu_path, disc.mesh, point_data, vectors)
        files.append(vtu_path)
    return files


def read_fields_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    data = np.array(rows)
    return {name: data[:, k] for k, name in enumerate(header)}


# ---------------------------------------------------------------------------
# mesh export

def write_mesh_csv(mesh: PeriodicMesh, nodes_path, elements_path):
    """Node/element tables with periodic vertices duplicated across the seam.

    Each node row carries the id of the torus vertex it represents, so the
    identification is recoverable from the files.
    """
    points, conn, vids = _duplicated_points(mesh)
    with open(nodes_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "vertex", "x", "y"])
        for a, ((x, y), v) in enumerate(zip(points, vids)):
            w.writerow([a, v, _fmt(x), _fmt(y)])
    with open(elements_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "v0", "v1", "v2"])
        for e, tri in enumerate(conn):
            w.writerow([e, *tri])


def write_mesh_vtu(mesh: PeriodicMesh, path):
    _write_vtu(path, mesh, {}, {})


def _duplicated_points(mesh: PeriodicMesh):
    """Unwrapped vertex copies: one point per distinct (vertex, integer shift).

    Seam triangles reference shifted copies so no cell straddles the domain.
    Returns (points (m,2), connectivity (ntri,3), vertex ids of each point).
    """
    rep = mesh.vertices[mesh.triangles]
    shifts = np.round(mesh.tri_coords - rep).astype(np.int64)
    vids = mesh.triangles.ravel()
    keys = np.stack([vids, shifts[..., 0].ravel(), shifts[..., 1].ravel()], axis=1)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    points = mesh.vertices[uniq[:, 0]] + uniq[:, 1:]
    conn = inverse.reshape(mesh.num_triangles, 3)
    return points, conn, uniq[:, 0]


def _write_vtu(path, mesh: PeriodicMesh, point_data: dict, vector_data: dict):
    points, conn, vids = _duplicated_points(mesh)
    npts = points.shape[0]
    ncell = conn.shape[0]
    lines = []
    lines.append('<?xml version="1.0"?>')
    lines.append('<VTKFile type="UnstructuredGrid" version="0.1" byte_order="LittleEndian">')
    lines.append("  <UnstructuredGrid>")
    lines.append(f'    <Piece NumberOfPoints="{npts}" NumberOfCells="{ncell}">')
    lines.append("      <Points>")
    lines.append('        <DataArray type="Float64" NumberOfComponents="3" format="ascii">')
    for x, y in points:
        lines.append(f"          {_fmt(x)} {_fmt(y)} 0")
    lines.append("        </DataArray>")
    lines.append("      </Points>")
    lines.append("      <Cells>")
    lines.append('        <DataArray type="Int64" Name="connectivity" format="ascii">')
    for tri in conn:
        lines.append(f"          {tri[0]} {tri[1]} {tri[2]}")
    lines.append("        </DataArray>")
    lines.append('        <DataArray type="Int64" Name="offsets" format="ascii">')
    lines.append("          " + " ".join(str(3 * (k + 1)) for k in range(ncell)))
    lines.append("        </DataArray>")
    lines.append('        <DataArray type="UInt8" Name="types" format="ascii">')
    lines.append("          " + " ".join("5" for _ in range(ncell)))
    lines.append("        </DataArray>")
    lines.append("      </Cells>")
    if point_data or vector_data:
        lines.append("      <PointData>")
        for name, vals in point_data.items():
            lines.append(f'        <DataArray type="Float64" Name="{name}" format="ascii">')
            lines.append("          " + " ".join(_fmt(float(v)) for v in vals[vids]))
            lines.append("        </DataArray>")
        for name, vecs in vector_data.items():
            lines.append(f'        <DataArray type="Float64" Name="{name}" '
                         'NumberOfComponents="3" format="ascii">')
            for v in vecs[vids]:
                lines.append(f"          {_fmt(float(v[0]))} {_fmt(float(v[1]))} 0")
            lines.append("        </DataArray>")
        lines.append("      </PointData>")
    lines.append("    </Piece>")
    lines.append("  </UnstructuredGrid>")
    lines.append("</VTKFile>")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# convergence table and run summary

def write_eoc_csv(path, report: ErrorReport):
    def cell(v):
        return "" if v is None else _fmt(float(v))

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "err_rho", "eoc_rho", "err_mu", "eoc_mu",
                    "err_u", "eoc_u", "err_p", "eoc_p"])
        for k in range(len(report.levels)):
            w.writerow([report.levels[k],
                        _fmt(report.err_rho[k]), cell(report.eoc_rho[k]),
                        _fmt(report.err_mu[k]), cell(report.eoc_mu[k]),
                        _fmt(report.err_u[k]), cell(report.eoc_u[k]),
                        _fmt(report.err_p[k]), cell(report.eoc_p[k])])


def write_summary_json(path, summary: dict):
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
