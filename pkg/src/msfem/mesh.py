"""Uniform triangulation of the unit square identified as a torus.

An n-by-n grid of squares is split along the SW-NE diagonal into 2*n*n
triangles; opposite sides of the square are identified, so the mesh has no
boundary.  Triangles crossing the identification seam keep an unwrapped copy
of their corner coordinates, which makes every per-element geometric quantity
(areas, Jacobians, quadrature points) local and branch-free.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class PeriodicMesh:
    """Conforming triangulation of the unit torus.

    vertices holds representative coordinates in [0,1)^2; tri_coords holds the
    per-triangle unwrapped corner coordinates (shifted by integers across the
    seam).  Edges are identified structurally, not by vertex pairs, because on
    small tori two distinct edges can share the same endpoints.
    """

    n: int
    vertices: np.ndarray      # (n*n, 2)
    triangles: np.ndarray     # (2*n*n, 3) vertex ids
    tri_coords: np.ndarray    # (2*n*n, 3, 2) unwrapped corners
    edges: np.ndarray         # (3*n*n, 2) vertex id pairs
    edge_midpoints: np.ndarray  # (3*n*n, 2) representative midpoints in [0,1)^2
    tri_edges: np.ndarray     # (2*n*n, 3) edge ids, local order (01, 12, 20)
    areas: np.ndarray         # (2*n*n,)

    @property
    def h(self) -> float:
        """Grid spacing 1/n (the triangle legs; diameters are h*sqrt(2))."""
        return 1.0 / self.n

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def num_triangles(self) -> int:
        return self.triangles.shape[0]


def mesh_level_to_resolution(k: int) -> int:
    """Resolution ladder: level k >= 1 gives an n = 2**(k+1) grid (spacing 2**-(k+1))."""
    if k < 1:
        raise ValueError(f"mesh level must be >= 1, got {k}")
    return 2 ** (k + 1)


def build_uniform_periodic_mesh(n: int) -> PeriodicMesh:
    """Build the n x n structured torus mesh; n must be even and >= 2."""
    if n < 2:
        raise ValueError(f"grid resolution must be >= 2, got {n}")
    if n % 2 != 0:
        raise ValueError(f"grid resolution must be even, got {n}")

    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    ix = ii.ravel()
    iy = jj.ravel()
    # vertex id layout: v(i, j) = j*n + i
    vid = lambda i, j: (j % n) * n + (i % n)
    vertices = np.empty((n * n, 2))
    vertices[vid(ix, iy), 0] = ix / n
    vertices[vid(ix, iy), 1] = iy / n

    # edge id layout: horizontal H(i,j), vertical V(i,j), diagonal D(i,j)
    eh = lambda i, j: (j % n) * n + (i % n)
    ev = lambda i, j: n * n + (j % n) * n + (i % n)
    ed = lambda i, j: 2 * n * n + (j % n) * n + (i % n)

    nsq = n * n
    edges = np.empty((3 * nsq, 2), dtype=np.int64)
    edge_midpoints = np.empty((3 * nsq, 2))
    edges[eh(ix, iy), 0] = vid(ix, iy)
    edges[eh(ix, iy), 1] = vid(ix + 1, iy)
    edge_midpoints[eh(ix, iy), 0] = (ix + 0.5) / n
    edge_midpoints[eh(ix, iy), 1] = iy / n
    edges[ev(ix, iy), 0] = vid(ix, iy)
    edges[ev(ix, iy), 1] = vid(ix, iy + 1)
    edge_midpoints[ev(ix, iy), 0] = ix / n
    edge_midpoints[ev(ix, iy), 1] = (iy + 0.5) / n
    edges[ed(ix, iy), 0] = vid(ix, iy)
    edges[ed(ix, iy), 1] = vid(ix + 1, iy + 1)
    edge_midpoints[ed(ix, iy), 0] = (ix + 0.5) / n
    edge_midpoints[ed(ix, iy), 1] = (iy + 0.5) / n

    # cell (i,j): lower triangle (v00, v10, v11), upper triangle (v00, v11, v01);
    # both counterclockwise, sharing the SW-NE diagonal
    ntri = 2 * nsq
    triangles = np.empty((ntri, 3), dtype=np.int64)
    tri_coords = np.empty((ntri, 3, 2))
    tri_edges = np.empty((ntri, 3), dtype=np.int64)

    lo = 2 * (iy * n + ix)       # lower triangle index per cell
    up = lo + 1
    triangles[lo, 0] = vid(ix, iy)
    triangles[lo, 1] = vid(ix + 1, iy)
    triangles[lo, 2] = vid(ix + 1, iy + 1)
    triangles[up, 0] = vid(ix, iy)
    triangles[up, 1] = vid(ix + 1, iy + 1)
    triangles[up, 2] = vid(ix, iy + 1)

    corners = lambda i, j: np.stack([i / n, j / n], axis=-1)  # unwrapped
    tri_coords[lo, 0] = corners(ix, iy)
    tri_coords[lo, 1] = corners(ix + 1, iy)
    tri_coords[lo, 2] = corners(ix + 1, iy + 1)
    tri_coords[up, 0] = corners(ix, iy)
    tri_coords[up, 1] = corners(ix + 1, iy + 1)
    tri_coords[up, 2] = corners(ix, iy + 1)

    tri_edges[lo, 0] = eh(ix, iy)        # edge (0,1)
    tri_edges[lo, 1] = ev(ix + 1, iy)    # edge (1,2)
    tri_edges[lo, 2] = ed(ix, iy)        # edge (2,0)
    tri_edges[up, 0] = ed(ix, iy)
    tri_edges[up, 1] = eh(ix, iy + 1)
    tri_edges[up, 2] = ev(ix, iy)

    d1 = tri_coords[:, 1] - tri_coords[:, 0]
    d2 = tri_coords[:, 2] - tri_coords[:, 0]
    areas = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    return PeriodicMesh(n, vertices, triangles, tri_coords, edges,
                        edge_midpoints, tri_edges, areas)


def edge_triangle_counts(mesh: PeriodicMesh) -> np.ndarray:
    """How many triangles touch each edge (2 everywhere on a torus)."""
    counts = np.zeros(mesh.num_edges, dtype=np.int64)
    np.add.at(counts, mesh.tri_edges.ravel(), 1)
    return counts
