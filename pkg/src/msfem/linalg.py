"""Sparse matrices in CSR form, triplet assembly, and direct LU solves.

Matrices are assembled from (row, col, value) triplets and stored compressed.
Linear systems go through a dense LAPACK factorization below a size cutoff
and through SuperLU above it; both are wrapped behind :class:`LuFactors` so a
factorization can be reused for several right-hand sides.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

# Below this many unknowns a dense factorization beats the sparse machinery.
DENSE_CUTOFF = 2000

# A pivot this small relative to the largest entry of U flags rank deficiency.
PIVOT_RTOL = 1e-14


class SingularMatrixError(Exception):
    """Raised when LU factorization meets a pivot that is numerically zero."""


@dataclass
class CsrMatrix:
    """Compressed sparse row matrix with sorted, duplicate-free columns per row."""

    nrows: int
    ncols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    @property
    def shape(self):
        return (self.nrows, self.ncols)

    @property
    def nnz(self):
        return len(self.values)

    def toarray(self) -> np.ndarray:
        out = np.zeros((self.nrows, self.ncols))
        for i in range(self.nrows):
            lo, hi = self.row_offsets[i], self.row_offsets[i + 1]
            out[i, self.col_indices[lo:hi]] = self.values[lo:hi]
        return out

    def to_scipy(self) -> sp.csr_matrix:
        # shares the underlying buffers, no copy
        return sp.csr_matrix(
            (self.values, self.col_indices, self.row_offsets),
            shape=(self.nrows, self.ncols),
        )

    def transpose(self) -> "CsrMatrix":
        t = self.to_scipy().T.tocsr()
        t.sort_indices()
        return CsrMatrix(self.ncols, self.nrows, t.indptr.astype(np.int64),
                         t.indices.astype(np.int64), t.data)


class TripletBuffer:
    """Accumulates (row, col, value) entries destined for one CSR matrix."""

    def __init__(self, nrows: int, ncols: int):
        self.nrows = nrows
        self.ncols = ncols
        self._rows: list[np.ndarray] = []
        self._cols: list[np.ndarray] = []
        self._vals: list[np.ndarray] = []

    def add(self, rows, cols, vals):
        """Append a batch of entries; scalars and arrays both work."""
        r = np.atleast_1d(np.asarray(rows, dtype=np.int64)).ravel()
        c = np.atleast_1d(np.asarray(cols, dtype=np.int64)).ravel()
        v = np.atleast_1d(np.asarray(vals, dtype=np.float64)).ravel()
        if not (r.size == c.size == v.size):
            raise ValueError("rows, cols, vals must have matching lengths")
        self._rows.append(r)
        self._cols.append(c)
        self._vals.append(v)

    def concatenated(self):
        if not self._rows:
            z = np.zeros(0, dtype=np.int64)
            return z, z.copy(), np.zeros(0)
        return (np.concatenate(self._rows), np.concatenate(self._cols),
                np.concatenate(self._vals))

    def __len__(self):
        return sum(r.size for r in self._rows)


def assemble_from_triplets(buf: TripletBuffer) -> CsrMatrix:
    """Compress a triplet buffer, summing duplicate (row, col) entries.

    Entries are sorted by (row, col, value) before summation, so the result
    is bit-identical under any permutation of the input entries.
    """
    rows, cols, vals = buf.concatenated()
    if rows.size and (rows.min() < 0 or rows.max() >= buf.nrows
                      or cols.min() < 0 or cols.max() >= buf.ncols):
        raise IndexError("triplet index outside matrix shape")
    return _compress(rows, cols, vals, buf.nrows, buf.ncols)


def _compress(rows, cols, vals, nrows, ncols) -> CsrMatrix:
    if rows.size == 0:
        return CsrMatrix(nrows, ncols, np.zeros(nrows + 1, dtype=np.int64),
                         np.zeros(0, dtype=np.int64), np.zeros(0))
    order = np.lexsort((vals, cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    new_group = np.empty(rows.size, dtype=bool)
    new_group[0] = True
    np.not_equal(rows[1:], rows[:-1], out=new_group[1:])
    new_group[1:] |= cols[1:] != cols[:-1]
    starts = np.flatnonzero(new_group)
    summed = np.add.reduceat(vals, starts)
    urows = rows[starts]
    ucols = cols[starts]
    offsets = np.zeros(nrows + 1, dtype=np.int64)
    np.add.at(offsets, urows + 1, 1)
    np.cumsum(offsets, out=offsets)
    return CsrMatrix(nrows, ncols, offsets, ucols, summed)


def spmv(A: CsrMatrix, x: np.ndarray) -> np.ndarray:
    """Matrix-vector product y = A x."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (A.ncols,):
        raise ValueError(f"vector length {x.shape} does not match ncols {A.ncols}")
    return A.to_scipy() @ x


@dataclass
class LuFactors:
    """Opaque LU factorization of a square CsrMatrix, reusable across solves."""

    n: int
    _dense: tuple | None = None          # (lu, piv) from scipy.linalg.lu_factor
    _sparse: object | None = None        # SuperLU object
    perm_r: np.ndarray | None = None
    perm_c: np.ndarray | None = None

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=np.float64)
        if b.shape != (self.n,):
            raise ValueError(f"rhs length {b.shape} does not match matrix size {self.n}")
        if self._dense is not None:
            return scipy.linalg.lu_solve(self._dense, b)
        return self._sparse.solve(b)


def _check_pivots(udiag: np.ndarray):
    scale = np.max(np.abs(udiag)) if udiag.size else 0.0
    if scale == 0.0 or np.min(np.abs(udiag)) <= PIVOT_RTOL * scale:
        raise SingularMatrixError("zero pivot within tolerance: matrix is rank deficient")


def factorize(A: CsrMatrix) -> LuFactors:
    """LU-factorize a square matrix with row pivoting.

    Raises SingularMatrixError when a pivot is zero to within PIVOT_RTOL of
    the largest pivot magnitude.
    """
    if A.nrows != A.ncols:
        raise ValueError("matrix must be square")
    n = A.nrows
    if n < DENSE_CUTOFF:
        dense = A.to_scipy().toarray()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            lu, piv = scipy.linalg.lu_factor(dense, check_finite=False)
        _check_pivots(np.diagonal(lu))
        return LuFactors(n, _dense=(lu, piv), perm_r=piv)
    try:
        slu = spla.splu(A.to_scipy().tocsc(), permc_spec="MMD_AT_PLUS_A")
    except RuntimeError as exc:
        raise SingularMatrixError(str(exc)) from exc
    _check_pivots(slu.U.diagonal())
    return LuFactors(n, _sparse=slu, perm_r=slu.perm_r, perm_c=slu.perm_c)


def lu_solve(A: CsrMatrix, b: np.ndarray) -> np.ndarray:
    """Solve A x = b by direct LU decomposition."""
    return factorize(A).solve(b)
