"""Dense vectors, CSR sparse matrices, the 1D Poisson operator, no-fill
incomplete Cholesky with a diagonal shift, and triangular solves.

Matrices and factors are immutable after construction and safe to share
across parallel task evaluations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular

from . import autodiff as ad


class LinalgError(Exception):
    pass


@dataclass(frozen=True)
class SparseMatrixCSR:
    """Square sparse matrix in CSR form with sorted, duplicate-free columns."""

    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    n: int

    def __post_init__(self):
        object.__setattr__(self, "row_offsets", np.asarray(self.row_offsets, dtype=np.int64))
        object.__setattr__(self, "col_indices", np.asarray(self.col_indices, dtype=np.int64))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.row_offsets.shape != (self.n + 1,):
            raise LinalgError("row_offsets must have length n+1")
        if not np.all(np.isfinite(self.values)):
            raise LinalgError("matrix values must be finite")
        for i in range(self.n):
            cols = self.col_indices[self.row_offsets[i]:self.row_offsets[i + 1]]
            if cols.size and (np.any(np.diff(cols) <= 0) or cols[0] < 0 or cols[-1] >= self.n):
                raise LinalgError(f"row {i} has unsorted, duplicate, or out-of-range columns")

    @property
    def nnz(self) -> int:
        return self.values.size

    @staticmethod
    def from_dense(dense: np.ndarray, tol: float = 0.0) -> "SparseMatrixCSR":
        dense = np.asarray(dense, dtype=np.float64)
        n = dense.shape[0]
        if dense.shape != (n, n):
            raise LinalgError("from_dense expects a square matrix")
        offsets = [0]
        cols, vals = [], []
        for i in range(n):
            keep = np.nonzero(np.abs(dense[i]) > tol)[0]
            cols.extend(keep.tolist())
            vals.extend(dense[i, keep].tolist())
            offsets.append(len(cols))
        return SparseMatrixCSR(np.array(offsets), np.array(cols, dtype=np.int64),
                               np.array(vals), n)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        for i in range(self.n):
            lo, hi = self.row_offsets[i], self.row_offsets[i + 1]
            out[i, self.col_indices[lo:hi]] = self.values[lo:hi]
        return out

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.row_offsets[i], self.row_offsets[i + 1]
        return self.col_indices[lo:hi], self.values[lo:hi]

    def has_symmetric_pattern(self) -> bool:
        pairs = set()
        for i in range(self.n):
            for j in self.row(i)[0]:
                pairs.add((i, int(j)))
        return all((j, i) in pairs for (i, j) in pairs)

    def transpose(self) -> "SparseMatrixCSR":
        counts = np.zeros(self.n + 1, dtype=np.int64)
        for j in self.col_indices:
            counts[j + 1] += 1
        offsets = np.cumsum(counts)
        cols = np.empty(self.nnz, dtype=np.int64)
        vals = np.empty(self.nnz)
        cursor = offsets[:-1].copy()
        for i in range(self.n):
            lo, hi = self.row_offsets[i], self.row_offsets[i + 1]
            for k in range(lo, hi):
                j = self.col_indices[k]
                cols[cursor[j]] = i
                vals[cursor[j]] = self.values[k]
                cursor[j] += 1
        return SparseMatrixCSR(offsets, cols, vals, self.n)


def spmv(a: SparseMatrixCSR, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (a.n,):
        raise LinalgError(f"dimension mismatch: matrix order {a.n}, vector {x.shape}")
    prod = a.values * x[a.col_indices]
    out = np.zeros(a.n)
    lengths = np.diff(a.row_offsets)
    nonempty = lengths > 0
    if np.any(nonempty):
        starts = a.row_offsets[:-1][nonempty]
        sums = np.add.reduceat(prod, starts)
        out[nonempty] = sums
    return out


def poisson_1d_matrix(n: int) -> SparseMatrixCSR:
    """Tridiagonal (-1, 2, -1): the unit-spaced 1D Laplacian with Dirichlet ends."""
    if n < 2:
        raise LinalgError("poisson_1d_matrix needs n >= 2")
    offsets = [0]
    cols, vals = [], []
    for i in range(n):
        if i > 0:
            cols.append(i - 1)
            vals.append(-1.0)
        cols.append(i)
        vals.append(2.0)
        if i < n - 1:
            cols.append(i + 1)
            vals.append(-1.0)
        offsets.append(len(cols))
    return SparseMatrixCSR(np.array(offsets), np.array(cols, dtype=np.int64),
                           np.array(vals), n)


def norms(a: SparseMatrixCSR) -> tuple[float, float, float]:
    """(induced 1-norm, induced inf-norm, Frobenius norm)."""
    col_sums = np.zeros(a.n)
    np.add.at(col_sums, a.col_indices, np.abs(a.values))
    row_sums = np.zeros(a.n)
    lengths = np.diff(a.row_offsets)
    nonempty = lengths > 0
    if np.any(nonempty):
        row_sums[nonempty] = np.add.reduceat(np.abs(a.values), a.row_offsets[:-1][nonempty])
    fro = float(np.sqrt(np.sum(a.values ** 2)))
    return float(col_sums.max(initial=0.0)), float(row_sums.max(initial=0.0)), fro


# ---------------------------------------------------------------------------
# incomplete Cholesky (no fill) with diagonal shift


@dataclass
class IcfFactor:
    """Lower-triangular no-fill factor of A + shift*I on A's lower pattern.

    status is 'success' or 'pivot-failure'; a failed factor is unusable and
    fail_row records where the computed diagonal dropped to <= 0.
    """

    lower: Optional[SparseMatrixCSR]
    shift: float
    status: str
    fail_row: Optional[int] = None
    _dense: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def ok(self) -> bool:
        return self.status == "success"

    def dense_lower(self) -> np.ndarray:
        if not self.ok:
            raise LinalgError("factorization failed; no factor available")
        if self._dense is None:
            self._dense = self.lower.to_dense()
        return self._dense


def _lower_pattern(a: SparseMatrixCSR):
    """Per-row lower-triangle columns (diagonal required) plus column lookup."""
    rows_cols = []
    rows_pos = []
    offsets = [0]
    total = 0
    for i in range(a.n):
        cols, _ = a.row(i)
        keep = [int(j) for j in cols if j <= i]
        if not keep or keep[-1] != i:
            raise LinalgError(f"row {i} is missing its diagonal entry")
        rows_cols.append(keep)
        rows_pos.append({j: total + k for k, j in enumerate(keep)})
        total += len(keep)
        offsets.append(total)
    return rows_cols, rows_pos, np.array(offsets, dtype=np.int64)


def ic0_factorize(a: SparseMatrixCSR, shift: float = 0.0,
                  with_derivative: bool = False):
    """No-fill incomplete Cholesky of A + shift*I (left-looking, row order).

    Returns an IcfFactor, or (IcfFactor, d(values)/d(shift)) when
    with_derivative is set. Pivot failure is any computed diagonal <= 0.
    """
    if not a.has_symmetric_pattern():
        raise LinalgError("ic0_factorize requires a symmetric sparsity pattern")
    rows_cols, rows_pos, offsets = _lower_pattern(a)
    nnz = offsets[-1]
    vals = np.zeros(nnz)
    dvals = np.zeros(nnz) if with_derivative else None
    diag_pos = np.array([rows_pos[i][i] for i in range(a.n)], dtype=np.int64)

    a_dok = {}
    for i in range(a.n):
        cols, v = a.row(i)
        for j, x in zip(cols, v):
            if j <= i:
                a_dok[(i, int(j))] = float(x)

    for i in range(a.n):
        for j in rows_cols[i]:
            s = a_dok[(i, j)] + (shift if j == i else 0.0)
            ds = 1.0 if (with_derivative and j == i) else 0.0
            pos_j = rows_pos[j]
            for k in rows_cols[i]:
                if k >= j:
                    break
                pk = pos_j.get(k)
                if pk is None:
                    continue
                pi = rows_pos[i][k]
                s -= vals[pi] * vals[pk]
                if with_derivative:
                    ds -= dvals[pi] * vals[pk] + vals[pi] * dvals[pk]
            p = rows_pos[i][j]
            if j < i:
                dj = vals[diag_pos[j]]
                vals[p] = s / dj
                if with_derivative:
                    dvals[p] = (ds - vals[p] * dvals[diag_pos[j]]) / dj
            else:
                if s <= 0.0:
                    failed = IcfFactor(None, shift, "pivot-failure", fail_row=i)
                    return (failed, None) if with_derivative else failed
                vals[p] = np.sqrt(s)
                if with_derivative:
                    dvals[p] = ds / (2.0 * vals[p])

    cols_flat = np.array([j for cols in rows_cols for j in cols], dtype=np.int64)
    lower = SparseMatrixCSR(offsets, cols_flat, vals, a.n)
    factor = IcfFactor(lower, shift, "success")
    return (factor, dvals) if with_derivative else factor


def tri_solve(factor: IcfFactor, b: np.ndarray, mode: str = "both") -> np.ndarray:
    """Apply the factor: 'forward' -> L^-1 b, 'backward' -> L^-T b, 'both' -> (L L^T)^-1 b."""
    if not factor.ok:
        raise LinalgError("cannot solve with a failed factorization")
    b = np.asarray(b, dtype=np.float64)
    dense = factor.dense_lower()
    if mode == "forward":
        return solve_triangular(dense, b, lower=True)
    if mode == "backward":
        return solve_triangular(dense, b, lower=True, trans="T")
    if mode == "both":
        y = solve_triangular(dense, b, lower=True)
        return solve_triangular(dense, y, lower=True, trans="T")
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# tape-aware pieces of the preconditioner path: gradients flow from the
# diagonal shift through the factorization arithmetic into the solves


def ic0_values_op(a: SparseMatrixCSR, shift: "ad.TapeVar"):
    """Record the factor values as a function of the shift.

    Returns (values TapeVar, IcfFactor) on success or (None, failed factor).
    """
    factor, dvals = ic0_factorize(a, float(shift.value), with_derivative=True)
    if not factor.ok:
        return None, factor
    var = ad.record(
        shift.tape, "ic0_values", factor.lower.values, (shift,),
        lambda g: (np.asarray(np.dot(g, dvals)),),
    )
    return var, factor


def ic_apply_op(values: "ad.TapeVar", factor: IcfFactor, rhs: "ad.TapeVar"):
    """z = (L L^T)^-1 rhs on the tape, differentiable in the factor values and rhs."""
    dense = factor.dense_lower()
    rows = np.repeat(np.arange(factor.lower.n), np.diff(factor.lower.row_offsets))
    cols = factor.lower.col_indices
    b = rhs.value
    y = solve_triangular(dense, b, lower=True)
    z = solve_triangular(dense, y, lower=True, trans="T")

    def vjp(g):
        w = solve_triangular(dense, g, lower=True)
        b_bar = solve_triangular(dense, w, lower=True, trans="T")
        # d/dL of (L^-T L^-1 b), restricted to the factor pattern
        values_bar = -(z[rows] * w[cols]) - (b_bar[rows] * y[cols])
        return values_bar, b_bar

    return ad.record(values.tape, "ic_apply", z, (values, rhs), vjp)


# ---------------------------------------------------------------------------
# Matrix Market coordinate IO (values printed at 17 significant digits)


def write_matrix_market(path, a: SparseMatrixCSR, symmetric: bool = False) -> None:
    """Write in coordinate format; with symmetric=True only the lower triangle is stored."""
    lines = [f"%%MatrixMarket matrix coordinate real {'symmetric' if symmetric else 'general'}"]
    entries = []
    for i in range(a.n):
        cols, vals = a.row(i)
        for j, v in zip(cols, vals):
            if symmetric and j > i:
                continue
            entries.append((i + 1, int(j) + 1, v))
    lines.append(f"{a.n} {a.n} {len(entries)}")
    for i, j, v in entries:
        lines.append(f"{i} {j} {v:.17g}")
    with open(path, "w") as handle:
        handle.write("\n".join(lines) + "\n")


def read_matrix_market(path) -> SparseMatrixCSR:
    with open(path) as handle:
        header = handle.readline().strip().split()
        if len(header) < 5 or header[0] != "%%MatrixMarket" or header[2] != "coordinate":
            raise LinalgError("not a coordinate Matrix Market file")
        symmetric = header[4] == "symmetric"
        line = handle.readline()
        while line.startswith("%"):
            line = handle.readline()
        nrows, ncols, nnz = (int(t) for t in line.split())
        if nrows != ncols:
            raise LinalgError("only square matrices are supported")
        entries: dict[tuple[int, int], float] = {}
        for _ in range(nnz):
            i_s, j_s, v_s = handle.readline().split()
            i, j, v = int(i_s) - 1, int(j_s) - 1, float(v_s)
            entries[(i, j)] = v
            if symmetric and i != j:
                entries[(j, i)] = v
    offsets = [0]
    cols, vals = [], []
    for i in range(nrows):
        row_items = sorted((j, v) for (r, j), v in entries.items() if r == i)
        cols.extend(j for j, _ in row_items)
        vals.extend(v for _, v in row_items)
        offsets.append(len(cols))
    return SparseMatrixCSR(np.array(offsets), np.array(cols, dtype=np.int64),
                           np.array(vals), nrows)
