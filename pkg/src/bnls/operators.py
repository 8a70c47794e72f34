"""Banded finite-difference operators for radial derivatives on nonuniform grids.

Rows come from fitting the local degree-6 polynomial through the seven nearest
nodes (even ghost extension across r=0) and applying the target differential
operator analytically at the node. The 1/r singular coefficients at the origin
are resolved by the even-symmetry limit, where only the r^2 and r^4 Taylor
coefficients survive.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import get_lapack_funcs

from .grids import STENCIL_WIDTH, RadialGrid, _extended

__all__ = [
    "BandedOperator",
    "ShiftedSolver",
    "LinearSolveError",
    "assemble_biharmonic",
    "assemble_laplacian",
    "assemble_gradient",
    "apply_operator",
    "solve_shifted",
]

HALF_BW = 3
PIVOT_FLOOR = 1e-30


class LinearSolveError(RuntimeError):
    """Singular or unacceptably ill-conditioned shifted solve; halts a run."""


@dataclass(frozen=True)
class BandedOperator:
    """Radial differential operator built from seven-point stencils.

    Row m applies weights[m] to values[columns[m]]; columns are the folded
    (even-extended) window node indices, so every row touches at most seven
    nodes within offsets -6..+3 of the diagonal. For the biharmonic operator
    the last two rows are zero: they encode the clamped outer closure
    psi = psi' = 0 at r_max, holding those values fixed under shifted solves.
    """

    grid: RadialGrid
    d: int
    weights: np.ndarray
    columns: np.ndarray
    kind: str

    def __post_init__(self):
        self.weights.setflags(write=False)
        self.columns.setflags(write=False)

    @property
    def bandwidth(self) -> int:
        return STENCIL_WIDTH

    @cached_property
    def band(self) -> tuple[np.ndarray, int, int]:
        """LAPACK-layout band of the bare operator (with gbtrf fill rows),
        cached per grid so shifted solves only scale and factorize."""
        m = self.grid.m
        rows = np.arange(m)[:, None]
        kl = int(np.max(rows - self.columns))
        ku = int(np.max(self.columns - rows))
        ab = np.zeros((2 * kl + ku + 1, m))
        flat_rows = np.repeat(np.arange(m), STENCIL_WIDTH)
        flat_cols = self.columns.ravel()
        np.add.at(ab, (kl + ku + flat_rows - flat_cols, flat_cols), self.weights.ravel())
        return ab, kl, ku

    @cached_property
    def row_norm(self) -> float:
        return float(np.max(np.sum(np.abs(self.weights), axis=1)))


def _check_grid(grid: RadialGrid):
    r = grid.nodes
    if grid.m < 16:
        raise ValueError("operator assembly needs at least 16 nodes")
    dr = grid.spacings
    if np.any(dr <= 1e-14 * np.maximum(r[1:], 1e-300)):
        raise ValueError("degenerate grid: coincident nodes")


def _fd_rows(grid: RadialGrid, d: int, kind: str, rows: np.ndarray):
    """Stencil weights and extended window indices for rows with r_m > 0."""
    r = grid.nodes
    starts = np.clip(rows - HALF_BW, -HALF_BW, grid.m - STENCIL_WIDTH)
    idx = starts[:, None] + np.arange(STENCIL_WIDTH)[None, :]
    xw, _ = _extended(r, idx)

    rm = r[rows]
    width = xw.max(axis=1) - xw.min(axis=1)
    t = (xw - rm[:, None]) / width[:, None]
    vand_t = (t[:, :, None] ** np.arange(STENCIL_WIDTH)[None, None, :]).swapaxes(1, 2)

    dvec = np.zeros((rows.size, STENCIL_WIDTH))
    if kind == "gradient":
        dvec[:, 1] = 1.0 / width
    elif kind == "laplacian":
        dvec[:, 2] = 2.0 / width**2
        dvec[:, 1] = (d - 1) / rm / width
    elif kind == "biharmonic":
        dvec[:, 4] = 24.0 / width**4
        dvec[:, 3] = 12.0 * (d - 1) / rm / width**3
        dvec[:, 2] = 2.0 * (d - 1) * (d - 3) / rm**2 / width**2
        dvec[:, 1] = -(d - 1) * (d - 3) / rm**3 / width
    else:
        raise ValueError(f"unknown operator kind {kind!r}")

    w = np.linalg.solve(vand_t, dvec[:, :, None])[:, :, 0]
    return w, idx


def _origin_row(grid: RadialGrid, d: int, kind: str) -> np.ndarray:
    """Operator limit at r=0 for even fields, from the even cubic in r^2."""
    r = grid.nodes[: HALF_BW + 1]
    width = r[-1] ** 2
    s = (r**2) / width
    vand = s[:, None] ** np.arange(HALF_BW + 1)[None, :]
    dvec = np.zeros(HALF_BW + 1)
    if kind == "laplacian":
        dvec[1] = 2.0 * d / width
    elif kind == "biharmonic":
        dvec[2] = 8.0 * d * (d + 2) / width**2
    # gradient of an even field vanishes at the origin: dvec stays zero
    return np.linalg.solve(vand.T, dvec)


def _assemble(grid: RadialGrid, d: int, kind: str, closure_rows: int) -> BandedOperator:
    _check_grid(grid)
    if d < 1:
        raise ValueError("dimension must be >= 1")
    m = grid.m
    weights = np.zeros((m, STENCIL_WIDTH))
    columns = np.tile(np.arange(m)[:, None], (1, STENCIL_WIDTH))

    rows = np.arange(1, m - closure_rows)
    w, idx = _fd_rows(grid, d, kind, rows)
    weights[rows] = w
    columns[rows] = np.abs(idx)  # fold even-extension ghosts onto r > 0 nodes

    w0 = _origin_row(grid, d, kind)
    weights[0, : w0.size] = w0
    columns[0, : w0.size] = np.arange(w0.size)
    return BandedOperator(grid, d, weights, columns, kind)


def assemble_biharmonic(grid: RadialGrid, d: int) -> BandedOperator:
    """Radial biharmonic with clamped closure rows at r_max."""
    return _assemble(grid, d, "biharmonic", closure_rows=2)


def assemble_laplacian(grid: RadialGrid, d: int) -> BandedOperator:
    """Radial Laplacian at every node (one-sided near r_max); no closure rows."""
    return _assemble(grid, d, "laplacian", closure_rows=0)


def assemble_gradient(grid: RadialGrid, d: int) -> BandedOperator:
    """First radial derivative at every node; zero at the origin (even fields)."""
    return _assemble(grid, d, "gradient", closure_rows=0)


def apply_operator(op: BandedOperator, values: np.ndarray) -> np.ndarray:
    """Matrix-vector product of the banded operator with a value vector."""
    values = np.asarray(values)
    if values.shape != op.grid.nodes.shape:
        raise ValueError("value vector length must match the operator grid")
    ab, kl, ku = op.band
    m = values.size
    out = np.zeros(m, dtype=np.result_type(values, ab))
    for o in range(-kl, ku + 1):
        lo, hi = max(0, -o), m - max(0, o)
        out[lo:hi] += ab[kl + ku - o, lo + o : hi + o] * values[lo + o : hi + o]
    return out


class ShiftedSolver:
    """LU factorization of (I + alpha * op), reusable across right-hand sides."""

    def __init__(self, op: BandedOperator, alpha: complex):
        self.op = op
        self.alpha = complex(alpha)
        ab0, kl, ku = op.band
        ab = alpha * ab0
        ab[kl + ku, :] += 1.0
        gbtrf, gbtrs = get_lapack_funcs(("gbtrf", "gbtrs"), (ab,))
        lu, piv, info = gbtrf(ab, kl, ku, overwrite_ab=1)
        if info != 0:
            raise LinearSolveError(f"banded LU failed (info={info})")
        diag = np.abs(lu[kl + ku, :])
        if diag.min() < PIVOT_FLOOR * max(diag.max(), 1.0):
            raise LinearSolveError("pivot below threshold: system near singular")
        self._lu, self._piv, self._gbtrs = lu, piv, gbtrs
        self._kl, self._ku = kl, ku
        self._row_norm = 1.0 + abs(alpha) * op.row_norm

    def solve(self, rhs: np.ndarray, tol: float | None = 1e-10) -> np.ndarray:
        """Back-substitute one right-hand side.

        The accuracy check bounds the normwise backward error
        |r| / (|rhs| + |I + alpha A| |x|); a raw residual-over-rhs bound is
        not reachable once |alpha A| is large, even for a stable solve.
        """
        x, info = self._gbtrs(self._lu, self._kl, self._ku, rhs, self._piv)
        if info != 0 or not np.all(np.isfinite(x)):
            raise LinearSolveError("banded back-substitution failed")
        scale = np.max(np.abs(rhs))
        if scale > 0.0 and tol is not None:
            residual = rhs - (x + self.alpha * apply_operator(self.op, x))
            backward = np.max(np.abs(residual)) / (
                scale + self._row_norm * np.max(np.abs(x))
            )
            if backward > tol:
                raise LinearSolveError("shifted solve backward error above tolerance")
        return x


def solve_shifted(
    op: BandedOperator, alpha: complex, rhs: np.ndarray, tol: float | None = 1e-10
) -> np.ndarray:
    """Solve (I + alpha*op) x = rhs by banded LU with partial pivoting."""
    rhs = np.asarray(rhs, dtype=complex)
    if rhs.shape != op.grid.nodes.shape:
        raise ValueError("rhs length must match the operator grid")
    if alpha == 0:
        return rhs.copy()
    return ShiftedSolver(op, alpha).solve(rhs, tol=tol)
