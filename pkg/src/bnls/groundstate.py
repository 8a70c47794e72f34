"""Spectral renormalization solver for the standing-wave profile.

Solves -Lap^2 R - R + |R|^(2 sigma) R = 0 on a periodic tensor grid with FFTs,
without imposing radial symmetry, and measures the critical power |R|_2^2 in
the critical case sigma*d = 4. The renormalized fixed-point iteration keeps
the integral relation SL = SR satisfied at every step, which prevents the
bare Picard iteration from draining to zero or blowing up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

from .grids import RadialGrid, quadrature

__all__ = [
    "GroundState",
    "RadialProfile",
    "SrmDivergenceError",
    "TensorGrid",
    "srm_step",
    "srm_solve",
    "radial_profile",
    "critical_power",
]

DEFAULT_BOX = 16.0
DEFAULT_POINTS = {1: 512, 2: 256, 3: 96}


class SrmDivergenceError(RuntimeError):
    """Renormalization constant lost positivity or the iteration failed."""


@dataclass(frozen=True)
class TensorGrid:
    """Periodic box [-x_half, x_half)^d sampled with n points per axis."""

    x_half: float
    n: int
    d: int

    @property
    def dx(self) -> float:
        return 2.0 * self.x_half / self.n

    @property
    def axis(self) -> np.ndarray:
        return (np.arange(self.n) - self.n // 2) * self.dx

    def k_fourth(self) -> np.ndarray:
        """|k|^4 on the FFT frequency layout."""
        k1 = 2.0 * np.pi * sfft.fftfreq(self.n, d=self.dx)
        k2 = sum(
            np.reshape(k1**2, (-1,) + (1,) * (self.d - 1 - ax)) for ax in range(self.d)
        )
        return np.asarray(k2) ** 2

    def norm_sq(self, values: np.ndarray) -> float:
        return float(np.sum(np.abs(values) ** 2) * self.dx**self.d)


@dataclass(frozen=True)
class GroundState:
    """Converged standing-wave profile with its diagnostics."""

    grid: TensorGrid
    values: np.ndarray
    sigma: float
    power: float
    residual: float
    asymmetry: float
    iterations: int

    def __post_init__(self):
        self.values.setflags(write=False)

    @property
    def d(self) -> int:
        return self.grid.d

    @property
    def is_critical(self) -> bool:
        return abs(self.sigma * self.d - 4.0) < 1e-12

    @property
    def peak(self) -> float:
        return float(np.max(np.abs(self.values)))


@dataclass(frozen=True)
class RadialProfile:
    grid: RadialGrid
    values: np.ndarray
    asymmetry: float


def _sl_sr(f_hat: np.ndarray, g_hat: np.ndarray, k4: np.ndarray) -> tuple[float, float]:
    sl = float(np.sum(np.abs(f_hat) ** 2))
    sr = float(np.real(np.sum(g_hat * np.conj(f_hat) / (k4 + 1.0))))
    return sl, sr


def srm_step(
    values: np.ndarray, sigma: float, grid: TensorGrid, k4: np.ndarray | None = None
) -> tuple[np.ndarray, float]:
    """One renormalized fixed-point step; returns (next iterate, C_m).

    C_m is the renormalization constant (SL/SR)^(1/(2 sigma)); it tends to 1
    as the iterate approaches a solution.
    """
    if not np.any(values):
        raise SrmDivergenceError("iterate is identically zero")
    if k4 is None:
        k4 = grid.k_fourth()
    f_hat = sfft.fftn(values, workers=-1)
    g_hat = sfft.fftn(np.abs(values) ** (2.0 * sigma) * values, workers=-1)
    sl, sr = _sl_sr(f_hat, g_hat, k4)
    if not np.isfinite(sr) or sr <= 0.0:
        raise SrmDivergenceError(f"integral relation lost positivity (SR={sr!r})")
    ratio = sl / sr
    nxt = sfft.ifftn(ratio ** (1.0 + 0.5 / sigma) * g_hat / (k4 + 1.0), workers=-1)
    if np.isrealobj(values):
        nxt = nxt.real
    return nxt, ratio ** (0.5 / sigma)


def equation_residual(values: np.ndarray, sigma: float, grid: TensorGrid) -> float:
    """Relative sup-norm of -Lap^2 R - R + |R|^(2 sigma) R, spectrally."""
    k4 = grid.k_fourth()
    lap2 = sfft.ifftn(k4 * sfft.fftn(values, workers=-1), workers=-1)
    if np.isrealobj(values):
        lap2 = lap2.real
    res = -lap2 - values + np.abs(values) ** (2.0 * sigma) * values
    return float(np.max(np.abs(res)) / np.max(np.abs(values)))


def _gaussian_guess(grid: TensorGrid, amplitude: float = 2.0) -> np.ndarray:
    ax = grid.axis
    r2 = sum(
        np.reshape(ax**2, (-1,) + (1,) * (grid.d - 1 - a)) for a in range(grid.d)
    )
    return amplitude * np.exp(-np.asarray(r2))


def _shell_stats(grid: TensorGrid, values: np.ndarray):
    """Group lattice points by exact radius; return radii, means, stds."""
    n = grid.n
    a = np.arange(n) - n // 2
    key = sum(
        np.reshape(a**2, (-1,) + (1,) * (grid.d - 1 - ax)) for ax in range(grid.d)
    )
    key = np.asarray(key).ravel()
    flat = values.ravel()
    counts = np.bincount(key)
    sums = np.bincount(key, weights=flat)
    sq = np.bincount(key, weights=flat**2)
    occupied = counts > 0
    mean = sums[occupied] / counts[occupied]
    var = np.maximum(sq[occupied] / counts[occupied] - mean**2, 0.0)
    radii = np.sqrt(np.flatnonzero(occupied).astype(float)) * grid.dx
    return radii, mean, np.sqrt(var)


def srm_solve(
    sigma: float,
    d: int,
    guess: np.ndarray | None = None,
    x_half: float = DEFAULT_BOX,
    n: int | None = None,
    tol: float = 1e-12,
    max_iters: int = 2000,
) -> GroundState:
    """Iterate srm_step to convergence and validate the result.

    Convergence requires both the relative sup-norm change of the iterate and
    |C_m - 1| to fall below tol.
    """
    if n is None:
        n = DEFAULT_POINTS[d]
    grid = TensorGrid(x_half, n, d)
    k4 = grid.k_fourth()
    field = _gaussian_guess(grid) if guess is None else np.asarray(guess, dtype=float)

    for it in range(1, max_iters + 1):
        nxt, c_m = srm_step(field, sigma, grid, k4)
        change = float(np.max(np.abs(nxt - field)) / np.max(np.abs(field)))
        field = nxt
        if change < tol and abs(c_m - 1.0) < tol:
            break
    else:
        raise SrmDivergenceError(
            f"no convergence in {max_iters} iterations (last change {change:.3e})"
        )

    # normalize the sign so the peak is positive
    if field.flat[np.argmax(np.abs(field))] < 0:
        field = -field

    residual = equation_residual(field, sigma, grid)
    if residual >= 1e-6:
        raise SrmDivergenceError(f"converged iterate fails the residual check ({residual:.2e})")
    peak_idx = np.unravel_index(np.argmax(np.abs(field)), field.shape)
    if any(abs(i - n // 2) > 1 for i in peak_idx):
        raise SrmDivergenceError("maximal amplitude not attained at the origin")
    _, _, stds = _shell_stats(grid, field)
    asymmetry = float(stds.max() / np.max(np.abs(field)))

    return GroundState(
        grid=grid,
        values=field,
        sigma=sigma,
        power=grid.norm_sq(field),
        residual=residual,
        asymmetry=asymmetry,
        iterations=it,
    )


def critical_power(gs: GroundState) -> float:
    """|R|_2^2 by tensor-grid quadrature; the collapse threshold when
    sigma*d = 4. For non-critical profiles the norm is still returned but
    does not carry that meaning."""
    return gs.grid.norm_sq(gs.values)


def radial_profile(gs: GroundState, m: int | None = None) -> RadialProfile:
    """Signed radial profile R(r) with a shell-based radial-asymmetry score.

    Values come from averaging the d positive half-axes (exact lattice
    samples); the asymmetry score is the largest standard deviation across
    full spherical shells divided by the peak amplitude.
    """
    from .grids import FieldSnapshot, interpolate_to_grid

    n, half = gs.grid.n, gs.grid.n // 2
    axes = []
    for ax in range(gs.d):
        sel = [half] * gs.d
        sel[ax] = slice(half, n)
        axes.append(gs.values[tuple(sel)])
    axis_vals = np.mean(axes, axis=0)
    axis_r = np.arange(n - half) * gs.grid.dx

    _, _, stds = _shell_stats(gs.grid, gs.values)
    asymmetry = float(stds.max() / np.max(np.abs(gs.values)))

    src_grid = RadialGrid(axis_r, gs.d)
    if m is None or m == axis_r.size:
        return RadialProfile(src_grid, axis_vals.astype(float), asymmetry)

    dst = RadialGrid(np.linspace(0.0, axis_r[-1], m), gs.d)
    snap = FieldSnapshot(src_grid, axis_vals.astype(complex), 0.0, gs.sigma, gs.d)
    vals = interpolate_to_grid(snap, dst).values.real
    return RadialProfile(dst, vals, asymmetry)


def profile_power(profile: RadialProfile, d: int) -> float:
    """Radial quadrature of |R|^2, as a cross-check on the tensor norm."""
    return float(quadrature(profile.grid, profile.values**2, d, order=6))
