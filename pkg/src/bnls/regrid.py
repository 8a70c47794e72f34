"""Static grid redistribution with the second-difference smoothing weight.

The composite monitor w = w1 + alpha*w2 + beta*w3 combines the normalized
arc-length weight (tracks the steep collapsing core), a spacing penalty
(keeps the exterior populated), and the second-difference penalty on the grid
itself, which removes the sharp core/exterior spacing discontinuity that the
first two alone produce. Because w3 depends on the grid being built, the
redistribution is a short fixed-point loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import FieldSnapshot, RadialGrid, interpolate_to_grid, quadrature
from .operators import apply_operator, assemble_gradient

__all__ = [
    "WeightProfile",
    "RegridResult",
    "weight_w1",
    "weight_w2",
    "weight_w3",
    "composite_weight",
    "equidistribute",
    "regrid",
    "regrid_needed",
]

MOVE_TOL = 1e-3
MAX_SWEEPS = 10


@dataclass(frozen=True)
class WeightProfile:
    """Per-node monitor components and their composite."""

    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray
    alpha: float
    beta: float

    @property
    def composite(self) -> np.ndarray:
        return self.w1 + self.alpha * self.w2 + self.beta * self.w3


def weight_w1(snapshot: FieldSnapshot) -> np.ndarray:
    """Arc-length monitor sqrt(1 + |d psi/dr|^2 / |psi|_inf^2)."""
    peak = float(np.max(np.abs(snapshot.values)))
    if peak == 0.0:
        return np.ones(snapshot.grid.m)
    grad = apply_operator(assemble_gradient(snapshot.grid, snapshot.d), snapshot.values)
    return np.sqrt(1.0 + np.abs(grad) ** 2 / peak**2)


def weight_w2(grid: RadialGrid, cap: float) -> np.ndarray:
    """Spacing penalty sqrt(1 + (dr_m/cap)^2), keeping exterior gaps bounded."""
    if cap <= 0.0:
        raise ValueError("cap must be positive")
    dr = grid.spacings
    per_node = np.concatenate([dr, dr[-1:]])
    return np.sqrt(1.0 + (per_node / cap) ** 2)


def weight_w3(grid: RadialGrid) -> np.ndarray:
    """Second-difference penalty sqrt(1 + |d2r_m| / dr_m); 1 where undefined."""
    dr = grid.spacings
    d2r = grid.second_differences
    w = np.ones(grid.m)
    w[: grid.m - 2] = np.sqrt(1.0 + np.abs(d2r) / dr[:-1])
    return w


def composite_weight(
    snapshot: FieldSnapshot, cap: float, alpha: float = 1.0, beta: float = 1.0
) -> WeightProfile:
    return WeightProfile(
        w1=weight_w1(snapshot),
        w2=weight_w2(snapshot.grid, cap),
        w3=weight_w3(snapshot.grid),
        alpha=alpha,
        beta=beta,
    )


def equidistribute(grid: RadialGrid, weights: np.ndarray, m: int) -> RadialGrid:
    """New grid whose inter-node integrals of the (piecewise-linear) weight
    are all equal, by inverting the cumulative integral."""
    weights = np.asarray(weights, dtype=float)
    if weights.shape != grid.nodes.shape:
        raise ValueError("weights must be sampled on the grid nodes")
    if np.any(weights <= 0.0) or not np.all(np.isfinite(weights)):
        raise ValueError("weights must be positive and finite")
    if m < 16:
        raise ValueError("refusing to equidistribute onto fewer than 16 nodes")

    r = grid.nodes
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (weights[1:] + weights[:-1]) * np.diff(r))])
    targets = np.linspace(0.0, cum[-1], m)
    nodes = np.interp(targets, cum, r)
    nodes[0] = 0.0
    nodes[-1] = r[-1]
    return RadialGrid(nodes, grid.d)


@dataclass(frozen=True)
class RegridResult:
    snapshot: FieldSnapshot
    sweeps: int
    converged: bool
    power_change: float
    max_w3: float
    max_spacing_ratio: float


def regrid(
    snapshot: FieldSnapshot,
    cap: float,
    alpha: float = 1.0,
    beta: float = 1.0,
    m: int | None = None,
) -> RegridResult:
    """Redistribute the grid under the composite monitor and move the field.

    The w3 component is re-evaluated on each candidate grid until the nodes
    stop moving (relative to r_max) or the sweep cap is hit; the field is then
    interpolated once, from the original snapshot, onto the final grid.
    """
    if m is None:
        m = snapshot.grid.m
    current = snapshot
    grid = snapshot.grid
    converged = False
    sweeps = 0
    for sweeps in range(1, MAX_SWEEPS + 1):
        w = composite_weight(current, cap, alpha, beta).composite
        new_grid = equidistribute(grid, w, m)
        movement = float(np.max(np.abs(new_grid.nodes - grid.nodes)) / grid.r_max) if (
            new_grid.m == grid.m
        ) else np.inf
        grid = new_grid
        current = interpolate_to_grid(snapshot, grid)
        if movement < MOVE_TOL:
            converged = True
            break

    power_before = quadrature(
        snapshot.grid, np.abs(snapshot.values) ** 2, snapshot.d, order=6
    )
    power_after = quadrature(grid, np.abs(current.values) ** 2, snapshot.d, order=6)
    change = abs(power_after - power_before) / power_before if power_before > 0 else 0.0

    dr = grid.spacings
    ratios = np.maximum(dr[1:] / dr[:-1], dr[:-1] / dr[1:])
    return RegridResult(
        snapshot=current,
        sweeps=sweeps,
        converged=converged,
        power_change=float(change),
        max_w3=float(weight_w3(grid).max()),
        max_spacing_ratio=float(ratios.max()),
    )


def regrid_needed(
    snapshot: FieldSnapshot,
    focusing: float,
    last_regrid_focusing: float,
    trigger_ratio: float,
    n_core_min: int = 64,
    core_radius_factor: float = 4.0,
) -> bool:
    """True when the run has focused past the trigger ratio since the last
    regrid, or the core r < factor*L holds too few nodes."""
    if focusing < last_regrid_focusing / trigger_ratio:
        return True
    n_core = int(np.searchsorted(snapshot.grid.nodes, core_radius_factor * focusing))
    return n_core < n_core_min
