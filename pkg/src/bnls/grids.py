"""Radial grids, complex field snapshots, run configuration, and quadrature.

Everything downstream (operators, regridding, time stepping, diagnostics)
works on a flat radial grid stored in physical coordinates. Grids and
snapshots are immutable value objects; all operations here are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "RadialGrid",
    "FieldSnapshot",
    "InitialCondition",
    "SimulationConfig",
    "build_uniform_grid",
    "evaluate_initial_condition",
    "interpolate_to_grid",
    "quadrature",
    "nodal_weights",
    "sphere_surface",
    "h2_subcritical_range_ok",
]

STENCIL_WIDTH = 7
MIN_NODES = 16


@dataclass(frozen=True)
class RadialGrid:
    """Strictly increasing radial nodes with r_0 = 0 and a spatial dimension."""

    nodes: np.ndarray
    d: int

    def __post_init__(self):
        nodes = np.ascontiguousarray(np.asarray(self.nodes, dtype=float))
        object.__setattr__(self, "nodes", nodes)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ValueError("grid needs a 1D array of at least two nodes")
        if nodes[0] != 0.0:
            raise ValueError("first node must sit at r = 0")
        dr = np.diff(nodes)
        if not np.all(dr > 0.0):
            raise ValueError("nodes must be strictly increasing")
        if self.d < 1:
            raise ValueError("dimension must be a positive integer")
        nodes.setflags(write=False)

    @property
    def m(self) -> int:
        return self.nodes.size

    @property
    def r_max(self) -> float:
        return float(self.nodes[-1])

    @property
    def spacings(self) -> np.ndarray:
        """dr_m = r_{m+1} - r_m, length M-1."""
        return np.diff(self.nodes)

    @property
    def second_differences(self) -> np.ndarray:
        """d2r_m = dr_{m+1} - dr_m, length M-2."""
        dr = self.spacings
        return dr[1:] - dr[:-1]


@dataclass(frozen=True)
class FieldSnapshot:
    """Complex field values on a radial grid at a single time."""

    grid: RadialGrid
    values: np.ndarray
    t: float
    sigma: float
    d: int

    def __post_init__(self):
        values = np.ascontiguousarray(np.asarray(self.values, dtype=complex))
        object.__setattr__(self, "values", values)
        if values.shape != self.grid.nodes.shape:
            raise ValueError("values length must match the grid node count")
        if self.sigma <= 0.0:
            raise ValueError("sigma must be positive")
        if self.t < 0.0:
            raise ValueError("time must be nonnegative")
        if self.d != self.grid.d:
            raise ValueError("snapshot dimension disagrees with its grid")
        values.setflags(write=False)

    def is_finite(self) -> bool:
        """False signals a blown-up or failed simulation state."""
        return bool(np.all(np.isfinite(self.values.view(float))))

    def with_values(self, values: np.ndarray, t: float | None = None) -> "FieldSnapshot":
        return replace(self, values=values, t=self.t if t is None else t)


@dataclass(frozen=True)
class InitialCondition:
    """Descriptor for the supported initial-condition families.

    family "gaussian": amplitude * exp(-r**exponent).
    family "scaled_ground_state": amplitude * R(r), with the standing-wave
    profile supplied as (profile_nodes, profile_values).
    """

    family: str
    amplitude: float
    exponent: float = 2.0
    profile_nodes: np.ndarray | None = None
    profile_values: np.ndarray | None = None

    def __post_init__(self):
        if self.family not in ("gaussian", "scaled_ground_state"):
            raise ValueError(f"unknown initial-condition family {self.family!r}")


def h2_subcritical_range_ok(sigma: float, d: int) -> bool:
    """Admissible nonlinearity exponent: 0 < sigma, and sigma < 4/(d-4) for d > 4."""
    if sigma <= 0.0:
        return False
    if d > 4:
        return sigma < 4.0 / (d - 4)
    return True


@dataclass(frozen=True)
class SimulationConfig:
    """Full parameter set for one collapse (or bounded) run."""

    d: int
    sigma: float
    ic: InitialCondition
    r_max: float
    nodes: int
    dt0: float
    l_stop: float = 1e-5
    trigger_ratio: float = 1.25
    n_core_min: int = 64
    core_radius_factor: float = 4.0
    corrector_passes: int = 2
    solve_tol: float = 1e-10
    w2_cap: float = 1.0
    w_alpha: float = 1.0
    w_beta: float = 1.0
    t_end: float | None = None
    max_steps: int = 2_000_000
    record_every: int = 1
    amplitude_halt: float = 1e140
    snapshot_decades: bool = True
    label: str = ""

    def __post_init__(self):
        if not h2_subcritical_range_ok(self.sigma, self.d):
            raise ValueError(
                f"sigma={self.sigma} outside the admissible range for d={self.d}"
            )
        if self.nodes < MIN_NODES:
            raise ValueError(f"node count must be at least {MIN_NODES}")
        if self.r_max <= 0.0 or self.dt0 <= 0.0:
            raise ValueError("r_max and dt0 must be positive")
        if self.l_stop <= 0.0 or self.trigger_ratio <= 1.0:
            raise ValueError("need l_stop > 0 and trigger_ratio > 1")
        if self.record_every < 1 or self.corrector_passes < 1:
            raise ValueError("record_every and corrector_passes must be >= 1")

    @property
    def is_singular_study(self) -> bool:
        """True when sigma*d >= 4; otherwise the run is flagged non-singular."""
        return self.sigma * self.d >= 4.0


def build_uniform_grid(m: int, r_max: float, d: int) -> RadialGrid:
    """Uniform grid r_j = j * r_max / (m-1)."""
    if m < MIN_NODES:
        raise ValueError(f"node count {m} below the minimum {MIN_NODES}")
    if r_max <= 0.0:
        raise ValueError("r_max must be positive")
    return RadialGrid(np.linspace(0.0, float(r_max), int(m)), d)


def sphere_surface(d: int) -> float:
    """Surface of the unit (d-1)-sphere; d=1 counts both half-lines."""
    return 2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0)


def evaluate_initial_condition(
    ic: InitialCondition, grid: RadialGrid, sigma: float
) -> FieldSnapshot:
    """Sample an initial condition on a grid. Deterministic."""
    r = grid.nodes
    if ic.family == "gaussian":
        values = ic.amplitude * np.exp(-(r ** ic.exponent))
    else:
        if ic.profile_nodes is None or ic.profile_values is None:
            raise ValueError(
                "scaled_ground_state initial condition requires a supplied profile"
            )
        src = FieldSnapshot(
            RadialGrid(np.asarray(ic.profile_nodes, dtype=float), grid.d),
            np.asarray(ic.profile_values, dtype=complex),
            t=0.0,
            sigma=sigma,
            d=grid.d,
        )
        values = ic.amplitude * interpolate_to_grid(src, grid).values
    return FieldSnapshot(grid, values.astype(complex), t=0.0, sigma=sigma, d=grid.d)


def _window_starts(positions: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    """Start of the 7-node stencil window for every query position.

    Windows are indices into the even-extended node set: start may go down
    to -3, where extended index -k stands for the mirrored node at -r_k.
    """
    m = nodes.size
    if m < STENCIL_WIDTH:
        raise ValueError("source grid needs at least seven nodes")
    j = np.searchsorted(nodes, positions, side="right") - 1
    j = np.clip(j, 0, m - 2)
    return np.clip(j - 3, -3, m - STENCIL_WIDTH)


def _extended(nodes: np.ndarray, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Positions and folded node indices for (possibly negative) extended indices."""
    folded = np.abs(idx)
    pos = np.where(idx < 0, -nodes[folded], nodes[folded])
    return pos, folded


def interpolate_to_grid(src: FieldSnapshot, dst: RadialGrid) -> FieldSnapshot:
    """Seven-point (degree-6) local polynomial interpolation onto a new grid.

    Even extension across r=0 keeps the stencils centered near the origin,
    matching the vanishing odd derivatives of radial fields. Exact on
    polynomials of degree <= 6 away from the mirrored region, and on even
    polynomials everywhere.
    """
    r_src = src.grid.nodes
    x = dst.nodes
    if x[-1] > r_src[-1] * (1.0 + 1e-12):
        raise ValueError("destination grid extends beyond the source range")

    starts = _window_starts(x, r_src)
    idx = starts[:, None] + np.arange(STENCIL_WIDTH)[None, :]
    xw, folded = _extended(r_src, idx)

    # Lagrange form, vectorized over destination nodes. A query exactly on a
    # window node comes out exact: its weight reduces to 1, the others to 0.
    dx = x[:, None] - xw
    weights = np.empty_like(dx)
    for i in range(STENCIL_WIDTH):
        diff = xw[:, i : i + 1] - np.delete(xw, i, axis=1)
        num = np.prod(np.delete(dx, i, axis=1), axis=1)
        weights[:, i] = num / np.prod(diff, axis=1)
    vals = np.take(src.values, folded)
    out = np.einsum("ij,ij->i", weights, vals)

    return FieldSnapshot(dst, out, t=src.t, sigma=src.sigma, d=dst.d)


def _interval_weights(grid: RadialGrid, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Degree-6 interpolatory quadrature weights for each interval.

    For interval m the rule integrates p(r) * r^(d-1) exactly over
    [r_m, r_{m+1}] for polynomials p of degree <= 6, using the same 7-node
    windows (with even extension) as the interpolation.
    """
    r = grid.nodes
    m = r.size
    mids = 0.5 * (r[:-1] + r[1:])
    starts = _window_starts(mids, r)
    idx = starts[:, None] + np.arange(STENCIL_WIDTH)[None, :]
    xw, folded = _extended(r, idx)

    a = r[:-1]
    b = r[1:]
    center = mids
    width = np.maximum(xw.max(axis=1) - xw.min(axis=1), 1e-300)

    t = (xw - center[:, None]) / width[:, None]
    vand = t[:, :, None] ** np.arange(STENCIL_WIDTH)[None, None, :]

    # Moments of t^j * r^(d-1) over the interval, via binomial expansion of
    # r^(d-1) = (w*t + c)^(d-1); d is a small integer so this is exact.
    ta = (a - center) / width
    tb = (b - center) / width
    moments = np.zeros((m - 1, STENCIL_WIDTH))
    for i in range(d):
        coeff = math.comb(d - 1, i) * center ** (d - 1 - i) * width**i
        for j in range(STENCIL_WIDTH):
            p = j + i + 1
            moments[:, j] += coeff * (tb**p - ta**p) / p
    moments *= width[:, None]

    w = np.linalg.solve(np.swapaxes(vand, 1, 2), moments[:, :, None])[:, :, 0]
    return w, folded


def nodal_weights(grid: RadialGrid, d: int | None = None, order: int = 6) -> np.ndarray:
    """Per-node weights W with sum(W * f) = integral of f(r) r^(d-1) dS.

    Precompute these once per grid when many integrals are needed (per-step
    conservation diagnostics).
    """
    if d is None:
        d = grid.d
    r = grid.nodes
    if order == 2:
        w = np.zeros(grid.m)
        seg = 0.5 * np.diff(r) * r[:-1] ** (d - 1), 0.5 * np.diff(r) * r[1:] ** (d - 1)
        w[:-1] += seg[0]
        w[1:] += seg[1]
    elif order == 6:
        iw, folded = _interval_weights(grid, d)
        w = np.zeros(grid.m)
        np.add.at(w, folded.ravel(), iw.ravel())
    else:
        raise ValueError("supported quadrature orders: 2, 6")
    return sphere_surface(d) * w


def quadrature(
    grid: RadialGrid, values: np.ndarray, d: int | None = None, order: int = 2
) -> float | complex:
    """Integral of values(r) * r^(d-1) over [0, r_max] times the sphere surface.

    order=2 is the trapezoidal rule; order=6 uses the degree-6 interpolatory
    rule built from the seven-point windows (needed where regrid bookkeeping
    and conservation drift demand better than O(h^2) bias).
    """
    if d is None:
        d = grid.d
    values = np.asarray(values)
    if not np.all(np.isfinite(values)):
        raise ValueError("quadrature requires finite values")
    out = np.sum(nodal_weights(grid, d, order) * values)
    return complex(out) if np.iscomplexobj(values) else float(out)
