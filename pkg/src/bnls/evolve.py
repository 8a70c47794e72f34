"""Predictor-corrector Crank-Nicolson evolution with adaptive regridding.

One run owns a RunState and marches i psi_t = Lap_r^2 psi - |psi|^(2 sigma) psi
until the target focusing level, a configured end time, or a halt condition.
The time step shrinks like L^4 so the collapse is traversed with roughly
constant phase advance per step; the grid is redistributed whenever the core
under-resolves past the trigger ratio.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .diagnostics import TimeSeries, conserved_quantities, focusing_factor
from .grids import (
    FieldSnapshot,
    SimulationConfig,
    build_uniform_grid,
    evaluate_initial_condition,
    nodal_weights,
)
from .operators import (
    BandedOperator,
    LinearSolveError,
    ShiftedSolver,
    apply_operator,
    assemble_biharmonic,
    assemble_gradient,
    assemble_laplacian,
)
from .regrid import RegridResult, regrid, regrid_needed

__all__ = ["OperatorSet", "RunState", "RunResult", "adapt_dt", "cn_step", "run_simulation"]

HALT_TARGET = "target_reached"
HALT_TIME = "time_end"
HALT_STEPS = "max_steps"
HALT_SOLVER = "solver_failure"
HALT_NAN = "non_finite"
HALT_AMPLITUDE = "amplitude_overflow"


@dataclass(frozen=True)
class OperatorSet:
    """Operators and quadrature weights bound to one grid."""

    biharmonic: BandedOperator
    laplacian: BandedOperator
    gradient: BandedOperator
    weights: np.ndarray

    @classmethod
    def build(cls, grid, d: int) -> "OperatorSet":
        return cls(
            biharmonic=assemble_biharmonic(grid, d),
            laplacian=assemble_laplacian(grid, d),
            gradient=assemble_gradient(grid, d),
            weights=nodal_weights(grid, d, order=6),
        )


@dataclass(frozen=True)
class RunState:
    """Single-owner marching state.

    Time is carried as an unevaluated double-double (t_hi + t_lo) because the
    collapse squeezes T_c - t far below the float64 resolution of t; the
    snapshot sees the rounded sum.
    """

    snapshot: FieldSnapshot
    dt: float
    step: int
    tau: float
    last_regrid_focusing: float
    t_hi: float = 0.0
    t_lo: float = 0.0
    halt_reason: str | None = None


def _dd_add(hi: float, lo: float, x: float) -> tuple[float, float]:
    """Add x to the double-double value (hi, lo)."""
    s = hi + x
    if abs(hi) >= abs(x):
        e = (hi - s) + x
    else:
        e = (x - s) + hi
    lo += e
    hi2 = s + lo
    return hi2, lo - (hi2 - s)


def adapt_dt(dt0: float, focusing: float, initial_focusing: float) -> float:
    """dt = dt0 * min(1, (L/L0)^4): near-constant tau advance per step."""
    return dt0 * min(1.0, (focusing / initial_focusing) ** 4)


def _nonlinear(values: np.ndarray, sigma: float) -> np.ndarray:
    return np.abs(values) ** (2.0 * sigma) * values


def cn_step(
    state: RunState,
    op: BandedOperator,
    corrector_passes: int = 2,
    solve_tol: float | None = 1e-10,
) -> RunState:
    """One Crank-Nicolson step with an explicit predictor and midpoint
    corrector passes for the nonlinear term.

    (I + i dt/2 A) psi_new = (I - i dt/2 A) psi_old + i dt |psi|^(2s) psi at
    the midpoint average; the predictor evaluates the nonlinearity at the old
    state. Solver failures and non-finite results set the halt reason instead
    of raising.
    """
    snap = state.snapshot
    dt = state.dt
    psi = snap.values
    sigma = snap.sigma
    alpha = 0.5j * dt
    try:
        solver = ShiftedSolver(op, alpha)
        base = psi - alpha * apply_operator(op, psi)
        nl = _nonlinear(psi, sigma)
        # residual accuracy is enforced on the final solve of the step
        new = solver.solve(base + 1j * dt * nl, tol=None)
        for k in range(corrector_passes):
            nl = _nonlinear(0.5 * (psi + new), sigma)
            final = k == corrector_passes - 1
            new = solver.solve(base + 1j * dt * nl, tol=solve_tol if final else None)
    except LinearSolveError:
        return replace(state, halt_reason=HALT_SOLVER)
    if not np.all(np.isfinite(new.view(float))):
        return replace(state, halt_reason=HALT_NAN)
    amp = float(np.max(np.abs(psi)))
    d_tau = dt * amp ** (2.0 * sigma) if amp > 0 else 0.0
    t_hi, t_lo = _dd_add(state.t_hi, state.t_lo, dt)
    return replace(
        state,
        snapshot=snap.with_values(new, t=t_hi + t_lo),
        step=state.step + 1,
        tau=state.tau + d_tau,
        t_hi=t_hi,
        t_lo=t_lo,
    )


@dataclass
class RunResult:
    """Everything a finished (or halted) run hands to analysis."""

    config: SimulationConfig
    series: TimeSeries
    snapshots: dict[int, FieldSnapshot]
    final: FieldSnapshot
    halt_reason: str
    regrids: list[RegridResult] = field(default_factory=list)
    elapsed: float = 0.0
    initial_focusing: float = 0.0

    @property
    def final_focusing(self) -> float:
        return focusing_factor(self.final)


class _SeriesBuilder:
    def __init__(self):
        self.rows: list[tuple] = []
        self.times: list[tuple[float, float]] = []

    def add(self, state: RunState, ops: OperatorSet, regridded: bool):
        snap = state.snapshot
        q = conserved_quantities(snap, ops.laplacian, ops.gradient, ops.weights)
        amp = float(np.max(np.abs(snap.values)))
        focusing = amp ** (-snap.sigma / 2.0)
        core = 4.0 * focusing
        n_core = int(np.searchsorted(snap.grid.nodes, core))
        self.times.append((state.t_hi, state.t_lo))
        self.rows.append(
            (snap.t, state.dt, amp, focusing, q.power, q.hamiltonian,
             q.momentum, q.dilation, state.tau, n_core, regridded)
        )

    def build(self) -> TimeSeries:
        cols = list(zip(*self.rows))
        arrays = [np.asarray(c, dtype=float) for c in cols[:10]]
        hi_end, lo_end = self.times[-1]
        t_rev = np.asarray(
            [math.fsum((hi_end, -hi, lo_end, -lo)) for hi, lo in self.times]
        )
        return TimeSeries(
            arrays[0], t_rev, *arrays[1:],
            regridded=np.asarray(cols[10], dtype=bool),
        )


def _amplitude_bound(config: SimulationConfig) -> float:
    overflow_safe = 10.0 ** (308.0 / (2.0 * config.sigma + 2.0))
    return min(config.amplitude_halt, 0.1 * overflow_safe)


def run_simulation(config: SimulationConfig) -> RunResult:
    """March a configured run; always returns the partial series on halts."""
    start = time.perf_counter()
    grid = build_uniform_grid(config.nodes, config.r_max, config.d)
    snap = evaluate_initial_condition(config.ic, grid, config.sigma)
    if not snap.is_finite():
        raise ValueError("initial condition is not finite")

    ops = OperatorSet.build(grid, config.d)
    l0 = focusing_factor(snap)
    state = RunState(snap, config.dt0, 0, 0.0, l0)
    amp_halt = _amplitude_bound(config)

    series = _SeriesBuilder()
    series.add(state, ops, False)
    snapshots: dict[int, FieldSnapshot] = {}
    regrids: list[RegridResult] = []
    next_decade = 1
    halt = None
    just_regridded = False

    while halt is None:
        if state.step >= config.max_steps:
            halt = HALT_STEPS
            break
        focusing = focusing_factor(state.snapshot)
        state = replace(state, dt=adapt_dt(config.dt0, focusing, l0))
        state = cn_step(state, ops.biharmonic, config.corrector_passes, config.solve_tol)
        if state.halt_reason is not None:
            halt = state.halt_reason
            break

        snap = state.snapshot
        amp = float(np.max(np.abs(snap.values)))
        focusing = amp ** (-config.sigma / 2.0)

        if config.snapshot_decades:
            while focusing <= 10.0 ** (-next_decade):
                snapshots[next_decade] = snap
                next_decade += 1

        if amp >= amp_halt:
            halt = HALT_AMPLITUDE
        elif config.is_singular_study and focusing <= config.l_stop:
            halt = HALT_TARGET
        elif config.t_end is not None and snap.t >= config.t_end:
            halt = HALT_TIME

        did_regrid = False
        if halt is None and regrid_needed(
            snap, focusing, state.last_regrid_focusing, config.trigger_ratio,
            config.n_core_min, config.core_radius_factor,
        ):
            result = regrid(snap, config.w2_cap, config.w_alpha, config.w_beta)
            regrids.append(result)
            state = replace(
                state, snapshot=result.snapshot, last_regrid_focusing=focusing
            )
            ops = OperatorSet.build(result.snapshot.grid, config.d)
            did_regrid = True

        if (
            state.step % config.record_every == 0
            or did_regrid
            or just_regridded
            or halt is not None
        ):
            series.add(state, ops, did_regrid)
        just_regridded = did_regrid

    return RunResult(
        config=config,
        series=series.build(),
        snapshots=snapshots,
        final=state.snapshot,
        halt_reason=halt,
        regrids=regrids,
        elapsed=time.perf_counter() - start,
        initial_focusing=l0,
    )
