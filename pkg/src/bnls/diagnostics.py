"""Measured quantities and fits for collapse runs.

Everything here is pure post-processing on snapshots and recorded series:
conserved integrals, the focusing factor and its H2 companion, rescaled
self-similar profiles, blowup power-law fits, the L^3 L_t limit and the
universal constant extracted from it, power concentration, far-field decay,
and the bifurcation radius of rescaled-profile agreement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.optimize import minimize_scalar

from .grids import FieldSnapshot, nodal_weights, sphere_surface
from .operators import (
    BandedOperator,
    apply_operator,
    assemble_gradient,
    assemble_laplacian,
)

__all__ = [
    "TimeSeries",
    "BlowupFit",
    "ConservedQuantities",
    "RescaledProfile",
    "L3LtResult",
    "FitError",
    "focusing_factor",
    "h2_focusing_factor",
    "conserved_quantities",
    "rescale_snapshot",
    "fit_blowup",
    "l3lt_series",
    "power_in_ball",
    "farfield_decay_fit",
    "bifurcation_position",
]


class FitError(RuntimeError):
    """Not enough samples, or the rate fit failed to converge."""


@dataclass(frozen=True)
class TimeSeries:
    """Per-step record of a run; arrays share one length.

    Close to collapse the interesting quantity T_c - t falls far below the
    float64 resolution of t itself, so records also carry t_rev, the exact
    time remaining until the last recorded sample (accumulated in extended
    precision by the stepper). Rate fits work with t_rev; the t column is a
    rounded shadow that may repeat at the final few records.
    """

    t: np.ndarray
    t_rev: np.ndarray
    dt: np.ndarray
    amplitude: np.ndarray
    focusing: np.ndarray
    power: np.ndarray
    hamiltonian: np.ndarray
    momentum: np.ndarray
    dilation: np.ndarray
    tau: np.ndarray
    n_core: np.ndarray
    regridded: np.ndarray

    def __post_init__(self):
        n = self.t.size
        for name in (
            "t_rev", "dt", "amplitude", "focusing", "power", "hamiltonian",
            "momentum", "dilation", "tau", "n_core", "regridded",
        ):
            if getattr(self, name).size != n:
                raise ValueError(f"column {name} length mismatch")
        if n > 1:
            if not np.all(np.diff(self.t) >= 0):
                raise ValueError("record times must be nondecreasing")
            if not np.all(np.diff(self.t_rev) < 0):
                raise ValueError("time-before-end must be strictly decreasing")
        if np.any(self.focusing <= 0):
            raise ValueError("focusing factor must stay positive")

    def __len__(self) -> int:
        return self.t.size


@dataclass(frozen=True)
class BlowupFit:
    """L ~ kappa * (T_c - t)^p over a focusing window."""

    kappa: float
    p: float
    t_c: float
    window: tuple[float, float]
    rms_residual: float
    n_samples: int
    fallback: bool = False


@dataclass(frozen=True)
class ConservedQuantities:
    power: float
    hamiltonian: float
    momentum: float
    dilation: float
    variance_rate: float


@dataclass(frozen=True)
class RescaledProfile:
    """Self-similar view: values = L^(2/sigma) psi(rho L), peak normalized."""

    rho: np.ndarray
    values: np.ndarray
    focusing: float
    sigma: float
    d: int

    @property
    def modulus(self) -> np.ndarray:
        return np.abs(self.values)


@dataclass(frozen=True)
class L3LtResult:
    t: np.ndarray
    focusing: np.ndarray
    l3lt: np.ndarray
    kappa: float
    trend: float
    converged: bool


def focusing_factor(snapshot: FieldSnapshot) -> float:
    """L = |psi|_inf^(-sigma/2)."""
    peak = float(np.max(np.abs(snapshot.values)))
    if peak == 0.0:
        raise ValueError("focusing factor undefined for a zero field")
    return peak ** (-snapshot.sigma / 2.0)


def h2_focusing_factor(
    snapshot: FieldSnapshot, lap: BandedOperator | None = None
) -> float:
    """l = |Lap psi|_2^(-1/2); obeys l <= K (T_c - t)^(1/4) along collapse."""
    if not np.any(snapshot.values):
        raise ValueError("H2 focusing factor undefined for a zero field")
    if lap is None:
        lap = assemble_laplacian(snapshot.grid, snapshot.d)
    lap_psi = apply_operator(lap, snapshot.values)
    w = nodal_weights(snapshot.grid, snapshot.d, order=6)
    norm_sq = float(np.sum(w * np.abs(lap_psi) ** 2))
    return norm_sq ** (-0.25)


def conserved_quantities(
    snapshot: FieldSnapshot,
    lap: BandedOperator | None = None,
    grad: BandedOperator | None = None,
    weights: np.ndarray | None = None,
) -> ConservedQuantities:
    """Power, Hamiltonian, radial momentum, and the dilation quantity J.

    J = integral of r Im{psi* psi_r} + 4 t H is conserved in the critical
    case; its first term is also the growth rate of the variance surrogate.
    """
    grid, d, sigma = snapshot.grid, snapshot.d, snapshot.sigma
    if lap is None:
        lap = assemble_laplacian(grid, d)
    if grad is None:
        grad = assemble_gradient(grid, d)
    if weights is None:
        weights = nodal_weights(grid, d, order=6)
    psi = snapshot.values
    abs_sq = np.abs(psi) ** 2

    power = float(np.sum(weights * abs_sq))
    lap_psi = apply_operator(lap, psi)
    hamiltonian = float(
        np.sum(weights * np.abs(lap_psi) ** 2)
        - np.sum(weights * abs_sq ** (sigma + 1.0)) / (sigma + 1.0)
    )
    flux = np.imag(np.conj(psi) * apply_operator(grad, psi))
    momentum = float(np.sum(weights * flux))
    variance_rate = float(np.sum(weights * grid.nodes * flux))
    dilation = variance_rate + 4.0 * snapshot.t * hamiltonian
    return ConservedQuantities(power, hamiltonian, momentum, dilation, variance_rate)


def rescale_snapshot(snapshot: FieldSnapshot) -> RescaledProfile:
    """Rescale to the self-similar frame rho = r/L, amplitude 1 at the peak.

    The value at the peak is rotated to the positive real axis, removing the
    accumulated global phase so profile comparisons and the self-similar
    residual see only the internal phase structure.
    """
    focusing = focusing_factor(snapshot)
    scale = focusing ** (2.0 / snapshot.sigma)
    values = scale * snapshot.values
    peak_idx = int(np.argmax(np.abs(values)))
    phase = values[peak_idx] / abs(values[peak_idx])
    return RescaledProfile(
        rho=snapshot.grid.nodes / focusing,
        values=values / phase,
        focusing=focusing,
        sigma=snapshot.sigma,
        d=snapshot.d,
    )


def _window_mask(series: TimeSeries, window: tuple[float, float]) -> np.ndarray:
    """Samples inside the focusing window, after the last excursion above it
    (the pre-collapse transient does not follow the power law)."""
    l_lo, l_hi = min(window), max(window)
    mask = (series.focusing >= l_lo) & (series.focusing <= l_hi)
    above = np.flatnonzero(series.focusing > l_hi)
    if above.size:
        mask[: above[-1] + 1] = False
    return mask


def fit_blowup(
    series: TimeSeries,
    window: tuple[float, float] = (1e-5, 1e-2),
    min_samples: int = 50,
) -> BlowupFit:
    """Nonlinear least squares of log L = log kappa + p log(T_c - t).

    Works in time-before-end coordinates: with s = t_rev (exact down to the
    last decades of focusing) and delta = T_c - t_last > 0 the model reads
    log L = log kappa + p log(s + delta). delta is profiled out by a bounded
    1D minimization; the inner problem is linear. Falls back to fixing delta
    from the final L^3 L_t extrapolation if the profiled fit fails to
    produce a usable exponent.
    """
    mask = _window_mask(series, window)
    if int(mask.sum()) < min_samples:
        raise FitError(
            f"only {int(mask.sum())} samples inside the focusing window {window}"
        )
    s = series.t_rev[mask] - series.t_rev[-1]  # time before the last record
    log_l = np.log(series.focusing[mask])
    span = max(float(s[0] - s[-1]), 1e-300)

    def inner(delta: float):
        x = np.log(s + delta)
        a = np.stack([np.ones_like(x), x], axis=1)
        coef, *_ = np.linalg.lstsq(a, log_l, rcond=None)
        resid = log_l - a @ coef
        return coef, float(np.sqrt(np.mean(resid**2)))

    def objective(u: float) -> float:
        return inner(math.exp(u))[1]

    smallest = max(float(s[-1]), span * 1e-18, 1e-300)
    bounds = (math.log(smallest * 1e-6), math.log(span * 10.0))
    best = minimize_scalar(objective, bounds=bounds, method="bounded",
                           options={"xatol": 1e-12})
    delta = math.exp(float(best.x))
    (log_kappa, p), rms = inner(delta)

    fallback = not (np.isfinite(rms) and 0.0 < p < 1.0)
    if fallback:
        l3 = l3lt_series(series)
        if not (np.isfinite(l3.l3lt[-1]) and l3.l3lt[-1] < 0):
            raise FitError("rate fit failed and no usable L^3 L_t extrapolation")
        l_last = float(series.focusing[mask][-1])
        delta = float(s[-1]) + l_last**4 / (-4.0 * float(l3.l3lt[-1]))
        (log_kappa, p), rms = inner(delta)

    return BlowupFit(
        kappa=float(np.exp(log_kappa)),
        p=float(p),
        t_c=float(series.t[-1] + series.t_rev[-1] + delta),
        window=(float(series.focusing[mask].max()), float(series.focusing[mask].min())),
        rms_residual=rms,
        n_samples=int(mask.sum()),
        fallback=fallback,
    )


def _local_quadratic_slope(t: np.ndarray, y: np.ndarray, half: int = 2) -> np.ndarray:
    """Derivative dy/dt at interior samples from quadratic fits over
    2*half+1 consecutive (nonuniformly spaced) samples."""
    w = 2 * half + 1
    tw = sliding_window_view(t, w)
    yw = sliding_window_view(y, w)
    tau = tw - tw[:, half][:, None]
    v = tau[:, :, None] ** np.arange(3)[None, None, :]
    vt = np.swapaxes(v, 1, 2)
    coef = np.linalg.solve(vt @ v, (vt @ yw[:, :, None]))[:, :, 0]
    return coef[:, 1]


def l3lt_series(series: TimeSeries, tail_fraction: float = 0.1) -> L3LtResult:
    """L^3 L_t along the run, the kappa estimate from its tail, and the trend.

    L_t uses centered differences smoothed by local quadratic fits over five
    samples. kappa = (-4 * mean of L^3 L_t over the final tail_fraction of
    samples)^(1/4). The trend compares |L^3 L_t| at the last recorded decade
    of focusing against one decade earlier: values near 0 mean a converged
    (supercritical-type) limit, values near 1 mean a slow crawl toward 0-
    (critical-type).
    """
    if len(series) < 5:
        raise FitError("need at least five samples for L^3 L_t")
    half = 2
    # -t_rev advances like t but keeps exact differences near collapse
    slope = _local_quadratic_slope(-series.t_rev, series.focusing, half)
    t = series.t[half:-half]
    focusing = series.focusing[half:-half]
    l3lt = focusing**3 * slope

    n_tail = max(int(len(l3lt) * tail_fraction), 1)
    tail = l3lt[-n_tail:]
    mean_tail = float(np.mean(tail))
    kappa = (-4.0 * mean_tail) ** 0.25 if mean_tail < 0.0 else float("nan")

    l_end = focusing[-1]
    idx_prev = int(np.argmin(np.abs(focusing - 10.0 * l_end)))
    v_end, v_prev = float(l3lt[-1]), float(l3lt[idx_prev])
    trend = (v_end - v_prev) / abs(v_end) if v_end != 0 else float("inf")
    converged = abs(trend) < 0.5
    return L3LtResult(t, focusing, l3lt, kappa, trend, converged)


def power_in_ball(snapshot: FieldSnapshot, radius: float) -> float:
    """Quadrature of |psi|^2 r^(d-1) dS over r < radius (trapezoid with a
    fractional last cell)."""
    r = snapshot.grid.nodes
    if radius > r[-1] * (1 + 1e-12):
        raise ValueError("radius beyond the grid")
    if radius <= 0.0:
        return 0.0
    integrand = np.abs(snapshot.values) ** 2 * r ** (snapshot.d - 1)
    j = int(np.searchsorted(r, radius, side="right")) - 1
    total = np.trapezoid(integrand[: j + 1], r[: j + 1]) if j > 0 else 0.0
    if radius > r[j]:
        f_r = np.interp(radius, r, integrand)
        total += 0.5 * (integrand[j] + f_r) * (radius - r[j])
    return sphere_surface(snapshot.d) * float(total)


def farfield_decay_fit(
    profile: RescaledProfile, rho_range: tuple[float, float]
) -> tuple[float, float]:
    """Log-log linear fit of |values| over rho_range -> (exponent, prefactor).

    The admissible far field decays like rho^(-2/sigma)."""
    lo, hi = rho_range
    sel = (profile.rho >= lo) & (profile.rho <= hi) & (profile.modulus > 0)
    if int(sel.sum()) < 8:
        raise FitError("too few resolved points in the requested rho range")
    x = np.log(profile.rho[sel])
    y = np.log(profile.modulus[sel])
    slope, intercept = np.polyfit(x, y, 1)
    return float(slope), float(np.exp(intercept))


def bifurcation_position(
    profile_a: RescaledProfile,
    profile_b: RescaledProfile,
    threshold: float = 0.05,
    rho_min: float = 0.5,
    consecutive: int = 3,
) -> float:
    """Smallest rho where the less-focused profile (a) departs from the more
    focused one (b) by more than the relative threshold; inf when they agree
    over the whole common range. rho* L_a estimates the physical radius r_c
    of the self-similar region."""
    if profile_a.focusing <= profile_b.focusing:
        raise ValueError("profile_a must be the less focused of the pair")
    hi = min(profile_a.rho[-1], profile_b.rho[-1])
    if hi <= rho_min:
        raise ValueError("profiles share no usable rho range")
    rho = np.geomspace(rho_min, hi, 2000)
    mod_a = np.interp(rho, profile_a.rho, profile_a.modulus)
    mod_b = np.interp(rho, profile_b.rho, profile_b.modulus)
    floor = 1e-12 * float(np.max(mod_b))
    rel = np.abs(mod_a - mod_b) / np.maximum(mod_b, floor)
    above = rel > threshold
    run = np.convolve(above.astype(int), np.ones(consecutive, dtype=int), "valid")
    hits = np.flatnonzero(run == consecutive)
    if hits.size == 0:
        return float("inf")
    return float(rho[hits[0]])
