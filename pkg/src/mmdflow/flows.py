"""Training dynamics for the adversarial density estimator.

Two families:

* two-time-scale: dp/dt = k*(target - p), optionally with the velocity
  projected onto the simplex tangent cone at every stage so p stays a
  density;
* one-time-scale: dp/dt = D, dD/dt = k*(target - p) - c k*D, a damped
  second-order system in p (friction 0 < c <= sqrt(2) keeps every mode
  underdamped because all eigenvalues are at most 1).

Both have closed-form spectral solutions on the kernel eigenbasis (per-mode
exponentials / Duhamel integrals); RK4 with a fixed step provides the
independent integrator. Null-space components of the state are carried
unchanged by the spectral solvers - the discretized kernel annihilates them,
and RK4 does the same up to roundoff.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError, IntegrationError, UsageError
from .features import (
    FeatureEnsemble,
    SpectralDecomposition,
    feature_integrals,
    kernel_matrix,
    phi_transpose_apply,
)
from .grid import (
    Grid,
    GridDensity,
    GridField,
    SampleSet,
    norm_l2,
    project_simplex,
    project_tangent_cone,
)

RK4_STABILITY_MARGIN = 0.5
DEFAULT_DT_FACTOR = 0.1


@dataclass(frozen=True, eq=False)
class TwoTimeScaleState:
    p: GridField
    t: float
    projected: bool = False


@dataclass(frozen=True, eq=False)
class OneTimeScaleState:
    p: GridField
    d: GridField
    t: float
    c: float

    def __post_init__(self):
        if not 0.0 < self.c <= math.sqrt(2.0) + 1e-12:
            raise DomainError(f"friction c must lie in (0, sqrt(2)], got {self.c}")


@dataclass(frozen=True)
class FlowConfig:
    """Integration plan: step size, horizon, and recording cadence.

    record_times overrides the uniform record_every grid; both integrators
    land exactly on the requested times (RK4 subdivides each interval).
    """

    t_end: float
    dt: float | None = None
    integrator: str = "rk4"
    record_every: float | None = None
    record_times: tuple | None = None
    cone_eps: float = 1e-6

    def times(self) -> np.ndarray:
        if self.record_times is not None:
            ts = np.asarray(self.record_times, dtype=float)
            if ts.size == 0 or np.any(np.diff(ts) <= 0) or ts[0] < 0:
                raise UsageError("record_times must be strictly increasing and nonnegative")
            return ts
        if self.record_every is None:
            return np.array([0.0, self.t_end]) if self.t_end > 0 else np.array([0.0])
        n = int(round(self.t_end / self.record_every))
        return np.arange(n + 1) * self.record_every


def _lambda_max(ens: FeatureEnsemble, grid: Grid) -> float:
    """Top eigenvalue of the discretized operator via a few power iterations."""
    K = kernel_matrix(ens, grid)
    v = np.ones(grid.n_cells) / math.sqrt(grid.n_cells)
    lam = 0.0
    for _ in range(60):
        w = K @ v
        lam_new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        if abs(lam_new - lam) < 1e-12 * max(lam_new, 1e-30):
            break
        lam = lam_new
    return max(lam, lam_new)


def default_dt(ens: FeatureEnsemble, grid: Grid, dynamics: str = "two_time_scale") -> float:
    lam = _lambda_max(ens, grid)
    if dynamics == "two_time_scale":
        return DEFAULT_DT_FACTOR / lam
    return DEFAULT_DT_FACTOR / math.sqrt(lam)


def _check_dt(dt: float, ens: FeatureEnsemble, grid: Grid, dynamics: str) -> None:
    lam = _lambda_max(ens, grid)
    if dynamics == "two_time_scale":
        cap = RK4_STABILITY_MARGIN * 2.0 / lam
    else:
        cap = 0.5 / math.sqrt(lam)
    if dt <= 0 or dt > cap:
        raise UsageError(f"dt={dt} outside the stable range (0, {cap:.4g}] for {dynamics}")


def _forcing(ens: FeatureEnsemble, grid: Grid, target) -> np.ndarray:
    """k*target as a raw value array."""
    return phi_transpose_apply(ens, grid, feature_integrals(ens, target))


def step_two_time_scale(
    state: TwoTimeScaleState, target, ens: FeatureEnsemble, dt: float
) -> TwoTimeScaleState:
    """One RK4 step of dp/dt = k*(target - p); projected variant applies the
    tangent-cone projection to the velocity at every stage and re-projects
    the state after the step."""
    grid = state.p.grid
    _check_dt(dt, ens, grid, "two_time_scale")
    K = kernel_matrix(ens, grid)
    v = _forcing(ens, grid, target)
    new_vals = _rk4_two(state.p.values, v, K, dt, state.projected, grid)
    growth = np.linalg.norm(new_vals) / max(np.linalg.norm(state.p.values), 1e-300)
    if growth > 10.0:
        raise IntegrationError(f"state norm grew {growth:.1f}x in one step; dt too large")
    if state.projected:
        p = project_simplex(GridField(grid, new_vals))
    else:
        p = GridField(grid, new_vals)
    return TwoTimeScaleState(p=p, t=state.t + dt, projected=state.projected)


def _rk4_two(p, forcing, K, dt, projected, grid, cone_eps=1e-6):
    def rate(vals):
        vel = forcing - K @ vals
        if projected:
            q = project_simplex(GridField(grid, vals))
            vel = project_tangent_cone(GridField(grid, vel), q, eps=cone_eps).values
        return vel

    k1 = rate(p)
    k2 = rate(p + 0.5 * dt * k1)
    k3 = rate(p + 0.5 * dt * k2)
    k4 = rate(p + dt * k3)
    return p + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def step_one_time_scale(
    state: OneTimeScaleState, target, ens: FeatureEnsemble, dt: float
) -> OneTimeScaleState:
    """One RK4 step of the coupled system dp/dt = D, dD/dt = k*(target-p) - c k*D."""
    grid = state.p.grid
    _check_dt(dt, ens, grid, "one_time_scale")
    K = kernel_matrix(ens, grid)
    v = _forcing(ens, grid, target)
    p_new, d_new = _rk4_one(state.p.values, state.d.values, v, K, state.c, dt)
    growth = np.linalg.norm(p_new) / max(np.linalg.norm(state.p.values), 1e-300)
    if growth > 10.0:
        raise IntegrationError(f"state norm grew {growth:.1f}x in one step; dt too large")
    return OneTimeScaleState(
        p=GridField(grid, p_new), d=GridField(grid, d_new), t=state.t + dt, c=state.c
    )


def _rk4_one(p, d, forcing, K, c, dt):
    def rate(pp, dd):
        return dd, forcing - K @ pp - c * (K @ dd)

    k1p, k1d = rate(p, d)
    k2p, k2d = rate(p + 0.5 * dt * k1p, d + 0.5 * dt * k1d)
    k3p, k3d = rate(p + 0.5 * dt * k2p, d + 0.5 * dt * k2d)
    k4p, k4d = rate(p + dt * k3p, d + dt * k3d)
    p_new = p + (dt / 6.0) * (k1p + 2 * k2p + 2 * k3p + k4p)
    d_new = d + (dt / 6.0) * (k1d + 2 * k2d + 2 * k3d + k4d)
    return p_new, d_new


# ---------------------------------------------------------------------------
# closed-form spectral solutions


def _split(spec: SpectralDecomposition, vals: np.ndarray):
    """Range coefficients and the (frozen) null-space remainder of a field."""
    coeffs = spec.grid.cell_weight * (spec.eigenfields.T @ vals)
    null = vals - spec.eigenfields @ coeffs
    return coeffs, null


def solve_two_time_scale_spectral(
    p0: GridField, target: GridField, spec: SpectralDecomposition, t: float
) -> GridField:
    """p_t = target + sum_i e^(-lambda_i t) <u0, e_i> e_i + null(u0) for the
    flow dp/dt = k*(target - p) with a grid target."""
    u0, null = _split(spec, p0.values - target.values)
    decayed = spec.eigenfields @ (u0 * np.exp(-spec.eigenvalues * t))
    return GridField(p0.grid, target.values + decayed + null)


def solve_two_time_scale_forced(
    p0: GridField, forcing: np.ndarray, spec: SpectralDecomposition, t: float
) -> GridField:
    """Closed form for dp/dt = f - K p with f = k*(atomic target); per mode
    x_i(t) = f_i/lambda_i + (x_i(0) - f_i/lambda_i) e^(-lambda_i t). The
    null component of p stays frozen (K annihilates it; the null residue of
    f is roundoff and is deliberately not integrated)."""
    x0, null = _split(spec, p0.values)
    f, _ = _split(spec, forcing)
    lam = spec.eigenvalues
    # f/lam * (1 - e^(-lam t)) computed via expm1 so modes with lam*t << 1
    # reduce to f*t without cancellation
    xt = f * (-np.expm1(-lam * t) / lam) + x0 * np.exp(-lam * t)
    return GridField(p0.grid, spec.eigenfields @ xt + null)


def duhamel_solve(a: float, b: float, x0: float, q: float, t) -> np.ndarray | float:
    """Solution of x'' + b x' + a x = q, x(0) = x0, x'(0) = 0, constant q,
    in the oscillatory regime 4a > b^2."""
    if 4.0 * a <= b * b:
        raise DomainError(f"need 4a > b^2 (oscillatory regime), got a={a}, b={b}")
    om = math.sqrt(a - 0.25 * b * b)
    beta = 0.5 * b
    env = np.exp(-beta * np.asarray(t, dtype=float))
    cos, sin = np.cos(om * np.asarray(t)), np.sin(om * np.asarray(t))
    homog = x0 * env * (cos + (beta / om) * sin)
    forced = q * (om - env * (beta * sin + om * cos)) / (a * om)
    out = homog + forced
    return float(out) if np.isscalar(t) else out


def _mode_responses(lam: np.ndarray, c: float, t: float):
    """Homogeneous mode factor, its derivative factor, and the unit-forcing
    response for x'' + c*lam x' + lam x at time t, vectorized over modes."""
    om = np.sqrt(lam - 0.25 * (c * lam) ** 2)
    beta = 0.5 * c * lam
    env = np.exp(-beta * t)
    cos, sin = np.cos(om * t), np.sin(om * t)
    homog = env * (cos + (beta / om) * sin)
    dhomog = -env * (lam / om) * sin
    forced = (om - env * (beta * sin + om * cos)) / (lam * om)
    dforced = env * sin / om
    return homog, dhomog, forced, dforced


def solve_one_time_scale_spectral(
    p0: GridField,
    target,
    spec: SpectralDecomposition,
    c: float,
    t: float,
    ens: FeatureEnsemble | None = None,
) -> tuple[GridField, GridField]:
    """Closed form for the damped second-order flow with D_0 = 0.

    target may be a grid field, or any measure if ens is supplied (the
    forcing k*target is then evaluated through the features). Returns
    (p_t, D_t). p's null component is frozen; D has none by construction.
    """
    if not 0.0 < c <= math.sqrt(2.0) + 1e-12:
        raise DomainError(f"friction c must lie in (0, sqrt(2)], got {c}")
    grid = p0.grid
    lam = spec.eigenvalues
    if isinstance(target, GridField):
        # homogeneous route: never divides by small eigenvalues
        u0, null = _split(spec, p0.values - target.values)
        homog, dhomog, _, _ = _mode_responses(lam, c, t)
        xt = u0 * homog
        dxt = u0 * dhomog
        p_t = target.values + spec.eigenfields @ xt + null
        d_t = spec.eigenfields @ dxt
        return GridField(grid, p_t), GridField(grid, d_t)
    if ens is None:
        raise UsageError("an ensemble is required for atomic targets")
    f_vals = _forcing(ens, grid, target)
    x0, null = _split(spec, p0.values)
    f, _ = _split(spec, f_vals)
    homog, dhomog, forced, dforced = _mode_responses(lam, c, t)
    xt = x0 * homog + f * forced
    dxt = x0 * dhomog + f * dforced
    return GridField(grid, spec.eigenfields @ xt + null), GridField(grid, spec.eigenfields @ dxt)


# ---------------------------------------------------------------------------
# trajectory driver


@dataclass
class Trajectory:
    """Recorded probe values along one deterministic run."""

    times: np.ndarray
    records: dict  # probe name -> np.ndarray aligned with times


def run_trajectory(
    ens: FeatureEnsemble,
    p0: GridField,
    target,
    cfg: FlowConfig,
    probes: dict,
    *,
    dynamics: str = "two_time_scale",
    projected: bool = False,
    c: float | None = None,
    spec: SpectralDecomposition | None = None,
) -> Trajectory:
    """Integrate one flow and evaluate probes at the configured times.

    probes maps names to callables taking the state (TwoTimeScaleState or
    OneTimeScaleState). The spectral integrator evaluates closed forms at
    each record time; rk4 subdivides record intervals with steps <= dt.
    """
    times = cfg.times()
    grid = p0.grid
    if cfg.integrator == "spectral-exact":
        if projected:
            raise UsageError("the projected flow has no closed-form solution")
        if spec is None:
            raise UsageError("spectral integration needs a decomposition")
        out = {name: [] for name in probes}
        target_is_grid = isinstance(target, GridField)
        if dynamics == "two_time_scale":
            forcing = None if target_is_grid else _forcing(ens, grid, target)
            for t in times:
                if target_is_grid:
                    p = solve_two_time_scale_spectral(p0, target, spec, t)
                else:
                    p = solve_two_time_scale_forced(p0, forcing, spec, t)
                state = TwoTimeScaleState(p=p, t=float(t), projected=False)
                for name, probe in probes.items():
                    out[name].append(probe(state))
        else:
            if c is None:
                raise UsageError("one-time-scale dynamics needs a friction c")
            for t in times:
                p, d = solve_one_time_scale_spectral(p0, target, spec, c, float(t), ens=ens)
                state = OneTimeScaleState(p=p, d=d, t=float(t), c=c)
                for name, probe in probes.items():
                    out[name].append(probe(state))
        return Trajectory(times=times, records={k: np.asarray(v) for k, v in out.items()})

    if cfg.integrator != "rk4":
        raise UsageError(f"unknown integrator {cfg.integrator!r}")
    dt = cfg.dt if cfg.dt is not None else default_dt(ens, grid, dynamics)
    _check_dt(dt, ens, grid, dynamics)
    K = kernel_matrix(ens, grid)
    forcing = _forcing(ens, grid, target)

    out = {name: [] for name in probes}
    if dynamics == "two_time_scale":
        p_vals = project_simplex(p0).values if projected else p0.values.copy()

        def record(t):
            pf = GridField(grid, p_vals)
            state = TwoTimeScaleState(
                p=project_simplex(pf) if projected else pf, t=t, projected=projected
            )
            for name, probe in probes.items():
                out[name].append(probe(state))

        t_now = 0.0
        if times[0] == 0.0:
            record(0.0)
            remaining = times[1:]
        else:
            remaining = times
        for t_next in remaining:
            span = t_next - t_now
            n_sub = max(1, int(math.ceil(span / dt - 1e-12)))
            h = span / n_sub
            for _ in range(n_sub):
                p_prev = p_vals
                p_vals = _rk4_two(p_vals, forcing, K, h, projected, grid, cfg.cone_eps)
                growth = np.linalg.norm(p_vals) / max(np.linalg.norm(p_prev), 1e-300)
                if growth > 10.0:
                    raise IntegrationError(f"norm grew {growth:.1f}x in one rk4 step")
                if projected:
                    p_vals = project_simplex(GridField(grid, p_vals)).values
            t_now = t_next
            record(t_now)
    else:
        if c is None:
            raise UsageError("one-time-scale dynamics needs a friction c")
        if not 0.0 < c <= math.sqrt(2.0) + 1e-12:
            raise DomainError(f"friction c must lie in (0, sqrt(2)], got {c}")
        p_vals = p0.values.copy()
        d_vals = np.zeros_like(p_vals)

        def record(t):
            state = OneTimeScaleState(
                p=GridField(grid, p_vals), d=GridField(grid, d_vals), t=t, c=c
            )
            for name, probe in probes.items():
                out[name].append(probe(state))

        t_now = 0.0
        if times[0] == 0.0:
            record(0.0)
            remaining = times[1:]
        else:
            remaining = times
        for t_next in remaining:
            span = t_next - t_now
            n_sub = max(1, int(math.ceil(span / dt - 1e-12)))
            h = span / n_sub
            for _ in range(n_sub):
                p_vals, d_vals = _rk4_one(p_vals, d_vals, forcing, K, c, h)
                if not np.all(np.isfinite(p_vals)):
                    raise IntegrationError("non-finite state during rk4 integration")
            t_now = t_next
            record(t_now)
    return Trajectory(times=times, records={k: np.asarray(v) for k, v in out.items()})
