"""Flow dynamics: RK4 steps, closed-form spectral solutions, Duhamel."""

import math

import numpy as np
import pytest

from mmdflow.errors import DomainError, UsageError
from mmdflow.features import make_pair_in_h, mmd_loss, sample_rho0, spectral_decompose
from mmdflow.flows import (
    FlowConfig,
    OneTimeScaleState,
    TwoTimeScaleState,
    duhamel_solve,
    run_trajectory,
    solve_one_time_scale_spectral,
    solve_two_time_scale_forced,
    solve_two_time_scale_spectral,
    step_one_time_scale,
    step_two_time_scale,
    _forcing,
    _mode_responses,
)
from mmdflow.grid import (
    GridField,
    SampleSet,
    integrate,
    make_grid,
    norm_l2,
    project_simplex,
    uniform_density,
)


@pytest.fixture(scope="module")
def setup():
    grid = make_grid(1, 64)
    ens = sample_rho0(1, 1024, seed=11)
    spec = spectral_decompose(ens, grid)
    return grid, ens, spec


def test_two_time_scale_stationary_at_target(setup):
    grid, ens, _ = setup
    rng = np.random.default_rng(0)
    target = project_simplex(GridField(grid, rng.random(grid.n_cells)))
    state = TwoTimeScaleState(p=GridField(grid, target.values.copy()), t=0.0)
    out = step_two_time_scale(state, target, ens, dt=0.4)
    assert norm_l2(GridField(grid, out.p.values - target.values)) < 1e-14


def test_single_mode_decay_matches_scalar_ode(setup):
    grid, ens, spec = setup
    lam1 = spec.eigenvalues[0]
    target = uniform_density(grid)
    e1 = spec.eigenfields[:, 0]
    state = TwoTimeScaleState(p=GridField(grid, target.values + e1), t=0.0)
    dt = 0.1 / lam1
    t_end = 5.0
    n = int(round(t_end / dt))
    dt = t_end / n
    for _ in range(n):
        state = step_two_time_scale(state, target, ens, dt)
    amp = grid.cell_weight * float(e1 @ (state.p.values - target.values))
    assert abs(amp - math.exp(-lam1 * t_end)) < 1e-6


def test_mmd_monotone_along_flow(setup):
    grid, ens, _ = setup
    rng = np.random.default_rng(1)
    target = project_simplex(GridField(grid, rng.random(grid.n_cells)))
    state = TwoTimeScaleState(p=uniform_density(grid), t=0.0)
    losses = [mmd_loss(ens, target, state.p)]
    for _ in range(60):
        state = step_two_time_scale(state, target, ens, dt=0.4)
        losses.append(mmd_loss(ens, target, state.p))
    diffs = np.diff(losses)
    assert np.all(diffs <= 1e-14)


def test_spectral_solution_t0_and_decay(setup):
    grid, ens, spec = setup
    rng = np.random.default_rng(2)
    target = project_simplex(GridField(grid, rng.random(grid.n_cells)))
    p0 = uniform_density(grid)
    at0 = solve_two_time_scale_spectral(p0, target, spec, 0.0)
    assert np.allclose(at0.values, p0.values, atol=1e-12)
    # long horizon kills every retained mode
    t_long = 1e4 / spec.eigenvalues[-1]
    late = solve_two_time_scale_spectral(p0, target, spec, t_long)
    u = late.values - target.values
    range_part = spec.synthesize(spec.coeffs(GridField(grid, u)))
    assert norm_l2(GridField(grid, range_part)) < 1e-8


def test_spectral_matches_rk4(setup):
    grid, ens, spec = setup
    rng = np.random.default_rng(3)
    target = project_simplex(GridField(grid, rng.random(grid.n_cells)))
    p0 = uniform_density(grid)
    cfg = FlowConfig(t_end=25.0, record_times=(1.0, 5.0, 25.0), dt=0.2 / spec.eigenvalues[0])
    probes = {"p": lambda s: s.p.values.copy()}
    rk = run_trajectory(ens, p0, target, cfg, probes)
    for t, p_rk in zip(rk.times, rk.records["p"]):
        p_sp = solve_two_time_scale_spectral(p0, target, spec, float(t))
        assert norm_l2(GridField(grid, p_sp.values - p_rk)) < 1e-5


def test_spectral_forced_matches_grid_route(setup):
    grid, ens, spec = setup
    rng = np.random.default_rng(4)
    target = project_simplex(GridField(grid, rng.random(grid.n_cells)))
    p0 = uniform_density(grid)
    forcing = _forcing(ens, grid, target)
    for t in (0.0, 0.7, 8.0, 300.0):
        a = solve_two_time_scale_spectral(p0, target, spec, t)
        b = solve_two_time_scale_forced(p0, forcing, spec, t)
        # the two routes only agree on the range component; the grid route
        # carries target's null component, the forced route carries p0's
        da = spec.synthesize(spec.coeffs(a))
        db = spec.synthesize(spec.coeffs(b))
        assert norm_l2(GridField(grid, da - db)) < 1e-7


def test_duhamel_undamped_cosine():
    ts = np.linspace(0.0, 10.0, 50)
    got = duhamel_solve(1.0, 0.0, 1.0, 0.0, ts)
    assert np.allclose(got, np.cos(ts), atol=1e-12)


def test_duhamel_initial_conditions():
    for a, b, q in [(1.0, 0.5, 0.3), (0.7, 1.0, -2.0), (2.0, 0.0, 1.0)]:
        assert abs(duhamel_solve(a, b, 1.3, q, 0.0) - 1.3) < 1e-12
        h = 1e-6
        deriv = (duhamel_solve(a, b, 1.3, q, h) - duhamel_solve(a, b, 1.3, q, -h)) / (2 * h)
        assert abs(deriv) < 1e-5


def test_duhamel_against_scalar_rk4():
    a, b, q, x0 = 1.0, 0.5, 0.3, 1.0
    x, v = x0, 0.0
    n_steps = 4000
    dt = 2.0 / n_steps

    def acc(xx, vv):
        return vv, q - b * vv - a * xx

    for _ in range(n_steps):
        k1x, k1v = acc(x, v)
        k2x, k2v = acc(x + 0.5 * dt * k1x, v + 0.5 * dt * k1v)
        k3x, k3v = acc(x + 0.5 * dt * k2x, v + 0.5 * dt * k2v)
        k4x, k4v = acc(x + dt * k3x, v + dt * k3v)
        x += dt / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
        v += dt / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
    assert abs(duhamel_solve(a, b, x0, q, 2.0) - x) < 1e-8


def test_duhamel_rejects_overdamped():
    with pytest.raises(DomainError):
        duhamel_solve(1.0, 3.0, 1.0, 0.0, 1.0)


def test_one_time_scale_t0_and_envelope(setup):
    grid, ens, spec = setup
    rng = np.random.default_rng(5)
    target = project_simplex(GridField(grid, rng.random(grid.n_cells)))
    p0 = uniform_density(grid)
    c = 1.0
    p, d = solve_one_time_scale_spectral(p0, target, spec, c, 0.0)
    assert np.allclose(p.values, p0.values, atol=1e-12)
    assert np.allclose(d.values, 0.0, atol=1e-12)
    # per-mode envelope: |x_i(t)| <= sqrt(2) |x_i(0)| e^(-c lam_i t / 2)
    lam = spec.eigenvalues
    for t in (0.5, 2.0, 10.0, 50.0):
        homog, _, _, _ = _mode_responses(lam, c, t)
        envelope = math.sqrt(2.0) * np.exp(-0.5 * c * lam * t)
        assert np.all(np.abs(homog) <= envelope + 1e-12)


def test_one_time_scale_stationary(setup):
    grid, ens, _ = setup
    p0 = uniform_density(grid)
    state = OneTimeScaleState(p=p0, d=GridField(grid, np.zeros(grid.n_cells)), t=0.0, c=1.0)
    out = step_one_time_scale(state, p0, ens, dt=0.3)
    assert norm_l2(GridField(grid, out.p.values - p0.values)) < 1e-14
    assert norm_l2(out.d) < 1e-14


def test_one_time_scale_spectral_matches_rk4(setup):
    grid, ens, spec = setup
    rng = np.random.default_rng(6)
    target = project_simplex(GridField(grid, rng.random(grid.n_cells)))
    p0 = uniform_density(grid)
    c = 1.0
    cfg = FlowConfig(t_end=10.0, record_times=(1.0, 10.0), dt=0.05 / math.sqrt(spec.eigenvalues[0]))
    rk = run_trajectory(ens, p0, target, cfg, {"p": lambda s: s.p.values.copy(),
                                               "d": lambda s: s.d.values.copy()},
                        dynamics="one_time_scale", c=c)
    for t, p_rk, d_rk in zip(rk.times, rk.records["p"], rk.records["d"]):
        p_sp, d_sp = solve_one_time_scale_spectral(p0, target, spec, c, float(t))
        assert norm_l2(GridField(grid, p_sp.values - p_rk)) < 1e-5
        assert norm_l2(GridField(grid, d_sp.values - d_rk)) < 1e-5


def test_one_time_scale_no_blowup_long_run(setup):
    grid, ens, spec = setup
    rng = np.random.default_rng(7)
    target = project_simplex(GridField(grid, rng.random(grid.n_cells)))
    p0 = uniform_density(grid)
    cfg = FlowConfig(t_end=100.0, record_every=10.0, dt=0.3)
    traj = run_trajectory(ens, p0, target, cfg, {"n": lambda s: norm_l2(s.p)},
                          dynamics="one_time_scale", c=1.0)
    assert np.all(traj.records["n"] < 10 * norm_l2(p0))


def test_friction_envelope_sharpens_with_c(setup):
    # larger friction means faster per-mode envelope decay
    grid, ens, spec = setup
    lam = spec.eigenvalues[:1]
    t = 20.0
    h_small, _, _, _ = _mode_responses(lam, 0.3, t)
    h_big, _, _, _ = _mode_responses(lam, 1.4, t)
    env = lambda c: math.sqrt(2) * math.exp(-0.5 * c * lam[0] * t)
    assert abs(h_small[0]) <= env(0.3) + 1e-12
    assert abs(h_big[0]) <= env(1.4) + 1e-12
    assert env(1.4) < env(0.3)


def test_projected_flow_stays_in_simplex(setup):
    grid, ens, _ = setup
    rng = np.random.default_rng(8)
    # target concentrated on the left half so cells clip at zero
    vals = np.where(grid.centers[:, 0] < 0.4, 3.0, 0.0) + 0.01 * rng.random(grid.n_cells)
    target = project_simplex(GridField(grid, vals))
    cfg = FlowConfig(t_end=40.0, record_every=4.0, dt=0.4)
    traj = run_trajectory(
        ens, uniform_density(grid), target, cfg,
        {"min": lambda s: float(s.p.values.min()), "mass": lambda s: integrate(s.p)},
        projected=True,
    )
    assert np.all(traj.records["min"] >= -1e-8)
    assert np.all(np.abs(traj.records["mass"] - 1.0) <= 1e-8)


def test_projected_velocity_rejects_outflow(setup):
    grid, ens, _ = setup
    rng = np.random.default_rng(9)
    target = project_simplex(GridField(grid, np.where(grid.centers[:, 0] < 0.3, 4.0, 0.0)))
    cfg = FlowConfig(t_end=150.0, record_every=2.0, dt=0.4)
    plain = run_trajectory(ens, uniform_density(grid), target, cfg,
                           {"min": lambda s: float(s.p.values.min())})
    # the plain flow goes negative on this target, the projected one cannot
    assert plain.records["min"].min() < -1e-4


def test_trajectory_zero_length(setup):
    grid, ens, _ = setup
    cfg = FlowConfig(t_end=0.0)
    traj = run_trajectory(ens, uniform_density(grid), uniform_density(grid), cfg,
                          {"t": lambda s: s.t})
    assert traj.times.tolist() == [0.0]


def test_trajectory_deterministic(setup):
    grid, ens, spec = setup
    rng = np.random.default_rng(10)
    target = project_simplex(GridField(grid, rng.random(grid.n_cells)))
    cfg = FlowConfig(t_end=5.0, record_every=1.0, dt=0.4)
    probes = {"loss": lambda s: mmd_loss(ens, target, s.p)}
    a = run_trajectory(ens, uniform_density(grid), target, cfg, probes)
    b = run_trajectory(ens, uniform_density(grid), target, cfg, probes)
    assert np.array_equal(a.records["loss"], b.records["loss"])


def test_trajectory_integrators_agree_on_metrics(setup):
    grid, ens, spec = setup
    rng = np.random.default_rng(12)
    target = project_simplex(GridField(grid, rng.random(grid.n_cells)))
    p0 = uniform_density(grid)
    probes = {
        "loss": lambda s: mmd_loss(ens, target, s.p),
        "l2": lambda s: norm_l2(GridField(grid, s.p.values - target.values)),
    }
    cfg_rk = FlowConfig(t_end=20.0, record_every=2.0, dt=0.2 / spec.eigenvalues[0])
    cfg_sp = FlowConfig(t_end=20.0, record_every=2.0, integrator="spectral-exact")
    rk = run_trajectory(ens, p0, target, cfg_rk, probes)
    sp = run_trajectory(ens, p0, target, cfg_sp, probes, spec=spec)
    for name in probes:
        assert np.max(np.abs(rk.records[name] - sp.records[name])) < 1e-4


def test_atomic_target_trajectory(setup):
    grid, ens, spec = setup
    rng = np.random.default_rng(13)
    s = SampleSet(rng.random((20, 1)))
    p0 = uniform_density(grid)
    cfg_sp = FlowConfig(t_end=30.0, record_every=3.0, integrator="spectral-exact")
    cfg_rk = FlowConfig(t_end=30.0, record_every=3.0, dt=0.3)
    probes = {"loss": lambda st: mmd_loss(ens, s, st.p)}
    sp = run_trajectory(ens, p0, s, cfg_sp, probes, spec=spec)
    rk = run_trajectory(ens, p0, s, cfg_rk, probes)
    assert np.max(np.abs(sp.records["loss"] - rk.records["loss"])) < 1e-6
    assert np.all(np.diff(sp.records["loss"]) <= 1e-14)


def test_null_space_component_frozen(setup):
    grid, ens, spec = setup
    rng = np.random.default_rng(14)
    raw = rng.standard_normal(grid.n_cells)
    null = raw - spec.synthesize(spec.coeffs(GridField(grid, raw)))
    target = uniform_density(grid)
    p0 = GridField(grid, target.values + null)
    out = solve_two_time_scale_spectral(p0, target, spec, 50.0)
    assert np.allclose(out.values - target.values, null, atol=1e-9)


def test_training_error_bound_holds(setup):
    grid, ens, spec = setup
    p0, p_star, dist_h, _ = make_pair_in_h(grid, ens, spec, seed=21, scale=0.5)
    for t in (0.5, 2.0, 10.0, 50.0, 200.0):
        p_t = solve_two_time_scale_spectral(p0, p_star, spec, t)
        err_sq = norm_l2(GridField(grid, p_t.values - p_star.values)) ** 2
        assert err_sq <= dist_h**2 / t + 1e-12


def test_one_time_scale_training_error_bound(setup):
    grid, ens, spec = setup
    p0, p_star, dist_h, _ = make_pair_in_h(grid, ens, spec, seed=22, scale=0.5)
    c = 1.0
    for t in (0.5, 2.0, 10.0, 50.0):
        p_t, _ = solve_one_time_scale_spectral(p0, p_star, spec, c, t)
        err = norm_l2(GridField(grid, p_t.values - p_star.values))
        assert err <= dist_h / math.sqrt(c * t) + 1e-12


def test_flow_config_validation():
    with pytest.raises(UsageError):
        FlowConfig(t_end=1.0, record_times=(2.0, 1.0)).times()
    cfg = FlowConfig(t_end=4.0, record_every=1.0)
    assert cfg.times().tolist() == [0.0, 1.0, 2.0, 3.0, 4.0]
