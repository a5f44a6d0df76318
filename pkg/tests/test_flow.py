import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from py_warp.components.flow import (
    IntegratorConfig,
    flow_rhs,
    gauge_invariants_compare,
    load_trajectory,
    monotonicity_report,
    run_flow,
    save_trajectory,
    shi_diagnostic,
    step_gauged,
    step_ungauged,
)
from py_warp.components.geometry import WarpedGeometry
from py_warp.utility.errors import ConfigurationError, StepBudgetError


def test_integrator_config_validation():
    with pytest.raises(ConfigurationError):
        IntegratorConfig(t_end=0.5, scheme="euler")
    with pytest.raises(ConfigurationError):
        IntegratorConfig(t_end=0.5, cfl_safety=0.8)
    with pytest.raises(ConfigurationError):
        IntegratorConfig(t_end=0.0)
    with pytest.raises(ConfigurationError):
        IntegratorConfig.from_dict({"t_end": 0.5, "dt": 1e-3})
    cfg = IntegratorConfig(t_end=0.5, scheme="implicit-trapezoidal", cfl_safety=0.8)
    assert IntegratorConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("system_tag", ["gauged", "ungauged"])
def test_flat_state_is_stationary(flat_geom, system_tag):
    dphi, du = flow_rhs(flat_geom, system_tag)
    assert_allclose(dphi, 0.0)
    assert_allclose(du, 0.0)


def test_unknown_system_tag(flat_geom):
    with pytest.raises(ConfigurationError):
        flow_rhs(flat_geom, "harmonic")


def test_static_flat_run(flat_traj):
    assert flat_traj.times[0] == 0.0
    assert flat_traj.times[-1] == 0.5
    assert flat_traj.dt_sequence.sum() == pytest.approx(0.5)
    assert_allclose(flat_traj.phi, 1.0)
    assert_allclose(flat_traj.u, 0.0)
    assert all(r.passed for r in monotonicity_report(flat_traj))
    assert shi_diagnostic(flat_traj).passed


def test_trajectory_is_read_only(coupled_traj):
    with pytest.raises(ValueError):
        coupled_traj.u[0, 0] = 1.0
    snap = coupled_traj.snapshot(-1)
    assert snap.gauged and snap.time == coupled_traj.times[-1]


def test_coupled_run_monitors(coupled_traj):
    reports = {r.name: r for r in monotonicity_report(coupled_traj)}
    assert set(reports) == {
        "min_S_nondecreasing",
        "max_grad_u_nonincreasing",
        "max_abs_u_bounded",
        "measure_evolution",
    }
    assert reports["measure_evolution"].passed
    assert reports["max_abs_u_bounded"].passed
    monitors = coupled_traj.monitor_series
    assert np.isnan(monitors["measure_residual"].iloc[0])
    # The metric grows and the warping decays under the flow.
    assert monitors["total_length"].iloc[-1] > monitors["total_length"].iloc[0]
    assert monitors["max_abs_u"].iloc[-1] < monitors["max_abs_u"].iloc[0]


def test_replay_shares_time_grid(coupled_traj, coupled_ungauged_traj):
    assert coupled_ungauged_traj.dt_policy == "replay"
    assert_allclose(coupled_ungauged_traj.times, coupled_traj.times)
    report = gauge_invariants_compare(coupled_traj, coupled_ungauged_traj)
    assert report.passed, report.details


def test_gauge_compare_needs_both_systems(coupled_traj):
    with pytest.raises(ConfigurationError):
        gauge_invariants_compare(coupled_traj, coupled_traj)


def test_replay_must_reach_t_end(coupled_geom, coupled_traj):
    with pytest.raises(ConfigurationError):
        run_flow(
            coupled_geom,
            IntegratorConfig(t_end=0.5),
            "ungauged",
            dt_sequence=coupled_traj.dt_sequence[:-1],
        )


def test_step_budget(coupled_geom):
    with pytest.raises(StepBudgetError):
        run_flow(coupled_geom, IntegratorConfig(t_end=0.5, max_steps=3), "gauged")


def test_trapezoidal_agrees_with_rk4(coupled_geom):
    explicit = run_flow(coupled_geom, IntegratorConfig(t_end=0.05), "gauged")
    implicit = run_flow(
        coupled_geom,
        IntegratorConfig(t_end=0.05, scheme="implicit-trapezoidal"),
        "gauged",
    )
    assert implicit.times[-1] == explicit.times[-1] == 0.05
    assert_allclose(implicit.u[-1], explicit.u[-1], atol=1e-5)
    assert_allclose(implicit.phi[-1], explicit.phi[-1], atol=1e-5)


def test_index_of_time(coupled_traj):
    assert coupled_traj.index_of_time(0.5) == coupled_traj.n_times - 1
    with pytest.raises(ConfigurationError):
        coupled_traj.index_of_time(2.0)


def test_save_and_load(coupled_traj, tmp_path):
    save_trajectory(coupled_traj, tmp_path)
    loaded = load_trajectory(tmp_path)
    assert loaded.system_tag == "gauged"
    assert loaded.grid == coupled_traj.grid
    assert_array_equal(loaded.times, coupled_traj.times)
    assert_array_equal(loaded.u, coupled_traj.u)
    assert_array_equal(loaded.phi, coupled_traj.phi)


def test_save_with_stride_keeps_last_time(coupled_traj, tmp_path):
    save_trajectory(coupled_traj, tmp_path, snapshot_stride=100)
    loaded = load_trajectory(tmp_path)
    assert loaded.times[-1] == coupled_traj.times[-1]
    assert loaded.n_times == len(range(0, coupled_traj.n_times, 100)) + (
        (coupled_traj.n_times - 1) % 100 != 0
    )


def test_load_rejects_other_schema(coupled_traj, tmp_path):
    save_trajectory(coupled_traj, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["schema_version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ConfigurationError):
        load_trajectory(tmp_path)


def test_single_steps(flat_geom, coupled_geom):
    flat = step_ungauged(flat_geom, 1e-3)
    assert_allclose(flat.phi, 1.0)
    assert flat.time == pytest.approx(1e-3)
    gauged = step_gauged(coupled_geom, 1e-5)
    assert gauged.gauged
    halves = step_gauged(step_gauged(coupled_geom, 5e-6), 5e-6)
    assert_allclose(gauged.u, halves.u, atol=1e-10)
    assert_allclose(gauged.phi, halves.phi, atol=1e-10)
    assert not step_ungauged(gauged, 1e-4).gauged


def test_small_warping_decays_like_the_heat_equation(grid):
    amplitude = 1e-4
    geom = WarpedGeometry(grid, np.ones(64), amplitude * np.sin(grid.x), p=1)
    state = geom.to_gauged()
    dx = grid.spacing
    rate = 4.0 / dx**2 * np.sin(dx / 2) ** 2
    for _ in range(100):
        state = step_gauged(state, 1e-3)
    assert state.time == pytest.approx(0.1)
    expected = amplitude * np.exp(-rate * state.time) * np.sin(grid.x)
    assert_allclose(state.u, expected, rtol=0, atol=1e-11)
    assert_allclose(state.phi, 1.0, rtol=0, atol=2e-9)
