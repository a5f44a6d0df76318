import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from py_warp.components.conjugate_heat import (
    duality_defect,
    euclidean_gaussian_solution,
    heat_reproduction_defect,
    heat_solution_from_warping,
    initial_D,
    kernel_upper_bound_check,
    pairing_series,
    save_conjugate,
    signed_offset,
    solve_conjugate_fundamental,
    solve_forward_heat,
    theta_kernel_solution,
)
from py_warp.components.flow import IntegratorConfig, run_flow
from py_warp.components.functionals import nu_w_sweep
from py_warp.components.geometry import Grid1D, WarpedGeometry
from py_warp.utility.errors import (
    ConfigurationError,
    PositivityViolationError,
    WindowTooShortError,
)
from py_warp.utility.util import Indicator


def test_kernel_is_positive_with_unit_mass(coupled_kernel, coupled_ungauged_kernel):
    for kernel in (coupled_kernel, coupled_ungauged_kernel):
        assert kernel.H.min() > 0
        assert_allclose(kernel.mass_series, 1.0, rtol=1e-10)
        assert kernel.tau.min() == pytest.approx(kernel.tau0)
        assert_allclose(
            kernel.H, np.exp(-kernel.h) / np.sqrt(4 * np.pi * kernel.tau)[:, None]
        )


def test_kernel_window_checks(coupled_traj):
    with pytest.raises(ConfigurationError):
        solve_conjugate_fundamental(coupled_traj, 64, 0.5)
    with pytest.raises(WindowTooShortError):
        solve_conjugate_fundamental(coupled_traj, 0, coupled_traj.times[5])


@pytest.mark.parametrize("system", ["gauged", "ungauged"])
def test_duality_with_forward_solution(
    system, coupled_traj, coupled_ungauged_traj, coupled_kernel, coupled_ungauged_kernel
):
    traj, kernel = {
        "gauged": (coupled_traj, coupled_kernel),
        "ungauged": (coupled_ungauged_traj, coupled_ungauged_kernel),
    }[system]
    Phi = solve_forward_heat(traj, 2.0 + np.cos(traj.grid.x), 0.0)
    assert duality_defect(kernel, Phi) <= 1e-10
    assert heat_reproduction_defect(kernel, Phi) <= 10.0 * kernel.tau0


def test_warping_is_a_forward_solution(coupled_traj, coupled_kernel):
    warping = heat_solution_from_warping(coupled_traj, shift=2.0)
    times, values = pairing_series(coupled_kernel, warping)
    assert times.size == coupled_kernel.times.size
    assert duality_defect(coupled_kernel, warping) <= 1e-5
    with pytest.raises(PositivityViolationError):
        heat_solution_from_warping(coupled_traj, shift=0.0)


def test_pairing_needs_same_trajectory(flat_traj, coupled_kernel):
    Phi = solve_forward_heat(flat_traj, np.ones(64), 0.0)
    with pytest.raises(ConfigurationError):
        duality_defect(coupled_kernel, Phi)


def test_forward_heat_rejects_nonpositive_data(flat_traj):
    with pytest.raises(PositivityViolationError):
        solve_forward_heat(flat_traj, np.zeros(64), 0.0)


@pytest.fixture(scope="module")
def fine_flat_kernel():
    grid = Grid1D(256)
    geom = WarpedGeometry(grid, np.ones(256), np.zeros(256), p=1)
    traj = run_flow(geom, IntegratorConfig(t_end=0.5), "gauged")
    return solve_conjugate_fundamental(traj, 0, 0.5)


def test_static_flat_kernel_matches_theta(fine_flat_kernel):
    kernel = fine_flat_kernel
    assert kernel.tau[0] == pytest.approx(0.5)
    lattice = theta_kernel_solution(
        kernel.traj, kernel.y_index, kernel.T, kernel.tau[:1], lattice=True
    )
    assert_allclose(lattice.times, kernel.times[:1])
    assert Indicator.get_rel_err(lattice.H[0], kernel.H[0]) <= 1e-5
    theta = theta_kernel_solution(kernel.traj, kernel.y_index, kernel.T, kernel.tau[:1])
    assert Indicator.get_rel_err(theta.H[0], kernel.H[0]) <= 2e-4


def test_coarse_flat_kernel_matches_theta(flat_kernel):
    theta = theta_kernel_solution(
        flat_kernel.traj, flat_kernel.y_index, flat_kernel.T, flat_kernel.tau
    )
    assert_allclose(theta.times, flat_kernel.times)
    keep = flat_kernel.tau >= 0.1 * flat_kernel.tau.max()
    rel = np.max(np.abs(flat_kernel.H[keep] - theta.H[keep])) / theta.H[keep].max()
    assert rel <= 10.0 * flat_kernel.dx**2


def test_lattice_theta_kernel(grid):
    taus = [0.05, 0.2, 0.8]
    lattice = theta_kernel_solution(grid, 10, 1.0, taus, lattice=True)
    theta = theta_kernel_solution(grid, 10, 1.0, taus)
    assert_allclose(lattice.mass_series, 1.0, rtol=1e-10)
    assert lattice.H.argmax(axis=1).tolist() == [10, 10, 10]
    assert Indicator.get_rel_err(theta.H, lattice.H) <= 2.0 * grid.spacing**2


def test_theta_kernel_has_unit_mass(grid):
    theta = theta_kernel_solution(grid, 10, 1.0, [0.05, 0.2, 0.8])
    assert_allclose(theta.mass_series, 1.0, rtol=1e-10)
    assert theta.kind == "theta" and theta.time_indices is None


def test_euclidean_gaussian(grid):
    sol = euclidean_gaussian_solution(grid, 5, 1.0, [0.1, 0.3])
    z = signed_offset(grid, 5)
    assert_allclose(sol.h, z[None, :] ** 2 / (4 * sol.tau[:, None]))
    assert np.all(np.abs(z) <= np.pi)
    assert z[5] == 0.0


def test_kernel_upper_bound_on_flat_circle(flat_traj, flat_kernel):
    D = initial_D(flat_traj)
    assert D == 0.0
    report = kernel_upper_bound_check(flat_kernel, 0.0, D)
    assert report.passed, report.worst_margin
    with pytest.raises(ConfigurationError):
        kernel_upper_bound_check(flat_kernel, 0.0, 1.0)
    with pytest.raises(ConfigurationError):
        kernel_upper_bound_check(flat_kernel, 0.0, 0.0, tau_min=10.0)


def test_kernel_upper_bound_detects_violation(flat_kernel):
    report = kernel_upper_bound_check(flat_kernel, -1.0, 0.0)
    assert not report.passed


def test_kernel_upper_bound_on_coupled_run(coupled_traj, coupled_kernel):
    sweep = nu_w_sweep(coupled_traj.snapshot(0), [0.025, 0.05, 0.1, 0.2, 0.5])
    B = max(0.0, -sweep["minimum"])
    report = kernel_upper_bound_check(coupled_kernel, B, initial_D(coupled_traj))
    assert report.passed, report.worst_margin
    assert report.details["worst_tau"] >= coupled_kernel.tau0


def test_save_conjugate_stride(flat_kernel, tmp_path):
    path = save_conjugate(flat_kernel, tmp_path, time_stride=50)
    df = pd.read_csv(path)
    assert list(df.columns) == ["t", "x_index", "H", "h"]
    kept = np.unique(df["t"].to_numpy())
    assert kept[-1] == pytest.approx(flat_kernel.times[-1])
    assert len(df) == kept.size * 64
