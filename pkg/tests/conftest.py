# Shared small trajectories and kernels; all products are read-only.
import numpy as np
import pytest

from py_warp.components.conjugate_heat import solve_conjugate_fundamental
from py_warp.components.flow import IntegratorConfig, run_flow
from py_warp.components.geometry import Grid1D, WarpedGeometry

N_POINTS = 64
T_END = 0.5


@pytest.fixture(scope="session")
def grid():
    return Grid1D(N_POINTS)


@pytest.fixture(scope="session")
def flat_geom(grid):
    return WarpedGeometry(grid, np.ones(N_POINTS), np.zeros(N_POINTS), p=1)


@pytest.fixture(scope="session")
def coupled_geom(grid):
    return WarpedGeometry.from_functions(
        grid, lambda x: np.ones_like(x), lambda x: 0.3 * np.sin(x), p=1
    )


@pytest.fixture(scope="session")
def flat_traj(flat_geom):
    return run_flow(flat_geom, IntegratorConfig(t_end=T_END), "gauged")


@pytest.fixture(scope="session")
def coupled_traj(coupled_geom):
    return run_flow(coupled_geom, IntegratorConfig(t_end=T_END), "gauged")


@pytest.fixture(scope="session")
def coupled_ungauged_traj(coupled_geom, coupled_traj):
    return run_flow(
        coupled_geom,
        IntegratorConfig(t_end=T_END),
        "ungauged",
        dt_sequence=coupled_traj.dt_sequence,
    )


@pytest.fixture(scope="session")
def flat_kernel(flat_traj):
    return solve_conjugate_fundamental(flat_traj, 0, T_END)


@pytest.fixture(scope="session")
def coupled_kernel(coupled_traj):
    return solve_conjugate_fundamental(coupled_traj, 0, T_END)


@pytest.fixture(scope="session")
def coupled_ungauged_kernel(coupled_ungauged_traj):
    return solve_conjugate_fundamental(coupled_ungauged_traj, 0, T_END)
