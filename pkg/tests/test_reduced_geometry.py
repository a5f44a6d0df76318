import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from py_warp.components.conjugate_heat import theta_kernel_solution
from py_warp.components.geometry import distance_matrix
from py_warp.components.reduced_geometry import (
    ReducedDistanceField,
    compare_h_ell,
    exhaustive_reduced_distance,
    flat_ell_check,
    lw_bounds_check,
    mueller_D_identity,
    random_vector_field,
    reduced_volume,
    save_reduced,
    small_tau_limits,
    solve_reduced_distance,
    solve_reduced_distances,
    tensor_bounds,
)
from py_warp.utility.errors import ConfigurationError

TAUS = np.geomspace(0.002, 0.5, 40)


@pytest.fixture(scope="module")
def flat_field(flat_traj):
    return solve_reduced_distance(flat_traj, 0, 0.5, 0.4, n_slices=16)


@pytest.fixture(scope="module")
def exact_field(flat_geom):
    """ell = d^2 / 4 tau on every node, the flat static reduced distance."""
    D = distance_matrix(flat_geom)
    d = D[0]
    n = flat_geom.grid.n_points
    return ReducedDistanceField(
        y_index=0,
        T=0.5,
        node_indices=np.arange(n),
        s=np.sqrt(TAUS),
        ell=d[None, :] ** 2 / (4.0 * TAUS[:, None]),
        policy=np.zeros((TAUS.size, n), dtype=int),
        phi_slices=np.ones((TAUS.size, n)),
        distance_T=D,
        spacing=flat_geom.dx,
    )


def test_flat_reduced_distance_is_exact_near_center(flat_field):
    near = flat_field.d_T <= np.pi / 2 + 1e-12
    expected = np.broadcast_to(flat_field.d_T[near] ** 2, flat_field.L[:, near].shape)
    assert_allclose(flat_field.L[:, near], expected, rtol=1e-9, atol=1e-12)
    assert np.abs(flat_field.ell[:, 0]).max() <= 1e-12


def test_dp_without_refinement_matches_enumeration(flat_traj):
    field = solve_reduced_distance(
        flat_traj, 0, 0.5, 0.4, n_slices=3, node_stride=16, window=2, refine=False
    )
    brute = exhaustive_reduced_distance(flat_traj, 0, 0.5, 0.4, 3, 16)
    assert_allclose(field.ell[-1], brute, rtol=1e-12)


def test_enumeration_refuses_large_instances(flat_traj):
    with pytest.raises(ConfigurationError):
        exhaustive_reduced_distance(flat_traj, 0, 0.5, 0.4, 8, 1)


def test_optimal_path(flat_field):
    path = flat_field.optimal_path(10)
    assert path[0] == 0
    assert path[-1] == flat_field.node_indices[10]
    assert path.size == flat_field.s.size + 1


def test_solver_validation(flat_traj):
    with pytest.raises(ConfigurationError):
        solve_reduced_distance(flat_traj, 0, 0.5, 0.4, node_stride=3)
    with pytest.raises(ConfigurationError):
        solve_reduced_distance(flat_traj, 4, 0.5, 0.4, node_stride=8)
    with pytest.raises(ConfigurationError):
        solve_reduced_distance(flat_traj, 0, 0.5, 0.8)


def test_parallel_centers(flat_traj):
    fields = solve_reduced_distances(flat_traj, [0, 32], 0.5, 0.2, n_jobs=1, n_slices=8)
    assert [f.y_index for f in fields] == [0, 32]
    # The flat circle is homogeneous.
    near = fields[0].d_T <= np.pi / 2 + 1e-12
    shifted = np.roll(fields[1].ell, -32, axis=1)
    assert_allclose(shifted[:, near], fields[0].ell[:, near], rtol=1e-9, atol=1e-12)


def test_flat_bounds(flat_traj, exact_field):
    k1, k2 = tensor_bounds(flat_traj)
    assert k1 == 0.0 and k2 == 0.0
    lower, upper = lw_bounds_check(exact_field, k1, k2)
    assert lower.passed and upper.passed


@pytest.mark.parametrize("offset", [10.0, -10.0])
def test_lw_bounds_detect_a_shifted_potential(flat_traj, offset):
    field = solve_reduced_distance(flat_traj, 0, 0.5, 0.4, n_slices=16, S_offset=offset)
    lower, upper = lw_bounds_check(field, 0.0, 0.0)
    assert lower.passed == (offset > 0)
    assert upper.passed == (offset < 0)


def test_flat_reduced_distance_on_every_node(flat_field, exact_field):
    assert flat_ell_check(flat_field).passed
    assert flat_ell_check(exact_field).worst_margin >= -1e-12
    shifted = ReducedDistanceField(
        **{**exact_field.__dict__, "ell": 1.001 * exact_field.ell}
    )
    assert not flat_ell_check(shifted).passed


def test_h_below_ell_on_flat_circle(grid, exact_field):
    theta = theta_kernel_solution(grid, 0, 0.5, TAUS)
    margins, report = compare_h_ell(theta, exact_field)
    assert report.passed, report.worst_margin
    assert list(margins.columns) == ["tau", "x_index", "margin"]
    shifted = ReducedDistanceField(
        **{**exact_field.__dict__, "ell": exact_field.ell - 1.0}
    )
    assert not compare_h_ell(theta, shifted)[1].passed


def test_center_mismatch(grid, exact_field):
    theta = theta_kernel_solution(grid, 5, 0.5, TAUS)
    with pytest.raises(ConfigurationError):
        compare_h_ell(theta, exact_field)


def test_small_tau_limits_on_flat_circle(grid, exact_field):
    theta = theta_kernel_solution(grid, 0, 0.5, TAUS)
    out = small_tau_limits(theta, exact_field)
    assert out["slope_d2_error"] <= 1e-9
    assert out["reports"][0].name == "small_tau_L_limit"
    assert out["reports"][0].tolerance == 1e-3
    assert out["target"] == 0.5
    for limit in out["limits"].values():
        assert limit == pytest.approx(0.5, abs=1e-6)
    assert all(r.passed for r in out["reports"])


def test_reduced_volume_of_gaussian(exact_field):
    volume = reduced_volume(exact_field)
    window = (volume.tau >= 0.02) & (volume.tau <= 0.1)
    assert_allclose(volume.V[window], 1.0, atol=1e-8)


def test_random_vector_field_is_seeded(grid):
    assert_array_equal(random_vector_field(grid, seed=3), random_vector_field(grid, 3))
    other = random_vector_field(grid, 4)
    assert not np.array_equal(random_vector_field(grid, 3), other)


def test_harnack_expression_identity(coupled_traj):
    X = random_vector_field(coupled_traj.grid, seed=0)
    gap = mueller_D_identity(coupled_traj, coupled_traj.n_times // 2, X)
    assert gap <= 10.0 * coupled_traj.dx**2


def test_harnack_expression_identity_validation(coupled_traj, coupled_ungauged_traj):
    with pytest.raises(ConfigurationError):
        mueller_D_identity(coupled_ungauged_traj, 5)
    with pytest.raises(ConfigurationError):
        mueller_D_identity(coupled_traj, 0)


def test_save_reduced(flat_field, tmp_path):
    df = pd.read_csv(save_reduced(flat_field, tmp_path))
    assert list(df.columns) == ["tau", "x_index", "ell", "policy_predecessor"]
    assert len(df) == flat_field.s.size * flat_field.node_indices.size
