import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from py_warp.components.functionals import (
    base_whole_consistency,
    energy_Fw,
    entropy_Psiw,
    functional_time_series,
    lambda_w,
    lambda_w_dense,
    mu_monotonicity_check,
    mu_w,
    nu_w_sweep,
    save_functionals,
    soliton_residual,
    strangebehavior_probe,
)
from py_warp.components.geometry import Grid1D, WarpedGeometry, distance_from
from py_warp.utility.errors import ConfigurationError, ConstraintError
from py_warp.utility.util import Indicator

LENGTH = 2 * np.pi


def test_energy_needs_normalized_h(flat_geom):
    with pytest.raises(ConstraintError):
        energy_Fw(flat_geom, np.zeros(64))
    with pytest.raises(ConstraintError):
        entropy_Psiw(flat_geom, np.zeros(64), 0.5)


def test_flat_energy_and_entropy(flat_geom):
    assert energy_Fw(flat_geom, np.full(64, np.log(LENGTH))) == pytest.approx(
        0.0, abs=1e-12
    )
    tau = 0.3
    h = np.log(LENGTH) - 0.5 * np.log(4 * np.pi * tau)
    assert entropy_Psiw(flat_geom, np.full(64, h), tau) == pytest.approx(h - 1.0)
    with pytest.raises(ConfigurationError):
        entropy_Psiw(flat_geom, np.full(64, h), 0.0)


def test_flat_bottom_eigenvalue(flat_geom):
    out = lambda_w(flat_geom)
    assert out["value"] == pytest.approx(0.0, abs=1e-10)
    assert_allclose(out["eigenfunction"], 1.0 / np.sqrt(LENGTH), rtol=1e-8)


def test_inverse_iteration_matches_dense(coupled_geom):
    sparse_value = lambda_w(coupled_geom)
    dense_value = lambda_w_dense(coupled_geom)
    assert abs(sparse_value["value"] - dense_value["value"]) <= 1e-8
    assert np.all(sparse_value["eigenfunction"] > 0)


def test_dense_eigensolver_limit():
    grid = Grid1D(514)
    geom = WarpedGeometry(grid, np.ones(514), np.zeros(514))
    with pytest.raises(ConfigurationError):
        lambda_w_dense(geom)


def test_mu_minimizer(coupled_geom):
    result = mu_w(coupled_geom, 0.5)
    assert result.euler_lagrange_residual <= 1e-6
    assert result.constraint_defect <= 1e-10
    assert result.tau == 0.5
    with pytest.raises(ConfigurationError):
        mu_w(coupled_geom, -1.0)


def test_mu_on_flat_circle_at_large_scale(flat_geom):
    tau = 1.0
    result = mu_w(flat_geom, tau)
    expected = np.log(LENGTH) - 0.5 * np.log(4 * np.pi * tau) - 1.0
    assert result.value == pytest.approx(expected, abs=1e-10)


@pytest.mark.parametrize("tau", [0.025, 0.1])
def test_mu_lies_below_the_gaussian_entropy(flat_geom, tau):
    d = distance_from(flat_geom, 0)
    mass = np.sum(flat_geom.measure * np.exp(-d * d / (4 * tau)))
    h = d * d / (4 * tau) + np.log(mass / np.sqrt(4 * np.pi * tau))
    comparison = entropy_Psiw(flat_geom, h, tau)
    assert abs(comparison) <= 1e-8
    result = mu_w(flat_geom, tau)
    assert result.value <= comparison + 1e-8
    assert result.euler_lagrange_residual <= 1e-6
    # The constant is a saddle below tau = 1/2.
    constant = np.log(LENGTH) - 0.5 * np.log(4 * np.pi * tau) - 1.0
    assert result.value < constant - 0.1


def test_mu_tends_to_zero_at_small_scales():
    grid = Grid1D(256)
    geom = WarpedGeometry(grid, np.ones(256), np.zeros(256), p=1)
    taus = [0.2, 0.1, 0.05, 0.025]
    sweep = nu_w_sweep(geom, taus)
    values = sweep["series"]["mu_w"]
    assert np.all(values <= 1e-8)
    assert abs(Indicator.extrapolate_to_zero(taus, values, 0.0, np.inf)) <= 1e-3
    assert [r.tau for r in sweep["results"]] == taus


def test_mu_is_scale_invariant(grid, coupled_geom):
    doubled = WarpedGeometry(grid, 2.0 * coupled_geom.phi, coupled_geom.u, p=1)
    base = mu_w(coupled_geom, 0.25).value
    scaled = mu_w(doubled, 1.0).value
    assert abs(scaled - base) <= 1e-8


def test_nu_sweep(coupled_geom):
    out = nu_w_sweep(coupled_geom, [0.25, 0.5, 1.0])
    series = out["series"]
    assert list(series.columns) == ["tau", "mu_w"]
    assert out["minimum"] == series["mu_w"].min()
    assert out["argmin_tau"] in (0.25, 0.5, 1.0)
    with pytest.raises(ConfigurationError):
        nu_w_sweep(coupled_geom, [])


def test_mu_monotonicity_needs_positive_tau(coupled_traj):
    with pytest.raises(ConfigurationError):
        mu_monotonicity_check(coupled_traj, 0.0)


def test_mu_monotonicity_on_flat_circle(flat_traj):
    df, report = mu_monotonicity_check(flat_traj, 0.6, n_samples=4)
    assert report.passed, report.worst_margin
    assert_allclose(df["tau"], 1.1 - df["t"])
    expected = np.log(LENGTH) - 0.5 * np.log(4 * np.pi * df["tau"]) - 1.0
    assert_allclose(df["mu_w"], expected, rtol=0, atol=1e-9)


def test_base_whole_consistency(coupled_kernel, coupled_ungauged_kernel):
    with pytest.raises(ConfigurationError):
        base_whole_consistency(coupled_kernel)
    kernel = coupled_ungauged_kernel
    tau_min = 0.1 * kernel.tau.max()
    tol = 1e-10 * max(1.0, np.abs(kernel.h).max() / tau_min)
    for normalization in ("a", "b"):
        df = base_whole_consistency(kernel, normalization, tau_min=tau_min)
        assert len(df) > 0
        assert df["identity_defect"].max() <= tol
    with pytest.raises(ConfigurationError):
        base_whole_consistency(kernel, "c")


def test_whole_manifold_entropy(coupled_kernel):
    out = strangebehavior_probe(coupled_kernel, V_F=3.0)
    assert out["volume_relation_defect"] <= 1e-9
    assert list(out["series"].columns) == [
        "tau",
        "psi_tilde",
        "psi_bar",
        "decomposition",
        "decomposition_gap",
    ]
    assert np.isfinite(out["slope"])
    with pytest.raises(ConfigurationError):
        strangebehavior_probe(coupled_kernel, V_F=0.0)


def test_whole_manifold_entropy_slope(coupled_ungauged_kernel):
    out = strangebehavior_probe(coupled_ungauged_kernel, V_F=2.0)
    assert abs(out["slope"] - 0.5 * coupled_ungauged_kernel.p) <= 0.05


def test_flat_circle_is_a_steady_soliton(flat_geom):
    out = soliton_residual(flat_geom, np.full(64, np.log(LENGTH)), 0.0)
    assert out["tensor_residual"] == pytest.approx(0.0, abs=1e-12)
    assert out["coupling_residual"] == pytest.approx(0.0, abs=1e-12)
    assert soliton_residual(flat_geom, np.zeros(64), 1.0)["tensor_residual"] > 0


def test_time_series_and_save(flat_kernel, tmp_path):
    series = functional_time_series(flat_kernel, lambda_stride=0)
    assert np.all(np.isnan(series.lambda_w))
    assert np.all(np.isnan(series.mu_w))
    assert np.isnan(series.dF_residual[0]) and np.isnan(series.dF_residual[-1])
    df = pd.read_csv(save_functionals(series, tmp_path))
    assert list(df.columns) == [
        "t",
        "tau",
        "F_w",
        "Psi_w",
        "lambda_w",
        "mu_w",
        "dF_residual",
        "dPsi_residual",
    ]
    assert len(df) == flat_kernel.times.size
