# Harnack quantity of the conjugate kernel and the estimates built on it.
# Last modified on Oct 18, 2026
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd

from ..utility.errors import ConfigurationError
from ..utility.util import CheckReport, Indicator, random_generator
from .geometry import (
    ddx,
    gradient_norm_sq,
    inner_gradient,
    integrate,
    metric_laplacian,
)

logger = logging.getLogger(__name__)

N_BASE = 1  # dimension of the circle base


@dataclass
class HarnackReport:
    """Harnack quantity v = (tau q + h - n) H of one kernel.

    Attributes
    ----------
    times, tau : numpy.ndarray
        Times of the kernel and tau = T - t.
    v, q : numpy.ndarray
        Fields per time, q = 2 Delta h - |grad h|^2 + S.
    max_v_series : numpy.ndarray
        max_x v per time.
    sup_H_series : numpy.ndarray
        max_x H per time, the natural scale of v.
    identity_residual_series : numpy.ndarray or None
        max_x |LHS - RHS| of the conjugate identity (nan at window ends).
    rho_series : numpy.ndarray or None
        rho_Phi(t) = int v Phi dmu.
    """

    times: np.ndarray
    tau: np.ndarray
    v: np.ndarray
    q: np.ndarray
    max_v_series: np.ndarray
    sup_H_series: np.ndarray
    dx: float
    identity_residual_series: np.ndarray | None = None
    rho_series: np.ndarray | None = None

    def window(self, tau_min):
        """Boolean mask of the stored times with tau >= tau_min."""
        return self.tau >= tau_min

    def max_positive_part(self, tau_min):
        """max(0, max over tau >= tau_min of max_x v / sup H)."""
        mask = self.window(tau_min)
        if not mask.any():
            raise ConfigurationError(f"No stored time with tau >= {tau_min}.")
        ratio = self.max_v_series[mask] / self.sup_H_series[mask]
        return float(max(0.0, ratio.max()))

    def to_frame(self) -> pd.DataFrame:
        n = self.times.size
        nan = np.full(n, np.nan)
        return pd.DataFrame(
            {
                "t": self.times,
                "max_v": self.max_v_series,
                "identity_residual": (
                    nan
                    if self.identity_residual_series is None
                    else self.identity_residual_series
                ),
                "rho": nan if self.rho_series is None else self.rho_series,
            }
        )


@dataclass
class EstimateConstants:
    """Bounds measured from a trajectory and the constants derived from them.

    Attributes
    ----------
    k1 : float
        Rc >= -k1 g (zero on a circle base).
    k2 : float
        max{S, |grad S|^2} <= k2.
    k3 : float
        |grad u|^2 <= k3, measured with the coupling p.
    A : float
        Upper bound of the positive solution under test.
    B, D : float
        Kernel bound constants, D <= 0.
    C1, C2, C3 : float
        C1 = (4 + n) k1 + 3 k3 + 1, C2 = e^{k2 tau}(n k1 + k3) + k2,
        C3 = 2^{n/2} e^B, the kernel bound on the window [tau/2, tau].
    """

    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    A: float = 1.0
    B: float = 0.0
    D: float = 0.0
    C1: float = 1.0
    C2: float = 0.0
    C3: float = 1.0

    def __post_init__(self):
        for name in ("k1", "k2", "k3", "A", "C1", "C2", "C3"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative.")
        if self.D > 0:
            raise ConfigurationError("D must be nonpositive.")


def hypothesis_tau(k2, T):
    """Largest admissible tau, min{1, T, 1 / (2 k2)}."""
    return min(1.0, T, np.inf if k2 <= 0 else 1.0 / (2.0 * k2))


def measure_constants(traj, B=0.0, tau_len=None, A=1.0):
    """Measure k1, k2, k3 over all stored times and derive C1, C2, C3, D.

    Parameters
    ----------
    traj : FlowTrajectory
        The flow.
    B : float, optional
        -inf of mu_w(g(0), tau) over the sweep, by default 0.
    tau_len : float, optional
        Length of the tau window; C2 is evaluated there. Defaults to the
        hypothesis limit min{1, T, 1/(2 k2)}.
    A : float, optional
        Upper bound of the solution under test, by default 1.
    """
    S = traj.S
    grad_S_sq = gradient_norm_sq(S, traj.phi, traj.dx)
    k1 = 0.0
    k2 = float(max(0.0, S.max(), grad_S_sq.max()))
    k3 = float((-S).max())
    if tau_len is None:
        tau_len = hypothesis_tau(k2, traj.times[-1] - traj.times[0])
    return EstimateConstants(
        k1=k1,
        k2=k2,
        k3=k3,
        A=A,
        B=float(B),
        D=float(min(0.0, S[0].min())),
        C1=(4 + N_BASE) * k1 + 3.0 * k3 + 1.0,
        C2=float(np.exp(k2 * tau_len) * (N_BASE * k1 + k3) + k2),
        C3=float(np.exp(B) * 2 ** (N_BASE / 2)),
    )


def compute_v(H_sol):
    """Harnack quantity of a conjugate kernel.

    Parameters
    ----------
    H_sol : ConjugateHeatSolution
        The kernel; its stored h, phi and S are used.

    Returns
    -------
    HarnackReport
        With v, q, max_v_series and sup_H_series populated.
    """
    h, phi, dx = H_sol.h, H_sol.phi, H_sol.dx
    tau = H_sol.tau[:, None]
    q = 2.0 * metric_laplacian(h, phi, dx) - gradient_norm_sq(h, phi, dx) + H_sol.S
    v = (tau * q + h - N_BASE) * H_sol.H
    return HarnackReport(
        times=np.array(H_sol.times),
        tau=np.array(H_sol.tau),
        v=v,
        q=q,
        max_v_series=v.max(axis=1),
        sup_H_series=H_sol.H.max(axis=1),
        dx=dx,
    )


def _time_derivative(values, times):
    """Centered d/dt on interior times (nonuniform spacing); nan at both ends."""
    out = np.full(values.shape, np.nan)
    if times.size >= 3:
        out[1:-1] = np.gradient(values, times, axis=0)[1:-1]
    return out


def conjugate_identity_residual(H_sol, report=None, normalized=True):
    """Residual of the conjugate evolution identity of v.

    LHS = (-d/dt - Delta_N + S) v, plus the drift p <grad u, grad v> in the
    ungauged system. RHS = -2 tau ((S + Delta h - 1/(2 tau))^2
    + c (Delta u - <grad u, grad h>)^2) H, where c u is the stored warping
    exponent convention (c = 1 gauged, c = p ungauged).

    Parameters
    ----------
    H_sol : ConjugateHeatSolution
        The kernel; at least three stored times.
    report : HarnackReport, optional
        Reuse a report from :func:`compute_v`; its identity series is set.
    normalized : bool, optional
        Divide the residual by sup_x H per time, by default True.

    Returns
    -------
    numpy.ndarray
        Residual per time, nan at the two window ends.
    """
    if H_sol.times.size < 3:
        raise ConfigurationError("The identity needs at least three time levels.")
    if report is None:
        report = compute_v(H_sol)
    h, phi, dx, S, H = H_sol.h, H_sol.phi, H_sol.dx, H_sol.S, H_sol.H
    u = H_sol.u
    tau = H_sol.tau[:, None]
    v = report.v
    lhs = -_time_derivative(v, H_sol.times) - metric_laplacian(v, phi, dx) + S * v
    if not H_sol.gauged:
        lhs = lhs + H_sol.p * inner_gradient(H_sol.physical_u, v, phi, dx)
    lap_h = metric_laplacian(h, phi, dx)
    coupling_term = metric_laplacian(u, phi, dx) - inner_gradient(u, h, phi, dx)
    rhs = (
        -2.0
        * tau
        * ((S + lap_h - 0.5 / tau) ** 2 + H_sol.coupling * coupling_term**2)
        * H
    )
    residual = np.max(np.abs(lhs - rhs), axis=1)
    if normalized:
        residual = residual / H.max(axis=1)
    report.identity_residual_series = residual
    return residual


def check_nonpositivity(reports, tau_min=None, floor=1e-10, min_order=1.8, c_max=10.0):
    """Refinement verdict for v <= 0.

    Parameters
    ----------
    reports : list of HarnackReport
        One report per refinement level of the same scenario.
    tau_min : float, optional
        Only times with tau >= tau_min count, by default 0.1 * max tau of
        the coarsest level.
    floor : float, optional
        Positive parts at or below this value are treated as zero.
    min_order : float, optional
        Required fitted order, by default 1.8.
    c_max : float, optional
        Largest allowed constant c in max v / sup H <= c spacing^2.

    Returns
    -------
    CheckReport
        PASS when every level is nonpositive, or when the positive parts
        decay at order >= min_order with constants below c_max.
    """
    if len(reports) < 2:
        raise ConfigurationError("check_nonpositivity needs >= 2 refinement levels.")
    if tau_min is None:
        tau_min = 0.1 * max(r.tau.max() for r in reports)
    spacings = np.array([r.dx for r in reports])
    positive = np.array([r.max_positive_part(tau_min) for r in reports])
    strict = [
        float((r.max_v_series / r.sup_H_series)[r.window(tau_min)].max())
        for r in reports
    ]
    if np.all(positive <= floor):
        passed, order = True, np.inf
    else:
        order = Indicator.get_order(spacings, positive, floor)
        constants = Indicator.get_constants(spacings, positive)
        passed = order >= min_order and constants.max() <= c_max
    return CheckReport(
        "harnack_nonpositivity",
        bool(passed),
        -float(positive.max()),
        float(c_max * spacings.min() ** 2),
        "Harnack inequality v <= 0",
        {
            "order": order,
            "positive_parts": positive,
            "max_v_over_sup_H": strict,
            "spacings": spacings,
            "tau_min": tau_min,
        },
    )


def corrupt_h(H_sol, shift=0.1):
    """Negative control: shift h by a constant while keeping H fixed."""
    return replace(H_sol, h=H_sol.h + shift, kind="corrupted", _cache={})


def random_curves(grid, times, n_curves=3, seed=0, n_knots=5, max_step=1.0):
    """Seeded piecewise-linear curves sampled at ``times``.

    Knots sit at equally spaced times; successive knot positions differ by
    a uniform draw in [-max_step, max_step] (coordinate units, unwrapped).

    Returns
    -------
    numpy.ndarray
        Positions, shape (n_curves, len(times)).
    """
    rng = random_generator(seed)
    times = np.asarray(times, dtype=float)
    knot_t = np.linspace(times[0], times[-1], n_knots)
    curves = np.empty((n_curves, times.size))
    for c in range(n_curves):
        start = rng.uniform(0.0, grid.coordinate_length)
        steps = rng.uniform(-max_step, max_step, n_knots - 1)
        knots = start + np.concatenate(([0.0], np.cumsum(steps)))
        curves[c] = np.interp(times, knot_t, knots)
    return curves


def _periodic_sample(field_values, positions, grid):
    x = grid.x
    return np.array(
        [
            np.interp(pos, x, row, period=grid.coordinate_length)
            for row, pos in zip(field_values, positions, strict=True)
        ]
    )


def curve_harnack_check(H_sol, curve, tau_min=None, tol=None):
    """Margin of the Harnack inequality along a curve.

    margin = sqrt(tau)(S + |gamma'|^2) - d/dtau(2 sqrt(tau) h(gamma, tau)),
    where the tau derivative along the curve is assembled from the partial
    derivatives of h interpolated to the curve.

    Parameters
    ----------
    H_sol : ConjugateHeatSolution
        A kernel of the gauged system.
    curve : array
        Coordinate positions (unwrapped) at every time of H_sol.
    tau_min : float, optional
        Lower end of the checked window, by default 0.1 * max tau.
    tol : float, optional
        Allowed violation, by default 10 spacing^2.

    Returns
    -------
    tuple of (numpy.ndarray, CheckReport)
        Margin per time (nan outside the window) and the verdict.
    """
    if not H_sol.gauged:
        raise ConfigurationError("The curve Harnack check runs in the gauged system.")
    curve = np.asarray(curve, dtype=float)
    if curve.shape != H_sol.times.shape:
        raise ConfigurationError("The curve must be sampled on the kernel times.")
    if tol is None:
        tol = 10.0 * H_sol.dx**2
    if tau_min is None:
        tau_min = 0.1 * H_sol.tau.max()
    grid, dx, times = H_sol.grid, H_sol.dx, H_sol.times
    h_t = _time_derivative(H_sol.h, times)
    h_x = ddx(H_sol.h, dx)
    gamma_t = _time_derivative(curve, times)
    h_c = _periodic_sample(H_sol.h, curve, grid)
    ht_c = _periodic_sample(np.nan_to_num(h_t), curve, grid)
    hx_c = _periodic_sample(h_x, curve, grid)
    S_c = _periodic_sample(H_sol.S, curve, grid)
    phi_c = _periodic_sample(H_sol.phi, curve, grid)
    tau = H_sol.tau
    along = ht_c + hx_c * gamma_t  # dh/dt along the curve
    d_tau = h_c / np.sqrt(tau) - 2.0 * np.sqrt(tau) * along
    margin = np.sqrt(tau) * (S_c + phi_c**2 * gamma_t**2) - d_tau
    inside = (tau >= tau_min) & np.isfinite(gamma_t) & np.isfinite(h_t[:, 0])
    margin = np.where(inside, margin, np.nan)
    if not inside.any():
        raise ConfigurationError("The curve leaves the checked time window.")
    worst = float(np.nanmin(margin))
    return margin, CheckReport(
        "curve_harnack",
        worst >= -tol,
        worst,
        tol,
        "Harnack inequality along space-time curves",
    )


def gradient_estimate_check(q_sol, consts, tau_window=None, tol=None):
    """Pointwise check of tau' |grad q|^2 / q^2 <= (1 + C1 tau')(ln(A/q) + C2 tau').

    Parameters
    ----------
    q_sol : ConjugateHeatSolution
        Positive conjugate solution q (its stored h gives |grad q|/q = |grad h|).
    consts : EstimateConstants
        C1, C2 and the measured k2.
    tau_window : tuple, optional
        (tau_a, tau_b). tau' = tau - tau_a is the time since the window
        start. Defaults to the whole solution.
    tol : float, optional
        Allowed violation, by default 10 spacing^2.

    Notes
    -----
    tau_b is truncated to tau_a + min{1, T, 1/(2 k2)}. A (sup q) is measured
    on the window when consts.A is smaller than the observed supremum.
    """
    if tol is None:
        tol = 10.0 * q_sol.dx**2
    tau = q_sol.tau
    tau_a, tau_b = (tau.min(), tau.max()) if tau_window is None else tau_window
    tau_b = min(tau_b, tau_a + hypothesis_tau(consts.k2, q_sol.T))
    mask = (tau >= tau_a) & (tau <= tau_b)
    if mask.sum() < 2:
        raise ConfigurationError(
            f"Empty hypothesis window tau in [{tau_a:.3e}, {tau_b:.3e}]."
        )
    q = q_sol.H[mask]
    A = max(consts.A, float(q.max()))
    shifted = (tau[mask] - tau_a)[:, None]
    lhs = shifted * gradient_norm_sq(q_sol.h[mask], q_sol.phi[mask], q_sol.dx)
    rhs = (1.0 + consts.C1 * shifted) * (np.log(A / q) + consts.C2 * shifted)
    margin = rhs - lhs
    worst = float(margin.min())
    return CheckReport(
        "gradient_estimate",
        worst >= -tol,
        worst,
        tol,
        "Hamilton-type gradient estimate for conjugate solutions",
        {"A": A, "C1": consts.C1, "C2": consts.C2, "tau_window": (tau_a, tau_b)},
    )


def _phi_on_kernel_times(H_sol, Phi_sol):
    if Phi_sol is None:
        return np.ones_like(H_sol.H)
    if H_sol.time_indices is None:
        raise ConfigurationError("A general Phi needs a kernel on a trajectory.")
    lookup = {k: j for j, k in enumerate(Phi_sol.time_indices)}
    missing = [k for k in H_sol.time_indices if k not in lookup]
    if missing:
        raise ConfigurationError("Phi does not cover the kernel window.")
    return Phi_sol.Phi[[lookup[k] for k in H_sol.time_indices]]


def rho_series(H_sol, Phi_sol=None):
    """rho_Phi(t) = int v Phi dmu after one integration by parts.

    rho = int [tau(|grad h|^2 + S) + h - n] H Phi dmu
          - 2 tau int H <grad h, grad Phi> dmu,
    which for Phi = 1 is the entropy quadrature of the functionals module.
    """
    Phi = _phi_on_kernel_times(H_sol, Phi_sol)
    h, phi, dx, H = H_sol.h, H_sol.phi, H_sol.dx, H_sol.H
    tau = H_sol.tau[:, None]
    integrand = (tau * (gradient_norm_sq(h, phi, dx) + H_sol.S) + h - N_BASE) * H * Phi
    cross = 2.0 * tau * H * inner_gradient(h, Phi, phi, dx)
    return integrate(integrand - cross, phi, dx)


def _fit_window(H_sol, fit_window):
    if fit_window is not None:
        return fit_window
    hi = 0.2 * H_sol.tau.max()
    return min(10.0 * H_sol.tau.min(), 0.5 * hi), hi


def rho_monotone_limit(H_sol, Phi_sol=None, report=None, tau_min=None, fit_window=None):
    """Monotonicity of rho_Phi in t and its extrapolated limit as t -> T.

    Returns
    -------
    dict
        {"rho_series", "limit_estimate", "monotone": CheckReport,
        "limit": CheckReport}. Monotonicity is judged on tau >= tau_min
        (default 0.1 * max tau) with tolerance 10 spacing^2; the limit is a
        quadratic fit in tau over ``fit_window`` (default [min(10 tau0,
        0.1 max tau), 0.2 max tau]) evaluated at tau = 0, with tolerance
        10 spacing.
    """
    rho = rho_series(H_sol, Phi_sol)
    if report is not None:
        report.rho_series = rho
    dx = H_sol.dx
    if tau_min is None:
        tau_min = 0.1 * H_sol.tau.max()
    mask = H_sol.tau >= tau_min
    increments = np.diff(rho[mask])
    worst_step = float(increments.min()) if increments.size else 0.0
    tau_lo, tau_hi = _fit_window(H_sol, fit_window)
    limit = Indicator.extrapolate_to_zero(H_sol.tau, rho, tau_lo, tau_hi)
    return {
        "rho_series": rho,
        "limit_estimate": limit,
        "monotone": CheckReport(
            "rho_nondecreasing",
            worst_step >= -10.0 * dx**2,
            worst_step,
            10.0 * dx**2,
            "monotonicity of rho_Phi",
        ),
        "limit": CheckReport(
            "rho_limit",
            abs(limit) <= 10.0 * dx,
            -abs(limit),
            10.0 * dx,
            "rho_Phi -> 0 as t -> T",
            {"limit": limit, "fit_window": (tau_lo, tau_hi)},
        ),
    }


def integral_bound_check(H_sol, Phi_sol=None, fit_window=None):
    """Small-tau bound int (h - n/2) H Phi dmu <= 0, extrapolated to tau = 0."""
    Phi = _phi_on_kernel_times(H_sol, Phi_sol)
    values = integrate(
        (H_sol.h - 0.5 * N_BASE) * H_sol.H * Phi, H_sol.phi, H_sol.dx
    )
    tau_lo, tau_hi = _fit_window(H_sol, fit_window)
    limit = Indicator.extrapolate_to_zero(H_sol.tau, values, tau_lo, tau_hi)
    tol = 10.0 * H_sol.dx
    return CheckReport(
        "integral_bound",
        limit <= tol,
        -limit,
        tol,
        "int h H Phi dmu <= (n/2) Phi(y, T)",
        {"limit": limit},
    )


def integrated_gradient_check(H_sol, consts, Phi_sol=None, tau_min=None):
    """Weighted gradient bound of the kernel.

    tau int |grad h|^2 H Phi <= (2 + C1 tau) int (ln C3 - D tau/3 + h + C2 tau) H Phi
    at every stored time (tau >= tau_min when given). This is the gradient
    estimate on [tau/2, tau] with A = sup H there, which the kernel bound
    puts below C3 e^{-D tau/3} (4 pi tau)^{-n/2}.
    """
    Phi = _phi_on_kernel_times(H_sol, Phi_sol)
    h, phi, dx, H = H_sol.h, H_sol.phi, H_sol.dx, H_sol.H
    tau = H_sol.tau
    lhs = tau * integrate(gradient_norm_sq(h, phi, dx) * H * Phi, phi, dx)
    col = tau[:, None]
    inner = np.log(consts.C3) - consts.D * col / 3.0 + h + consts.C2 * col
    rhs = (2.0 + consts.C1 * tau) * integrate(inner * H * Phi, phi, dx)
    keep = np.ones(tau.size, dtype=bool) if tau_min is None else tau >= tau_min
    margin = (rhs - lhs)[keep]
    worst = float(margin.min())
    tol = 10.0 * dx**2
    return CheckReport(
        "integrated_gradient_bound",
        worst >= -tol,
        worst,
        tol,
        "weighted gradient bound of the kernel",
    )


def save_harnack_report(report, run_dir):
    """Write harnack_report.csv with columns t, max_v, identity_residual, rho."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "harnack_report.csv"
    report.to_frame().to_csv(path, index=False, float_format="%.17g")
    return path


__all__ = [
    "EstimateConstants",
    "HarnackReport",
    "check_nonpositivity",
    "compute_v",
    "conjugate_identity_residual",
    "corrupt_h",
    "curve_harnack_check",
    "gradient_estimate_check",
    "integral_bound_check",
    "integrated_gradient_check",
    "measure_constants",
    "random_curves",
    "rho_monotone_limit",
    "rho_series",
    "save_harnack_report",
]

