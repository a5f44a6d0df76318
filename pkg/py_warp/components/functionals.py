# Adapted energy and entropy functionals, their minimizers and identities.
# Last modified on Oct 18, 2026
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import linalg, sparse
from scipy.sparse.linalg import spsolve, splu

from ..utility.errors import ConfigurationError, ConstraintError, SolverError
from ..utility.util import CheckReport
from .geometry import (
    WarpedGeometry,
    adapted_scalar,
    distance_from,
    gradient_norm_sq,
    inner_gradient,
    integrate,
    laplacian_matrix,
    metric_laplacian,
)

logger = logging.getLogger(__name__)

N_BASE = 1
CONSTRAINT_TOL = 1e-6
# Newton matrix shift; rotations of a localized minimizer on a homogeneous
# circle are a null direction of the unshifted matrix.
NEWTON_SHIFT = 1e-8


@dataclass(frozen=True)
class MinimizerResult:
    """Minimizer of the entropy at fixed (g, u, tau).

    Attributes
    ----------
    h_min : numpy.ndarray
        Minimizing h, normalized by int (4 pi tau)^{-1/2} e^{-h} dmu = 1.
    value : float
        mu_w(g, u, tau).
    euler_lagrange_residual : float
        max |tau(2 Delta h - |grad h|^2 + S) + h - n - mu_w|.
    iterations : int
        Gradient plus Newton iterations.
    tau : float
        The scale.
    constraint_defect : float
        |int (4 pi tau)^{-1/2} e^{-h} dmu - 1|.
    """

    h_min: np.ndarray
    value: float
    euler_lagrange_residual: float
    iterations: int
    tau: float
    constraint_defect: float


@dataclass(frozen=True)
class FunctionalTimeSeries:
    """Functionals along a conjugate kernel; see :meth:`to_frame` for columns."""

    times: np.ndarray
    tau: np.ndarray
    F_w: np.ndarray
    Psi_w: np.ndarray
    lambda_w: np.ndarray
    mu_w: np.ndarray
    dF_integral: np.ndarray
    dPsi_integral: np.ndarray
    dF_residual: np.ndarray
    dPsi_residual: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "t": self.times,
                "tau": self.tau,
                "F_w": self.F_w,
                "Psi_w": self.Psi_w,
                "lambda_w": self.lambda_w,
                "mu_w": self.mu_w,
                "dF_residual": self.dF_residual,
                "dPsi_residual": self.dPsi_residual,
            }
        )

    def monotone_report(self, tau_min=None, tol=1e-8):
        """F_w and Psi_w nondecreasing in t on tau >= tau_min."""
        if tau_min is None:
            tau_min = 0.1 * self.tau.max()
        mask = self.tau >= tau_min
        reports = []
        for name in ("F_w", "Psi_w"):
            steps = np.diff(getattr(self, name)[mask])
            worst = float(steps.min()) if steps.size else 0.0
            reports.append(
                CheckReport(
                    f"{name}_nondecreasing",
                    worst >= -tol,
                    worst,
                    tol,
                    f"monotonicity of {name} along the flow",
                )
            )
        return reports

    def derivative_identity_report(self, tau_min=None, rtol=0.05, atol=0.0):
        """Gap between d/dt of each functional and its integrand.

        Passes when max |residual| <= rtol * max |integrand| + atol on
        tau >= tau_min.
        """
        if tau_min is None:
            tau_min = 0.1 * self.tau.max()
        mask = (self.tau >= tau_min) & np.isfinite(self.dF_residual)
        reports = []
        for name, residual, integral in (
            ("dF_identity", self.dF_residual, self.dF_integral),
            ("dPsi_identity", self.dPsi_residual, self.dPsi_integral),
        ):
            bound = rtol * float(np.abs(integral[mask]).max()) + atol
            worst = float(np.abs(residual[mask]).max())
            reports.append(
                CheckReport(
                    name,
                    worst <= bound,
                    -worst,
                    bound,
                    "evolution formula of the adapted functionals",
                    {"rtol": rtol, "atol": atol},
                )
            )
        return reports


def _check_constraint(mass, target=1.0, tol=CONSTRAINT_TOL):
    if abs(mass - target) > tol:
        raise ConstraintError(
            f"Normalization integral {mass:.12g} differs from {target} by more "
            f"than {tol}."
        )


def energy_Fw(geom, h):
    """F_w = int (S + |grad h|^2) e^{-h} dmu with int e^{-h} dmu = 1.

    Parameters
    ----------
    geom : WarpedGeometry
        The slice.
    h : array
        Test function.

    Returns
    -------
    float
    """
    h = geom.grid.check_field(h, "h")
    weight = np.exp(-h)
    _check_constraint(float(integrate(weight, geom.phi, geom.dx)))
    S = adapted_scalar(geom)
    integrand = (S + gradient_norm_sq(h, geom.phi, geom.dx)) * weight
    return float(integrate(integrand, geom.phi, geom.dx))


def entropy_Psiw(geom, h, tau):
    """Psi_w = int [tau(|grad h|^2 + S) + h - n] (4 pi tau)^{-1/2} e^{-h} dmu."""
    if tau <= 0:
        raise ConfigurationError(f"tau must be positive, got {tau}.")
    h = geom.grid.check_field(h, "h")
    weight = np.exp(-h) / np.sqrt(4.0 * np.pi * tau)
    _check_constraint(float(integrate(weight, geom.phi, geom.dx)))
    S = adapted_scalar(geom)
    grad_sq = gradient_norm_sq(h, geom.phi, geom.dx)
    integrand = (tau * (grad_sq + S) + h - N_BASE) * weight
    return float(integrate(integrand, geom.phi, geom.dx))


def _symmetric_operator(geom):
    """-4 Delta_N + S in the measure-orthonormal basis z = sqrt(phi dx) w."""
    root = np.sqrt(geom.measure)
    L = laplacian_matrix(geom.phi, geom.dx)
    A = -4.0 * sparse.diags(root) @ L @ sparse.diags(1.0 / root)
    A = 0.5 * (A + A.T) + sparse.diags(adapted_scalar(geom))
    return A.tocsc(), root, L


def lambda_w(geom, tol=1e-10, max_iter=500):
    """Bottom eigenvalue of -4 Delta_N + S by shifted inverse iteration.

    Returns
    -------
    dict
        {"value": float, "eigenfunction": w with int w^2 dmu = 1, w > 0,
        "iterations": int}
    """
    A, root, _ = _symmetric_operator(geom)
    n = geom.grid.n_points
    sigma = float(adapted_scalar(geom).min()) - 1.0
    lu = splu((A - sigma * sparse.identity(n, format="csc")).tocsc())
    z = root / np.linalg.norm(root)
    value = float(z @ (A @ z))
    for it in range(1, max_iter + 1):
        y = lu.solve(z)
        z = y / np.linalg.norm(y)
        new_value = float(z @ (A @ z))
        if abs(new_value - value) <= tol * max(1.0, abs(new_value)):
            value = new_value
            break
        value = new_value
    else:
        raise SolverError(
            f"Inverse iteration did not converge in {max_iter} steps.",
            {"value": value},
        )
    z = z * np.sign(z.sum())
    return {"value": value, "eigenfunction": z / root, "iterations": it}


def lambda_w_dense(geom):
    """Dense symmetric eigensolve of the same operator; grids up to 512 points."""
    if geom.grid.n_points > 512:
        raise ConfigurationError("The dense eigensolver is limited to 512 points.")
    A, root, _ = _symmetric_operator(geom)
    values, vectors = linalg.eigh(A.toarray())
    z = vectors[:, 0] * np.sign(vectors[:, 0].sum())
    return {"value": float(values[0]), "eigenfunction": z / root}


def _discrete_entropy(z, A, m, tau):
    """tau z^T A z - sum z^2 ln(z^2 / m) - ln(4 pi tau)/2 - n."""
    zz = z * z
    log_term = np.log(np.maximum(zz / m, 1e-300))
    return float(
        tau * (z @ (A @ z))
        - np.sum(zz * log_term)
        - 0.5 * np.log(4.0 * np.pi * tau)
        - N_BASE
    )


def _projected_gradient(z, A, m, tau, grad_tol, max_iter):
    norm_A = float(abs(A).sum(axis=1).max())
    step = 0.5 / (tau * norm_A + 1.0)
    value = _discrete_entropy(z, A, m, tau)
    for it in range(1, max_iter + 1):
        log_term = np.log(np.maximum(z * z / m, 1e-300))
        grad = 2.0 * tau * (A @ z) - 2.0 * z * (log_term + 1.0)
        grad = grad - (z @ grad) * z
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= grad_tol:
            return z, it
        step = min(2.0 * step, 1.0)
        while True:
            trial = z - step * grad
            trial = trial / np.linalg.norm(trial)
            trial_value = _discrete_entropy(trial, A, m, tau)
            if trial_value <= value - 1e-4 * step * grad_norm**2 or step < 1e-14:
                break
            step *= 0.5
        z, value = trial, trial_value
    return z, max_iter


def _euler_lagrange(f, L, S, m, tau, mu):
    w = np.exp(-0.5 * f) * (4.0 * np.pi * tau) ** -0.25
    Lw = L @ w
    residual = tau * (-4.0 * Lw / w + S) + f - N_BASE - mu
    return residual, w, Lw


def _starting_points(geom, tau, n_centers):
    """Unit vectors z for the descent.

    The bottom eigenfunction, plus Gaussians w = e^{-d^2 / 8 tau} centered at
    the minimum of S and at n_centers - 1 further nodes spread evenly around
    the circle.
    """
    root = np.sqrt(geom.measure)
    n = geom.grid.n_points
    first = int(np.argmin(adapted_scalar(geom)))
    starts = [np.maximum(np.abs(lambda_w(geom)["eigenfunction"]), 1e-12)]
    for k in range(n_centers):
        d = distance_from(geom, first + (k * n) // n_centers)
        starts.append(np.exp(-np.minimum(d * d / (8.0 * tau), 200.0)))
    return [w * root / np.linalg.norm(w * root) for w in starts]


def mu_w(
    geom,
    tau,
    grad_tol=1e-6,
    max_iter=20000,
    el_tol=1e-10,
    max_newton=50,
    n_centers=4,
    screen_iter=200,
):
    """Minimize Psi_w over h at fixed (g, u, tau).

    With w = e^{-h/2} (4 pi tau)^{-1/4} and z = sqrt(phi dx) w, the discrete
    entropy is tau z^T(-4 Delta + S)z - sum z^2 ln(z^2 / phi dx) up to
    constants on the sphere |z| = 1. Projected gradient descent with an
    Armijo line search runs ``screen_iter`` steps from each starting point
    (the bottom eigenfunction and localized Gaussians, see
    :func:`_starting_points`) and continues from the lowest one. Newton's
    method on the Euler-Lagrange equation tau(-4 Delta w / w + S) + h - n = mu
    with the constraint as a bordered row then polishes it.

    The constant is a critical point on the flat circle at every scale and a
    saddle for tau < 1/2, so the eigenfunction start alone misses the
    localized minimizer at small tau.

    Parameters
    ----------
    geom : WarpedGeometry
        The slice.
    tau : float
        Positive scale.
    n_centers : int, optional
        Number of Gaussian starting points, by default 4.
    screen_iter : int, optional
        Descent steps per starting point before the lowest is kept.

    Returns
    -------
    MinimizerResult
    """
    if tau <= 0:
        raise ConfigurationError(f"tau must be positive, got {tau}.")
    A, root, L = _symmetric_operator(geom)
    m = geom.measure
    S = adapted_scalar(geom)
    best, grad_iters = None, 0
    for start in _starting_points(geom, tau, n_centers):
        z, it = _projected_gradient(start, A, m, tau, grad_tol, screen_iter)
        grad_iters += it
        value = _discrete_entropy(z, A, m, tau)
        if best is None or value < best[0]:
            best = (value, z)
    z, it = _projected_gradient(best[1], A, m, tau, grad_tol, max_iter)
    grad_iters += it

    w = np.maximum(np.abs(z), 1e-150) / root
    f = -2.0 * np.log(w * (4.0 * np.pi * tau) ** 0.25)
    residual, w, _ = _euler_lagrange(f, L, S, m, tau, 0.0)
    mu = float(np.sum(m * w * w * residual))
    n = f.size
    for newton in range(1, max_newton + 1):
        residual, w, Lw = _euler_lagrange(f, L, S, m, tau, mu)
        defect = float(np.sum(m * w * w) - 1.0)
        size = float(np.max(np.abs(residual))) + abs(defect)
        if np.max(np.abs(residual)) <= el_tol and abs(defect) <= 1e-13:
            break
        J = (
            2.0 * tau * (sparse.diags(1.0 / w) @ L @ sparse.diags(w))
            - sparse.diags(2.0 * tau * Lw / w - 1.0 - NEWTON_SHIFT)
        )
        bordered = sparse.bmat(
            [
                [J, sparse.csc_matrix(-np.ones((n, 1)))],
                [sparse.csc_matrix(-(m * w * w)[None, :]), None],
            ],
            format="csc",
        )
        delta = spsolve(bordered, -np.concatenate((residual, [defect])))
        damping = 1.0
        while damping >= 1e-4:
            f_try = f + damping * delta[:n]
            mu_try = mu + damping * delta[n]
            r_try, w_try, _ = _euler_lagrange(f_try, L, S, m, tau, mu_try)
            d_try = float(np.sum(m * w_try * w_try) - 1.0)
            if np.all(np.isfinite(r_try)) and (
                float(np.max(np.abs(r_try))) + abs(d_try) < size
            ):
                break
            damping *= 0.5
        f, mu = f_try, mu_try
    else:
        raise SolverError(
            f"mu_w did not converge at tau = {tau}.",
            {"el_residual": float(np.max(np.abs(residual))), "defect": defect},
        )
    # Project onto the constraint and report against the returned value.
    f = f + np.log(np.sum(m * np.exp(-f)) / np.sqrt(4.0 * np.pi * tau))
    w = np.exp(-0.5 * f) * (4.0 * np.pi * tau) ** -0.25
    value = _discrete_entropy(root * w, A, m, tau)
    residual, _, _ = _euler_lagrange(f, L, S, m, tau, value)
    return MinimizerResult(
        h_min=f,
        value=value,
        euler_lagrange_residual=float(np.max(np.abs(residual))),
        iterations=grad_iters + newton,
        tau=float(tau),
        constraint_defect=float(abs(np.sum(m * w * w) - 1.0)),
    )


def nu_w_sweep(geom, taus, n_jobs=1, verbose=0):
    """mu_w over a finite tau grid and its minimum.

    Returns
    -------
    dict
        {"series": DataFrame(tau, mu_w), "minimum": float, "argmin_tau": float,
        "results": list of MinimizerResult in the order of ``taus``}
    """
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    if taus.size == 0:
        raise ConfigurationError("The tau grid is empty.")
    results = Parallel(n_jobs=n_jobs, verbose=verbose)(
        delayed(mu_w)(geom, tau) for tau in taus
    )
    values = np.array([r.value for r in results])
    k = int(np.argmin(values))
    return {
        "series": pd.DataFrame({"tau": taus, "mu_w": values}),
        "minimum": float(values[k]),
        "argmin_tau": float(taus[k]),
        "results": results,
    }


def mu_monotonicity_check(traj, tau_end, n_samples=4, indices=None, tol=1e-4):
    """mu_w(g(t), tau(t)) with tau(t) = tau_end + t_end - t is nondecreasing.

    Parameters
    ----------
    traj : FlowTrajectory
        The flow.
    tau_end : float
        Positive tau at the last stored time.
    n_samples : int, optional
        Evenly spread stored times, by default 4.
    indices : list of int, optional
        Explicit stored indices instead of ``n_samples``.
    tol : float, optional
        Allowed decrease between samples.

    Returns
    -------
    tuple of (DataFrame, CheckReport)
    """
    if tau_end <= 0:
        raise ConfigurationError("tau must stay positive on the window.")
    if indices is None:
        indices = np.unique(np.linspace(0, traj.n_times - 1, n_samples).astype(int))
    indices = np.asarray(indices, dtype=int)
    t_end = traj.times[-1]
    taus = tau_end + t_end - traj.times[indices]
    values = np.array(
        [
            mu_w(traj.snapshot(k), tau).value
            for k, tau in zip(indices, taus, strict=True)
        ]
    )
    steps = np.diff(values)
    worst = float(steps.min()) if steps.size else 0.0
    df = pd.DataFrame({"t": traj.times[indices], "tau": taus, "mu_w": values})
    return df, CheckReport(
        "mu_nondecreasing",
        worst >= -tol,
        worst,
        tol,
        "monotonicity of mu_w along tau' = -1",
    )


def _derivative_integrands(H_sol):
    """Integrands of dF_w/dt and dPsi_w/dt along the kernel, per time."""
    h, phi, dx, S, H = H_sol.h, H_sol.phi, H_sol.dx, H_sol.S, H_sol.H
    tau = H_sol.tau[:, None]
    lap_h = metric_laplacian(h, phi, dx)
    coupling = H_sol.coupling * (
        metric_laplacian(H_sol.u, phi, dx) - inner_gradient(H_sol.u, h, phi, dx)
    ) ** 2
    dF = 2.0 * integrate(((S + lap_h) ** 2 + coupling) * H, phi, dx)
    dPsi = 2.0 * H_sol.tau * integrate(
        ((S + lap_h - 0.5 / tau) ** 2 + coupling) * H, phi, dx
    )
    return dF, dPsi


def _interior_rate(values, times):
    out = np.full(values.shape, np.nan)
    if times.size >= 3:
        out[1:-1] = np.gradient(values, times)[1:-1]
    return out


def functional_time_series(H_sol, mu_stride=None, lambda_stride=1):
    """F_w, Psi_w, lambda_w and mu_w along a conjugate kernel.

    F_w uses e^{-h} = H (unit mass); Psi_w uses the kernel weight
    (4 pi tau)^{-1/2} e^{-h}. The derivative residuals compare centered
    differences of the series with the sum-of-squares integrands (nan at
    the two ends).

    Parameters
    ----------
    H_sol : ConjugateHeatSolution
        The kernel with its geometry.
    mu_stride : int, optional
        Evaluate mu_w(tau(t)) every ``mu_stride`` stored times; None skips it.
    lambda_stride : int, optional
        Same for lambda_w, by default every time.

    Returns
    -------
    FunctionalTimeSeries
    """
    h, phi, dx, S, H = H_sol.h, H_sol.phi, H_sol.dx, H_sol.S, H_sol.H
    tau = H_sol.tau
    F = integrate((S + gradient_norm_sq(h, phi, dx)) * H, phi, dx)
    weight = np.exp(-h) / np.sqrt(4.0 * np.pi * tau)[:, None]
    Psi = integrate(
        (tau[:, None] * (gradient_norm_sq(h, phi, dx) + S) + h - N_BASE) * weight,
        phi,
        dx,
    )
    dF, dPsi = _derivative_integrands(H_sol)
    K = H_sol.times.size
    lam = np.full(K, np.nan)
    mu = np.full(K, np.nan)
    for k in range(K):
        geom = _slice_geometry(H_sol, k)
        if lambda_stride and k % lambda_stride == 0:
            lam[k] = lambda_w(geom)["value"]
        if mu_stride and k % mu_stride == 0:
            mu[k] = mu_w(geom, tau[k]).value
    return FunctionalTimeSeries(
        times=np.array(H_sol.times),
        tau=np.array(tau),
        F_w=F,
        Psi_w=Psi,
        lambda_w=lam,
        mu_w=mu,
        dF_integral=dF,
        dPsi_integral=dPsi,
        dF_residual=_interior_rate(F, H_sol.times) - dF,
        dPsi_residual=_interior_rate(Psi, H_sol.times) - dPsi,
    )


def _slice_geometry(H_sol, k):
    return WarpedGeometry(
        H_sol.grid, H_sol.phi[k], H_sol.u[k], H_sol.p, H_sol.times[k], H_sol.gauged
    )


def base_whole_consistency(H_sol, normalization="b", tau_min=None):
    """Base and whole-manifold conjugate residuals of an ungauged kernel.

    The base residual is that of
    h_t = -S - Delta h + <grad h, grad h + p grad u> (+ n / 2 tau), the whole
    residual that of h_bar_t = |grad h_bar|^2 - Delta_M h_bar - R_M
    (+ m / 2 tau) for h_bar = h + p u (normalization "a", with h taken
    against e^{-h}) or h_bar = h + p u - (p/2) ln(4 pi tau) (normalization
    "b"). The two differ by exactly p times the residual of
    u_t = Delta u + p |grad u|^2; ``identity_defect`` removes that term and
    is zero up to roundoff. 1/tau terms use the discrete rate of
    ln(4 pi tau) so the identity holds for the discrete time derivative.

    Returns
    -------
    DataFrame
        Interior times with tau >= tau_min: t, tau, base_residual,
        whole_residual, u_residual, identity_defect (max over x).
    """
    if H_sol.gauged:
        raise ConfigurationError("base_whole_consistency needs an ungauged kernel.")
    if normalization not in ("a", "b"):
        raise ConfigurationError(f"Unknown normalization {normalization!r}.")
    if H_sol.times.size < 3:
        raise ConfigurationError("At least three time levels are needed.")
    if tau_min is None:
        tau_min = 0.1 * H_sol.tau.max()
    p, phi, dx = H_sol.p, H_sol.phi, H_sol.dx
    times, tau = H_sol.times, H_sol.tau
    u = H_sol.u
    m_dim = N_BASE + p
    log_scale = np.log(4.0 * np.pi * tau)
    log_rate = np.gradient(log_scale, times)[:, None]
    if normalization == "a":
        h = H_sol.h + 0.5 * log_scale[:, None]
        h_bar = h + p * u
        base_const = whole_const = 0.0
    else:
        h = H_sol.h
        h_bar = h + p * u - 0.5 * p * log_scale[:, None]
        base_const = 0.5 * N_BASE * log_rate
        whole_const = 0.5 * m_dim * log_rate

    def rate(values):
        return np.gradient(values, times, axis=0)

    grad_u_sq = gradient_norm_sq(u, phi, dx)
    lap_u = metric_laplacian(u, phi, dx)
    S = -p * grad_u_sq
    R_M = -2.0 * p * lap_u - p * (p + 1) * grad_u_sq
    base = (
        rate(h)
        + S
        + metric_laplacian(h, phi, dx)
        - gradient_norm_sq(h, phi, dx)
        - p * inner_gradient(u, h, phi, dx)
        + base_const
    )
    lap_M = metric_laplacian(h_bar, phi, dx) + p * inner_gradient(u, h_bar, phi, dx)
    whole = rate(h_bar) - gradient_norm_sq(h_bar, phi, dx) + lap_M + R_M + whole_const
    u_res = rate(u) - lap_u - p * grad_u_sq
    defect = whole - base - p * u_res
    keep = np.zeros(times.size, dtype=bool)
    keep[1:-1] = True
    keep &= tau >= tau_min
    return pd.DataFrame(
        {
            "t": times[keep],
            "tau": tau[keep],
            "base_residual": np.abs(base[keep]).max(axis=1),
            "whole_residual": np.abs(whole[keep]).max(axis=1),
            "u_residual": np.abs(u_res[keep]).max(axis=1),
            "identity_defect": np.abs(defect[keep]).max(axis=1),
        }
    )


def _dyadic_indices(H_sol, taus):
    if taus is None:
        top = 0.2 * H_sol.tau.max()
        taus = top / 2.0 ** np.arange(4)
    indices = np.array([H_sol.index_of_tau(t) for t in np.atleast_1d(taus)])
    return np.unique(indices)


def strangebehavior_probe(H_sol, V_F=1.0, taus=None):
    """Whole-manifold entropy of h_tilde = h_bar + ln V(F) at small tau.

    h_bar = h + p u - (p/2) ln(4 pi tau) is the whole-manifold log kernel
    of H_bar = H e^{-p u}; integrals over M reduce to V(F) times base
    integrals against H.

    Returns
    -------
    dict
        {"series": DataFrame(tau, psi_tilde, psi_bar, decomposition,
        decomposition_gap), "slope": fitted slope of psi_tilde against
        ln(1/tau), "volume_relation_defect": max |psi_tilde - psi_bar / V(F)
        - ln V(F)|}.
    """
    if V_F <= 0:
        raise ConfigurationError("V(F) must be positive.")
    idx = _dyadic_indices(H_sol, taus)
    if idx.size < 2:
        raise ConfigurationError("At least two distinct tau samples are needed.")
    p, dx = H_sol.p, H_sol.dx
    m_dim = N_BASE + p
    u = H_sol.physical_u[idx]
    phi = H_sol.phi[idx]
    h = H_sol.h[idx]
    H = H_sol.H[idx]
    S = H_sol.S[idx]
    tau = H_sol.tau[idx]
    col = tau[:, None]
    log_scale = np.log(4.0 * np.pi * col)
    R_M = -2.0 * p * metric_laplacian(u, phi, dx) - p * (p + 1) * gradient_norm_sq(
        u, phi, dx
    )
    h_bar = h + p * u - 0.5 * p * log_scale
    h_tilde = h_bar + np.log(V_F)

    def whole_entropy(field_values):
        integrand = (
            col * (gradient_norm_sq(field_values, phi, dx) + R_M)
            + field_values
            - m_dim
        ) * H
        return integrate(integrand, phi, dx)

    psi_bar = V_F * whole_entropy(h_bar)
    psi_tilde = whole_entropy(h_tilde)
    weight = np.exp(-h) / np.sqrt(4.0 * np.pi * col)
    psi_w = integrate(
        (col * (gradient_norm_sq(h, phi, dx) + S) + h - N_BASE) * weight, phi, dx
    )
    decomposition = V_F * (
        psi_w + p * integrate((u - 1.0 - 0.5 * log_scale) * H, phi, dx)
    )
    slope = float(np.polyfit(np.log(1.0 / tau), psi_tilde, 1)[0])
    relation = psi_tilde - (psi_bar / V_F + np.log(V_F))
    return {
        "series": pd.DataFrame(
            {
                "tau": tau,
                "psi_tilde": psi_tilde,
                "psi_bar": psi_bar,
                "decomposition": decomposition,
                "decomposition_gap": psi_bar - decomposition,
            }
        ),
        "slope": slope,
        "volume_relation_defect": float(np.max(np.abs(relation))),
    }


def soliton_residual(geom, h, lam):
    """Weighted L^2 norms of the two gradient-soliton defects.

    tensor: (int |S_tensor + Hess h - lam g|^2 e^{-h} dmu)^{1/2}
    coupling: (int p (Delta u - <grad u, grad h> + lam)^2 e^{-h} dmu)^{1/2}
    On a circle base the tensors reduce to their unit-frame component and
    Hess h = Delta h.
    """
    h = geom.grid.check_field(h, "h")
    phi, dx, p = geom.phi, geom.dx, geom.p
    u = geom.physical_u
    weight = np.exp(-h)
    tensor = adapted_scalar(geom) + metric_laplacian(h, phi, dx) - lam
    coupling = metric_laplacian(u, phi, dx) - inner_gradient(u, h, phi, dx) + lam
    return {
        "tensor_residual": float(np.sqrt(integrate(tensor**2 * weight, phi, dx))),
        "coupling_residual": float(
            np.sqrt(p * integrate(coupling**2 * weight, phi, dx))
        ),
    }


def save_functionals(series, run_dir):
    """Write functionals.csv."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "functionals.csv"
    series.to_frame().to_csv(path, index=False, float_format="%.17g")
    return path
