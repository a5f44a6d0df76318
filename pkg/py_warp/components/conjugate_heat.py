# Conjugate heat kernels and forward heat solutions on a flow trajectory.
# Last modified on Oct 18, 2026
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.sparse.linalg import splu
from scipy.special import ive, logsumexp

from ..utility.errors import (
    ConfigurationError,
    NumericalBlowupError,
    PositivityViolationError,
    WindowTooShortError,
)
from ..utility.util import CheckReport
from .geometry import ddx, distance_from, laplacian_matrix

logger = logging.getLogger(__name__)

# Lower clip of the Gaussian exponent at the bootstrap, keeps H > 0 in double
# precision on the far side of the circle.
EXPONENT_FLOOR = -700.0


def _readonly(values):
    values = np.array(values, dtype=float)
    values.setflags(write=False)
    return values


@dataclass(frozen=True)
class ConjugateHeatSolution:
    """Conjugate heat kernel H(., t; y, T) on stored times t < T.

    Attributes
    ----------
    grid : Grid1D
        Base grid.
    p : int
        Fiber dimension.
    gauged : bool
        Storage convention of ``u`` and the equation that was solved.
    y_index : int
        Center of the kernel.
    T : float
        Final time of the kernel.
    tau0 : float
        Bootstrap time T - t of the latest stored slice.
    times : numpy.ndarray
        Increasing times, shape (K,).
    H, h : numpy.ndarray
        Kernel and its log form H = (4 pi tau)^{-1/2} e^{-h}, shape (K, n).
    phi, u : numpy.ndarray
        Geometry at the stored times, shape (K, n).
    time_indices : numpy.ndarray or None
        Indices of ``times`` in the trajectory, None for analytic fixtures.
    kind : str
        "numerical", "theta" or "euclidean".
    """

    grid: object
    p: int
    gauged: bool
    y_index: int
    T: float
    tau0: float
    times: np.ndarray
    H: np.ndarray
    h: np.ndarray
    phi: np.ndarray
    u: np.ndarray
    time_indices: np.ndarray | None = None
    kind: str = "numerical"
    traj: object = field(default=None, repr=False, compare=False)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for name in ("times", "H", "h", "phi", "u"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))
        if self.time_indices is not None:
            indices = np.array(self.time_indices, dtype=int)
            indices.setflags(write=False)
            object.__setattr__(self, "time_indices", indices)

    @property
    def dx(self) -> float:
        return self.grid.spacing

    @property
    def tau(self) -> np.ndarray:
        return self.T - self.times

    @property
    def coupling(self) -> int:
        return 1 if self.gauged else self.p

    @property
    def physical_u(self) -> np.ndarray:
        return self.u / np.sqrt(self.p) if self.gauged else self.u

    @property
    def S(self) -> np.ndarray:
        if "S" not in self._cache:
            self._cache["S"] = -self.coupling * ddx(self.u, self.dx) ** 2 / self.phi**2
        return self._cache["S"]

    @property
    def mass_series(self) -> np.ndarray:
        return np.sum(self.H * self.phi, axis=1) * self.dx

    def index_of_tau(self, tau):
        """Index of the stored time whose tau is nearest to ``tau``."""
        return int(np.argmin(np.abs(self.tau - tau)))


@dataclass(frozen=True)
class HeatSolution:
    """Forward heat solution Phi on a range of stored times.

    Attributes
    ----------
    times : numpy.ndarray
        Increasing times starting at t0.
    Phi : numpy.ndarray
        Solution per stored time, shape (K, n).
    time_indices : numpy.ndarray
        Trajectory indices of ``times``.
    t0 : float
        Start time.
    """

    times: np.ndarray
    Phi: np.ndarray
    time_indices: np.ndarray
    t0: float
    traj: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "times", _readonly(self.times))
        object.__setattr__(self, "Phi", _readonly(self.Phi))
        indices = np.array(self.time_indices, dtype=int)
        indices.setflags(write=False)
        object.__setattr__(self, "time_indices", indices)


def forward_operator(traj, k):
    """Sparse forward heat operator of stored slice k.

    Delta_N in the gauged system; the warped Laplacian
    Delta_N + p <grad u, grad .> in the ungauged system.
    """
    weight = None if traj.gauged else traj.p * traj.physical_u[k]
    return laplacian_matrix(traj.phi[k], traj.dx, weight)


def _implicit_factor(traj, k, dt):
    n = traj.grid.n_points
    matrix = sparse.identity(n, format="csc") - 0.5 * dt * forward_operator(traj, k)
    return splu(matrix.tocsc(), permc_spec="NATURAL", diag_pivot_thresh=0)


def _log_kernel(H, tau):
    return -np.log(np.sqrt(4.0 * np.pi * tau)[:, None] * H)


def solve_conjugate_fundamental(traj, y_index, T):
    """Backward march of the conjugate heat kernel centered at (y, T).

    The kernel is bootstrapped at tau0 = 4 (max phi(., T) spacing)^2 with the
    leading Gaussian (4 pi tau0)^{-1/2} exp(-d_T(x, y)^2 / 4 tau0),
    renormalized to unit mass, and marched to the start of the trajectory.
    The march acts on the density G = H phi dx and is the exact transpose
    of the Crank-Nicolson forward heat march of :func:`solve_forward_heat`,
    so the pairing int H Phi dmu is conserved to roundoff and mass is
    conserved exactly.

    Parameters
    ----------
    traj : FlowTrajectory
        The flow; its own time grid is used.
    y_index : int
        Center index.
    T : float
        Final time, snapped to the nearest stored time.

    Returns
    -------
    ConjugateHeatSolution
    """
    n = traj.grid.n_points
    if not 0 <= int(y_index) < n:
        raise ConfigurationError(f"y_index {y_index} outside [0, {n}).")
    k_T = traj.index_of_time(T)
    T = float(traj.times[k_T])
    dx = traj.dx
    tau0_target = 4.0 * (traj.phi[k_T].max() * dx) ** 2
    if tau0_target >= T - traj.times[0]:
        raise WindowTooShortError(
            f"Bootstrap time {tau0_target:.3e} does not fit in the window "
            f"[{traj.times[0]}, {T}]."
        )
    k0 = int(np.argmin(np.abs(traj.times[:k_T] - (T - tau0_target))))
    tau0 = T - float(traj.times[k0])

    dist = distance_from(traj.snapshot(k_T), y_index)
    exponent = np.maximum(-(dist**2) / (4.0 * tau0), EXPONENT_FLOOR)
    density = np.exp(exponent) / np.sqrt(4.0 * np.pi * tau0) * traj.phi[k0] * dx
    density = density / density.sum()
    logger.info(
        "Conjugate kernel at y = %d, T = %g: tau0 = %.3e, %d backward steps.",
        y_index,
        T,
        tau0,
        k0,
    )

    densities = np.empty((k0 + 1, n))
    densities[k0] = density
    for k in range(k0 - 1, -1, -1):
        dt = traj.times[k + 1] - traj.times[k]
        lu = _implicit_factor(traj, k + 1, dt)
        B_k = forward_operator(traj, k)
        y_vec = lu.solve(density, trans="T")
        density = y_vec + 0.5 * dt * (B_k.T @ y_vec)
        if not np.all(np.isfinite(density)):
            raise NumericalBlowupError(f"Non-finite kernel at t = {traj.times[k]}.")
        if density.min() <= 0:
            raise PositivityViolationError(
                f"H <= 0 at t = {traj.times[k]} (min density {density.min():.3e})."
            )
        densities[k] = density

    phi = traj.phi[: k0 + 1]
    H = densities / (phi * dx)
    times = traj.times[: k0 + 1]
    return ConjugateHeatSolution(
        grid=traj.grid,
        p=traj.p,
        gauged=traj.gauged,
        y_index=int(y_index),
        T=T,
        tau0=tau0,
        times=times,
        H=H,
        h=_log_kernel(H, T - times),
        phi=phi,
        u=traj.u[: k0 + 1],
        time_indices=np.arange(k0 + 1),
        kind="numerical",
        traj=traj,
    )


def solve_forward_heat(traj, Phi0, t0):
    """Crank-Nicolson forward heat march from t0 to the end of the trajectory.

    Parameters
    ----------
    traj : FlowTrajectory
        The flow.
    Phi0 : array
        Positive initial data at t0.
    t0 : float
        Start time, snapped to the nearest stored time.

    Returns
    -------
    HeatSolution
    """
    Phi = traj.grid.check_field(Phi0, "Phi0").copy()
    if Phi.min() <= 0:
        raise PositivityViolationError("Phi0 must be positive.")
    k_start = traj.index_of_time(t0)
    n_steps = traj.n_times - k_start
    out = np.empty((n_steps, traj.grid.n_points))
    out[0] = Phi
    B_k = forward_operator(traj, k_start)
    for j, k in enumerate(range(k_start, traj.n_times - 1), start=1):
        dt = traj.times[k + 1] - traj.times[k]
        lu = _implicit_factor(traj, k + 1, dt)
        Phi = lu.solve(Phi + 0.5 * dt * (B_k @ Phi))
        if not np.all(np.isfinite(Phi)):
            raise NumericalBlowupError(f"Non-finite Phi at t = {traj.times[k + 1]}.")
        if Phi.min() <= 0:
            raise PositivityViolationError(f"Phi <= 0 at t = {traj.times[k + 1]}.")
        out[j] = Phi
        B_k = forward_operator(traj, k + 1)
    return HeatSolution(
        times=traj.times[k_start:],
        Phi=out,
        time_indices=np.arange(k_start, traj.n_times),
        t0=float(traj.times[k_start]),
        traj=traj,
    )


def heat_solution_from_warping(traj, shift=2.0):
    """Use the stored u + shift as a forward heat solution.

    u solves du/dt = Delta_N u in the gauged system and the warped heat
    equation in the ungauged one, so it is a forward solution up to the
    difference between the two time discretizations.
    """
    Phi = traj.u + shift
    if Phi.min() <= 0:
        raise PositivityViolationError("u + shift is not positive; increase shift.")
    return HeatSolution(
        times=traj.times,
        Phi=Phi,
        time_indices=np.arange(traj.n_times),
        t0=float(traj.times[0]),
        traj=traj,
    )


def _common_indices(H_sol, Phi_sol):
    if H_sol.time_indices is None or H_sol.traj is None:
        raise ConfigurationError("Pairings need a kernel solved on a trajectory.")
    if Phi_sol.traj is not H_sol.traj:
        raise ConfigurationError("H and Phi live on different trajectories.")
    common, ih, ip = np.intersect1d(
        H_sol.time_indices, Phi_sol.time_indices, return_indices=True
    )
    if common.size == 0:
        raise ConfigurationError("H and Phi have disjoint time windows.")
    return common, ih, ip


def pairing_series(H_sol, Phi_sol):
    """int H Phi dmu on the common stored times, as (times, values)."""
    common, ih, ip = _common_indices(H_sol, Phi_sol)
    values = np.sum(H_sol.H[ih] * Phi_sol.Phi[ip] * H_sol.phi[ih], axis=1) * H_sol.dx
    return H_sol.times[ih], values


def duality_defect(H_sol, Phi_sol):
    """Relative drift of int H Phi dmu over the common window.

    The reference is the latest common time.
    """
    _, values = pairing_series(H_sol, Phi_sol)
    ref = values[-1]
    return float(np.max(np.abs(values - ref)) / abs(ref))


def heat_reproduction_defect(H_sol, Phi_sol):
    """Relative gap between int H Phi dmu at the earliest time and Phi(y, T).

    This is the reproducing property of the kernel; the Gaussian bootstrap
    contributes an error of order tau0^2.
    """
    k_T = H_sol.traj.index_of_time(H_sol.T)
    position = np.flatnonzero(Phi_sol.time_indices == k_T)
    if position.size == 0:
        raise ConfigurationError("Phi does not reach the kernel time T.")
    target = Phi_sol.Phi[position[0], H_sol.y_index]
    _, values = pairing_series(H_sol, Phi_sol)
    return float(abs(values[0] - target) / abs(target))


def initial_D(traj):
    """D = min{0, inf S(., t_start)}."""
    return float(min(0.0, traj.S[0].min()))


def kernel_upper_bound_check(H_sol, B, D, tol=None, tau_min=None):
    """Check H(x, t) <= e^{B - tau D / 3} (4 pi tau)^{-1/2} at every node.

    The margin 1 - H / bound is taken at every grid point and every stored
    time (tau >= tau_min when given). The allowed violation at scale tau is
    tol + s^2 / (16 tau), s the largest metric spacing: the discrete kernel
    peak exceeds (4 pi tau)^{-1/2} by the lattice correction
    s^2 (tau - tau0) / (16 tau^2) <= s^2 / (16 tau). ``tol`` defaults to
    10 spacing^2.
    """
    if D > 0:
        raise ConfigurationError(f"D must be nonpositive, got {D}.")
    if tol is None:
        tol = 10.0 * H_sol.dx**2
    tau = H_sol.tau
    keep = np.ones(tau.size, dtype=bool) if tau_min is None else tau >= tau_min
    if not np.any(keep):
        raise ConfigurationError(f"No tau >= {tau_min} in the kernel solution.")
    tau = tau[keep]
    spacing_sq = (H_sol.phi[keep].max(axis=1) * H_sol.dx) ** 2
    allowed = tol + spacing_sq / (16.0 * tau)
    bound = np.exp(B - tau * D / 3.0) / np.sqrt(4.0 * np.pi * tau)
    margin = 1.0 - H_sol.H[keep].max(axis=1) / bound
    k = int(np.argmin(margin + allowed))
    return CheckReport(
        "kernel_upper_bound",
        bool(np.all(margin >= -allowed)),
        float(margin[k]),
        float(allowed[k]),
        "Gaussian-type upper bound of the conjugate kernel",
        {"B": float(B), "D": float(D), "worst_tau": float(tau[k]), "tol": tol},
    )


def _static_flat_geometry(traj_or_grid, n_times):
    grid = getattr(traj_or_grid, "grid", traj_or_grid)
    if hasattr(traj_or_grid, "phi"):
        phi0 = float(np.asarray(traj_or_grid.phi)[0].mean())
        p = traj_or_grid.p
        gauged = traj_or_grid.gauged
    else:
        phi0, p, gauged = 1.0, 1, True
    phi = np.full((n_times, grid.n_points), phi0)
    return grid, phi0, phi, p, gauged


def theta_kernel_solution(source, y_index, T, taus, images=8, lattice=False):
    """Image-sum kernel of a static flat circle.

    With ``lattice`` the images are those of the heat kernel of the
    three-point Laplacian on the lattice s Z (s = phi dx),
    e^{-2 tau / s^2} I_j(2 tau / s^2) / s, which is the exact kernel of the
    spatially discrete conjugate equation; it differs from the continuum
    kernel by O(s^2).

    Parameters
    ----------
    source : FlowTrajectory or Grid1D
        Supplies the grid and the constant phi (phi = 1 for a bare grid).
    y_index : int
        Center index.
    T : float
        Final time.
    taus : array
        Positive tau values to tabulate.
    images : int, optional
        Number of wraps in each direction, by default 8.
    lattice : bool, optional
        Sum lattice kernels instead of Gaussians, by default False.

    Returns
    -------
    ConjugateHeatSolution
        kind "theta", no trajectory indices.
    """
    taus = np.sort(np.asarray(taus, dtype=float))[::-1]
    grid, phi0, phi, p, gauged = _static_flat_geometry(source, taus.size)
    wraps = np.arange(-images, images + 1)
    if lattice:
        spacing = phi0 * grid.spacing
        steps = np.arange(grid.n_points) - int(y_index)
        j = np.abs(steps[:, None] + wraps[None, :] * grid.n_points)
        rate = 2.0 * taus / spacing**2
        H = ive(j[None, :, :], rate[:, None, None]).sum(axis=2) / spacing
        h = _log_kernel(H, taus)
    else:
        length = phi0 * grid.coordinate_length
        offset = phi0 * (grid.x - grid.x[int(y_index)])
        z = offset[None, :, None] + wraps[None, None, :] * length
        h = -logsumexp(-(z**2) / (4.0 * taus[:, None, None]), axis=2)
        H = np.exp(-h) / np.sqrt(4.0 * np.pi * taus)[:, None]
    return ConjugateHeatSolution(
        grid=grid,
        p=p,
        gauged=gauged,
        y_index=int(y_index),
        T=float(T),
        tau0=float(taus.min()),
        times=T - taus,
        H=H,
        h=h,
        phi=phi,
        u=np.zeros_like(phi),
        kind="theta",
    )


def euclidean_gaussian_solution(grid, y_index, T, taus):
    """Single Gaussian (4 pi tau)^{-1/2} e^{-z^2 / 4 tau} on a flat line segment.

    z is the signed offset from y in (-L/2, L/2]; h = z^2 / 4 tau is stored
    exactly. Only points away from the cut z = +-L/2 represent the
    Euclidean equality case.
    """
    taus = np.sort(np.asarray(taus, dtype=float))[::-1]
    z = signed_offset(grid, y_index)
    h = z[None, :] ** 2 / (4.0 * taus[:, None])
    H = np.exp(-h) / np.sqrt(4.0 * np.pi * taus)[:, None]
    phi = np.ones((taus.size, grid.n_points))
    return ConjugateHeatSolution(
        grid=grid,
        p=1,
        gauged=True,
        y_index=int(y_index),
        T=float(T),
        tau0=float(taus.min()),
        times=T - taus,
        H=H,
        h=h,
        phi=phi,
        u=np.zeros_like(phi),
        kind="euclidean",
    )


def signed_offset(grid, y_index):
    """Signed coordinate offset from y in (-L/2, L/2]."""
    length = grid.coordinate_length
    z = grid.x - grid.x[int(y_index)]
    return (z + 0.5 * length) % length - 0.5 * length


def save_conjugate(H_sol, run_dir, time_stride=1):
    """Write conjugate_<y>_<T>.csv with columns t, x_index, H, h.

    Every ``time_stride``-th stored time is kept, the latest one always.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    n = H_sol.grid.n_points
    keep = np.arange(0, H_sol.times.size, int(time_stride))
    if keep[-1] != H_sol.times.size - 1:
        keep = np.append(keep, H_sol.times.size - 1)
    df = pd.DataFrame(
        {
            "t": np.repeat(H_sol.times[keep], n),
            "x_index": np.tile(np.arange(n), keep.size),
            "H": H_sol.H[keep].ravel(),
            "h": H_sol.h[keep].ravel(),
        }
    )
    path = run_dir / f"conjugate_{H_sol.y_index}_{H_sol.T:.6g}.csv"
    df.to_csv(path, index=False, float_format="%.17g")
    return path
