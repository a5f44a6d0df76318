# Adapted reduced distance by dynamic programming in s = sqrt(tau).
# Last modified on Oct 18, 2026
import itertools
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from ..utility.errors import ConfigurationError
from ..utility.util import CheckReport, Indicator, random_generator
from .geometry import ddx, half_phi, metric_laplacian

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReducedDistanceField:
    """Reduced distance ell_w on DP nodes and s-slices.

    Attributes
    ----------
    y_index : int
        Center grid index.
    T : float
        Center time.
    node_indices : numpy.ndarray
        Grid indices of the DP nodes, shape (m,).
    s : numpy.ndarray
        Slice values s_j = sqrt(tau_j), j = 1..M.
    ell : numpy.ndarray
        ell_w at (slice, node), shape (M, m).
    policy : numpy.ndarray
        Grid index of the optimal predecessor on the previous slice,
        shape (M, m); the first slice points at y.
    phi_slices : numpy.ndarray
        phi at the slice times on the nodes, shape (M, m).
    distance_T : numpy.ndarray
        Node-to-node geodesic distances at time T, shape (m, m).
    spacing : float
        Grid spacing of the underlying grid.
    node_stride : int
        Grid points per DP node.
    """

    y_index: int
    T: float
    node_indices: np.ndarray
    s: np.ndarray
    ell: np.ndarray
    policy: np.ndarray
    phi_slices: np.ndarray
    distance_T: np.ndarray
    spacing: float
    node_stride: int = 1

    @property
    def tau(self) -> np.ndarray:
        return self.s**2

    @property
    def L(self) -> np.ndarray:
        """L_w = 4 tau ell_w."""
        return 4.0 * self.tau[:, None] * self.ell

    @property
    def center_node(self) -> int:
        return int(np.flatnonzero(self.node_indices == self.y_index)[0])

    @property
    def d_T(self) -> np.ndarray:
        """Distance at time T from y to every node."""
        return self.distance_T[self.center_node]

    def optimal_path(self, node, slice_index=-1):
        """Grid indices of the minimizer ending at ``node``, from s = 0 upward."""
        slice_index = slice_index % self.s.size
        lookup = {int(g): j for j, g in enumerate(self.node_indices)}
        path = [int(self.node_indices[node])]
        current = node
        for j in range(slice_index, -1, -1):
            predecessor = int(self.policy[j, current])
            path.append(predecessor)
            current = lookup[predecessor]
        return np.array(path[::-1])


@dataclass(frozen=True)
class ReducedVolumeSeries:
    tau: np.ndarray
    V: np.ndarray

    @property
    def nonincreasing(self) -> bool:
        """Observation only: V_w(tau) nonincreasing along the stored taus."""
        return bool(np.all(np.diff(self.V) <= 1e-12 * np.abs(self.V[:-1])))


def tensor_bounds(traj):
    """k1, k2 >= 0 with -k1 g <= S_tensor <= k2 g; S_tensor = S g on a circle."""
    S = traj.S
    return float(max(0.0, (-S).max())), float(max(0.0, S.max()))


def _slice_at(traj, t):
    """phi and S at time t, linear in time between stored slices."""
    times = traj.times
    k = int(np.clip(np.searchsorted(times, t) - 1, 0, times.size - 2))
    if times.size == 1:
        return traj.phi[0], traj.S[0]
    w = (t - times[k]) / (times[k + 1] - times[k])
    w = float(np.clip(w, 0.0, 1.0))
    phi = (1.0 - w) * traj.phi[k] + w * traj.phi[k + 1]
    S = (1.0 - w) * traj.S[k] + w * traj.S[k + 1]
    return phi, S


def _node_arcs(phi, dx, node_indices):
    """Cumulative arc at the nodes and the total length."""
    seg = half_phi(phi) * dx
    cum = np.concatenate(([0.0], np.cumsum(seg)))
    return cum[node_indices], cum[-1]


def _offset_distances(arc, length, offsets):
    """d(node k - m, node k) for each offset m, shape (m_nodes, n_offsets)."""
    m = arc.size
    idx = np.arange(m)[:, None] - offsets[None, :]
    wraps = np.floor_divide(idx, m)
    source = arc[np.mod(idx, m)] + wraps * length
    gap = np.abs(arc[:, None] - source)
    return np.minimum(gap, length - gap) if offsets.size >= m else gap


def _parabolic_min(cand):
    """Row minima of ``cand`` refined by the vertex of a three-point parabola."""
    best = np.argmin(cand, axis=1)
    rows = np.arange(cand.shape[0])
    c0 = cand[rows, best]
    inner = (best > 0) & (best < cand.shape[1] - 1)
    lo = np.where(inner, best - 1, best)
    hi = np.where(inner, best + 1, best)
    cm, cp = cand[rows, lo], cand[rows, hi]
    curvature = cm - 2.0 * c0 + cp
    refine = inner & (curvature > 0)
    value = c0.copy()
    value[refine] = c0[refine] - (cp[refine] - cm[refine]) ** 2 / (
        8.0 * curvature[refine]
    )
    return value, best


def solve_reduced_distance(
    traj,
    y_index,
    T,
    tau_max,
    n_slices=64,
    window=None,
    node_stride=1,
    refine=True,
    S_offset=0.0,
):
    """Minimize the adapted L-length over paths ending at every node.

    With s = sqrt(tau) the length becomes int [2 s^2 S(gamma) + |gamma_s|^2/2] ds,
    regular at s = 0. A transition from node i on slice s_j to node k on
    s_{j+1} costs ds [2 sbar^2 (S_i + S_k)/2 + (d(x_i, x_k)/ds)^2 / 2] with
    phi and S taken at the slab midpoint t = T - sbar^2. Then
    ell_w = V / (2 sqrt(tau)).

    Parameters
    ----------
    traj : FlowTrajectory
        The flow; must cover [T - tau_max, T].
    y_index : int
        Center grid index, a multiple of ``node_stride``.
    T : float
        Center time, snapped to the nearest stored time.
    tau_max : float
        Largest tau of the field.
    n_slices : int, optional
        Uniform s-slices, by default 64.
    window : int, optional
        Largest node jump per slice after the first, by default m / 4 for
        m nodes; the first transition always spans the whole circle.
    node_stride : int, optional
        Use every ``node_stride``-th grid point as a node, by default 1.
    refine : bool, optional
        Refine each minimum with the parabola through the best predecessor
        and its neighbors, by default True. With False the value equals
        exhaustive enumeration over node paths.
    S_offset : float, optional
        Constant added to S inside the DP only (negative controls).

    Returns
    -------
    ReducedDistanceField
    """
    n = traj.grid.n_points
    if n % node_stride:
        raise ConfigurationError(f"node_stride {node_stride} does not divide {n}.")
    if y_index % node_stride:
        raise ConfigurationError(
            f"y_index {y_index} is not a node for node_stride {node_stride}."
        )
    k_T = traj.index_of_time(T)
    T = float(traj.times[k_T])
    if not 0 < tau_max <= T - traj.times[0] + 1e-12:
        raise ConfigurationError(
            f"tau_max {tau_max} exceeds the window [{traj.times[0]}, {T}]."
        )
    nodes = np.arange(0, n, node_stride)
    m = nodes.size
    center = int(y_index) // node_stride
    if window is None:
        window = max(1, m // 4)
    window = min(int(window), m // 2)
    jumps = np.arange(-window, window + 1)
    full = np.arange(-(m // 2), m - m // 2)
    dx = traj.dx
    ds = np.sqrt(tau_max) / n_slices
    s = ds * np.arange(1, n_slices + 1)

    ell = np.empty((n_slices, m))
    policy = np.empty((n_slices, m), dtype=int)
    phi_slices = np.empty((n_slices, m))
    value = np.full(m, np.inf)
    value[center] = 0.0
    for j in range(n_slices):
        s_bar = (j + 0.5) * ds
        phi_mid, S_mid = _slice_at(traj, T - s_bar**2)
        S_nodes = S_mid[nodes] + S_offset
        arc, length = _node_arcs(phi_mid, dx, nodes)
        offsets = full if j == 0 else jumps
        dist = _offset_distances(arc, length, offsets)
        source = np.mod(np.arange(m)[:, None] - offsets[None, :], m)
        potential = ds * 2.0 * s_bar**2 * 0.5 * (S_nodes[source] + S_nodes[:, None])
        cand = value[source] + potential + dist**2 / (2.0 * ds)
        if j == 0:
            best = np.argmin(cand, axis=1)
            value = cand[np.arange(m), best]
        elif refine:
            value, best = _parabolic_min(cand)
        else:
            best = np.argmin(cand, axis=1)
            value = cand[np.arange(m), best]
        policy[j] = nodes[source[np.arange(m), best]]
        ell[j] = value / (2.0 * s[j])
        phi_slices[j] = _slice_at(traj, T - s[j] ** 2)[0][nodes]

    arc_T, length_T = _node_arcs(traj.phi[k_T], dx, nodes)
    gap = np.abs(arc_T[:, None] - arc_T[None, :])
    logger.info(
        "Reduced distance at y = %d, T = %g: %d slices, %d nodes, window %d.",
        y_index,
        T,
        n_slices,
        m,
        window,
    )
    return ReducedDistanceField(
        y_index=int(y_index),
        T=T,
        node_indices=nodes,
        s=s,
        ell=ell,
        policy=policy,
        phi_slices=phi_slices,
        distance_T=np.minimum(gap, length_T - gap),
        spacing=dx,
        node_stride=node_stride,
    )


def solve_reduced_distances(traj, centers, T, tau_max, n_jobs=-1, verbose=0, **kw):
    """Solve several centers in parallel over the shared trajectory."""
    return Parallel(n_jobs=n_jobs, verbose=verbose)(
        delayed(solve_reduced_distance)(traj, y, T, tau_max, **kw) for y in centers
    )


def exhaustive_reduced_distance(traj, y_index, T, tau_max, n_slices, node_stride):
    """Brute-force minimum over every node path; for tiny instances only.

    Uses the same transition costs as :func:`solve_reduced_distance` with a
    full-width window and no refinement.

    Returns
    -------
    numpy.ndarray
        ell_w on the last slice, shape (m,).
    """
    n = traj.grid.n_points
    nodes = np.arange(0, n, node_stride)
    m = nodes.size
    if m**n_slices > 10**6:
        raise ConfigurationError(f"{m}^{n_slices} paths is too many to enumerate.")
    k_T = traj.index_of_time(T)
    T = float(traj.times[k_T])
    dx = traj.dx
    ds = np.sqrt(tau_max) / n_slices
    costs = []
    for j in range(n_slices):
        s_bar = (j + 0.5) * ds
        phi_mid, S_mid = _slice_at(traj, T - s_bar**2)
        S_nodes = S_mid[nodes]
        arc, length = _node_arcs(phi_mid, dx, nodes)
        gap = np.abs(arc[:, None] - arc[None, :])
        dist = np.minimum(gap, length - gap)
        costs.append(
            ds * 2.0 * s_bar**2 * 0.5 * (S_nodes[:, None] + S_nodes[None, :])
            + dist**2 / (2.0 * ds)
        )
    best = np.full(m, np.inf)
    start = int(y_index) // node_stride
    for path in itertools.product(range(m), repeat=n_slices):
        total, prev = 0.0, start
        for j, node in enumerate(path):
            total += costs[j][prev, node]
            prev = node
        best[prev] = min(best[prev], total)
    return best / (2.0 * np.sqrt(tau_max))


def lw_bounds_check(field, k1, k2, tol=None, n=1):
    """Two-sided bounds of L_w = 4 tau ell_w by the distance at time T.

    e^{-2 k1 tau} d_T^2 - (4 k1 n / 3) tau^2 <= L_w
        <= e^{2 k2 tau} d_T^2 + (4 k2 n / 3) tau^2

    Returns
    -------
    tuple of CheckReport
        (lower, upper), tolerance 10 spacing by default.
    """
    if tol is None:
        tol = 10.0 * field.spacing
    tau = field.tau[:, None]
    d2 = field.d_T[None, :] ** 2
    L = field.L
    lower = np.exp(-2.0 * k1 * tau) * d2 - 4.0 * k1 * n / 3.0 * tau**2
    upper = np.exp(2.0 * k2 * tau) * d2 + 4.0 * k2 * n / 3.0 * tau**2
    lower_margin = float((L - lower).min())
    upper_margin = float((upper - L).min())
    return (
        CheckReport(
            "lw_lower_bound",
            lower_margin >= -tol,
            lower_margin,
            tol,
            "L_w >= e^{-2 k1 tau} d_T^2 - 4 k1 n tau^2 / 3",
            {"k1": k1},
        ),
        CheckReport(
            "lw_upper_bound",
            upper_margin >= -tol,
            upper_margin,
            tol,
            "L_w <= e^{2 k2 tau} d_T^2 + 4 k2 n tau^2 / 3",
            {"k2": k2},
        ),
    )


def _check_center(H_sol, field):
    if H_sol.y_index != field.y_index or not np.isclose(
        H_sol.T, field.T, rtol=1e-9, atol=1e-12
    ):
        raise ConfigurationError(
            f"Center mismatch: kernel ({H_sol.y_index}, {H_sol.T}) vs "
            f"reduced distance ({field.y_index}, {field.T})."
        )


def _ell_at_kernel_times(H_sol, field, tau_min=0.0):
    """ell_w at the kernel times inside [tau_min, max field tau] on the nodes.

    L_w = 4 tau ell_w is interpolated linearly in s, which is exact when L_w
    does not depend on tau.
    """
    tau = H_sol.tau
    inside = (tau >= max(tau_min, field.tau[0])) & (tau <= field.tau[-1])
    if not inside.any():
        raise ConfigurationError("The kernel and the reduced distance share no tau.")
    s_k = np.sqrt(tau[inside])
    L = field.L
    L_k = np.column_stack(
        [np.interp(s_k, field.s, L[:, j]) for j in range(field.node_indices.size)]
    )
    return inside, L_k / (4.0 * tau[inside][:, None])


def compare_h_ell(H_sol, field, tau_min=None, tol=None):
    """Margin ell_w - h on the common (tau, node) grid.

    Parameters
    ----------
    H_sol : ConjugateHeatSolution
        Kernel with the same center as ``field``.
    field : ReducedDistanceField
        The reduced distance.
    tau_min : float, optional
        Lower end of the compared window, by default 0.1 * max tau of the
        kernel.
    tol : float, optional
        Allowed violation, by default 10 spacing^2.

    Returns
    -------
    tuple of (DataFrame, CheckReport)
        Long table with columns tau, x_index, margin and the verdict.
    """
    _check_center(H_sol, field)
    if tau_min is None:
        tau_min = 0.1 * H_sol.tau.max()
    if tol is None:
        tol = 10.0 * field.spacing**2
    inside, ell_k = _ell_at_kernel_times(H_sol, field, tau_min)
    h_k = H_sol.h[inside][:, field.node_indices]
    margin = ell_k - h_k
    taus = H_sol.tau[inside]
    df = pd.DataFrame(
        {
            "tau": np.repeat(taus, field.node_indices.size),
            "x_index": np.tile(field.node_indices, taus.size),
            "margin": margin.ravel(),
        }
    )
    worst = float(margin.min())
    return df, CheckReport(
        "h_le_ell",
        worst >= -tol,
        worst,
        tol,
        "h <= ell_w",
        {"tau_min": tau_min},
    )


def small_tau_limits(H_sol, field, Phi_sol=None, fit_window=None, n_fit=None):
    """Small-tau limits of 4 tau ell_w and of the three moments.

    (i) 4 tau ell_w is fitted against tau on the first ``n_fit`` slices
    (default max(4, M / 4)) and extrapolated to tau = 0, then compared with
    d_T^2 relative to max d_T^2, to 1e-3. (ii) int h H Phi, int ell_w H Phi and
    int (d_T^2 / 4 tau) H Phi are evaluated at the kernel times and
    extrapolated to tau = 0 over ``fit_window`` (default [min(10 tau0,
    0.1 max tau), 0.2 max tau]); all three should approach Phi(y, T) / 2.

    Returns
    -------
    dict
        {"slope_d2_error", "moments" (DataFrame), "limits", "target",
        "reports"}.
    """
    _check_center(H_sol, field)
    if field.node_stride != 1:
        raise ConfigurationError("Moments need a reduced distance on every node.")
    if n_fit is None:
        n_fit = max(4, field.s.size // 4)
    if field.s.size < 4 or n_fit < 4:
        raise ConfigurationError("At least 4 tau samples are needed.")
    tau_fit = field.tau[:n_fit]
    L0 = np.array(
        [
            np.polynomial.polynomial.polyfit(tau_fit, field.L[:n_fit, j], 2)[0]
            for j in range(field.node_indices.size)
        ]
    )
    d2 = field.d_T**2
    slope_error = float(np.max(np.abs(L0 - d2)) / max(d2.max(), 1e-300))

    if Phi_sol is None:
        Phi = np.ones_like(H_sol.H)
        target = 0.5
    else:
        lookup = {int(k): j for j, k in enumerate(Phi_sol.time_indices)}
        Phi = Phi_sol.Phi[[lookup[int(k)] for k in H_sol.time_indices]]
        k_T = H_sol.traj.index_of_time(H_sol.T)
        target = 0.5 * float(Phi_sol.Phi[lookup[k_T], H_sol.y_index])
    inside, ell_k = _ell_at_kernel_times(H_sol, field)
    taus = H_sol.tau[inside]
    if taus.size < 4:
        raise ConfigurationError("At least 4 tau samples are needed.")
    weight = H_sol.H[inside] * Phi[inside] * H_sol.phi[inside] * H_sol.dx
    moments = pd.DataFrame(
        {
            "tau": taus,
            "h_moment": np.sum(H_sol.h[inside] * weight, axis=1),
            "ell_moment": np.sum(ell_k * weight, axis=1),
            "d2_moment": np.sum(d2[None, :] / (4.0 * taus[:, None]) * weight, axis=1),
        }
    )
    if fit_window is None:
        hi = 0.2 * H_sol.tau.max()
        fit_window = (min(10.0 * H_sol.tau.min(), 0.5 * hi), hi)
    limits = {
        name: Indicator.extrapolate_to_zero(
            moments["tau"], moments[name], *fit_window
        )
        for name in ("h_moment", "ell_moment", "d2_moment")
    }
    tol = 10.0 * field.spacing
    reports = [
        CheckReport(
            "small_tau_L_limit",
            slope_error <= 1e-3,
            -slope_error,
            1e-3,
            "4 tau ell_w -> d_T^2",
        )
    ] + [
        CheckReport(
            f"small_tau_{name}",
            abs(limit - target) <= tol,
            -abs(limit - target),
            tol,
            "moments -> (n/2) Phi(y, T)",
            {"limit": limit, "target": target},
        )
        for name, limit in limits.items()
    ]
    return {
        "slope_d2_error": slope_error,
        "moments": moments,
        "limits": limits,
        "target": target,
        "reports": reports,
    }


def reduced_volume(field, traj=None):
    """V_w(tau) = int (4 pi tau)^{-1/2} e^{-ell_w} dmu_{T - tau} on each slice.

    phi at the slice times comes from ``traj`` when given, else from the
    field itself.
    """
    if traj is None:
        phi = field.phi_slices
    else:
        phi = np.array(
            [_slice_at(traj, field.T - t)[0][field.node_indices] for t in field.tau]
        )
    cell = field.spacing * field.node_stride
    density = np.exp(-field.ell) / np.sqrt(4.0 * np.pi * field.tau)[:, None]
    return ReducedVolumeSeries(
        tau=np.array(field.tau), V=np.sum(density * phi, axis=1) * cell
    )


def random_vector_field(grid, seed=0, modes=3, amplitude=1.0):
    """Smooth seeded unit-frame component of a vector field on the base."""
    rng = random_generator(seed)
    x = 2.0 * np.pi * grid.x / grid.coordinate_length
    values = np.full(grid.n_points, rng.normal())
    for k in range(1, modes + 1):
        a, b = rng.normal(size=2) / k
        values += a * np.cos(k * x) + b * np.sin(k * x)
    return amplitude * values


def mueller_D_identity(traj, k, X=None):
    """Max |D(S, X) - 2 (Delta u - <grad u, X>)^2| at stored slice k.

    D(S, X) = dS/dt - Delta S - 2 |S_tensor|^2 + 4 div(S_tensor)(X)
              - 2 <grad S, X> + 2 (Rc - S_tensor)(X, X)
    is assembled in the unit frame e = phi^{-1} d/dx of the gauged system,
    where S_tensor = S g and Rc = 0. dS/dt is a centered difference of the
    stored slices.

    Parameters
    ----------
    traj : FlowTrajectory
        A gauged trajectory.
    k : int
        Interior stored slice.
    X : array, optional
        Unit-frame component of the vector field, by default grad u.
    """
    if not traj.gauged:
        raise ConfigurationError("D(S, X) is assembled in the gauged system.")
    if not 0 < k < traj.n_times - 1:
        raise ConfigurationError(f"Slice {k} is on the boundary of the window.")
    dx = traj.dx
    phi, u, S = traj.phi[k], traj.u[k], traj.S
    u_e = ddx(u, dx) / phi
    if X is None:
        X = u_e
    X = traj.grid.check_field(X, "X")
    t = traj.times
    dS_dt = (S[k + 1] - S[k - 1]) / (t[k + 1] - t[k - 1])
    S_k = S[k]
    S_tensor = S_k  # S_tensor(e, e)
    div_S_tensor = ddx(S_tensor, dx) / phi
    grad_S = ddx(S_k, dx) / phi
    ricci = np.zeros_like(S_k)
    D = (
        dS_dt
        - metric_laplacian(S_k, phi, dx)
        - 2.0 * S_tensor**2
        + 4.0 * div_S_tensor * X
        - 2.0 * grad_S * X
        + 2.0 * (ricci - S_tensor) * X**2
    )
    rhs = 2.0 * (metric_laplacian(u, phi, dx) - u_e * X) ** 2
    return float(np.max(np.abs(D - rhs)))


def lipschitz_check(field, tol=None):
    """Triangle-path Lipschitz bound of ell_w in x at fixed tau.

    |ell(x) - ell(x')| <= (d/sqrt(tau)) (sqrt(max ell) + d / (4 sqrt(tau)))
    for every node pair, d = d_T(x, x'). Meaningful on static flat runs.
    """
    if tol is None:
        tol = 10.0 * field.spacing**2
    d = field.distance_T
    worst = np.inf
    for j, tau in enumerate(field.tau):
        ell = field.ell[j]
        diff = np.abs(ell[:, None] - ell[None, :])
        root = np.sqrt(tau)
        bound = d / root * (np.sqrt(max(ell.max(), 0.0)) + d / (4.0 * root))
        worst = min(worst, float((bound - diff).min()))
    return CheckReport(
        "ell_lipschitz",
        worst >= -tol,
        worst,
        tol,
        "local Lipschitz bound of ell_w",
    )


def flat_ell_check(field, tol=1e-4):
    """Static flat reduced distance 4 tau ell_w = d_T^2 on every slice.

    The error is max |4 tau ell_w - d_T^2| over slices and nodes, relative
    to max d_T^2. Meaningful on static flat runs only.
    """
    d2 = field.d_T**2
    error = float(np.abs(field.L - d2[None, :]).max() / max(d2.max(), 1e-300))
    return CheckReport(
        "flat_reduced_distance",
        error <= tol,
        -error,
        tol,
        "static flat 4 tau ell_w equals d_T^2",
    )


def save_reduced(field, run_dir):
    """Write reduced_<y>_<T>.csv with columns tau, x_index, ell, policy_predecessor."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    m = field.node_indices.size
    df = pd.DataFrame(
        {
            "tau": np.repeat(field.tau, m),
            "x_index": np.tile(field.node_indices, field.s.size),
            "ell": field.ell.ravel(),
            "policy_predecessor": field.policy.ravel(),
        }
    )
    path = run_dir / f"reduced_{field.y_index}_{field.T:.6g}.csv"
    df.to_csv(path, index=False, float_format="%.17g")
    return path
