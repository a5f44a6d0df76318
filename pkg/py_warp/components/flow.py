# Ricci flow of a warped product over a circle, gauged and ungauged.
# Last modified on Oct 18, 2026
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.sparse.linalg import splu
from tqdm import tqdm

from ..utility.errors import (
    ConfigurationError,
    DegenerateMetricError,
    NumericalBlowupError,
    SolverError,
    StepBudgetError,
)
from ..utility.util import CheckReport
from .geometry import (
    Grid1D,
    WarpedGeometry,
    ddx,
    integrate,
    laplacian_matrix,
    metric_laplacian,
)

logger = logging.getLogger(__name__)

SCHEMES = ("explicit-rk4", "implicit-trapezoidal")
SYSTEM_TAGS = ("gauged", "ungauged")
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class IntegratorConfig:
    """Time integration settings.

    >>> # A sample settings dictionary
    >>> settings = {
    >>>     "scheme": "explicit-rk4",
    >>>     "cfl_safety": 0.2,
    >>>     "t_end": 0.5,
    >>>     "degeneracy_floor": 1e-6,
    >>>     "max_steps": 200000
    >>>     }

    Notes
    -----
    The step size is dt = cfl_safety * (min phi * spacing)^2 / 2, recomputed
    every step and clipped so that the last step lands on t_end.
    """

    t_end: float
    scheme: str = "explicit-rk4"
    cfl_safety: float = 0.2
    degeneracy_floor: float = 1e-6
    max_steps: int = 200000
    picard_tol: float = 1e-12
    picard_max_iter: int = 50

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigurationError(
                f"Unknown scheme '{self.scheme}'; choose from {SCHEMES}."
            )
        if not 0 < self.cfl_safety <= 1:
            raise ConfigurationError(
                f"cfl_safety must lie in (0, 1], got {self.cfl_safety}."
            )
        if self.scheme == "explicit-rk4" and self.cfl_safety > 0.5:
            raise ConfigurationError(
                f"cfl_safety {self.cfl_safety} exceeds 0.5 for the explicit scheme."
            )
        if not self.t_end > 0:
            raise ConfigurationError(f"t_end must be positive, got {self.t_end}.")
        if not self.degeneracy_floor > 0:
            raise ConfigurationError("degeneracy_floor must be positive.")

    @classmethod
    def from_dict(cls, settings: dict):
        unknown = set(settings) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"Unknown integrator keys: {sorted(unknown)}.")
        return cls(**settings)

    def to_dict(self) -> dict:
        return asdict(self)


def cfl_dt(phi, dx, cfl_safety):
    return cfl_safety * (np.min(phi) * dx) ** 2 / 2.0


def _rhs_arrays(phi, u, dx, p, system_tag):
    """Right-hand sides (d phi/dt, du/dt) in the storage convention of the system."""
    lap_u = metric_laplacian(u, phi, dx)
    du_dx = ddx(u, dx)
    if system_tag == "gauged":
        return du_dx**2 / phi, lap_u
    grad_sq = du_dx**2 / phi**2
    # d(phi^2)/dt = 2p (Hess f)_xx / f, written conservatively in u = ln f
    return p * phi * (lap_u + grad_sq), lap_u + p * grad_sq


def _check_system_tag(system_tag):
    if system_tag not in SYSTEM_TAGS:
        raise ConfigurationError(
            f"Unknown system_tag '{system_tag}'; choose from {SYSTEM_TAGS}."
        )


def _convert(state, system_tag):
    return state.to_gauged() if system_tag == "gauged" else state.to_ungauged()


def flow_rhs(state, system_tag):
    """Time derivatives of (phi, u) for one slice.

    Parameters
    ----------
    state : WarpedGeometry
        The slice; u is converted to the storage convention of the system.
    system_tag : str
        "gauged": d phi/dt = (u_x)^2 / phi, du/dt = Delta_N u.
        "ungauged": d(phi^2)/dt = 2p (Hess f)_xx / f,
        du/dt = Delta_N u + p |grad u|^2.

    Returns
    -------
    tuple of numpy.ndarray
        (d phi/dt, du/dt).
    """
    _check_system_tag(system_tag)
    state = _convert(state, system_tag)
    return _rhs_arrays(state.phi, state.u, state.dx, state.p, system_tag)


def _rk4(phi, u, dt, dx, p, system_tag):
    k1 = _rhs_arrays(phi, u, dx, p, system_tag)
    k2 = _rhs_arrays(phi + 0.5 * dt * k1[0], u + 0.5 * dt * k1[1], dx, p, system_tag)
    k3 = _rhs_arrays(phi + 0.5 * dt * k2[0], u + 0.5 * dt * k2[1], dx, p, system_tag)
    k4 = _rhs_arrays(phi + dt * k3[0], u + dt * k3[1], dx, p, system_tag)
    phi_new = phi + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    u_new = u + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    return phi_new, u_new


def _trapezoidal(phi, u, dt, dx, p, system_tag, tol, max_iter):
    """Implicit trapezoidal step solved by Picard iteration.

    The u equation is linear in u for a frozen metric and is solved exactly
    with a sparse factorization; phi is updated by the trapezoidal rule.
    """
    dphi0, du0 = _rhs_arrays(phi, u, dx, p, system_tag)
    identity = sparse.identity(phi.size, format="csc")
    phi_k, u_k = phi + dt * dphi0, u + dt * du0
    for it in range(max_iter):
        rhs = u + 0.5 * dt * du0
        if system_tag == "ungauged":
            rhs = rhs + 0.5 * dt * p * ddx(u_k, dx) ** 2 / phi_k**2
        lu = splu(
            (identity - 0.5 * dt * laplacian_matrix(phi_k, dx)).tocsc(),
            permc_spec="NATURAL",
            diag_pivot_thresh=0,
        )
        u_next = lu.solve(rhs)
        dphi1, _ = _rhs_arrays(phi_k, u_next, dx, p, system_tag)
        phi_next = phi + 0.5 * dt * (dphi0 + dphi1)
        change = max(np.max(np.abs(u_next - u_k)), np.max(np.abs(phi_next - phi_k)))
        phi_k, u_k = phi_next, u_next
        if change < tol:
            logger.debug("Picard converged in %d iterations.", it + 1)
            return phi_k, u_k
    raise SolverError(
        "Picard iteration of the trapezoidal step did not converge.",
        {"iterations": max_iter, "last_change": float(change), "dt": dt},
    )


def _advance(state, dt, system_tag, config=None):
    state = _convert(state, system_tag)
    phi, u, dx, p = state.phi, state.u, state.dx, state.p
    if config is None or config.scheme == "explicit-rk4":
        phi_new, u_new = _rk4(phi, u, dt, dx, p, system_tag)
    else:
        phi_new, u_new = _trapezoidal(
            phi, u, dt, dx, p, system_tag, config.picard_tol, config.picard_max_iter
        )
    floor = 1e-6 if config is None else config.degeneracy_floor
    t_new = state.time + dt
    if not (np.all(np.isfinite(phi_new)) and np.all(np.isfinite(u_new))):
        raise NumericalBlowupError(f"Non-finite state after the step to t = {t_new}.")
    if phi_new.min() <= floor:
        raise DegenerateMetricError(
            f"min phi = {phi_new.min():.3e} fell below the floor {floor:.1e} "
            f"at t = {t_new}."
        )
    return state.replace(phi=phi_new, u=u_new, time=t_new)


def step_gauged(state, dt, config=None):
    """Advance the gauged system d phi/dt = (u_x)^2/phi, du/dt = Delta_N u by dt.

    The returned slice stores u in the gauged convention.
    """
    return _advance(state, dt, "gauged", config)


def step_ungauged(state, dt, config=None):
    """Advance the ungauged system by dt; u stays the physical exponent."""
    return _advance(state, dt, "ungauged", config)


def _frozen_stack(values):
    values = np.array(values, dtype=float)
    values.setflags(write=False)
    return values


@dataclass(frozen=True)
class FlowTrajectory:
    """Immutable record of a flow run.

    Attributes
    ----------
    grid : Grid1D
        The base grid.
    p : int
        Fiber dimension.
    system_tag : str
        "gauged" or "ungauged"; u follows the matching storage convention.
    times : numpy.ndarray
        Strictly increasing stored times, shape (K,).
    phi, u : numpy.ndarray
        Stacked fields, shape (K, n_points).
    dt_sequence : numpy.ndarray
        Realized step sizes, shape (K - 1,).
    config : IntegratorConfig
        Settings of the run.
    V_F : float
        Fiber volume used by conversions between normalizations.
    dt_policy : str
        "cfl" or "replay".
    """

    grid: Grid1D
    p: int
    system_tag: str
    times: np.ndarray
    phi: np.ndarray
    u: np.ndarray
    dt_sequence: np.ndarray
    config: IntegratorConfig
    V_F: float = 1.0
    dt_policy: str = "cfl"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        _check_system_tag(self.system_tag)
        for name in ("times", "phi", "u", "dt_sequence"):
            object.__setattr__(self, name, _frozen_stack(getattr(self, name)))
        if self.phi.shape != (self.times.size, self.grid.n_points):
            raise ConfigurationError("phi stack does not match times and grid.")
        if self.u.shape != self.phi.shape:
            raise ConfigurationError("u stack does not match phi stack.")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ConfigurationError("Stored times must be strictly increasing.")

    @property
    def gauged(self) -> bool:
        return self.system_tag == "gauged"

    @property
    def dx(self) -> float:
        return self.grid.spacing

    @property
    def n_times(self) -> int:
        return self.times.size

    @property
    def coupling(self) -> int:
        return 1 if self.gauged else self.p

    @property
    def physical_u(self) -> np.ndarray:
        return self.u / np.sqrt(self.p) if self.gauged else self.u

    def snapshot(self, k) -> WarpedGeometry:
        return WarpedGeometry(
            self.grid, self.phi[k], self.u[k], self.p, self.times[k], self.gauged
        )

    @property
    def snapshots(self) -> list:
        return [self.snapshot(k) for k in range(self.n_times)]

    @property
    def S(self) -> np.ndarray:
        """Stacked adapted scalar S = -p |grad u|^2, shape (K, n)."""
        if "S" not in self._cache:
            self._cache["S"] = _frozen_stack(
                -self.coupling * ddx(self.u, self.dx) ** 2 / self.phi**2
            )
        return self._cache["S"]

    def index_of_time(self, t, tol=None):
        """Index of the stored time nearest to t.

        Raises ConfigurationError when the nearest stored time is farther
        than ``tol`` (default: the largest step of the run).
        """
        k = int(np.argmin(np.abs(self.times - t)))
        if tol is None:
            tol = float(self.dt_sequence.max()) if self.dt_sequence.size else 0.0
        if abs(self.times[k] - t) > tol + 1e-12 * max(1.0, abs(t)):
            raise ConfigurationError(
                f"t = {t} is not within {tol:.3e} of a stored time "
                f"(range [{self.times[0]}, {self.times[-1]}])."
            )
        return k

    @property
    def monitor_series(self) -> pd.DataFrame:
        """Per-time monitors of the run.

        Columns: t, min_S, max_S, integral_S, max_grad_u_sq, min_grad_u_sq,
        max_u, max_abs_u, total_length, measure_residual. The measure
        residual is d/dt int dmu + int S dmu by centered differences (nan at
        the two ends).
        """
        if "monitors" not in self._cache:
            S = self.S
            length = integrate(np.ones_like(self.phi), self.phi, self.dx)
            integral_S = integrate(S, self.phi, self.dx)
            residual = np.full(self.n_times, np.nan)
            if self.n_times > 2:
                dlength = (length[2:] - length[:-2]) / (
                    self.times[2:] - self.times[:-2]
                )
                residual[1:-1] = dlength + integral_S[1:-1]
            self._cache["monitors"] = pd.DataFrame(
                {
                    "t": self.times,
                    "min_S": S.min(axis=1),
                    "max_S": S.max(axis=1),
                    "integral_S": integral_S,
                    "max_grad_u_sq": (-S).max(axis=1),
                    "min_grad_u_sq": (-S).min(axis=1),
                    "max_u": self.u.max(axis=1),
                    "max_abs_u": np.abs(self.u).max(axis=1),
                    "total_length": length,
                    "measure_residual": residual,
                }
            )
        return self._cache["monitors"].copy()


def run_flow(
    initial, cfg, system_tag, dt_sequence=None, V_F=1.0, show_progress=False
):
    """Integrate one of the two flow systems from ``initial`` to cfg.t_end.

    Parameters
    ----------
    initial : WarpedGeometry
        Initial slice. For the gauged system u is converted to the gauged
        convention (u -> sqrt(p) u) before the first step.
    cfg : IntegratorConfig
        Integration settings.
    system_tag : str
        "gauged" or "ungauged".
    dt_sequence : array, optional
        Replay these step sizes instead of the CFL policy, so that two runs
        share one time grid.
    V_F : float, optional
        Fiber volume recorded on the trajectory, by default 1.
    show_progress : bool, optional
        Show a tqdm bar, by default False.

    Returns
    -------
    FlowTrajectory
    """
    _check_system_tag(system_tag)
    state = _convert(initial, system_tag)
    if state.phi.min() <= cfg.degeneracy_floor:
        raise DegenerateMetricError("Initial phi is already below the floor.")
    t_start, t_end = state.time, cfg.t_end
    if t_end <= t_start:
        raise ConfigurationError(f"t_end {t_end} must exceed the start {t_start}.")
    if dt_sequence is not None:
        dt_sequence = np.asarray(dt_sequence, dtype=float)
        if not np.isclose(t_start + dt_sequence.sum(), t_end, rtol=1e-12, atol=1e-14):
            raise ConfigurationError("The replayed dt_sequence does not reach t_end.")

    logger.info(
        "Run %s flow, %s, n = %d, p = %d, t in [%g, %g].",
        system_tag,
        cfg.scheme,
        state.grid.n_points,
        state.p,
        t_start,
        t_end,
    )
    times, phis, us, dts = [state.time], [state.phi], [state.u], []
    pbar = tqdm(
        total=t_end - t_start, desc=f"{system_tag} flow", disable=not show_progress
    )
    k = 0
    while True:
        if dt_sequence is not None:
            if k == dt_sequence.size:
                break
            dt = dt_sequence[k]
        else:
            remaining = t_end - state.time
            if remaining <= 1e-13 * max(1.0, abs(t_end)):
                break
            dt = cfl_dt(state.phi, state.dx, cfg.cfl_safety)
            if dt >= remaining * (1.0 - 1e-9):
                dt = remaining
        if k >= cfg.max_steps:
            pbar.close()
            raise StepBudgetError(
                f"t_end = {t_end} not reached within {cfg.max_steps} steps "
                f"(t = {state.time})."
            )
        state = _advance(state, dt, system_tag, cfg)
        if dt_sequence is None and state.time >= t_end - 1e-13 * max(1.0, abs(t_end)):
            state = state.replace(time=t_end)
        times.append(state.time)
        phis.append(state.phi)
        us.append(state.u)
        dts.append(dt)
        pbar.update(dt)
        k += 1
    pbar.close()
    logger.info("Flow finished after %d steps.", k)
    return FlowTrajectory(
        grid=state.grid,
        p=state.p,
        system_tag=system_tag,
        times=np.array(times),
        phi=np.array(phis),
        u=np.array(us),
        dt_sequence=np.array(dts),
        config=cfg,
        V_F=V_F,
        dt_policy="cfl" if dt_sequence is None else "replay",
    )


def monotonicity_report(traj, tol=None):
    """Maximum-principle monitors of a run.

    Returns
    -------
    list of CheckReport
        min S nondecreasing, max |grad u|^2 nonincreasing, max |u| never
        above its initial value, and the measure evolution identity
        d/dt int dmu = -int S dmu. The default tolerance is 10 * spacing^2.
    """
    if tol is None:
        tol = 10.0 * traj.dx**2
    m = traj.monitor_series
    min_S_drop = np.min(np.diff(m["min_S"].to_numpy()), initial=0.0)
    grad_rise = np.max(np.diff(m["max_grad_u_sq"].to_numpy()), initial=0.0)
    u_excess = float(m["max_abs_u"].max() - m["max_abs_u"].iloc[0])
    measure = np.nanmax(np.abs(m["measure_residual"].to_numpy()), initial=0.0)
    return [
        CheckReport(
            "min_S_nondecreasing",
            min_S_drop >= -tol,
            float(min_S_drop),
            tol,
            "maximum principle for the evolution of S",
        ),
        CheckReport(
            "max_grad_u_nonincreasing",
            grad_rise <= tol,
            -float(grad_rise),
            tol,
            "maximum principle for the evolution of |grad u|^2",
        ),
        CheckReport(
            "max_abs_u_bounded",
            u_excess <= tol,
            -u_excess,
            tol,
            "maximum principle for u",
        ),
        CheckReport(
            "measure_evolution",
            measure <= tol,
            -float(measure),
            tol,
            "d/dt int dmu = -int S dmu",
        ),
    ]


def shi_diagnostic(traj, constant=4.0):
    """Soft Shi-type bound sup |grad u|(t) sqrt(t - t0) <= constant * sup |u(0)|.

    Gradients are measured with the coupling of the storage convention so
    that both systems report the same number.
    """
    m = traj.monitor_series
    elapsed = m["t"].to_numpy() - m["t"].iloc[0]
    lhs = np.sqrt(m["max_grad_u_sq"].to_numpy()) * np.sqrt(elapsed)
    rhs = constant * np.sqrt(traj.coupling) * m["max_abs_u"].iloc[0]
    margin = float(np.min(rhs - lhs))
    return CheckReport(
        "shi_gradient_bound",
        margin >= 0,
        margin,
        0.0,
        "Shi-type derivative bound",
        {"constant": constant, "max_scaled_gradient": float(lhs.max())},
    )


GAUGE_INVARIANTS = (
    "total_length",
    "integral_S",
    "min_S",
    "max_S",
    "min_grad_u_sq",
    "max_grad_u_sq",
)


def gauge_invariants_compare(traj_a, traj_b, tol=None):
    """Compare diffeomorphism-invariant scalars of a gauged and an ungauged run.

    Parameters
    ----------
    traj_a : FlowTrajectory
        Gauged run.
    traj_b : FlowTrajectory
        Ungauged run on the same time grid (replay traj_a.dt_sequence).
    tol : float, optional
        Allowed relative deviation, by default 10 * spacing^2.

    Returns
    -------
    CheckReport
        details holds the deviation of each invariant. Length and the
        integral of S are measured relative to their own size; the extrema
        of S and |grad u|^2 relative to the overall size of S.
    """
    if traj_a.system_tag != "gauged" or traj_b.system_tag != "ungauged":
        raise ConfigurationError("Expected a gauged and an ungauged trajectory.")
    if traj_a.grid != traj_b.grid or traj_a.p != traj_b.p:
        raise ConfigurationError("Trajectories live on different grids or fibers.")
    if traj_a.n_times != traj_b.n_times or not np.allclose(
        traj_a.times, traj_b.times, rtol=0, atol=1e-12 * max(1.0, traj_a.times[-1])
    ):
        raise ConfigurationError("Trajectories do not share a time grid.")
    if tol is None:
        tol = 10.0 * traj_a.dx**2
    ma, mb = traj_a.monitor_series, traj_b.monitor_series
    s_scale = max(ma["max_grad_u_sq"].max(), mb["max_grad_u_sq"].max(), 1e-300)
    deviations = {}
    for name in GAUGE_INVARIANTS:
        a, b = ma[name].to_numpy(), mb[name].to_numpy()
        if name in ("total_length", "integral_S"):
            scale = max(np.abs(a).max(), np.abs(b).max(), 1e-300)
        else:
            scale = s_scale
        deviations[name] = float(np.max(np.abs(a - b)) / scale)
    worst = max(deviations.values())
    return CheckReport(
        "gauge_equivalence",
        worst <= tol,
        -worst,
        tol,
        "pullback equivalence of the gauged and ungauged flows",
        deviations,
    )


def save_trajectory(traj, run_dir, snapshot_stride=1):
    """Write manifest.json and snapshots.csv of a trajectory.

    Parameters
    ----------
    traj : FlowTrajectory
        The run.
    run_dir : str or Path
        Target directory, created when missing.
    snapshot_stride : int, optional
        Keep every k-th stored time (the last one always), by default 1.

    Returns
    -------
    Path
        The run directory.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    keep = np.arange(0, traj.n_times, int(snapshot_stride))
    if keep[-1] != traj.n_times - 1:
        keep = np.append(keep, traj.n_times - 1)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "system_tag": traj.system_tag,
        "grid": {
            "n_points": traj.grid.n_points,
            "coordinate_length": traj.grid.coordinate_length,
        },
        "p": traj.p,
        "V_F": traj.V_F,
        "u_convention": "sqrt_p_scaled" if traj.gauged else "physical",
        "integrator": traj.config.to_dict(),
        "dt_policy": {
            "kind": traj.dt_policy,
            "n_steps": int(traj.dt_sequence.size),
            "snapshot_stride": int(snapshot_stride),
            "dt_min": float(traj.dt_sequence.min()) if traj.dt_sequence.size else None,
            "dt_max": float(traj.dt_sequence.max()) if traj.dt_sequence.size else None,
        },
    }
    with open(run_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
    n = traj.grid.n_points
    df = pd.DataFrame(
        {
            "t": np.repeat(traj.times[keep], n),
            "x_index": np.tile(np.arange(n), keep.size),
            "phi": traj.phi[keep].ravel(),
            "u": traj.u[keep].ravel(),
        }
    )
    df.to_csv(run_dir / "snapshots.csv", index=False, float_format="%.17g")
    return run_dir


def load_trajectory(run_dir):
    """Read a trajectory written by :func:`save_trajectory`.

    The dt sequence is rebuilt from the stored times, so it is exact only
    for runs saved with snapshot_stride 1.
    """
    run_dir = Path(run_dir)
    with open(run_dir / "manifest.json") as f:
        manifest = json.load(f)
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ConfigurationError(
            f"Unsupported schema_version {manifest.get('schema_version')}."
        )
    grid = Grid1D(**manifest["grid"])
    df = pd.read_csv(run_dir / "snapshots.csv", float_precision="round_trip")
    n = grid.n_points
    times = df["t"].to_numpy()[::n]
    phi = df["phi"].to_numpy().reshape(-1, n)
    u = df["u"].to_numpy().reshape(-1, n)
    return FlowTrajectory(
        grid=grid,
        p=manifest["p"],
        system_tag=manifest["system_tag"],
        times=times,
        phi=phi,
        u=u,
        dt_sequence=np.diff(times),
        config=IntegratorConfig.from_dict(manifest["integrator"]),
        V_F=manifest["V_F"],
        dt_policy=manifest["dt_policy"]["kind"],
    )
