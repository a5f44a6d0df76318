# Pipeline stages of the laboratory model, one mesa agent per stage.
# Last modified on Oct 18, 2026
import logging
import warnings
from copy import deepcopy

import mesa
import numpy as np
import pandas as pd

from ..components.conjugate_heat import (
    duality_defect,
    heat_reproduction_defect,
    heat_solution_from_warping,
    kernel_upper_bound_check,
    save_conjugate,
    solve_conjugate_fundamental,
    solve_forward_heat,
    theta_kernel_solution,
)
from ..components.flow import (
    gauge_invariants_compare,
    monotonicity_report,
    run_flow,
    save_trajectory,
    shi_diagnostic,
)
from ..components.functionals import (
    base_whole_consistency,
    functional_time_series,
    lambda_w,
    lambda_w_dense,
    mu_monotonicity_check,
    mu_w,
    nu_w_sweep,
    save_functionals,
    strangebehavior_probe,
)
from ..components.geometry import product_curvature_oracle, warped_curvatures
from ..components.harnack import (
    compute_v,
    conjugate_identity_residual,
    curve_harnack_check,
    gradient_estimate_check,
    integral_bound_check,
    integrated_gradient_check,
    measure_constants,
    random_curves,
    rho_monotone_limit,
    save_harnack_report,
)
from ..components.reduced_geometry import (
    compare_h_ell,
    flat_ell_check,
    lipschitz_check,
    lw_bounds_check,
    mueller_D_identity,
    random_vector_field,
    reduced_volume,
    save_reduced,
    small_tau_limits,
    solve_reduced_distances,
    tensor_bounds,
)
from ..utility.errors import StageError, WarpLabError
from ..utility.util import CheckReport, Indicator, TimeRecorder

logger = logging.getLogger(__name__)

# Relative sup error of the static flat kernel against the lattice kernel.
THETA_TOL = 1e-5


class Stage(mesa.Agent):
    """Base class of the pipeline stages.

    A stage reads the products of earlier stages from its model, runs its
    checks, stores its own products back on the model and writes its CSV
    files into ``model.run_dir`` (nothing is written when it is None).

    Parameters
    ----------
    unique_id : str
        A unique identifier for this agent, the stage name.
    model : LaboratoryModel
        The model instance to which this agent belongs.
    settings : dict
        The tau schedule of the scenario.

        >>> # A sample settings dictionary
        >>> settings = {
        >>>     "tau_min_fraction": 0.1,
        >>>     "reduced_tau_max": None,
        >>>     "n_slices": 64,
        >>>     "nu_taus": [0.2, 0.1, 0.05, 0.025],
        >>>     "mu_tau_end": 0.1,
        >>>     "mu_samples": 4,
        >>>     "lambda_samples": 16,
        >>>     "n_curves": 3
        >>>     }

    Attributes
    ----------
    agt_type : str
        The class name, used by the scheduler filter.
    reports : list of CheckReport
        Checks produced by the last step.
    elapsed : float or None
        Wall-clock seconds of the last step.
    """

    stage = None

    def __init__(self, unique_id, model, settings: dict):
        """Initialize a stage agent in the Mesa model."""
        # MESA required attributes => (unique_id, model)
        super().__init__(unique_id, model)
        self.agt_type = type(self).__name__
        self.load_settings(settings)
        self.reports = []
        self.elapsed = None

    def load_settings(self, settings: dict):
        self.settings = deepcopy(settings)
        self.tau_min_fraction = settings["tau_min_fraction"]

    @property
    def n_checks(self) -> int:
        return len(self.reports)

    @property
    def n_passed(self) -> int:
        return sum(bool(r.passed) for r in self.reports)

    @property
    def run_dir(self):
        return self.model.run_dir

    def output_dir(self, y_index):
        """The run directory for the first center, center_<y>/ below it otherwise."""
        if self.run_dir is None:
            return None
        if y_index == self.model.config.centers[0]:
            return self.run_dir
        return self.run_dir / f"center_{y_index}"

    def add(self, report, **details):
        report.details.update(details)
        self.reports.append(report)
        logger.info(
            "%s %s: %s (margin %.3e, tolerance %.3e).",
            self.stage,
            report.name,
            report.verdict,
            report.worst_margin,
            report.tolerance,
        )

    def tau_min(self, H_sol):
        return self.tau_min_fraction * float(H_sol.tau.max())

    def step(self):
        """Run the stage; module failures are re-raised as StageError."""
        timer = TimeRecorder()
        self.reports = []
        logger.info("Stage %s started.", self.stage)
        try:
            self.run()
        except (WarpLabError, ArithmeticError, np.linalg.LinAlgError) as e:
            raise StageError(self.stage, str(e)) from e
        self.elapsed = timer.get_elapsed_time(event=self.stage, strf=False)
        logger.info(
            "Stage %s finished in %s: %d of %d checks passed.",
            self.stage,
            timer.sec2str(self.elapsed),
            self.n_passed,
            self.n_checks,
        )

    def run(self):
        raise NotImplementedError


class FlowStage(Stage):
    """Integrate the configured system and replay the other one on its dt grid."""

    stage = "flow"

    def run(self):
        model = self.model
        config = model.config
        initial = config.initial_geometry()
        traj = run_flow(
            initial,
            config.integrator,
            config.system_tag,
            V_F=config.V_F,
            show_progress=model.show_progress,
        )
        other = "ungauged" if traj.gauged else "gauged"
        replay = run_flow(
            initial,
            config.integrator,
            other,
            dt_sequence=traj.dt_sequence,
            V_F=config.V_F,
        )
        model.traj = traj
        model.trajs = {traj.system_tag: traj, other: replay}

        for report in monotonicity_report(traj):
            self.add(report)
        self.add(shi_diagnostic(traj))
        compare = gauge_invariants_compare(
            model.trajs["gauged"], model.trajs["ungauged"]
        )
        model.measures["gauge_deviation"] = -compare.worst_margin
        self.add(compare)

        # Coordinate curvature oracle against the warped-product formulas.
        R_M = warped_curvatures(initial).R_M
        oracle = product_curvature_oracle(initial)
        gap = float(np.max(np.abs(R_M - oracle)))
        tol = 10.0 * initial.dx**2 * max(1.0, float(np.abs(R_M).max()))
        self.add(
            CheckReport(
                "curvature_oracle",
                gap <= tol,
                -gap,
                tol,
                "scalar curvature of the warped product",
            )
        )

        if self.run_dir is not None:
            save_trajectory(traj, self.run_dir, config.output["snapshot_stride"])
            traj.monitor_series.to_csv(
                self.run_dir / "monitors.csv", index=False, float_format="%.17g"
            )


class ConjugateStage(Stage):
    """Kernels at every center on both systems, duality and kernel oracles."""

    stage = "conjugate"

    def run(self):
        model = self.model
        config = model.config
        for tag, traj in model.trajs.items():
            for y in config.centers:
                model.kernels[(tag, y)] = solve_conjugate_fundamental(traj, y, config.T)

        traj = model.traj
        t0 = float(traj.times[0])
        x = traj.grid.x
        angle = 2.0 * np.pi * x / traj.grid.coordinate_length
        forward = {
            "one": solve_forward_heat(traj, np.ones_like(x), t0),
            "cosine": solve_forward_heat(traj, 2.0 + np.cos(angle), t0),
        }
        gauged = model.trajs["gauged"]
        shift = max(2.0, 1.0 + float(np.abs(gauged.u).max()))
        warping = heat_solution_from_warping(gauged, shift)
        model.heat_solutions = {**forward, "warping": warping}

        worst_duality = 0.0
        for y in config.centers:
            H_sol = model.kernels[(traj.system_tag, y)]
            pairs = [(label, H_sol, Phi) for label, Phi in forward.items()]
            pairs.append(("warping", model.kernels[("gauged", y)], warping))
            for label, kernel, Phi_sol in pairs:
                defect = duality_defect(kernel, Phi_sol)
                worst_duality = max(worst_duality, defect)
                self.add(
                    CheckReport(
                        f"duality_{label}",
                        defect <= 1e-5,
                        -defect,
                        1e-5,
                        "int H Phi dmu is constant in t",
                    ),
                    center=y,
                )
            reproduction = heat_reproduction_defect(H_sol, forward["cosine"])
            tol = 10.0 * H_sol.tau0
            self.add(
                CheckReport(
                    "kernel_reproduction",
                    reproduction <= tol,
                    -reproduction,
                    tol,
                    "the kernel reproduces Phi(y, T)",
                ),
                center=y,
            )
            if config.is_static_flat():
                self._theta_oracle(H_sol)
            if self.run_dir is not None:
                save_conjugate(H_sol, self.run_dir, config.output["kernel_stride"])
        model.measures["duality_defect"] = worst_duality

    def _theta_oracle(self, H_sol):
        tau_min = self.tau_min(H_sol)
        keep = H_sol.tau >= tau_min
        theta = theta_kernel_solution(H_sol.traj, H_sol.y_index, H_sol.T, H_sol.tau)
        self.model.measures["theta_kernel_error"] = Indicator.get_rel_err(
            theta.H[keep], H_sol.H[keep]
        )
        lattice = theta_kernel_solution(
            H_sol.traj, H_sol.y_index, H_sol.T, H_sol.tau[:1], lattice=True
        )
        rel = Indicator.get_rel_err(lattice.H[0], H_sol.H[0])
        tol = max(THETA_TOL, 10.0 * H_sol.dx**4)
        self.add(
            CheckReport(
                "theta_kernel_oracle",
                rel <= tol,
                -rel,
                tol,
                "static flat kernel equals the lattice image-sum kernel",
                {"tau": float(H_sol.tau[0])},
            ),
            center=H_sol.y_index,
        )


class HarnackStage(Stage):
    """Harnack quantity, its evolution identity and the kernel estimates."""

    stage = "harnack"

    def run(self):
        model = self.model
        config = model.config
        traj = model.traj
        T = config.T
        taus = sorted(set(self.settings["nu_taus"]) | {T - float(traj.times[0])})
        model.nu_sweep = nu_w_sweep(traj.snapshot(0), taus, n_jobs=model.n_jobs)
        B = max(0.0, -model.nu_sweep["minimum"])
        consts = measure_constants(traj, B=B)
        model.constants = consts
        logger.info(
            "Measured k2 = %.4g, k3 = %.4g, B = %.4g, D = %.4g.",
            consts.k2,
            consts.k3,
            consts.B,
            consts.D,
        )

        worst_identity, worst_positive = 0.0, 0.0
        for y in config.centers:
            H_sol = model.kernels[(traj.system_tag, y)]
            tau_min = self.tau_min(H_sol)
            dx = H_sol.dx
            report = compute_v(H_sol)
            residual = conjugate_identity_residual(H_sol, report)
            inside = report.window(tau_min) & np.isfinite(residual)
            identity = float(residual[inside].max())
            tol = 2.0 * dx**2 / tau_min**2
            worst_identity = max(worst_identity, identity)
            self.add(
                CheckReport(
                    "conjugate_identity",
                    identity <= tol,
                    -identity,
                    tol,
                    "evolution identity of the Harnack quantity",
                    {"tau_min": tau_min},
                ),
                center=y,
            )
            positive = report.max_positive_part(tau_min)
            worst_positive = max(worst_positive, positive)
            ratio = report.max_v_series[inside] / report.sup_H_series[inside]
            self.add(
                CheckReport(
                    "harnack_positive_part",
                    positive <= 10.0 * dx**2,
                    -positive,
                    10.0 * dx**2,
                    "Harnack inequality v <= 0",
                    {"max_v_over_sup_H": float(ratio.max()), "tau_min": tau_min},
                ),
                center=y,
            )
            rho = rho_monotone_limit(H_sol, report=report, tau_min=tau_min)
            self.add(rho["monotone"], center=y)
            self.add(rho["limit"], center=y)
            self.add(integral_bound_check(H_sol), center=y)
            self.add(kernel_upper_bound_check(H_sol, consts.B, consts.D), center=y)
            self.add(gradient_estimate_check(H_sol, consts), center=y)
            self.add(integrated_gradient_check(H_sol, consts), center=y)
            self._curves(model.kernels[("gauged", y)])
            model.harnack_reports[y] = report
            if self.run_dir is not None:
                save_harnack_report(report, self.output_dir(y))
        model.measures["identity_residual"] = worst_identity
        model.measures["max_positive_part"] = worst_positive

    def _curves(self, H_g):
        config = self.model.config
        curves = random_curves(
            H_g.grid, H_g.times, self.settings["n_curves"], seed=config.seed
        )
        tau_min = self.tau_min(H_g)
        results = [
            curve_harnack_check(H_g, curve, tau_min=tau_min)[1] for curve in curves
        ]
        worst = min(results, key=lambda r: r.worst_margin)
        self.add(
            worst,
            center=H_g.y_index,
            n_curves=len(results),
            n_passed=sum(r.passed for r in results),
        )


class ReducedStage(Stage):
    """Reduced distance on the gauged flow and its comparisons with the kernel."""

    stage = "reduced"

    def run(self):
        model = self.model
        config = model.config
        traj = model.trajs["gauged"]
        tau_max = self.settings["reduced_tau_max"]
        if tau_max is None:
            tau_max = config.T - float(traj.times[0])
        fields = solve_reduced_distances(
            traj,
            config.centers,
            config.T,
            tau_max,
            n_jobs=model.n_jobs,
            n_slices=self.settings["n_slices"],
        )
        k1, k2 = tensor_bounds(traj)
        worst_violation = 0.0
        for field in fields:
            y = field.y_index
            model.reduced_fields[y] = field
            H_g = model.kernels[("gauged", y)]
            for report in lw_bounds_check(field, k1, k2):
                self.add(report, center=y)
            margins, report = compare_h_ell(H_g, field, tau_min=self.tau_min(H_g))
            worst_violation = max(worst_violation, -report.worst_margin, 0.0)
            self.add(report, center=y)
            for report in small_tau_limits(H_g, field)["reports"]:
                self.add(report, center=y)
            if config.is_static_flat():
                self.add(lipschitz_check(field), center=y)
                self.add(flat_ell_check(field), center=y)
            volume = reduced_volume(field, traj)
            if not volume.nonincreasing:
                warnings.warn(
                    f"Reduced volume at y = {y} is not nonincreasing in tau.",
                    stacklevel=2,
                )
            if self.run_dir is not None:
                out = self.output_dir(y)
                save_reduced(field, out)
                margins.to_csv(
                    out / f"h_ell_margin_{y}.csv", index=False, float_format="%.17g"
                )
                pd.DataFrame({"tau": volume.tau, "V_w": volume.V}).to_csv(
                    out / f"reduced_volume_{y}.csv", index=False, float_format="%.17g"
                )
        model.measures["h_ell_violation"] = worst_violation

        X = random_vector_field(traj.grid, seed=config.seed)
        gap = mueller_D_identity(traj, traj.n_times // 2, X)
        tol = 10.0 * traj.dx**2
        self.add(
            CheckReport(
                "harnack_expression_identity",
                gap <= tol,
                -gap,
                tol,
                "D(S, X) = 2 (Delta u - <grad u, X>)^2",
            )
        )


class FunctionalsStage(Stage):
    """Adapted energy, entropy and their infima along the first kernel."""

    stage = "functionals"

    def run(self):
        model = self.model
        config = model.config
        traj = model.traj
        y = config.centers[0]
        H_sol = model.kernels[(traj.system_tag, y)]
        dx = H_sol.dx
        tau_min = self.tau_min(H_sol)
        n_times = H_sol.times.size
        series = functional_time_series(
            H_sol,
            lambda_stride=max(1, n_times // self.settings["lambda_samples"]),
        )
        for report in series.monotone_report(tau_min, tol=10.0 * dx**2):
            self.add(report)
        for report in series.derivative_identity_report(tau_min, rtol=dx**2 / tau_min):
            self.add(report)
        window = (series.tau >= tau_min) & np.isfinite(series.dF_residual)
        for name in ("dF_residual", "dPsi_residual"):
            residual = getattr(series, name)[window]
            model.measures[name] = float(np.abs(residual).max())

        geom = traj.snapshot(0)
        if geom.grid.n_points <= 512:
            gap = abs(lambda_w(geom)["value"] - lambda_w_dense(geom)["value"])
            self.add(
                CheckReport(
                    "lambda_dense_oracle",
                    gap <= 1e-8,
                    -gap,
                    1e-8,
                    "bottom eigenvalue of -4 Delta + S",
                )
            )
        self._mu_checks(geom)

        mu_df, report = mu_monotonicity_check(
            traj,
            self.settings["mu_tau_end"],
            n_samples=self.settings["mu_samples"],
            tol=10.0 * dx**2,
        )
        self.add(report)

        H_u = model.kernels[("ungauged", y)]
        self._base_whole(H_u)
        whole = strangebehavior_probe(H_u, V_F=config.V_F)
        slope_gap = abs(whole["slope"] - 0.5 * config.p)
        self.add(
            CheckReport(
                "whole_entropy_slope",
                slope_gap <= 0.05,
                -slope_gap,
                0.05,
                "whole-manifold entropy grows like (p/2) ln(1/tau)",
                {"slope": whole["slope"]},
            )
        )
        defect = whole["volume_relation_defect"]
        self.add(
            CheckReport(
                "fiber_volume_relation",
                defect <= 1e-10,
                -defect,
                1e-10,
                "entropy shift by ln V(F)",
            )
        )

        if self.run_dir is not None:
            save_functionals(series, self.run_dir)
            mu_df.to_csv(
                self.run_dir / "mu_monotonicity.csv", index=False, float_format="%.17g"
            )
            model.nu_sweep["series"].to_csv(
                self.run_dir / "nu_sweep.csv", index=False, float_format="%.17g"
            )
            whole["series"].to_csv(
                self.run_dir / "whole_entropy.csv", index=False, float_format="%.17g"
            )

    def _mu_checks(self, geom):
        taus = np.array(sorted(self.settings["nu_taus"]))
        if self.model.nu_sweep is None:
            self.model.nu_sweep = nu_w_sweep(geom, taus, n_jobs=self.model.n_jobs)
        swept = {r.tau: r for r in self.model.nu_sweep["results"]}
        smallest = swept.get(float(taus[0]))
        if smallest is None:
            smallest = mu_w(geom, float(taus[0]))
        self.add(
            CheckReport(
                "mu_euler_lagrange",
                smallest.euler_lagrange_residual <= 1e-6,
                -smallest.euler_lagrange_residual,
                1e-6,
                "Euler-Lagrange equation of the entropy minimizer",
                {"tau": smallest.tau},
            )
        )
        scaled = mu_w(geom.replace(phi=2.0 * geom.phi), 4.0 * float(taus[0]))
        gap = abs(scaled.value - smallest.value)
        self.add(
            CheckReport(
                "mu_scaling",
                gap <= 1e-6,
                -gap,
                1e-6,
                "mu_w(g, tau) = mu_w(4 g, 4 tau)",
            )
        )
        sweep = self.model.nu_sweep["series"]
        sweep = sweep[sweep["tau"].isin(taus)]
        limit = abs(
            Indicator.extrapolate_to_zero(sweep["tau"], sweep["mu_w"], 0.0, np.inf)
        )
        self.add(
            CheckReport(
                "mu_small_tau_limit",
                limit <= 1e-3,
                -limit,
                1e-3,
                "mu_w(g, tau) -> 0 as tau -> 0",
                {"n_samples": len(sweep)},
            )
        )

    def _base_whole(self, H_u):
        table = base_whole_consistency(H_u, tau_min=self.tau_min(H_u))
        defect = float(table["identity_defect"].max())
        scale = max(1.0, float(np.abs(H_u.h).max()) / self.tau_min(H_u))
        tol = 1e-10 * scale
        self.add(
            CheckReport(
                "base_whole_consistency",
                defect <= tol,
                -defect,
                tol,
                "base and whole-manifold conjugate equations agree",
                {
                    "max_base_residual": float(table["base_residual"].max()),
                    "max_whole_residual": float(table["whole_residual"].max()),
                },
            )
        )
        if self.run_dir is not None:
            table.to_csv(
                self.run_dir / "base_whole.csv", index=False, float_format="%.17g"
            )


STAGE_CLASSES = {
    "flow": FlowStage,
    "conjugate": ConjugateStage,
    "harnack": HarnackStage,
    "reduced": ReducedStage,
    "functionals": FunctionalsStage,
}
