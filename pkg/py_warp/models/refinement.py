# Refinement studies: reruns of one scenario on successively finer grids.
# Last modified on Oct 18, 2026
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from joblib.externals.loky import set_loky_pickler

from ..components.harnack import check_nonpositivity
from ..utility.errors import ConfigurationError, StageError
from ..utility.util import CheckReport, Indicator
from .lab_model import LaboratoryModel
from .scenario import SCHEMA_VERSION

set_loky_pickler("dill")

logger = logging.getLogger(__name__)

# Measures whose observed order decides the study, with what they certify.
ORDER_MEASURES = {
    "identity_residual": "evolution identity of the Harnack quantity",
    "duality_defect": "int H Phi dmu is constant in t",
    "h_ell_violation": "h <= ell_w",
    "gauge_deviation": "pullback equivalence of the gauged and ungauged flows",
    "theta_kernel_error": "static flat kernel equals the image-sum kernel",
    "dF_residual": "evolution formula of F_w",
    "dPsi_residual": "evolution formula of Psi_w",
}


@dataclass
class LevelOutcome:
    """Result of one refinement level.

    ``harnack_reports`` keep only the per-time series (v and q are dropped)
    so that outcomes stay small when they travel back from the workers.
    """

    level: int
    spacing: float
    measures: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)
    harnack_reports: dict = field(default_factory=dict)
    error: str | None = None
    failed_stage: str | None = None


@dataclass
class StudyResult:
    """Outcome of a refinement study.

    Attributes
    ----------
    levels : list of LevelOutcome
        Completed levels in refinement order (partial when aborted).
    indicators : DataFrame
        Errors per level, fitted order and constant spread per measure.
    reports : list of CheckReport
        One verdict per fitted measure plus the Harnack nonpositivity
        verdict.
    aborted : bool
        True when a level failed; later levels are discarded.
    """

    levels: list
    indicators: pd.DataFrame
    reports: list
    aborted: bool = False

    @property
    def spacings(self) -> np.ndarray:
        return np.array([lv.spacing for lv in self.levels])

    @property
    def passed(self) -> bool:
        return not self.aborted and all(r.passed for r in self.reports)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "levels": [
                {
                    "level": lv.level,
                    "spacing": lv.spacing,
                    "measures": lv.measures,
                    "error": lv.error,
                    "failed_stage": lv.failed_stage,
                }
                for lv in self.levels
            ],
            "checks": [r.to_dict() for r in self.reports],
            "aborted": self.aborted,
            "all_passed": self.passed,
        }


def _run_level(config, level, out_dir):
    level_config = config.with_level(level)
    run_dir = None if out_dir is None else Path(out_dir) / f"level_{level}"
    model = LaboratoryModel(level_config, run_dir=run_dir, show_initialization=False)
    outcome = LevelOutcome(level=level, spacing=level_config.spacing)
    try:
        model.run()
    except StageError as e:
        logger.error("Level %d failed: %s", level, e)
        outcome.error = str(e)
        outcome.failed_stage = e.stage
        return outcome
    outcome.measures = dict(model.measures)
    outcome.checks = [
        {**report.to_dict(), "stage": stage} for stage, report in model.checks
    ]
    outcome.harnack_reports = {
        y: replace(report, v=None, q=None)
        for y, report in model.harnack_reports.items()
    }
    return outcome


def refinement_study(
    config, levels=(0, 1, 2), out_dir=None, n_jobs=1, verbose=0, min_order=1.8
):
    """Rerun a scenario on refined grids and fit observed orders.

    Level k has 2^k times the grid points of ``config`` (the CFL step and the
    DP slicing refine with it). Orders are fitted for the measures in
    ORDER_MEASURES the scenario produces, and v <= 0 is judged with
    :func:`check_nonpositivity` over all levels.

    Parameters
    ----------
    config : ScenarioConfig
        The base scenario.
    levels : sequence of int, optional
        Refinement levels, at least two, by default (0, 1, 2).
    out_dir : str or Path, optional
        When given, level k writes into out_dir/level_k and the study
        writes study.csv and study_verdict.json.
    n_jobs : int, optional
        Levels run in parallel with joblib, by default 1.
    verbose : int, optional
        joblib verbosity, by default 0.
    min_order : float, optional
        Required order, by default 1.8.

    Returns
    -------
    StudyResult
    """
    levels = sorted(set(int(k) for k in levels))
    if len(levels) < 2:
        raise ConfigurationError("A refinement study needs at least two levels.")
    logger.info("Refinement study of %s over levels %s.", config.name, levels)
    outcomes = Parallel(n_jobs=n_jobs, verbose=verbose)(
        delayed(_run_level)(config, k, out_dir) for k in levels
    )

    completed = []
    for outcome in outcomes:
        if outcome.error is not None:
            break
        completed.append(outcome)
    aborted = len(completed) < len(outcomes)
    if aborted:
        failed = outcomes[len(completed)]
        logger.error(
            "Study aborted at level %d (stage %s); %d levels completed.",
            failed.level,
            failed.failed_stage,
            len(completed),
        )
        completed.append(failed)
        result = StudyResult(completed, pd.DataFrame(), [], aborted=True)
        _write_study(result, out_dir)
        return result

    spacings = np.array([lv.spacing for lv in completed])
    errors = {
        name: [lv.measures[name] for lv in completed]
        for name in ORDER_MEASURES
        if all(name in lv.measures for lv in completed)
    }
    indicators = Indicator.cal_indicator_df(spacings, errors)
    reports = []
    for name, errs in errors.items():
        order = float(indicators.loc[name, "order"])
        reports.append(
            CheckReport(
                f"order_{name}",
                order >= min_order,
                order - min_order,
                0.0,
                ORDER_MEASURES[name],
                {"order": order, "errors": errs, "spacings": spacings},
            )
        )
    # Centers scale with the level; the first center is the same point.
    if all(lv.harnack_reports for lv in completed):
        first = [next(iter(lv.harnack_reports.values())) for lv in completed]
        reports.append(check_nonpositivity(first, min_order=min_order))
    result = StudyResult(completed, indicators, reports)
    for report in reports:
        logger.info("%s: %s.", report.name, report.verdict)
    _write_study(result, out_dir)
    return result


def _write_study(result, out_dir):
    if out_dir is None:
        return
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not result.indicators.empty:
        result.indicators.to_csv(out_dir / "study.csv", float_format="%.17g")
    with open(out_dir / "study_verdict.json", "w") as f:
        json.dump(result.to_dict(), f, indent=2, default=float)
