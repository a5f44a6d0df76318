# Laboratory model running the check pipeline of one scenario.
# Last modified on Oct 18, 2026
import json
import logging
from pathlib import Path

import mesa
import pandas as pd

from ..utility.util import (
    BaseSchedulerByTypeFiltered,
    TimeRecorder,
    dict_to_string,
    get_agt_attr,
)
from .scenario import SCHEMA_VERSION, STAGES
from .stages import STAGE_CLASSES

logger = logging.getLogger(__name__)

# Products each stage reads from earlier stages.
REQUIRES = {
    "flow": (),
    "conjugate": ("flow",),
    "harnack": ("flow", "conjugate"),
    "reduced": ("flow", "conjugate"),
    "functionals": ("flow", "conjugate"),
}


def resolve_stages(checks):
    """Requested stages plus their prerequisites, in pipeline order."""
    needed = set()
    for name in checks:
        needed.add(name)
        needed.update(REQUIRES[name])
    return tuple(s for s in STAGES if s in needed)


class LaboratoryModel(mesa.Model):
    """
    A Mesa model stepping the pipeline stages of one scenario.

    Each model step runs one stage agent (flow, conjugate, harnack, reduced,
    functionals, in that order). Stages exchange their products through the
    model attributes below and report their checks as CheckReport records;
    the model collects the per-stage counts with a mesa DataCollector and
    writes verdict.json after the last stage.

    Parameters
    ----------
    config : ScenarioConfig
        The scenario.
    run_dir : str or Path, optional
        Output directory; nothing is written when None.
    n_jobs : int, optional
        joblib workers for the reduced distance centers and the mu sweep,
        by default 1.
    show_progress : bool, optional
        Show the tqdm bar of the flow, by default False.
    show_initialization : bool, optional
        Print the model summary, by default True.

    Attributes
    ----------
    schedule : BaseSchedulerByTypeFiltered
        The scheduler used to activate the stages.
    datacollector : mesa.DataCollector
        Collects n_checks, n_passed and elapsed of every stage.
    traj : FlowTrajectory
        Run of the configured system; ``trajs`` holds both systems.
    kernels : dict
        {(system_tag, y_index): ConjugateHeatSolution}.
    heat_solutions : dict
        Forward solutions used for the duality checks.
    harnack_reports, reduced_fields : dict
        Per-center products keyed by y_index.
    constants : EstimateConstants
        Measured constants of the kernel estimates.
    nu_sweep : dict
        mu_w sweep of the initial slice.
    measures : dict
        Scalar error measures the refinement study fits orders to.
    """

    def __init__(
        self,
        config,
        run_dir=None,
        n_jobs=1,
        show_progress=False,
        show_initialization=True,
    ):
        super().__init__()
        self.running = True  # MESA required attributes
        self.time_recorder = TimeRecorder()

        self.config = config
        self.run_dir = None if run_dir is None else Path(run_dir)
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
        self.n_jobs = n_jobs
        self.show_progress = show_progress
        self.stage_names = resolve_stages(config.checks)
        self.t = 0

        # Products shared between stages
        self.traj = None
        self.trajs = {}
        self.kernels = {}
        self.heat_solutions = {}
        self.harnack_reports = {}
        self.reduced_fields = {}
        self.constants = None
        self.nu_sweep = None
        self.measures = {}

        self.schedule = BaseSchedulerByTypeFiltered(self)
        stages = {}
        for name in self.stage_names:
            agt_stage = STAGE_CLASSES[name](
                unique_id=name, model=self, settings=config.tau_schedule
            )
            stages[name] = agt_stage
            self.schedule.add(agt_stage)
        self.stages = stages

        agent_reporters = {
            "agt_type": get_agt_attr("agt_type"),
            "stage": get_agt_attr("stage"),
            "n_checks": get_agt_attr("n_checks"),
            "n_passed": get_agt_attr("n_passed"),
            "elapsed": get_agt_attr("elapsed"),
        }
        model_reporters = {"all_passed": lambda m: m.all_passed}
        self.datacollector = mesa.DataCollector(
            model_reporters=model_reporters,
            agent_reporters=agent_reporters,
        )

        msg = f"""\n
        Scenario:\t{config.name}
        Grid points:\t{config.n_points}
        Fiber dimension:\t{config.p}
        System:\t{config.system_tag}
        Center time T:\t{config.T}
        Centers:\t{list(config.centers)}
        Stages:\t{", ".join(self.stage_names)}
        Tau schedule:
{dict_to_string(config.tau_schedule, prefix="        ", level=1)}
        Initialization duration:\t{self.time_recorder.get_elapsed_time()}
        """
        if show_initialization:
            print(msg)

    @property
    def current_stage(self):
        return self.stage_names[self.t] if self.t < len(self.stage_names) else None

    @property
    def checks(self) -> list:
        """(stage name, CheckReport) of every stage run so far."""
        return [(name, r) for name, agt in self.stages.items() for r in agt.reports]

    @property
    def all_passed(self) -> bool:
        return all(r.passed for _, r in self.checks)

    def step(self):
        """Run the next stage, collect its counts and finish after the last one."""
        name = self.current_stage
        if name is None:
            self.running = False
            return
        self.schedule.step(agt_type=STAGE_CLASSES[name].__name__)
        self.datacollector.collect(self)
        self.t += 1
        if self.t == len(self.stage_names):
            self.running = False
            if self.run_dir is not None:
                self.write_verdict()
            logger.info(
                "Scenario %s finished in %s: %s.",
                self.config.name,
                self.time_recorder.get_elapsed_time(),
                "PASS" if self.all_passed else "FAIL",
            )

    def run(self):
        while self.running:
            self.step()
        return self.verdict()

    def verdict(self) -> dict:
        """Contents of verdict.json."""
        checks = []
        for stage, report in self.checks:
            entry = report.to_dict()
            entry["stage"] = stage
            checks.append(entry)
        return {
            "schema_version": SCHEMA_VERSION,
            "scenario": self.config.name,
            "config": self.config.to_dict(),
            "stages": list(self.stage_names),
            "checks": checks,
            "all_passed": self.all_passed,
        }

    def write_verdict(self):
        path = self.run_dir / "verdict.json"
        with open(path, "w") as f:
            json.dump(self.verdict(), f, indent=2, default=float)
        return path

    @staticmethod
    def get_dfs(model):
        """
        Collect the stage table and the check table of a model.

        Parameters
        ----------
        model : LaboratoryModel
            A model that has run.

        Returns
        -------
        tuple of DataFrame
            (df_stages, df_checks). df_stages has one row per stage with
            n_checks, n_passed and elapsed; df_checks one row per check.
        """
        df = model.datacollector.get_agent_vars_dataframe().reset_index()
        # Each stage reports once, in the model step where it ran.
        df_stages = (
            df[df["n_checks"] > 0]
            .sort_values("Step")
            .drop_duplicates("AgentID", keep="last")
            .set_index("stage")[["agt_type", "n_checks", "n_passed", "elapsed"]]
        )
        rows = []
        for stage, report in model.checks:
            rows.append(
                {
                    "stage": stage,
                    "name": report.name,
                    "verdict": report.verdict,
                    "worst_margin": report.worst_margin,
                    "tolerance": report.tolerance,
                    "anchor": report.anchor,
                }
            )
        df_checks = pd.DataFrame(rows)
        return df_stages, df_checks


def run_scenario(config, out_dir, n_jobs=1, show_progress=False):
    """Run every requested stage of a scenario and write its run directory.

    Parameters
    ----------
    config : ScenarioConfig
        The scenario.
    out_dir : str or Path
        Run directory; receives manifest.json, snapshots.csv, the per-check
        CSV files and verdict.json.
    n_jobs : int, optional
        joblib workers, by default 1.
    show_progress : bool, optional
        Show the flow progress bar, by default False.

    Returns
    -------
    Path
        The run directory.

    Raises
    ------
    StageError
        When a stage fails; ``stage`` names it.
    """
    model = LaboratoryModel(
        config,
        run_dir=out_dir,
        n_jobs=n_jobs,
        show_progress=show_progress,
        show_initialization=False,
    )
    model.run()
    return model.run_dir
