import json

import pandas as pd
import pytest

from py_warp.models.lab_model import LaboratoryModel, resolve_stages, run_scenario
from py_warp.models.scenario import ScenarioConfig
from py_warp.utility.errors import StageError


@pytest.fixture
def tiny_flat():
    return ScenarioConfig.from_dict(
        {
            "name": "tiny-flat",
            "grid": {"n_points": 32},
            "integrator": {"t_end": 0.3},
            "checks": ["conjugate"],
        }
    )


def test_resolve_stages():
    assert resolve_stages(("harnack",)) == ("flow", "conjugate", "harnack")
    assert resolve_stages(("functionals", "flow")) == (
        "flow",
        "conjugate",
        "functionals",
    )
    assert resolve_stages(("flow",)) == ("flow",)


def test_model_runs_requested_stages(tiny_flat, tmp_path):
    model = LaboratoryModel(tiny_flat, run_dir=tmp_path, show_initialization=False)
    assert model.current_stage == "flow"
    verdict = model.run()
    assert not model.running
    assert model.current_stage is None
    assert verdict["stages"] == ["flow", "conjugate"]
    assert verdict["all_passed"] == model.all_passed
    assert {"duality_one", "duality_cosine", "duality_warping"} <= {
        c["name"] for c in verdict["checks"]
    }
    assert all(
        c["verdict"] == "PASS"
        for c in verdict["checks"]
        if c["name"].startswith("duality")
    )
    assert "theta_kernel_error" in model.measures
    for name in ("verdict.json", "manifest.json", "snapshots.csv", "monitors.csv"):
        assert (tmp_path / name).exists()
    with open(tmp_path / "verdict.json") as f:
        assert json.load(f)["scenario"] == "tiny-flat"


def test_get_dfs(tiny_flat):
    model = LaboratoryModel(tiny_flat, show_initialization=False)
    model.run()
    df_stages, df_checks = LaboratoryModel.get_dfs(model)
    assert set(df_stages.index) == {"flow", "conjugate"}
    assert df_stages["n_checks"].sum() == len(df_checks)
    assert isinstance(df_checks, pd.DataFrame)
    assert set(df_checks["stage"]) == {"flow", "conjugate"}


def test_stage_failure_names_the_stage(tiny_flat):
    config = ScenarioConfig.from_dict(
        {**tiny_flat.to_dict(), "integrator": {"t_end": 0.1}, "T": 0.1}
    )
    model = LaboratoryModel(config, show_initialization=False)
    with pytest.raises(StageError) as excinfo:
        model.run()
    assert excinfo.value.stage == "conjugate"
    assert model.stages["flow"].n_checks > 0


def test_run_scenario_returns_run_dir(tiny_flat, tmp_path):
    run_dir = run_scenario(tiny_flat, tmp_path / "run")
    assert run_dir == tmp_path / "run"
    assert (run_dir / "verdict.json").exists()


def test_full_pipeline_on_flat_circle():
    config = ScenarioConfig.from_dict(
        {
            "name": "small-flat",
            "grid": {"n_points": 64},
            "integrator": {"t_end": 0.5},
            "tau_schedule": {"n_slices": 16},
        }
    )
    model = LaboratoryModel(config, show_initialization=False)
    verdict = model.run()
    assert verdict["stages"] == [
        "flow",
        "conjugate",
        "harnack",
        "reduced",
        "functionals",
    ]
    outcome = {c["name"]: c["verdict"] for c in verdict["checks"]}
    for name in (
        "theta_kernel_oracle",
        "kernel_upper_bound",
        "integrated_gradient_bound",
        "flat_reduced_distance",
        "lambda_dense_oracle",
        "mu_euler_lagrange",
        "mu_scaling",
    ):
        assert outcome[name] == "PASS", name
    assert {"conjugate_identity", "lw_upper_bound", "mu_small_tau_limit"} <= set(
        outcome
    )
    identity = next(c for c in verdict["checks"] if c["name"] == "conjugate_identity")
    spacing = config.spacing
    assert identity["tolerance"] == pytest.approx(2.0 * spacing**2 / 0.05**2)
    assert model.constants.C3 >= 2**0.5
    assert {"dF_residual", "dPsi_residual"} <= set(model.measures)
