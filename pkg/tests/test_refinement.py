import json

import pytest

from py_warp.models.refinement import refinement_study
from py_warp.models.scenario import ScenarioConfig
from py_warp.utility.errors import ConfigurationError


def _flat(t_end):
    return ScenarioConfig.from_dict(
        {
            "name": "study-flat",
            "grid": {"n_points": 32},
            "integrator": {"t_end": t_end},
            "checks": ["conjugate"],
        }
    )


def test_study_needs_two_levels():
    with pytest.raises(ConfigurationError):
        refinement_study(_flat(0.3), levels=(1, 1))


@pytest.mark.slow
def test_flat_study(tmp_path):
    result = refinement_study(_flat(0.3), levels=(0, 1), out_dir=tmp_path)
    assert not result.aborted
    assert result.spacings[0] == pytest.approx(2 * result.spacings[1])
    reports = {r.name: r for r in result.reports}
    assert reports["order_duality_defect"].passed
    assert "duality_defect" in result.indicators.index
    with open(tmp_path / "study_verdict.json") as f:
        verdict = json.load(f)
    assert len(verdict["levels"]) == 2
    assert (tmp_path / "level_1" / "verdict.json").exists()


def test_aborted_study(tmp_path):
    result = refinement_study(_flat(0.1), levels=(0, 1), out_dir=tmp_path)
    assert result.aborted
    assert not result.passed
    assert result.levels[-1].failed_stage == "conjugate"
    assert result.indicators.empty
    assert (tmp_path / "study_verdict.json").exists()
