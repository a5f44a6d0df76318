import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from py_warp.models.scenario import (
    DEFAULT_TAU_SCHEDULE,
    PRESETS,
    STAGES,
    ScenarioConfig,
    evaluate_expression,
)
from py_warp.utility.errors import ConfigurationError


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_build(name):
    config = ScenarioConfig.from_preset(name)
    assert config.name == name
    assert config.T == config.integrator.t_end == 0.5
    assert config.checks == STAGES


def test_defaults():
    config = ScenarioConfig(name="plain")
    assert config.T == config.integrator.t_end
    assert config.tau_schedule == DEFAULT_TAU_SCHEDULE
    assert config.output["snapshot_stride"] == 100


def test_schedule_is_merged_with_defaults():
    config = ScenarioConfig(name="s", tau_schedule={"n_slices": 8})
    assert config.tau_schedule["n_slices"] == 8
    assert config.tau_schedule["mu_samples"] == DEFAULT_TAU_SCHEDULE["mu_samples"]


def test_preset_override_merges_grid():
    config = ScenarioConfig.from_preset("coupled-p2", grid={"n_points": 64})
    assert config.n_points == 64
    assert config.coordinate_length == pytest.approx(2 * np.pi)
    assert config.p == 2
    with pytest.raises(ConfigurationError):
        ScenarioConfig.from_preset("hyperbolic")


@pytest.mark.parametrize(
    "settings",
    [
        {"name": "x", "colour": "red"},
        {"name": "x", "grid": {"n_points": 64, "width": 2}},
        {"name": "x", "u_expr": {"name": "gaussian"}},
        {"name": "x", "u_expr": {"name": "sine", "omega": 2}},
        {"name": "x", "centers": [300]},
        {"name": "x", "centers": []},
        {"name": "x", "T": 0.8},
        {"name": "x", "system_tag": "harmonic"},
        {"name": "x", "p": 0},
        {"name": "x", "V_F": 0.0},
        {"name": "x", "checks": ["flow", "plots"]},
        {"name": "x", "tau_schedule": {"n_slice": 4}},
        {"name": "x", "schema_version": 2},
        {"grid": {"n_points": 64}},
    ],
)
def test_invalid_settings(settings):
    with pytest.raises(ConfigurationError):
        ScenarioConfig.from_dict(settings)


def test_evaluate_expression():
    x = np.linspace(0, 2 * np.pi, 9)
    assert_allclose(
        evaluate_expression({"name": "sine", "a": 0.3}, x), 0.3 * np.sin(x)
    )
    assert_allclose(evaluate_expression({"name": "constant"}, x), 1.0)
    assert_allclose(
        evaluate_expression({"name": "cosine_bump", "eps": 0.2, "m": 2}, x),
        1.0 + 0.2 * np.cos(2 * x),
    )


def test_dict_round_trip():
    config = ScenarioConfig.from_preset("coupled-p1", grid={"n_points": 64})
    restored = ScenarioConfig.from_dict(json.loads(json.dumps(config.to_dict())))
    assert restored == config


def test_refinement_level():
    config = ScenarioConfig.from_preset(
        "coupled-p1", grid={"n_points": 64}, centers=[0, 16]
    )
    finer = config.with_level(1)
    assert finer.n_points == 128
    assert finer.centers == (0, 32)
    assert finer.tau_schedule["n_slices"] == 2 * config.tau_schedule["n_slices"]
    assert finer.output["kernel_stride"] == 4 * config.output["kernel_stride"]
    assert config.with_level(0) == config
    with pytest.raises(ConfigurationError):
        config.with_level(-1)


def test_invalid_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ConfigurationError):
        ScenarioConfig.from_json(path)


def test_static_flat_detection():
    assert ScenarioConfig.from_preset("flat-static").is_static_flat()
    assert not ScenarioConfig.from_preset("coupled-p1").is_static_flat()


def test_checks_follow_pipeline_order():
    config = ScenarioConfig(name="o", checks=("functionals", "flow", "conjugate"))
    assert config.checks == ("flow", "conjugate", "functionals")


def test_initial_geometry_is_ungauged():
    config = ScenarioConfig.from_preset("coupled-p1", grid={"n_points": 32})
    geom = config.initial_geometry()
    assert not geom.gauged
    assert_allclose(geom.u, 0.3 * np.sin(config.grid.x))
