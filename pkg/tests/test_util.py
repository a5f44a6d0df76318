import json
from types import SimpleNamespace

import numpy as np
import pytest

from py_warp.utility.errors import ConfigurationError
from py_warp.utility.util import (
    CheckReport,
    Indicator,
    dict_to_string,
    get_agt_attr,
    random_generator,
)


def test_second_order_is_recovered():
    spacings = np.array([0.1, 0.05, 0.025])
    errors = 3.0 * spacings**2
    assert Indicator.get_order(spacings, errors) == pytest.approx(2.0)
    assert np.allclose(Indicator.get_constants(spacings, errors), 3.0)


def test_roundoff_errors_have_infinite_order():
    spacings = np.array([0.1, 0.05])
    assert Indicator.get_order(spacings, [1e-14, 1e-15]) == np.inf


def test_remove_na():
    spacings, errors = Indicator.remove_na([0.1, 0.05, 0.025], [1.0, np.nan, 0.25])
    assert list(spacings) == [0.1, 0.025]
    assert list(errors) == [1.0, 0.25]


def test_indicator_table():
    spacings = np.array([0.2, 0.1])
    df = Indicator.cal_indicator_df(
        spacings, {"quadratic": spacings**2, "flat": [0.0, 0.0]}
    )
    assert df.loc["quadratic", "order"] == pytest.approx(2.0)
    assert df.loc["flat", "order"] == np.inf
    assert df.loc["quadratic", "constant_spread"] == pytest.approx(1.0)
    assert list(df.columns[:2]) == ["level_0", "level_1"]


def test_extrapolate_to_zero():
    xs = np.linspace(0.1, 1.0, 10)
    assert Indicator.extrapolate_to_zero(xs, 0.5 + xs - xs**2, 0.0, 1.0) == (
        pytest.approx(0.5)
    )
    with pytest.raises(ConfigurationError):
        Indicator.extrapolate_to_zero(xs, xs, 0.0, 0.25)


def test_relative_error():
    assert Indicator.get_rel_err([1.0, -4.0], [1.5, -4.0]) == pytest.approx(0.125)


def test_check_report_serializes():
    report = CheckReport(
        "duality", np.bool_(True), np.float64(-1e-12), 1e-5, details={"x": np.ones(2)}
    )
    out = json.loads(json.dumps(report.to_dict()))
    assert out["verdict"] == "PASS"
    assert out["details"]["x"] == [1.0, 1.0]


def test_nested_attribute_reporter():
    agent = SimpleNamespace(report=SimpleNamespace(passed=True), other=None)
    assert get_agt_attr("report.passed")(agent) is True
    assert get_agt_attr("other.passed")(agent) is None
    assert get_agt_attr("missing")(agent) is None


def test_dict_to_string():
    text = dict_to_string({"n_slices": 64, "mu_samples": 4}, level=1)
    assert text.splitlines() == ["  n_slices:\t64", "  mu_samples:\t4"]


def test_random_generator_is_reproducible():
    a = random_generator(5).standard_normal(3)
    b = random_generator(5).standard_normal(3)
    assert np.array_equal(a, b)
