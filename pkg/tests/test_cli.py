import json

from py_warp.cli import EXIT_ERROR, EXIT_FAIL, EXIT_PASS, main


def _verdict(all_passed):
    return {
        "schema_version": 1,
        "scenario": "handmade",
        "checks": [
            {
                "name": "duality_one",
                "stage": "conjugate",
                "verdict": "PASS" if all_passed else "FAIL",
                "worst_margin": -1e-12,
                "tolerance": 1e-5,
            }
        ],
        "all_passed": all_passed,
    }


def test_report_without_verdicts(tmp_path):
    assert main(["report", str(tmp_path)]) == EXIT_ERROR


def test_report_reads_verdicts(tmp_path, capsys):
    path = tmp_path / "verdict.json"
    path.write_text(json.dumps(_verdict(True)))
    assert main(["report", str(tmp_path)]) == EXIT_PASS
    assert "duality_one" in capsys.readouterr().out
    path.write_text(json.dumps(_verdict(False)))
    assert main(["report", str(path)]) == EXIT_FAIL


def test_flow_command(tmp_path):
    config = tmp_path / "tiny.json"
    config.write_text(
        json.dumps(
            {
                "name": "tiny-flat",
                "grid": {"n_points": 32},
                "integrator": {"t_end": 0.2},
            }
        )
    )
    out = tmp_path / "out"
    assert main(["flow", "--config", str(config), "--out", str(out)]) == EXIT_PASS
    with open(out / "verdict.json") as f:
        assert json.load(f)["stages"] == ["flow"]


def test_bad_config_is_an_error(tmp_path):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"name": "bad", "colour": "red"}))
    assert main(["flow", "--config", str(config)]) == EXIT_ERROR
