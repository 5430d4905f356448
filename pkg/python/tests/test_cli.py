from __future__ import annotations

import csv
import io
import json
import math
import os
import sys
from pathlib import Path

import pytest

from mfc import cli
from mfc.control import optimize
from mfc.measures import DiscreteMeasure
from mfc.scenario import load_scenario
from mfc.wasserstein import wasserstein_p

main = cli.main

LINE_SCENARIO = {
    "name": "line",
    "seed": 5,
    "domain": {"box": [[0.0], [2.0]]},
    "sim": {"dt": 0.05, "T": 1.0},
    "rho0": {"dim": 1, "atoms": [{"x": [0.2], "w": 1.0}]},
    "nu0": {"dim": 1, "atoms": [{"x": [0.6], "w": 1.0}]},
    "kernels": {"H1": {"name": "linear_attraction", "params": {"a": 1.0}}},
    "cost": {
        "terms": [
            {
                "kind": "w1_terminal",
                "params": {"target": {"dim": 1, "atoms": [{"x": [1.0], "w": 1.0}]}},
            },
            {"kind": "control_energy", "weight": 0.01, "params": {"p": 2}},
        ]
    },
    "control": {"shape": [2], "n_intervals": 1, "u_max": 1.0},
    "optimizer": {"max_iterations": 2, "restarts": 0, "initial_step": 0.5},
}


def _write_scenario(tmp_path: Path, document: dict, name: str = "scenario.json") -> str:
    path = tmp_path / name
    path.write_text(json.dumps(document))
    return str(path)


def _csv_rows(text: str) -> list[list[str]]:
    return list(csv.reader(io.StringIO(text)))


def test_validate_passes_on_fixture(
    scenarios_dir: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    path = str(scenarios_dir / "standard_evacuation.json")
    assert main(["validate", "--scenario", path]) == 0
    captured = capsys.readouterr()
    assert "K1: ok" in captured.out
    assert "FAIL" not in captured.out


def test_validate_reports_witness(
    scenarios_dir: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    path = str(scenarios_dir / "inadmissible.json")
    assert main(["validate", "--scenario", path]) == 2
    captured = capsys.readouterr()
    assert "K1: FAIL" in captured.out
    assert "lipschitz ratio" in captured.out
    assert "H1: ok" in captured.out


def test_validate_select(
    scenarios_dir: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    path = str(scenarios_dir / "inadmissible.json")
    assert main(["validate", "--scenario", path, "--select", "kernels.K1.ok"]) == 2
    assert capsys.readouterr().out == "false\n"


def test_missing_scenario_file(
    tmp_path: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    assert main(["validate", "--scenario", str(tmp_path / "nope.json")]) == 2
    assert "scenario file not found" in capsys.readouterr().err


def test_scenario_option_is_required(capsys: pytest.CaptureFixture[str]) -> None:
    assert main(["simulate"]) == 2
    assert "--scenario is required" in capsys.readouterr().err


def test_simulate_is_reproducible(
    scenarios_dir: Path, tmp_path: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    path = str(scenarios_dir / "drift_line.json")
    assert main(["simulate", "--scenario", path, "--out", str(tmp_path / "a")]) == 0
    assert main(["simulate", "--scenario", path, "--out", str(tmp_path / "b")]) == 0
    capsys.readouterr()
    first = (tmp_path / "a" / "rho.csv").read_bytes()
    assert first == (tmp_path / "b" / "rho.csv").read_bytes()
    assert not (tmp_path / "a" / "nu.csv").exists()
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["files"] == {"rho": "rho.csv"}
    assert summary["domain_radius"] is None
    assert summary["within_support_bound"] is True
    assert summary["support_radius"] <= summary["support_bound_R"]


@pytest.mark.parametrize(
    ("argv", "artifacts"),
    [
        pytest.param(
            ["simulate", "--scenario", "{scenarios}/drift_line.json", "--out", "{out}"],
            ["rho.csv", "summary.json"],
            id="simulate-single",
        ),
        pytest.param(
            ["simulate", "--scenario", "{line}", "--out", "{out}"],
            ["rho.csv", "nu.csv", "summary.json"],
            id="simulate-coupled",
        ),
        pytest.param(
            ["optimize", "--scenario", "{line}", "--out", "{out}"],
            ["result.json", "rho.csv", "nu.csv"],
            id="optimize",
        ),
        pytest.param(
            ["validate", "--scenario", "{scenarios}/standard_evacuation.json"],
            [],
            id="validate",
        ),
        pytest.param(
            [
                "wasserstein",
                "{scenarios}/measures/random_a.json",
                "{scenarios}/measures/random_b.json",
                "--out",
                "{out}/plan.json",
            ],
            ["plan.json"],
            id="wasserstein",
        ),
        pytest.param(
            [
                "converge",
                "--scenario",
                "{scenarios}/drift_line.json",
                "--Ns",
                "4,8",
                "--replicates",
                "2",
                "--out",
                "{out}/table.csv",
            ],
            ["table.csv"],
            id="converge",
        ),
    ],
)
def test_reruns_are_byte_identical(
    argv: list[str],
    artifacts: list[str],
    scenarios_dir: Path,
    tmp_path: Path,
    capsys: pytest.CaptureFixture[str],
) -> None:
    line = _write_scenario(tmp_path, LINE_SCENARIO)
    out = tmp_path / "out"
    out.mkdir()
    resolved = [arg.format(scenarios=scenarios_dir, line=line, out=out) for arg in argv]
    runs = []
    for _ in range(2):
        code = main(resolved)
        stdout = capsys.readouterr().out
        files = {name: (out / name).read_bytes() for name in artifacts}
        runs.append((code, stdout, files))
    assert runs[0][0] == 0
    assert runs[0] == runs[1]


def test_simulate_matches_drift_closed_form(
    scenarios_dir: Path, tmp_path: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    path = scenarios_dir / "drift_line.json"
    assert main(["simulate", "--scenario", str(path), "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    scenario = load_scenario(path)
    x0 = scenario.rho0.positions[:, 0]
    center = float(scenario.rho0.weights @ x0)
    # the attraction pulls toward the mean, which rides the unit drift
    expected = center + 1.0 + (x0 - center) * math.exp(-0.5)
    rows = _csv_rows((tmp_path / "rho.csv").read_text())
    assert rows[0] == ["t", "particle_id", "x0", "w"]
    final = [row for row in rows[1:] if float(row[0]) == 1.0]
    assert len(final) == len(x0)
    for row in final:
        assert float(row[2]) == pytest.approx(expected[int(row[1])], abs=1e-6)


def test_simulate_seed_override_changes_draws(
    scenarios_dir: Path, tmp_path: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    path = str(scenarios_dir / "drift_line.json")
    assert main(["simulate", "--scenario", path, "--out", str(tmp_path / "a")]) == 0
    argv = ["simulate", "--scenario", path, "--out", str(tmp_path / "b")]
    assert main([*argv, "--seed-override=4"]) == 0
    capsys.readouterr()
    first = (tmp_path / "a" / "rho.csv").read_bytes()
    assert first != (tmp_path / "b" / "rho.csv").read_bytes()
    summary = json.loads((tmp_path / "b" / "summary.json").read_text())
    assert summary["seed"] == 4


def test_simulate_coupled_writes_both_populations(
    tmp_path: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    path = _write_scenario(tmp_path, LINE_SCENARIO)
    assert main(["simulate", "--scenario", path, "--out", str(tmp_path / "out")]) == 0
    assert capsys.readouterr().out.startswith("support radius ")
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["files"] == {"nu": "nu.csv", "rho": "rho.csv"}
    assert summary["clamp_events"] == {"nu": 0, "rho": 0}
    assert summary["domain_radius"] == 2.0
    nu_rows = _csv_rows((tmp_path / "out" / "nu.csv").read_text())
    assert {row[2] for row in nu_rows[1:]} == {"0.6"}


def test_simulate_coupled_warns_about_an_ignored_drift(
    tmp_path: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    plain = _write_scenario(tmp_path, LINE_SCENARIO, "plain.json")
    assert main(["simulate", "--scenario", plain, "--out", str(tmp_path / "a")]) == 0
    assert "WARNING" not in capsys.readouterr().err

    document = dict(LINE_SCENARIO)
    document["kernels"] = {
        **LINE_SCENARIO["kernels"],
        "f": {"name": "constant_drift", "params": {"c": [1.0]}},
    }
    drifted = _write_scenario(tmp_path, document, "drifted.json")
    assert main(["simulate", "--scenario", drifted, "--out", str(tmp_path / "b")]) == 0
    err = capsys.readouterr().err
    assert "mfc: WARNING: mfc.cli: kernel f (constant_drift) is ignored" in err
    first = (tmp_path / "a" / "rho.csv").read_bytes()
    assert first == (tmp_path / "b" / "rho.csv").read_bytes()
    summaries = [
        json.loads((tmp_path / label / "summary.json").read_text())
        for label in ("a", "b")
    ]
    assert summaries[0] == summaries[1]


def test_optimize_writes_result(
    tmp_path: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    path = _write_scenario(tmp_path, LINE_SCENARIO)
    out = tmp_path / "out"
    assert main(["optimize", "--scenario", path, "--out", str(out)]) == 0
    assert capsys.readouterr().out.startswith("cost ")
    result = json.loads((out / "result.json").read_text())
    assert result["mode"] == "problem2"
    assert result["scenario"] == "line"
    assert result["seed"] == 5
    assert result["cost"] <= result["baseline_cost"]
    assert result["validation"]["ok"] is True
    terms = result["breakdown"]["terms"]
    assert set(terms) == {"w1_terminal", "control_energy"}
    assert sum(t["weight"] * t["value"] for t in terms.values()) == pytest.approx(
        result["cost"], abs=1e-10
    )
    assert (out / "rho.csv").is_file()
    assert (out / "nu.csv").is_file()


def test_optimize_improves_standard_evacuation(
    scenarios_dir: Path, tmp_path: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    path = scenarios_dir / "standard_evacuation.json"
    assert main(["optimize", "--scenario", str(path), "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    result = json.loads((tmp_path / "result.json").read_text())
    assert result["scenario"] == "standard_evacuation"
    assert 0.5 < result["baseline_cost"] < 1.0
    assert result["cost"] <= 0.95 * result["baseline_cost"]
    assert result["improvement"] >= 0.05
    assert result["validation"] == {"ok": True, "violations": []}
    assert [start["seed"] for start in result["starts"]] == [None, 8]
    library = optimize(load_scenario(path))
    assert result["cost"] == library.cost
    assert result["baseline_cost"] == library.baseline_cost


def test_optimize_problem1(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    document = dict(LINE_SCENARIO)
    document["cost"] = {"terms": [LINE_SCENARIO["cost"]["terms"][0]]}
    document["nu"] = {"n_intervals": 2, "M": 1.0, "speed": 1.0}
    path = _write_scenario(tmp_path, document)
    out = tmp_path / "out"
    argv = ["optimize", "--scenario", path, "--out", str(out), "--mode", "problem1"]
    assert main(argv + ["--select", "control.kind"]) == 0
    assert capsys.readouterr().out == '"nu"\n'
    result = json.loads((out / "result.json").read_text())
    assert result["mode"] == "problem1"
    assert result["validation"]["ok"] is True
    header = _csv_rows((out / "nu.csv").read_text())[0]
    assert header == ["t", "particle_id", "x0", "w"]


def test_optimize_problem1_rejects_control_energy(
    tmp_path: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    path = _write_scenario(tmp_path, LINE_SCENARIO)
    argv = ["optimize", "--scenario", path, "--out", str(tmp_path)]
    assert main([*argv, "--mode", "problem1"]) == 2
    assert "needs the u input" in capsys.readouterr().err


def test_optimize_needs_a_cost(scenarios_dir: Path, tmp_path: Path, capsys) -> None:
    path = str(scenarios_dir / "drift_line.json")
    assert main(["optimize", "--scenario", path, "--out", str(tmp_path)]) == 2
    assert "no 'cost'" in capsys.readouterr().err


def test_wasserstein_between_files(
    scenarios_dir: Path, tmp_path: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    a = str(scenarios_dir / "measures" / "two_atoms.json")
    b = str(scenarios_dir / "measures" / "shifted.json")
    assert main(["wasserstein", a, a]) == 0
    assert float(capsys.readouterr().out) == 0.0

    out = tmp_path / "plan.json"
    assert main(["wasserstein", a, b, "--out", str(out)]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(0.5, abs=1e-12)
    document = json.loads(out.read_text())
    assert document["p"] == 1.0
    assert document["distance"] == pytest.approx(0.5, abs=1e-12)
    assert sum(entry[2] for entry in document["plan"]["entries"]) == pytest.approx(1.0)

    assert main(["wasserstein", a, b, "--p=2"]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(0.5, abs=1e-12)


def test_wasserstein_matches_frozen_distance(
    scenarios_dir: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    a = scenarios_dir / "measures" / "random_a.json"
    b = scenarios_dir / "measures" / "random_b.json"
    assert main(["wasserstein", str(a), str(b)]) == 0
    # every atom lies on one line, so W1 is the integral of |F_a - F_b| along it
    assert float(capsys.readouterr().out) == pytest.approx(0.2815, abs=1e-8)
    mu = DiscreteMeasure.from_json(json.loads(a.read_text()))
    nu = DiscreteMeasure.from_json(json.loads(b.read_text()))
    assert wasserstein_p(mu, nu, 1.0)[0] == pytest.approx(0.2815, abs=1e-8)


@pytest.mark.parametrize(
    ("extra", "message"),
    [
        pytest.param([], "exactly two", id="no-files"),
        pytest.param(["missing.json"], "exactly two", id="one-file"),
        pytest.param(["--p", "abc"], "--p must be a number", id="bad-p"),
    ],
)
def test_wasserstein_argument_errors(
    scenarios_dir: Path, extra: list[str], message: str, capsys
) -> None:
    a = str(scenarios_dir / "measures" / "two_atoms.json")
    files = [a, a] if extra and extra[0] == "--p" else []
    assert main(["wasserstein", *files, *extra]) == 2
    assert message in capsys.readouterr().err


def test_wasserstein_missing_file(scenarios_dir: Path, tmp_path: Path, capsys) -> None:
    a = str(scenarios_dir / "measures" / "two_atoms.json")
    assert main(["wasserstein", a, str(tmp_path / "gone.json")]) == 2
    assert "measure file not found" in capsys.readouterr().err


def test_converge_prints_csv(
    scenarios_dir: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    path = str(scenarios_dir / "drift_line.json")
    argv = ["converge", "--scenario", path, "--Ns", "4,8", "--replicates", "3"]
    assert main(argv) == 0
    rows = _csv_rows(capsys.readouterr().out)
    assert rows[0] == ["N", "replicate", "sup_t_W1"]
    expected = [(n, r) for n in ("4", "8") for r in ("0", "1", "2")]
    assert [(r[0], r[1]) for r in rows[1:]] == expected
    assert all(float(r[2]) > 0 for r in rows[1:4])
    assert all(float(r[2]) == 0.0 for r in rows[4:])


def test_converge_writes_file(
    tmp_path: Path, capsys: pytest.CaptureFixture[str], monkeypatch: pytest.MonkeyPatch
) -> None:
    monkeypatch.setenv("MFC_THREADS", "2")
    fixed = {
        "seed": 1,
        "domain": {"free": True, "dim": 1},
        "sim": {"dt": 0.1, "T": 0.5},
        "rho0": {"dim": 1, "atoms": [{"x": [0.0], "w": 0.5}, {"x": [1.0], "w": 0.5}]},
        "kernels": {"K1": {"name": "linear_attraction", "params": {"a": 1.0}}},
    }
    path = _write_scenario(tmp_path, fixed)
    out = tmp_path / "table.csv"
    argv = ["converge", "--scenario", path, "--Ns", "2,4", "--replicates", "2"]
    assert main([*argv, "--out", str(out)]) == 0
    assert "N=2: median sup_t W1 0.0" in capsys.readouterr().out
    rows = _csv_rows(out.read_text())
    assert rows[0] == ["N", "replicate", "sup_t_W1"]
    assert len(rows) == 5
    assert all(float(r[2]) == 0.0 for r in rows[1:])


@pytest.mark.parametrize(
    ("argv", "message"),
    [
        pytest.param(
            ["converge", "--Ns"], "option --Ns requires an argument", id="missing-value"
        ),
        pytest.param(
            ["validate", "--bogus"], "unknown option: --bogus", id="unknown-option"
        ),
        pytest.param(["teleport"], "unknown command 'teleport'", id="unknown-command"),
        pytest.param([], "no command given", id="no-command"),
    ],
)
def test_usage_errors(argv: list[str], message: str, capsys) -> None:
    assert main(argv) == 2
    captured = capsys.readouterr()
    assert captured.err.startswith("usage: mfc")
    assert message in captured.err


def test_bad_integer_options(scenarios_dir: Path, capsys) -> None:
    path = str(scenarios_dir / "drift_line.json")
    assert main(["converge", "--scenario", path, "--Ns", "4,x"]) == 2
    assert "--Ns must be comma-separated integers" in capsys.readouterr().err
    assert main(["validate", "--scenario", path, "--seed-override", "seven"]) == 2
    assert "--seed-override must be an integer" in capsys.readouterr().err


def test_bad_select_expression(scenarios_dir: Path, capsys) -> None:
    path = str(scenarios_dir / "drift_line.json")
    assert main(["validate", "--scenario", path, "--select", "kernels.["]) == 2
    assert "invalid JMESPath expression" in capsys.readouterr().err


def test_help_flag_prints_usage(capsys: pytest.CaptureFixture[str]) -> None:
    assert main(["--help"]) == 0
    captured = capsys.readouterr()
    assert captured.out.startswith("usage: mfc")
    for command in ("simulate", "optimize", "validate", "wasserstein", "converge"):
        assert command in captured.out
    assert "MFC_THREADS" in captured.out


def test_version_prints_python_runtime(capsys: pytest.CaptureFixture[str]) -> None:
    assert main(["--version"]) == 0
    lines = [line for line in capsys.readouterr().out.splitlines() if line.strip()]
    assert lines[0].startswith("mfc v")
    version = ".".join(str(part) for part in sys.version_info[:3])
    assert lines[1].startswith("Python ")
    assert version in lines[1]
    if sys.executable:
        assert os.path.abspath(sys.executable) in lines[1]


def test_verbose_logging_goes_to_stderr(
    scenarios_dir: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    path = str(scenarios_dir / "drift_line.json")
    assert main(["-vv", "validate", "--scenario", path]) == 0
    captured = capsys.readouterr()
    assert "mfc: DEBUG: mfc.scenario: loaded scenario drift_line" in captured.err
    assert "DEBUG" not in captured.out
