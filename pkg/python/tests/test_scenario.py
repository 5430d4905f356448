from __future__ import annotations

import json

import numpy as np
import pytest

from mfc.measures import total_mass
from mfc.scenario import (
    KERNEL_KEYS,
    ScenarioError,
    load_scenario,
    load_scenario_dict,
    standard_evacuation,
    standard_evacuation_dict,
    validate_kernels,
)

UNIT = [[0, 0], [1, 1]]


def _minimal(**overrides) -> dict:
    document = {
        "seed": 2,
        "domain": {"box": [[0.0, 0.0], [1.0, 1.0]]},
        "sim": {"dt": 0.1, "T": 1.0},
        "rho0": {"generator": "uniform", "lo": [0.0, 0.0], "hi": [1.0, 1.0], "n": 16},
    }
    document.update(overrides)
    return document


def test_fixture_files_load(scenarios_dir) -> None:
    drift = load_scenario(scenarios_dir / "drift_line.json")
    assert drift.name == "drift_line"
    assert drift.dim == 1
    assert drift.domain.is_free
    assert drift.stride == 2
    assert len(drift.rho0) == 64
    assert set(drift.kernels) == set(KERNEL_KEYS)
    assert drift.nu0 is None

    evacuation = load_scenario(scenarios_dir / "standard_evacuation.json")
    assert len(evacuation.rho0) == 64
    assert len(evacuation.nu0) == 4
    assert evacuation.optimizer.seed == 7


def test_standard_fixture_matches_the_file(scenarios_dir) -> None:
    on_disk = json.loads((scenarios_dir / "standard_evacuation.json").read_text())
    assert on_disk == standard_evacuation_dict()
    scenario = standard_evacuation()
    assert all(report.ok for report in validate_kernels(scenario).values())


def test_grid_generator_fills_the_region() -> None:
    rho0 = standard_evacuation().rho0
    assert len(rho0) == 64
    assert total_mass(rho0.measure) == pytest.approx(1.0)
    assert rho0.positions[:, 0].max() < 0.5
    assert rho0.positions[:, 1].min() > 0.0
    assert sorted(set(np.round(rho0.positions[:, 0], 12))) == pytest.approx(
        [0.03125 + k * 0.0625 for k in range(8)]
    )


def test_generators_are_seeded() -> None:
    first = load_scenario_dict(_minimal())
    again = load_scenario_dict(_minimal())
    other = load_scenario_dict(_minimal(seed=3))
    assert np.array_equal(first.rho0.positions, again.rho0.positions)
    assert not np.array_equal(first.rho0.positions, other.rho0.positions)


def test_seed_is_required() -> None:
    document = _minimal()
    del document["seed"]
    with pytest.raises(ScenarioError, match="seed"):
        load_scenario_dict(document)
    assert load_scenario_dict(document, seed_override=4).seed == 4


def test_seed_override_redraws() -> None:
    base = load_scenario_dict(_minimal())
    overridden = load_scenario_dict(_minimal(), seed_override=9)
    assert overridden.seed == 9
    assert overridden.document["seed"] == 9
    assert np.array_equal(overridden.rho0.positions, base.with_seed(9).rho0.positions)


def test_inadmissible_fixture_is_rejected(scenarios_dir) -> None:
    path = scenarios_dir / "inadmissible.json"
    with pytest.raises(ScenarioError, match="K1 \\(lipschitz"):
        load_scenario(path)
    scenario = load_scenario(path, validate=False)
    report = validate_kernels(scenario)["K1"]
    assert not report.ok
    lipschitz = [w for w in report.witnesses if w.condition == "lipschitz"]
    assert lipschitz[0].ratio == pytest.approx(2.0)


@pytest.mark.parametrize(
    ("overrides", "message"),
    [
        pytest.param({"seed": -1}, "seed", id="negative-seed"),
        pytest.param({"sim": {"dt": 0.1}}, "invalid scenario", id="missing-horizon"),
        pytest.param({"mode": "problem3"}, "mode", id="bad-mode"),
        pytest.param(
            {"control": {"shape": [2]}}, "control.shape", id="bad-control-shape"
        ),
        pytest.param({"kernels": {"K3": {"name": "zero"}}}, "K3", id="unknown-kernel"),
        pytest.param(
            {"rho0": {"generator": "sobol", "n": 4}},
            "unknown generator",
            id="bad-generator",
        ),
        pytest.param(
            {"rho0": {"dim": 1, "atoms": [{"x": [0.5], "w": 1.0}]}},
            "dimension",
            id="wrong-dimension",
        ),
        pytest.param(
            {"cost": {"terms": [{"kind": "evacuation", "params": {"region": UNIT}}]}},
            "nu0",
            id="problem2-without-nu",
        ),
        pytest.param(
            {
                "mode": "problem1",
                "cost": {
                    "terms": [
                        {"kind": "evacuation", "params": {"region": [[0, 0], [2, 1]]}}
                    ]
                },
            },
            "leaves the domain",
            id="region-outside-domain",
        ),
        pytest.param(
            {"optimizer": {"speed": 1}}, "unknown optimizer keys", id="optimizer-key"
        ),
    ],
)
def test_invalid_scenarios(overrides: dict, message: str) -> None:
    with pytest.raises(ScenarioError, match=message):
        load_scenario_dict(_minimal(**overrides))


def test_problem1_needs_no_nu() -> None:
    cost = {"terms": [{"kind": "evacuation", "params": {"region": [[0, 0], [0.5, 1]]}}]}
    scenario = load_scenario_dict(_minimal(mode="problem1", cost=cost))
    assert scenario.nu0 is None
    assert scenario.cost.terms[0].kind == "evacuation"


def test_unreadable_files(tmp_path) -> None:
    with pytest.raises(ScenarioError, match="cannot read"):
        load_scenario(tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{ not json")
    with pytest.raises(ScenarioError, match="invalid JSON"):
        load_scenario(broken)
    listing = tmp_path / "list.json"
    listing.write_text("[]")
    with pytest.raises(ScenarioError, match="JSON object"):
        load_scenario(listing)


def test_validation_box_in_free_space(scenarios_dir) -> None:
    drift = load_scenario(scenarios_dir / "drift_line.json")
    assert drift.validation_box() >= 1.0
    assert standard_evacuation().validation_box() == pytest.approx(np.sqrt(2.0))
