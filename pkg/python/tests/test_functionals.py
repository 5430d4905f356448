from __future__ import annotations

import numpy as np
import pytest

from mfc.control import ControlGrid
from mfc.dynamics import Box, Domain
from mfc.functionals import (
    CompositeCost,
    CostTerm,
    EvacuationSet,
    FunctionalError,
    PairKernel,
    alignment_cost,
    atom_count_cost,
    composite_cost,
    control_energy,
    evacuation_cost,
    interaction_cost,
    interaction_lower_bound,
    manpower_cost,
    w1_terminal_cost,
    w1_tracking_cost,
)
from mfc.kernels import BoundFunction
from mfc.measures import DiscreteMeasure, MeasureCurve

TIMES = np.linspace(0.0, 1.0, 11)


def _static(mu: DiscreteMeasure, T: float = 1.0) -> MeasureCurve:
    return MeasureCurve.static(mu, np.linspace(0.0, T, 11))


def _grid(values: np.ndarray, u_max: float = 10.0) -> ControlGrid:
    return ControlGrid(1.0, [0.0, 0.0], [2.0, 1.0], values, u_max)


def test_manpower_examples() -> None:
    x0 = [1.0, -1.0]
    at_home = _static(DiscreteMeasure.dirac(x0))
    assert manpower_cost(at_home, 3.0, x0, 2.0) == 0.0

    away = _static(DiscreteMeasure.dirac([3.0, -1.0]))
    assert manpower_cost(away, 1.0, x0, 1.0) == pytest.approx(2.0, abs=1e-10)

    heavy = _static(DiscreteMeasure.dirac([0.0, 0.0], 0.7), T=2.0)
    assert manpower_cost(heavy, 1.0, x0, 0.0) == pytest.approx(1.4, abs=1e-10)


def test_manpower_time_profile() -> None:
    away = _static(DiscreteMeasure.dirac([2.0]))
    half = BoundFunction((2.0, 0.0), (0.5,))
    assert manpower_cost(away, half, [0.0], 1.0) == pytest.approx(2.0, abs=0.25)
    assert manpower_cost(away, lambda t: t, [0.0], 1.0) == pytest.approx(1.0, abs=1e-10)
    with pytest.raises(FunctionalError):
        manpower_cost(away, 1.0, [0.0], -1.0)


def test_alignment_examples() -> None:
    spread = DiscreteMeasure(np.array([[1.0, 5.0], [3.0, -7.0]]), np.array([0.5, 0.5]))
    assert alignment_cost(_static(spread), [0]) == pytest.approx(1.0, abs=1e-10)

    consensus = DiscreteMeasure.uniform([[2.0, 0.0], [2.0, 1.0]])
    assert alignment_cost(_static(consensus), [0]) == 0.0

    scaled = spread.with_points(spread.points * np.array([3.0, 1.0]))
    assert alignment_cost(_static(scaled), [0]) == pytest.approx(9.0, abs=1e-10)
    with pytest.raises(FunctionalError):
        alignment_cost(_static(spread), [2])


def test_alignment_centers_on_the_normalized_mean() -> None:
    points = np.array([[1.0, 5.0], [3.0, -7.0]])
    doubled = DiscreteMeasure(points, np.array([1.0, 1.0]))
    assert alignment_cost(_static(doubled), [0]) == pytest.approx(2.0, abs=1e-10)
    lopsided = DiscreteMeasure(points, np.array([0.2, 0.6]))
    assert alignment_cost(_static(lopsided), [0]) == pytest.approx(0.6, abs=1e-10)


def test_evacuation_examples() -> None:
    region = EvacuationSet.from_json([[0.0, 0.0], [0.5, 1.0]])
    half_in = DiscreteMeasure.uniform([[0.25, 0.5], [0.75, 0.5]])
    value = evacuation_cost(_static(half_in, T=2.0), region)
    assert value == pytest.approx(1.0, abs=1e-10)
    assert evacuation_cost(_static(half_in), EvacuationSet()) == 0.0

    inside = DiscreteMeasure.uniform([[0.1, 0.1], [0.5, 1.0]])
    value = evacuation_cost(_static(inside, T=3.0), region)
    assert value == pytest.approx(3.0, abs=1e-10)


def test_evacuation_is_monotone_in_the_region(rng: np.random.Generator) -> None:
    mu = DiscreteMeasure.uniform(rng.uniform(size=(20, 2)))
    small = EvacuationSet.from_json([[0.2, 0.2], [0.6, 0.6]])
    large = EvacuationSet.from_json(
        [[[0.1, 0.1], [0.7, 0.7]], [[0.8, 0.0], [1.0, 1.0]]]
    )
    assert evacuation_cost(_static(mu), small) <= evacuation_cost(_static(mu), large)


def test_evacuation_region_must_fit_the_domain() -> None:
    domain = Domain(Box(np.zeros(2), np.ones(2)))
    EvacuationSet.from_json([[0.0, 0.0], [0.5, 1.0]]).check_within(domain)
    with pytest.raises(FunctionalError):
        EvacuationSet.from_json([[0.0, 0.0], [1.5, 1.0]]).check_within(domain)


def test_w1_costs() -> None:
    rho = _static(DiscreteMeasure.dirac([0.0]))
    target = DiscreteMeasure.dirac([3.0])
    assert w1_tracking_cost(rho, target) == pytest.approx(3.0, abs=1e-10)
    assert w1_terminal_cost(rho, target) == pytest.approx(3.0, abs=1e-10)
    assert w1_tracking_cost(rho, rho.snapshots[0]) == 0.0
    assert w1_terminal_cost(rho, rho.snapshots[-1]) == 0.0


def test_w1_tracking_averages_distances() -> None:
    snapshots = tuple(DiscreteMeasure.dirac([t]) for t in TIMES)
    rho = MeasureCurve(TIMES, snapshots)
    target = DiscreteMeasure.dirac([0.0])
    assert w1_tracking_cost(rho, target) == pytest.approx(0.5, abs=1e-10)
    assert w1_terminal_cost(rho, rho.snapshots[-1]) == 0.0


def test_interaction_examples() -> None:
    pair = _static(DiscreteMeasure.uniform([[0.0], [2.0]]))
    squared = PairKernel("power", 2.0)
    assert interaction_cost(pair, squared) == pytest.approx(2.0, abs=1e-10)

    lone = _static(DiscreteMeasure.dirac([1.0]))
    assert interaction_cost(lone, PairKernel("power", 1.0)) == 0.0

    repel = PairKernel("neg_power", 1.0)
    tight = _static(DiscreteMeasure.uniform([[0.0], [0.5]]))
    loose = _static(DiscreteMeasure.uniform([[0.0], [2.0]]))
    assert interaction_cost(loose, repel) < interaction_cost(tight, repel)


def test_interaction_lower_bound_holds(rng: np.random.Generator) -> None:
    repel = PairKernel("neg_power", 1.0)
    diameter = np.sqrt(2.0)
    for _ in range(10):
        mu = DiscreteMeasure(rng.uniform(size=(5, 2)), rng.uniform(0, 0.2, 5))
        value = interaction_cost(_static(mu), repel)
        assert value >= interaction_lower_bound(repel.sup(diameter), 1.0, 1.0) - 1e-12


def test_capped_inverse_power_kernel() -> None:
    kernel = PairKernel("capped_inverse_power", 1.0, r0=0.5)
    assert kernel.radial(np.array([0.0, 0.25, 2.0])).tolist() == [2.0, 2.0, 0.5]
    assert kernel.sup(10.0) == 2.0
    with pytest.raises(FunctionalError):
        PairKernel("gaussian")


def test_atom_count_examples() -> None:
    three = _static(DiscreteMeasure.uniform([[0.0], [1.0], [2.0]]), T=2.0)
    assert atom_count_cost(three) == pytest.approx(6.0, abs=1e-10)
    assert atom_count_cost(three, eps=0.5) == 0.0

    doubled = _static(DiscreteMeasure.uniform([[0.0], [0.0], [1.0]]))
    assert atom_count_cost(doubled) == pytest.approx(3.0, abs=1e-10)
    assert atom_count_cost(doubled, merge=True) == pytest.approx(2.0, abs=1e-10)


def test_control_energy_examples() -> None:
    zero = _grid(np.zeros((2, 3, 2, 2)))
    assert control_energy(zero, 2.0) == 0.0

    c = np.array([0.6, -0.8])
    constant = _grid(np.broadcast_to(c, (2, 3, 2, 2)).copy())
    assert control_energy(constant, 3.0) == pytest.approx(1.0 * 2.0 * 1.0, abs=1e-10)

    doubled = constant.with_values(constant.values * 2)
    expected = 8.0 * control_energy(constant, 3.0)
    assert control_energy(doubled, 3.0) == pytest.approx(expected)
    with pytest.raises(FunctionalError):
        control_energy(constant, 0.5)


def test_control_energy_is_convex(rng: np.random.Generator) -> None:
    for _ in range(10):
        u1 = _grid(rng.normal(size=(2, 3, 2, 2)))
        u2 = _grid(rng.normal(size=(2, 3, 2, 2)))
        mid = u1.with_values((u1.values + u2.values) / 2)
        for p in (1.0, 2.0, 3.5):
            chord = (control_energy(u1, p) + control_energy(u2, p)) / 2
            assert control_energy(mid, p) <= chord + 1e-12


def test_functionals_are_nonnegative(rng: np.random.Generator) -> None:
    mu = DiscreteMeasure(rng.normal(size=(6, 2)), rng.uniform(0, 1, 6))
    curve = _static(mu)
    region = EvacuationSet.from_json([[-1.0, -1.0], [0.0, 1.0]])
    assert manpower_cost(curve, 1.0, [0.0, 0.0], 1.5) >= 0
    assert alignment_cost(curve, [0, 1]) >= 0
    assert evacuation_cost(curve, region) >= 0
    assert interaction_cost(curve, PairKernel("power", 2.0)) >= 0
    assert atom_count_cost(curve) >= 0


def test_values_move_lipschitz_with_atoms(rng: np.random.Generator) -> None:
    mu = DiscreteMeasure.uniform(rng.uniform(size=(6, 2)))
    shift = 1e-3 * rng.normal(size=(6, 2))
    moved = mu.with_points(mu.points + shift)
    delta = float(np.max(np.linalg.norm(shift, axis=1)))
    base, nudged = _static(mu), _static(moved)
    target = DiscreteMeasure.dirac([0.5, 0.5])
    manpower = [manpower_cost(c, 1.0, [0.5, 0.5], 1.0) for c in (base, nudged)]
    assert abs(manpower[0] - manpower[1]) <= delta + 1e-12
    tracking = [w1_tracking_cost(c, target) for c in (base, nudged)]
    assert abs(tracking[0] - tracking[1]) <= delta + 1e-12
    alignment = [alignment_cost(c, [0, 1]) for c in (base, nudged)]
    bound = 4 * (np.sqrt(2) + delta) * delta
    assert abs(alignment[0] - alignment[1]) <= bound + 1e-12


def test_composite_single_term_matches_bare_functional() -> None:
    rho = _static(DiscreteMeasure.uniform([[0.25, 0.5], [0.75, 0.5]]))
    cost = CompositeCost.from_json(
        {"terms": [{"kind": "evacuation", "params": {"region": [[0, 0], [0.5, 1]]}}]}
    )
    breakdown = composite_cost(cost, rho=rho)
    region = EvacuationSet.from_json([[0, 0], [0.5, 1]])
    assert breakdown.total == evacuation_cost(rho, region)


def test_composite_weights() -> None:
    rho = _static(DiscreteMeasure.uniform([[0.25, 0.5], [0.75, 0.5]]))
    target = {"dim": 2, "atoms": [{"x": [1.0, 0.5], "w": 1.0}]}
    document = {
        "terms": [
            {
                "kind": "evacuation",
                "weight": 1.0,
                "params": {"region": [[0, 0], [0.5, 1]]},
            },
            {"kind": "w1_terminal", "weight": 2.0, "params": {"target": target}},
        ]
    }
    breakdown = composite_cost(CompositeCost.from_json(document), rho=rho)
    evacuation = evacuation_cost(rho, EvacuationSet.from_json([[0, 0], [0.5, 1]]))
    terminal = w1_terminal_cost(rho, DiscreteMeasure.from_json(target))
    assert breakdown.total == pytest.approx(evacuation + 2 * terminal, abs=1e-10)
    weighted = sum(t.weighted for t in breakdown.terms)
    assert weighted == pytest.approx(breakdown.total, abs=1e-10)
    assert set(breakdown.to_json()["terms"]) == {"evacuation", "w1_terminal"}

    for term in document["terms"]:
        term["weight"] = 0.0
    assert composite_cost(CompositeCost.from_json(document), rho=rho).total == 0.0


def test_composite_needs_its_inputs() -> None:
    cost = CompositeCost.from_json(
        {
            "terms": [
                {"kind": "atom_count"},
                {"kind": "control_energy", "params": {"p": 2}},
            ]
        }
    )
    assert cost.needs("nu")
    assert cost.needs("u")
    assert not cost.needs("rho")
    nu = _static(DiscreteMeasure.dirac([0.0, 0.0]))
    with pytest.raises(FunctionalError, match="needs the u input"):
        composite_cost(cost, nu=nu)


def test_repeated_kinds_get_distinct_labels() -> None:
    cost = CompositeCost.from_json(
        {
            "terms": [
                {"kind": "atom_count"},
                {"kind": "atom_count", "params": {"eps": 0.1}},
            ]
        }
    )
    assert [t.label for t in cost.terms] == ["atom_count", "atom_count#2"]
    assert CompositeCost.from_json(cost.to_json()).to_json() == cost.to_json()


@pytest.mark.parametrize(
    "document",
    [
        pytest.param({"terms": []}, id="empty"),
        pytest.param({"terms": [{"kind": "teleport"}]}, id="unknown-kind"),
        pytest.param(
            {"terms": [{"kind": "atom_count", "weight": -1}]}, id="negative-weight"
        ),
        pytest.param(
            {"terms": [{"kind": "w1_terminal", "params": {}}]}, id="missing-target"
        ),
        pytest.param({}, id="no-terms"),
    ],
)
def test_invalid_composites(document: dict) -> None:
    with pytest.raises(FunctionalError):
        CompositeCost.from_json(document)


def test_cost_term_round_trip() -> None:
    term = CostTerm("manpower", 0.5, {"x0": [0.0], "p": 2})
    assert term.population == "nu"
    assert CostTerm.from_json(term.to_json()).to_json() == term.to_json()
