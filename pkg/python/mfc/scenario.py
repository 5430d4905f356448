"""Scenario files: the JSON document that drives every CLI command.

Layout (every key except ``seed``, ``domain``, ``sim`` and ``rho0`` is
optional)::

    {
      "name": "...",
      "seed": 7,
      "domain": {"box": [[0, 0], [1, 1]], "obstacles": []},
      "sim": {"dt": 0.01, "T": 1.0, "integrator": "rk4", "stride": 1},
      "rho0": {"generator": "grid", "lo": [..], "hi": [..], "shape": [8, 8]},
      "nu0": {"dim": 2, "atoms": [{"x": [..], "w": 0.25}, ...]},
      "kernels": {"K1": {"name": "power_repulsion", "params": {...}}, ...},
      "cost": {"terms": [{"kind": "evacuation", "weight": 1, "params": {...}}]},
      "control": {"shape": [2, 2], "n_intervals": 1, "u_max": 1.0},
      "nu": {"n_intervals": 4, "M": 1.0, "speed": 1.0},
      "optimizer": {"max_iterations": 8, "restarts": 1, ...},
      "mode": "problem2",
      "validation": {"samples": 1000}
    }

Initial measures are an inline literal or a generator: ``grid`` (cell
centres of a box), ``uniform`` or ``gaussian``.  Random generators draw
from ``default_rng([seed, slot])`` with slot 0 for rho0 and 1 for nu0.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .artifacts import jmespath_query, load_json
from .control import MODES, ControlSpec, NuSpec, OptimizationConfig
from .dynamics import (
    Domain,
    ParticleState,
    Sampler,
    SimConfig,
    fixed_sampler,
    gaussian_sampler,
    uniform_sampler,
)
from .functionals import CompositeCost, EvacuationSet, FunctionalError
from .kernels import (
    AdmissibilityReport,
    AdmissibleField,
    KernelError,
    from_descriptor,
    validate_admissibility,
)
from .measures import DiscreteMeasure, MeasureError, support_radius

__all__ = [
    "KERNEL_KEYS",
    "Scenario",
    "ScenarioError",
    "load_scenario",
    "load_scenario_dict",
    "standard_evacuation",
    "standard_evacuation_dict",
    "validate_kernels",
]

log = logging.getLogger(__name__)

KERNEL_KEYS = ("K1", "K2", "H1", "H2", "f")
_SLOTS = {"rho0": 0, "nu0": 1}


class ScenarioError(ValueError):
    """The scenario document is unreadable or breaks the schema."""


_MISSING = object()


def _lookup(data: Any, expression: str, default: Any = _MISSING) -> Any:
    value = jmespath_query(expression)(data)
    if value is None:
        if default is _MISSING:
            raise ScenarioError(f"scenario is missing {expression!r}")
        return default
    return value


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    seed: int
    domain: Domain
    sim: SimConfig
    rho0: ParticleState
    kernels: Mapping[str, AdmissibleField]
    nu0: ParticleState | None = None
    cost: CompositeCost | None = None
    control: ControlSpec = field(default_factory=lambda: ControlSpec((2,)))
    nu_spec: NuSpec = field(default_factory=NuSpec)
    optimizer: OptimizationConfig = field(default_factory=OptimizationConfig)
    mode: str = "problem2"
    stride: int = 1
    validation_samples: int = 1000
    document: Mapping[str, Any] = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.domain.dim

    def sampler(self) -> Sampler:
        """Draw N-particle versions of rho0 (fixed states ignore N)."""
        spec = self.document.get("rho0", {})
        generator = spec.get("generator") if isinstance(spec, Mapping) else None
        if generator == "uniform":
            return uniform_sampler(spec["lo"], spec["hi"])
        if generator == "gaussian":
            return gaussian_sampler(spec["mean"], spec["std"])
        return fixed_sampler(self.rho0)

    def validation_box(self) -> float:
        if np.isfinite(self.domain.radius):
            return self.domain.radius
        return max(1.0, 2.0 * support_radius(self.rho0.measure))

    def with_seed(self, seed: int) -> Scenario:
        document = copy.deepcopy(dict(self.document))
        document["seed"] = seed
        return load_scenario_dict(document, validate=False)


def _grid(spec: Mapping[str, Any], dim: int) -> DiscreteMeasure:
    lo = np.asarray(_lookup(spec, "lo"), dtype=float)
    hi = np.asarray(_lookup(spec, "hi"), dtype=float)
    shape = [int(n) for n in _lookup(spec, "shape")]
    if lo.shape != (dim,) or hi.shape != (dim,) or len(shape) != dim:
        raise ScenarioError(f"grid generator needs {dim}-dimensional lo, hi and shape")
    axes = [
        lo[k] + (np.arange(shape[k]) + 0.5) * (hi[k] - lo[k]) / shape[k]
        for k in range(dim)
    ]
    points = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
    mass = float(_lookup(spec, "mass", 1.0))
    return DiscreteMeasure(points, np.full(points.shape[0], mass / points.shape[0]))


def _initial_measure(
    spec: Mapping[str, Any], dim: int, seed: int, slot: int
) -> DiscreteMeasure:
    generator = spec.get("generator")
    if generator is None:
        mu = DiscreteMeasure.from_json(spec)
        if mu.dim != dim:
            raise ScenarioError(
                f"inline measure has dimension {mu.dim}, expected {dim}"
            )
        return mu
    if generator == "grid":
        return _grid(spec, dim)
    rng = np.random.default_rng([seed, slot])
    n = int(_lookup(spec, "n"))
    if n < 1:
        raise ScenarioError(f"generator needs n >= 1, got {n}")
    if generator == "uniform":
        state = uniform_sampler(_lookup(spec, "lo"), _lookup(spec, "hi"))(n, rng)
    elif generator == "gaussian":
        state = gaussian_sampler(_lookup(spec, "mean"), _lookup(spec, "std"))(n, rng)
    else:
        raise ScenarioError(
            f"unknown generator {generator!r}; expected grid, uniform or gaussian"
        )
    if state.dim != dim:
        raise ScenarioError(
            f"{generator} generator has dimension {state.dim}, expected {dim}"
        )
    return state.measure


def validate_kernels(scenario: Scenario) -> dict[str, AdmissibilityReport]:
    """Spot-check every kernel on ``B(0, validation_box)`` over ``[0, T]``."""
    box = scenario.validation_box()
    return {
        key: validate_admissibility(
            kernel, scenario.sim.T, box, scenario.validation_samples, scenario.seed
        )
        for key, kernel in scenario.kernels.items()
    }


def load_scenario_dict(
    data: Mapping[str, Any],
    *,
    seed_override: int | None = None,
    validate: bool = True,
) -> Scenario:
    """Build a :class:`Scenario`.

    With ``validate`` every kernel must pass the admissibility spot-check.
    """
    if not isinstance(data, Mapping):
        raise ScenarioError("a scenario must be a JSON object")
    document = copy.deepcopy(dict(data))
    if seed_override is not None:
        document["seed"] = int(seed_override)
    if document.get("seed") is None:
        raise ScenarioError("scenario needs an explicit integer 'seed'")
    try:
        seed = int(document["seed"])
        if seed < 0:
            raise ScenarioError(f"seed must be >= 0, got {seed}")
        domain = Domain.from_json(_lookup(document, "domain"))
        dim = domain.dim
        sim = SimConfig.from_json(_lookup(document, "sim"))
        stride = int(_lookup(document, "sim.stride", 1))
        rho0_measure = _initial_measure(
            _lookup(document, "rho0"), dim, seed, _SLOTS["rho0"]
        )
        nu0_spec = _lookup(document, "nu0", None)
        nu0 = (
            None
            if nu0_spec is None
            else ParticleState.from_measure(
                _initial_measure(nu0_spec, dim, seed, _SLOTS["nu0"])
            )
        )
        raw_kernels = _lookup(document, "kernels", {})
        unknown = sorted(set(raw_kernels) - set(KERNEL_KEYS))
        if unknown:
            raise ScenarioError(f"unknown kernel keys: {', '.join(unknown)}")
        kernels = {
            key: from_descriptor(raw_kernels.get(key, {"name": "zero"}), dim, sim.T)
            for key in KERNEL_KEYS
        }
        cost_doc = _lookup(document, "cost", None)
        cost = None if cost_doc is None else CompositeCost.from_json(cost_doc)
        if cost is not None and not domain.is_free:
            for term in cost.terms:
                if term.kind == "evacuation":
                    region = EvacuationSet.from_json(term.params.get("region", []))
                    region.check_within(domain)
        mode = str(_lookup(document, "mode", "problem2"))
        if mode not in MODES:
            raise ScenarioError(f"mode must be one of {', '.join(MODES)}, got {mode!r}")
        control = ControlSpec.from_json(
            _lookup(document, "control", {"shape": [2] * dim})
        )
        if len(control.shape) != dim:
            raise ScenarioError(
                f"control.shape needs {dim} axes, got {list(control.shape)}"
            )
        if cost is not None and mode == "problem2" and nu0 is None:
            raise ScenarioError("problem2 scenarios with a cost need a nu0 population")
        scenario = Scenario(
            name=str(_lookup(document, "name", "scenario")),
            seed=seed,
            domain=domain,
            sim=sim,
            rho0=ParticleState.from_measure(rho0_measure),
            kernels=kernels,
            nu0=nu0,
            cost=cost,
            control=control,
            nu_spec=NuSpec.from_json(_lookup(document, "nu", {})),
            optimizer=OptimizationConfig.from_json(
                {"seed": seed, **_lookup(document, "optimizer", {})}
            ),
            mode=mode,
            stride=stride,
            validation_samples=int(_lookup(document, "validation.samples", 1000)),
            document=document,
        )
    except ScenarioError:
        raise
    except (
        KernelError,
        MeasureError,
        FunctionalError,
        KeyError,
        TypeError,
        ValueError,
    ) as exc:
        raise ScenarioError(f"invalid scenario: {exc}") from exc
    if validate:
        failing = {k: r for k, r in validate_kernels(scenario).items() if not r.ok}
        if failing:
            details = "; ".join(
                f"{key} ({w.condition} ratio {w.ratio:.6g} at t={w.t:.6g})"
                for key, report in failing.items()
                for w in report.witnesses
            )
            raise ScenarioError(f"inadmissible kernels: {details}")
    log.debug("loaded scenario %s (seed %d, dim %d)", scenario.name, seed, dim)
    return scenario


def load_scenario(
    path: str | Path, *, seed_override: int | None = None, validate: bool = True
) -> Scenario:
    try:
        data = load_json(path)
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc.strerror or exc}") from exc
    except ValueError as exc:
        raise ScenarioError(str(exc)) from exc
    return load_scenario_dict(data, seed_override=seed_override, validate=validate)


def standard_evacuation_dict() -> dict:
    """The frozen evacuation fixture.

    Unit square, evacuation region C = [0, 0.5] x [0, 1] holding an 8 x 8
    grid of rho particles, four nu particles just right of C that attract
    rho linearly, and weak capped repulsion inside rho.
    """
    return {
        "name": "standard_evacuation",
        "seed": 7,
        "domain": {"box": [[0.0, 0.0], [1.0, 1.0]], "obstacles": []},
        "sim": {"dt": 0.01, "T": 1.0, "integrator": "rk4", "stride": 1},
        "rho0": {
            "generator": "grid",
            "lo": [0.0, 0.0],
            "hi": [0.5, 1.0],
            "shape": [8, 8],
        },
        "nu0": {
            "dim": 2,
            "atoms": [{"x": [0.6, y], "w": 0.25} for y in (0.2, 0.4, 0.6, 0.8)],
        },
        "kernels": {
            "K1": {"name": "power_repulsion", "params": {"c": 0.01, "r0": 0.05}},
            "H1": {"name": "linear_attraction", "params": {"a": 1.0}},
        },
        "cost": {
            "terms": [
                {
                    "kind": "evacuation",
                    "weight": 1.0,
                    "params": {"region": [[0.0, 0.0], [0.5, 1.0]]},
                },
                {"kind": "control_energy", "weight": 0.01, "params": {"p": 2}},
            ]
        },
        "control": {"shape": [2, 2], "n_intervals": 1, "u_max": 1.0},
        "nu": {"n_intervals": 4, "M": 1.0, "speed": 1.0},
        "optimizer": {
            "max_iterations": 8,
            "fd_step": 0.1,
            "initial_step": 0.5,
            "restarts": 1,
        },
        "mode": "problem2",
    }


def standard_evacuation(**overrides: Any) -> Scenario:
    """Load the fixture; top-level keys in ``overrides`` replace the defaults."""
    document = standard_evacuation_dict()
    document.update(overrides)
    return load_scenario_dict(document)
