from __future__ import annotations

from .control import (
    ControlGrid,
    NuParametrization,
    OptimizationConfig,
    OptimizationError,
    OptimizationResult,
    forward_cost,
    optimize,
    validate_control,
)
from .dynamics import (
    Box,
    Domain,
    ParticleState,
    SimConfig,
    SimulationError,
    Trajectory,
    convergence_study,
    empirical_curve,
    simulate_coupled,
    simulate_driven,
    simulate_single,
    weak_residual,
)
from .functionals import CompositeCost, FunctionalError, composite_cost
from .kernels import (
    AdmissibleField,
    BoundFunction,
    KernelError,
    builtin,
    custom_field,
    validate_admissibility,
)
from .measures import DiscreteMeasure, MeasureCurve, MeasureError
from .scenario import Scenario, ScenarioError, load_scenario, standard_evacuation
from .wasserstein import TransportError, bounded_lipschitz, w1_dual, wasserstein_p


def _resolve_version() -> str:
    try:
        from importlib.metadata import version

        return version("mfc-transport")
    except Exception:  # pragma: no cover - during development
        return "0.0.0"


def __getattr__(name: str):
    if name == "__version__":
        value = _resolve_version()
        globals()["__version__"] = value
        return value
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__() -> list[str]:
    return sorted(list(globals().keys()) + ["__version__"])


__all__ = [
    "AdmissibleField",
    "BoundFunction",
    "Box",
    "CompositeCost",
    "ControlGrid",
    "DiscreteMeasure",
    "Domain",
    "FunctionalError",
    "KernelError",
    "MeasureCurve",
    "MeasureError",
    "NuParametrization",
    "OptimizationConfig",
    "OptimizationError",
    "OptimizationResult",
    "ParticleState",
    "Scenario",
    "ScenarioError",
    "SimConfig",
    "SimulationError",
    "TransportError",
    "Trajectory",
    "bounded_lipschitz",
    "builtin",
    "composite_cost",
    "convergence_study",
    "custom_field",
    "empirical_curve",
    "forward_cost",
    "load_scenario",
    "optimize",
    "simulate_coupled",
    "simulate_driven",
    "simulate_single",
    "standard_evacuation",
    "validate_admissibility",
    "validate_control",
    "w1_dual",
    "wasserstein_p",
    "weak_residual",
    "__version__",
]
