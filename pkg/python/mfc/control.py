"""Parametrized controls and the projected finite-difference optimizer.

Two parametrizations are optimized:

``problem2``
    A :class:`ControlGrid` velocity field ``u(t, x)`` drives the controlling
    population ``nu`` inside the coupled system.
``problem1``
    The ``nu`` curve itself is the unknown.  A :class:`NuParametrization`
    stores atom positions and weights at time knots.  It is interpolated
    linearly between knots and kept inside a mass cap ``M`` and a
    bounded-Lipschitz speed cap ``L'``.

Each candidate is scored by a forward simulation, so the state equation
holds for it by construction.  The cost is then the composite functional
of the resulting curves.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Mapping, Sequence, Union

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .dynamics import (
    SimulationError,
    Trajectory,
    empirical_curve,
    simulate_coupled,
    simulate_driven,
)
from .functionals import CostBreakdown, composite_cost
from .kernels import AdmissibleField, BoundFunction
from .measures import DiscreteMeasure, MeasureCurve
from .wasserstein import bounded_lipschitz

if TYPE_CHECKING:
    from .scenario import Scenario

__all__ = [
    "ControlGrid",
    "ControlReport",
    "ControlSpec",
    "Evaluation",
    "MODES",
    "NuParametrization",
    "NuSpec",
    "OptimizationConfig",
    "OptimizationError",
    "OptimizationResult",
    "StartSummary",
    "baseline",
    "forward_cost",
    "initial_control",
    "nu_speed",
    "optimize",
    "project_admissible",
    "project_nu",
    "random_control",
    "resolve_threads",
    "validate_control",
]

log = logging.getLogger(__name__)

MODES = ("problem1", "problem2")
CAP_RTOL = 1e-12
BL_SLACK = 1e-9
THREADS_ENV = "MFC_THREADS"


class OptimizationError(RuntimeError):
    """No start produced a finite evaluation."""

    def __init__(self, message: str, *, control: Any = None) -> None:
        super().__init__(message)
        self.control = control


def resolve_threads(threads: int | None = None) -> int:
    """Worker count: ``threads`` if given, else ``$MFC_THREADS``, else 1."""
    if threads is not None:
        value: Any = threads
        source = "threads"
    else:
        value = os.environ.get(THREADS_ENV, "1")
        source = THREADS_ENV
    try:
        count = int(value)
    except (TypeError, ValueError):
        raise ValueError(
            f"{source} must be a positive integer, got {value!r}"
        ) from None
    if count < 1:
        raise ValueError(f"{source} must be a positive integer, got {count}")
    return count


def _node_weights(axis: np.ndarray) -> np.ndarray:
    """Trapezoid weights of a uniform axis."""
    edge = axis[1] - axis[0]
    weights = np.full(axis.shape[0], edge)
    weights[0] = weights[-1] = edge / 2
    return weights


@dataclass(frozen=True, eq=False)
class ControlGrid:
    """Velocity values on a uniform space grid, one slab per time interval.

    ``values`` has shape ``(n_intervals, n_1, ..., n_d, d)``.  The field is
    constant in time on ``[k T / K, (k + 1) T / K)`` and multilinear in space;
    points outside ``[lo, hi]`` read the value at their projection onto it.
    """

    T: float
    lo: np.ndarray
    hi: np.ndarray
    values: np.ndarray
    u_max: float

    def __post_init__(self) -> None:
        lo = np.asarray(self.lo, dtype=np.float64).reshape(-1)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(-1)
        values = np.array(self.values, dtype=np.float64)
        d = lo.shape[0]
        if hi.shape != lo.shape or not np.all(np.isfinite(lo) & np.isfinite(hi)):
            raise ValueError("control grid corners must be finite and share a shape")
        if np.any(lo >= hi):
            raise ValueError(f"control grid needs lo < hi, got {lo} and {hi}")
        if values.ndim != d + 2 or values.shape[-1] != d or values.shape[0] < 1:
            raise ValueError(
                f"values must have shape (K, n_1..n_{d}, {d}), got {values.shape}"
            )
        if any(n < 2 for n in values.shape[1:-1]):
            raise ValueError(
                f"every grid axis needs >= 2 nodes, got {values.shape[1:-1]}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("control values must be finite")
        if not (self.T > 0 and self.u_max >= 0):
            raise ValueError(
                f"need T > 0 and u_max >= 0, got {self.T} and {self.u_max}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "values", values)
        axes = tuple(np.linspace(lo[k], hi[k], values.shape[k + 1]) for k in range(d))
        object.__setattr__(self, "_axes", axes)
        object.__setattr__(
            self,
            "_interpolators",
            tuple(RegularGridInterpolator(axes, np.array(slab)) for slab in values),
        )
        knots = np.linspace(0.0, self.T, values.shape[0] + 1)
        object.__setattr__(self, "_knots", knots)

    @classmethod
    def zeros(
        cls,
        T: float,
        lo: Sequence[float],
        hi: Sequence[float],
        shape: Sequence[int],
        n_intervals: int,
        u_max: float,
    ) -> ControlGrid:
        dim = len(lo)
        return cls(T, lo, hi, np.zeros((n_intervals, *shape, dim)), u_max)

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> ControlGrid:
        return cls(
            float(data["T"]),
            np.asarray(data["lo"], dtype=float),
            np.asarray(data["hi"], dtype=float),
            np.asarray(data["values"], dtype=float),
            float(data["u_max"]),
        )

    def to_json(self) -> dict:
        return {
            "T": self.T,
            "hi": self.hi.tolist(),
            "kind": "grid",
            "lo": self.lo.tolist(),
            "u_max": self.u_max,
            "values": self.values.tolist(),
        }

    @property
    def dim(self) -> int:
        return int(self.lo.shape[0])

    @property
    def spatial_dims(self) -> int:
        return self.dim

    @property
    def n_intervals(self) -> int:
        return int(self.values.shape[0])

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(n) for n in self.values.shape[1:-1])

    @property
    def time_step(self) -> float:
        return self.T / self.n_intervals

    @property
    def n_parameters(self) -> int:
        return int(self.values.size)

    @property
    def min_edge(self) -> float:
        return float(np.min((self.hi - self.lo) / (np.asarray(self.shape) - 1)))

    @property
    def lipschitz_bound(self) -> float:
        """Spatial Lipschitz bound ``d * u_max * 2 / h`` of the interpolated field."""
        return self.dim * self.u_max * 2.0 / self.min_edge

    @property
    def ell(self) -> float:
        return max(self.u_max, self.lipschitz_bound)

    def node_volumes(self) -> np.ndarray:
        """Tensor-trapezoid weight of every node; they sum to the box volume."""
        volumes = np.ones(())
        for axis in self._axes:  # type: ignore[attr-defined]
            volumes = np.multiply.outer(volumes, _node_weights(axis))
        return volumes

    def interval(self, t: float) -> int:
        knots = self._knots  # type: ignore[attr-defined]
        k = int(np.searchsorted(knots, t, side="right")) - 1
        return min(max(k, 0), self.n_intervals - 1)

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        points = np.clip(np.atleast_2d(x), self.lo, self.hi)
        interpolators = self._interpolators  # type: ignore[attr-defined]
        return interpolators[self.interval(t)](points)

    def as_field(self) -> AdmissibleField:
        return AdmissibleField(
            self, BoundFunction.constant(self.ell), self.dim, {"name": "control_grid"}
        )

    def vector(self) -> np.ndarray:
        return self.values.reshape(-1).copy()

    def with_vector(self, vector: np.ndarray) -> ControlGrid:
        values = np.asarray(vector, dtype=np.float64).reshape(self.values.shape)
        return self.with_values(values)

    def with_values(
        self, values: np.ndarray, u_max: float | None = None
    ) -> ControlGrid:
        return ControlGrid(
            self.T, self.lo, self.hi, values, self.u_max if u_max is None else u_max
        )


def project_admissible(
    control: ControlGrid,
    u_max: float | None = None,
    temporal_cap: float | None = None,
) -> ControlGrid:
    """Rescale node values above the speed cap and limit knot-to-knot jumps.

    The temporal pass sweeps forward and moves each slab toward the previous
    one until no node jumps by more than ``temporal_cap``.  Both passes are
    idempotent.
    """
    cap = control.u_max if u_max is None else float(u_max)
    if cap < 0:
        raise ValueError(f"u_max must be >= 0, got {cap}")
    values = np.array(control.values)
    norms = np.linalg.norm(values, axis=-1, keepdims=True)
    over = norms > cap * (1 + CAP_RTOL)
    values = np.where(over, values * (cap / np.where(over, norms, 1.0)), values)
    if temporal_cap is not None:
        if temporal_cap < 0:
            raise ValueError(f"temporal_cap must be >= 0, got {temporal_cap}")
        for k in range(1, values.shape[0]):
            jump = values[k] - values[k - 1]
            size = np.linalg.norm(jump, axis=-1, keepdims=True)
            big = size > temporal_cap * (1 + CAP_RTOL)
            scale = np.where(big, temporal_cap / np.where(big, size, 1.0), 1.0)
            values[k] = values[k - 1] + jump * scale
    return control.with_values(values, cap)


@dataclass(frozen=True, eq=False)
class NuParametrization:
    """Atoms of nu at ``n_intervals + 1`` uniform time knots.

    ``positions`` has shape ``(K + 1, N_c, d)`` and ``weights`` ``(K + 1, N_c)``.
    """

    T: float
    positions: np.ndarray
    weights: np.ndarray
    M: float
    speed: float

    def __post_init__(self) -> None:
        positions = np.array(self.positions, dtype=np.float64)
        weights = np.array(self.weights, dtype=np.float64)
        if positions.ndim != 3 or positions.shape[0] < 2:
            raise ValueError(
                "positions must have shape (K + 1, N_c, d) with K >= 1,"
                f" got {positions.shape}"
            )
        if weights.shape != positions.shape[:2]:
            raise ValueError(
                f"weights must have shape {positions.shape[:2]}, got {weights.shape}"
            )
        if not (np.all(np.isfinite(positions)) and np.all(np.isfinite(weights))):
            raise ValueError("nu knots must be finite")
        if not (self.T > 0 and self.M >= 0 and self.speed >= 0):
            raise ValueError(
                "need T > 0, M >= 0 and speed >= 0,"
                f" got {self.T}, {self.M}, {self.speed}"
            )
        positions.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def static(
        cls, nu0: DiscreteMeasure, T: float, n_intervals: int, M: float, speed: float
    ) -> NuParametrization:
        if n_intervals < 1:
            raise ValueError(f"n_intervals must be >= 1, got {n_intervals}")
        knots = n_intervals + 1
        positions = np.broadcast_to(nu0.points, (knots, *nu0.points.shape))
        weights = np.broadcast_to(nu0.weights, (knots, len(nu0)))
        return cls(T, positions, weights, M, speed)

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> NuParametrization:
        positions = np.asarray(data["positions"], dtype=float)
        if positions.size == 0:
            positions = positions.reshape(len(data["positions"]), 0, int(data["dim"]))
        return cls(
            float(data["T"]),
            positions,
            np.asarray(data["weights"], dtype=float).reshape(positions.shape[:2]),
            float(data["M"]),
            float(data["speed"]),
        )

    def to_json(self) -> dict:
        return {
            "M": self.M,
            "T": self.T,
            "dim": self.dim,
            "kind": "nu",
            "positions": self.positions.tolist(),
            "speed": self.speed,
            "weights": self.weights.tolist(),
        }

    @property
    def n_intervals(self) -> int:
        return int(self.positions.shape[0]) - 1

    @property
    def n_atoms(self) -> int:
        return int(self.positions.shape[1])

    @property
    def dim(self) -> int:
        return int(self.positions.shape[2])

    @property
    def time_step(self) -> float:
        return self.T / self.n_intervals

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_intervals + 1)

    @property
    def n_parameters(self) -> int:
        return int(self.positions.size + self.weights.size)

    def knot(self, k: int) -> DiscreteMeasure:
        return DiscreteMeasure(self.positions[k], np.clip(self.weights[k], 0.0, None))

    def at(self, t: float) -> DiscreteMeasure:
        """Linear interpolation of positions and weights between knots."""
        s = min(max(t / self.time_step, 0.0), float(self.n_intervals))
        k = min(int(math.floor(s)), self.n_intervals - 1)
        a = s - k
        points = (1 - a) * self.positions[k] + a * self.positions[k + 1]
        weights = (1 - a) * self.weights[k] + a * self.weights[k + 1]
        return DiscreteMeasure(points, np.clip(weights, 0.0, None))

    def curve(self, times: Sequence[float]) -> MeasureCurve:
        snapshots = tuple(self.at(float(t)) for t in times)
        return MeasureCurve(np.asarray(times, dtype=float), snapshots)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.positions.reshape(-1), self.weights.reshape(-1)])

    def with_vector(self, vector: np.ndarray) -> NuParametrization:
        vector = np.asarray(vector, dtype=np.float64)
        split = self.positions.size
        return NuParametrization(
            self.T,
            vector[:split].reshape(self.positions.shape),
            vector[split:].reshape(self.weights.shape),
            self.M,
            self.speed,
        )


def _cap_mass(weights: np.ndarray, M: float) -> np.ndarray:
    weights = np.clip(weights, 0.0, None)
    total = float(np.sum(weights))
    if total > M:
        weights = weights * (M / total)
    return weights


def project_nu(param: NuParametrization, iterations: int = 60) -> NuParametrization:
    """Enforce the mass cap at every knot, then the speed cap knot by knot.

    Weights are clipped at 0 and scaled down when their sum exceeds ``M``.
    Then, sweeping forward from t = 0, each knot whose bounded-Lipschitz
    distance to the (already projected) previous knot exceeds
    ``speed * dt`` is pulled along the segment toward that knot.  Positions
    and weights move together, and bisection finds the farthest feasible
    point.
    """
    positions = np.array(param.positions)
    weights = np.stack([_cap_mass(w, param.M) for w in param.weights])
    budget = param.speed * param.time_step

    def measure(k_positions: np.ndarray, k_weights: np.ndarray) -> DiscreteMeasure:
        return DiscreteMeasure(k_positions, k_weights)

    for k in range(1, positions.shape[0]):
        prev = measure(positions[k - 1], weights[k - 1])
        if bounded_lipschitz(prev, measure(positions[k], weights[k])) <= budget:
            continue
        dx = positions[k] - positions[k - 1]
        dw = weights[k] - weights[k - 1]
        lo, hi = 0.0, 1.0
        for _ in range(iterations):
            mid = 0.5 * (lo + hi)
            candidate = measure(positions[k - 1] + mid * dx, weights[k - 1] + mid * dw)
            if bounded_lipschitz(prev, candidate) <= budget:
                lo = mid
            else:
                hi = mid
        positions[k] = positions[k - 1] + lo * dx
        weights[k] = np.clip(weights[k - 1] + lo * dw, 0.0, None)
    return NuParametrization(param.T, positions, weights, param.M, param.speed)


@dataclass(frozen=True)
class ControlSpec:
    """Grid shape and caps of the Problem-2 control."""

    shape: tuple[int, ...]
    n_intervals: int = 1
    u_max: float = 1.0
    temporal_cap: float | None = None
    lo: tuple[float, ...] | None = None
    hi: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if not self.shape or any(n < 2 for n in self.shape):
            raise ValueError(f"shape needs >= 2 nodes per axis, got {self.shape}")
        if self.n_intervals < 1:
            raise ValueError(f"n_intervals must be >= 1, got {self.n_intervals}")
        if not self.u_max >= 0:
            raise ValueError(f"u_max must be >= 0, got {self.u_max}")
        if self.temporal_cap is not None and self.temporal_cap < 0:
            raise ValueError(f"temporal_cap must be >= 0, got {self.temporal_cap}")

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> ControlSpec:
        cap = data.get("temporal_cap")
        box = data.get("box")
        return cls(
            tuple(int(n) for n in data.get("shape", (2,))),
            int(data.get("n_intervals", 1)),
            float(data.get("u_max", 1.0)),
            None if cap is None else float(cap),
            None if box is None else tuple(float(v) for v in box[0]),
            None if box is None else tuple(float(v) for v in box[1]),
        )


@dataclass(frozen=True)
class NuSpec:
    """Knot count and caps of the Problem-1 nu curve."""

    n_intervals: int = 4
    M: float = 1.0
    speed: float = 1.0

    def __post_init__(self) -> None:
        if self.n_intervals < 1:
            raise ValueError(f"n_intervals must be >= 1, got {self.n_intervals}")
        if not (self.M >= 0 and self.speed >= 0):
            raise ValueError(f"M and speed must be >= 0, got {self.M} and {self.speed}")

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> NuSpec:
        return cls(
            int(data.get("n_intervals", 4)),
            float(data.get("M", 1.0)),
            float(data.get("speed", 1.0)),
        )


@dataclass(frozen=True)
class OptimizationConfig:
    max_iterations: int = 20
    fd_step: float = 0.05
    initial_step: float = 0.25
    shrink: float = 0.5
    grow: float = 1.5
    restarts: int = 1
    seed: int = 0
    tolerance: float = 1e-10
    max_line_search: int = 8
    restart_seeds: tuple[int, ...] | None = None
    threads: int | None = None

    def __post_init__(self) -> None:
        if self.max_iterations < 0:
            raise ValueError(f"max_iterations must be >= 0, got {self.max_iterations}")
        for name in ("fd_step", "initial_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if not 0 < self.shrink < 1:
            raise ValueError(f"shrink must be in (0, 1), got {self.shrink}")
        if not self.grow >= 1:
            raise ValueError(f"grow must be >= 1, got {self.grow}")
        if self.restarts < 0:
            raise ValueError(f"restarts must be >= 0, got {self.restarts}")
        if not self.tolerance >= 0:
            raise ValueError(f"tolerance must be >= 0, got {self.tolerance}")
        if self.max_line_search < 1:
            raise ValueError(
                f"max_line_search must be >= 1, got {self.max_line_search}"
            )
        if self.restart_seeds is not None:
            seeds = tuple(int(s) for s in self.restart_seeds)
            object.__setattr__(self, "restart_seeds", seeds)

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> OptimizationConfig:
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown optimizer keys: {', '.join(unknown)}")
        return cls(**dict(data))

    def start_seeds(self) -> list[int | None]:
        """Seed of every random start; ``None`` marks the zero start."""
        if self.restart_seeds is not None:
            seeds: list[int] = list(self.restart_seeds)
        else:
            seeds = [self.seed + k for k in range(1, self.restarts + 1)]
        return [None, *seeds]


Control = Union[ControlGrid, NuParametrization]


@dataclass(frozen=True, eq=False)
class Evaluation:
    cost: float
    breakdown: CostBreakdown
    rho: Trajectory
    rho_curve: MeasureCurve
    nu_curve: MeasureCurve
    nu: Trajectory | None = None


def forward_cost(control: Control, scenario: Scenario) -> Evaluation:
    """Simulate under ``control`` and score the resulting curves.

    A :class:`SimulationError` is re-raised with the control attached as
    ``exc.control``.
    """
    kernels = scenario.kernels
    try:
        if isinstance(control, ControlGrid):
            if scenario.nu0 is None:
                raise ValueError("problem2 needs an initial nu population")
            rho, nu = simulate_coupled(
                scenario.rho0,
                scenario.nu0,
                kernels["K1"],
                kernels["K2"],
                kernels["H1"],
                kernels["H2"],
                control,
                scenario.domain,
                scenario.sim,
            )
            rho_curve = empirical_curve(rho, scenario.stride)
            nu_curve = empirical_curve(nu, scenario.stride)
            u: ControlGrid | None = control
        else:
            rho = simulate_driven(
                scenario.rho0,
                kernels["K1"],
                kernels["H1"],
                control.at,
                scenario.domain,
                scenario.sim,
            )
            nu = None
            rho_curve = empirical_curve(rho, scenario.stride)
            nu_curve = control.curve(rho_curve.times)
            u = None
    except SimulationError as exc:
        exc.control = control  # type: ignore[attr-defined]
        raise
    breakdown = composite_cost(scenario.cost, rho_curve, nu_curve, u)
    return Evaluation(breakdown.total, breakdown, rho, rho_curve, nu_curve, nu)


def initial_control(scenario: Scenario, mode: str) -> Control:
    """The zero start: u = 0, or nu frozen at its (projected) initial state."""
    if mode == "problem2":
        spec = scenario.control
        lo, hi = _control_box(scenario)
        return ControlGrid.zeros(
            scenario.sim.T, lo, hi, spec.shape, spec.n_intervals, spec.u_max
        )
    if mode == "problem1":
        spec_nu = scenario.nu_spec
        nu0 = (
            scenario.nu0.measure
            if scenario.nu0 is not None
            else DiscreteMeasure.empty(scenario.domain.dim)
        )
        param = NuParametrization.static(
            nu0, scenario.sim.T, spec_nu.n_intervals, spec_nu.M, spec_nu.speed
        )
        return project_nu(param)
    raise ValueError(f"mode must be one of {', '.join(MODES)}, got {mode!r}")


def _control_box(scenario: Scenario) -> tuple[np.ndarray, np.ndarray]:
    spec = scenario.control
    if spec.lo is not None and spec.hi is not None:
        return np.asarray(spec.lo), np.asarray(spec.hi)
    box = scenario.domain.box
    if not (np.all(np.isfinite(box.lo)) and np.all(np.isfinite(box.hi))):
        raise ValueError("a control grid in free space needs an explicit 'box'")
    return box.lo, box.hi


def _project(control: Control, scenario: Scenario) -> Control:
    if isinstance(control, ControlGrid):
        return project_admissible(control, control.u_max, scenario.control.temporal_cap)
    return project_nu(control)


def random_control(scenario: Scenario, mode: str, seed: int) -> Control:
    """A seeded random admissible start."""
    rng = np.random.default_rng(seed)
    start = initial_control(scenario, mode)
    if isinstance(start, ControlGrid):
        values = rng.uniform(-1.0, 1.0, start.values.shape) * start.u_max
        return _project(start.with_values(values), scenario)
    lo, hi = scenario.domain.box.lo, scenario.domain.box.hi
    extent = np.where(np.isfinite(hi - lo), hi - lo, 1.0)
    positions = start.positions + rng.normal(0.0, 0.1, start.positions.shape) * extent
    positions = np.clip(positions, lo, hi)
    weights = start.weights * rng.uniform(0.5, 1.5, start.weights.shape)
    moved = NuParametrization(start.T, positions, weights, start.M, start.speed)
    return _project(moved, scenario)


def baseline(
    scenario: Scenario, mode: str | None = None
) -> tuple[float, CostBreakdown]:
    """Cost and breakdown of the zero control."""
    zero = initial_control(scenario, mode or scenario.mode)
    evaluation = forward_cost(zero, scenario)
    return evaluation.cost, evaluation.breakdown


def nu_speed(curve: MeasureCurve) -> float:
    """Largest bounded-Lipschitz distance per unit time between snapshots."""
    speed = 0.0
    for k in range(len(curve) - 1):
        dt = float(curve.times[k + 1] - curve.times[k])
        step = bounded_lipschitz(curve.snapshots[k], curve.snapshots[k + 1])
        speed = max(speed, step / dt)
    return speed


@dataclass(frozen=True)
class ControlReport:
    ok: bool
    violations: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {"ok": self.ok, "violations": list(self.violations)}


def validate_control(
    control: Control, scenario: Scenario | None = None
) -> ControlReport:
    """Check the speed, mass and Lipschitz-in-time caps of a control."""
    problems: list[str] = []
    if isinstance(control, ControlGrid):
        norms = np.linalg.norm(control.values, axis=-1)
        worst = float(np.max(norms))
        if worst > control.u_max * (1 + 1e-9):
            problems.append(f"|u| reaches {worst!r} above u_max {control.u_max!r}")
        cap = scenario.control.temporal_cap if scenario is not None else None
        if cap is not None and control.n_intervals > 1:
            jumps = np.linalg.norm(np.diff(control.values, axis=0), axis=-1)
            largest = float(np.max(jumps))
            if largest > cap * (1 + 1e-9):
                problems.append(f"knot-to-knot jump {largest!r} above {cap!r}")
        if scenario is not None and not scenario.domain.is_free:
            box = scenario.domain.box
            if np.any(control.lo > box.lo) or np.any(control.hi < box.hi):
                problems.append("control grid does not cover the domain box")
    else:
        if np.any(control.weights < 0):
            problems.append("negative nu weight")
        masses = np.sum(control.weights, axis=1)
        if float(np.max(masses, initial=0.0)) > control.M + BL_SLACK:
            problems.append(f"nu mass {float(np.max(masses))!r} above M {control.M!r}")
        budget = control.speed * control.time_step + BL_SLACK
        for k in range(control.n_intervals):
            step = bounded_lipschitz(control.knot(k), control.knot(k + 1))
            if step > budget:
                problems.append(f"knots {k}->{k + 1} move {step!r} above {budget!r}")
    return ControlReport(not problems, tuple(problems))


@dataclass(frozen=True)
class StartSummary:
    seed: int | None
    cost: float
    iterations: int

    def to_json(self) -> dict:
        return {"cost": self.cost, "iterations": self.iterations, "seed": self.seed}


@dataclass(frozen=True, eq=False)
class OptimizationResult:
    mode: str
    control: Control
    cost: float
    breakdown: CostBreakdown
    history: tuple[float, ...]
    evaluation: Evaluation
    evaluations: int
    baseline_cost: float
    starts: tuple[StartSummary, ...] = field(default_factory=tuple)
    scenario: Scenario | None = field(default=None, repr=False)

    @property
    def improvement(self) -> float:
        """Relative decrease from the zero-control cost."""
        if self.baseline_cost == 0:
            return 0.0
        return 1.0 - self.cost / self.baseline_cost

    def to_json(self) -> dict:
        return {
            "baseline_cost": self.baseline_cost,
            "breakdown": self.breakdown.to_json(),
            "control": self.control.to_json(),
            "cost": self.cost,
            "evaluations": self.evaluations,
            "history": list(self.history),
            "improvement": self.improvement,
            "mode": self.mode,
            "nu_speed": nu_speed(self.evaluation.nu_curve),
            "starts": [s.to_json() for s in self.starts],
            "validation": validate_control(self.control, self.scenario).to_json(),
        }


class _Counter:
    def __init__(self) -> None:
        self.count = 0


def _descend(
    start: Control,
    scenario: Scenario,
    config: OptimizationConfig,
    pool: ThreadPoolExecutor,
    counter: _Counter,
) -> tuple[Control, Evaluation, list[float], int] | None:
    def score(control: Control) -> float:
        try:
            return forward_cost(control, scenario).cost
        except SimulationError as exc:
            log.info("candidate failed at t=%r: %s", exc.time, exc)
            return math.inf

    try:
        counter.count += 1
        evaluation = forward_cost(start, scenario)
    except SimulationError as exc:
        log.info("start failed at t=%r: %s", exc.time, exc)
        return None
    control, cost = start, evaluation.cost
    history = [cost]
    step = config.initial_step
    h = config.fd_step
    iterations = 0
    for iteration in range(config.max_iterations):
        x = control.vector()
        shifted_controls: list[Control] = []
        for i in range(x.shape[0]):
            for sign in (1.0, -1.0):
                shifted = x.copy()
                shifted[i] += sign * h
                shifted_controls.append(control.with_vector(shifted))
        counter.count += len(shifted_controls)
        costs = list(pool.map(score, shifted_controls))
        grad = np.zeros_like(x)
        for i in range(x.shape[0]):
            plus, minus = costs[2 * i], costs[2 * i + 1]
            if math.isfinite(plus) and math.isfinite(minus):
                grad[i] = (plus - minus) / (2 * h)
        scale = float(np.max(np.abs(grad), initial=0.0))
        if scale == 0.0:
            log.debug("iteration %d: flat finite-difference gradient", iteration)
            break
        direction = grad / scale
        accepted = False
        for _ in range(config.max_line_search):
            candidate = _project(control.with_vector(x - step * direction), scenario)
            counter.count += 1
            trial = score(candidate)
            if trial < cost - config.tolerance:
                control, cost = candidate, trial
                history.append(cost)
                step *= config.grow
                accepted = True
                log.info(
                    "iteration %d: accepted cost %r (step %r)", iteration, cost, step
                )
                break
            step *= config.shrink
        iterations = iteration + 1
        if not accepted:
            log.debug("iteration %d: line search exhausted", iteration)
            break
    counter.count += 1
    final = forward_cost(control, scenario)
    return control, final, history, iterations


def optimize(
    scenario: Scenario,
    mode: str | None = None,
    config: OptimizationConfig | None = None,
) -> OptimizationResult:
    """Projected finite-difference descent from the zero start and seeded restarts.

    The best start wins by (cost, start index), so the result is the same
    for any thread count.
    """
    mode = mode or scenario.mode
    if mode not in MODES:
        raise ValueError(f"mode must be one of {', '.join(MODES)}, got {mode!r}")
    config = config or scenario.optimizer
    counter = _Counter()
    threads = resolve_threads(config.threads)
    zero = initial_control(scenario, mode)
    best: tuple[float, int] | None = None
    best_run: tuple[Control, Evaluation, list[float]] | None = None
    summaries: list[StartSummary] = []
    baseline_cost = math.nan
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for index, seed in enumerate(config.start_seeds()):
            start = zero if seed is None else random_control(scenario, mode, seed)
            log.info("start %d (seed %s)", index, seed)
            outcome = _descend(start, scenario, config, pool, counter)
            if outcome is None:
                summaries.append(StartSummary(seed, math.inf, 0))
                continue
            control, evaluation, history, iterations = outcome
            if seed is None:
                baseline_cost = history[0]
            summaries.append(StartSummary(seed, evaluation.cost, iterations))
            key = (evaluation.cost, index)
            if best is None or key < best:
                best = key
                best_run = (control, evaluation, history)
    if best_run is None:
        raise OptimizationError(
            f"no start produced a finite evaluation in {counter.count} attempts",
            control=zero,
        )
    control, evaluation, history = best_run
    log.info(
        "best cost %r after %d evaluations (baseline %r)",
        evaluation.cost,
        counter.count,
        baseline_cost,
    )
    return OptimizationResult(
        mode=mode,
        control=control,
        cost=evaluation.cost,
        breakdown=evaluation.breakdown,
        history=tuple(history),
        evaluation=evaluation,
        evaluations=counter.count,
        baseline_cost=baseline_cost,
        starts=tuple(summaries),
        scenario=scenario,
    )
