"""Cost functionals on measure curves.

Every time integral is the trapezoid rule on the curve's snapshot times, so
values are exact for curves that are constant in time.  Spatial integrals
against atomic measures are exact sums over atoms.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable, Mapping, Sequence, Union

import numpy as np
from scipy.integrate import trapezoid
from scipy.spatial.distance import cdist

from .dynamics import Box, Domain
from .kernels import BoundFunction
from .measures import DiscreteMeasure, MeasureCurve, merge_coincident, total_mass
from .wasserstein import wasserstein_p

if TYPE_CHECKING:
    from .control import ControlGrid

__all__ = [
    "CompositeCost",
    "CostBreakdown",
    "CostTerm",
    "EvacuationSet",
    "FunctionalError",
    "PairKernel",
    "TERM_KINDS",
    "TermValue",
    "alignment_cost",
    "atom_count_cost",
    "composite_cost",
    "control_energy",
    "evacuation_cost",
    "interaction_cost",
    "interaction_lower_bound",
    "manpower_cost",
    "w1_terminal_cost",
    "w1_tracking_cost",
]

log = logging.getLogger(__name__)

TimeProfile = Union[BoundFunction, float, Callable[[float], float]]
PairFunction = Callable[[np.ndarray, np.ndarray], np.ndarray]


class FunctionalError(ValueError):
    """Raised for unknown cost terms or terms missing their input."""


def _in_time(curve: MeasureCurve, values: Sequence[float]) -> float:
    if len(curve) == 1:
        return 0.0
    return float(trapezoid(np.asarray(values, dtype=np.float64), curve.times))


@dataclass(frozen=True, eq=False)
class EvacuationSet:
    """Closed union of boxes; atoms on a face count as inside."""

    boxes: tuple[Box, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "boxes", tuple(self.boxes))

    @classmethod
    def from_json(cls, data: Any) -> EvacuationSet:
        """A single ``[[lo], [hi]]`` box or a list of them."""
        if not data:
            return cls()
        if np.ndim(data[0]) == 1:
            return cls((Box.from_json(data),))
        return cls(tuple(Box.from_json(b) for b in data))

    def to_json(self) -> list:
        return [b.to_json() for b in self.boxes]

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        inside = np.zeros(points.shape[0], dtype=bool)
        for box in self.boxes:
            inside |= box.contains(points)
        return inside

    def check_within(self, domain: Domain) -> None:
        for box in self.boxes:
            if np.any(box.lo < domain.box.lo) or np.any(box.hi > domain.box.hi):
                raise FunctionalError(
                    f"evacuation box {box.to_json()} leaves the domain"
                )


def _profile(c: TimeProfile) -> Callable[[float], float]:
    if isinstance(c, (int, float)):
        value = float(c)
        return lambda t: value
    return c


def manpower_cost(
    nu: MeasureCurve, c: TimeProfile, x0: Sequence[float], p: float
) -> float:
    """``int_0^T c(t) int |x - x0|^p dnu(t, x) dt``."""
    if p < 0:
        raise FunctionalError(f"p must be >= 0, got {p}")
    weight_of = _profile(c)
    anchor = np.asarray(x0, dtype=np.float64)
    values = []
    for t, mu in zip(nu.times, nu.snapshots):
        distances = np.linalg.norm(mu.points - anchor, axis=1)
        values.append(weight_of(float(t)) * float(mu.weights @ distances**p))
    return _in_time(nu, values)


def alignment_cost(rho: MeasureCurve, coords: Sequence[int]) -> float:
    """Time integral of ``int |y - m|^2 drho`` with ``m`` the rho-mean of ``y``.

    ``y`` is the point restricted to ``coords``. Snapshots without mass
    contribute zero.
    """
    coords = [int(k) for k in coords]
    if not coords or any(k < 0 or k >= rho.dim for k in coords):
        raise FunctionalError(f"coords must select from 0..{rho.dim - 1}, got {coords}")
    values = []
    for mu in rho.snapshots:
        mass = total_mass(mu)
        if mass <= 0:
            values.append(0.0)
            continue
        y = mu.points[:, coords]
        center = (mu.weights @ y) / mass
        values.append(float(mu.weights @ np.sum((y - center) ** 2, axis=1)))
    return _in_time(rho, values)


def evacuation_cost(rho: MeasureCurve, region: EvacuationSet) -> float:
    """Time integral of the rho-mass inside ``region``."""
    values = [
        float(np.sum(mu.weights[region.contains(mu.points)])) for mu in rho.snapshots
    ]
    return _in_time(rho, values)


def w1_tracking_cost(rho: MeasureCurve, target: DiscreteMeasure) -> float:
    values = [wasserstein_p(mu, target, 1.0)[0] for mu in rho.snapshots]
    return _in_time(rho, values)


def w1_terminal_cost(rho: MeasureCurve, target: DiscreteMeasure) -> float:
    return wasserstein_p(rho.snapshots[-1], target, 1.0)[0]


@dataclass(frozen=True)
class PairKernel:
    """Radial pair kernel ``Q(x, y) = q(|x - y|)``.

    ``power``: r^k.  ``neg_power``: -r^k.  ``capped_inverse_power``:
    max(r, r0)^-k.
    """

    family: str
    exponent: float = 1.0
    r0: float = 1.0

    def __post_init__(self) -> None:
        if self.family not in ("power", "neg_power", "capped_inverse_power"):
            raise FunctionalError(f"unknown pair kernel family {self.family!r}")
        if not self.exponent > 0:
            raise FunctionalError(f"exponent must be > 0, got {self.exponent}")
        if self.family == "capped_inverse_power" and not self.r0 > 0:
            raise FunctionalError(f"r0 must be > 0, got {self.r0}")

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> PairKernel:
        return cls(
            str(data.get("family", "power")),
            float(data.get("exponent", 1.0)),
            float(data.get("r0", 1.0)),
        )

    def radial(self, r: np.ndarray) -> np.ndarray:
        if self.family == "power":
            return r**self.exponent
        if self.family == "neg_power":
            return -(r**self.exponent)
        return np.maximum(r, self.r0) ** (-self.exponent)

    def __call__(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        return self.radial(cdist(xs, ys))

    def sup(self, diameter: float) -> float:
        """``sup |Q|`` over pairs at distance at most ``diameter``."""
        if self.family == "capped_inverse_power":
            return self.r0 ** (-self.exponent)
        return diameter**self.exponent


def interaction_cost(nu: MeasureCurve, Q: PairFunction) -> float:
    """Time integral of ``sum_ij w_i w_j Q(x_i, x_j)``, diagonal pairs included."""
    values = []
    for mu in nu.snapshots:
        if len(mu) == 0:
            values.append(0.0)
            continue
        values.append(float(mu.weights @ Q(mu.points, mu.points) @ mu.weights))
    return _in_time(nu, values)


def interaction_lower_bound(Q_sup: float, M: float, T: float) -> float:
    """``-sup|Q| M^2 T``, the floor of the interaction term at mass at most M."""
    return -Q_sup * M * M * T


def atom_count_cost(nu: MeasureCurve, eps: float = 0.0, merge: bool = False) -> float:
    """Time integral of the number of atoms with weight above ``eps``.

    Atoms are counted as stored.  ``merge=True`` first collapses atoms at
    the same point, which counts the support instead.
    """
    if eps < 0:
        raise FunctionalError(f"eps must be >= 0, got {eps}")
    values = []
    for mu in nu.snapshots:
        if merge:
            mu = merge_coincident(mu)
        values.append(float(np.count_nonzero(mu.weights > eps)))
    return _in_time(nu, values)


def control_energy(u: ControlGrid, p: float) -> float:
    """``int_0^T int_Omega |u|^p dx dt`` on the grid's node quadrature."""
    if p < 1:
        raise FunctionalError(f"p must be >= 1, got {p}")
    norms = np.linalg.norm(u.values, axis=-1) ** p
    per_knot = np.tensordot(norms, u.node_volumes(), axes=u.spatial_dims)
    return float(np.sum(per_knot) * u.time_step)


_RHO, _NU, _CONTROL = "rho", "nu", "u"


def _manpower(params: Mapping[str, Any]) -> tuple[str, Callable[[Any], float]]:
    c = BoundFunction.from_json(params.get("c", 1.0))
    x0 = np.asarray(params["x0"], dtype=np.float64)
    p = float(params.get("p", 1.0))
    return _NU, lambda nu: manpower_cost(nu, c, x0, p)


def _alignment(params: Mapping[str, Any]) -> tuple[str, Callable[[Any], float]]:
    coords = [int(k) for k in params.get("coords", [0])]
    return _RHO, lambda rho: alignment_cost(rho, coords)


def _evacuation(params: Mapping[str, Any]) -> tuple[str, Callable[[Any], float]]:
    region = EvacuationSet.from_json(params.get("region", []))
    return _RHO, lambda rho: evacuation_cost(rho, region)


def _w1_tracking(params: Mapping[str, Any]) -> tuple[str, Callable[[Any], float]]:
    target = DiscreteMeasure.from_json(params["target"])
    return _RHO, lambda rho: w1_tracking_cost(rho, target)


def _w1_terminal(params: Mapping[str, Any]) -> tuple[str, Callable[[Any], float]]:
    target = DiscreteMeasure.from_json(params["target"])
    return _RHO, lambda rho: w1_terminal_cost(rho, target)


def _interaction(params: Mapping[str, Any]) -> tuple[str, Callable[[Any], float]]:
    kernel = PairKernel.from_json(params)
    return _NU, lambda nu: interaction_cost(nu, kernel)


def _atom_count(params: Mapping[str, Any]) -> tuple[str, Callable[[Any], float]]:
    eps = float(params.get("eps", 0.0))
    merge = bool(params.get("merge", False))
    return _NU, lambda nu: atom_count_cost(nu, eps, merge)


def _control_energy(params: Mapping[str, Any]) -> tuple[str, Callable[[Any], float]]:
    p = float(params.get("p", 2.0))
    return _CONTROL, lambda u: control_energy(u, p)


_TERMS: dict[str, Callable[[Mapping[str, Any]], tuple[str, Callable[[Any], float]]]] = {
    "manpower": _manpower,
    "alignment": _alignment,
    "evacuation": _evacuation,
    "w1_tracking": _w1_tracking,
    "w1_terminal": _w1_terminal,
    "interaction": _interaction,
    "atom_count": _atom_count,
    "control_energy": _control_energy,
}

TERM_KINDS = tuple(_TERMS)


@dataclass(frozen=True, eq=False)
class CostTerm:
    kind: str
    weight: float = 1.0
    params: Mapping[str, Any] = field(default_factory=dict)
    label: str = ""

    def __post_init__(self) -> None:
        if self.kind not in _TERMS:
            raise FunctionalError(
                f"unknown cost term {self.kind!r};"
                f" expected one of {', '.join(TERM_KINDS)}"
            )
        weight = float(self.weight)
        if not math.isfinite(weight) or weight < 0:
            raise FunctionalError(
                f"weight of {self.kind} must be finite and >= 0, got {weight}"
            )
        try:
            population, evaluate = _TERMS[self.kind](self.params)
        except (KeyError, TypeError, ValueError) as exc:
            raise FunctionalError(f"bad parameters for {self.kind}: {exc}") from exc
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "label", self.label or self.kind)
        object.__setattr__(self, "_population", population)
        object.__setattr__(self, "_evaluate", evaluate)

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> CostTerm:
        if "kind" not in data:
            raise FunctionalError(f"cost term needs a 'kind': {dict(data)!r}")
        return cls(
            str(data["kind"]),
            float(data.get("weight", 1.0)),
            dict(data.get("params") or {}),
            str(data.get("label", "")),
        )

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "label": self.label,
            "params": dict(self.params),
            "weight": self.weight,
        }

    @property
    def population(self) -> str:
        """Which input the term reads: ``"rho"``, ``"nu"`` or ``"u"``."""
        return self._population  # type: ignore[attr-defined]

    def evaluate(
        self,
        rho: MeasureCurve | None,
        nu: MeasureCurve | None,
        u: ControlGrid | None,
    ) -> float:
        source = {_RHO: rho, _NU: nu, _CONTROL: u}[self.population]
        if source is None:
            raise FunctionalError(
                f"term {self.label!r} needs the {self.population} input"
            )
        return float(self._evaluate(source))  # type: ignore[attr-defined]


@dataclass(frozen=True, eq=False)
class CompositeCost:
    terms: tuple[CostTerm, ...]

    def __post_init__(self) -> None:
        terms = tuple(self.terms)
        if not terms:
            raise FunctionalError("a composite cost needs at least one term")
        labels = [t.label for t in terms]
        if len(set(labels)) != len(labels):
            raise FunctionalError(f"term labels must be unique, got {labels}")
        object.__setattr__(self, "terms", terms)

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> CompositeCost:
        """``{"terms": [{"kind": ..., "weight": w, "params": {...}}, ...]}``.

        Repeated kinds without an explicit label get ``kind#2``, ``kind#3`` ...
        """
        raw = data.get("terms")
        if not isinstance(raw, list):
            raise FunctionalError("cost needs a 'terms' list")
        seen: dict[str, int] = {}
        terms = []
        for item in raw:
            term = CostTerm.from_json(item)
            count = seen.get(term.label, 0) + 1
            seen[term.label] = count
            if count > 1 and not item.get("label"):
                label = f"{term.kind}#{count}"
                term = CostTerm(term.kind, term.weight, term.params, label)
            terms.append(term)
        return cls(tuple(terms))

    def to_json(self) -> dict:
        return {"terms": [t.to_json() for t in self.terms]}

    def needs(self, population: str) -> bool:
        return any(t.population == population for t in self.terms)


@dataclass(frozen=True)
class TermValue:
    label: str
    kind: str
    weight: float
    value: float

    @property
    def weighted(self) -> float:
        return self.weight * self.value


@dataclass(frozen=True)
class CostBreakdown:
    total: float
    terms: tuple[TermValue, ...]

    def to_json(self) -> dict:
        return {
            "total": self.total,
            "terms": {
                t.label: {"kind": t.kind, "value": t.value, "weight": t.weight}
                for t in self.terms
            },
        }


def composite_cost(
    cost: CompositeCost,
    rho: MeasureCurve | None = None,
    nu: MeasureCurve | None = None,
    u: ControlGrid | None = None,
) -> CostBreakdown:
    """Weighted sum of the terms, with the per-term values kept for reporting."""
    values = []
    for term in cost.terms:
        value = term.evaluate(rho, nu, u)
        log.debug("cost term %s = %r (weight %r)", term.label, value, term.weight)
        values.append(TermValue(term.label, term.kind, term.weight, value))
    total = float(sum(v.weighted for v in values))
    return CostBreakdown(total, tuple(values))
