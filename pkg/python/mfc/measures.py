"""Discrete (atomic) measures on R^d and time-sampled curves of them.

Atoms are kept as a multiset: two atoms at the same point stay separate so
that particle identity survives along a :class:`MeasureCurve`.  Use
:func:`merge_coincident` when the support is what matters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DiscreteMeasure",
    "MeasureCurve",
    "MeasureError",
    "MASS_TOL",
    "combine",
    "marginal",
    "mean",
    "merge_coincident",
    "moment",
    "push_forward",
    "support_radius",
    "total_mass",
]

MASS_TOL = 1e-12


class MeasureError(ValueError):
    """Raised for operations that are undefined on the given measure."""


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Weighted atoms ``(points[i], weights[i])`` in R^dim."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        points = np.asarray(self.points, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if points.ndim == 1:
            points = points.reshape(len(weights), -1) if len(weights) else points
        if points.ndim != 2:
            raise MeasureError(f"points must be an (n, d) array, got {points.shape}")
        if points.shape[0] != weights.shape[0]:
            raise MeasureError(
                f"got {points.shape[0]} points but {weights.shape[0]} weights"
            )
        if points.shape[1] < 1:
            raise MeasureError("atoms must have dimension d >= 1")
        if not np.all(np.isfinite(points)):
            raise MeasureError("atom coordinates must be finite")
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise MeasureError("weights must be finite and nonnegative")
        object.__setattr__(self, "points", _frozen(points))
        object.__setattr__(self, "weights", _frozen(weights))

    @classmethod
    def empty(cls, dim: int) -> DiscreteMeasure:
        return cls(np.zeros((0, dim)), np.zeros(0))

    @classmethod
    def dirac(cls, point: Sequence[float], weight: float = 1.0) -> DiscreteMeasure:
        return cls(np.atleast_2d(np.asarray(point, dtype=np.float64)), [weight])

    @classmethod
    def uniform(cls, points: np.ndarray) -> DiscreteMeasure:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = points.shape[0]
        return cls(points, np.full(n, 1.0 / n))

    @classmethod
    def from_json(cls, data: dict) -> DiscreteMeasure:
        """Build from ``{"dim": d, "atoms": [{"x": [...], "w": w}, ...]}``."""
        try:
            dim = int(data["dim"])
            atoms = list(data["atoms"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MeasureError(f"malformed measure literal: {exc}") from exc
        if not atoms:
            return cls.empty(dim)
        try:
            points = [[float(c) for c in atom["x"]] for atom in atoms]
            weights = [float(atom["w"]) for atom in atoms]
        except (KeyError, TypeError, ValueError) as exc:
            raise MeasureError(f"malformed atom in measure literal: {exc}") from exc
        if any(len(p) != dim for p in points):
            raise MeasureError(f"every atom must have {dim} coordinates")
        return cls(np.array(points), np.array(weights))

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "atoms": [
                {"x": [float(c) for c in p], "w": float(w)}
                for p, w in zip(self.points, self.weights)
            ],
        }

    @property
    def dim(self) -> int:
        return int(self.points.shape[1])

    def __len__(self) -> int:
        return int(self.weights.shape[0])

    def __repr__(self) -> str:
        return (
            f"DiscreteMeasure(n={len(self)}, dim={self.dim},"
            f" mass={total_mass(self)!r})"
        )

    def with_points(self, points: np.ndarray) -> DiscreteMeasure:
        return DiscreteMeasure(points, self.weights)

    def translated(self, offset: Sequence[float]) -> DiscreteMeasure:
        shift = np.asarray(offset, dtype=float)
        return DiscreteMeasure(self.points + shift, self.weights)


def total_mass(mu: DiscreteMeasure) -> float:
    return float(np.sum(mu.weights))


def moment(mu: DiscreteMeasure, p: float) -> float:
    """Return the p-th moment ``sum_i w_i |x_i|^p``."""
    if p < 0:
        raise MeasureError(f"moment order must be >= 0, got {p}")
    if p == 0:
        return total_mass(mu)
    norms = np.linalg.norm(mu.points, axis=1)
    return float(np.sum(mu.weights * norms**p))


def push_forward(
    mu: DiscreteMeasure, f: Callable[[np.ndarray], np.ndarray]
) -> DiscreteMeasure:
    """Image measure of ``mu`` under the point map ``f`` (applied per atom)."""
    if len(mu) == 0:
        sample = np.asarray(f(np.zeros(mu.dim)), dtype=np.float64).reshape(-1)
        return DiscreteMeasure.empty(sample.shape[0])
    images = [np.asarray(f(x), dtype=np.float64).reshape(-1) for x in mu.points]
    return DiscreteMeasure(np.vstack(images), mu.weights)


def marginal(mu: DiscreteMeasure, which: str, split: int) -> DiscreteMeasure:
    """First or second marginal of a measure on R^{split} x R^{d - split}."""
    if not 0 < split < mu.dim:
        raise MeasureError(f"split must be in 1..{mu.dim - 1}, got {split}")
    if which == "first":
        return DiscreteMeasure(mu.points[:, :split], mu.weights)
    if which == "second":
        return DiscreteMeasure(mu.points[:, split:], mu.weights)
    raise MeasureError(f"which must be 'first' or 'second', got {which!r}")


def support_radius(mu: DiscreteMeasure) -> float:
    if len(mu) == 0:
        raise MeasureError("support radius of the empty measure is undefined")
    return float(np.max(np.linalg.norm(mu.points, axis=1)))


def mean(mu: DiscreteMeasure) -> np.ndarray:
    """Mass-weighted barycenter."""
    mass = total_mass(mu)
    if mass <= 0:
        raise MeasureError("mean of a zero-mass measure is undefined")
    return mu.weights @ mu.points / mass


def merge_coincident(mu: DiscreteMeasure) -> DiscreteMeasure:
    """Collapse atoms sitting at identical points, summing their weights."""
    if len(mu) == 0:
        return mu
    unique, inverse = np.unique(mu.points, axis=0, return_inverse=True)
    weights = np.zeros(unique.shape[0])
    np.add.at(weights, np.asarray(inverse).reshape(-1), mu.weights)
    return DiscreteMeasure(unique, weights)


def combine(terms: Iterable[tuple[float, DiscreteMeasure]]) -> DiscreteMeasure:
    """Linear combination ``sum_k a_k mu_k`` with nonnegative coefficients."""
    terms = list(terms)
    if not terms:
        raise MeasureError("combine needs at least one term")
    dims = {mu.dim for _, mu in terms}
    if len(dims) != 1:
        raise MeasureError(f"cannot combine measures of dimensions {sorted(dims)}")
    points = np.vstack([mu.points for _, mu in terms])
    weights = np.concatenate([a * mu.weights for a, mu in terms])
    return DiscreteMeasure(points, weights)


@dataclass(frozen=True, eq=False)
class MeasureCurve:
    """Snapshots of a measure at strictly increasing times starting at 0."""

    times: np.ndarray
    snapshots: tuple[DiscreteMeasure, ...]

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        snapshots = tuple(self.snapshots)
        if times.shape[0] == 0 or times.shape[0] != len(snapshots):
            raise MeasureError(
                f"need one snapshot per time, got {len(snapshots)} for {times.shape[0]}"
            )
        if times[0] != 0.0:
            raise MeasureError(f"curves start at t=0, got {times[0]}")
        if np.any(np.diff(times) <= 0):
            raise MeasureError("curve times must be strictly increasing")
        if len({mu.dim for mu in snapshots}) != 1:
            raise MeasureError("all snapshots must share one dimension")
        object.__setattr__(self, "times", _frozen(times))
        object.__setattr__(self, "snapshots", snapshots)

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def dim(self) -> int:
        return self.snapshots[0].dim

    def __len__(self) -> int:
        return len(self.snapshots)

    def at(self, t: float) -> DiscreteMeasure:
        """Snapshot at the last sample time <= t."""
        index = int(np.searchsorted(self.times, t, side="right")) - 1
        return self.snapshots[max(index, 0)]

    def masses(self) -> np.ndarray:
        return np.array([total_mass(mu) for mu in self.snapshots])

    def conserves_mass(self) -> bool:
        """True when every snapshot carries bit-identical weights."""
        first = self.snapshots[0].weights
        return all(np.array_equal(first, mu.weights) for mu in self.snapshots[1:])

    @classmethod
    def static(cls, mu: DiscreteMeasure, times: Sequence[float]) -> MeasureCurve:
        return cls(np.asarray(times, dtype=float), tuple(mu for _ in times))
