"""Admissible vector fields: the class of fields g(t, x) with a bound ell(t).

A field is admissible for ``ell`` when, for every t, x, y,

    |g(t, x) - g(t, y)| <= ell(t) |x - y|     and     |g(t, x)| <= ell(t) (1 + |x|).

Builtins carry an analytically derived ``ell``; user fields declare one and
:func:`validate_admissibility` spot-checks it.

Analytic bounds used by the builtins:

* ``linear_attraction(a)``: K(x) = -a x.  Lip = a and |K(x)| = a|x|, so ell = a.
* ``constant_drift(c)``: Lip = 0 and |K| = |c|, so ell = |c|.
* ``power_repulsion(c, r0, power=k)``: K(x) = c x / max(|x|, r0)^(k+1).  Inside
  the core the Jacobian is c/r0^(k+1) I; outside it is
  c (I - (k+1) e e^T) / |x|^(k+1) with norm c max(1, k) / |x|^(k+1).  The
  field is continuous across |x| = r0, so Lip = c max(1, k) / r0^(k+1) and
  sup |K| = c / r0^k.
* ``morse(Ca, la, Cr, lr)``: the smooth Morse force
  K(x) = (2 Cr/lr^2 e^(-|x|^2/lr^2) - 2 Ca/la^2 e^(-|x|^2/la^2)) x.  Each
  Gaussian term a x e^(-|x|^2/l^2) has Jacobian norm <= |a| (the radial
  factor |1 - 2s| e^(-s) never exceeds 1) and modulus <= |a| l e^(-1/2)/sqrt 2.
"""

from __future__ import annotations

import bisect
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .measures import DiscreteMeasure, total_mass

__all__ = [
    "AdmissibilityReport",
    "AdmissibilityWitness",
    "AdmissibleField",
    "BUILTIN_NAMES",
    "BoundFunction",
    "KernelError",
    "builtin",
    "convolve",
    "convolve_many",
    "convolve_points",
    "custom_field",
    "field_sum",
    "from_descriptor",
    "lipschitz_convolution_gap",
    "validate_admissibility",
]

log = logging.getLogger(__name__)

ADMISSIBILITY_TOL = 1e-9

FieldFunc = Callable[[float, np.ndarray], np.ndarray]


class KernelError(ValueError):
    """Raised for unknown kernels or invalid kernel parameters."""


@dataclass(frozen=True)
class BoundFunction:
    """Piecewise-constant nonnegative ``ell(t)``.

    ``values[k]`` holds on ``[breakpoints[k-1], breakpoints[k])``; the first
    value extends to the left of the first breakpoint and the last one to the
    right of the last breakpoint.
    """

    values: tuple[float, ...]
    breakpoints: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        values = tuple(float(v) for v in self.values)
        breakpoints = tuple(float(b) for b in self.breakpoints)
        if len(values) != len(breakpoints) + 1:
            raise KernelError(
                f"need {len(breakpoints) + 1} values for {len(breakpoints)}"
                f" breakpoints, got {len(values)}"
            )
        if any(not math.isfinite(v) or v < 0 for v in values):
            raise KernelError(f"bound values must be finite and >= 0, got {values}")
        if any(b0 >= b1 for b0, b1 in zip(breakpoints, breakpoints[1:])):
            raise KernelError(
                f"breakpoints must be strictly increasing, got {breakpoints}"
            )
        if breakpoints and breakpoints[0] < 0:
            raise KernelError(f"breakpoints must be >= 0, got {breakpoints}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "breakpoints", breakpoints)

    @classmethod
    def constant(cls, value: float) -> BoundFunction:
        return cls((value,))

    @classmethod
    def from_json(cls, data: Any) -> BoundFunction:
        if isinstance(data, (int, float)):
            return cls.constant(float(data))
        try:
            return cls(tuple(data["values"]), tuple(data.get("breakpoints", ())))
        except (KeyError, TypeError) as exc:
            raise KernelError(f"malformed bound function: {data!r}") from exc

    def to_json(self) -> dict:
        return {"breakpoints": list(self.breakpoints), "values": list(self.values)}

    @property
    def kind(self) -> str:
        return "constant" if not self.breakpoints else "piecewise-constant"

    def __call__(self, t: float) -> float:
        return self.values[bisect.bisect_right(self.breakpoints, t)]

    def sup(self) -> float:
        return max(self.values)

    def integral(self, horizon: float) -> float:
        """Integral of ``ell`` over ``[0, horizon]``."""
        edges = [0.0, *[b for b in self.breakpoints if 0.0 < b < horizon], horizon]
        return float(
            sum(self((a + b) / 2) * (b - a) for a, b in zip(edges, edges[1:]))
        )

    def check_horizon(self, horizon: float) -> None:
        if self.breakpoints and self.breakpoints[-1] > horizon:
            raise KernelError(
                f"breakpoints must lie in [0, {horizon}], got {self.breakpoints}"
            )

    def _combine(self, other: BoundFunction, op: Callable[[float, float], float]):
        merged = tuple(sorted(set(self.breakpoints) | set(other.breakpoints)))
        breaks = [merged[0] - 1.0] if merged else [0.0]
        breaks += list(merged)
        return BoundFunction(tuple(op(self(t), other(t)) for t in breaks), merged)

    def __add__(self, other: BoundFunction) -> BoundFunction:
        return self._combine(other, lambda a, b: a + b)

    def __mul__(self, other: BoundFunction) -> BoundFunction:
        return self._combine(other, lambda a, b: a * b)


@dataclass(frozen=True, eq=False)
class AdmissibleField:
    """A time-dependent vector field bundled with its declared bound."""

    func: FieldFunc
    ell: BoundFunction
    dim: int
    descriptor: Mapping[str, Any] = field(default_factory=dict)

    @property
    def name(self) -> str:
        return str(self.descriptor.get("name", "custom"))

    @property
    def is_zero(self) -> bool:
        return self.name == "zero"

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            return np.asarray(self.func(t, x.reshape(1, -1)), dtype=np.float64)[0]
        if self.is_zero:
            return np.zeros_like(x)
        return np.asarray(self.func(t, x), dtype=np.float64)

    def __add__(self, other: AdmissibleField) -> AdmissibleField:
        return field_sum(self, other)


def custom_field(
    func: FieldFunc, ell: BoundFunction | float, dim: int, name: str = "custom"
) -> AdmissibleField:
    """Wrap a user callable ``func(t, X) -> V`` (rows of X are points)."""
    if not isinstance(ell, BoundFunction):
        ell = BoundFunction.constant(float(ell))
    return AdmissibleField(func, ell, dim, {"name": name})


def _param(params: Mapping[str, Any], key: str, default: Any = None) -> float:
    if key not in params:
        if default is None:
            raise KernelError(f"missing kernel parameter {key!r}")
        return float(default)
    try:
        return float(params[key])
    except (TypeError, ValueError) as exc:
        raise KernelError(f"kernel parameter {key!r} must be a number") from exc


def _nonnegative(name: str, **values: float) -> None:
    for key, value in values.items():
        if not math.isfinite(value) or value < 0:
            raise KernelError(f"{name}: {key} must be >= 0, got {value}")


def _zero(dim: int, params: Mapping[str, Any]) -> tuple[FieldFunc, float]:
    return (lambda t, x: np.zeros_like(x)), 0.0


def _linear_attraction(dim: int, params: Mapping[str, Any]) -> tuple[FieldFunc, float]:
    a = _param(params, "a", 1.0)
    _nonnegative("linear_attraction", a=a)
    return (lambda t, x: -a * x), a


def _constant_drift(dim: int, params: Mapping[str, Any]) -> tuple[FieldFunc, float]:
    raw = params.get("c")
    if raw is None:
        raise KernelError("missing kernel parameter 'c'")
    c = np.atleast_1d(np.asarray(raw, dtype=np.float64))
    if c.shape != (dim,):
        raise KernelError(
            f"constant_drift: c must have {dim} components, got {c.shape}"
        )
    if not np.all(np.isfinite(c)):
        raise KernelError("constant_drift: c must be finite")
    return (lambda t, x: np.broadcast_to(c, x.shape).copy()), float(np.linalg.norm(c))


def _power_repulsion(dim: int, params: Mapping[str, Any]) -> tuple[FieldFunc, float]:
    c = _param(params, "c")
    r0 = _param(params, "r0")
    power = _param(params, "power", 1.0)
    _nonnegative("power_repulsion", c=c, power=power)
    if not r0 > 0:
        raise KernelError(f"power_repulsion: r0 must be > 0, got {r0}")

    def func(t: float, x: np.ndarray) -> np.ndarray:
        r = np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), r0)
        return c * x / r ** (power + 1.0)

    lip = c * max(1.0, power) / r0 ** (power + 1.0)
    return func, max(lip, c / r0**power)


def _morse(dim: int, params: Mapping[str, Any]) -> tuple[FieldFunc, float]:
    ca, la = _param(params, "Ca"), _param(params, "la")
    cr, lr = _param(params, "Cr"), _param(params, "lr")
    _nonnegative("morse", Ca=ca, Cr=cr)
    if not (la > 0 and lr > 0):
        raise KernelError(f"morse: la and lr must be > 0, got la={la}, lr={lr}")
    rep, att = 2.0 * cr / lr**2, 2.0 * ca / la**2

    def func(t: float, x: np.ndarray) -> np.ndarray:
        r2 = np.sum(x * x, axis=-1, keepdims=True)
        return (rep * np.exp(-r2 / lr**2) - att * np.exp(-r2 / la**2)) * x

    lip = rep + att
    modulus = (rep * lr + att * la) * math.exp(-0.5) / math.sqrt(2.0)
    return func, max(lip, modulus)


_BUILTINS: dict[str, Callable[[int, Mapping[str, Any]], tuple[FieldFunc, float]]] = {
    "zero": _zero,
    "linear_attraction": _linear_attraction,
    "constant_drift": _constant_drift,
    "power_repulsion": _power_repulsion,
    "morse": _morse,
}

BUILTIN_NAMES = tuple(_BUILTINS)


def builtin(
    name: str,
    dim: int,
    horizon: float,
    modulation: BoundFunction | None = None,
    **params: Any,
) -> AdmissibleField:
    """Instantiate a builtin kernel family.

    ``modulation`` is an optional piecewise-constant factor s(t) >= 0 that
    multiplies both the field and its bound.
    """
    if dim < 1:
        raise KernelError(f"dim must be >= 1, got {dim}")
    try:
        factory = _BUILTINS[name]
    except KeyError:
        raise KernelError(
            f"unknown kernel {name!r}; expected one of {', '.join(BUILTIN_NAMES)}"
        ) from None
    func, lip = factory(dim, params)
    descriptor: dict[str, Any] = {"name": name, "params": dict(params)}
    ell = BoundFunction.constant(lip)
    if modulation is not None:
        modulation.check_horizon(horizon)
        base = func

        def modulated(t: float, x: np.ndarray) -> np.ndarray:
            return modulation(t) * base(t, x)

        func = modulated
        ell = ell * modulation
        descriptor["modulation"] = modulation.to_json()
    return AdmissibleField(func, ell, dim, descriptor)


def from_descriptor(
    descriptor: Mapping[str, Any], dim: int, horizon: float
) -> AdmissibleField:
    """Build a field from ``{"name": ..., "params": {...}}``.

    An ``"ell"`` entry replaces the analytic bound with a declared one, which
    is how a scenario asserts a bound that validation then checks.
    """
    if "name" not in descriptor:
        raise KernelError(f"kernel descriptor needs a 'name': {dict(descriptor)!r}")
    modulation = descriptor.get("modulation")
    kernel = builtin(
        str(descriptor["name"]),
        dim,
        horizon,
        BoundFunction.from_json(modulation) if modulation is not None else None,
        **dict(descriptor.get("params") or {}),
    )
    if "ell" in descriptor:
        declared = BoundFunction.from_json(descriptor["ell"])
        kernel = AdmissibleField(
            kernel.func, declared, dim, {**kernel.descriptor, "ell": descriptor["ell"]}
        )
    return kernel


def field_sum(f: AdmissibleField, g: AdmissibleField) -> AdmissibleField:
    """Pointwise sum; the bounds add."""
    if f.dim != g.dim:
        raise KernelError(f"cannot add fields of dimension {f.dim} and {g.dim}")
    if g.is_zero:
        return AdmissibleField(f.func, f.ell + g.ell, f.dim, f.descriptor)

    def func(t: float, x: np.ndarray) -> np.ndarray:
        return f(t, x) + g(t, x)

    descriptor = {"name": "sum", "terms": [dict(f.descriptor), dict(g.descriptor)]}
    return AdmissibleField(func, f.ell + g.ell, f.dim, descriptor)


def convolve_points(
    kernel: AdmissibleField,
    sources: np.ndarray,
    weights: np.ndarray,
    t: float,
    xs: np.ndarray,
) -> np.ndarray:
    """``sum_i weights[i] K(t, x - sources[i])`` for every row x of ``xs``."""
    if kernel.is_zero or sources.shape[0] == 0:
        return np.zeros_like(xs)
    m, n, d = xs.shape[0], sources.shape[0], xs.shape[1]
    diffs = (xs[:, None, :] - sources[None, :, :]).reshape(m * n, d)
    values = kernel(t, diffs).reshape(m, n, d)
    return np.einsum("mnd,n->md", values, weights)


def convolve_many(
    kernel: AdmissibleField, mu: DiscreteMeasure, t: float, xs: np.ndarray
) -> np.ndarray:
    """Evaluate ``(K * mu)(t, x) = sum_i w_i K(t, x - y_i)`` at every row of ``xs``."""
    xs = np.asarray(xs, dtype=np.float64)
    return convolve_points(kernel, mu.points, mu.weights, t, xs)


def convolve(
    kernel: AdmissibleField, mu: DiscreteMeasure, t: float, x: Sequence[float]
) -> np.ndarray:
    """Velocity ``(K * mu)(t, x)`` at a single point."""
    point = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return convolve_many(kernel, mu, t, point)[0]


@dataclass(frozen=True)
class AdmissibilityWitness:
    condition: str
    t: float
    x: tuple[float, ...]
    y: tuple[float, ...] | None
    ratio: float


@dataclass(frozen=True)
class AdmissibilityReport:
    ok: bool
    worst_lipschitz_ratio: float
    worst_growth_ratio: float
    witnesses: tuple[AdmissibilityWitness, ...] = ()

    def to_json(self) -> dict:
        return {
            "ok": self.ok,
            "worst_lipschitz_ratio": self.worst_lipschitz_ratio,
            "worst_growth_ratio": self.worst_growth_ratio,
            "witnesses": [
                {
                    "condition": w.condition,
                    "t": w.t,
                    "x": list(w.x),
                    "y": None if w.y is None else list(w.y),
                    "ratio": w.ratio,
                }
                for w in self.witnesses
            ],
        }


def _sample_ball(
    rng: np.random.Generator, n: int, dim: int, radius: float
) -> np.ndarray:
    directions = rng.standard_normal((n, dim))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    directions /= np.where(norms > 0, norms, 1.0)
    radii = radius * rng.uniform(0.0, 1.0, (n, 1)) ** (1.0 / dim)
    return directions * radii


def _ratio(numerator: np.ndarray, denominator: np.ndarray) -> np.ndarray:
    out = np.zeros_like(numerator)
    positive = denominator > 0
    out[positive] = numerator[positive] / denominator[positive]
    out[~positive & (numerator > 0)] = np.inf
    return out


def validate_admissibility(
    g: AdmissibleField,
    horizon: float,
    box: float,
    samples: int = 1000,
    seed: int = 0,
) -> AdmissibilityReport:
    """Monte-Carlo check of both admissibility inequalities on ``[0, T] x B(0, box)^2``.

    A failure is reported, never raised.
    """
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    rng = np.random.default_rng(seed)
    times = rng.uniform(0.0, horizon, samples)
    xs = _sample_ball(rng, samples, g.dim, box)
    ys = _sample_ball(rng, samples, g.dim, box)
    gx = np.empty_like(xs)
    gy = np.empty_like(ys)
    bound = np.empty(samples)
    for k, t in enumerate(times):
        values = g(float(t), np.vstack([xs[k], ys[k]]))
        gx[k], gy[k] = values[0], values[1]
        bound[k] = g.ell(float(t))

    lip = _ratio(
        np.linalg.norm(gx - gy, axis=1), bound * np.linalg.norm(xs - ys, axis=1)
    )
    growth_x = _ratio(
        np.linalg.norm(gx, axis=1), bound * (1 + np.linalg.norm(xs, axis=1))
    )
    growth_y = _ratio(
        np.linalg.norm(gy, axis=1), bound * (1 + np.linalg.norm(ys, axis=1))
    )
    growth = np.maximum(growth_x, growth_y)

    worst_lip, worst_growth = int(np.argmax(lip)), int(np.argmax(growth))
    witnesses = []
    if lip[worst_lip] > 1 + ADMISSIBILITY_TOL:
        witnesses.append(
            AdmissibilityWitness(
                "lipschitz",
                float(times[worst_lip]),
                tuple(map(float, xs[worst_lip])),
                tuple(map(float, ys[worst_lip])),
                float(lip[worst_lip]),
            )
        )
    if growth[worst_growth] > 1 + ADMISSIBILITY_TOL:
        at_x = growth_x[worst_growth] >= growth_y[worst_growth]
        point = xs[worst_growth] if at_x else ys[worst_growth]
        witnesses.append(
            AdmissibilityWitness(
                "growth",
                float(times[worst_growth]),
                tuple(map(float, point)),
                None,
                float(growth[worst_growth]),
            )
        )
    report = AdmissibilityReport(
        ok=not witnesses,
        worst_lipschitz_ratio=float(lip[worst_lip]),
        worst_growth_ratio=float(growth[worst_growth]),
        witnesses=tuple(witnesses),
    )
    if not report.ok:
        log.info("field %s failed admissibility: %s", g.name, report.witnesses)
    return report


def lipschitz_convolution_gap(
    kernel: AdmissibleField,
    mu1: DiscreteMeasure,
    mu2: DiscreteMeasure,
    t: float,
    points: np.ndarray,
) -> tuple[float, float]:
    """Return ``(sup_points |K*mu1 - K*mu2|, ell(t) * mass * W1(mu1, mu2))``."""
    from .wasserstein import wasserstein_p

    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    diff = convolve_many(kernel, mu1, t, points) - convolve_many(kernel, mu2, t, points)
    gap = float(np.max(np.linalg.norm(diff, axis=1)))
    distance, _ = wasserstein_p(mu1, mu2, 1.0)
    return gap, kernel.ell(t) * total_mass(mu1) * distance
