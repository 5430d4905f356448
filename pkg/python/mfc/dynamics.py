"""Particle systems driven by convolution fields, and checks on their output.

A population is a set of weighted particles.  Each particle moves with the
velocity ``sum_j w_j K(t, x_i - x_j) + f(t, x_i)``.  The sum includes the
self-term ``K(t, 0)``, which vanishes for every builtin kernel.  Two
populations (rho, nu) couple through the cross kernels in
:func:`simulate_coupled`.

Walls and obstacles act on velocities.  Within ``boundary_tolerance`` of a
face, the component pushing through the face is removed.  A particle that
still escapes during a step is clamped back to the nearest feasible point,
and the event is counted on the :class:`Trajectory`.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping, Sequence

import numpy as np
from scipy.integrate import trapezoid

from .artifacts import write_text_atomic
from .kernels import AdmissibleField, BoundFunction, convolve_many, convolve_points
from .measures import DiscreteMeasure, MeasureCurve
from .wasserstein import wasserstein_p

__all__ = [
    "Box",
    "ConvergenceRow",
    "ConvergenceTable",
    "Domain",
    "ParticleState",
    "SimConfig",
    "SimulationError",
    "SpaceTimeTestFunction",
    "Trajectory",
    "apply_boundary",
    "convergence_study",
    "curve_csv",
    "driven_velocity",
    "empirical_curve",
    "field_velocity",
    "fixed_sampler",
    "gaussian_sampler",
    "lipschitz_constant_L",
    "max_step_displacement",
    "mean_field_velocity",
    "rhs_single",
    "simulate_coupled",
    "simulate_driven",
    "simulate_single",
    "standard_test_functions",
    "support_bound_R",
    "time_lipschitz_excess",
    "trajectory_csv",
    "uniform_sampler",
    "weak_residual",
    "write_trajectory_csv",
]

log = logging.getLogger(__name__)

VelocityField = Callable[[float, np.ndarray], np.ndarray]
MeasureVelocity = Callable[[float, DiscreteMeasure], np.ndarray]
Sampler = Callable[[int, np.random.Generator], "ParticleState"]

_PROBABILITY_TOL = 1e-9
_ENDPOINT_TOL = 1e-9


class SimulationError(RuntimeError):
    """A step produced a state the integrator cannot recover from."""

    def __init__(
        self, message: str, *, time: float, positions: np.ndarray | None = None
    ) -> None:
        super().__init__(message)
        self.time = time
        self.positions = positions


@dataclass(frozen=True, eq=False)
class Box:
    """Closed axis-aligned box ``[lo, hi]``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self) -> None:
        lo = np.asarray(self.lo, dtype=np.float64).reshape(-1)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(-1)
        if lo.shape != hi.shape or lo.size == 0:
            raise ValueError(
                f"box corners must share a shape, got {lo.shape}, {hi.shape}"
            )
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)) or np.any(lo >= hi):
            raise ValueError(f"box needs lo < hi per coordinate, got {lo} and {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def from_json(cls, data: Any) -> Box:
        try:
            lo, hi = data
        except (TypeError, ValueError) as exc:
            raise ValueError(f"box must be [[lo...], [hi...]], got {data!r}") from exc
        return cls(np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))

    def to_json(self) -> list[list[float]]:
        return [[float(v) for v in self.lo], [float(v) for v in self.hi]]

    @property
    def dim(self) -> int:
        return int(self.lo.shape[0])

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.all((points >= self.lo) & (points <= self.hi), axis=1)

    def interior(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.all((points > self.lo) & (points < self.hi), axis=1)

    def disjoint(self, other: Box) -> bool:
        return bool(np.any((self.hi < other.lo) | (other.hi < self.lo)))


@dataclass(frozen=True, eq=False)
class Domain:
    """A box with optional box-shaped obstacles strictly inside it."""

    box: Box
    obstacles: tuple[Box, ...] = ()

    def __post_init__(self) -> None:
        obstacles = tuple(self.obstacles)
        for k, obstacle in enumerate(obstacles):
            if obstacle.dim != self.box.dim:
                raise ValueError(f"obstacle {k} has dimension {obstacle.dim}")
            if np.any(obstacle.lo <= self.box.lo) or np.any(obstacle.hi >= self.box.hi):
                raise ValueError(f"obstacle {k} must lie strictly inside the box")
            for j in range(k):
                if not obstacle.disjoint(obstacles[j]):
                    raise ValueError(f"obstacles {j} and {k} overlap")
        object.__setattr__(self, "obstacles", obstacles)

    @classmethod
    def free(cls, dim: int) -> Domain:
        return cls(Box(np.full(dim, -np.inf), np.full(dim, np.inf)))

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> Domain:
        """Parse ``{"box": [[lo], [hi]], "obstacles": [...]}``.

        ``{"free": true, "dim": d}`` gives the whole of R^d.
        """
        if data.get("free"):
            return cls.free(int(data["dim"]))
        obstacles = tuple(Box.from_json(o) for o in data.get("obstacles", ()))
        return cls(Box.from_json(data["box"]), obstacles)

    def to_json(self) -> dict:
        if self.is_free:
            return {"free": True, "dim": self.dim}
        return {
            "box": self.box.to_json(),
            "obstacles": [o.to_json() for o in self.obstacles],
        }

    @property
    def dim(self) -> int:
        return self.box.dim

    @property
    def is_free(self) -> bool:
        return not self.obstacles and not np.any(np.isfinite(self.box.lo))

    @property
    def radius(self) -> float:
        """Largest norm of a point of the box (inf in free space)."""
        corner = np.maximum(np.abs(self.box.lo), np.abs(self.box.hi))
        return float(np.linalg.norm(corner))

    def contains(self, points: np.ndarray) -> np.ndarray:
        inside = self.box.contains(points)
        for obstacle in self.obstacles:
            inside &= ~obstacle.interior(points)
        return inside


@dataclass(frozen=True, eq=False)
class ParticleState:
    time: float
    positions: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        positions = np.array(self.positions, dtype=np.float64, ndmin=2)
        weights = np.array(self.weights, dtype=np.float64).reshape(-1)
        if positions.shape[0] < 1 or positions.shape[0] != weights.shape[0]:
            raise ValueError(
                f"need N >= 1 particles with one weight each, got"
                f" {positions.shape[0]} positions and {weights.shape[0]} weights"
            )
        if not np.all(np.isfinite(positions)):
            raise ValueError("particle positions must be finite")
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise ValueError("particle weights must be finite and nonnegative")
        object.__setattr__(self, "time", float(self.time))
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_measure(cls, mu: DiscreteMeasure, time: float = 0.0) -> ParticleState:
        return cls(time, np.array(mu.points), np.array(mu.weights))

    @property
    def measure(self) -> DiscreteMeasure:
        return DiscreteMeasure(self.positions, self.weights)

    @property
    def dim(self) -> int:
        return int(self.positions.shape[1])

    def __len__(self) -> int:
        return int(self.positions.shape[0])


@dataclass(frozen=True)
class SimConfig:
    dt: float
    T: float
    integrator: str = "rk4"
    boundary_tolerance: float = 1e-9

    def __post_init__(self) -> None:
        if not (math.isfinite(self.T) and self.T > 0):
            raise ValueError(f"T must be > 0, got {self.T}")
        if not (self.dt > 0 and self.dt <= self.T):
            raise ValueError(f"dt must be in (0, T], got {self.dt}")
        if self.integrator not in ("euler", "rk4"):
            raise ValueError(
                f"integrator must be 'euler' or 'rk4', got {self.integrator!r}"
            )
        if not self.boundary_tolerance >= 0:
            raise ValueError(
                f"boundary_tolerance must be >= 0, got {self.boundary_tolerance}"
            )
        n = round(self.T / self.dt)
        if abs(n * self.dt - self.T) > 1e-9 * max(1.0, self.T):
            raise ValueError(
                f"T must be a multiple of dt, got T={self.T}, dt={self.dt}"
            )

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> SimConfig:
        return cls(
            dt=float(data["dt"]),
            T=float(data["T"]),
            integrator=str(data.get("integrator", "rk4")),
            boundary_tolerance=float(data.get("boundary_tolerance", 1e-9)),
        )

    def to_json(self) -> dict:
        return {
            "T": self.T,
            "boundary_tolerance": self.boundary_tolerance,
            "dt": self.dt,
            "integrator": self.integrator,
        }

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def step(self) -> float:
        return self.T / self.n_steps

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def with_dt(self, dt: float) -> SimConfig:
        return SimConfig(dt, self.T, self.integrator, self.boundary_tolerance)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Positions of a fixed set of particles on a uniform time grid."""

    times: np.ndarray
    positions: np.ndarray
    weights: np.ndarray
    clamp_events: int = 0

    @property
    def n_steps(self) -> int:
        return int(self.times.shape[0]) - 1

    @property
    def dim(self) -> int:
        return int(self.positions.shape[2])

    def __len__(self) -> int:
        return int(self.positions.shape[1])

    def state(self, k: int) -> ParticleState:
        return ParticleState(self.times[k], self.positions[k], self.weights)

    def states(self) -> Iterator[ParticleState]:
        for k in range(self.times.shape[0]):
            yield self.state(k)

    def measure(self, k: int) -> DiscreteMeasure:
        return DiscreteMeasure(self.positions[k], self.weights)

    @property
    def final(self) -> ParticleState:
        return self.state(self.n_steps)


def _check_probability(weights: np.ndarray) -> None:
    total = float(np.sum(weights))
    if abs(total - 1.0) > _PROBABILITY_TOL:
        raise ValueError(f"weights must sum to 1, got {total!r}")


def rhs_single(
    t: float, state: ParticleState, K: AdmissibleField, f: VelocityField
) -> np.ndarray:
    """Velocities ``sum_j w_j K(t, x_i - x_j) + f(t, x_i)`` of every particle."""
    _check_probability(state.weights)
    x = state.positions
    return convolve_points(K, x, state.weights, t, x) + f(t, x)


def _project_velocities(
    positions: np.ndarray, velocities: np.ndarray, domain: Domain, tol: float
) -> np.ndarray:
    if domain.is_free:
        return velocities
    v = velocities.copy()
    lo, hi = domain.box.lo, domain.box.hi
    v[(positions >= hi - tol) & (v > 0)] = 0.0
    v[(positions <= lo + tol) & (v < 0)] = 0.0
    for obstacle in domain.obstacles:
        near = np.all(
            (positions >= obstacle.lo - tol) & (positions <= obstacle.hi + tol), axis=1
        )
        if not near.any():
            continue
        band = near[:, None]
        # the obstacle's lo face is a wall whose outward normal points along +e_k
        on_lo = band & (np.abs(positions - obstacle.lo) <= tol)
        on_hi = band & (np.abs(positions - obstacle.hi) <= tol)
        v[on_lo & (v > 0)] = 0.0
        v[on_hi & (v < 0)] = 0.0
    return v


def apply_boundary(
    position: Sequence[float],
    velocity: Sequence[float],
    domain: Domain,
    tolerance: float = 1e-9,
) -> np.ndarray:
    """Drop the outgoing normal component of ``velocity`` at walls near ``position``."""
    x = np.asarray(position, dtype=np.float64).reshape(1, -1)
    v = np.asarray(velocity, dtype=np.float64).reshape(1, -1)
    return _project_velocities(x, v, domain, tolerance)[0]


def _clamp(positions: np.ndarray, domain: Domain) -> tuple[np.ndarray, int]:
    if domain.is_free:
        return positions, 0
    clamped = np.clip(positions, domain.box.lo, domain.box.hi)
    moved = np.any(clamped != positions, axis=1)
    for obstacle in domain.obstacles:
        inside = obstacle.interior(clamped)
        if not inside.any():
            continue
        pts = clamped[inside]
        to_lo, to_hi = pts - obstacle.lo, obstacle.hi - pts
        gaps = np.concatenate([to_lo, to_hi], axis=1)
        nearest = np.argmin(gaps, axis=1)
        d = obstacle.dim
        rows = np.arange(pts.shape[0])
        coord = nearest % d
        pts[rows, coord] = np.where(
            nearest < d, obstacle.lo[coord], obstacle.hi[coord]
        )
        clamped[inside] = pts
        moved |= inside
    return clamped, int(np.count_nonzero(moved))


_Populations = tuple[np.ndarray, ...]


def _integrate(
    initial: _Populations,
    velocity: Callable[[float, _Populations], _Populations],
    domain: Domain,
    config: SimConfig,
) -> tuple[np.ndarray, list[np.ndarray], list[int]]:
    times = config.times()
    h = config.step
    tol = config.boundary_tolerance

    def projected(t: float, ys: _Populations) -> _Populations:
        raw = velocity(t, ys)
        return tuple(_project_velocities(y, v, domain, tol) for y, v in zip(ys, raw))

    def shifted(ys: _Populations, ks: _Populations, scale: float) -> _Populations:
        return tuple(y + scale * k for y, k in zip(ys, ks))

    history = [np.empty((times.shape[0], *y.shape)) for y in initial]
    for slot, y in zip(history, initial):
        slot[0] = y
    clamp_events = [0 for _ in initial]
    ys = tuple(np.array(y, dtype=np.float64) for y in initial)
    for s in range(config.n_steps):
        t = float(times[s])
        k1 = projected(t, ys)
        if config.integrator == "euler":
            stepped = shifted(ys, k1, h)
        else:
            k2 = projected(t + h / 2, shifted(ys, k1, h / 2))
            k3 = projected(t + h / 2, shifted(ys, k2, h / 2))
            k4 = projected(t + h, shifted(ys, k3, h))
            stepped = tuple(
                y + (h / 6) * (a + 2 * b + 2 * c + d)
                for y, a, b, c, d in zip(ys, k1, k2, k3, k4)
            )
        next_ys = []
        for p, y in enumerate(stepped):
            if not np.all(np.isfinite(y)):
                raise SimulationError(
                    f"non-finite particle position after step {s + 1}",
                    time=float(times[s + 1]),
                    positions=np.array(ys[p]),
                )
            y, events = _clamp(y, domain)
            clamp_events[p] += events
            history[p][s + 1] = y
            next_ys.append(y)
        ys = tuple(next_ys)
    for p, events in enumerate(clamp_events):
        if events:
            log.warning("population %d: %d boundary clamp events", p, events)
    return times, history, clamp_events


def _check_initial(state: ParticleState, domain: Domain, label: str) -> None:
    if state.dim != domain.dim:
        raise ValueError(f"{label} has dimension {state.dim}, domain has {domain.dim}")
    if not np.all(domain.contains(state.positions)):
        raise ValueError(f"{label} has particles outside the domain")


def simulate_single(
    initial: ParticleState,
    K: AdmissibleField,
    f: VelocityField,
    domain: Domain,
    config: SimConfig,
) -> Trajectory:
    """Integrate one population from ``initial`` (taken at t = 0) up to ``config.T``."""
    _check_initial(initial, domain, "initial state")
    weights = initial.weights

    def velocity(t: float, ys: _Populations) -> _Populations:
        (x,) = ys
        return (convolve_points(K, x, weights, t, x) + f(t, x),)

    log.debug(
        "simulating %d particles over %d %s steps",
        len(initial),
        config.n_steps,
        config.integrator,
    )
    times, (positions,), (events,) = _integrate(
        (initial.positions,), velocity, domain, config
    )
    return Trajectory(times, positions, weights.copy(), events)


def simulate_coupled(
    rho0: ParticleState,
    nu0: ParticleState,
    K1: AdmissibleField,
    K2: AdmissibleField,
    H1: AdmissibleField,
    H2: AdmissibleField,
    u: VelocityField,
    domain: Domain,
    config: SimConfig,
) -> tuple[Trajectory, Trajectory]:
    """Integrate the pair of populations.

    rho moves under ``K1*rho + H1*nu`` and nu under ``K2*rho + H2*nu + u``.
    """
    _check_initial(rho0, domain, "rho0")
    _check_initial(nu0, domain, "nu0")
    wr, wn = rho0.weights, nu0.weights

    def velocity(t: float, ys: _Populations) -> _Populations:
        xr, xn = ys
        vr = convolve_points(K1, xr, wr, t, xr) + convolve_points(H1, xn, wn, t, xr)
        vn = (
            convolve_points(K2, xr, wr, t, xn)
            + convolve_points(H2, xn, wn, t, xn)
            + u(t, xn)
        )
        return vr, vn

    log.debug(
        "simulating coupled populations (%d, %d) over %d steps",
        len(rho0),
        len(nu0),
        config.n_steps,
    )
    times, (xr, xn), (er, en) = _integrate(
        (rho0.positions, nu0.positions), velocity, domain, config
    )
    return Trajectory(times, xr, wr.copy(), er), Trajectory(times, xn, wn.copy(), en)


def simulate_driven(
    rho0: ParticleState,
    K: AdmissibleField,
    H: AdmissibleField,
    nu_at: Callable[[float], DiscreteMeasure],
    domain: Domain,
    config: SimConfig,
) -> Trajectory:
    """Integrate rho under ``K*rho + H*nu(t)`` for a prescribed curve ``nu_at``."""

    def drive(t: float, x: np.ndarray) -> np.ndarray:
        nu = nu_at(t)
        return convolve_points(H, nu.points, nu.weights, t, x)

    return simulate_single(rho0, K, drive, domain, config)


def empirical_curve(traj: Trajectory, stride: int = 1) -> MeasureCurve:
    """Snapshots every ``stride`` steps; the final time is always included."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    indices = list(range(0, traj.n_steps + 1, stride))
    if indices[-1] != traj.n_steps:
        indices.append(traj.n_steps)
    return MeasureCurve(
        traj.times[indices], tuple(traj.measure(k) for k in indices)
    )


def _as_bound(ell: BoundFunction | float) -> BoundFunction:
    return ell if isinstance(ell, BoundFunction) else BoundFunction.constant(ell)


def support_bound_R(deltaB: float, ell: BoundFunction | float, T: float) -> float:
    """Radius ``(deltaB + 2 I) exp(3 I)`` with ``I`` the integral of ell over [0, T]."""
    if deltaB < 0:
        raise ValueError(f"deltaB must be >= 0, got {deltaB}")
    integral = _as_bound(ell).integral(T)
    return (deltaB + 2.0 * integral) * math.exp(3.0 * integral)


def lipschitz_constant_L(R: float, ell_sup: float) -> float:
    if R < 0 or ell_sup < 0:
        raise ValueError(f"R and ell_sup must be >= 0, got R={R}, ell_sup={ell_sup}")
    return (2.0 + 3.0 * R) * ell_sup


def max_step_displacement(traj: Trajectory) -> float:
    if traj.n_steps == 0:
        return 0.0
    steps = np.linalg.norm(np.diff(traj.positions, axis=0), axis=2)
    return float(np.max(steps))


def time_lipschitz_excess(curve: MeasureCurve, L: float) -> float:
    """Worst ``W1(mu_s, mu_t) - L |t - s|`` over snapshot pairs."""
    worst = -math.inf
    for i in range(len(curve)):
        for j in range(i + 1, len(curve)):
            distance, _ = wasserstein_p(curve.snapshots[i], curve.snapshots[j], 1.0)
            worst = max(worst, distance - L * float(curve.times[j] - curve.times[i]))
    return worst if math.isfinite(worst) else 0.0


def mean_field_velocity(K: AdmissibleField, f: VelocityField) -> MeasureVelocity:
    """Velocity ``(K*mu)(t, x) + f(t, x)`` at the atoms of ``mu``."""

    def velocity(t: float, mu: DiscreteMeasure) -> np.ndarray:
        return convolve_many(K, mu, t, mu.points) + f(t, mu.points)

    return velocity


def driven_velocity(
    K: AdmissibleField, H: AdmissibleField, other: MeasureCurve
) -> MeasureVelocity:
    """Velocity ``(K*mu)(t) + (H*other(t))`` for a population coupled to ``other``."""

    def velocity(t: float, mu: DiscreteMeasure) -> np.ndarray:
        return convolve_many(K, mu, t, mu.points) + convolve_many(
            H, other.at(t), t, mu.points
        )

    return velocity


def field_velocity(g: VelocityField) -> MeasureVelocity:
    return lambda t, mu: g(t, mu.points)


@dataclass(frozen=True)
class SpaceTimeTestFunction:
    """Smooth ``phi(t, x)`` with its time derivative and spatial gradient.

    Each callable takes ``(t, X)`` with points as rows; ``phi`` and
    ``dphi_dt`` return shape (N,), ``grad_phi`` returns (N, d).
    """

    phi: Callable[[float, np.ndarray], np.ndarray]
    dphi_dt: Callable[[float, np.ndarray], np.ndarray]
    grad_phi: Callable[[float, np.ndarray], np.ndarray]
    name: str = "phi"


def standard_test_functions(
    T: float,
    dim: int,
    center: Sequence[float] | None = None,
    scale: float = 1.0,
    modes: Sequence[int] = (1, 2),
) -> list[SpaceTimeTestFunction]:
    """``sin(k pi t / T)`` times a Gaussian bump or ``x_0`` times the bump."""
    c = np.zeros(dim) if center is None else np.asarray(center, dtype=np.float64)
    s2 = scale * scale

    def bump(x: np.ndarray) -> np.ndarray:
        return np.exp(-np.sum((x - c) ** 2, axis=1) / (2.0 * s2))

    def bump_grad(x: np.ndarray) -> np.ndarray:
        return -(x - c) / s2 * bump(x)[:, None]

    def linear(x: np.ndarray) -> np.ndarray:
        return (x[:, 0] - c[0]) * bump(x)

    def linear_grad(x: np.ndarray) -> np.ndarray:
        grad = (x[:, 0] - c[0])[:, None] * bump_grad(x)
        grad[:, 0] += bump(x)
        return grad

    profiles = (("gauss", bump, bump_grad), ("x0-gauss", linear, linear_grad))
    battery = []
    for k in modes:
        omega = k * math.pi / T
        for label, psi, dpsi in profiles:
            battery.append(
                SpaceTimeTestFunction(
                    phi=lambda t, x, w=omega, g=psi: math.sin(w * t) * g(x),
                    dphi_dt=lambda t, x, w=omega, g=psi: w * math.cos(w * t) * g(x),
                    grad_phi=lambda t, x, w=omega, g=dpsi: math.sin(w * t) * g(x),
                    name=f"sin{k}-{label}",
                )
            )
    return battery


def weak_residual(
    curve: MeasureCurve, velocity: MeasureVelocity, testfn: SpaceTimeTestFunction
) -> float:
    """Trapezoid value of ``int_0^T sum_i w_i (dphi/dt + v . grad phi)(t, x_i) dt``."""
    first, last = curve.snapshots[0], curve.snapshots[-1]
    for t, mu in ((0.0, first), (curve.horizon, last)):
        edge = np.asarray(testfn.phi(t, mu.points))
        if edge.size and float(np.max(np.abs(edge))) > _ENDPOINT_TOL:
            raise ValueError(f"test function {testfn.name} must vanish at t={t}")
    integrand = np.empty(len(curve))
    for k, (t, mu) in enumerate(zip(curve.times, curve.snapshots)):
        t = float(t)
        v = np.asarray(velocity(t, mu))
        local = testfn.dphi_dt(t, mu.points) + np.sum(
            v * testfn.grad_phi(t, mu.points), axis=1
        )
        integrand[k] = float(mu.weights @ local)
    return float(trapezoid(integrand, curve.times))


def uniform_sampler(lo: Sequence[float], hi: Sequence[float]) -> Sampler:
    lo_arr, hi_arr = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)

    def sample(n: int, rng: np.random.Generator) -> ParticleState:
        points = rng.uniform(lo_arr, hi_arr, size=(n, lo_arr.shape[0]))
        return ParticleState(0.0, points, np.full(n, 1.0 / n))

    return sample


def gaussian_sampler(mean: Sequence[float], std: float | Sequence[float]) -> Sampler:
    mean_arr = np.asarray(mean, dtype=float)
    std_arr = np.broadcast_to(np.asarray(std, dtype=float), mean_arr.shape)

    def sample(n: int, rng: np.random.Generator) -> ParticleState:
        points = rng.normal(mean_arr, std_arr, size=(n, mean_arr.shape[0]))
        return ParticleState(0.0, points, np.full(n, 1.0 / n))

    return sample


def fixed_sampler(state: ParticleState) -> Sampler:
    """Ignore ``n`` and the generator; every draw is ``state``."""
    return lambda n, rng: state


@dataclass(frozen=True)
class ConvergenceRow:
    N: int
    replicate: int
    sup_t_w1: float


@dataclass(frozen=True)
class ConvergenceTable:
    rows: tuple[ConvergenceRow, ...]

    def medians(self) -> dict[int, float]:
        by_n: dict[int, list[float]] = {}
        for row in self.rows:
            by_n.setdefault(row.N, []).append(row.sup_t_w1)
        return {n: float(np.median(values)) for n, values in by_n.items()}

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["N", "replicate", "sup_t_W1"])
        for row in self.rows:
            writer.writerow([row.N, row.replicate, repr(row.sup_t_w1)])
        return buffer.getvalue()


def convergence_study(
    sampler: Sampler,
    K: AdmissibleField,
    f: VelocityField,
    Ns: Sequence[int],
    config: SimConfig,
    *,
    replicates: int = 10,
    seed: int = 0,
    domain: Domain | None = None,
    stride: int = 1,
    threads: int = 1,
) -> ConvergenceTable:
    """``sup_t W1(rho^N(t), rho^Nmax(t))`` per particle count and replicate.

    Every (replicate, N) pair draws from its own generator seeded with
    ``[seed, replicate, N]``, so coarse states are fresh draws rather than
    subsamples of the reference.
    """
    Ns = [int(n) for n in Ns]
    if not Ns or Ns[0] < 1 or any(a >= b for a, b in zip(Ns, Ns[1:])):
        raise ValueError(f"Ns must be strictly increasing and >= 1, got {Ns}")
    if replicates < 1:
        raise ValueError(f"replicates must be >= 1, got {replicates}")
    if replicates == 1:
        log.warning("convergence study with a single replicate has a trivial median")
    n_max = Ns[-1]

    def run(n: int, replicate: int) -> MeasureCurve:
        state = sampler(n, np.random.default_rng([seed, replicate, n]))
        space = domain if domain is not None else Domain.free(state.dim)
        return empirical_curve(simulate_single(state, K, f, space, config), stride)

    def replicate_rows(replicate: int) -> list[ConvergenceRow]:
        reference = run(n_max, replicate)
        rows = []
        for n in Ns:
            if n == n_max:
                rows.append(ConvergenceRow(n, replicate, 0.0))
                continue
            curve = run(n, replicate)
            sup = max(
                wasserstein_p(a, b, 1.0)[0]
                for a, b in zip(curve.snapshots, reference.snapshots)
            )
            rows.append(ConvergenceRow(n, replicate, float(sup)))
            log.debug("replicate %d, N=%d: sup_t W1 = %r", replicate, n, sup)
        return rows

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        per_replicate = list(pool.map(replicate_rows, range(replicates)))
    rows = sorted(
        (row for chunk in per_replicate for row in chunk),
        key=lambda row: (Ns.index(row.N), row.replicate),
    )
    return ConvergenceTable(tuple(rows))


def _frames_csv(
    dim: int, frames: Iterator[tuple[float, np.ndarray, np.ndarray]]
) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["t", "particle_id", *(f"x{k}" for k in range(dim)), "w"])
    for t, points, weights in frames:
        for i, (x, w) in enumerate(zip(points, weights)):
            writer.writerow(
                [repr(float(t)), i, *(repr(float(c)) for c in x), repr(float(w))]
            )
    return buffer.getvalue()


def trajectory_csv(traj: Trajectory) -> str:
    """CSV text with one ``t, particle_id, x0..x{d-1}, w`` row per (time, particle)."""
    frames = ((t, frame, traj.weights) for t, frame in zip(traj.times, traj.positions))
    return _frames_csv(traj.dim, frames)


def curve_csv(curve: MeasureCurve) -> str:
    """Same layout as :func:`trajectory_csv`, with per-snapshot weights."""
    frames = ((t, mu.points, mu.weights) for t, mu in zip(curve.times, curve.snapshots))
    return _frames_csv(curve.dim, frames)


def write_trajectory_csv(traj: Trajectory, path: str | Path) -> Path:
    return write_text_atomic(path, trajectory_csv(traj))
