"""Closed-loop simulation: integrators, observation schedules, perturbations.

Rollouts integrate the commanded velocity field from an initial state,
swapping the observed payload according to a schedule and applying
instantaneous displacement perturbations. The squared attractor distance is
recorded at every step so monotonic decrease can be audited after the fact.
External forces on a physical plant are modeled here as instantaneous state
displacements, since the policy commands velocity directly.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .core import MaterializedPolicy, PolicyParams
from .errors import RolloutDivergedError, ValidationError
from .state import StateVector, validate_payload

CONVERGENCE_TOL = 1e-4
CONVERGENCE_WINDOW = 10
LYAPUNOV_SLACK = 1e-10
_TIME_EPS = 1e-12


@dataclass(frozen=True)
class PerturbationEvent:
    """Instantaneous displacement of the controllable state at a given time."""

    time: float
    delta: np.ndarray

    def __post_init__(self):
        if not (self.time >= 0) or not np.isfinite(self.time):
            raise ValidationError(f"perturbation time must be >= 0, got {self.time}")
        delta = np.asarray(self.delta, dtype=float)
        if delta.ndim != 1 or not np.all(np.isfinite(delta)):
            raise ValidationError("perturbation delta must be a finite vector")
        object.__setattr__(self, "delta", delta)


@dataclass(frozen=True)
class ObservationProvider:
    """Payload source: a static payload or a schedule of timed switches."""

    kind: str
    schedule: tuple

    @staticmethod
    def static(payload) -> "ObservationProvider":
        return ObservationProvider("static", ((0.0, np.asarray(payload, dtype=float)),))

    @staticmethod
    def scheduled(entries) -> "ObservationProvider":
        entries = [(float(t), np.asarray(p, dtype=float)) for t, p in entries]
        if not entries:
            raise ValidationError("schedule must contain at least one entry")
        if entries[0][0] != 0.0:
            raise ValidationError("the first scheduled payload must start at t=0")
        times = [t for t, _ in entries]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValidationError("switch times must be strictly increasing")
        return ObservationProvider("scheduled", tuple(entries))

    def index_at(self, t: float) -> int:
        idx = 0
        for k, (st, _) in enumerate(self.schedule):
            if st <= t + _TIME_EPS:
                idx = k
            else:
                break
        return idx

    def payload_at(self, t: float) -> np.ndarray:
        return self.schedule[self.index_at(t)][1]

    def next_switch_after(self, t: float) -> float | None:
        for st, _ in self.schedule:
            if st > t + _TIME_EPS:
                return st
        return None


@dataclass(frozen=True)
class AppliedEvent:
    kind: str            # "perturb" | "obs"
    step: int
    time: float
    delta: np.ndarray | None = None

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "step": self.step, "time": self.time}
        if self.delta is not None:
            out["delta"] = np.asarray(self.delta).tolist()
        return out


@dataclass
class RolloutRecord:
    """Integrated trajectory with commanded velocities and Lyapunov values."""

    dt: float
    times: np.ndarray            # (K,)
    xc: np.ndarray               # (K, d_c)
    velocities: np.ndarray       # (K, d_c)
    lyapunov: np.ndarray         # (K,)
    events: tuple[AppliedEvent, ...]
    converged: bool
    convergence_time: float | None
    attractor: np.ndarray

    def __post_init__(self):
        k = len(self.times)
        if not (len(self.xc) == len(self.velocities) == len(self.lyapunov) == k):
            raise ValidationError("record arrays have inconsistent lengths")
        if k and self.lyapunov.min() < 0:
            raise ValidationError("Lyapunov values must be non-negative")

    @property
    def steps(self) -> int:
        return len(self.times)

    def event_steps(self) -> set[int]:
        return {e.step for e in self.events}

    def to_csv(self) -> str:
        d = self.xc.shape[1]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t"] + [f"xc_{i}" for i in range(d)]
                        + [f"v_{i}" for i in range(d)] + ["V"])
        for k in range(self.steps):
            writer.writerow([repr(float(self.times[k]))]
                            + [repr(float(v)) for v in self.xc[k]]
                            + [repr(float(v)) for v in self.velocities[k]]
                            + [repr(float(self.lyapunov[k]))])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "dt": self.dt,
            "t": self.times.tolist(),
            "xc": self.xc.tolist(),
            "v": self.velocities.tolist(),
            "V": self.lyapunov.tolist(),
            "events": [e.to_dict() for e in self.events],
            "converged": self.converged,
            "convergence_time": self.convergence_time,
            "attractor": self.attractor.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _validate_provider(params: PolicyParams, provider: ObservationProvider):
    net = params.weight_net
    for _, payload in provider.schedule:
        validate_payload(
            payload, obs_kind=net.obs_kind,
            d_nc=net.d_nc if net.front_end is None else None,
            image_shape=net.front_end.image_shape if net.front_end else None)


def integrate(params: PolicyParams, x0: StateVector, *,
              dt: float, horizon: float,
              provider: ObservationProvider | None = None,
              perturbations=(), method: str = "rk4",
              clamp: float | None = None,
              stop_on_convergence: bool = True) -> RolloutRecord:
    """Integrate the closed loop from ``x0`` for ``horizon`` seconds.

    The payload is held constant within each step and replaced from the
    provider between steps; perturbation deltas are added at the first step
    whose time reaches the event time. Convergence is declared once the
    attractor distance stays below 1e-4 for 10 consecutive steps, after
    which integration stops early unless events are still pending (or
    ``stop_on_convergence`` is false).
    """
    if not (dt > 0):
        raise ValidationError(f"dt must be positive, got {dt}")
    if not (horizon > 0):
        raise ValidationError(f"horizon must be positive, got {horizon}")
    if method not in ("euler", "rk4"):
        raise ValidationError(f"unknown integrator {method!r}")
    if clamp is not None and not (clamp > 0):
        raise ValidationError("speed clamp must be positive")
    if x0.d_c != params.d_c:
        raise ValidationError(f"x0 has d_c {x0.d_c}, policy expects {params.d_c}")

    if provider is None:
        provider = ObservationProvider.static(x0.non_controllable)
    _validate_provider(params, provider)

    pending = sorted((PerturbationEvent(e.time, e.delta) if not isinstance(e, PerturbationEvent) else e
                      for e in perturbations), key=lambda e: e.time)
    for e in pending:
        if e.delta.shape != (params.d_c,):
            raise ValidationError(f"perturbation delta shape {e.delta.shape} != ({params.d_c},)")

    pol = MaterializedPolicy(params)
    attractor = params.attractor
    n_steps = max(1, int(round(horizon / dt)))

    def speed_limited(v):
        if clamp is None:
            return v
        speed = float(np.linalg.norm(v))
        return v * (clamp / speed) if speed > clamp else v

    x = np.array(x0.controllable, dtype=float)
    times, xs, vs, lyap, events = [], [], [], [], []
    run_length = 0
    run_start_time = None
    converged = False
    obs_idx = provider.index_at(0.0)
    payload = provider.schedule[obs_idx][1]
    pi = 0

    for k in range(n_steps + 1):
        t = k * dt
        while pi < len(pending) and pending[pi].time <= t + _TIME_EPS:
            x = x + pending[pi].delta
            events.append(AppliedEvent("perturb", k, t, pending[pi].delta))
            pi += 1
        idx = provider.index_at(t)
        if idx != obs_idx:
            obs_idx = idx
            events.append(AppliedEvent("obs", k, t))
        payload = provider.schedule[obs_idx][1]

        if not np.all(np.isfinite(x)):
            raise RolloutDivergedError("state became non-finite", step=k)
        v = speed_limited(pol.velocity(x, payload))
        err = float(np.linalg.norm(attractor - x))
        times.append(t)
        xs.append(x.copy())
        vs.append(v)
        lyap.append(err * err)

        if err < CONVERGENCE_TOL:
            if run_length == 0:
                run_start_time = t
            run_length += 1
        else:
            run_length = 0
            run_start_time = None
        if run_length >= CONVERGENCE_WINDOW:
            converged = True
            no_more_events = (pi >= len(pending)
                              and provider.next_switch_after(t) is None)
            if stop_on_convergence and no_more_events:
                break

        if k < n_steps:
            def f(y):
                return speed_limited(pol.velocity(y, payload))
            if method == "euler":
                x = x + dt * f(x)
            else:
                k1 = f(x)
                k2 = f(x + 0.5 * dt * k1)
                k3 = f(x + 0.5 * dt * k2)
                k4 = f(x + dt * k3)
                x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(x)):
                raise RolloutDivergedError("state became non-finite", step=k + 1)

    return RolloutRecord(
        dt=dt, times=np.asarray(times), xc=np.stack(xs),
        velocities=np.stack(vs), lyapunov=np.asarray(lyap),
        events=tuple(events),
        converged=converged,
        convergence_time=run_start_time if converged else None,
        attractor=attractor)


def convergence_stats(record: RolloutRecord) -> dict:
    """Final error, convergence time, and count of Lyapunov increases.

    An increase of more than 1e-10 between consecutive recorded steps counts
    as a violation unless a perturbation or observation switch was applied
    at that step.
    """
    if record.steps == 0:
        raise ValidationError("cannot compute stats of an empty record")
    event_steps = record.event_steps()
    violations = 0
    for k in range(1, record.steps):
        if k in event_steps:
            continue
        if record.lyapunov[k] - record.lyapunov[k - 1] > LYAPUNOV_SLACK:
            violations += 1
    final_error = float(np.linalg.norm(record.attractor - record.xc[-1]))
    return {
        "final_error": final_error,
        "converged": record.converged,
        "convergence_time": record.convergence_time,
        "lyapunov_violations": violations,
    }


@dataclass(frozen=True)
class FieldGrid:
    """Velocity field sampled on a 2-d grid at a fixed observation."""

    points: np.ndarray        # (R0*R1, 2), row-major over (i, j)
    velocities: np.ndarray    # (R0*R1, 2)
    bounds: tuple
    resolution: tuple[int, int]
    attractor: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["x0", "x1", "v0", "v1"])
        for p, v in zip(self.points, self.velocities):
            writer.writerow([repr(float(p[0])), repr(float(p[1])),
                             repr(float(v[0])), repr(float(v[1]))])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "bounds": [list(b) for b in self.bounds],
            "resolution": list(self.resolution),
            "points": self.points.tolist(),
            "velocities": self.velocities.tolist(),
            "attractor": self.attractor.tolist(),
        }


def vector_field_grid(params: PolicyParams, obs, bounds, resolution) -> FieldGrid:
    """Evaluate the policy on a regular 2-d grid with the payload held fixed.

    ``bounds`` is ((lo0, hi0), (lo1, hi1)); ``resolution`` is points per
    dimension (int or pair). Rows are emitted row-major: the first
    coordinate varies slowest.
    """
    if params.d_c != 2:
        raise ValidationError("grid export requires d_c = 2 (evaluate pointwise otherwise)")
    if isinstance(resolution, int):
        resolution = (resolution, resolution)
    r0, r1 = resolution
    if r0 < 2 or r1 < 2:
        raise ValidationError(f"resolution must be >= 2 per dimension, got {resolution}")
    (lo0, hi0), (lo1, hi1) = bounds
    if not (hi0 > lo0 and hi1 > lo1):
        raise ValidationError("grid bounds must satisfy hi > lo")
    net = params.weight_net
    payload = validate_payload(
        obs, obs_kind=net.obs_kind,
        d_nc=net.d_nc if net.front_end is None else None,
        image_shape=net.front_end.image_shape if net.front_end else None)

    g0 = np.linspace(lo0, hi0, r0)
    g1 = np.linspace(lo1, hi1, r1)
    pts = np.stack(np.meshgrid(g0, g1, indexing="ij"), axis=-1).reshape(-1, 2)
    pol = MaterializedPolicy(params)
    tiled = np.broadcast_to(payload, (len(pts),) + payload.shape)
    vels = pol.velocity_batch(pts, tiled)
    return FieldGrid(pts, vels, tuple(map(tuple, bounds)), (r0, r1), params.attractor)
