"""Quantitative evaluation: demonstration reproduction and multi-task reports."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import PolicyParams, verify_certificate
from .data import Dataset, Trajectory, compute_attractor
from .errors import ValidationError
from .rollout import ObservationProvider, convergence_stats, integrate
from .weightnet import weight_forward

ATTRACTOR_AGREEMENT_TOL = 1e-6


def bbox_diagonal(traj: Trajectory) -> float:
    """Diagonal of the demo's controllable-state bounding box (task units)."""
    x = traj.xc_matrix()
    span = x.max(axis=0) - x.min(axis=0)
    return float(max(np.linalg.norm(span), 1e-12))


def demo_provider(traj: Trajectory) -> ObservationProvider:
    """Observation schedule replaying the demo's payloads (deduplicated)."""
    entries = [(0.0, traj.states[0].non_controllable)]
    for k in range(1, traj.M):
        p = traj.states[k].non_controllable
        if not np.array_equal(p, entries[-1][1]):
            entries.append((k * traj.dt, p))
    if len(entries) == 1:
        return ObservationProvider.static(entries[0][1])
    return ObservationProvider.scheduled(entries)


def reproduction_error(params: PolicyParams, traj: Trajectory, *,
                       horizon_factor: float = 1.0, method: str = "rk4") -> dict:
    """Roll out from the demo's initial state and compare against the demo.

    The rollout replays the demo's observation payloads at the demo dt;
    RMSE is computed at matching time indices over the demo duration.
    ``horizon_factor > 1`` extends the rollout past the demo to observe
    convergence; the RMSE window is unaffected.
    """
    if traj.d_c != params.d_c:
        raise ValidationError(f"demo d_c {traj.d_c} != policy d_c {params.d_c}")
    if traj.obs_kind != params.obs_kind:
        raise ValidationError("demo payload kind does not match the policy")
    if horizon_factor < 1.0:
        raise ValidationError("horizon_factor must be >= 1")
    record = integrate(
        params, traj.states[0], provider=demo_provider(traj),
        dt=traj.dt, horizon=traj.duration * horizon_factor, method=method,
        stop_on_convergence=horizon_factor > 1.0)
    demo_xc = traj.xc_matrix()
    m = min(traj.M, record.steps)
    diff = record.xc[:m] - demo_xc[:m]
    rmse = float(np.sqrt((diff ** 2).sum(axis=1).mean()))
    out = {"rmse": rmse, "normalized_rmse": rmse / bbox_diagonal(traj)}
    out.update(convergence_stats(record))
    return out


def mixture_weight_series(params: PolicyParams, traj: Trajectory) -> np.ndarray:
    """Mixture weights (M, N) evaluated along the demonstrated states."""
    return np.stack([weight_forward(params.weight_net, s) for s in traj.states])


@dataclass(frozen=True)
class EvalReport:
    """Per-task reproduction quality plus certificate summary."""

    task_label: str
    per_trajectory: tuple[dict, ...]
    certificate: dict

    @property
    def max_normalized_rmse(self) -> float:
        return max(e["normalized_rmse"] for e in self.per_trajectory)

    @property
    def all_converged(self) -> bool:
        return all(e["converged"] for e in self.per_trajectory)

    def to_dict(self) -> dict:
        return {
            "task": self.task_label,
            "per_trajectory": list(self.per_trajectory),
            "max_normalized_rmse": self.max_normalized_rmse,
            "all_converged": self.all_converged,
            "certificate": self.certificate,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _group_by_task(trajs) -> list[tuple[str, list[Trajectory]]]:
    groups: dict[bytes, list[Trajectory]] = {}
    order: list[bytes] = []
    for t in trajs:
        key = t.states[0].non_controllable.tobytes()
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(t)
    return [(f"task{i}", groups[key]) for i, key in enumerate(order)]


def multitask_eval(params: PolicyParams, dataset: Dataset, *,
                   horizon_factor: float = 5.0) -> list[EvalReport]:
    """Reproduction report per task, tasks keyed by distinct payloads.

    All tasks must share the attractor (within 1e-6): a mixed-endpoint
    dataset violates the fixed-attractor assumption and is a fixture error.
    """
    groups = _group_by_task(dataset.trajectories)
    task_attractors = [compute_attractor(g) for _, g in groups]
    for label_attr, attr in zip(groups, task_attractors):
        if np.linalg.norm(attr - dataset.attractor) > ATTRACTOR_AGREEMENT_TOL:
            raise ValidationError(
                f"fixture error: {label_attr[0]} endpoint deviates from the shared "
                f"attractor by {np.linalg.norm(attr - dataset.attractor):.2e}")
    cert = verify_certificate(params).to_dict()
    reports = []
    for label, trajs in groups:
        rows = tuple(reproduction_error(params, t, horizon_factor=horizon_factor)
                     for t in trajs)
        reports.append(EvalReport(label, rows, cert))
    return reports


def eval_table(reports) -> str:
    """Fixed-format text table over tasks (for terminal output)."""
    lines = [f"{'task':<8} {'trajs':>5} {'rmse':>10} {'nrmse':>8} {'converged':>9} {'viol':>5}"]
    for r in reports:
        worst = max(e["rmse"] for e in r.per_trajectory)
        viol = sum(e["lyapunov_violations"] for e in r.per_trajectory)
        lines.append(f"{r.task_label:<8} {len(r.per_trajectory):>5} {worst:>10.4g} "
                     f"{r.max_normalized_rmse:>8.4f} {str(r.all_converged):>9} {viol:>5}")
    return "\n".join(lines)
