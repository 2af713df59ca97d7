"""Procedural demonstration fixtures: planar demos and task-sign glyphs.

Three desk-scale motions (a sinusoidal, a linear, and a curvilinear path)
share a common endpoint so they can be mixed into one multi-task dataset.
Time is warped exponentially, which makes the implied velocity field close
to linear in the attractor error: the linear demo is then exactly
representable by a single contracting system, and every demo ends with
near-zero velocity at the goal.

Glyph images are drawn procedurally (anti-aliased stroke rendering), so
image-observation tests need no binary assets.
"""

from __future__ import annotations

import numpy as np

from .data import Trajectory
from .errors import ValidationError
from .state import StateVector

DEMO_KINDS = ("sine", "line", "curve")

DEFAULT_GOAL = (0.5, 0.5)
DEFAULT_STARTS = {
    "line": (-0.5, -0.5),
    "sine": (-0.5, 0.5),
    "curve": (0.5, -0.5),
}
DEFAULT_M = 200
DEFAULT_DT = 0.01
DEFAULT_RATE = 4.0
# Multi-task demos run slower so a mid-rollout observation switch around
# t=1 s still lands mid-motion (the single-task rate settles too fast).
MULTITASK_RATE = 0.8
SINE_AMPLITUDE = 0.3
CURVE_AMPLITUDE = 0.35


def _warp(M: int, dt: float, rate: float) -> np.ndarray:
    """Progress profile s(t) in [0, 1]: fast start, exponentially slowing."""
    ts = np.arange(M) * dt
    total = (M - 1) * dt
    return (1.0 - np.exp(-rate * ts)) / (1.0 - np.exp(-rate * total))


def demo_path(kind: str, s: np.ndarray, start, goal) -> np.ndarray:
    """Planar path sampled at progress values ``s``; ends at ``goal``."""
    if kind not in DEMO_KINDS:
        raise ValidationError(f"unknown demo kind {kind!r}; expected one of {DEMO_KINDS}")
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    delta = goal - start
    length = np.linalg.norm(delta)
    if length < 1e-9:
        raise ValidationError("demo start and goal coincide")
    normal = np.array([-delta[1], delta[0]]) / length
    base = start[None, :] + s[:, None] * delta[None, :]
    if kind == "line":
        return base
    if kind == "sine":
        return base + SINE_AMPLITUDE * np.sin(2.0 * np.pi * s)[:, None] * normal[None, :]
    return base + CURVE_AMPLITUDE * np.sin(np.pi * s)[:, None] * normal[None, :]


def make_demo(kind: str, *, M: int = DEFAULT_M, dt: float = DEFAULT_DT,
              rate: float = DEFAULT_RATE, start=None, goal=DEFAULT_GOAL,
              payload=None) -> Trajectory:
    """One demonstrated trajectory with an optional constant payload."""
    if start is None:
        start = DEFAULT_STARTS[kind]
    s = _warp(M, dt, rate)
    path = demo_path(kind, s, start, goal)
    if payload is None:
        payload = np.zeros(0)
    states = tuple(StateVector(row, payload) for row in path)
    return Trajectory(dt, states)


def multitask_demos(obs: str = "onehot", *, kinds=DEMO_KINDS, M: int = DEFAULT_M,
                    dt: float = DEFAULT_DT, rate: float = MULTITASK_RATE,
                    goal=DEFAULT_GOAL, image_shape=(32, 32)) -> list[Trajectory]:
    """One demo per task, keyed by one-hot vectors or by glyph images."""
    if obs not in ("onehot", "image"):
        raise ValidationError(f"obs must be 'onehot' or 'image', got {obs!r}")
    trajs = []
    for k, kind in enumerate(kinds):
        if obs == "onehot":
            payload = np.zeros(len(kinds))
            payload[k] = 1.0
        else:
            payload = glyph_image(kind, image_shape)
        trajs.append(make_demo(kind, M=M, dt=dt, rate=rate, goal=goal, payload=payload))
    return trajs


# ---------------------------------------------------------------------------
# glyph rendering

def _stroke(points: np.ndarray, shape, width: float = 1.3) -> np.ndarray:
    """Rasterize a polyline with a soft anti-aliased stroke; pixels in [0, 1]."""
    h, w = shape
    rows, cols = np.mgrid[0:h, 0:w]
    pix = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(float)
    # distance to the densely sampled curve is a good proxy for segment distance
    d2 = ((pix[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    dist = np.sqrt(d2.min(axis=1)).reshape(h, w)
    return np.clip(1.0 - dist / width, 0.0, 1.0)


def glyph_image(kind: str, shape=(32, 32)) -> np.ndarray:
    """Task-sign glyph: a straight stroke, a sine arc, or a circular arc."""
    if kind not in DEMO_KINDS:
        raise ValidationError(f"unknown glyph kind {kind!r}; expected one of {DEMO_KINDS}")
    h, w = shape
    if h < 8 or w < 8:
        raise ValidationError(f"glyph image must be at least 8x8, got {shape}")
    m = 0.15  # relative margin
    u = np.linspace(0.0, 1.0, 6 * max(h, w))
    r0, r1 = m * (h - 1), (1 - m) * (h - 1)
    c0, c1 = m * (w - 1), (1 - m) * (w - 1)
    if kind == "line":
        rows = r1 + (r0 - r1) * u
        cols = c0 + (c1 - c0) * u
    elif kind == "sine":
        cols = c0 + (c1 - c0) * u
        rows = 0.5 * (r0 + r1) + 0.5 * (r1 - r0) * np.sin(2.0 * np.pi * u) * 0.9
    else:  # circular arc
        theta = np.pi * (1.0 - u)
        cols = 0.5 * (c0 + c1) + 0.5 * (c1 - c0) * np.cos(theta)
        rows = r1 - (r1 - 0.5 * (r0 + r1)) * np.sin(theta)
    return _stroke(np.stack([rows, cols], axis=1), shape)
