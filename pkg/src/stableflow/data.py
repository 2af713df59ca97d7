"""Demonstration ingestion: file schema, velocity targets, attractor.

Demonstrations are state-only (no recorded actions), so velocity targets
are derived by finite differences: central differences at interior samples,
one-sided at the two endpoints. The attractor is the arithmetic mean of the
final controllable state of every trajectory.

File schema (UTF-8 JSON, version 1)::

    {"version": 1, "dt": <s>, "d_c": <int>,
     "obs_kind": "vector",            "d_nc": <int>,      # vector payloads
     "obs_kind": "image", "image_shape": [H, W],           # image payloads
     "trajectories": [{"states": [{"xc": [...],
                                   "xnc": [...] | "xnc_image": "<base64>"},
                                  ...]}, ...]}

Image payloads are base64 of row-major little-endian float64 pixels in
[0, 1]. All reals are finite doubles; JSON round-trips them losslessly.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, UnsupportedVersionError, ValidationError
from .state import OBS_IMAGE, OBS_VECTOR, StateVector

SCHEMA_VERSION = 1
MIN_SAMPLES = 3


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled demonstrated state sequence."""

    dt: float
    states: tuple[StateVector, ...]

    def __post_init__(self):
        if not (self.dt > 0) or not np.isfinite(self.dt):
            raise ValidationError(f"dt must be a positive real, got {self.dt}")
        states = tuple(self.states)
        if len(states) < MIN_SAMPLES:
            raise ValidationError(
                f"trajectory needs at least {MIN_SAMPLES} samples (M >= {MIN_SAMPLES}), got {len(states)}")
        first = states[0]
        for k, s in enumerate(states):
            if s.d_c != first.d_c:
                raise ValidationError(f"sample {k} has d_c {s.d_c}, expected {first.d_c}")
            if s.obs_kind != first.obs_kind or s.non_controllable.shape != first.non_controllable.shape:
                raise ValidationError(f"sample {k} has a different payload layout")
        object.__setattr__(self, "states", states)

    @property
    def M(self) -> int:
        return len(self.states)

    @property
    def d_c(self) -> int:
        return self.states[0].d_c

    @property
    def obs_kind(self) -> str:
        return self.states[0].obs_kind

    @property
    def duration(self) -> float:
        return (self.M - 1) * self.dt

    def xc_matrix(self) -> np.ndarray:
        return np.stack([s.controllable for s in self.states])

    def payloads(self) -> list[np.ndarray]:
        return [s.non_controllable for s in self.states]


def estimate_velocities(traj: Trajectory) -> np.ndarray:
    """Velocity targets (M, d_c): central differences inside, one-sided at the ends."""
    x = traj.xc_matrix()
    dt = traj.dt
    v = np.empty_like(x)
    v[0] = (x[1] - x[0]) / dt
    v[-1] = (x[-1] - x[-2]) / dt
    v[1:-1] = (x[2:] - x[:-2]) / (2.0 * dt)
    if not np.all(np.isfinite(v)):
        raise ValidationError("derived velocities contain non-finite entries")
    return v


def compute_attractor(trajs) -> np.ndarray:
    """Mean of the final controllable state over all trajectories."""
    trajs = list(trajs)
    if not trajs:
        raise ValidationError("cannot compute an attractor from zero trajectories")
    finals = np.stack([t.states[-1].controllable for t in trajs])
    return finals.mean(axis=0)


def smooth_xc(traj: Trajectory, window: int) -> Trajectory:
    """Centered moving average on the controllable part (odd window >= 3)."""
    if window < 3 or window % 2 == 0:
        raise ValidationError("smoothing window must be an odd integer >= 3")
    x = traj.xc_matrix()
    kernel = np.ones(window)
    counts = np.convolve(np.ones(len(x)), kernel, mode="same")
    sm = np.stack([np.convolve(x[:, j], kernel, mode="same") / counts
                   for j in range(x.shape[1])], axis=1)
    states = tuple(s.with_controllable(row) for s, row in zip(traj.states, sm))
    return Trajectory(traj.dt, states)


@dataclass(frozen=True)
class Dataset:
    """Trajectories plus derived (state, target velocity) samples and attractor."""

    trajectories: tuple[Trajectory, ...]
    samples: tuple
    attractor: np.ndarray
    standardizer: tuple[np.ndarray, np.ndarray] | None = None

    @classmethod
    def from_trajectories(cls, trajs, *, standardize: bool = False,
                          smooth_window: int | None = None) -> "Dataset":
        trajs = list(trajs)
        if not trajs:
            raise ValidationError("dataset needs at least one trajectory")
        d_c = trajs[0].d_c
        kind = trajs[0].obs_kind
        for k, t in enumerate(trajs):
            if t.d_c != d_c:
                raise ValidationError(f"trajectory {k} has d_c {t.d_c}, expected {d_c}")
            if t.obs_kind != kind:
                raise ValidationError(f"trajectory {k} has payload kind {t.obs_kind}, expected {kind}")
            if abs(t.dt - trajs[0].dt) > 1e-12:
                raise ValidationError("trajectories must share dt")
        if smooth_window is not None:
            trajs = [smooth_xc(t, smooth_window) for t in trajs]
        standardizer = None
        if standardize:
            allx = np.concatenate([t.xc_matrix() for t in trajs])
            mean = allx.mean(axis=0)
            scale = allx.std(axis=0)
            scale[scale < 1e-12] = 1.0
            trajs = [Trajectory(t.dt, tuple(
                s.with_controllable((s.controllable - mean) / scale) for s in t.states))
                for t in trajs]
            standardizer = (mean, scale)
        samples = []
        for t in trajs:
            vels = estimate_velocities(t)
            samples.extend(zip(t.states, vels))
        return cls(tuple(trajs), tuple(samples), compute_attractor(trajs), standardizer)

    @property
    def dt(self) -> float:
        return self.trajectories[0].dt

    @property
    def d_c(self) -> int:
        return self.trajectories[0].d_c

    @property
    def obs_kind(self) -> str:
        return self.trajectories[0].obs_kind


# ---------------------------------------------------------------------------
# serialization

def _require(obj: dict, key: str, field: str, path=None):
    if key not in obj:
        raise ParseError(f"missing key {key!r}", path=path, field=field)
    return obj[key]


def trajectories_to_json(trajs) -> dict:
    trajs = list(trajs)
    if not trajs:
        raise ValidationError("nothing to serialize")
    kind = trajs[0].obs_kind
    head = {"version": SCHEMA_VERSION, "dt": trajs[0].dt, "d_c": trajs[0].d_c,
            "obs_kind": kind}
    if kind == OBS_VECTOR:
        head["d_nc"] = int(trajs[0].states[0].non_controllable.shape[0])
    else:
        head["image_shape"] = list(trajs[0].states[0].non_controllable.shape)
    out_trajs = []
    for t in trajs:
        states = []
        for s in t.states:
            entry = {"xc": s.controllable.tolist()}
            if kind == OBS_VECTOR:
                entry["xnc"] = s.non_controllable.tolist()
            else:
                raw = np.ascontiguousarray(s.non_controllable, dtype="<f8").tobytes()
                entry["xnc_image"] = base64.b64encode(raw).decode("ascii")
            states.append(entry)
        out_trajs.append({"states": states})
    head["trajectories"] = out_trajs
    return head


def trajectories_from_json(doc: dict, *, path=None) -> list[Trajectory]:
    if not isinstance(doc, dict):
        raise ParseError("top-level value must be an object", path=path)
    version = _require(doc, "version", "version", path)
    if version != SCHEMA_VERSION:
        raise UnsupportedVersionError(
            f"unsupported dataset version {version!r} (expected {SCHEMA_VERSION})", path=path)
    dt = _require(doc, "dt", "dt", path)
    d_c = _require(doc, "d_c", "d_c", path)
    kind = _require(doc, "obs_kind", "obs_kind", path)
    if kind not in (OBS_VECTOR, OBS_IMAGE):
        raise ParseError(f"obs_kind must be 'vector' or 'image', got {kind!r}",
                         path=path, field="obs_kind")
    if kind == OBS_VECTOR:
        d_nc = _require(doc, "d_nc", "d_nc", path)
        image_shape = None
    else:
        d_nc = None
        image_shape = _require(doc, "image_shape", "image_shape", path)
        if (not isinstance(image_shape, list) or len(image_shape) != 2
                or any(not isinstance(v, int) or v < 1 for v in image_shape)):
            raise ParseError("image_shape must be [H, W] with positive ints",
                             path=path, field="image_shape")
    raw_trajs = _require(doc, "trajectories", "trajectories", path)
    if not isinstance(raw_trajs, list) or not raw_trajs:
        raise ParseError("trajectories must be a non-empty list",
                         path=path, field="trajectories")

    trajs = []
    for ti, rt in enumerate(raw_trajs):
        tfield = f"trajectories[{ti}]"
        raw_states = _require(rt, "states", f"{tfield}.states", path)
        if not isinstance(raw_states, list):
            raise ParseError("states must be a list", path=path, field=f"{tfield}.states")
        states = []
        for si, rs in enumerate(raw_states):
            sfield = f"{tfield}.states[{si}]"
            xc = _require(rs, "xc", f"{sfield}.xc", path)
            if not isinstance(xc, list) or len(xc) != d_c:
                raise ParseError(f"xc must be a list of {d_c} reals",
                                 path=path, field=f"{sfield}.xc")
            if kind == OBS_VECTOR:
                xnc = rs.get("xnc", [])
                if not isinstance(xnc, list) or len(xnc) != d_nc:
                    raise ParseError(f"xnc must be a list of {d_nc} reals",
                                     path=path, field=f"{sfield}.xnc")
                payload = np.asarray(xnc, dtype=float)
            else:
                blob = _require(rs, "xnc_image", f"{sfield}.xnc_image", path)
                try:
                    buf = base64.b64decode(blob, validate=True)
                    payload = np.frombuffer(buf, dtype="<f8").reshape(image_shape)
                except (ValueError, TypeError) as exc:
                    raise ParseError(f"bad image payload: {exc}",
                                     path=path, field=f"{sfield}.xnc_image") from exc
            try:
                states.append(StateVector(np.asarray(xc, dtype=float), payload))
            except ValidationError as exc:
                raise ParseError(str(exc), path=path, field=sfield) from exc
        trajs.append(Trajectory(float(dt), tuple(states)))
    return trajs


def load_trajectories(path) -> list[Trajectory]:
    """Parse and validate a demonstration file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read file: {exc}", path=path) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path=path, line=exc.lineno) from exc
    return trajectories_from_json(doc, path=path)


def save_trajectories(trajs, path) -> None:
    Path(path).write_text(json.dumps(trajectories_to_json(trajs)), encoding="utf-8")


def load_dataset(path, **kwargs) -> Dataset:
    return Dataset.from_trajectories(load_trajectories(path), **kwargs)


def save_dataset(dataset: Dataset, path) -> None:
    save_trajectories(dataset.trajectories, path)


def dataset_fingerprint(trajs) -> str:
    """Stable content hash of a set of trajectories."""
    blob = json.dumps(trajectories_to_json(trajs), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()
