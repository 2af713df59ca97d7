"""State container shared by the policy, dataset, and rollout layers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

OBS_VECTOR = "vector"
OBS_IMAGE = "image"


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class StateVector:
    """Full system state: a directly commanded part plus an observed-only payload.

    ``controllable`` is a vector of length d_c (task units). The payload is
    either a vector of length d_nc (possibly empty) or a grayscale image with
    values in [0, 1]. Instances are immutable and safe to share.
    """

    controllable: np.ndarray
    non_controllable: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        xc = _frozen(self.controllable)
        xnc = _frozen(self.non_controllable)
        if xc.ndim != 1 or xc.size < 1:
            raise ValidationError(f"controllable state must be a non-empty vector, got shape {xc.shape}")
        if not np.all(np.isfinite(xc)):
            raise ValidationError("controllable state contains non-finite entries")
        if xnc.ndim not in (1, 2):
            raise ValidationError(f"observation payload must be a vector or image, got ndim {xnc.ndim}")
        if not np.all(np.isfinite(xnc)):
            raise ValidationError("observation payload contains non-finite entries")
        if xnc.ndim == 2:
            h, w = xnc.shape
            if h < 1 or w < 1:
                raise ValidationError(f"image payload must be at least 1x1, got {xnc.shape}")
            if xnc.size and (xnc.min() < 0.0 or xnc.max() > 1.0):
                raise ValidationError("image payload pixels must lie in [0, 1]")
        object.__setattr__(self, "controllable", xc)
        object.__setattr__(self, "non_controllable", xnc)

    @property
    def d_c(self) -> int:
        return self.controllable.shape[0]

    @property
    def obs_kind(self) -> str:
        return OBS_IMAGE if self.non_controllable.ndim == 2 else OBS_VECTOR

    def with_controllable(self, xc) -> "StateVector":
        return StateVector(xc, self.non_controllable)

    def with_payload(self, payload) -> "StateVector":
        return StateVector(self.controllable, payload)


def validate_payload(payload, *, obs_kind: str, d_nc: int | None = None,
                     image_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Check a raw payload array against an expected layout; returns it frozen."""
    arr = _frozen(payload)
    if obs_kind == OBS_VECTOR:
        if arr.ndim != 1:
            raise ValidationError(f"expected a vector payload, got ndim {arr.ndim}")
        if d_nc is not None and arr.shape[0] != d_nc:
            raise ValidationError(f"payload length {arr.shape[0]} != expected {d_nc}")
    elif obs_kind == OBS_IMAGE:
        if arr.ndim != 2:
            raise ValidationError(f"expected an image payload, got ndim {arr.ndim}")
        if image_shape is not None and tuple(arr.shape) != tuple(image_shape):
            raise ValidationError(f"image shape {arr.shape} != expected {tuple(image_shape)}")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValidationError("image payload pixels must lie in [0, 1]")
    else:
        raise ValidationError(f"unknown observation kind {obs_kind!r}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("payload contains non-finite entries")
    return arr
