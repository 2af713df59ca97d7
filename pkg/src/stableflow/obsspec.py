"""Observation payload mini-grammar shared by the CLI and the HTTP service.

Payload forms: ``onehot:K``, ``zeros``, ``vec:V1,V2,...``, ``image:PATH``
(.npy or a grayscale image file), ``glyph:sine|line|curve``. A schedule is
a list of ``static:<payload>`` / ``switch:T:<payload>`` entries.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ValidationError
from .fixtures import glyph_image
from .rollout import ObservationProvider


def parse_float_list(text: str, what: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")], dtype=float)
    except ValueError as exc:
        raise ValidationError(f"{what}: expected comma-separated reals, got {text!r}") from exc


def load_image_payload(path: str) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"image file not found: {path}")
    if p.suffix == ".npy":
        arr = np.load(p)
    else:
        try:
            from PIL import Image
        except ImportError as exc:
            raise ValidationError("reading non-.npy images requires Pillow") from exc
        arr = np.asarray(Image.open(p).convert("L"), dtype=float) / 255.0
    return np.asarray(arr, dtype=float)


def parse_payload(tokens: list[str], net) -> np.ndarray:
    """Payload part of an observation spec, already split on ':'."""
    if not tokens:
        raise ValidationError("empty observation payload spec")
    kind = tokens[0]
    if kind == "onehot":
        if len(tokens) != 2:
            raise ValidationError("onehot payload needs an index: onehot:K")
        k = int(tokens[1])
        if net.front_end is not None:
            raise ValidationError("onehot payload given but the policy expects images")
        if not (0 <= k < net.d_nc):
            raise ValidationError(f"onehot index {k} out of range [0, {net.d_nc})")
        payload = np.zeros(net.d_nc)
        payload[k] = 1.0
        return payload
    if kind == "zeros":
        if net.front_end is not None:
            raise ValidationError("zeros payload given but the policy expects images")
        return np.zeros(net.d_nc)
    if kind == "vec":
        if len(tokens) != 2:
            raise ValidationError("vector payload needs values: vec:V1,V2,...")
        return parse_float_list(tokens[1], "vec payload")
    if kind == "image":
        if len(tokens) != 2:
            raise ValidationError("image payload needs a path: image:PATH")
        return load_image_payload(tokens[1])
    if kind == "glyph":
        if len(tokens) != 2:
            raise ValidationError("glyph payload needs a name: glyph:sine|line|curve")
        if net.front_end is None:
            raise ValidationError("glyph payload given but the policy expects vectors")
        return glyph_image(tokens[1], net.front_end.image_shape)
    raise ValidationError(f"unknown payload kind {kind!r}")


def parse_payload_spec(spec: str, net) -> np.ndarray:
    return parse_payload(spec.split(":"), net)


def build_provider(specs: list[str], net) -> ObservationProvider:
    """Compose repeated observation specs into one schedule."""
    if not specs:
        if net.front_end is None and net.d_nc == 0:
            return ObservationProvider.static(np.zeros(0))
        raise ValidationError("this policy observes a payload; provide an observation spec")
    entries = []
    for spec in specs:
        tokens = spec.split(":")
        if tokens[0] == "static":
            entries.append((0.0, parse_payload(tokens[1:], net)))
        elif tokens[0] == "switch":
            if len(tokens) < 3:
                raise ValidationError("switch spec: switch:T:<payload>")
            entries.append((float(tokens[1]), parse_payload(tokens[2:], net)))
        else:
            raise ValidationError(
                f"observation spec must start with static: or switch:, got {spec!r}")
    entries.sort(key=lambda e: e[0])
    if len(entries) == 1 and entries[0][0] == 0.0:
        return ObservationProvider.static(entries[0][1])
    return ObservationProvider.scheduled(entries)
