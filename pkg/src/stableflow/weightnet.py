"""Mixing-weight network: optional conv front-end, small MLP, softmax head.

The forward pass is written with the dispatching primitives from
:mod:`stableflow.autodiff`, so the same code evaluates plain arrays and
records gradients when the weights are tape nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ObservationShapeError, ValidationError
from .state import OBS_IMAGE, OBS_VECTOR, StateVector

DEFAULT_HIDDEN = ((32, "tanh"), (32, "tanh"))
DEFAULT_CONV_CHANNELS = (8, 16)

_ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu}


@dataclass(frozen=True)
class ConvFrontEnd:
    """Image feature extractor: conv+maxpool blocks, flatten, compact projection.

    The final linear+tanh projection squeezes the flattened activations into
    ``proj_dim`` values, so the observation enters the MLP as a short code
    comparable in size to the controllable state rather than drowning it.
    """

    image_shape: tuple[int, int]
    channels: tuple[int, ...] = DEFAULT_CONV_CHANNELS
    kernel_size: int = 5
    pool: int = 2
    proj_dim: int = 16

    def __post_init__(self):
        h, w = self.image_shape
        if h < 1 or w < 1:
            raise ValidationError(f"image shape must be positive, got {self.image_shape}")
        if self.proj_dim < 1:
            raise ValidationError(f"projection dim must be positive, got {self.proj_dim}")
        self.flatten_dim()  # validates divisibility

    def block_shapes(self):
        """Spatial shape after each conv+pool block."""
        h, w = self.image_shape
        shapes = []
        for _ in self.channels:
            h, w = h - self.kernel_size + 1, w - self.kernel_size + 1
            if h < 1 or w < 1:
                raise ValidationError(f"image {self.image_shape} too small for kernel {self.kernel_size}")
            if h % self.pool or w % self.pool:
                raise ValidationError(
                    f"conv output {h}x{w} not divisible by pool {self.pool}; "
                    f"choose a compatible image size")
            h, w = h // self.pool, w // self.pool
            shapes.append((h, w))
        return shapes

    def flatten_dim(self) -> int:
        h, w = self.block_shapes()[-1]
        return self.channels[-1] * h * w

    def feature_dim(self) -> int:
        return self.proj_dim


@dataclass
class WeightNetParams:
    """Architecture descriptor plus the parameter arrays of the weight network.

    ``mlp_weights`` includes the final logit layer; the head is always a
    softmax so the mixture weights are positive and sum to one.
    """

    d_c: int
    output_dim: int
    hidden_layers: tuple[tuple[int, str], ...] = DEFAULT_HIDDEN
    front_end: ConvFrontEnd | None = None
    d_nc: int = 0
    conv_weights: list = field(default_factory=list)
    mlp_weights: list = field(default_factory=list)
    head: str = "softmax"

    @property
    def obs_kind(self) -> str:
        return OBS_IMAGE if self.front_end is not None else OBS_VECTOR

    def mlp_input_dim(self) -> int:
        if self.front_end is not None:
            return self.d_c + self.front_end.feature_dim()
        return self.d_c + self.d_nc

    def clone(self) -> "WeightNetParams":
        return replace(
            self,
            conv_weights=[(w.copy(), b.copy()) for w, b in self.conv_weights],
            mlp_weights=[(w.copy(), b.copy()) for w, b in self.mlp_weights],
        )


def init_weight_net(d_c: int, n_systems: int, rng: np.random.Generator, *,
                    d_nc: int = 0,
                    image_shape: tuple[int, int] | None = None,
                    hidden: tuple[tuple[int, str], ...] = DEFAULT_HIDDEN,
                    conv_channels: tuple[int, ...] = DEFAULT_CONV_CHANNELS) -> WeightNetParams:
    """Allocate a weight network; hidden weights ~ U(+-1/sqrt(fan_in)), biases zero."""
    if n_systems < 1:
        raise ValidationError("need at least one elementary system")
    for width, act in hidden:
        if width < 1:
            raise ValidationError(f"hidden width must be positive, got {width}")
        if act not in _ACTIVATIONS:
            raise ValidationError(f"unknown activation {act!r}")

    front_end = None
    conv_weights = []
    if image_shape is not None:
        front_end = ConvFrontEnd(tuple(image_shape), tuple(conv_channels))
        in_ch = 1
        for out_ch in front_end.channels:
            k = front_end.kernel_size
            fan_in = in_ch * k * k
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k))
            conv_weights.append((w, np.zeros(out_ch)))
            in_ch = out_ch
        # flatten -> compact embedding (stored as the last conv stage)
        flat = front_end.flatten_dim()
        bound = 1.0 / np.sqrt(flat)
        conv_weights.append((rng.uniform(-bound, bound, size=(flat, front_end.proj_dim)),
                             np.zeros(front_end.proj_dim)))

    params = WeightNetParams(
        d_c=d_c, output_dim=n_systems, hidden_layers=tuple(hidden),
        front_end=front_end, d_nc=0 if front_end is not None else d_nc,
        conv_weights=conv_weights)

    mlp_weights = []
    in_dim = params.mlp_input_dim()
    for width, _ in params.hidden_layers:
        bound = 1.0 / np.sqrt(in_dim)
        mlp_weights.append((rng.uniform(-bound, bound, size=(in_dim, width)), np.zeros(width)))
        in_dim = width
    # The logit layer must start random: with all elementary systems
    # initialized identically, a symmetric mixture would receive identical
    # per-system gradients and never differentiate.
    bound = 1.0 / np.sqrt(in_dim)
    mlp_weights.append((rng.uniform(-bound, bound, size=(in_dim, n_systems)),
                        np.zeros(n_systems)))
    params.mlp_weights = mlp_weights
    return params


def _check_batch_payload(params: WeightNetParams, xnc):
    shape = xnc.shape if not isinstance(xnc, ad.Node) else xnc.value.shape
    if params.front_end is not None:
        expect = params.front_end.image_shape
        if len(shape) != 3 or tuple(shape[1:]) != tuple(expect):
            raise ObservationShapeError(
                f"weight net expects {expect[0]}x{expect[1]} images, got payload shape {shape[1:]}")
    else:
        if len(shape) != 2 or shape[1] != params.d_nc:
            raise ObservationShapeError(
                f"weight net expects vectors of length {params.d_nc}, got payload shape {shape[1:]}")


def conv_features(params: WeightNetParams, images):
    """Run the conv front-end on a stack of images (B,H,W) -> features (B,F).

    The projection's 1/sqrt(fan_in) init keeps the tanh embedding O(1), so
    the observation code enters the MLP at the same magnitude as the
    controllable state.
    """
    fe = params.front_end
    h, w = fe.image_shape
    batch = images.shape[0]
    x = ad.reshape(images, (batch, 1, h, w))
    for cw, cb in params.conv_weights[:-1]:
        x = ad.relu(ad.conv2d(x, cw, cb))
        x = ad.maxpool2(x)
    flat = ad.reshape(x, (batch, fe.flatten_dim()))
    pw, pb = params.conv_weights[-1]
    return ad.tanh(ad.add(ad.matmul(flat, pw), pb))


def mlp_head(params: WeightNetParams, xc, obs_features):
    """MLP + softmax over [xc; features] (vector payloads are their own features)."""
    if params.front_end is not None or params.d_nc:
        inp = ad.concat([xc, obs_features], axis=1)
    else:
        inp = xc
    for (w, b), (_, act) in zip(params.mlp_weights[:-1], params.hidden_layers):
        inp = _ACTIVATIONS[act](ad.add(ad.matmul(inp, w), b))
    w, b = params.mlp_weights[-1]
    logits = ad.add(ad.matmul(inp, w), b)
    return ad.softmax(logits)


def net_apply(params: WeightNetParams, xc, xnc):
    """Batched forward pass: xc (B,d_c), xnc (B,d_nc) or (B,H,W) -> weights (B,N).

    Weight arrays inside ``params`` may be plain arrays or tape nodes.
    """
    _check_batch_payload(params, xnc)
    feats = conv_features(params, xnc) if params.front_end is not None else xnc
    return mlp_head(params, xc, feats)


def weight_forward(params: WeightNetParams, state: StateVector) -> np.ndarray:
    """Mixture weights for one state: positive, summing to one."""
    if state.d_c != params.d_c:
        raise ObservationShapeError(
            f"controllable dim {state.d_c} != weight net d_c {params.d_c}")
    if state.obs_kind != params.obs_kind:
        raise ObservationShapeError(
            f"payload kind {state.obs_kind!r} does not match weight net ({params.obs_kind!r})")
    xc = state.controllable[None, :]
    xnc = state.non_controllable[None, ...]
    return net_apply(params, xc, xnc)[0]
