"""Imitation training loop: velocity-matching loss, Adam, checkpoints.

The loss is the mean squared error between commanded and demonstrated
velocities. Because the system matrices are rebuilt from unconstrained
parameters inside the loss graph, every optimizer iterate is a certified
policy; no projection or constraint handling is needed.

Checkpoints are versioned JSON with float64 arrays hex-encoded
(little-endian), so save/load round-trips are bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .core import (DEFAULT_DIAG_FLOOR, ElementaryDS, PolicyParams, compose_A,
                   reconstruct_L)
from .data import Dataset, dataset_fingerprint
from .errors import (ParseError, TrainingDivergedError, UnsupportedVersionError,
                     ValidationError)
from .state import OBS_IMAGE
from .weightnet import (DEFAULT_CONV_CHANNELS, DEFAULT_HIDDEN, ConvFrontEnd,
                        WeightNetParams, conv_features, init_weight_net,
                        mlp_head, net_apply)

CHECKPOINT_VERSION = 1


def parse_net_spec(spec: str) -> dict:
    """Parse a weight-net spec: ``mlp:32,32`` or ``conv`` / ``conv:8,16``."""
    parts = spec.split(":")
    if parts[0] == "mlp":
        if len(parts) != 2 or not parts[1]:
            raise ValidationError(f"bad net spec {spec!r}; expected mlp:<w1>,<w2>,...")
        try:
            widths = tuple(int(w) for w in parts[1].split(","))
        except ValueError as exc:
            raise ValidationError(f"bad net spec {spec!r}: {exc}") from exc
        if any(w < 1 for w in widths):
            raise ValidationError(f"bad net spec {spec!r}: widths must be positive")
        return {"kind": "mlp", "hidden": tuple((w, "tanh") for w in widths)}
    if parts[0] == "conv":
        channels = DEFAULT_CONV_CHANNELS
        if len(parts) == 2 and parts[1]:
            try:
                channels = tuple(int(c) for c in parts[1].split(","))
            except ValueError as exc:
                raise ValidationError(f"bad net spec {spec!r}: {exc}") from exc
            if any(c < 1 for c in channels):
                raise ValidationError(f"bad net spec {spec!r}: channels must be positive")
        elif len(parts) > 2:
            raise ValidationError(f"bad net spec {spec!r}")
        return {"kind": "conv", "hidden": DEFAULT_HIDDEN, "channels": channels}
    raise ValidationError(f"bad net spec {spec!r}; expected mlp:... or conv")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run."""

    n_systems: int = 5
    epochs: int = 1000
    learning_rate: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    net: str = "mlp:32,32"
    eps: float = DEFAULT_DIAG_FLOOR

    def __post_init__(self):
        if self.n_systems < 1:
            raise ValidationError("n_systems must be >= 1")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if not (self.learning_rate > 0):
            raise ValidationError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.seed < 0:
            raise ValidationError("seed must be a non-negative integer")
        if not (self.eps > 0):
            raise ValidationError("eps must be positive")
        parse_net_spec(self.net)

    def to_dict(self) -> dict:
        return {"n_systems": self.n_systems, "epochs": self.epochs,
                "learning_rate": self.learning_rate, "batch_size": self.batch_size,
                "seed": self.seed, "net": self.net, "eps": self.eps}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        try:
            return cls(**{k: d[k] for k in
                          ("n_systems", "epochs", "learning_rate", "batch_size",
                           "seed", "net", "eps")})
        except KeyError as exc:
            raise ParseError(f"config missing key {exc}") from exc


@dataclass(frozen=True)
class Checkpoint:
    """Trained policy plus the config and metadata needed to reproduce it."""

    config: TrainConfig
    params: PolicyParams
    final_loss: float
    epochs_run: int
    dataset_fingerprint: str
    loss_history: tuple[float, ...] = ()
    version: int = CHECKPOINT_VERSION


# ---------------------------------------------------------------------------
# loss

def _stack_batch(batch, d_c: int, obs_kind: str):
    if not batch:
        raise ValidationError("batch must be non-empty")
    xcs, xncs, targets = [], [], []
    for state, target in batch:
        if state.d_c != d_c:
            raise ValidationError(f"sample d_c {state.d_c} != policy d_c {d_c}")
        if state.obs_kind != obs_kind:
            raise ValidationError("sample payload kind does not match the policy")
        target = np.asarray(target, dtype=float)
        if target.shape != (d_c,):
            raise ValidationError(f"target shape {target.shape} != ({d_c},)")
        xcs.append(state.controllable)
        xncs.append(state.non_controllable)
        targets.append(target)
    return np.stack(xcs), np.stack(xncs), np.stack(targets)


def _batch_loss(system_tensors, net: WeightNetParams, attractor, eps,
                xc, xnc, targets, *, unique_images=None, image_index=None):
    """Mean squared velocity error; tensors may be arrays or tape nodes.

    When the batch contains repeated images (``unique_images`` plus
    ``image_index`` mapping samples to them), the conv front-end runs once
    per distinct image and features are gathered per sample; the result is
    bit-identical to the plain path because each image's features do not
    depend on the rest of the batch.
    """
    if unique_images is not None:
        feats = ad.gather_rows(conv_features(net, unique_images), image_index)
        w = mlp_head(net, xc, feats)                  # (B, N)
    else:
        w = net_apply(net, xc, xnc)                   # (B, N)
    e = attractor[None, :] - xc                       # constant (B, d)
    pred = None
    for i, (l_raw, c) in enumerate(system_tensors):
        a_i = compose_A(reconstruct_L(l_raw, eps), c)
        contrib = ad.mul(ad.slice_cols(w, i, i + 1), ad.matmul(e, ad.transpose(a_i)))
        pred = contrib if pred is None else ad.add(pred, contrib)
    diff = ad.sub(pred, targets)
    return ad.mul(ad.reduce_sum(ad.mul(diff, diff)), 1.0 / len(xc))


def imitation_loss(params: PolicyParams, batch) -> float:
    """Mean squared error between commanded and target velocities over a batch."""
    xc, xnc, targets = _stack_batch(batch, params.d_c, params.obs_kind)
    tensors = [(s.L_raw, s.C) for s in params.systems]
    value = _batch_loss(tensors, params.weight_net, params.attractor,
                        params.diag_floor, xc, xnc, targets)
    return float(value)


# ---------------------------------------------------------------------------
# parameter bookkeeping

INIT_SKEW_SCALE = 0.1


def best_fit_contraction(dataset: Dataset) -> float:
    """Least-squares rate a of the isotropic field v = a * (attractor - x).

    Used to scale the initial policy to the demonstrated speeds; clipped to
    a sane positive range so degenerate datasets still initialize.
    """
    num = 0.0
    den = 0.0
    for state, target in dataset.samples:
        e = dataset.attractor - state.controllable
        num += float(np.dot(np.asarray(target, dtype=float), e))
        den += float(np.dot(e, e))
    if den <= 0.0:
        return 1.0
    return float(np.clip(num / den, 0.05, 1e3))


def init_policy(d_c: int, config: TrainConfig, attractor, rng, *,
                d_nc: int = 0, image_shape=None,
                contraction: float = 1.0) -> PolicyParams:
    """Fresh policy: every system starts as the same isotropic contraction.

    The L factors start at sqrt(contraction) * identity, so the initial
    field is ``contraction * (attractor - x)``; matching the demonstrated
    speed scale here keeps early gradients focused on shape rather than on
    inflating one system. The skew parameters C get small random values
    instead of zeros: identically initialized systems receive identical
    gradients through the softmax (whose vjp of a constant vector is zero),
    so a perfectly symmetric start could never differentiate its mixture.
    Skew jitter breaks the tie without changing any symmetric part, so the
    initial field is still the same contraction.
    """
    spec = parse_net_spec(config.net)
    if spec["kind"] == "conv" and image_shape is None:
        raise ValidationError("conv weight net requires image observations")
    if not (contraction > 0):
        raise ValidationError("initial contraction must be positive")
    net = init_weight_net(
        d_c, config.n_systems, rng,
        d_nc=d_nc,
        image_shape=tuple(image_shape) if spec["kind"] == "conv" else None,
        hidden=spec["hidden"],
        conv_channels=spec.get("channels", DEFAULT_CONV_CHANNELS))
    ldiag = np.sqrt(contraction)
    diag0 = ad.softplus_inv(max(ldiag - config.eps, 1e-9))
    systems = []
    for _ in range(config.n_systems):
        l_raw = np.zeros((d_c, d_c))
        np.fill_diagonal(l_raw, diag0)
        c = rng.normal(0.0, INIT_SKEW_SCALE, size=(d_c, d_c))
        systems.append(ElementaryDS(l_raw, c))
    return PolicyParams(tuple(systems), net, np.asarray(attractor, dtype=float),
                        diag_floor=config.eps)


def _param_entries(params: PolicyParams):
    """Ordered (name, array) pairs covering every trainable parameter."""
    entries = []
    for i, s in enumerate(params.systems):
        entries.append((f"sys{i}.L_raw", s.L_raw))
        entries.append((f"sys{i}.C", s.C))
    net = params.weight_net
    for j, (w, b) in enumerate(net.conv_weights):
        entries.append((f"conv{j}.w", w))
        entries.append((f"conv{j}.b", b))
    for j, (w, b) in enumerate(net.mlp_weights):
        entries.append((f"fc{j}.W", w))
        entries.append((f"fc{j}.b", b))
    return entries


def _rebuild_params(template: PolicyParams, arrays: dict) -> PolicyParams:
    systems = tuple(
        ElementaryDS(arrays[f"sys{i}.L_raw"], arrays[f"sys{i}.C"])
        for i in range(template.n_systems))
    net = replace(
        template.weight_net,
        conv_weights=[(arrays[f"conv{j}.w"].copy(), arrays[f"conv{j}.b"].copy())
                      for j in range(len(template.weight_net.conv_weights))],
        mlp_weights=[(arrays[f"fc{j}.W"].copy(), arrays[f"fc{j}.b"].copy())
                     for j in range(len(template.weight_net.mlp_weights))])
    return PolicyParams(systems, net, template.attractor, template.diag_floor)


def flatten_params(params: PolicyParams) -> np.ndarray:
    """All trainable parameters as one vector (fixed order)."""
    return np.concatenate([arr.ravel() for _, arr in _param_entries(params)])


def loss_on_vector(params: PolicyParams, batch):
    """Loss as a function of the flattened parameter vector.

    Returns a closure usable with :func:`stableflow.autodiff.grad_check`:
    it accepts a plain vector or a tape node and slices it back into the
    individual parameter blocks.
    """
    xc, xnc, targets = _stack_batch(batch, params.d_c, params.obs_kind)
    entries = _param_entries(params)
    net = params.weight_net

    def f(vec):
        pieces = {}
        offset = 0
        for name, arr in entries:
            flat = ad.slice_vec(vec, offset, offset + arr.size)
            pieces[name] = ad.reshape(flat, arr.shape)
            offset += arr.size
        tensors = [(pieces[f"sys{i}.L_raw"], pieces[f"sys{i}.C"])
                   for i in range(params.n_systems)]
        shadow = replace(
            net,
            conv_weights=[(pieces[f"conv{j}.w"], pieces[f"conv{j}.b"])
                          for j in range(len(net.conv_weights))],
            mlp_weights=[(pieces[f"fc{j}.W"], pieces[f"fc{j}.b"])
                         for j in range(len(net.mlp_weights))])
        return _batch_loss(tensors, shadow, params.attractor, params.diag_floor,
                           xc, xnc, targets)

    return f


class Adam:
    """Plain Adam on a named set of arrays, updated in place."""

    def __init__(self, arrays: dict, order, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.arrays = arrays
        self.order = list(order)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(arrays[k]) for k in self.order}
        self.v = {k: np.zeros_like(arrays[k]) for k in self.order}

    def step(self, grads: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k in self.order:
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            self.arrays[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def train(dataset: Dataset, config: TrainConfig, *, progress=None) -> Checkpoint:
    """Fit a policy to a dataset; deterministic for a fixed seed.

    ``progress``, when given, is called once per epoch with
    ``(epoch, loss, params)`` where params is an immutable snapshot.
    Raises :class:`TrainingDivergedError` if the loss goes non-finite.
    """
    if not dataset.samples:
        raise ValidationError("dataset has no samples")
    rng = np.random.Generator(np.random.PCG64(config.seed))
    image_shape = (dataset.trajectories[0].states[0].non_controllable.shape
                   if dataset.obs_kind == OBS_IMAGE else None)
    d_nc = (dataset.trajectories[0].states[0].non_controllable.shape[0]
            if dataset.obs_kind != OBS_IMAGE else 0)
    spec = parse_net_spec(config.net)
    if spec["kind"] == "conv" and dataset.obs_kind != OBS_IMAGE:
        raise ValidationError("conv weight net requires an image dataset")
    if spec["kind"] == "mlp" and dataset.obs_kind == OBS_IMAGE:
        raise ValidationError("image dataset requires the conv weight net")

    template = init_policy(dataset.d_c, config, dataset.attractor, rng,
                           d_nc=d_nc, image_shape=image_shape,
                           contraction=best_fit_contraction(dataset))
    entries = _param_entries(template)
    order = [name for name, _ in entries]
    arrays = {name: arr.copy() for name, arr in entries}
    opt = Adam(arrays, order, config.learning_rate)

    xc_all, xnc_all, tgt_all = _stack_batch(list(dataset.samples),
                                            dataset.d_c, dataset.obs_kind)
    n = len(xc_all)
    batch = min(config.batch_size, n)
    net = template.weight_net
    n_conv = len(net.conv_weights)
    n_mlp = len(net.mlp_weights)

    # Demonstrations typically repeat a handful of task images; index them
    # once so each batch convolves every distinct image only once.
    unique_images = None
    image_ids = None
    if dataset.obs_kind == OBS_IMAGE:
        seen: dict[bytes, int] = {}
        image_ids = np.empty(n, dtype=int)
        uniques = []
        for i in range(n):
            key = xnc_all[i].tobytes()
            if key not in seen:
                seen[key] = len(uniques)
                uniques.append(xnc_all[i])
            image_ids[i] = seen[key]
        unique_images = np.stack(uniques)

    loss_history = []
    last_loss = float("nan")
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch):
            idx = perm[start:start + batch]
            tape = ad.Tape()
            leaves = {name: tape.leaf(arrays[name]) for name in order}
            tensors = [(leaves[f"sys{i}.L_raw"], leaves[f"sys{i}.C"])
                       for i in range(config.n_systems)]
            shadow = replace(
                net,
                conv_weights=[(leaves[f"conv{j}.w"], leaves[f"conv{j}.b"])
                              for j in range(n_conv)],
                mlp_weights=[(leaves[f"fc{j}.W"], leaves[f"fc{j}.b"])
                             for j in range(n_mlp)])
            if unique_images is not None:
                present, local = np.unique(image_ids[idx], return_inverse=True)
                loss = _batch_loss(tensors, shadow, template.attractor, config.eps,
                                   xc_all[idx], None, tgt_all[idx],
                                   unique_images=unique_images[present],
                                   image_index=local)
            else:
                loss = _batch_loss(tensors, shadow, template.attractor, config.eps,
                                   xc_all[idx], xnc_all[idx], tgt_all[idx])
            value = float(loss.value)
            if not np.isfinite(value):
                raise TrainingDivergedError("loss became non-finite", epoch=epoch)
            grads_by_id = ad.backward(tape, loss)
            opt.step({name: grads_by_id[leaves[name].id] for name in order})
            epoch_loss += value * len(idx)
        last_loss = epoch_loss / n
        loss_history.append(last_loss)
        if progress is not None:
            progress(epoch, last_loss, _rebuild_params(template, arrays))

    final = _rebuild_params(template, arrays)
    if config.epochs == 0:
        last_loss = imitation_loss(final, list(dataset.samples))
    return Checkpoint(
        config=config, params=final, final_loss=last_loss,
        epochs_run=config.epochs,
        dataset_fingerprint=dataset_fingerprint(dataset.trajectories),
        loss_history=tuple(loss_history))


# ---------------------------------------------------------------------------
# checkpoint files

def _enc(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "data": arr.tobytes().hex()}


def _dec(obj, field: str, path=None) -> np.ndarray:
    try:
        shape = obj["shape"]
        buf = bytes.fromhex(obj["data"])
        arr = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad array encoding: {exc}", path=path, field=field) from exc
    return arr


def checkpoint_to_json(ckpt: Checkpoint) -> dict:
    params = ckpt.params
    net = params.weight_net
    doc = {
        "version": ckpt.version,
        "config": ckpt.config.to_dict(),
        "policy": {
            "d_c": params.d_c,
            "diag_floor": params.diag_floor,
            "attractor": _enc(params.attractor),
            "systems": [
                {"L_raw": _enc(s.L_raw), "C": _enc(s.C),
                 **({"A_bypass": _enc(s.A_bypass)} if s.A_bypass is not None else {})}
                for s in params.systems
            ],
            "net": {
                "d_c": net.d_c,
                "output_dim": net.output_dim,
                "hidden_layers": [[w, a] for w, a in net.hidden_layers],
                "d_nc": net.d_nc,
                "front_end": (
                    {"image_shape": list(net.front_end.image_shape),
                     "channels": list(net.front_end.channels),
                     "kernel_size": net.front_end.kernel_size,
                     "pool": net.front_end.pool}
                    if net.front_end is not None else None),
                "conv_weights": [{"w": _enc(w), "b": _enc(b)} for w, b in net.conv_weights],
                "mlp_weights": [{"W": _enc(w), "b": _enc(b)} for w, b in net.mlp_weights],
                "head": net.head,
            },
        },
        "meta": {
            "final_loss": ckpt.final_loss,
            "epochs_run": ckpt.epochs_run,
            "dataset_fingerprint": ckpt.dataset_fingerprint,
            "loss_history": list(ckpt.loss_history),
        },
    }
    return doc


def checkpoint_from_json(doc: dict, *, path=None) -> Checkpoint:
    if not isinstance(doc, dict) or "version" not in doc:
        raise ParseError("checkpoint must be an object with a version", path=path)
    if doc["version"] != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"unsupported checkpoint version {doc['version']!r} "
            f"(expected {CHECKPOINT_VERSION})", path=path)
    try:
        config = TrainConfig.from_dict(doc["config"])
        pol = doc["policy"]
        netdoc = pol["net"]
        front = None
        if netdoc["front_end"] is not None:
            fe = netdoc["front_end"]
            front = ConvFrontEnd(tuple(fe["image_shape"]), tuple(fe["channels"]),
                                 fe["kernel_size"], fe["pool"])
        net = WeightNetParams(
            d_c=netdoc["d_c"], output_dim=netdoc["output_dim"],
            hidden_layers=tuple((int(w), str(a)) for w, a in netdoc["hidden_layers"]),
            front_end=front, d_nc=netdoc["d_nc"],
            conv_weights=[(_dec(e["w"], "conv.w", path), _dec(e["b"], "conv.b", path))
                          for e in netdoc["conv_weights"]],
            mlp_weights=[(_dec(e["W"], "fc.W", path), _dec(e["b"], "fc.b", path))
                         for e in netdoc["mlp_weights"]],
            head=netdoc["head"])
        systems = tuple(
            ElementaryDS(_dec(s["L_raw"], "L_raw", path), _dec(s["C"], "C", path),
                         _dec(s["A_bypass"], "A_bypass", path) if "A_bypass" in s else None)
            for s in pol["systems"])
        params = PolicyParams(systems, net, _dec(pol["attractor"], "attractor", path),
                              diag_floor=pol["diag_floor"])
        meta = doc["meta"]
        return Checkpoint(
            config=config, params=params,
            final_loss=meta["final_loss"], epochs_run=meta["epochs_run"],
            dataset_fingerprint=meta["dataset_fingerprint"],
            loss_history=tuple(meta.get("loss_history", ())))
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed checkpoint: {exc!r}", path=path) from exc


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_text(json.dumps(checkpoint_to_json(ckpt)), encoding="utf-8")


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read checkpoint: {exc}", path=path) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path=path, line=exc.lineno) from exc
    return checkpoint_from_json(doc, path=path)
