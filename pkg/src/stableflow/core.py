"""Mixture-of-stable-linear-systems policy: types, reconstruction, certificates.

A policy commands the velocity of the controllable state as

    v(x) = sum_i  w_i(x) * A_i * (attractor - x_c)

where each A_i is rebuilt from unconstrained parameters as L L^T + C - C^T
with L lower triangular and strictly positive on the diagonal. The symmetric
part of every A_i is then L L^T, which is positive definite by construction,
and the softmax head keeps every w_i positive: together these make the
squared distance to the attractor strictly decrease along trajectories, so
rollouts converge no matter what the weight network does.

Everything here is a pure function of immutable inputs. The reconstruction
helpers accept either numpy arrays or autodiff nodes (see
:mod:`stableflow.autodiff`), so the training loss reuses exactly this code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import (InvalidParameterError, NumericalFailureError,
                     ObservationShapeError, ValidationError)
from .state import StateVector, _frozen
from .weightnet import WeightNetParams, net_apply, weight_forward

DEFAULT_DIAG_FLOOR = 1e-6


@dataclass(frozen=True)
class ElementaryDS:
    """Raw parameters of one elementary linear system.

    ``L_raw`` is lower-triangular shaped: entries above the diagonal are
    identically zero and stay zero (gradients never reach them); diagonal
    entries are unconstrained reals mapped through softplus on
    reconstruction. ``C`` is fully free. ``A_bypass`` short-circuits
    reconstruction with a raw matrix; it exists so tests and diagnostics can
    inject uncertified systems, and must never be set by training code.
    """

    L_raw: np.ndarray
    C: np.ndarray
    A_bypass: np.ndarray | None = None

    def __post_init__(self):
        L = _frozen(self.L_raw)
        C = _frozen(self.C)
        if L.ndim != 2 or L.shape[0] != L.shape[1]:
            raise InvalidParameterError(f"L_raw must be square, got {L.shape}")
        if C.shape != L.shape:
            raise InvalidParameterError(f"C shape {C.shape} != L_raw shape {L.shape}")
        if not (np.all(np.isfinite(L)) and np.all(np.isfinite(C))):
            raise InvalidParameterError("system parameters contain non-finite entries")
        if np.any(np.triu(L, k=1) != 0.0):
            raise InvalidParameterError("entries above the diagonal of L_raw must be zero")
        object.__setattr__(self, "L_raw", L)
        object.__setattr__(self, "C", C)
        if self.A_bypass is not None:
            A = _frozen(self.A_bypass)
            if A.shape != L.shape:
                raise InvalidParameterError(f"A_bypass shape {A.shape} != {L.shape}")
            object.__setattr__(self, "A_bypass", A)

    @property
    def d_c(self) -> int:
        return self.L_raw.shape[0]


@dataclass(frozen=True)
class PolicyParams:
    """Complete policy: elementary systems, weight network, fixed attractor."""

    systems: tuple[ElementaryDS, ...]
    weight_net: WeightNetParams
    attractor: np.ndarray
    diag_floor: float = DEFAULT_DIAG_FLOOR

    def __post_init__(self):
        systems = tuple(self.systems)
        if len(systems) < 1:
            raise ValidationError("policy needs at least one elementary system")
        d_c = systems[0].d_c
        if any(s.d_c != d_c for s in systems):
            raise ValidationError("all elementary systems must share d_c")
        attractor = _frozen(self.attractor)
        if attractor.shape != (d_c,):
            raise ValidationError(f"attractor shape {attractor.shape} != ({d_c},)")
        if not np.all(np.isfinite(attractor)):
            raise ValidationError("attractor contains non-finite entries")
        if not (self.diag_floor > 0):
            raise ValidationError("diag_floor must be positive")
        if self.weight_net.output_dim != len(systems):
            raise ValidationError(
                f"weight net outputs {self.weight_net.output_dim} weights for {len(systems)} systems")
        if self.weight_net.d_c != d_c:
            raise ValidationError("weight net d_c does not match the systems")
        object.__setattr__(self, "systems", systems)
        object.__setattr__(self, "attractor", attractor)

    @property
    def d_c(self) -> int:
        return self.systems[0].d_c

    @property
    def n_systems(self) -> int:
        return len(self.systems)

    @property
    def obs_kind(self) -> str:
        return self.weight_net.obs_kind


@dataclass(frozen=True)
class StabilityCertificate:
    """Eigenvalue evidence that every elementary system is contracting."""

    per_system_min_eig: tuple[float, ...]
    weight_head_kind: str
    verdict: bool

    def to_dict(self) -> dict:
        return {
            "per_system_min_eig": list(self.per_system_min_eig),
            "weight_head_kind": self.weight_head_kind,
            "verdict": self.verdict,
        }


def reconstruct_L(raw, eps: float):
    """Lower-triangular factor with softplus(diag) + eps on the diagonal.

    Accepts an array or an autodiff node; the strict lower triangle passes
    through unchanged, entries above the diagonal are masked to zero.
    """
    if not (eps >= 0):
        raise InvalidParameterError("diagonal floor must be non-negative")
    if not isinstance(raw, ad.Node):
        raw = np.asarray(raw, dtype=float)
        if raw.ndim != 2 or raw.shape[0] != raw.shape[1]:
            raise InvalidParameterError(f"L_raw must be square, got {raw.shape}")
        if not np.all(np.isfinite(raw)):
            raise InvalidParameterError("L_raw contains non-finite entries")
        d = raw.shape[0]
    else:
        d = raw.value.shape[0]
    strict = np.tril(np.ones((d, d)), k=-1)
    eye = np.eye(d)
    diag = ad.mul(ad.add(ad.softplus(raw), eps), eye)
    return ad.add(ad.mul(raw, strict), diag)


def compose_A(L, C):
    """A = L L^T + C - C^T (works on arrays and autodiff nodes)."""
    sym = ad.matmul(L, ad.transpose(L))
    skew = ad.sub(C, ad.transpose(C))
    return ad.add(sym, skew)


def reconstruct_A(sys: ElementaryDS, eps: float) -> np.ndarray:
    """Materialize one system matrix from its raw parameters.

    The symmetric part of the result is L L^T, positive definite whenever
    eps > 0. ``A_bypass`` is returned verbatim when set.
    """
    if sys.A_bypass is not None:
        return sys.A_bypass
    if sys.C.shape != sys.L_raw.shape:
        raise InvalidParameterError("L_raw / C dimension mismatch")
    return compose_A(reconstruct_L(sys.L_raw, eps), sys.C)


def materialize_systems(params: PolicyParams) -> np.ndarray:
    """Stack of reconstructed system matrices, shape (N, d_c, d_c)."""
    return np.stack([reconstruct_A(s, params.diag_floor) for s in params.systems])


def _check_state(params: PolicyParams, state: StateVector):
    if state.d_c != params.d_c:
        raise ValidationError(f"state d_c {state.d_c} != policy d_c {params.d_c}")
    if state.obs_kind != params.obs_kind:
        raise ObservationShapeError(
            f"payload kind {state.obs_kind!r} does not match policy ({params.obs_kind!r})")


def policy_eval(params: PolicyParams, state: StateVector) -> np.ndarray:
    """Commanded velocity of the controllable state at ``state``.

    System matrices are rebuilt from raw parameters on every call; nothing
    is cached across calls.
    """
    _check_state(params, state)
    w = weight_forward(params.weight_net, state)
    e = params.attractor - state.controllable
    out = np.zeros(params.d_c)
    for wi, sys in zip(w, params.systems):
        out += wi * (reconstruct_A(sys, params.diag_floor) @ e)
    if not np.all(np.isfinite(out)):
        raise NumericalFailureError("policy produced a non-finite velocity")
    return out


def lyapunov_value(params: PolicyParams, x_c) -> float:
    """Squared distance to the attractor; zero exactly at the attractor."""
    x_c = np.asarray(x_c, dtype=float)
    if x_c.shape != (params.d_c,):
        raise ValidationError(f"state shape {x_c.shape} != ({params.d_c},)")
    e = params.attractor - x_c
    return float(e @ e)


def lyapunov_rate(params: PolicyParams, state: StateVector) -> float:
    """Time derivative of the squared attractor distance along the policy flow.

    Equals -2 e^T (sum_i w_i A_i) e; the skew parts C - C^T cancel in the
    quadratic form, so the value is strictly negative away from the
    attractor whenever the certificate holds.
    """
    _check_state(params, state)
    w = weight_forward(params.weight_net, state)
    e = params.attractor - state.controllable
    mats = materialize_systems(params)
    mix = np.einsum("n,nij->ij", w, mats)
    return float(-2.0 * e @ mix @ e)


def verify_certificate(params: PolicyParams) -> StabilityCertificate:
    """Eigenvalue check of every system's symmetric part plus the head kind.

    The verdict is true iff every minimum eigenvalue is strictly positive
    and the weight head is a softmax. Reconstructed parameters satisfy this
    by construction; a false verdict means a bypassed or corrupted matrix.
    """
    mins = []
    for i, sys in enumerate(params.systems):
        A = reconstruct_A(sys, params.diag_floor)
        sym = 0.5 * (A + A.T)
        try:
            eigs = np.linalg.eigvalsh(sym)
        except np.linalg.LinAlgError as exc:
            raise NumericalFailureError(
                f"eigenvalue solve failed: {exc}", system_index=i) from exc
        mins.append(float(eigs[0]))
    verdict = all(m > 0.0 for m in mins) and params.weight_net.head == "softmax"
    return StabilityCertificate(tuple(mins), params.weight_net.head, verdict)


class MaterializedPolicy:
    """Snapshot of a policy with system matrices rebuilt once.

    Rollout and evaluation loops call the policy thousands of times with
    fixed parameters; this avoids re-running the reconstruction per step
    while keeping :func:`policy_eval` itself cache-free.
    """

    def __init__(self, params: PolicyParams):
        self.params = params
        self.A = materialize_systems(params)
        self.attractor = params.attractor
        self.net = params.weight_net

    def velocity_batch(self, xc: np.ndarray, xnc: np.ndarray) -> np.ndarray:
        """xc (B,d), xnc (B,d_nc)|(B,H,W) -> commanded velocities (B,d)."""
        w = net_apply(self.net, xc, xnc)
        e = self.attractor[None, :] - xc
        return np.einsum("bn,nij,bj->bi", w, self.A, e)

    def velocity(self, xc: np.ndarray, payload: np.ndarray) -> np.ndarray:
        return self.velocity_batch(xc[None, :], payload[None, ...])[0]
