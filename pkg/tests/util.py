"""Shared helpers for building random certified policies in tests."""

import numpy as np

from stableflow.autodiff import softplus_inv
from stableflow.core import ElementaryDS, PolicyParams
from stableflow.weightnet import init_weight_net


def random_policy(rng, d_c=2, n_systems=3, *, d_nc=0, image_shape=None,
                  attractor=None, diag_low=0.3, diag_high=1.5,
                  lower_scale=0.3, skew_scale=0.5, hidden=((16, "tanh"),)):
    """Random raw parameters; certified by construction.

    ``diag_low``/``diag_high`` bound the raw diagonal before softplus, which
    controls how strongly each system contracts.
    """
    systems = []
    for _ in range(n_systems):
        raw = np.tril(rng.normal(0.0, lower_scale, size=(d_c, d_c)), k=-1)
        np.fill_diagonal(raw, rng.uniform(diag_low, diag_high, size=d_c))
        c = rng.normal(0.0, skew_scale, size=(d_c, d_c))
        systems.append(ElementaryDS(raw, c))
    net = init_weight_net(d_c, n_systems, rng, d_nc=d_nc,
                          image_shape=image_shape, hidden=hidden)
    if attractor is None:
        attractor = rng.normal(0.0, 1.0, size=d_c)
    return PolicyParams(tuple(systems), net, np.asarray(attractor, dtype=float))


def isotropic_policy(gains, attractor, *, rng=None, d_nc=0, eps=1e-6):
    """Policy whose systems are exactly gain_i * I, with a zero-weight net.

    With the net zeroed the softmax is uniform, so the mixed field is
    mean(gains) * (attractor - x); with one gain the field is exact.
    """
    gains = list(gains)
    attractor = np.asarray(attractor, dtype=float)
    d_c = attractor.shape[0]
    systems = []
    for g in gains:
        raw = np.zeros((d_c, d_c))
        np.fill_diagonal(raw, softplus_inv(np.sqrt(g) - eps))
        systems.append(ElementaryDS(raw, np.zeros((d_c, d_c))))
    rng = rng or np.random.default_rng(0)
    net = init_weight_net(d_c, len(gains), rng, d_nc=d_nc, hidden=())
    net.mlp_weights = [(np.zeros_like(w), np.zeros_like(b))
                       for w, b in net.mlp_weights]
    return PolicyParams(tuple(systems), net, attractor, diag_floor=eps)
