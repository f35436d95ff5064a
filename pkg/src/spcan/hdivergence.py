"""Empirical H-divergence (proxy A-distance) between two feature sets."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .autodiff import Graph, OptimizerConfig, Parameter, glorot_uniform, sgd_step, sigmoid


@dataclass(frozen=True)
class ProbeConfig:
    hidden: int = 16
    iterations: int = 200
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0


def _key(x: np.ndarray):
    return (x.shape, hashlib.sha256(np.ascontiguousarray(x).tobytes()).hexdigest())


def h_divergence_estimate(features_source, features_target, config: ProbeConfig = ProbeConfig()) -> float:
    """Train a fresh two-layer probe to tell the sets apart; return 2|1 - err|.

    Each set is split in half; the probe is fit on the first halves and its
    per-domain error rates are summed on the held-out halves. Because the
    probe class is closed under flipping its output, the best achievable
    error sum is ``min(err, 2 - err)``, giving ``2 * |1 - err|`` in [0, 2].
    The two sets are put in a canonical order first, so swapping them
    yields the identical value.
    """
    a = np.asarray(features_source, dtype=np.float64)
    b = np.asarray(features_target, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("feature sets must be 2-D with the same width")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each domain needs at least 2 samples")
    if _key(b) < _key(a):
        a, b = b, a

    gen = rngmod.stream(config.seed, "probe")
    ia, ib = gen.permutation(len(a)), gen.permutation(len(b))
    ha, hb = len(a) // 2, len(b) // 2
    a_tr, a_ev = a[ia[:ha]], a[ia[ha:]]
    b_tr, b_ev = b[ib[:hb]], b[ib[hb:]]

    x_tr = np.vstack([a_tr, b_tr])
    mu = x_tr.mean(axis=0)
    sd = x_tr.std(axis=0)
    sd[sd < 1e-12] = 1.0

    def norm(x):
        return (x - mu) / sd

    d = a.shape[1]
    w1 = Parameter(glorot_uniform(gen, d, config.hidden), name="probe.w1")
    b1 = Parameter(np.zeros((1, config.hidden)), name="probe.b1")
    w2 = Parameter(glorot_uniform(gen, config.hidden, 1), name="probe.w2")
    b2 = Parameter(np.zeros((1, 1)), name="probe.b2")
    params = [w1, b1, w2, b2]
    g = Graph()
    x = g.input("x", d)
    y = g.input("y", 1)
    w = g.input("w", 1)
    z = g.relu(g.add_bias(g.matmul(x, g.param(w1)), g.param(b1)))
    logit = g.add_bias(g.matmul(z, g.param(w2)), g.param(b2))
    loss = g.sigmoid_bce(logit, y, w)

    n = len(x_tr)
    # balance the two domains regardless of their sizes
    weights = np.concatenate([np.full(ha, n / (2 * ha)), np.full(hb, n / (2 * hb))])[:, None]
    feed = {"x": norm(x_tr), "y": np.concatenate([np.ones(ha), np.zeros(hb)])[:, None], "w": weights}
    opt = OptimizerConfig(base_lr=config.lr, momentum=config.momentum, weight_decay=0.0,
                          inv_gamma=1e-12, inv_power=1e-12, total_iterations=config.iterations)
    for t in range(config.iterations):
        g.forward(feed)
        g.backward(loss)
        sgd_step(params, opt, t)

    def predict(xe):
        g.forward({"x": norm(xe), "y": np.zeros((len(xe), 1)), "w": np.ones((len(xe), 1))})
        return sigmoid(logit.value).ravel() >= 0.5

    err = float(np.mean(~predict(a_ev))) + float(np.mean(predict(b_ev)))
    return float(min(2.0, max(0.0, 2.0 * abs(1.0 - err))))
