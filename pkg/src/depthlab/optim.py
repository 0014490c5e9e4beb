"""Discrete-time SGD, momentum and weight decay with learning-rate schedules.

Momentum keeps ``u`` with ``u <- alpha u + (1 - alpha) grad`` and steps
``theta <- theta - eta(t) u``.  The velocity of the width-rescaled
convention is ``v = -N gamma0 u`` (see :func:`velocity`), and
``theta(t+1) = theta(t) + eta0 gamma0 v(t)`` holds with ``eta(t)`` from
:func:`depthlab.parameterization.effective_lr`.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import blas

from depthlab.numerics.conditioned import ImplicitGaussian
from depthlab.parameterization import effective_lr
from depthlab.resnet import DivergenceError, LowRank

SCHEDULE_KINDS = ("constant", "linear_warmup", "warmup_cosine")


@dataclass(frozen=True)
class Schedule:
    kind: str = "constant"
    target: float = 1.0
    warmup_steps: int = 0
    total_steps: int = 0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule {self.kind!r}; expected one of {SCHEDULE_KINDS}")
        if self.target < 0:
            raise ValueError("schedule target must be non-negative")
        if self.warmup_steps < 0 or self.total_steps < 0:
            raise ValueError("schedule step counts must be non-negative")
        if self.kind == "warmup_cosine" and self.total_steps <= self.warmup_steps:
            raise ValueError("warmup_cosine needs total_steps > warmup_steps")


def schedule_value(s, t):
    if t < 0:
        raise ValueError(f"step must be non-negative, got {t}")
    if s.kind == "constant":
        return s.target
    if t < s.warmup_steps:
        return s.target * t / s.warmup_steps
    if s.kind == "linear_warmup":
        return s.target
    if t >= s.total_steps:
        return 0.0
    frac = (t - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    return s.target * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptState:
    alpha: float = 0.0
    weight_decay: float = 0.0
    t: int = 0
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"momentum alpha must lie in [0, 1), got {self.alpha}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be non-negative, got {self.weight_decay}")


def velocity(net, state, name):
    """Velocity ``v = -N gamma0 u`` of one tensor (dense array)."""
    u = state.buffers.get(name)
    if u is None:
        return np.zeros(np.shape(net.params[name]))
    u = u.dense() if isinstance(u, LowRank) else u
    return -net.cfg.N * net.cfg.gamma0 * u


def _add_scaled(net, name, update, c):
    """params[name] += c * update."""
    w = net.params[name]
    if isinstance(w, ImplicitGaussian):
        if not isinstance(update, LowRank):
            raise TypeError(f"implicit tensor {name} needs a low-rank update")
        w.add_low_rank(c * update.u, update.v)
        return
    if isinstance(update, LowRank):
        if w.flags.c_contiguous and w.dtype == np.float64:
            # in place on the Fortran view: W^T += c v u^T
            blas.dgemm(c, update.v, update.u, beta=1.0, c=w.T, trans_b=1, overwrite_c=1)
            return
        update = update.dense()
    w += c * update


def _check_finite(grads, lr):
    if not np.isfinite(lr):
        raise DivergenceError("non-finite learning rate")
    for name, g in grads.items():
        parts = (g.u, g.v) if isinstance(g, LowRank) else (g,)
        if not all(np.all(np.isfinite(p)) for p in parts):
            raise DivergenceError(f"non-finite update for {name}")


def sgd_step(net, grads, s, t):
    """In-place ``theta <- theta - eta(t) grad``; returns the net."""
    lr = effective_lr(net.cfg, schedule_value(s, t))
    _check_finite(grads, lr)
    for name, g in grads.items():
        _add_scaled(net, name, g, -lr)
    return net


def _ema(u, g, alpha):
    if u is None:
        u = 0.0 if not isinstance(g, LowRank) else None
    if isinstance(g, LowRank):
        if u is None:
            return g.scaled(1.0 - alpha)
        return LowRank(np.concatenate([alpha * u.u, (1.0 - alpha) * g.u], axis=1),
                       np.concatenate([u.v, g.v], axis=1))
    return alpha * u + (1.0 - alpha) * g


def momentum_step(net, grads, state, s, t):
    """Exponential-moving-average momentum; with alpha = 0 this is exactly :func:`sgd_step`."""
    if state.alpha == 0.0:
        sgd_step(net, grads, s, t)
        state.t = t + 1
        return net, state
    lr = effective_lr(net.cfg, schedule_value(s, t))
    _check_finite(grads, lr)
    for name, g in grads.items():
        if isinstance(g, LowRank) and not isinstance(net.params[name], ImplicitGaussian):
            g = g.dense()
        u = _ema(state.buffers.get(name), g, state.alpha)
        state.buffers[name] = u
        _add_scaled(net, name, u, -lr)
    state.t = t + 1
    return net, state


def weight_decay_step(net, grads, state, s, t):
    """Gradient (or momentum) step, then shrink every trainable tensor by ``1 - eta0(t) lambda``."""
    base = schedule_value(s, t)
    shrink = base * state.weight_decay
    if shrink >= 1.0:
        raise ValueError(f"eta0 * lambda = {shrink} >= 1 makes the decay unstable")
    momentum_step(net, grads, state, s, t)
    if state.weight_decay > 0.0:
        for name in net.trainable_names():
            w = net.params[name]
            if isinstance(w, ImplicitGaussian):
                w.rescale(1.0 - shrink)
            else:
                w *= 1.0 - shrink
    return net, state


def optimizer_step(net, grads, state, s, t):
    """Dispatch to the cheapest step that implements ``state``."""
    if state.weight_decay > 0.0:
        return weight_decay_step(net, grads, state, s, t)
    return momentum_step(net, grads, state, s, t)
