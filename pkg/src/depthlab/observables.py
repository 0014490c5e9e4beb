"""Kernel order parameters, the NTK, and ensemble statistics of finite networks."""

from dataclasses import dataclass

import numpy as np

from depthlab.parameterization import (
    effective_lr,
    hidden_branch_scale,
    internal_scale,
    output_scale,
    readin_scale,
    readout_scale,
)
from depthlab.resnet import DivergenceError, backward, forward

KERNEL_LABELS = ("feature", "gradient", "ntk", "input")
DEFAULT_NTK_CAP = 200_000_000


@dataclass
class KernelMatrix:
    values: np.ndarray
    label: str

    def __post_init__(self):
        if self.label not in KERNEL_LABELS:
            raise ValueError(f"unknown kernel label {self.label!r}")
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"kernel must be square, got shape {v.shape}")
        self.values = v

    @property
    def P(self):
        return self.values.shape[0]

    def is_symmetric(self, tol=1e-10):
        scale = max(1.0, float(np.abs(self.values).max(initial=0.0)))
        return bool(np.abs(self.values - self.values.T).max(initial=0.0) <= tol * scale)

    def min_eigenvalue(self):
        return float(np.linalg.eigvalsh(0.5 * (self.values + self.values.T)).min())


def _gram(a):
    """(1/n) a a^T for sample-major a of shape (P, n)."""
    return (a @ a.T) / a.shape[-1]


def _check(trace):
    if trace.diverged:
        raise DivergenceError("kernel of a diverged forward pass")


def feature_kernel(trace, layer, act):
    """Phi^l = (1/N) phi(h^l) phi(h^l)^T for l in 1..L+1."""
    _check(trace)
    return KernelMatrix(_gram(act.phi(trace.h[layer - 1])), "feature")


def preact_kernel(trace, layer):
    """H^l = (1/N) h^l h^l^T for l in 1..L+1 (labelled as a feature kernel)."""
    _check(trace)
    return KernelMatrix(_gram(trace.h[layer - 1]), "feature")


def gradient_kernel(backtrace, layer):
    """G^l = (1/N) g^l g^l^T for l in 1..L+1."""
    return KernelMatrix(_gram(backtrace.g[layer - 1]), "gradient")


def input_kernel(X):
    X = np.asarray(X, dtype=np.float64)
    return KernelMatrix(_gram(X), "input")


def ntk_kernel_sum(net, trace, backtrace):
    """NTK assembled from products of gradient and feature kernels.

    Normalised as ``eta(1) * sum_theta df/dtheta . df'/dtheta``, so that one
    SGD step with base rate eta0 moves the outputs by ``eta0 K Delta / P``.
    Hidden blocks contribute ``G^{l+1} Phi^l / L`` under the depth-scaled
    scheme; the trainable read-in and read-out add ``G^1 Kx`` and the
    final-stream kernel.
    """
    _check(trace)
    cfg, act = net.cfg, net.act
    L, K, N = cfg.L, cfg.K, cfg.N
    lrf = effective_lr(cfg, 1.0)
    g0sq = cfg.gamma0 ** 2
    beta, s = hidden_branch_scale(cfg), internal_scale(cfg)
    total = np.zeros((trace.f.shape[0],) * 2)
    for l in range(1, L + 1):
        for k in range(K):
            # kernel of the input to matrix (l, k) and of the gradient at its output
            phi_k = _gram(trace.branch_input(l, k, act))
            if k == K - 1:
                g_k = _gram(backtrace.g[l])
                c = beta ** 2 / g0sq
            else:
                g_k = _gram(backtrace.inner[l - 1, k])
                c = s ** 2 / (g0sq * L)
            total += lrf * c * g_k * phi_k
    trainable = net.trainable_names()
    if "readin" in trainable:
        kx = _gram(trace.X)
        total += lrf * readin_scale(cfg) ** 2 * cfg.D / (N * g0sq) * _gram(backtrace.g[0]) * kx
    if "readout" in trainable:
        total += lrf * (readout_scale(cfg) / output_scale(cfg)) ** 2 * N * _gram(trace.h[L])
    return KernelMatrix(total, "ntk")


def measure_ntk(net, X):
    """Forward, backward (with unit errors) and :func:`ntk_kernel_sum` in one call."""
    trace = forward(net, X)
    _check(trace)
    bt = backward(net, trace, np.ones(trace.f.shape[0]))
    return ntk_kernel_sum(net, trace, bt), trace, bt


def ntk_exact(net, X, cap=DEFAULT_NTK_CAP):
    """NTK as the Gram matrix of per-sample parameter gradients.

    Each sample is pushed through forward and backward on its own; the
    loss gradients of a one-sample batch with error -1 are exactly
    df/dtheta.  The Gram matrix is accumulated tensor by tensor.
    """
    X = np.asarray(X, dtype=np.float64)
    P = X.shape[0]
    if net.implicit:
        raise ValueError("ntk_exact needs dense weights")
    n_params = net.num_params()
    if P * n_params > cap:
        raise MemoryError(f"P * params = {P * n_params} exceeds the cap {cap}")
    names = net.trainable_names()
    per_sample = []
    for p in range(P):
        trace = forward(net, X[p:p + 1])
        _check(trace)
        per_sample.append(backward(net, trace, -np.ones(1)).grads)
    total = np.zeros((P, P))
    for name in names:
        J = np.stack([np.ravel(per_sample[p][name]) for p in range(P)])
        total += J @ J.T
    return KernelMatrix(effective_lr(net.cfg, 1.0) * total, "ntk")


@dataclass
class EnsembleStats:
    mean: np.ndarray
    var: np.ndarray | None
    E: int

    @property
    def stderr(self):
        if self.var is None:
            raise ValueError("standard error needs at least two ensemble members")
        return np.sqrt(self.var / self.E)


def ensemble_stats(values, need_variance=True):
    """Per-entry mean and unbiased variance over the leading (seed) axis."""
    arr = np.asarray([np.asarray(v, dtype=np.float64) for v in values])
    E = arr.shape[0]
    if E < 1:
        raise ValueError("ensemble is empty")
    if E < 2:
        if need_variance:
            raise ValueError("variance needs at least two ensemble members")
        return EnsembleStats(arr.mean(axis=0), None, E)
    return EnsembleStats(arr.mean(axis=0), arr.var(axis=0, ddof=1), E)


def write_kernel_csv(kernel, path):
    """``i,j,value`` rows for the upper triangle, row-major."""
    vals = kernel.values if isinstance(kernel, KernelMatrix) else np.asarray(kernel)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("i,j,value\n")
        for i in range(vals.shape[0]):
            for j in range(i, vals.shape[1]):
                fh.write(f"{i},{j},{float(vals[i, j])!r}\n")


def read_kernel_csv(path):
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    P = int(rows[:, 0].max()) + 1
    out = np.zeros((P, P))
    for i, j, v in rows:
        out[int(i), int(j)] = out[int(j), int(i)] = v
    return out


def relative_feature_change(act, before, after, layer):
    """|phi(h^l_after) - phi(h^l_before)| / |phi(h^l_before)| over the whole batch."""
    a = act.phi(before.h[layer - 1])
    b = act.phi(after.h[layer - 1])
    return float(np.linalg.norm(b - a) / np.linalg.norm(a))
