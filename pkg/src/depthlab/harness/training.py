"""Minibatch training runs."""

from dataclasses import dataclass, field

import numpy as np

from depthlab.observables import feature_kernel, measure_ntk
from depthlab.optim import OptState, Schedule, optimizer_step
from depthlab.resnet import DivergenceError, backward, forward, init_network, loss_delta, loss_value

SWEEP_HEADER = "scheme,N,L,K,lr,gamma0,seed,step,train_loss,diverged"
OPTIMIZERS = ("sgd", "momentum")


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "sgd"
    momentum: float = 0.0
    weight_decay: float = 0.0
    schedule: Schedule = field(default_factory=Schedule)
    batch_size: int = 32

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.kind!r}; expected one of {OPTIMIZERS}")
        if self.kind == "sgd" and self.momentum != 0.0:
            raise ValueError("plain sgd takes no momentum; use kind='momentum'")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")


@dataclass(frozen=True)
class SweepRecord:
    scheme: str
    N: int
    L: int
    K: int
    lr: float
    gamma0: float
    seed: int
    step: int
    train_loss: float
    diverged: bool

    def csv_row(self):
        return (f"{self.scheme},{self.N},{self.L},{self.K},{float(self.lr)!r},{float(self.gamma0)!r},"
                f"{self.seed},{self.step},{float(self.train_loss)!r},{int(self.diverged)}")


@dataclass
class TrainResult:
    records: list
    net: object
    diverged: bool
    kernels: dict = field(default_factory=dict)

    @property
    def final_loss(self):
        return self.records[-1].train_loss


def _batches(P, batch, stream):
    """Endless without-replacement minibatches, reshuffled every epoch."""
    while True:
        perm = stream.permutation(P)
        for start in range(0, P - batch + 1, batch):
            yield perm[start:start + batch]


def run_training(cfg, dataset, opt, steps, record_every, stream, seed=0, eval_size=256,
                 kernel_steps=(), kernel_layers=(), loss="mse", init_method="dense"):
    """Train a fresh network from ``stream`` and record losses.

    ``train_loss`` is the loss on a fixed evaluation subset (the first
    ``eval_size`` training points).  A diverged run stops immediately and
    its last record repeats the last finite loss with the flag set.
    ``kernel_steps`` and ``kernel_layers`` select when to store the NTK on
    the evaluation subset and the feature kernels of the given layers.
    """
    if opt.batch_size > dataset.P:
        raise ValueError(f"batch size {opt.batch_size} exceeds the dataset size {dataset.P}")
    if record_every < 1:
        raise ValueError("record_every must be positive")
    net = init_network(cfg, stream.child(0), method=init_method)
    state = OptState(alpha=opt.momentum, weight_decay=opt.weight_decay)
    Xe, ye = dataset.X[:eval_size], dataset.y[:eval_size]
    batches = _batches(dataset.P, opt.batch_size, stream.child(1))
    lr0 = opt.schedule.target
    records, kernels = [], {}
    kernel_steps = set(kernel_steps)
    # factored hidden gradients are applied with one in-place gemm; momentum needs them dense
    lowrank = opt.momentum == 0.0

    def record(step, value, diverged):
        records.append(SweepRecord(cfg.scheme.kind, cfg.N, cfg.L, cfg.K, lr0, cfg.gamma0, seed,
                                   step, float(value), diverged))

    def evaluate(step):
        tr = forward(net, Xe)
        if tr.diverged:
            return None
        if step in kernel_steps:
            kernels[("ntk", step)] = measure_ntk(net, Xe)[0]
            for layer in kernel_layers:
                kernels[("feature", step, layer)] = feature_kernel(tr, layer, net.act)
        return float(loss_value(loss, tr.f, ye))

    last = evaluate(0)
    if last is None:
        record(0, float("nan"), True)
        return TrainResult(records, net, True, kernels)
    record(0, last, False)
    for t in range(steps):
        idx = next(batches)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                tr = forward(net, dataset.X[idx])
                if tr.diverged:
                    raise DivergenceError("forward pass diverged")
                grads = backward(net, tr, loss_delta(loss, tr.f, dataset.y[idx]), lowrank=lowrank).grads
                optimizer_step(net, grads, state, opt.schedule, t)
        except DivergenceError:
            record(t + 1, last, True)
            return TrainResult(records, net, True, kernels)
        step = t + 1
        if step % record_every == 0 or step == steps or step in kernel_steps:
            with np.errstate(over="ignore", invalid="ignore"):
                value = evaluate(step)
            if value is None or not np.isfinite(value):
                record(step, last, True)
                return TrainResult(records, net, True, kernels)
            last = value
            if step % record_every == 0 or step == steps:
                record(step, value, False)
    return TrainResult(records, net, False, kernels)


def write_sweep_csv(records, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(SWEEP_HEADER + "\n")
        for r in records:
            fh.write(r.csv_row() + "\n")
