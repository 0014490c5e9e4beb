"""Transfer sweeps, convergence-rate experiments and update-size probes.

Every task derives its random stream from ``(master_seed, seed)`` alone, so
results do not depend on the worker count or on which other cells run.
"""

from dataclasses import dataclass, field

import numpy as np

from depthlab.harness.data import normalized_inputs, synth_dataset
from depthlab.harness.fit import slope_fit
from depthlab.harness.parallel import run_tasks
from depthlab.harness.training import OptimizerSpec, run_training
from depthlab.limit import LayerTimeGrid, solve_lazy_limit
from depthlab.numerics.rng import RngStream
from depthlab.observables import ensemble_stats, measure_ntk, relative_feature_change
from depthlab.optim import Schedule, sgd_step
from depthlab.parameterization import ParamConfig, parse_scheme
from depthlab.resnet import forward, init_network, loss_and_grads

CONVERGENCE_HEADER = "axis,size,sq_error,stderr"


@dataclass
class ConvergenceReport:
    axis: str
    sizes: np.ndarray
    sq_errors: np.ndarray
    stderr: np.ndarray
    slope: float
    residual: float
    dropped: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sizes = np.asarray(self.sizes, dtype=np.float64)
        self.sq_errors = np.asarray(self.sq_errors, dtype=np.float64)
        self.stderr = np.asarray(self.stderr, dtype=np.float64)
        if np.any(np.diff(self.sizes) <= 0):
            raise ValueError("sizes must be strictly increasing")
        if np.any(self.sq_errors < 0):
            raise ValueError("squared errors must be non-negative")


def make_report(axis, sizes, errors, stderr, extra=None):
    fit = slope_fit(sizes, errors)
    return ConvergenceReport(axis, sizes, errors, stderr, fit.slope, fit.residual, fit.dropped, extra or {})


def write_convergence_csv(reports, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(CONVERGENCE_HEADER + "\n")
        for rep in reports:
            for s, e, se in zip(rep.sizes, rep.sq_errors, rep.stderr):
                fh.write(f"{rep.axis},{int(s)},{float(e)!r},{float(se)!r}\n")


def _sq_error_stderr(diff, var_of_mean):
    """Delta-method standard error of sum(diff^2) given per-entry variances of the mean."""
    return float(np.sqrt(np.sum(4 * diff ** 2 * var_of_mean + 2 * var_of_mean ** 2)))


# ---- learning-rate transfer --------------------------------------------------

@dataclass(frozen=True)
class TrainTask:
    cfg: ParamConfig
    lr: float
    seed: int
    master_seed: int
    steps: int
    record_every: int
    opt: OptimizerSpec
    data: tuple    # (D, P, teacher, noise_std, data_seed)


def _dataset(data):
    D, P, teacher, noise, data_seed = data
    return synth_dataset(D, P, teacher, noise, RngStream(data_seed, 0))


def run_train_task(task):
    ds = _dataset(task.data)
    opt = OptimizerSpec(task.opt.kind, task.opt.momentum, task.opt.weight_decay,
                        Schedule(task.opt.schedule.kind, task.lr, task.opt.schedule.warmup_steps,
                                 task.opt.schedule.total_steps),
                        task.opt.batch_size)
    cfg = task.cfg.with_(eta0=task.lr)
    stream = RngStream(task.master_seed).child(task.seed)
    res = run_training(cfg, ds, opt, task.steps, task.record_every, stream, seed=task.seed)
    return res.records


@dataclass
class TransferResult:
    records: list
    cells: dict          # (scheme, N, L) -> mean final loss per lr (nan where every seed diverged)
    optimum: dict        # (scheme, N, L) -> argmin index or None
    lr_grid: list
    verdict: dict        # scheme -> max pairwise |index difference| per axis, or None


def lr_transfer_experiment(schemes, cells, lr_grid, seeds, steps, base, data, opt=None,
                           master_seed=0, record_every=None, workers=None, min_grid=6):
    """Grid search over base learning rates for every (scheme, N, L) cell.

    ``cells`` lists (N, L) pairs; ``base`` is a ParamConfig supplying the
    remaining fields; ``data`` is (D, P, teacher, noise_std, data_seed).
    Diverged runs are left out of the seed mean; a cell where every seed
    diverged at some lr gets nan there.
    """
    lr_grid = [float(v) for v in lr_grid]
    if len(lr_grid) > 1:
        if len(lr_grid) < min_grid:
            raise ValueError(f"lr grid needs at least {min_grid} points")
        ratios = np.diff(np.log(lr_grid))
        if np.any(ratios <= 0) or not np.allclose(ratios, ratios[0], rtol=1e-6):
            raise ValueError("lr grid must be increasing and log-spaced")
    opt = opt or OptimizerSpec()
    record_every = record_every or max(1, steps)
    tasks = []
    for scheme in schemes:
        sch = parse_scheme(scheme)
        for N, L in cells:
            cfg = base.with_(scheme=sch, N=int(N), L=int(L))
            for lr in lr_grid:
                for seed in seeds:
                    tasks.append(TrainTask(cfg, lr, int(seed), master_seed, steps, record_every, opt, tuple(data)))
    results = run_tasks(run_train_task, tasks, workers)
    records = [r for recs in results for r in recs]
    finals = {}
    for task, recs in zip(tasks, results):
        key = (task.cfg.scheme.kind, task.cfg.N, task.cfg.L)
        last = recs[-1]
        finals.setdefault(key, {}).setdefault(task.lr, []).append(None if last.diverged else last.train_loss)
    cells_out, optimum = {}, {}
    for key, per_lr in finals.items():
        means = []
        for lr in lr_grid:
            ok = [v for v in per_lr[lr] if v is not None and np.isfinite(v)]
            means.append(float(np.mean(ok)) if len(ok) == len(per_lr[lr]) else float("nan"))
        cells_out[key] = means
        arr = np.array(means)
        optimum[key] = None if np.all(np.isnan(arr)) else int(np.nanargmin(arr))
    verdict = {}
    for scheme in schemes:
        kind = parse_scheme(scheme).kind
        idx = [optimum[k] for k in optimum if k[0] == kind]
        verdict[kind] = None if any(i is None for i in idx) else int(max(idx) - min(idx))
    return TransferResult(records, cells_out, optimum, lr_grid, verdict)


def index_spread(result, scheme, keys):
    """max - min optimal index over the given (N, L) cells, or None if any is undefined."""
    idx = [result.optimum[(scheme, N, L)] for N, L in keys]
    if any(i is None for i in idx):
        return None
    return int(max(idx) - min(idx))


# ---- predictor convergence after training ------------------------------------

@dataclass(frozen=True)
class LogitTask:
    cfg: ParamConfig
    seed: int
    master_seed: int
    steps: int
    opt: OptimizerSpec
    data: tuple
    n_probe: int


def run_logit_task(task):
    """Train for ``steps`` and return logits on the held-out probe batch (nan if diverged)."""
    ds = _dataset(task.data)
    train = ds.subset(np.arange(task.n_probe, ds.P))
    probe = ds.X[:task.n_probe]
    stream = RngStream(task.master_seed).child(task.seed)
    res = run_training(task.cfg, train, task.opt, task.steps, max(1, task.steps), stream,
                       seed=task.seed, eval_size=task.opt.batch_size)
    if res.diverged:
        return np.full(task.n_probe, np.nan)
    return forward(res.net, probe).f


def depth_convergence_experiment(N_list, L_list, proxy, ensembles, steps, base, data, opt=None,
                                 n_probe=64, master_seed=0, workers=None):
    """Squared distance of trained logits from an ensemble-averaged wide, deep proxy.

    Returns (single-network report, ensemble-averaged report) for the
    largest N, plus all per-cell errors in ``extra``.  Seeds are shared
    between the tested cells and the proxy; the proxy averages over all of
    them.
    """
    if ensembles < 2:
        raise ValueError("need at least 2 ensemble members")
    Np, Lp = proxy
    if max(L_list) >= Lp or max(N_list) > Np:
        raise ValueError("proxy must be at least as wide and strictly deeper than every tested network")
    opt = opt or OptimizerSpec()
    cells = [(int(N), int(L)) for N in N_list for L in L_list] + [(int(Np), int(Lp))]
    tasks = [LogitTask(base.with_(N=N, L=L), seed, master_seed, steps, opt, tuple(data), n_probe)
             for N, L in cells for seed in range(ensembles)]
    out = run_tasks(run_logit_task, tasks, workers)
    logits = {}
    for task, f in zip(tasks, out):
        logits.setdefault((task.cfg.N, task.cfg.L), []).append(f)
    target = np.nanmean(np.array(logits[(int(Np), int(Lp))]), axis=0)
    single, averaged = {}, {}
    for N, L in cells[:-1]:
        F = np.array(logits[(N, L)])
        F = F[np.all(np.isfinite(F), axis=1)]
        per_seed = np.mean((F - target) ** 2, axis=1)
        single[(N, L)] = (float(per_seed.mean()), float(per_seed.std(ddof=1) / np.sqrt(len(per_seed))))
        fbar = F.mean(axis=0)
        var_mean = F.var(axis=0, ddof=1) / len(F)
        d = fbar - target
        averaged[(N, L)] = (float(np.mean(d ** 2)), _sq_error_stderr(d, var_mean) / len(d))
    Nmax = int(max(N_list))
    Ls = sorted(int(L) for L in L_list)
    rep1 = make_report("L", Ls, [single[(Nmax, L)][0] for L in Ls], [single[(Nmax, L)][1] for L in Ls],
                       {"cells": single})
    rep2 = make_report("L", Ls, [averaged[(Nmax, L)][0] for L in Ls], [averaged[(Nmax, L)][1] for L in Ls],
                       {"cells": averaged})
    return rep1, rep2


# ---- initial NTK vs. the lazy limit --------------------------------------------

def probe_inputs(D, angles=(0.0, np.pi / 3, 2 * np.pi / 3)):
    """Unit-kernel inputs at the given angles in the first coordinate plane."""
    X = np.zeros((len(angles), D))
    X[:, 0] = np.cos(angles)
    X[:, 1] = np.sin(angles)
    return X * np.sqrt(D)


@dataclass(frozen=True)
class NTKTask:
    cfg: ParamConfig
    X: tuple
    seed: int
    master_seed: int
    method: str


def run_ntk_task(task):
    X = np.array(task.X)
    net = init_network(task.cfg, RngStream(task.master_seed).child(task.seed), method=task.method)
    return measure_ntk(net, X)[0].values


def init_ntk_ensemble(cfg, X, ensembles, master_seed=0, method="implicit", workers=None):
    X = tuple(map(tuple, np.asarray(X, dtype=np.float64)))
    tasks = [NTKTask(cfg, X, s, master_seed, method) for s in range(ensembles)]
    return np.array(run_tasks(run_ntk_task, tasks, workers))


def ntk_init_convergence(act, N, L_list, ensembles, D=16, X=None, grid=None, master_seed=0,
                         method="implicit", workers=None, scheme="mup_sqrtl"):
    """Ensemble-mean initial NTK of the hidden blocks against the lazy-limit NTK.

    Read-in and read-out are frozen so both sides are the same layer
    integral.  ``sq_error`` sums squared differences over the upper
    triangle of the probe kernel; ``extra['noise_floor']`` is the part of
    its expectation due to finite ensembles (summed variance of the mean).
    """
    if ensembles < 2:
        raise ValueError("need at least 2 ensemble members")
    X = probe_inputs(D) if X is None else np.asarray(X, dtype=np.float64)
    Kx = X @ X.T / X.shape[1]
    limit = solve_lazy_limit(act, Kx, grid or LayerTimeGrid())
    iu = np.triu_indices(X.shape[0])
    Ls = sorted(int(L) for L in L_list)
    errs, ses, floors, means = [], [], [], {}
    for L in Ls:
        cfg = ParamConfig(N=N, L=L, D=X.shape[1], act=act, scheme=parse_scheme(scheme),
                          train_readin=False, train_readout=False)
        Ks = init_ntk_ensemble(cfg, X, ensembles, master_seed, method, workers)
        st = ensemble_stats([k[iu] for k in Ks])
        d = st.mean - limit.K[iu]
        vm = st.var / st.E
        errs.append(float(np.sum(d ** 2)))
        ses.append(_sq_error_stderr(d, vm))
        floors.append(float(np.sum(vm)))
        means[L] = st.mean
    return make_report("L", Ls, errs, ses, {"noise_floor": floors, "limit": limit.K[iu], "means": means})


# ---- fluctuations and one-step update sizes ---------------------------------------

def ntk_diag_variance(cfg, ensembles, master_seed=0, method="implicit", workers=None):
    """Unbiased variance over seeds of K(x, x) for one normalised input."""
    X = probe_inputs(cfg.D, angles=(0.0,))
    Ks = init_ntk_ensemble(cfg, X, ensembles, master_seed, method, workers)
    return float(ensemble_stats(Ks[:, 0, 0]).var)


@dataclass(frozen=True)
class StepTask:
    cfg: ParamConfig
    seed: int
    master_seed: int
    data: tuple
    batch: int
    layer: int
    method: str


def run_step_task(task):
    """(relative feature change at ``layer``, mean |f1 - f0|) after one SGD step on one batch."""
    ds = _dataset(task.data)
    X, y = ds.X[:task.batch], ds.y[:task.batch]
    net = init_network(task.cfg, RngStream(task.master_seed).child(task.seed), method=task.method)
    tr0, _, grads = loss_and_grads(net, X, y)
    if grads is None:
        return float("nan"), float("nan")
    with np.errstate(over="ignore", invalid="ignore"):
        sgd_step(net, grads, Schedule("constant", task.cfg.eta0), 0)
        tr1 = forward(net, X)
    if tr1.diverged:
        return float("inf"), float("inf")
    return (relative_feature_change(net.act, tr0, tr1, task.layer),
            float(np.mean(np.abs(tr1.f - tr0.f))))


def one_step_update_sizes(cfg, seeds, data, batch=8, master_seed=0, method="implicit", workers=None):
    """Seed-averaged one-step feature change at the middle block and output change."""
    layer = cfg.L // 2 + 1
    tasks = [StepTask(cfg, s, master_seed, tuple(data), batch, layer, method) for s in range(seeds)]
    vals = np.array(run_tasks(run_step_task, tasks, workers))
    return float(np.mean(vals[:, 0])), float(np.mean(vals[:, 1]))


# ---- deep linear one-step kernel change --------------------------------------------

@dataclass(frozen=True)
class OneStepTask:
    cfg: ParamConfig
    seed: int
    master_seed: int
    y: float
    layers: tuple
    method: str


def run_onestep_task(task):
    """Preactivation kernels (1/N)|h|^2 at ``layers`` before and after one SGD step on one sample."""
    D = task.cfg.D
    x = np.ones((1, D))
    net = init_network(task.cfg, RngStream(task.master_seed).child(task.seed), method=task.method)
    tr0, _, grads = loss_and_grads(net, x, np.array([task.y]))
    sgd_step(net, grads, Schedule("constant", task.cfg.eta0), 0)
    tr1 = forward(net, x)
    h0 = np.array([np.mean(tr0.h[l] ** 2) for l in task.layers])
    h1 = np.array([np.mean(tr1.h[l] ** 2) for l in task.layers])
    return h0, h1


def linear_onestep_experiment(N, L, taus, seeds, D=16, eta0=1.0, gamma0=1.0, y=1.0, master_seed=0,
                              method="implicit", workers=None, train_readin=False):
    """Seed-averaged H1(tau) - H0(tau) of a deep linear net after one step on one normalised sample.

    Returns measured changes together with the closed form built on the
    pinned initial gradient profile and the (1 + e^-1) bracket variant; both take
    H1(0) from the simulated network.
    """
    from depthlab.limit import linear_onestep_profile, linear_onestep_update

    taus = np.asarray(taus, dtype=np.float64)
    layers = tuple([0] + [int(round(t * L)) for t in taus])
    cfg = ParamConfig(N=N, L=L, D=D, act="linear", gamma0=gamma0, eta0=eta0, train_readin=train_readin)
    tasks = [OneStepTask(cfg, s, master_seed, y, layers, method) for s in range(seeds)]
    out = run_tasks(run_onestep_task, tasks, workers)
    h0 = np.mean([o[0] for o in out], axis=0)
    h1 = np.mean([o[1] for o in out], axis=0)
    measured = h1[1:] - h0[1:]
    shift = np.exp(taus) * (h1[0] - h0[0])
    predicted = shift + linear_onestep_update(taus, eta0, gamma0, y)
    bracket = linear_onestep_profile(h1[0], taus, eta0, gamma0, y) - np.exp(taus) * h0[0]
    return {"taus": taus, "measured": measured, "predicted": predicted, "bracket": bracket,
            "H0": h0, "H1": h1}


def linear_g0_profile(N, L, taus, seeds, D=16, master_seed=0, method="implicit", workers=None):
    """Seed-averaged G at layer time tau, i.e. (1/N)|g^{l+1}|^2 with l = tau L, in a deep linear net."""
    cfg = ParamConfig(N=N, L=L, D=D, act="linear")
    layers = tuple(int(round(t * L)) for t in taus)
    tasks = [GTask(cfg, s, master_seed, layers, method) for s in range(seeds)]
    return np.mean(run_tasks(run_g_task, tasks, workers), axis=0)


@dataclass(frozen=True)
class GTask:
    cfg: ParamConfig
    seed: int
    master_seed: int
    layers: tuple
    method: str


def run_g_task(task):
    from depthlab.resnet import backward

    x = np.ones((1, task.cfg.D))
    net = init_network(task.cfg, RngStream(task.master_seed).child(task.seed), method=task.method)
    tr = forward(net, x)
    bt = backward(net, tr, np.ones(1))
    return np.array([np.mean(bt.g[l] ** 2) for l in task.layers])


# ---- gradient check ------------------------------------------------------------------

def gradient_check(N, L, D, act, schemes, K_list, P=4, epsilon=1e-5, master_seed=0, alpha=1.0):
    """Backward against central differences for every scheme, K and read-in/read-out flag pair.

    Returns rows (scheme, K, train_readin, train_readout, tensor, relative error).
    """
    from depthlab.resnet import finite_diff_grad, relative_error

    root = RngStream(master_seed)
    data = root.child(0)
    X = normalized_inputs(P, D, data.child(0))
    y = data.child(1).normal(P)
    rows = []
    for scheme in schemes:
        sch = parse_scheme(scheme, alpha if parse_scheme(scheme).kind == "mup_alpha" else 0.5)
        for K in K_list:
            for ri in (True, False):
                for ro in (True, False):
                    cfg = ParamConfig(N=N, L=L, D=D, K=K, act=act, scheme=sch, gamma0=1.0,
                                      train_readin=ri, train_readout=ro)
                    net = init_network(cfg, root.child(1))
                    _, _, grads = loss_and_grads(net, X, y)
                    fd = finite_diff_grad(net, X, y, epsilon=epsilon)
                    for name in net.trainable_names():
                        rows.append((sch.kind, K, ri, ro, name, relative_error(grads[name], fd[name])))
    return rows
