"""Command-line front end.

Usage: ``depthlab <subcommand> [--config FILE] [--out DIR] [--workers N] [--key value ...]``

Config files hold ``key = value`` lines; ``#`` starts a comment.  Flags
override file values.  Every run writes ``config.txt`` (the resolved
configuration), its CSV outputs and ``summary.txt`` into the output
directory.  Exit codes: 0 success, 1 check failed, 2 config error,
3 every run diverged (outputs still written).
"""

import argparse
import math
import os
import sys
from pathlib import Path

import numpy as np

SUBCOMMANDS = ("train", "sweep", "ntk-init", "limit-ode", "linear-onestep", "converge", "gradcheck")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


def _bool(v):
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _list(conv):
    def parse(v):
        return [conv(x.strip()) for x in str(v).split(",") if x.strip()]
    parse.__name__ = f"list of {conv.__name__}"
    return parse


def _float(v):
    s = str(v).strip()
    if "^" in s:                      # 2^-3 style powers
        base, exp = s.split("^", 1)
        return float(base) ** float(exp)
    return float(s)


_float.__name__ = "float"

# key -> (parser, default)
KEYS = {
    "master_seed": (int, 0),
    # model
    "N": (int, 64), "L": (int, 8), "D": (int, 32), "K": (int, 1),
    "gamma0": (_float, 1.0), "eta0": (_float, 0.0625),
    "scheme": (str, "mup_sqrtl"), "alpha": (_float, 0.5), "act": (str, "relu"),
    "zero_block_readout": (_bool, False), "branch_multiplier": (_float, 1.0),
    "train_readin": (_bool, True), "train_readout": (_bool, True),
    # optimizer
    "optimizer": (str, "sgd"), "momentum": (_float, 0.0), "weight_decay": (_float, 0.0),
    "schedule": (str, "constant"), "warmup_steps": (int, 0), "total_steps": (int, 0),
    "batch_size": (int, 32),
    # data
    "P": (int, 2048), "teacher": (str, "shallow-relu"), "noise_std": (_float, 0.0), "data_seed": (int, 1234),
    # training and sweeps
    "steps": (int, 200), "record_every": (int, 50), "seeds": (int, 2),
    "schemes": (_list(str), ["mup_sqrtl"]), "N_list": (_list(int), [64]), "L_list": (_list(int), [4, 8, 16]),
    "lr_grid": (_list(_float), [2.0 ** e for e in range(-7, 1)]),
    # kernels and limits
    "ensembles": (int, 8), "method": (str, "implicit"), "M": (int, 512),
    "probe_angles": (_list(_float), [0.0]),
    "taus": (_list(_float), [0.25, 0.5, 0.75, 1.0]), "y": (_float, 1.0),
    # convergence after training
    "proxy_N": (int, 128), "proxy_L": (int, 32), "n_probe": (int, 64),
    # gradient check
    "K_list": (_list(int), [1, 2]), "P_check": (int, 4), "epsilon": (_float, 1e-5), "tolerance": (_float, 1e-5),
}

# keys echoed for each subcommand (the rest are ignored by it, still validated)
USES = {
    "train": ["N", "L", "D", "K", "gamma0", "eta0", "scheme", "alpha", "act", "zero_block_readout",
              "branch_multiplier", "train_readin", "train_readout", "optimizer", "momentum", "weight_decay",
              "schedule", "warmup_steps", "total_steps", "batch_size", "P", "teacher", "noise_std",
              "data_seed", "steps", "record_every", "seeds"],
    "sweep": ["D", "K", "gamma0", "act", "alpha", "branch_multiplier", "train_readin", "train_readout",
              "optimizer", "momentum", "weight_decay", "schedule", "warmup_steps", "total_steps",
              "batch_size", "P", "teacher", "noise_std", "data_seed", "steps", "seeds", "schemes",
              "N_list", "L_list", "lr_grid"],
    "ntk-init": ["N", "L_list", "D", "act", "scheme", "ensembles", "method", "M", "probe_angles"],
    "limit-ode": ["act", "M", "probe_angles"],
    "linear-onestep": ["N", "L", "D", "gamma0", "eta0", "y", "seeds", "method", "taus"],
    "converge": ["N_list", "L_list", "D", "K", "gamma0", "eta0", "scheme", "alpha", "act", "batch_size",
                 "P", "teacher", "noise_std", "data_seed", "steps", "ensembles", "proxy_N", "proxy_L",
                 "n_probe"],
    "gradcheck": ["N", "L", "D", "act", "schemes", "alpha", "K_list", "P_check", "epsilon", "tolerance"],
}
COMMON = ["master_seed"]

SUBCOMMAND_DEFAULTS = {
    "ntk-init": {"N": 256, "L_list": [4, 8, 16, 32], "ensembles": 8},
    "linear-onestep": {"N": 512, "L": 32, "D": 16, "eta0": 1.0, "seeds": 4},
    "gradcheck": {"N": 16, "L": 8, "D": 8, "act": "tanh", "schemes": ["sp", "mup", "mup_sqrtl", "mup_alpha"],
                  "alpha": 1.0},
    "converge": {"N_list": [64, 128], "L_list": [2, 4, 8, 16], "steps": 100, "ensembles": 4},
    "sweep": {"steps": 100, "N_list": [64], "L_list": [4, 8], "P": 512},
    "train": {"P": 512},
}


def parse_config_text(text, source="<config>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = value
    return out


def resolve_config(command, file_values, overrides):
    raw = dict(file_values)
    raw.update(overrides)
    unknown = sorted(k for k in raw if k not in KEYS)
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]}")
    cfg = {k: v for k, (_, v) in KEYS.items()}
    cfg.update(SUBCOMMAND_DEFAULTS.get(command, {}))
    for key, value in raw.items():
        parser = KEYS[key][0]
        try:
            cfg[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from None
    return cfg


def _fmt(v):
    if isinstance(v, list):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def echo_config(command, cfg, path):
    keys = COMMON + USES[command]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# depthlab {command}\n")
        for k in keys:
            fh.write(f"{k} = {_fmt(cfg[k])}\n")


def _param_config(c, **kw):
    from depthlab.parameterization import ParamConfig, parse_scheme

    fields = dict(N=c["N"], L=c["L"], D=c["D"], K=c["K"], gamma0=c["gamma0"], eta0=c["eta0"] or 1.0,
                  scheme=parse_scheme(c["scheme"], c["alpha"]), act=c["act"],
                  zero_block_readout=c["zero_block_readout"], branch_multiplier=c["branch_multiplier"],
                  train_readin=c["train_readin"], train_readout=c["train_readout"])
    fields.update(kw)
    return ParamConfig(**fields)


def _opt_spec(c, lr=None):
    from depthlab.harness.training import OptimizerSpec
    from depthlab.optim import Schedule

    return OptimizerSpec(c["optimizer"], c["momentum"], c["weight_decay"],
                         Schedule(c["schedule"], c["eta0"] if lr is None else lr, c["warmup_steps"],
                                  c["total_steps"]),
                         c["batch_size"])


def _data_tuple(c):
    return (c["D"], c["P"], c["teacher"], c["noise_std"], c["data_seed"])


def _write_summary(out, lines):
    with open(out / "summary.txt", "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")


# ---- subcommands ------------------------------------------------------------------

def cmd_train(c, out, workers):
    from depthlab.harness.experiments import TrainTask, run_train_task
    from depthlab.harness.parallel import run_tasks
    from depthlab.harness.training import write_sweep_csv

    cfg = _param_config(c)
    tasks = [TrainTask(cfg, c["eta0"], s, c["master_seed"], c["steps"], c["record_every"], _opt_spec(c),
                       _data_tuple(c)) for s in range(c["seeds"])]
    runs = run_tasks(run_train_task, tasks, workers)
    write_sweep_csv([r for recs in runs for r in recs], out / "train.csv")
    lines = [f"runs = {len(runs)}"]
    for s, recs in enumerate(runs):
        lines.append(f"seed {s}: final_loss = {float(recs[-1].train_loss)!r} diverged = {_fmt(recs[-1].diverged)}")
    _write_summary(out, lines)
    return EXIT_DIVERGED if all(recs[-1].diverged for recs in runs) else EXIT_OK


def cmd_sweep(c, out, workers):
    from depthlab.harness.experiments import lr_transfer_experiment
    from depthlab.harness.training import write_sweep_csv

    cells = [(N, L) for N in c["N_list"] for L in c["L_list"]]
    res = lr_transfer_experiment(c["schemes"], cells, c["lr_grid"], range(c["seeds"]), c["steps"],
                                 _param_config(c), _data_tuple(c), opt=_opt_spec(c), master_seed=c["master_seed"],
                                 workers=workers)
    write_sweep_csv(res.records, out / "sweep.csv")
    with open(out / "optimum.csv", "w", encoding="utf-8") as fh:
        fh.write("scheme,N,L,opt_index,opt_lr\n")
        for (scheme, N, L), idx in res.optimum.items():
            lr = "" if idx is None else repr(res.lr_grid[idx])
            fh.write(f"{scheme},{N},{L},{'' if idx is None else idx},{lr}\n")
    lines = ["optimal learning rate (index into lr_grid):"]
    for (scheme, N, L), idx in res.optimum.items():
        shown = "all diverged" if idx is None else f"{idx} (lr = {float(res.lr_grid[idx])!r})"
        lines.append(f"  {scheme} N={N} L={L}: {shown}")
    for scheme, spread in res.verdict.items():
        lines.append(f"index spread {scheme}: {'undefined' if spread is None else spread}")
    _write_summary(out, lines)
    all_div = all(r.diverged for r in res.records if r.step == max(x.step for x in res.records if x.seed == r.seed))
    return EXIT_DIVERGED if all(idx is None for idx in res.optimum.values()) and all_div else EXIT_OK


def _probe(c):
    from depthlab.harness.experiments import probe_inputs

    return probe_inputs(c["D"], angles=tuple(c["probe_angles"]))


def cmd_ntk_init(c, out, workers):
    from depthlab.harness.experiments import ntk_init_convergence, write_convergence_csv
    from depthlab.limit import LayerTimeGrid

    rep = ntk_init_convergence(c["act"], c["N"], c["L_list"], c["ensembles"], X=_probe(c),
                               grid=LayerTimeGrid(c["M"]), master_seed=c["master_seed"], method=c["method"],
                               workers=workers, scheme=c["scheme"])
    write_convergence_csv([rep], out / "convergence.csv")
    lines = [f"slope = {float(rep.slope)!r}", f"fit_residual = {float(rep.residual)!r}"]
    for L, e, fl in zip(rep.sizes, rep.sq_errors, rep.extra["noise_floor"]):
        lines.append(f"L={int(L)}: sq_error = {float(e)!r} ensemble_noise = {float(fl)!r}")
    _write_summary(out, lines)
    return EXIT_OK


def cmd_limit_ode(c, out, workers):
    from depthlab.limit import LayerTimeGrid, solve_lazy_limit, write_profile_csv
    from depthlab.observables import write_kernel_csv

    X = _probe(c)
    lk = solve_lazy_limit(c["act"], X @ X.T / X.shape[1], LayerTimeGrid(c["M"]))
    write_profile_csv(lk, out / "profile.csv")
    write_kernel_csv(lk.K, out / "ntk.csv")
    lines = [f"act = {c['act']}", f"M = {c['M']}",
             f"H(1) = {float(lk.H[-1, 0, 0])!r}", f"G(0) = {float(lk.G[0, 0, 0])!r}", f"K = {float(lk.K[0, 0])!r}"]
    if c["act"] == "linear":
        lines.append(f"H(1) - e*H(0) = {float(lk.H[-1, 0, 0] - math.e * lk.H[0, 0, 0])!r}")
    _write_summary(out, lines)
    return EXIT_OK


def cmd_linear_onestep(c, out, workers):
    from depthlab.harness.experiments import linear_onestep_experiment

    res = linear_onestep_experiment(c["N"], c["L"], c["taus"], c["seeds"], D=c["D"], eta0=c["eta0"],
                                    gamma0=c["gamma0"], y=c["y"], master_seed=c["master_seed"],
                                    method=c["method"], workers=workers)
    with open(out / "onestep.csv", "w", encoding="utf-8") as fh:
        fh.write("tau,measured,closed_form,bracket_form\n")
        for row in zip(res["taus"], res["measured"], res["predicted"], res["bracket"]):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    rel = np.abs(res["measured"] / res["predicted"] - 1)
    lines = [f"max_relative_error_closed_form = {float(rel.max())!r}",
             f"max_relative_error_bracket_form = {float(np.abs(res['measured'] / res['bracket'] - 1).max())!r}"]
    _write_summary(out, lines)
    return EXIT_OK


def cmd_converge(c, out, workers):
    from depthlab.harness.experiments import depth_convergence_experiment, write_convergence_csv
    from depthlab.harness.training import OptimizerSpec
    from depthlab.optim import Schedule

    base = _param_config(c)
    opt = OptimizerSpec(schedule=Schedule("constant", c["eta0"]), batch_size=c["batch_size"])
    single, avg = depth_convergence_experiment(c["N_list"], c["L_list"], (c["proxy_N"], c["proxy_L"]),
                                               c["ensembles"], c["steps"], base, _data_tuple(c), opt=opt,
                                               n_probe=c["n_probe"], master_seed=c["master_seed"],
                                               workers=workers)
    avg.axis = "L_ensemble"
    write_convergence_csv([single, avg], out / "convergence.csv")
    _write_summary(out, [f"slope_single = {float(single.slope)!r}", f"slope_ensemble = {float(avg.slope)!r}",
                         f"fit_residual_single = {float(single.residual)!r}",
                         f"fit_residual_ensemble = {float(avg.residual)!r}"])
    return EXIT_OK


def cmd_gradcheck(c, out, workers):
    from depthlab.harness.experiments import gradient_check

    rows = gradient_check(c["N"], c["L"], c["D"], c["act"], c["schemes"], c["K_list"], P=c["P_check"],
                          epsilon=c["epsilon"], master_seed=c["master_seed"], alpha=c["alpha"])
    with open(out / "gradcheck.csv", "w", encoding="utf-8") as fh:
        fh.write("scheme,K,train_readin,train_readout,tensor,rel_error\n")
        for r in rows:
            fh.write(f"{r[0]},{r[1]},{int(r[2])},{int(r[3])},{r[4]},{float(r[5])!r}\n")
    worst = max(r[5] for r in rows)
    print(f"max relative error: {worst:.3e}")
    _write_summary(out, [f"max_relative_error = {float(worst)!r}", f"tolerance = {float(c['tolerance'])!r}",
                         f"passed = {_fmt(worst < c['tolerance'])}"])
    return EXIT_OK if worst < c["tolerance"] else EXIT_FAIL


HANDLERS = {"train": cmd_train, "sweep": cmd_sweep, "ntk-init": cmd_ntk_init, "limit-ode": cmd_limit_ode,
            "linear-onestep": cmd_linear_onestep, "converge": cmd_converge, "gradcheck": cmd_gradcheck}


def _split_overrides(rest):
    overrides = {}
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(rest):
                raise ConfigError(f"missing value for --{key}")
            value = rest[i + 1]
            i += 1
        overrides[key.replace("-", "_") if key.replace("-", "_") in KEYS else key] = value
        i += 1
    return overrides


def build_parser():
    p = argparse.ArgumentParser(prog="depthlab", description="Depth- and width-scaling laboratory.")
    p.add_argument("command", choices=SUBCOMMANDS, help="experiment to run")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", default="depthlab_out", help="output directory")
    p.add_argument("--workers", type=int, default=None, help="parallel worker processes (default $DEPTHLAB_WORKERS or 1)")
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if argv and argv[0] in ("-h", "--help"):
        parser.print_help()
        return EXIT_OK
    if not argv or argv[0] not in SUBCOMMANDS:
        parser.print_usage(sys.stderr)
        bad = argv[0] if argv else "(none)"
        print(f"depthlab: unknown subcommand {bad}; choose from {', '.join(SUBCOMMANDS)}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit:
        return EXIT_CONFIG
    try:
        file_values = {}
        if args.config:
            if not os.path.isfile(args.config):
                raise ConfigError(f"config file not found (key 'config'): {args.config}")
            file_values = parse_config_text(Path(args.config).read_text(encoding="utf-8"), args.config)
        cfg = resolve_config(args.command, file_values, _split_overrides(rest))
        from depthlab.harness.parallel import default_workers
        workers = args.workers if args.workers is not None else default_workers()
        if workers < 1:
            raise ConfigError("workers must be at least 1")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        echo_config(args.command, cfg, out / "config.txt")
        return HANDLERS[args.command](cfg, out, workers)
    except ConfigError as exc:
        print(f"depthlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"depthlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
