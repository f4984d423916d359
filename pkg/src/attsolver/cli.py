"""Command-line entry point.

Subcommands: generate, train, eval, baseline, sweep, ablate, multiplicative,
attack, probe, bench. All take ``--config``, ``--seed``, ``--out``, ``--jobs``
and any number of ``--set dotted.key=value`` overrides.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import experiments as ex
from .config import dataset_path, dump_config, get_split, load_config, make_split
from .data import write_dataset
from .errors import AttSolverError, ConfigurationError
from .nn import load_module
from .solvers import StepMode, as_mode, as_scheme
from .systems import spring_mass_matrix
from .training import fit, write_curves

log = logging.getLogger("attsolver")

EXPERIMENTS = ("eval", "sweep", "ablate", "multiplicative", "attack", "probe", "bench")
COMMANDS = ("generate", "train", "baseline") + EXPERIMENTS


def _config(args):
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides += [f"seeds=[{args.seed}]", f"train.seed={args.seed}"]
    if args.out is not None:
        overrides.append(f"out={args.out}")
    if args.jobs is not None:
        overrides.append(f"jobs={args.jobs}")
    if getattr(args, "data", None):
        overrides.append(f"data.dir={args.data}")
    return load_config(args.config, overrides)


def _checkpoint(cfg, args):
    path = getattr(args, "checkpoint", None) or cfg.experiment.checkpoint
    if path is None:
        return None
    if not os.path.exists(path):
        raise ConfigurationError(f"checkpoint {path} does not exist (key: experiment.checkpoint)")
    return load_module(path)


def cmd_generate(cfg, args) -> int:
    out = cfg.data.dir or os.path.join(cfg.out, "data")
    os.makedirs(out, exist_ok=True)
    for split in ("train", "val", "test"):
        ds = make_split(cfg, split)
        path = dataset_path(out, split)
        write_dataset(ds, path)
        print(f"{split}: M={ds.n_traj} N={ds.n_steps} d={ds.dim} k={ds.stride} rejected={ds.rejected} -> {path}")
    return 0


def cmd_train(cfg, args) -> int:
    if not cfg.data.dir:
        raise ConfigurationError("train needs a dataset directory (key: data.dir, flag: --data)")
    train, val = get_split(cfg, "train"), get_split(cfg, "val")
    os.makedirs(cfg.out, exist_ok=True)
    dump_config(cfg, os.path.join(cfg.out, "config.yaml"))
    scheme = as_scheme(cfg.scheme)
    report = fit(train, val, scheme, cfg.train_config(scheme), cfg.model, out_dir=cfg.out, resume=args.resume)
    write_curves(report, os.path.join(cfg.out, "curves.csv"))
    print(f"epochs={report.epochs} best_epoch={report.best_epoch} best_val_loss={report.best_val_loss!r} "
          f"baseline_val_loss={report.baseline_val_loss!r} -> {report.checkpoint}")
    return 0


def cmd_baseline(cfg, args) -> int:
    mse = ex.baseline_mse(cfg.scheme, get_split(cfg, "test"))
    print(f"baseline_mse {mse!r}")
    return 0


def cmd_eval(cfg, args) -> int:
    module = _checkpoint(cfg, args)
    mode = as_mode(cfg.train.mode) if module is not None else StepMode.CLASSIC
    result = ex.evaluate(module, cfg.scheme, mode, get_split(cfg, "test"))
    report = ex.ExperimentReport("eval", list(cfg.seeds), cfg.to_dict())
    report.add(scheme=cfg.scheme, mode=mode.value, mse=result.mse, explosion_rate=result.explosion_rate,
               n_exploded=result.n_exploded, n=result.n)
    report.write(os.path.join(cfg.out, "eval"))
    print(f"mse {result.mse!r}")
    print(f"explosion_rate {result.explosion_rate!r}")
    return 0


def cmd_probe(cfg, args) -> int:
    module = _checkpoint(cfg, args)
    system = cfg.make_system()
    test = get_split(cfg, "test")
    n = cfg.experiment.probe_steps or test.n_steps
    mode = as_mode(cfg.train.mode) if module is not None else StepMode.CLASSIC
    probe = ex.perturbation_probe(module, system, test.trajectories[0, 0], cfg.data.dt_coarse, n, cfg.scheme,
                                  mode, cfg.experiment.epsilon0, seed=cfg.seeds[0])
    report = ex.convergence_probe(module, test, cfg.scheme, mode if module is not None else "additive")
    report.series["epsilons"] = probe.epsilons
    report.series["growth_factors"] = probe.factors
    report.series["perturbation_exploded"] = probe.exploded
    if system.name == "spring_mass" and as_scheme(cfg.scheme).value == "euler" and module is None:
        bound = ex.euler_operator_norm(spring_mass_matrix(system), cfg.data.dt_coarse)
        report.series["operator_norm_bound"] = bound
        print(f"operator_norm_bound {bound!r}")
    report.write(os.path.join(cfg.out, "probe"))
    print(f"max_growth_factor {probe.max_factor!r}")
    return 0


def cmd_bench(cfg, args) -> int:
    module = _checkpoint(cfg, args)
    report = ex.speed_benchmark(cfg, module=module)
    paths = report.write(os.path.join(cfg.out, "bench"))
    for row in report.timing:
        print(", ".join(f"{k}={v}" for k, v in row.items()))
    print(f"-> {paths[-1]}")
    return 0


def _report_command(name):
    def run(cfg, args) -> int:
        if name == "sweep":
            report = ex.data_reduction_sweep(cfg)
            summary = report.aggregate("mse", "fraction")
        elif name == "ablate":
            report = ex.ablation_suite(cfg)
            summary = report.aggregate("mse", "arm")
        elif name == "multiplicative":
            report = ex.multiplicative_study(cfg)
            summary = report.aggregate("mean_attention", "mode")
        else:
            report = ex.noise_attack(cfg)
            summary = report.aggregate("explosion_rate", "mode")
        paths = report.write(os.path.join(cfg.out, name))
        for key, stats in summary.items():
            print(f"{key}: median={stats['median']!r} min={stats['min']!r} max={stats['max']!r} n={stats['n']}")
        print(f"-> {paths[0]}")
        return 0

    return run


HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "probe": cmd_probe,
    "bench": cmd_bench,
    "sweep": _report_command("sweep"),
    "ablate": _report_command("ablate"),
    "multiplicative": _report_command("multiplicative"),
    "attack": _report_command("attack"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="single seed (overrides seeds and train.seed)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=int, help="worker processes for independent runs")
    common.add_argument("--data", help="dataset directory holding train/val/test .atts files")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-path config override")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="attsolver", description="Learned-correction ODE solver laboratory")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(COMMANDS) + "}")
    sub.add_parser("generate", parents=[common], help="generate train/val/test datasets")
    train = sub.add_parser("train", parents=[common], help="train a correction module")
    train.add_argument("--resume", action="store_true", help="continue from the state in --out")
    sub.add_parser("baseline", parents=[common], help="Classic-solver test MSE")
    for name in EXPERIMENTS:
        p = sub.add_parser(name, parents=[common], help=f"run the {name} experiment")
        p.add_argument("--checkpoint", help="ATTW module file")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        return HANDLERS[args.command](cfg, args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (AttSolverError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
