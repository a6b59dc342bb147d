"""``dfakd`` command line.

Exit status: 0 on success, 2 for usage or configuration errors, 1 for
runtime failures (a one-line diagnostic goes to stderr).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .. import tensor as T
from ..checkpoint import load_checkpoint
from ..gradcheck import REL_TOL, run_suite
from ..search import evaluate, load_weights, stage_time_probe
from . import experiments as ex
from .config import PRESETS, THREADS_ENV, ConfigError, ExperimentConfig, load_config


class UsageError(Exception):
    pass


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (JSON); defaults to the toy preset")
    common.add_argument("--preset", choices=sorted(PRESETS), help="built-in config used when --config is absent")
    common.add_argument("--seed", type=int, help="run seed (default: first seed of the config)")
    common.add_argument("--output-dir", help="override the config's output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="dfakd", description="Differentiable feature aggregation distillation")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, description=help_text)

    add("train-teacher", "train the teacher on train+val and save its checkpoint")
    add("search", "stage 1: search aggregation weights group by group")
    p = add("distill", "stage 2: distill a fresh student with fixed aggregation weights")
    p.add_argument("--alpha", required=True, help="alpha.weights file from a search run")
    p = add("baseline", "distill with hand-crafted weights, or train the student alone")
    p.add_argument("--scheme", required=True, choices=["last", "average", "random", "student"])
    add("dfa", "full method: search, then distill with the searched weights")
    p = add("sweep-lambda", "full DFA runs over regularization strengths")
    p.add_argument("--values", type=_float_list, default=[0.0, 1e-5, 1e-4, 1e-3], help="comma-separated lambdas")
    add("gradcheck", "finite-difference check of every autodiff op")
    p = add("timeprobe", "median per-iteration time of search and distillation steps")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--iters", type=int, default=10)
    p = add("export-heatmap", "write heatmap_g<i>.csv from a search run's alpha logs")
    p.add_argument("--run-dir", required=True)
    p = add("eval", "test accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p = add("compare", "mean/std accuracy per method over run directories")
    p.add_argument("run_dirs", nargs="+")
    p = add("transfer", "search on this config's task, distill on the target config's task")
    p.add_argument("--target-config", required=True)
    add("show-config", "print the resolved config")
    return parser


def resolve_config(args) -> ExperimentConfig:
    if args.config:
        config = load_config(args.config)
    else:
        config = PRESETS[args.preset or "toy"]()
    if args.output_dir:
        config = config.replace(output_dir=args.output_dir)
    return config


def _seed(args, config: ExperimentConfig) -> int:
    return config.seeds[0] if args.seed is None else args.seed


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _dispatch(args) -> int:
    config = resolve_config(args)
    seed = _seed(args, config)
    cmd = args.command

    if cmd == "show-config":
        print(config.to_text(), end="")
        print(f"# hash {config.content_hash()}")
        return 0
    if cmd == "gradcheck":
        results = run_suite()
        worst = max(err for _, err in results)
        for name, err in results:
            print(f"{name:50s} {err:.3e}")
        print(f"cases={len(results)} max_rel_error={worst:.3e} tol={REL_TOL:g}")
        return 0 if worst <= REL_TOL else 1
    if cmd == "train-teacher":
        path = ex.train_teacher(config, seed)
        print(f"teacher checkpoint {path} test_acc={ex.teacher_accuracy(config):.4f}")
        return 0
    if cmd == "search":
        weights, run = ex.search(config, seed)
        print(f"search run {run.dir}")
        for i, a in enumerate(weights.alphas()):
            print(f"group {i}: alpha = {np.array2string(a, precision=4)}")
        return 0
    if cmd == "distill":
        weights, _ = load_weights(args.alpha)
        result, run = ex.distill(config, seed, weights.frozen(), "dfa")
        print(f"distill run {run.dir} test_acc={result.final_accuracy:.4f}")
        return 0
    if cmd in ("baseline", "dfa"):
        method = "dfa" if cmd == "dfa" else args.scheme
        row = ex.run_method(config, method, seed)
        print(f"{method} run {row['run_dir']} test_acc={row['test_acc']:.4f} wall_time={row['wall_time']:.1f}s")
        return 0
    if cmd == "sweep-lambda":
        seeds = [seed] if args.seed is not None else None
        rows = ex.sweep_lambda(config, args.values, seeds)
        print("lambda_reg,seed,test_acc,run_dir")
        for r in rows:
            print(f"{r['lambda_reg']:g},{r['seed']},{r['test_acc']:.4f},{r['run_dir']}")
        return 0
    if cmd == "timeprobe":
        teacher = ex.load_teacher(config) if config.teacher_checkpoint_path().exists() else ex._build(config, "teacher", seed)
        student = ex._build(config, "student", seed)
        train = ex.datasets(config)[0]
        x, y = train.images[: args.batch_size], train.labels[: args.batch_size]
        with T.precision(config.precision):
            timing = stage_time_probe(teacher, student, x, y, iters=args.iters, loss_weights=config.loss)
        bound = 2 * (timing["t_teacher"] + timing["t_student"])
        timing["bound_2tT_plus_tS"] = bound
        timing["within_25pct"] = timing["t1"] <= 1.25 * bound
        _print_json(timing)
        return 0
    if cmd == "export-heatmap":
        for path in ex.export_heatmap(args.run_dir):
            print(path)
        return 0
    if cmd == "eval":
        net, manifest = load_checkpoint(args.checkpoint)
        with T.precision("fp32" if manifest["dtype"] == "float32" else "fp64"):
            acc = evaluate(net, ex.datasets(config)[2])
        print(f"test_acc={acc:.4f}")
        return 0
    if cmd == "compare":
        try:
            table = ex.compare_runs(args.run_dirs)
        except ValueError as err:
            raise UsageError(str(err)) from err
        print(ex.format_table(table))
        return 0
    if cmd == "transfer":
        target = load_config(args.target_config)
        if args.output_dir:
            target = target.replace(output_dir=args.output_dir)
        _print_json(ex.transfer(config, target, seed))
        return 0
    raise UsageError(f"unknown command {cmd}")


def _limit_threads():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return int(err.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        limiter = _limit_threads()
        try:
            return _dispatch(args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except (ConfigError, UsageError) as err:
        print(f"dfakd: error: {err}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("dfakd: interrupted", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - the CLI reports every runtime failure the same way
        print(f"dfakd: error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
