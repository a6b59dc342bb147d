"""Run orchestration: teacher training, search, distillation, baselines, sweeps.

Every run owns one directory under the configured output root::

    <root>/<run_id>/config.resolved   resolved config, content hash, method, seed
                    metrics.csv       one row per (stage, epoch, group)
                    timing.csv        wall time per metrics row
                    alpha.weights     aggregation weights searched or used
                    checkpoints/      network checkpoints
                    heatmap_g<i>.csv  per-group alpha over search epochs
"""

from __future__ import annotations

import json
import logging
import shutil
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import tensor as T
from ..checkpoint import load_checkpoint, save_checkpoint
from ..data import Dataset, concat, load_dataset
from ..losses import AggregationWeights
from ..networks import GroupedNetwork
from ..search import (
    baseline_weights,
    evaluate,
    load_weights,
    run_distill,
    run_search,
    save_weights,
    train_plain,
)
from .config import ExperimentConfig
from .metrics import MetricsWriter, TimingWriter, format_alpha, parse_alpha, read_metrics

log = logging.getLogger(__name__)

METHODS = ("student", "random", "last", "average", "dfa")
_DATA_CACHE: dict[str, tuple[Dataset, Dataset, Dataset]] = {}


def datasets(config: ExperimentConfig, seed: int | None = None) -> tuple[Dataset, Dataset, Dataset]:
    """``(train, val, test)``; the split is seeded by the dataset descriptor, not the run seed."""
    key = json.dumps([config.dataset, config.split_ratio], sort_keys=True)
    if key not in _DATA_CACHE:
        split_seed = int(config.dataset.get("seed", 0))
        _DATA_CACHE[key] = load_dataset(config.dataset, config.split_ratio, split_seed)
    dtype = np.float64 if config.precision == "fp64" else np.float32
    return tuple(Dataset(d.images.astype(dtype, copy=False), d.labels) for d in _DATA_CACHE[key])


class Run:
    """Output directory of one run.  Re-running the same run id starts from an empty directory."""

    def __init__(self, config: ExperimentConfig, run_id: str, method: str, seed: int, extra: dict | None = None):
        self.config = config
        self.run_id = run_id
        self.dir = config.output_root / run_id
        if self.dir.exists():
            shutil.rmtree(self.dir)
        (self.dir / "checkpoints").mkdir(parents=True)
        resolved = {"config": config.to_dict(), "hash": config.content_hash(), "method": method, "seed": seed,
                    "run_id": run_id, "extra": extra or {}}
        (self.dir / "config.resolved").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
        self.metrics = MetricsWriter(self.dir / "metrics.csv")
        self.timing = TimingWriter(self.dir / "timing.csv")

    def record(self, stage: str, epoch: int, group=None, wall_time: float | None = None, **values) -> None:
        row = {"run_id": self.run_id, "stage": stage, "epoch": epoch, "group": group, **values}
        self.metrics.append(row)
        self.timing.append({"run_id": self.run_id, "stage": stage, "epoch": epoch, "group": group,
                            "wall_time": wall_time})


def _build(config: ExperimentConfig, which: str, seed: int) -> GroupedNetwork:
    net_cfg = config.teacher if which == "teacher" else config.student
    with T.precision(config.precision):
        return net_cfg.build(config.classes, seed, config.input_size, config.in_channels)


def _distill_recorder(run: Run, alpha_text: str):
    def on_epoch(row):
        run.record("distill", row["epoch"], wall_time=row["wall_time"], l_ce=row["l_ce"], l_fd=row["l_fd"],
                   train_acc=row["train_acc"], test_acc=row["test_acc"], alpha=alpha_text)
    return on_epoch


# ---------------------------------------------------------------- teacher


def train_teacher(config: ExperimentConfig, seed: int | None = None) -> Path:
    """Train the teacher on train+val and checkpoint it at the config's teacher path."""
    seed = config.seeds[0] if seed is None else seed
    train, val, test = datasets(config)
    run = Run(config, "teacher", "teacher", seed)
    net = _build(config, "teacher", seed)
    with T.precision(config.precision):
        result = train_plain(
            net, config.teacher_train, concat(train, val), test, seed=seed,
            on_epoch=_distill_recorder(run, ""),
        )
    path = config.teacher_checkpoint_path()
    save_checkpoint(path, net, step=config.teacher_train.epochs, extra={"test_acc": result.final_accuracy})
    if path.resolve() != (run.dir / "checkpoints" / "teacher.ckpt").resolve():
        shutil.copyfile(path, run.dir / "checkpoints" / "teacher.ckpt")
    log.info("teacher test accuracy %.4f -> %s", result.final_accuracy, path)
    return path


def load_teacher(config: ExperimentConfig) -> GroupedNetwork:
    net, _ = load_checkpoint(config.teacher_checkpoint_path())
    net.set_requires_grad(False)
    return net


def teacher_accuracy(config: ExperimentConfig, teacher: GroupedNetwork | None = None) -> float:
    teacher = teacher or load_teacher(config)
    with T.precision(config.precision):
        return evaluate(teacher, datasets(config)[2])


# ---------------------------------------------------------------- stages


def search(config: ExperimentConfig, seed: int, teacher: GroupedNetwork | None = None, run_id: str | None = None):
    """Stage 1; returns ``(weights, run)`` and writes ``alpha.weights`` plus heatmaps."""
    teacher = teacher or load_teacher(config)
    train, val, _ = datasets(config)
    run = Run(config, run_id or f"search-s{seed}", "search", seed)
    student = _build(config, "student", seed)
    clock = [time.perf_counter()]

    def on_epoch(group, epoch, alphas, parts):
        now = time.perf_counter()
        run.record("search", epoch, group, wall_time=now - clock[0], l_st=parts.get("l_st"), l_ts=parts.get("l_ts"),
                   reg=parts.get("reg"), alpha=format_alpha(alphas))
        clock[0] = now

    with T.precision(config.precision):
        weights, state = run_search(teacher, student, config.search, train, val, config.loss, seed=seed,
                                    last_bias=config.last_bias, on_epoch=on_epoch)
    save_weights(run.dir / "alpha.weights", weights, seed, config.content_hash())
    save_checkpoint(run.dir / "checkpoints" / "search_student.ckpt", student, step=state.step)
    export_heatmap(run.dir)
    return weights, run


def distill(config: ExperimentConfig, seed: int, weights: AggregationWeights | None, method: str,
            teacher: GroupedNetwork | None = None, run_id: str | None = None, student: GroupedNetwork | None = None):
    """Stage 2 (or the student-only baseline when ``weights`` is None); returns ``(result, run)``."""
    train, val, test = datasets(config)
    run = Run(config, run_id or f"{method}-s{seed}", method, seed)
    student = student or _build(config, "student", seed)
    with T.precision(config.precision):
        if weights is None:
            alpha_text = ""
            result = train_plain(student, config.distill, concat(train, val), test, seed=seed,
                                 on_epoch=_distill_recorder(run, alpha_text))
        else:
            teacher = teacher or load_teacher(config)
            save_weights(run.dir / "alpha.weights", weights, seed, config.content_hash(), extra={"method": method})
            alpha_text = format_alpha(weights.alphas())
            result = run_distill(teacher, student, weights, config.distill, concat(train, val), test, config.loss,
                                 seed=seed, on_epoch=_distill_recorder(run, alpha_text))
    save_checkpoint(run.dir / "checkpoints" / "student.ckpt", student, step=config.distill.epochs,
                    extra={"test_acc": result.final_accuracy})
    return result, run


def run_method(config: ExperimentConfig, method: str, seed: int, teacher: GroupedNetwork | None = None,
               run_id: str | None = None) -> dict:
    """One row of the method comparison: student, random, last, average or dfa."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    t0 = time.perf_counter()
    run_id = run_id or f"{method}-s{seed}"
    if method == "student":
        result, run = distill(config, seed, None, method, run_id=run_id)
    else:
        teacher = teacher or load_teacher(config)
        student = None
        if method == "dfa":
            weights, search_run = search(config, seed, teacher, run_id=f"{run_id}-search")
            if config.reuse_search_student:
                student, _ = load_checkpoint(search_run.dir / "checkpoints" / "search_student.ckpt")
        else:
            weights = baseline_weights(method, teacher.group_sizes, seed)
        result, run = distill(config, seed, weights, method, teacher, run_id=run_id, student=student)
    return {"method": method, "seed": seed, "test_acc": result.final_accuracy,
            "wall_time": time.perf_counter() - t0, "run_dir": str(run.dir)}


def sweep_lambda(config: ExperimentConfig, values: Sequence[float], seeds: Sequence[int] | None = None,
                 teacher: GroupedNetwork | None = None) -> list[dict]:
    """Full DFA runs for each regularization strength."""
    teacher = teacher or load_teacher(config)
    rows = []
    for lam in values:
        loss = config.loss.to_dict() | {"lambda_reg": float(lam)}
        cfg = config.replace(loss=loss)
        for seed in seeds if seeds is not None else config.seeds:
            row = run_method(cfg, "dfa", seed, teacher, run_id=f"dfa-lam{lam:g}-s{seed}")
            row["lambda_reg"] = float(lam)
            rows.append(row)
    return rows


# ---------------------------------------------------------------- reporting


def export_heatmap(run_dir) -> list[Path]:
    """Write ``heatmap_g<i>.csv`` (rows: search epoch, columns: layer index) from a search run's metrics."""
    run_dir = Path(run_dir)
    metrics = run_dir / "metrics.csv"
    if not metrics.exists():
        raise FileNotFoundError(f"no metrics.csv in {run_dir}")
    rows = [r for r in read_metrics(metrics) if r["stage"] == "search" and r["alpha"]]
    if not rows:
        raise ValueError(f"{run_dir}: no search-stage alpha logs to export")
    by_group: dict[int, list[tuple[int, np.ndarray]]] = {}
    for r in rows:
        g = int(r["group"])
        by_group.setdefault(g, []).append((int(r["epoch"]), parse_alpha(r["alpha"])[g]))
    paths = []
    for g, series in sorted(by_group.items()):
        series.sort(key=lambda item: item[0])
        n = len(series[0][1])
        path = run_dir / f"heatmap_g{g}.csv"
        lines = ["epoch," + ",".join(f"layer{j}" for j in range(n))]
        lines += [f"{epoch}," + ",".join(repr(float(v)) for v in a) for epoch, a in series]
        path.write_text("\n".join(lines) + "\n")
        paths.append(path)
    return paths


def read_heatmap(path) -> tuple[np.ndarray, np.ndarray]:
    """``(epochs, matrix)`` from a heatmap CSV."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0].astype(int), data[:, 1:]


def _run_summary(run_dir: Path) -> dict:
    resolved = json.loads((run_dir / "config.resolved").read_text())
    rows = [r for r in read_metrics(run_dir / "metrics.csv") if r["stage"] == "distill"]
    if not rows:
        raise ValueError(f"{run_dir}: no distillation metrics")
    wall = 0.0
    timing = run_dir / "timing.csv"
    if timing.exists():
        wall = sum(float(r["wall_time"]) for r in read_metrics(timing) if r["wall_time"])
    search_dir = run_dir.parent / f"{run_dir.name}-search"
    if resolved["method"] == "dfa" and (search_dir / "timing.csv").exists():
        wall += sum(float(r["wall_time"]) for r in read_metrics(search_dir / "timing.csv") if r["wall_time"])
    return {"method": resolved["method"], "seed": resolved["seed"], "acc": float(rows[-1]["test_acc"]),
            "wall": wall, "dataset": resolved["config"]["dataset"], "student": resolved["config"]["student"]}


def compare_runs(run_dirs: Sequence) -> list[dict]:
    """Mean and standard deviation of final test accuracy per method.

    Refuses runs whose dataset descriptor or student spec differ.
    """
    summaries = [_run_summary(Path(d)) for d in run_dirs]
    if not summaries:
        raise ValueError("no runs to compare")
    ref = summaries[0]
    for s in summaries[1:]:
        if s["dataset"] != ref["dataset"] or s["student"] != ref["student"]:
            raise ValueError("runs use different datasets or student networks; refusing to compare")
    order = {m: k for k, m in enumerate(METHODS)}
    table = []
    for method in sorted({s["method"] for s in summaries}, key=lambda m: order.get(m, len(order))):
        accs = np.array([s["acc"] for s in summaries if s["method"] == method])
        walls = [s["wall"] for s in summaries if s["method"] == method]
        table.append({
            "method": method,
            "n_seeds": len(accs),
            "mean_acc": float(accs.mean()),
            "std_acc": float(accs.std(ddof=1)) if len(accs) > 1 else 0.0,
            "mean_wall_time": float(np.mean(walls)),
        })
    return table


def format_table(rows: list[dict]) -> str:
    header = "method,n_seeds,mean_acc,std_acc,mean_wall_time"
    lines = [header] + [
        f"{r['method']},{r['n_seeds']},{r['mean_acc']:.4f},{r['std_acc']:.4f},{r['mean_wall_time']:.2f}" for r in rows
    ]
    return "\n".join(lines)


def load_alpha_file(path) -> AggregationWeights:
    return load_weights(path)[0]


def transfer(source: ExperimentConfig, target: ExperimentConfig, seed: int,
             source_teacher: GroupedNetwork | None = None, target_teacher: GroupedNetwork | None = None) -> dict:
    """Search the weights on ``source``'s task, then distill with them on ``target``'s task."""
    weights, search_run = search(source, seed, source_teacher, run_id=f"transfer-search-s{seed}")
    target_teacher = target_teacher or load_teacher(target)
    if weights.group_sizes != target_teacher.group_sizes:
        raise ValueError(f"searched weights for groups {weights.group_sizes} do not fit target teacher "
                         f"{target_teacher.group_sizes}")
    result, run = distill(target, seed, weights.frozen(), "dfa-t", target_teacher, run_id=f"dfa-t-s{seed}")
    return {"method": "dfa-t", "seed": seed, "test_acc": result.final_accuracy, "run_dir": str(run.dir),
            "search_dir": str(search_run.dir)}
