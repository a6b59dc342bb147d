"""Two-stage feature aggregation: group-wise bi-level search, then distillation.

Stage 1 alternates, for one layer group at a time, an Adam step on that
group's logits ``beta_i`` (validation batch, student and connectors frozen)
with an SGD step on the student and the group's connectors (training batch,
``beta`` frozen).  Both steps minimize the group's bridge loss; the logits
step adds the ``beta`` regularizer.  The update is first order: no
differentiation through the inner optimum of the student weights.

Stage 2 trains a fresh student on cross-entropy plus the aggregated
feature-distillation loss with the derived, fixed weights.
"""

from __future__ import annotations

import contextlib
import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .data import Dataset, batches, cycle_batches
from .losses import (
    AggregationWeights,
    LossWeights,
    beta_regularizer,
    bridge_loss,
    cross_entropy,
    feature_distill_loss,
    student_loss,
)
from .networks import ST, TS, Connector, GroupedNetwork, check_pairing, make_connector
from .optim import SGD, Adam, multistep_lr
from .tensor import NumericOverflowError, Tensor

DEFAULT_LAST_BIAS = 6.9


class SearchDivergedError(RuntimeError):
    pass


@dataclass
class SearchSchedule:
    epochs_per_group: int = 40
    batch_size: int = 128
    arch_steps_per_weight_step: int = 1
    arch_lr: float = 1e-3
    arch_betas: tuple[float, float] = (0.5, 0.999)
    arch_weight_decay: float = 1e-3
    arch_decoupled_wd: bool = False
    w_lr: float = 0.05
    w_momentum: float = 0.9
    w_weight_decay: float = 5e-4
    iters_per_epoch: int | None = None
    augment: bool = True
    crop_pad: int = 4

    def __post_init__(self):
        self.arch_betas = tuple(self.arch_betas)
        for key in ("epochs_per_group", "batch_size", "arch_steps_per_weight_step"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be positive")
        if self.iters_per_epoch is not None and self.iters_per_epoch < 1:
            raise ValueError("iters_per_epoch must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch_betas"] = list(self.arch_betas)
        return d


@dataclass
class TrainSchedule:
    """SGD schedule with step decay, used for teacher training and distillation."""

    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.1
    milestones: tuple[int, ...] = (60, 120, 160)
    lr_decay: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augment: bool = True
    crop_pad: int = 4

    def __post_init__(self):
        self.milestones = tuple(self.milestones)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def lr_at(self, epoch: int) -> float:
        return multistep_lr(self.lr, epoch, self.milestones, self.lr_decay)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


# ---------------------------------------------------------------- weights


def init_arch(group_sizes, last_bias: float = DEFAULT_LAST_BIAS) -> AggregationWeights:
    """Logits that are zero except ``last_bias`` on each group's last layer."""
    betas = []
    for n in group_sizes:
        if n < 1:
            raise ValueError("group sizes must be positive")
        b = np.zeros(n)
        b[-1] = last_bias
        betas.append(b)
    return AggregationWeights(betas=betas)


def baseline_weights(scheme: str, group_sizes, seed: int = 0) -> AggregationWeights:
    """Exact hand-crafted weights: ``last`` (one-hot), ``average`` (uniform) or ``random`` (flat Dirichlet)."""
    rng = np.random.default_rng(seed)
    fixed = []
    for n in group_sizes:
        if scheme == "last":
            a = np.zeros(n)
            a[-1] = 1.0
        elif scheme == "average":
            a = np.full(n, 1.0 / n)
        elif scheme == "random":
            a = rng.dirichlet(np.ones(n)) if n > 1 else np.ones(1)
            a = a / a.sum()
        else:
            raise ValueError(f"unknown baseline scheme {scheme!r}; expected last, average or random")
        fixed.append(a)
    return AggregationWeights(fixed=fixed)


# ---------------------------------------------------------------- stage 1


@dataclass
class SearchState:
    arch: AggregationWeights
    student: GroupedNetwork
    w_optimizer: SGD
    st_connectors: dict[int, Connector] = field(default_factory=dict)
    ts_connectors: dict[int, Connector] = field(default_factory=dict)
    connector_optimizers: dict[int, SGD] = field(default_factory=dict)
    arch_optimizers: dict[int, Adam] = field(default_factory=dict)
    groups_done: int = 0
    iteration: int = 0
    step: int = 0
    seed: int = 0


@contextlib.contextmanager
def _trainable(tensors: list[Tensor], frozen: list[Tensor]):
    saved = [(t, t.requires_grad) for t in tensors + frozen]
    for t in tensors:
        t.requires_grad = True
    for t in frozen:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in saved:
            t.requires_grad = flag
            t.grad = None


def new_search_state(arch: AggregationWeights, student: GroupedNetwork, schedule: SearchSchedule, seed: int = 0) -> SearchState:
    w_opt = SGD(student.parameters(), schedule.w_lr, schedule.w_momentum, schedule.w_weight_decay)
    return SearchState(arch=arch, student=student, w_optimizer=w_opt, seed=seed)


def _ensure_connectors(state: SearchState, teacher: GroupedNetwork, group: int, schedule: SearchSchedule) -> None:
    if group in state.st_connectors:
        return
    st = make_connector(ST, teacher, state.student, group, seed=[state.seed, 1, group])
    ts = make_connector(TS, teacher, state.student, group, seed=[state.seed, 2, group])
    state.st_connectors[group] = st
    state.ts_connectors[group] = ts
    state.connector_optimizers[group] = SGD(
        st.parameters() + ts.parameters(), schedule.w_lr, schedule.w_momentum, schedule.w_weight_decay
    )
    state.arch_optimizers[group] = Adam(
        [state.arch.betas[group]], schedule.arch_lr, schedule.arch_betas, schedule.arch_weight_decay,
        decoupled=schedule.arch_decoupled_wd,
    )


def _diverged(state: SearchState, group: int, where: str, err: Exception) -> SearchDivergedError:
    betas = {i: b.data.tolist() for i, b in enumerate(state.arch.betas)}
    return SearchDivergedError(f"non-finite loss in {where} at group {group}, step {state.step}: {err}; betas={betas}")


def arch_step(state: SearchState, teacher: GroupedNetwork, group: int, x, y, loss_weights: LossWeights) -> dict:
    """One Adam step on ``beta_group`` with everything else frozen; batchnorm stats untouched."""
    student_params = state.student.parameters()
    conn_params = state.st_connectors[group].parameters() + state.ts_connectors[group].parameters()
    others = [b for i, b in enumerate(state.arch.betas) if i != group]
    beta = state.arch.betas[group]
    with _trainable([beta], student_params + conn_params + others):
        try:
            loss, parts = bridge_loss(
                group, state.arch, teacher, state.student, state.st_connectors[group], state.ts_connectors[group],
                x, y, loss_weights, training=True, update_stats=False,
            )
            reg = beta_regularizer(state.arch.betas, loss_weights.lambda_reg)
            total = loss + reg
            T.backward(total)
        except NumericOverflowError as err:
            raise _diverged(state, group, "arch step", err) from err
        state.arch_optimizers[group].step()
        if not np.all(np.isfinite(beta.data)):
            raise _diverged(state, group, "arch step", ArithmeticError("beta became non-finite"))
    parts["reg"] = reg.item()
    parts["bridge_val"] = loss.item()
    return parts


def weight_step(state: SearchState, teacher: GroupedNetwork, group: int, x, y, loss_weights: LossWeights) -> dict:
    """One SGD step on the student and the group's connectors with ``beta`` frozen."""
    student_params = state.student.parameters()
    conn_params = state.st_connectors[group].parameters() + state.ts_connectors[group].parameters()
    with _trainable(student_params + conn_params, list(state.arch.betas)):
        try:
            loss, parts = bridge_loss(
                group, state.arch, teacher, state.student, state.st_connectors[group], state.ts_connectors[group],
                x, y, loss_weights, training=True, update_stats=True,
            )
            T.backward(loss)
        except NumericOverflowError as err:
            raise _diverged(state, group, "weight step", err) from err
        # parameters not reached by this group's loss keep a zero gradient
        for p in student_params + conn_params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        state.w_optimizer.step()
        state.connector_optimizers[group].step()
    parts["bridge_train"] = loss.item()
    return parts


def search_group(
    group: int,
    state: SearchState,
    teacher: GroupedNetwork,
    schedule: SearchSchedule,
    train: Dataset,
    val: Dataset,
    loss_weights: LossWeights,
    rng: np.random.Generator,
    on_epoch: Callable | None = None,
    on_step: Callable | None = None,
) -> SearchState:
    """Search ``beta_group`` for ``epochs_per_group`` epochs.

    ``on_epoch(group, epoch, alphas, mean_parts)`` fires once before training
    (epoch 0, initial weights) and after every epoch.  ``on_step(kind, state)``
    fires after every arch or weight step.
    """
    if group != state.groups_done:
        raise ValueError(f"group cursor at {state.groups_done}; cannot search group {group}")
    if len(train) == 0 or len(val) == 0:
        raise ValueError("search needs non-empty training and validation splits")
    if not state.arch.searchable:
        raise ValueError("search needs searchable (beta) weights")
    _ensure_connectors(state, teacher, group, schedule)
    bs = schedule.batch_size
    val_iter = cycle_batches(val, min(bs, len(val)), rng)
    iters = schedule.iters_per_epoch or max(1, len(train) // bs)

    if on_epoch is not None:
        on_epoch(group, 0, state.arch.alphas(), {})
    state.iteration = 0
    for epoch in range(1, schedule.epochs_per_group + 1):
        sums: dict[str, float] = {}
        count = 0
        train_iter = cycle_batches(train, min(bs, len(train)), rng, augment=schedule.augment, crop_pad=schedule.crop_pad)
        for _ in range(iters):
            for _ in range(schedule.arch_steps_per_weight_step):
                xv, yv = next(val_iter)
                parts = arch_step(state, teacher, group, xv, yv, loss_weights)
                state.step += 1
                if on_step is not None:
                    on_step("arch", state)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            xt, yt = next(train_iter)
            parts = weight_step(state, teacher, group, xt, yt, loss_weights)
            state.step += 1
            state.iteration += 1
            if on_step is not None:
                on_step("weight", state)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
        if on_epoch is not None:
            on_epoch(group, epoch, state.arch.alphas(), {k: v / count for k, v in sums.items()})
    state.groups_done += 1
    return state


def run_search(
    teacher: GroupedNetwork,
    student: GroupedNetwork,
    schedule: SearchSchedule,
    train: Dataset,
    val: Dataset,
    loss_weights: LossWeights,
    seed: int = 0,
    last_bias: float = DEFAULT_LAST_BIAS,
    arch: AggregationWeights | None = None,
    on_epoch: Callable | None = None,
    on_step: Callable | None = None,
) -> tuple[AggregationWeights, SearchState]:
    """Search every group in order, warm-starting the student across groups."""
    check_pairing(teacher, student)
    if arch is None:
        arch = init_arch(teacher.group_sizes, last_bias)
    if arch.group_sizes != teacher.group_sizes:
        raise ValueError(f"weights for groups {arch.group_sizes} do not match teacher {teacher.group_sizes}")
    state = new_search_state(arch, student, schedule, seed)
    rng = np.random.default_rng([seed, 7])
    for group in range(teacher.num_groups):
        search_group(group, state, teacher, schedule, train, val, loss_weights, rng, on_epoch, on_step)
    return arch, state


# ---------------------------------------------------------------- stage 2


def evaluate(net: GroupedNetwork, ds: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy in eval mode."""
    correct = 0
    with T.no_grad():
        for x, y in batches(ds, batch_size):
            correct += int((net(Tensor(x), training=False).data.argmax(axis=1) == y).sum())
    return correct / len(ds)


@dataclass
class DistillResult:
    student: GroupedNetwork
    connectors: list[Connector]
    history: list[dict]

    @property
    def final_accuracy(self) -> float:
        return self.history[-1]["test_acc"] if self.history else float("nan")


def distill_step(
    teacher: GroupedNetwork,
    student: GroupedNetwork,
    connectors: list[Connector],
    weights: AggregationWeights | None,
    x,
    y,
    loss_weights: LossWeights,
    mode: str = "aggregated",
) -> tuple[Tensor, dict]:
    """Student loss on one batch; the teacher is skipped when ``gamma_fd == 0``."""
    x = Tensor(x)
    logits, s_taps = student.forward_with_taps(x, training=True)
    fd = None
    if loss_weights.gamma_fd > 0:
        with T.no_grad():
            _, t_taps = teacher.forward_with_taps(x, training=False)
        fd = feature_distill_loss(t_taps, [g[-1] for g in s_taps], connectors, weights, mode=mode)
    loss = student_loss(logits, y, fd, loss_weights.gamma_fd)
    parts = {
        "l_ce": cross_entropy(logits, y).item() if fd is not None else loss.item(),
        "l_fd": fd.item() if fd is not None else 0.0,
        "correct": int((logits.data.argmax(axis=1) == y).sum()),
    }
    return loss, parts


def run_distill(
    teacher: GroupedNetwork | None,
    student: GroupedNetwork,
    weights: AggregationWeights | None,
    schedule: TrainSchedule,
    train: Dataset,
    test: Dataset,
    loss_weights: LossWeights,
    seed: int = 0,
    mode: str = "aggregated",
    on_epoch: Callable | None = None,
) -> DistillResult:
    """Train ``student`` with fixed aggregation weights (no gradient reaches the weights).

    ``teacher`` may be ``None`` only when ``gamma_fd == 0`` (plain training).
    """
    if loss_weights.gamma_fd > 0:
        if teacher is None:
            raise ValueError("distillation with gamma_fd > 0 needs a teacher")
        check_pairing(teacher, student)
    fixed = weights.frozen() if weights is not None else None
    if fixed is not None and teacher is not None and fixed.group_sizes != teacher.group_sizes:
        raise ValueError(f"weights for groups {fixed.group_sizes} do not match teacher {teacher.group_sizes}")
    if teacher is not None:
        conns = [make_connector(ST, teacher, student, i, seed=[seed, 3, i]) for i in range(student.num_groups)]
    else:
        conns = []
    params = student.parameters() + [p for c in conns for p in c.parameters()]
    opt = SGD(params, schedule.lr, schedule.momentum, schedule.weight_decay)
    rng = np.random.default_rng([seed, 11])
    history = []
    for epoch in range(schedule.epochs):
        opt.lr = schedule.lr_at(epoch)
        sums = {"l_ce": 0.0, "l_fd": 0.0, "correct": 0}
        seen = 0
        start = time.perf_counter()
        for x, y in batches(train, schedule.batch_size, rng, augment=schedule.augment, crop_pad=schedule.crop_pad, drop_last=True):
            loss, parts = distill_step(teacher, student, conns, fixed, x, y, loss_weights, mode)
            T.backward(loss)
            for p in params:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            opt.step()
            opt.zero_grad()
            for k in sums:
                sums[k] += parts[k] * (len(y) if k != "correct" else 1)
            seen += len(y)
        row = {
            "epoch": epoch + 1,
            "lr": opt.lr,
            "l_ce": sums["l_ce"] / seen,
            "l_fd": sums["l_fd"] / seen,
            "train_acc": sums["correct"] / seen,
            "test_acc": evaluate(student, test),
            "wall_time": time.perf_counter() - start,
        }
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return DistillResult(student, conns, history)


def train_plain(net: GroupedNetwork, schedule: TrainSchedule, train: Dataset, test: Dataset, seed: int = 0,
                on_epoch: Callable | None = None) -> DistillResult:
    """Cross-entropy training (teacher training or the student-only baseline)."""
    return run_distill(None, net, None, schedule, train, test, LossWeights(gamma_fd=0.0), seed=seed, on_epoch=on_epoch)


# ---------------------------------------------------------------- timing


def _median_ms(fn, iters: int) -> float:
    fn()
    times = []
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def stage_time_probe(
    teacher: GroupedNetwork,
    student: GroupedNetwork,
    x: np.ndarray,
    y: np.ndarray,
    iters: int = 20,
    loss_weights: LossWeights | None = None,
) -> dict:
    """Median per-iteration wall times in milliseconds.

    ``t1`` is one search iteration (arch step + weight step) averaged over
    groups; ``t2`` one aggregated distillation iteration; ``t_last`` one
    last-layer distillation iteration; ``t_teacher`` a teacher forward and
    ``t_student`` a student forward/backward on cross-entropy.  Run it under
    the precision you want to measure (fp32 for fast mode).
    """
    loss_weights = loss_weights or LossWeights()
    arch = init_arch(teacher.group_sizes)
    schedule = SearchSchedule()
    state = new_search_state(arch, student, schedule)
    xt = Tensor(x)

    def teacher_fwd():
        with T.no_grad():
            teacher.forward_with_taps(xt, training=False)

    def student_fb():
        loss = cross_entropy(student(xt, training=True, update_stats=False), y)
        T.backward(loss)
        for p in student.parameters():
            p.grad = None

    per_group = []
    for g in range(teacher.num_groups):
        _ensure_connectors(state, teacher, g, schedule)

        def search_iter(g=g):
            arch_step(state, teacher, g, x, y, loss_weights)
            weight_step(state, teacher, g, x, y, loss_weights)

        per_group.append(_median_ms(search_iter, iters))

    conns = [make_connector(ST, teacher, student, i, seed=i) for i in range(student.num_groups)]
    params = student.parameters() + [p for c in conns for p in c.parameters()]
    fixed = arch.frozen()

    def distill_iter(mode):
        loss, _ = distill_step(teacher, student, conns, fixed, x, y, loss_weights, mode)
        T.backward(loss)
        for p in params:
            p.grad = None

    return {
        "t1": float(np.mean(per_group)),
        "t1_per_group": per_group,
        "t2": _median_ms(lambda: distill_iter("aggregated"), iters),
        "t_last": _median_ms(lambda: distill_iter("last"), iters),
        "t_teacher": _median_ms(teacher_fwd, iters),
        "t_student": _median_ms(student_fb, iters),
    }


# ---------------------------------------------------------------- persistence

WEIGHTS_SCHEMA_VERSION = 1


def save_weights(path, weights: AggregationWeights, seed: int, config_hash: str = "", extra: dict | None = None) -> Path:
    """Write aggregation weights as JSON; floats use shortest round-trip decimal form."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "schema_version": WEIGHTS_SCHEMA_VERSION,
        "group_sizes": weights.group_sizes,
        "beta": [b.data.astype(np.float64).tolist() for b in weights.betas] if weights.searchable else None,
        "alpha": [a.tolist() for a in weights.alphas()],
        "config_hash": config_hash,
        "seed": int(seed),
        "extra": extra or {},
    }
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def load_weights(path) -> tuple[AggregationWeights, dict]:
    """Inverse of :func:`save_weights`; returns ``(weights, document)``."""
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != WEIGHTS_SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported weights schema {doc.get('schema_version')}")
    if doc["beta"] is not None:
        weights = AggregationWeights(betas=[np.array(b, dtype=np.float64) for b in doc["beta"]])
    else:
        weights = AggregationWeights(fixed=[np.array(a, dtype=np.float64) for a in doc["alpha"]])
    if weights.group_sizes != doc["group_sizes"]:
        raise ValueError(f"{path}: group sizes {doc['group_sizes']} disagree with stored vectors")
    return weights, doc
