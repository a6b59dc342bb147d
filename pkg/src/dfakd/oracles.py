"""Rigged search instance with a known answer.

One layer group, two teacher taps: tap 0 is a class-coded pattern plus a
little noise, tap 1 is pure noise.  Inputs stack both on the channel axis
(the "teacher" just slices them apart), so the student sees both too.  A
brute-force sweep over fixed aggregation weights measures the TS loss on
each mixture; the search should move the weight toward the signal tap.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, batches, cycle_batches
from .losses import AggregationWeights, LossWeights, bridge_loss
from .networks import ST, TS, GroupedNetwork, GroupSpec, make_connector
from .optim import SGD


@dataclass
class RiggedTeacher:
    """Teacher stand-in whose single group has taps ``[signal, noise]`` cut from the input channels."""

    channels: int
    spatial_size: int
    classes: int

    @property
    def groups(self) -> list[GroupSpec]:
        return [GroupSpec(2, self.channels, self.spatial_size)]

    @property
    def num_groups(self) -> int:
        return 1

    @property
    def group_sizes(self) -> list[int]:
        return [2]

    def forward_to_group(self, x, group: int, training: bool = False, update_stats=None):
        if group != 0:
            raise IndexError(f"rigged teacher has one group, got index {group}")
        x = T._as_tensor(x)
        c = self.channels
        taps = [x[:, :c], x[:, c:]]
        return taps[-1], [taps]


def make_rigged_task(classes: int = 4, channels: int = 4, size: int = 4, n_train: int = 256, n_val: int = 256,
                     signal: float = 1.0, signal_noise: float = 0.5, seed: int = 0) -> tuple[Dataset, Dataset]:
    """``(train, val)`` with inputs of shape ``(N, 2 * channels, size, size)``."""
    rng = np.random.default_rng([seed, 101])
    protos = rng.standard_normal((classes, channels, size, size))

    def draw(n):
        labels = rng.integers(0, classes, n)
        sig = signal * protos[labels] + signal_noise * rng.standard_normal((n, channels, size, size))
        noise = rng.standard_normal((n, channels, size, size))
        return Dataset(np.concatenate([sig, noise], axis=1).astype(T.default_dtype()), labels)

    return draw(n_train), draw(n_val)


def rigged_pair(classes: int = 4, channels: int = 4, size: int = 4, seed: int = 0):
    teacher = RiggedTeacher(channels, size, classes)
    student = GroupedNetwork([GroupSpec(1, channels, size)], classes, seed=seed, in_channels=2 * channels,
                             input_size=size)
    return teacher, student


def fixed_alpha_ts_loss(alpha1: float, train: Dataset, val: Dataset, classes: int = 4, channels: int = 4,
                        size: int = 4, steps: int = 60, lr: float = 0.05, batch_size: int = 64, seed: int = 0) -> float:
    """Validation TS loss after training the student and TS connector with weights ``(alpha1, 1 - alpha1)``."""
    teacher, student = rigged_pair(classes, channels, size, seed)
    weights = AggregationWeights(fixed=[np.array([alpha1, 1.0 - alpha1])])
    conn = make_connector(TS, teacher, student, 0, seed=[seed, 2, 0])
    st_dummy = make_connector(ST, teacher, student, 0, seed=[seed, 1, 0])
    loss_weights = LossWeights(gamma_st=0.0, gamma_ts=1.0)
    params = student.parameters() + conn.parameters()
    opt = SGD(params, lr, momentum=0.9)
    rng = np.random.default_rng([seed, 5])
    it = cycle_batches(train, batch_size, rng)
    for _ in range(steps):
        x, y = next(it)
        loss, _ = bridge_loss(0, weights, teacher, student, st_dummy, conn, x, y, loss_weights, training=True)
        T.backward(loss)
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        opt.step()
        opt.zero_grad()
    total, n = 0.0, 0
    with T.no_grad():
        for x, y in batches(val, batch_size):
            loss, _ = bridge_loss(0, weights, teacher, student, st_dummy, conn, x, y, loss_weights, training=False)
            total += loss.item() * len(y)
            n += len(y)
    return total / n


def brute_force_sweep(train: Dataset, val: Dataset, grid: Sequence[float] | None = None, seed: int = 0,
                      **kwargs) -> list[tuple[float, float]]:
    """``[(alpha1, val TS loss)]`` over ``grid`` (default 0, 0.1, ..., 1)."""
    grid = np.round(np.linspace(0.0, 1.0, 11), 10) if grid is None else grid
    return [(float(a), fixed_alpha_ts_loss(float(a), train, val, seed=seed, **kwargs)) for a in grid]
