"""Teacher and student networks partitioned into layer groups.

A network is ``stem -> group 0 -> ... -> group G-1 -> head``.  Every group
holds ``num_layers`` blocks sharing one spatial resolution; the first block
of a group may downsample.  Each block output is a feature tap; taps are
returned clamped at -1 (see :data:`TAP_FLOOR`), while the network's own
forward path uses the unclamped signal.

Group indices are 0-based throughout.  ``forward_from_group(x, k)`` feeds
``x`` into group ``k``; ``k == 0`` takes a stem output and ``k == G`` feeds
the classifier head directly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

TAP_FLOOR = -1.0
BLOCK_KINDS = ("basic-residual", "plain-conv")


@dataclass(frozen=True)
class GroupSpec:
    num_layers: int
    channels: int
    spatial_size: int
    block_kind: str = "basic-residual"

    def to_dict(self) -> dict:
        return asdict(self)


class SpecError(ValueError):
    pass


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2d:
    def __init__(self, cin: int, cout: int, k: int, stride: int, rng, name: str):
        self.stride = stride
        self.k = k
        self.weight = Tensor(_he(rng, (cout, cin, k, k), cin * k * k), requires_grad=True, name=name)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, stride=self.stride, padding="same" if self.k > 1 else "valid")


class BatchNorm2d:
    def __init__(self, channels: int, name: str, dtype):
        self.gamma = Tensor(np.ones(channels), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: Tensor, training: bool, update_stats: bool) -> Tensor:
        return T.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=training, update_stats=update_stats and training,
        )


class Block:
    """Pre-activation residual block (BN-ReLU-conv twice) or a plain ReLU-conv-BN layer."""

    def __init__(self, kind: str, cin: int, cout: int, stride: int, rng, name: str, dtype):
        self.kind = kind
        self.cin, self.cout, self.stride = cin, cout, stride
        if kind == "basic-residual":
            self.bn1 = BatchNorm2d(cin, f"{name}.bn1", dtype)
            self.conv1 = Conv2d(cin, cout, 3, stride, rng, f"{name}.conv1")
            self.bn2 = BatchNorm2d(cout, f"{name}.bn2", dtype)
            self.conv2 = Conv2d(cout, cout, 3, 1, rng, f"{name}.conv2")
            self.shortcut = Conv2d(cin, cout, 1, stride, rng, f"{name}.shortcut") if (cin != cout or stride != 1) else None
        elif kind == "plain-conv":
            self.conv = Conv2d(cin, cout, 3, stride, rng, f"{name}.conv")
            self.bn = BatchNorm2d(cout, f"{name}.bn", dtype)
        else:
            raise SpecError(f"unknown block kind {kind!r}; expected one of {BLOCK_KINDS}")

    def __call__(self, x: Tensor, training: bool, update_stats: bool) -> Tensor:
        if self.kind == "basic-residual":
            o = T.relu(self.bn1(x, training, update_stats))
            y = self.conv1(o)
            y = self.conv2(T.relu(self.bn2(y, training, update_stats)))
            return y + (self.shortcut(o) if self.shortcut is not None else x)
        return self.bn(self.conv(T.relu(x)), training, update_stats)

    def named_parameters(self, prefix: str):
        if self.kind == "basic-residual":
            yield f"{prefix}.bn1.gamma", self.bn1.gamma
            yield f"{prefix}.bn1.beta", self.bn1.beta
            yield f"{prefix}.conv1.weight", self.conv1.weight
            yield f"{prefix}.bn2.gamma", self.bn2.gamma
            yield f"{prefix}.bn2.beta", self.bn2.beta
            yield f"{prefix}.conv2.weight", self.conv2.weight
            if self.shortcut is not None:
                yield f"{prefix}.shortcut.weight", self.shortcut.weight
        else:
            yield f"{prefix}.conv.weight", self.conv.weight
            yield f"{prefix}.bn.gamma", self.bn.gamma
            yield f"{prefix}.bn.beta", self.bn.beta

    def named_buffers(self, prefix: str):
        bns = [("bn1", self.bn1), ("bn2", self.bn2)] if self.kind == "basic-residual" else [("bn", self.bn)]
        for label, bn in bns:
            yield f"{prefix}.{label}.running_mean", bn.running_mean
            yield f"{prefix}.{label}.running_var", bn.running_var


class GroupedNetwork:
    """Conv stem, layer groups, and a BN-ReLU-avgpool-linear classifier head."""

    def __init__(
        self,
        groups: Sequence[GroupSpec],
        classes: int,
        seed: int = 0,
        in_channels: int = 3,
        input_size: int | None = None,
        stem_channels: int | None = None,
        dtype=None,
    ):
        groups = [g if isinstance(g, GroupSpec) else GroupSpec(**g) for g in groups]
        if not groups:
            raise SpecError("network needs at least one layer group")
        if classes < 2:
            raise SpecError("need at least two classes")
        self.groups = groups
        self.classes = int(classes)
        self.seed = int(seed)
        self.in_channels = int(in_channels)
        self.input_size = int(input_size if input_size is not None else groups[0].spatial_size)
        self.stem_channels = int(stem_channels if stem_channels is not None else groups[0].channels)
        dtype = dtype or T.default_dtype()
        self.dtype = dtype
        strides = self._strides()

        rng = np.random.default_rng(seed)
        with T.precision("fp64" if dtype == np.float64 else "fp32"):
            self.stem = Conv2d(self.in_channels, self.stem_channels, 3, strides[0], rng, "stem.weight")
            self.blocks: list[list[Block]] = []
            cin = self.stem_channels
            for gi, (g, s) in enumerate(zip(groups, strides[1:])):
                row = []
                for j in range(g.num_layers):
                    row.append(Block(g.block_kind, cin, g.channels, s if j == 0 else 1, rng, f"g{gi}.b{j}", dtype))
                    cin = g.channels
                self.blocks.append(row)
            self.head_bn = BatchNorm2d(cin, "head.bn", dtype)
            self.fc_weight = Tensor(_he(rng, (cin, self.classes), cin), requires_grad=True, name="head.fc.weight")
            self.fc_bias = Tensor(np.zeros(self.classes), requires_grad=True, name="head.fc.bias")

    def _strides(self) -> list[int]:
        """Stem stride followed by the stride of the first block of each group (1 for group 0)."""
        sizes = [self.input_size] + [g.spatial_size for g in self.groups]
        strides = []
        for prev, cur in zip(sizes, sizes[1:]):
            if cur <= 0 or prev % cur or prev // cur not in (1, 2):
                raise SpecError(f"spatial size must stay or halve between stages, got {prev} -> {cur}")
            strides.append(prev // cur)
        strides.insert(1, 1)
        for g in self.groups:
            if g.num_layers < 1 or g.channels < 1:
                raise SpecError(f"group needs positive layer and channel counts: {g}")
            if g.block_kind not in BLOCK_KINDS:
                raise SpecError(f"unknown block kind {g.block_kind!r}")
        return strides

    # ------------------------------------------------------------ structure

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    @property
    def group_sizes(self) -> list[int]:
        return [g.num_layers for g in self.groups]

    def group_input_shape(self, k: int) -> tuple[int, int, int]:
        """(C, H, W) expected by group ``k``; ``k == G`` describes the head input."""
        if k == 0:
            size = self.input_size // self._strides()[0]
            return self.stem_channels, size, size
        g = self.groups[k - 1]
        return g.channels, g.spatial_size, g.spatial_size

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "stem.weight", self.stem.weight
        for gi, row in enumerate(self.blocks):
            for j, b in enumerate(row):
                yield from b.named_parameters(f"g{gi}.b{j}")
        yield "head.bn.gamma", self.head_bn.gamma
        yield "head.bn.beta", self.head_bn.beta
        yield "head.fc.weight", self.fc_weight
        yield "head.fc.bias", self.fc_bias

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for gi, row in enumerate(self.blocks):
            for j, b in enumerate(row):
                yield from b.named_buffers(f"g{gi}.b{j}")
        yield "head.bn.running_mean", self.head_bn.running_mean
        yield "head.bn.running_var", self.head_bn.running_var

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def spec_dict(self) -> dict:
        return {
            "groups": [g.to_dict() for g in self.groups],
            "classes": self.classes,
            "in_channels": self.in_channels,
            "input_size": self.input_size,
            "stem_channels": self.stem_channels,
        }

    # ------------------------------------------------------------ forward

    def _check_input(self, x: Tensor) -> None:
        expected = (self.in_channels, self.input_size, self.input_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"network input: expected (N, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")

    def stem_forward(self, x) -> Tensor:
        x = T._as_tensor(x)
        self._check_input(x)
        return self.stem(x)

    def run_groups(self, h: Tensor, start: int, stop: int, training: bool, update_stats: bool | None = None):
        """Run groups ``start..stop-1`` on ``h``; returns the output and clamped taps per group."""
        if update_stats is None:
            update_stats = training
        taps = []
        for gi in range(start, stop):
            group_taps = []
            for block in self.blocks[gi]:
                h = block(h, training, update_stats)
                group_taps.append(T.clamp_min(h, TAP_FLOOR))
            taps.append(group_taps)
        return h, taps

    def head(self, h: Tensor, training: bool, update_stats: bool | None = None) -> Tensor:
        if update_stats is None:
            update_stats = training
        h = T.relu(self.head_bn(h, training, update_stats))
        return T.avgpool(h) @ self.fc_weight + self.fc_bias

    def forward_with_taps(self, x, training: bool = False, update_stats: bool | None = None):
        """Full forward; returns ``(logits, taps)`` with ``len(taps[i]) == num_layers`` of group i."""
        h = self.stem_forward(x)
        h, taps = self.run_groups(h, 0, self.num_groups, training, update_stats)
        return self.head(h, training, update_stats), taps

    def forward(self, x, training: bool = False, update_stats: bool | None = None) -> Tensor:
        return self.forward_with_taps(x, training, update_stats)[0]

    __call__ = forward

    def forward_to_group(self, x, group: int, training: bool = False, update_stats: bool | None = None):
        """Stem plus groups ``0..group``; returns ``(group output, taps of those groups)``."""
        if not 0 <= group < self.num_groups:
            raise IndexError(f"group index {group} outside 0..{self.num_groups - 1}")
        h = self.stem_forward(x)
        return self.run_groups(h, 0, group + 1, training, update_stats)

    def forward_from_group(self, injected, start_group: int, training: bool = False, update_stats: bool | None = None) -> Tensor:
        """Logits of ``head(group[G-1](...group[start_group](injected)))``."""
        injected = T._as_tensor(injected)
        if not 0 <= start_group <= self.num_groups:
            raise IndexError(f"start group {start_group} outside 0..{self.num_groups}")
        expected = self.group_input_shape(start_group)
        if injected.ndim != 4 or tuple(injected.shape[1:]) != expected:
            raise ShapeError(
                f"forward_from_group: group {start_group} expects (N, {expected[0]}, {expected[1]}, {expected[2]}),"
                f" got {injected.shape}"
            )
        h, _ = self.run_groups(injected, start_group, self.num_groups, training, update_stats)
        return self.head(h, training, update_stats)


def build_network(spec: Sequence[GroupSpec], classes: int, seed: int, **kwargs) -> GroupedNetwork:
    """He-initialized network from group specs (BN scale 1, shift 0)."""
    return GroupedNetwork(spec, classes, seed=seed, **kwargs)


def check_pairing(teacher: GroupedNetwork, student: GroupedNetwork) -> None:
    """Teacher and student must agree on group count, per-group resolution, and classes."""
    if teacher.num_groups != student.num_groups:
        raise SpecError(f"teacher has {teacher.num_groups} groups, student {student.num_groups}")
    for i, (gt, gs) in enumerate(zip(teacher.groups, student.groups)):
        if gt.spatial_size != gs.spatial_size:
            raise SpecError(f"group {i}: teacher spatial {gt.spatial_size} != student {gs.spatial_size}")
    if teacher.classes != student.classes:
        raise SpecError("teacher and student disagree on class count")


# ---------------------------------------------------------------- connectors

ST = "student-to-teacher"
TS = "teacher-to-student"


class Connector:
    """1x1 convolution (no bias, no activation) mapping channels between networks."""

    def __init__(self, direction: str, group_index: int, in_channels: int, out_channels: int, seed: int = 0, weight=None):
        if direction not in (ST, TS):
            raise ValueError(f"unknown connector direction {direction!r}")
        self.direction = direction
        self.group_index = group_index
        self.in_channels = in_channels
        self.out_channels = out_channels
        if weight is None:
            rng = np.random.default_rng(seed)
            weight = _he(rng, (out_channels, in_channels, 1, 1), in_channels)
        tag = "st" if direction == ST else "ts"
        self.weight = Tensor(weight, requires_grad=True, name=f"connector.{tag}{group_index}.weight")
        if self.weight.shape != (out_channels, in_channels, 1, 1):
            raise ShapeError(f"connector weight shape {self.weight.shape} != {(out_channels, in_channels, 1, 1)}")

    @classmethod
    def identity(cls, direction: str, group_index: int, channels: int) -> "Connector":
        return cls(direction, group_index, channels, channels, weight=np.eye(channels)[:, :, None, None])

    def parameters(self) -> list[Tensor]:
        return [self.weight]

    def __call__(self, x) -> Tensor:
        return apply_connector(self, x)


def apply_connector(conn: Connector, x) -> Tensor:
    x = T._as_tensor(x)
    if x.ndim != 4 or x.shape[1] != conn.in_channels:
        raise ShapeError(f"connector {conn.direction} g{conn.group_index}: expects {conn.in_channels} channels, got {x.shape}")
    return T.conv2d(x, conn.weight, stride=1, padding="valid")


def make_connector(direction: str, teacher: GroupedNetwork, student: GroupedNetwork, group: int, seed: int) -> Connector:
    ct, cs = teacher.groups[group].channels, student.groups[group].channels
    if direction == ST:
        return Connector(ST, group, cs, ct, seed=seed)
    return Connector(TS, group, ct, cs, seed=seed)
