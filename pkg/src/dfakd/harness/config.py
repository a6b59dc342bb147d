"""Declarative experiment configuration with a lossless JSON text form."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from ..losses import LossWeights
from ..networks import GroupedNetwork, GroupSpec
from ..search import DEFAULT_LAST_BIAS, SearchSchedule, TrainSchedule

OUTPUT_ROOT_ENV = "DFAKD_OUTPUT_ROOT"
THREADS_ENV = "DFAKD_NUM_THREADS"


class ConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    groups: list[GroupSpec]
    stem_channels: int | None = None

    def build(self, classes: int, seed: int, input_size: int, in_channels: int = 3) -> GroupedNetwork:
        return GroupedNetwork(self.groups, classes, seed=seed, in_channels=in_channels,
                              input_size=input_size, stem_channels=self.stem_channels)

    def to_dict(self) -> dict:
        return {"groups": [g.to_dict() for g in self.groups], "stem_channels": self.stem_channels}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        _check_keys("network", d, {"groups", "stem_channels"})
        return cls([GroupSpec(**g) for g in d["groups"]], d.get("stem_channels"))


def _check_keys(where: str, d: dict, allowed: set) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def _dataclass_from(cls, where: str, d: dict):
    _check_keys(where, d, {f.name for f in fields(cls)})
    try:
        return cls(**d)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from err


@dataclass
class ExperimentConfig:
    teacher: NetworkConfig
    student: NetworkConfig
    dataset: dict
    name: str = "experiment"
    classes: int = 10
    input_size: int = 16
    in_channels: int = 3
    teacher_checkpoint: str | None = None
    split_ratio: float = 0.7
    search: SearchSchedule = field(default_factory=SearchSchedule)
    distill: TrainSchedule = field(default_factory=TrainSchedule)
    teacher_train: TrainSchedule = field(default_factory=TrainSchedule)
    loss: LossWeights = field(default_factory=LossWeights)
    last_bias: float = DEFAULT_LAST_BIAS
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs"
    precision: str = "fp64"
    reuse_search_student: bool = False

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "teacher": self.teacher.to_dict(),
            "student": self.student.to_dict(),
            "dataset": copy.deepcopy(self.dataset),
            "classes": self.classes,
            "input_size": self.input_size,
            "in_channels": self.in_channels,
            "teacher_checkpoint": self.teacher_checkpoint,
            "split_ratio": self.split_ratio,
            "search": self.search.to_dict(),
            "distill": self.distill.to_dict(),
            "teacher_train": self.teacher_train.to_dict(),
            "loss": self.loss.to_dict(),
            "last_bias": self.last_bias,
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "precision": self.precision,
            "reuse_search_student": self.reuse_search_student,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        _check_keys("config", d, {f.name for f in fields(cls)})
        d = dict(d)
        try:
            d["teacher"] = NetworkConfig.from_dict(d["teacher"])
            d["student"] = NetworkConfig.from_dict(d["student"])
        except KeyError as err:
            raise ConfigError(f"config: missing required key {err}") from None
        except TypeError as err:
            raise ConfigError(f"config: bad group spec: {err}") from None
        if "dataset" not in d:
            raise ConfigError("config: missing required key 'dataset'")
        for key, kind in (("search", SearchSchedule), ("distill", TrainSchedule), ("teacher_train", TrainSchedule),
                          ("loss", LossWeights)):
            if key in d:
                d[key] = _dataclass_from(kind, key, d[key])
        if d.get("precision", "fp64") not in ("fp64", "fp32"):
            raise ConfigError(f"config: precision must be fp64 or fp32, got {d['precision']!r}")
        try:
            return cls(**d)
        except TypeError as err:
            raise ConfigError(f"config: {err}") from err

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as err:
            raise ConfigError(f"config is not valid JSON: {err}") from err
        return cls.from_dict(d)

    def content_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(changes)
        return ExperimentConfig.from_dict(d)

    @property
    def output_root(self) -> Path:
        return Path(os.environ.get(OUTPUT_ROOT_ENV) or self.output_dir)

    def teacher_checkpoint_path(self) -> Path:
        if self.teacher_checkpoint:
            return Path(self.teacher_checkpoint)
        return self.output_root / "teacher" / "checkpoints" / "teacher.ckpt"


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    return ExperimentConfig.from_text(text)


# ---------------------------------------------------------------- presets


def toy_config(**overrides) -> ExperimentConfig:
    """Desk-scale pair on the synthetic task; every stage finishes in about a minute."""
    cfg = ExperimentConfig(
        name="toy",
        teacher=NetworkConfig([GroupSpec(3, 16, 8), GroupSpec(3, 32, 4), GroupSpec(3, 64, 2)]),
        student=NetworkConfig([GroupSpec(1, 8, 8), GroupSpec(1, 16, 4), GroupSpec(1, 32, 2)]),
        dataset={"kind": "synthetic", "classes": 10, "image_size": 16, "samples_per_class": 100,
                 "test_per_class": 50, "noise": 0.4, "max_shift": 4, "clutter": 0.5, "seed": 1234},
        classes=10,
        input_size=16,
        search=SearchSchedule(epochs_per_group=3, batch_size=64, arch_lr=0.05, w_lr=0.05, crop_pad=2),
        distill=TrainSchedule(epochs=20, batch_size=64, lr=0.1, milestones=(6, 12, 16), crop_pad=2),
        teacher_train=TrainSchedule(epochs=30, batch_size=64, lr=0.1, milestones=(9, 18, 24), crop_pad=2),
        # the unnormalized feature distance is ~1e4 at this scale; 3e-4 brings it level with cross-entropy
        loss=LossWeights(gamma_fd=3e-4),
    )
    return cfg.replace(**overrides) if overrides else cfg


def wrn_groups(depth: int, widen: int, size: int = 32) -> list[GroupSpec]:
    """Layer groups of a WRN-depth-widen network: (depth - 4) / 6 blocks per group."""
    if (depth - 4) % 6:
        raise ConfigError(f"WRN depth must satisfy depth = 6n + 4, got {depth}")
    n = (depth - 4) // 6
    return [GroupSpec(n, 16 * widen, size), GroupSpec(n, 32 * widen, size // 2), GroupSpec(n, 64 * widen, size // 4)]


WRN_PAIRS = {1: ((28, 4), (16, 4)), 2: ((28, 4), (28, 2)), 3: ((28, 4), (16, 2))}


def cifar100_config(pair: int = 1, data_dir: str = "data/cifar100") -> ExperimentConfig:
    """Full-scale CIFAR-100 protocol (GPU-days in this numpy engine; provided for completeness)."""
    (td, tw), (sd, sw) = WRN_PAIRS[pair]
    return ExperimentConfig(
        name=f"cifar100-wrn{td}_{tw}-wrn{sd}_{sw}",
        teacher=NetworkConfig(wrn_groups(td, tw), stem_channels=16),
        student=NetworkConfig(wrn_groups(sd, sw), stem_channels=16),
        dataset={"kind": "binary", "train_path": f"{data_dir}/train.bin", "test_path": f"{data_dir}/test.bin",
                 "image_size": 32, "classes": 100},
        classes=100,
        input_size=32,
        search=SearchSchedule(epochs_per_group=40, batch_size=128),
        distill=TrainSchedule(epochs=200, batch_size=128, lr=0.1, milestones=(60, 120, 160), lr_decay=0.2),
        teacher_train=TrainSchedule(epochs=200, batch_size=128, lr=0.1, milestones=(60, 120, 160), lr_decay=0.2),
        precision="fp32",
    )


PRESETS = {"toy": toy_config, "cifar100": cifar100_config}
