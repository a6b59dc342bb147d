"""Tiny experiment configs shared by the harness and CLI tests."""

from dfakd.harness.config import ExperimentConfig, NetworkConfig
from dfakd.losses import LossWeights
from dfakd.networks import GroupSpec
from dfakd.search import SearchSchedule, TrainSchedule


def tiny_config(output_dir, **overrides) -> ExperimentConfig:
    cfg = ExperimentConfig(
        name="tiny",
        teacher=NetworkConfig([GroupSpec(2, 8, 8), GroupSpec(2, 16, 4)]),
        student=NetworkConfig([GroupSpec(1, 4, 8), GroupSpec(1, 8, 4)]),
        dataset={"kind": "synthetic", "classes": 5, "image_size": 8, "samples_per_class": 20, "test_per_class": 4,
                 "noise": 0.3, "max_shift": 1, "seed": 11},
        classes=5,
        input_size=8,
        search=SearchSchedule(epochs_per_group=2, batch_size=16, arch_lr=0.05, crop_pad=1),
        distill=TrainSchedule(epochs=2, batch_size=16, milestones=(1,), crop_pad=1),
        teacher_train=TrainSchedule(epochs=2, batch_size=16, milestones=(1,), crop_pad=1),
        loss=LossWeights(gamma_fd=1e-2),
        seeds=[0, 1],
        output_dir=str(output_dir),
    )
    return cfg.replace(**overrides) if overrides else cfg
