"""The whole two-stage pipeline on the toy synthetic task, one seed.

Trains a teacher (or reuses one already in the output directory), then
compares the student alone, last-layer distillation and the searched
aggregation.  Takes a few minutes on one core.

    python demos/toy_pipeline.py [output_dir]
"""

import sys

import numpy as np

from dfakd.harness import experiments as ex
from dfakd.harness.config import toy_config


def main(output_dir="runs/demo-toy"):
    config = toy_config(output_dir=output_dir)
    if not config.teacher_checkpoint_path().exists():
        print("training the teacher ...")
        ex.train_teacher(config, 0)
    teacher = ex.load_teacher(config)
    print(f"teacher test accuracy {ex.teacher_accuracy(config, teacher):.4f}")

    rows = []
    for method in ("student", "last", "dfa"):
        row = ex.run_method(config, method, 0, teacher)
        rows.append(row)
        print(f"{method:8s} test_acc={row['test_acc']:.4f}  wall={row['wall_time']:.0f}s  -> {row['run_dir']}")

    weights = ex.load_alpha_file(f"{output_dir}/dfa-s0/alpha.weights")
    print("\nsearched aggregation weights (alpha per teacher layer, last layer rightmost):")
    for g, a in enumerate(weights.alphas()):
        print(f"  group {g}: {np.round(a, 4)}")
    print("\nsummary:")
    print(ex.format_table(ex.compare_runs([r["run_dir"] for r in rows])))


if __name__ == "__main__":
    main(*sys.argv[1:])
