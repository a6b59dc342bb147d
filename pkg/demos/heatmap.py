"""Print the per-epoch aggregation weights of a search run as a text heatmap.

Each row is one epoch of the search for one group (epoch 0 is the
initialization), each column a teacher layer.  Darker shading is a larger
weight.

    python demos/heatmap.py runs/demo-toy/dfa-s0-search
"""

import sys
from pathlib import Path

from dfakd.harness.experiments import export_heatmap, read_heatmap

SHADES = " .:-=+*#%@"


def main(run_dir):
    for path in export_heatmap(run_dir):
        epochs, matrix = read_heatmap(path)
        print(Path(path).name)
        for epoch, row in zip(epochs, matrix):
            cells = "".join(SHADES[min(int(a * len(SHADES)), len(SHADES) - 1)] * 3 for a in row)
            print(f"  epoch {epoch:2d} |{cells}|  " + " ".join(f"{a:.3f}" for a in row))


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit(__doc__)
    main(sys.argv[1])
