#!/usr/bin/env python3
"""Plot the impact samples written by `cherryq analyze`.

    python3 scripts/plot_scatter.py runs/analyze [out.png]

One panel per matrix: sampled impact values by flat parameter index, on a
log scale, which makes the few outlying parameters easy to spot.
"""
import csv
import math
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def main():
    if len(sys.argv) not in (2, 3):
        sys.exit(__doc__)
    run = Path(sys.argv[1])
    out = Path(sys.argv[2]) if len(sys.argv) == 3 else run / "scatter.png"
    files = sorted((run / "scatter").glob("*.csv"))
    if not files:
        sys.exit(f"no scatter files under {run / 'scatter'}")
    cols = 3
    rows = math.ceil(len(files) / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(4 * cols, 3 * rows), squeeze=False)
    for ax, f in zip(axes.flat, files):
        with f.open() as fh:
            data = [(int(r["index"]), float(r["impact"])) for r in csv.DictReader(fh)]
        xs = [i for i, v in data if v > 0]
        ys = [v for _, v in data if v > 0]
        ax.scatter(xs, ys, s=2)
        ax.set_yscale("log")
        ax.set_title(f.stem, fontsize=8)
        ax.set_xlabel("parameter index")
    for ax in list(axes.flat)[len(files):]:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    print(out)


if __name__ == "__main__":
    main()
