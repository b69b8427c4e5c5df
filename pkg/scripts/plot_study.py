#!/usr/bin/env python3
"""Plot study CSVs written by `countssm simulate` / `countssm study`.

Usage:
    python scripts/plot_study.py STUDY_DIR [STUDY_DIR ...] --out plots.png

Each STUDY_DIR must contain trajectories.csv, moments.csv, density.csv.
Purely cosmetic helper; nothing in the test suite depends on it.
"""
import argparse
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def _read_csv(path):
    with open(path) as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    header, body = rows[0], rows[1:]
    return header, body


def _plot_dir(axes, study_dir: Path, label: str):
    _, traj = _read_csv(study_dir / "trajectories.csv")
    paths = {}
    for pid, t, theta, _y in traj:
        paths.setdefault(pid, []).append((int(t), float(theta)))
    for pid, points in paths.items():
        points.sort()
        axes[0].plot([p[0] for p in points], [p[1] for p in points], lw=0.8, alpha=0.8)
    axes[0].set_title(f"{label}: sample paths")
    axes[0].set_xlabel("t")

    _, moments = _read_csv(study_dir / "moments.csv")
    ts = [int(r[0]) for r in moments]
    axes[1].plot(ts, [float(r[1]) for r in moments], label="mean")
    axes[1].plot(ts, [float(r[2]) for r in moments], label="variance")
    axes[1].set_title(f"{label}: moments")
    axes[1].set_xlabel("t")
    axes[1].legend(fontsize=8)

    _, dens = _read_csv(study_dir / "density.csv")
    curves = {}
    for t, g, d in dens:
        curves.setdefault(int(t), []).append((float(g), float(d)))
    for t, pts in sorted(curves.items()):
        axes[2].plot([p[0] for p in pts], [p[1] for p in pts], label=f"t={t}", lw=1.0)
    axes[2].set_title(f"{label}: density of the latent factor")
    axes[2].legend(fontsize=8)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("dirs", nargs="+", help="study output directories")
    parser.add_argument("--out", default="study.png")
    args = parser.parse_args()
    dirs = [Path(d) for d in args.dirs]
    fig, axes = plt.subplots(len(dirs), 3, figsize=(13, 3.2 * len(dirs)), squeeze=False)
    for row, d in enumerate(dirs):
        _plot_dir(axes[row], d, d.name)
    fig.tight_layout()
    fig.savefig(args.out, dpi=130)
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
