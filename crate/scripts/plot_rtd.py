#!/usr/bin/env python3
"""Plot an RTD series written by `twinbridge bench rtd --out`."""

import argparse
import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("csv", type=Path)
    ap.add_argument("-o", "--out", type=Path, help="image path (default: <csv>.png)")
    args = ap.parse_args()

    with args.csv.open(newline="") as f:
        rows = list(csv.DictReader(f))
    frames = [int(r["frame"]) for r in rows]
    rtd = [float(r["rtd_ms"]) for r in rows]

    fig, (ax, hist) = plt.subplots(1, 2, figsize=(11, 4), gridspec_kw={"width_ratios": [3, 1]})
    ax.plot(frames, rtd, lw=0.8)
    ax.set_xlabel("frame")
    ax.set_ylabel("round-trip delay (ms)")
    hist.hist(rtd, bins=40, orientation="horizontal")
    hist.set_xlabel("count")
    hist.sharey(ax)

    sidecar = args.csv.with_name(args.csv.stem + ".stats.json")
    if sidecar.exists():
        stats = json.loads(sidecar.read_text())
        ax.axhline(stats["mean"], color="k", ls="--", lw=0.8, label=f"mean {stats['mean']:.2f} ms")
        ax.axhline(stats["p95"], color="r", ls=":", lw=0.8, label=f"p95 {stats['p95']:.2f} ms")
        ax.legend(loc="upper right")

    fig.tight_layout()
    out = args.out or args.csv.with_suffix(".png")
    fig.savefig(out, dpi=120)
    print(out)


if __name__ == "__main__":
    main()
