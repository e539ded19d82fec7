"""Held-out PSNR and Chamfer of stage-2 variants on the sphere benchmark.

    python scripts/sphere_benchmark.py --seeds 0-9 --variants base,ucb,random,sequential \
        --set stage1.steps=600 --set stage2.steps=200 --csv runs/sphere.csv

Stage 1 is trained once per seed and shared by all variants.
"""

import argparse
import csv
import logging
import time
from dataclasses import replace

import numpy as np

from sparseview.config import load_config, parse_config
from sparseview.pipeline import build_benchmark, reconstruct, run_stage1, variant

VARIANTS = {
    "base": lambda c: variant(c, baseline=True),
    "ucb": lambda c: c,
    "random": lambda c: variant(c, vs="random"),
    "sequential": lambda c: variant(c, vs="sequential"),
    "if-off": lambda c: variant(c, image_fusion=False),
}


def parse_seeds(text):
    seeds = []
    for part in text.split(","):
        lo, _, hi = part.partition("-")
        seeds += range(int(lo), int(hi or lo) + 1)
    return seeds


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], help="key=value override")
    p.add_argument("--seeds", default="0-9")
    p.add_argument("--variants", default="base,ucb")
    p.add_argument("--csv")
    args = p.parse_args()
    logging.basicConfig(level=logging.WARNING)

    base = load_config(args.config) if args.config else None
    cfg = parse_config("\n".join(args.set), "--set", base=base)
    kinds = args.variants.split(",")
    rows = []
    for seed in parse_seeds(args.seeds):
        scfg = replace(cfg, seed=seed)
        bench = build_benchmark(scfg)
        grid = run_stage1(bench, scfg)
        for kind in kinds:
            t0 = time.perf_counter()
            m = reconstruct(VARIANTS[kind](scfg), bench, grid).metrics
            rows.append({"seed": seed, "variant": kind, "psnr": m["psnr"], "ssim": m["ssim"],
                         "chamfer": m["chamfer"], "chamfer_cells": m["chamfer_cells"],
                         "seconds": time.perf_counter() - t0})
            print(f"seed {seed:3d} {kind:>10s}  psnr {m['psnr']:6.2f}  chamfer {m['chamfer']:.4f} "
                  f"({m['chamfer_cells']:.2f} cells)", flush=True)

    print("\nvariant      mean psnr   mean chamfer cells")
    for kind in kinds:
        sel = [r for r in rows if r["variant"] == kind]
        print(f"{kind:>10s}   {np.mean([r['psnr'] for r in sel]):9.2f}   "
              f"{np.mean([r['chamfer_cells'] for r in sel]):9.2f}")
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
