"""Ablation matrix: image fusion x viewpoint selection, and fusion strategies."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .config import RunConfig
from .pipeline import build_benchmark, reconstruct, run_stage1, variant

log = logging.getLogger(__name__)

VS_KINDS = ("ucb", "random", "sequential")
VS_LABELS = {"ucb": "UCB (ours)", "random": "Random", "sequential": "Sequential"}
FUSION_ROWS = ("ours", "no-iqr", "max-pixel", "min-pixel", "max-image", "min-image")
FUSION_LABELS = {
    "ours": "IQR filter + variance-aware fusion (ours)",
    "no-iqr": "Variance-aware fusion without IQR filter",
    "max-pixel": "Max pixel",
    "min-pixel": "Min pixel",
    "max-image": "Max image",
    "min-image": "Min image",
}
METRICS = ("psnr", "ssim", "chamfer")


@dataclass(frozen=True)
class Cell:
    group: str  # "if_vs" or "fusion"
    image_fusion: bool
    vs: str
    fusion: str

    @property
    def key(self) -> tuple:
        """Identity of the actual run; equal keys share results."""
        return (self.image_fusion, self.vs, self.fusion if self.image_fusion else "single")


def ablation_cells() -> list[Cell]:
    cells = [Cell("if_vs", on, vs, "ours") for on in (True, False) for vs in VS_KINDS]
    cells += [Cell("fusion", True, "ucb", f) for f in FUSION_ROWS]
    return cells


def cell_config(cfg: RunConfig, cell: Cell) -> RunConfig:
    return variant(cfg, vs=cell.vs, fusion=cell.fusion, image_fusion=cell.image_fusion)


def ablation_seeds(cfg: RunConfig, k: int | None = None) -> list[int]:
    k = cfg.eval.ablation_seeds if k is None else k
    return [cfg.seed + i for i in range(k)]


def run_ablation(cfg: RunConfig, seeds=None) -> list[dict]:
    """One row per (cell, seed) with the held-out and mesh metrics.

    Stage 1 is shared by all cells of a seed; cells that describe the same
    run (the full method appears in both groups) are computed once.
    """
    seeds = ablation_seeds(cfg) if seeds is None else list(seeds)
    rows = []
    for seed in seeds:
        scfg = replace(cfg, seed=seed)
        bench = build_benchmark(scfg)
        grid = run_stage1(bench, scfg)
        done = {}
        for cell in ablation_cells():
            if cell.key not in done:
                log.info("ablation seed %d: IF=%s VS=%s fusion=%s", seed, cell.image_fusion, cell.vs, cell.fusion)
                done[cell.key] = reconstruct(cell_config(scfg, cell), bench, grid).metrics
            m = done[cell.key]
            rows.append({"group": cell.group, "image_fusion": cell.image_fusion, "vs": cell.vs,
                         "fusion": cell.fusion, "seed": seed, **{k: m[k] for k in METRICS}})
    return rows


def summarize(rows: list[dict]) -> list[dict]:
    """Mean and population std per cell, in matrix order."""
    out = []
    for cell in ablation_cells():
        sel = [r for r in rows if r["group"] == cell.group and r["image_fusion"] == cell.image_fusion
               and r["vs"] == cell.vs and r["fusion"] == cell.fusion]
        if not sel:
            continue
        s = {"group": cell.group, "image_fusion": cell.image_fusion, "vs": cell.vs, "fusion": cell.fusion,
             "n": len(sel)}
        for k in METRICS:
            vals = np.array([r[k] for r in sel], dtype=float)
            s[f"{k}_mean"] = float(vals.mean())
            s[f"{k}_std"] = float(vals.std())
        out.append(s)
    return out


def _pm(s: dict, k: str, digits: int) -> str:
    mean, std = s[f"{k}_mean"], s[f"{k}_std"]
    if math.isnan(mean):
        return "n/a"
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def _row(s: dict) -> str:
    return f"{_pm(s, 'psnr', 2)} | {_pm(s, 'ssim', 3)} | {_pm(s, 'chamfer', 4)} |"


def markdown_tables(summary: list[dict], seeds) -> str:
    seeds = list(seeds)
    head = "| PSNR ↑ | SSIM ↑ | Chamfer ↓ |"
    rule = "---:|---:|---:|"
    lines = [f"# Ablations ({len(seeds)} seeds: {', '.join(map(str, seeds))})", "",
             "## Image fusion (IF) and viewpoint selection (VS)", "",
             "| IF | VS " + head, "|:---:|:---|" + rule]
    ifvs = [s for s in summary if s["group"] == "if_vs"]
    for s in ifvs:
        mark = "✓" if s["image_fusion"] else "✗"
        lines.append(f"| {mark} | {VS_LABELS[s['vs']]} | " + _row(s))
    lines += ["", "## Fusion strategy", "", "| Strategy " + head, "|:---|" + rule]
    for s in summary:
        if s["group"] == "fusion":
            lines.append(f"| {FUSION_LABELS[s['fusion']]} | " + _row(s))
    lines += ["", "## Viewpoint selection strategy", "", "| Strategy " + head, "|:---|" + rule]
    for s in ifvs:
        if s["image_fusion"]:
            lines.append(f"| {VS_LABELS[s['vs']]} | " + _row(s))
    lines.append("")
    return "\n".join(lines)


def write_rows(path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("no rows to write")
    keys = list(rows[0])
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(keys)
        for r in rows:
            w.writerow([_cell(r[k]) for k in keys])


def _cell(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)
