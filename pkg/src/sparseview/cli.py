"""Command-line front end.

    sparseview scene        --config run.cfg --out runs/a
    sparseview reconstruct  --config run.cfg --out runs/a [--skip-stage2]
    sparseview ablate       --config run.cfg --out runs/a
    sparseview evaluate     runs/a/recon/mesh.obj --config run.cfg --out runs/a

Exit status: 0 on success, 1 for configuration errors, 2 for runtime or
numerical errors. Failures print one ``error[<kind>]: <reason>`` line to
stderr.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from dataclasses import replace

from . import ablation
from .config import MAX_SEED, ConfigError, RunConfig, dump_config, load_config
from .consensus import STRATEGIES
from .image import save_image
from .mesh import read_obj, render_mesh, write_obj
from .pipeline import (
    Benchmark,
    build_benchmark,
    image_metrics,
    load_scene_assets,
    mesh_metrics,
    reconstruct,
    write_scene_assets,
)
from .recon import Stage2Config
from .scene import shade
from .volume import save_checkpoint

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

METRIC_KEYS = ("psnr", "ssim", "perceptual_proxy", "chamfer", "chamfer_cells", "cell_size")
FUSION_CHOICES = tuple(s for s in STRATEGIES if s != "single")


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v <= MAX_SEED:
        raise argparse.ArgumentTypeError("seed must be in [0, 2^64)")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=_seed, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--vs", choices=("ucb", "random", "sequential"), help="viewpoint selection")
    common.add_argument("--if", dest="image_fusion", choices=("on", "off"), help="image fusion")
    common.add_argument("--fusion", choices=FUSION_CHOICES, help="fusion strategy")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="sparseview", description="Sparse-view grid reconstruction with consensus-fused "
                                               "pseudo ground truth and bandit viewpoint selection.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("scene", parents=[common], help="write ground-truth views and cameras.csv")
    rec = sub.add_parser("reconstruct", parents=[common], help="run both stages, write mesh and metrics")
    rec.add_argument("--skip-stage2", action="store_true", help="stop after stage 1")
    sub.add_parser("ablate", parents=[common], help="run the ablation matrix and write tables")
    ev = sub.add_parser("evaluate", parents=[common], help="score a mesh against the scene")
    ev.add_argument("mesh", help="OBJ file")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    s2, fu = cfg.stage2, cfg.fusion
    if args.vs is not None:
        s2 = replace(s2, selection=args.vs)
    if args.fusion is not None:
        fu = replace(fu, strategy=args.fusion)
    if args.image_fusion == "off":
        fu = replace(fu, strategy="single")
    return replace(cfg, stage2=s2, fusion=fu)


def _subdir(cfg: RunConfig, name: str) -> str:
    path = os.path.join(cfg.out, name)
    os.makedirs(path, exist_ok=True)
    return path


def _echo_config(cfg: RunConfig, directory: str) -> None:
    with open(os.path.join(directory, "config.txt"), "w") as f:
        f.write(dump_config(cfg))


def _fmt(v) -> str:
    return f"{v:.9g}" if isinstance(v, float) else str(v)


def write_metrics(path, metrics: dict, keys=METRIC_KEYS) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        for k in keys:
            if k in metrics:
                w.writerow([k, _fmt(metrics[k])])


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def cmd_scene(cfg: RunConfig) -> Benchmark:
    bench = build_benchmark(cfg)
    out = _subdir(cfg, "scene")
    write_scene_assets(out, bench)
    _echo_config(cfg, out)
    return bench


def cmd_reconstruct(cfg: RunConfig, skip_stage2: bool = False) -> dict:
    bench = load_scene_assets(os.path.join(cfg.out, "scene"), cfg.scene)
    out = _subdir(cfg, "recon")
    _echo_config(cfg, out)
    rec = reconstruct(cfg, bench, skip_stage2=skip_stage2)
    save_checkpoint(rec.stage1, os.path.join(out, "stage1.svgr"))
    write_rows(os.path.join(out, "stage1_log.csv"), ("step", "loss"), rec.stage1_history)
    if rec.stage2 is not None:
        save_checkpoint(rec.sdf, os.path.join(out, "stage2.svgr"))
        cols = ("step", "action", "raw_loss", "reward", "kept", "total", "color", "tv", "diff", "heldout_psnr")
        write_rows(os.path.join(out, "stage2_log.csv"), cols,
                   [[row.get(c, "") for c in cols] for row in rec.stage2.history])
        if rec.stage2.bandit_log.rows:
            rec.stage2.bandit_log.write(os.path.join(out, "bandit_log.csv"))
    write_obj(rec.mesh, os.path.join(out, "mesh.obj"))
    for i, img in enumerate(rec.heldout_renders):
        save_image(img, os.path.join(out, f"heldout_{i:02d}.ppm"))
    write_metrics(os.path.join(out, "metrics.csv"), rec.metrics)
    return rec.metrics


def cmd_ablate(cfg: RunConfig) -> list[dict]:
    out = _subdir(cfg, "ablate")
    _echo_config(cfg, out)
    seeds = ablation.ablation_seeds(cfg)
    rows = ablation.run_ablation(cfg, seeds)
    summary = ablation.summarize(rows)
    ablation.write_rows(os.path.join(out, "ablation_runs.csv"), rows)
    ablation.write_rows(os.path.join(out, "ablation.csv"), summary)
    with open(os.path.join(out, "ablation.md"), "w") as f:
        f.write(ablation.markdown_tables(summary, seeds))
    return summary


def cmd_evaluate(cfg: RunConfig, mesh_path: str) -> dict:
    mesh = read_obj(mesh_path)
    scene_dir = os.path.join(cfg.out, "scene")
    if os.path.exists(os.path.join(scene_dir, "cameras.csv")):
        bench = load_scene_assets(scene_dir, cfg.scene)
    else:
        bench = build_benchmark(cfg)
    renders = [render_mesh(mesh, cam, lambda p, n: shade(cfg.scene, p, n)) for cam, _ in bench.heldout]
    metrics = image_metrics(renders, [img for _, img in bench.heldout])
    cell = _cell_size(cfg.stage2)
    metrics.update(mesh_metrics(mesh, cfg.scene, cell, cfg))
    out = _subdir(cfg, "evaluate")
    write_metrics(os.path.join(out, "metrics.csv"), metrics)
    return metrics


def _cell_size(s2: Stage2Config) -> float:
    return 2.0 / (s2.resolution - 1)


def _report(metrics: dict) -> None:
    for k in METRIC_KEYS:
        if k in metrics and not (isinstance(metrics[k], float) and math.isnan(metrics[k])):
            label = "perceptual_proxy (1-SSIM)/2" if k == "perceptual_proxy" else k
            print(f"{label}\t{_fmt(metrics[k])}")


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"error[config]: {_one_line(exc)}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "scene":
            cmd_scene(cfg)
        elif args.command == "reconstruct":
            _report(cmd_reconstruct(cfg, args.skip_stage2))
        elif args.command == "ablate":
            cmd_ablate(cfg)
            print(os.path.join(cfg.out, "ablate", "ablation.md"))
        elif args.command == "evaluate":
            _report(cmd_evaluate(cfg, args.mesh))
    except ConfigError as exc:
        print(f"error[config]: {_one_line(exc)}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, RuntimeError, OSError, ArithmeticError) as exc:
        print(f"error[runtime]: {_one_line(exc)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
