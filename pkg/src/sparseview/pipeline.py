"""End-to-end runs on synthetic scenes: benchmark assets, both stages, metrics."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from . import bandit as bd
from .camera import Camera
from .config import RunConfig
from .consensus import ssim_distance
from .enhancer import NoiseSchedule, ToyEnhancer
from .image import load_image, psnr, save_image, ssim
from .mesh import Mesh, chamfer_distance, extract_mesh, sample_surface, sphere_sampler
from .recon import (
    Stage2Result,
    sdf_render,
    stage1_to_sdf,
    train_stage1,
    train_stage2,
)
from .scene import SceneSpec, Sphere, analytic_sdf, ground_truth_render, sample_sparse_cameras
from .volume import DensityGrid, SdfGrid, grid_points, render

log = logging.getLogger(__name__)

# independent random streams derived from the master seed
STREAM_TRAIN_CAMERAS = 0
STREAM_HELDOUT_CAMERAS = 1
STREAM_STAGE2 = 2


@dataclass
class Benchmark:
    scene: SceneSpec
    train: list  # [(Camera, image)]
    heldout: list  # [(Camera, image)]


def _camera_kw(cfg: RunConfig) -> dict:
    v = cfg.views
    return dict(fov_y=math.radians(v.fov_deg), width=v.width, height=v.height)


def make_cameras(cfg: RunConfig) -> tuple[list[Camera], list[Camera]]:
    v = cfg.views
    kw = _camera_kw(cfg)
    train = sample_sparse_cameras(v.n_views, v.radius, v.elevation, [cfg.seed, STREAM_TRAIN_CAMERAS],
                                  cfg.scene, **kw)
    held = []
    if v.n_heldout:
        held = sample_sparse_cameras(v.n_heldout, v.radius, v.elevation, [cfg.seed, STREAM_HELDOUT_CAMERAS],
                                     cfg.scene, **kw)
    return train, held


def build_benchmark(cfg: RunConfig) -> Benchmark:
    train, held = make_cameras(cfg)
    return Benchmark(cfg.scene,
                     [(c, ground_truth_render(cfg.scene, c)) for c in train],
                     [(c, ground_truth_render(cfg.scene, c)) for c in held])


class OracleCache:
    """Memoized ground-truth renders; only the synthetic harness has these."""

    def __init__(self, scene: SceneSpec):
        self.scene = scene
        self._cache = {}

    def __call__(self, cam: Camera) -> np.ndarray:
        img = self._cache.get(cam)
        if img is None:
            img = self._cache[cam] = ground_truth_render(self.scene, cam)
        return img


def make_enhancer(cfg: RunConfig, oracle=None) -> ToyEnhancer:
    s = cfg.schedule
    sched = NoiseSchedule.linear(s.T, s.beta_start, s.beta_end)
    return ToyEnhancer(cfg.enhancer, sched, oracle if oracle is not None else OracleCache(cfg.scene))


def run_stage1(bench: Benchmark, cfg: RunConfig, history=None) -> DensityGrid:
    s1 = cfg.stage1
    grid = DensityGrid.constant(s1.resolution, s1.init_density, s1.init_color)
    return train_stage1(grid, bench.train, s1, history)


def variant(cfg: RunConfig, *, vs: str | None = None, fusion: str | None = None,
            image_fusion: bool | None = None, baseline: bool = False) -> RunConfig:
    """Config for one ablation cell.

    ``baseline`` drops the diffusion term and viewpoint selection; IF off
    supervises with a single enhancer sample instead of the fused image.
    """
    s2, fu, w = cfg.stage2, cfg.fusion, cfg.weights
    if vs is not None:
        s2 = replace(s2, selection=vs)
    if fusion is not None:
        fu = replace(fu, strategy=fusion)
    if image_fusion is False:
        fu = replace(fu, strategy="single")
    if baseline:
        s2 = replace(s2, selection="off")
        w = replace(w, lambda_diff=0.0)
    return replace(cfg, stage2=s2, fusion=fu, weights=w)


def run_stage2(bench: Benchmark, sdf: SdfGrid, cfg: RunConfig, enhancer=None) -> Stage2Result:
    s2 = cfg.stage2
    cams = [c for c, _ in bench.train]
    n = len(cams) if s2.n_interp is None else s2.n_interp
    actions = bd.build_action_space(cams, n if len(cams) >= 2 else 0)
    if enhancer is None:
        enhancer = make_enhancer(cfg)
    rng = np.random.default_rng([cfg.seed, STREAM_STAGE2])
    return train_stage2(sdf, bench.train, actions, enhancer, rng, s2, cfg.weights, cfg.fusion, bench.heldout)


def reference_sampler(scene: SceneSpec, resolution: int = 129):
    """Point sampler on the analytic surface; exact for a lone sphere."""
    if len(scene.primitives) == 1 and isinstance(scene.primitives[0], Sphere):
        s = scene.primitives[0]
        return sphere_sampler(s.center, s.radius)
    pts = grid_points(resolution)
    values = -analytic_sdf(scene, pts)
    ref = extract_mesh(SdfGrid(values, np.zeros(values.shape + (3,))))
    return lambda n, rng: sample_surface(ref, n, rng)


def image_metrics(renders, targets) -> dict:
    """Mean PSNR, SSIM and the SSIM-based perceptual proxy over view pairs."""
    if not targets:
        return {"psnr": math.nan, "ssim": math.nan, "perceptual_proxy": math.nan}
    return {
        "psnr": float(np.mean([psnr(a, b) for a, b in zip(renders, targets)])),
        "ssim": float(np.mean([ssim(a, b) for a, b in zip(renders, targets)])),
        "perceptual_proxy": float(np.mean([ssim_distance(a, b) for a, b in zip(renders, targets)])),
    }


def mesh_metrics(mesh: Mesh | None, scene: SceneSpec, cell_size: float, cfg: RunConfig) -> dict:
    if mesh is None:
        return {"chamfer": math.nan, "chamfer_cells": math.nan, "cell_size": cell_size}
    ch = chamfer_distance(mesh, reference_sampler(scene), cfg.eval.chamfer_samples, seed=cfg.seed)
    return {"chamfer": ch, "chamfer_cells": ch / cell_size, "cell_size": cell_size}


@dataclass
class Reconstruction:
    stage1: DensityGrid
    sdf: SdfGrid
    mesh: Mesh
    metrics: dict
    stage1_history: list
    stage2: Stage2Result | None
    heldout_renders: list


def evaluate_sdf(sdf: SdfGrid, bench: Benchmark, cfg: RunConfig) -> tuple[dict, list, Mesh]:
    renders = [sdf_render(sdf, cam, cfg.stage2) for cam, _ in bench.heldout]
    metrics = image_metrics(renders, [img for _, img in bench.heldout])
    mesh = extract_mesh(sdf)
    metrics.update(mesh_metrics(mesh, bench.scene, sdf.cell_size, cfg))
    return metrics, renders, mesh


def reconstruct(cfg: RunConfig, bench: Benchmark | None = None, stage1: DensityGrid | None = None,
                skip_stage2: bool = False, enhancer=None) -> Reconstruction:
    """Stage 1, density -> signed field, optional stage 2, mesh and metrics.

    A precomputed ``stage1`` grid can be passed to share it across variants
    (stage 1 does not depend on any stage-2 setting).
    """
    bench = bench if bench is not None else build_benchmark(cfg)
    history = []
    if stage1 is None:
        stage1 = run_stage1(bench, cfg, history)
    sdf = stage1_to_sdf(stage1, cfg.stage2.resolution, cfg.stage2.theta_fraction)
    result = None
    if skip_stage2:
        renders = [render(stage1, cam, cfg.stage1.samples_per_ray) for cam, _ in bench.heldout]
        metrics = image_metrics(renders, [img for _, img in bench.heldout])
        mesh = extract_mesh(sdf)
        metrics.update(mesh_metrics(mesh, bench.scene, sdf.cell_size, cfg))
    else:
        result = run_stage2(bench, sdf, cfg, enhancer)
        sdf = result.sdf
        metrics, renders, mesh = evaluate_sdf(sdf, bench, cfg)
    return Reconstruction(stage1, sdf, mesh, metrics, history, result, renders)


# ---- scene assets on disk -------------------------------------------------

CAMERA_HEADER = ("split", "index", "px", "py", "pz", "tx", "ty", "tz", "ux", "uy", "uz",
                 "fov_y", "width", "height")


class AssetError(RuntimeError):
    pass


def write_cameras(path, bench: Benchmark) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CAMERA_HEADER)
        for split, views in (("train", bench.train), ("heldout", bench.heldout)):
            for i, (cam, _) in enumerate(views):
                w.writerow([split, i, *map(repr, cam.position), *map(repr, cam.target), *map(repr, cam.up),
                            repr(cam.fov_y), cam.width, cam.height])


def read_cameras(path) -> dict[str, list[Camera]]:
    out = {"train": [], "heldout": []}
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except OSError as exc:
        raise AssetError(f"cannot read {path}: {exc.strerror}") from None
    if not rows or tuple(rows[0]) != CAMERA_HEADER:
        raise AssetError(f"{path}: unexpected header")
    for lineno, row in enumerate(rows[1:], 2):
        try:
            split = row[0]
            vals = [float(x) for x in row[2:12]]
            cam = Camera(tuple(vals[0:3]), tuple(vals[3:6]), tuple(vals[6:9]), vals[9], int(row[12]), int(row[13]))
        except (ValueError, IndexError) as exc:
            raise AssetError(f"{path}:{lineno}: {exc}") from None
        if split not in out:
            raise AssetError(f"{path}:{lineno}: unknown split {split!r}")
        out[split].append(cam)
    return out


def view_filename(split: str, index: int) -> str:
    return f"{split}_{index:02d}.ppm"


def write_scene_assets(directory, bench: Benchmark) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    written = []
    for split, views in (("train", bench.train), ("heldout", bench.heldout)):
        for i, (_, img) in enumerate(views):
            name = view_filename(split, i)
            save_image(img, os.path.join(directory, name))
            written.append(name)
    write_cameras(os.path.join(directory, "cameras.csv"), bench)
    return written


def load_scene_assets(directory, scene: SceneSpec) -> Benchmark:
    cams_path = os.path.join(directory, "cameras.csv")
    if not os.path.exists(cams_path):
        raise AssetError(f"missing scene assets in {directory} (run the 'scene' command first)")
    cams = read_cameras(cams_path)
    views = {}
    for split, lst in cams.items():
        views[split] = []
        for i, cam in enumerate(lst):
            img = load_image(os.path.join(directory, view_filename(split, i)))
            if img.shape != (cam.height, cam.width, 3):
                raise AssetError(f"{split} view {i}: image {img.shape} does not match its camera")
            views[split].append((cam, img))
    if not views["train"]:
        raise AssetError(f"{cams_path}: no training views")
    return Benchmark(scene, views["train"], views["heldout"])
