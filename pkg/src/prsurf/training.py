"""Residual-field optimization against a frozen basis grid."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, EmptySurfaceError
from .field import FieldConfig, FieldModel, evaluate_field, sample_field_lattice, save_checkpoint
from .grids import VoxelGrid
from .meshing import TriangleMesh, chamfer, marching_cubes_grid
from .rendering import (PatchWarper, RenderConfig, loss_eikonal, loss_normal, loss_patch,
                        loss_rgb, loss_total, render_batch)
from .sampling import AREA_EMPTY, AreaGrid, SamplingConfig, sample_rays
from .scene import SceneSpec, ray_box_intersect, render_ground_truth

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    iterations: int = 3000
    rays_per_batch: int = 1024
    lr_tables: float = 1e-2
    lr_mlp: float = 1e-3
    lr_final_factor: float = 0.05
    eikonal_points_per_iter: int = 4096
    lambdas: tuple[float, float, float] = (1.0, 0.1, 0.1)
    seed: int = 0
    eval_every: int = 0            # chamfer eval period in iterations, 0 = final only
    eval_resolution: int = 96
    num_threads: int = 2
    max_empty_batches: int = 100

    def validate(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.rays_per_batch < 1:
            raise ConfigError("rays_per_batch must be >= 1")
        if self.eikonal_points_per_iter < 0:
            raise ConfigError("eikonal_points_per_iter must be >= 0")


@dataclass
class TrainResult:
    model: FieldModel
    metrics: list[dict]
    aborted: bool = False
    final_chamfer: float = float("nan")


@dataclass
class SceneData:
    """Precomputed per-view ground truth used during training."""

    images: np.ndarray        # (V, H, W, 3)
    normals: np.ndarray       # (V, H, W, 3)
    masks: np.ndarray         # (V, H, W)
    fx: np.ndarray
    fy: np.ndarray
    cx: np.ndarray
    cy: np.ndarray
    rot: np.ndarray           # (V, 3, 3)
    centers: np.ndarray       # (V, 3)
    width: int = 0
    height: int = 0


def prepare_scene_data(spec: SceneSpec) -> SceneData:
    images, normals, masks = [], [], []
    for cam in spec.cameras:
        rgb, nrm, _, mask = render_ground_truth(spec, cam)
        images.append(rgb)
        normals.append(nrm)
        masks.append(mask)
    cams = spec.cameras
    return SceneData(
        images=np.stack(images), normals=np.stack(normals), masks=np.stack(masks),
        fx=np.array([c.fx for c in cams]), fy=np.array([c.fy for c in cams]),
        cx=np.array([c.cx for c in cams]), cy=np.array([c.cy for c in cams]),
        rot=np.stack([c.rotation for c in cams]),
        centers=np.stack([c.center for c in cams]),
        width=cams[0].width, height=cams[0].height)


def pick_rays(data: SceneData, rng: np.random.Generator, count: int):
    """Uniform pixels over all views; returns view ids, pixels, rays, gt."""
    n_views, h, w = data.images.shape[:3]
    flat = rng.integers(0, n_views * h * w, size=count, dtype=np.int64)
    view = flat // (h * w)
    row = (flat % (h * w)) // w
    col = flat % w
    pixels = np.stack([col + 0.5, row + 0.5], axis=-1)
    x = (pixels[:, 0] - data.cx[view]) / data.fx[view]
    y = (pixels[:, 1] - data.cy[view]) / data.fy[view]
    dirs_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    dirs = np.einsum("rk,rkj->rj", dirs_cam, data.rot[view])
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = data.centers[view]
    gt_rgb = data.images[view, row, col]
    gt_normal = data.normals[view, row, col]
    gt_mask = data.masks[view, row, col]
    return view, pixels, flat, origins, dirs, gt_rgb, gt_normal, gt_mask


def eikonal_points(areas: AreaGrid, rng: np.random.Generator, count: int,
                   near_surface_cells: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Half uniform in the box, half jittered around near-surface cells."""
    n_uniform = count // 2
    pts_u = rng.uniform(lo, hi, size=(n_uniform, 3))
    n_near = count - n_uniform
    if len(near_surface_cells) == 0:
        pts_n = rng.uniform(lo, hi, size=(n_near, 3))
    else:
        pick = rng.integers(0, len(near_surface_cells), size=n_near)
        centers = areas.origin + areas.spacing * (near_surface_cells[pick] + 0.5)
        pts_n = centers + rng.uniform(-0.5, 0.5, size=(n_near, 3)) * areas.spacing
    return np.concatenate([pts_u, pts_n], axis=0)


def build_optimizer(model: FieldModel, cfg: TrainConfig):
    # log_s trains with the tables: the opacity sharpness must be able to
    # anneal within a short, minutes-scale run
    fast = [model.geo_encoding.tables, model.color_encoding.tables, model.log_s]
    fast_ids = {id(p) for p in fast}
    others = [p for p in model.parameters() if id(p) not in fast_ids]
    opt = torch.optim.Adam(
        [{"params": fast, "lr": cfg.lr_tables},
         {"params": others, "lr": cfg.lr_mlp}],
        betas=(0.9, 0.99), eps=1e-15)
    floor = cfg.lr_final_factor

    def cosine(step):
        if cfg.iterations <= 1:
            return 1.0
        t = step / max(cfg.iterations - 1, 1)
        return floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * t))

    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_lambda=cosine)
    return opt, sched


def evaluate_chamfer(model: FieldModel, basis: VoxelGrid, spec: SceneSpec,
                     gt_mesh: TriangleMesh, resolution: int,
                     n_samples: int = 30000) -> float:
    lo, hi = spec.basis_domain()
    grid = sample_field_lattice(model, basis, lo, hi, resolution)
    try:
        mesh = marching_cubes_grid(grid)
    except EmptySurfaceError:
        return float("inf")
    return chamfer(mesh, gt_mesh, n_samples=n_samples, seed=12345)


def train(spec: SceneSpec, basis: VoxelGrid, areas: AreaGrid,
          field_cfg: FieldConfig, render_cfg: RenderConfig,
          sampling_cfg: SamplingConfig, cfg: TrainConfig,
          gt_mesh: TriangleMesh | None = None,
          metrics_path=None, checkpoint_path=None,
          uniform_sampling: bool = False) -> TrainResult:
    """Optimize the offset and color networks on one scene.

    uniform_sampling disables the prior-guided dropout (every equidistant
    candidate survives) for the sampling ablation.
    """
    cfg.validate()
    render_cfg.validate()
    torch.set_num_threads(cfg.num_threads)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    lo, hi = spec.basis_domain()
    model = FieldModel(field_cfg, lo, hi, s_init=render_cfg.s_init)
    data = prepare_scene_data(spec)
    warper = PatchWarper(spec, data.images, half_width=render_cfg.patch_half_width)
    near_cells = np.argwhere(areas.labels != AREA_EMPTY).astype(np.int64)
    bg = render_cfg.background_rgb
    box_lo, box_hi = basis.origin, basis.max_corner

    opt, sched = build_optimizer(model, cfg)
    metrics: list[dict] = []
    aborted = False
    empty_streak = 0
    backup = copy.deepcopy(model.state_dict())

    for it in range(cfg.iterations):
        view, pixels, pixel_ids, origins, dirs, gt_rgb, gt_normal, gt_mask = \
            pick_rays(data, rng, cfg.rays_per_batch)
        near, far, hit = ray_box_intersect(origins, dirs, box_lo, box_hi)
        near[~hit] = 0.0
        far[~hit] = 0.0
        batch = sample_rays(origins, dirs, near, far, areas, sampling_cfg,
                            seed=(cfg.seed << 16) ^ it, ray_ids=pixel_ids,
                            keep_all=uniform_sampling)

        br = render_batch(model, basis, batch, bg)
        if len(br.seg_start) == 0:
            empty_streak += 1
            if empty_streak > cfg.max_empty_batches:
                raise ConfigError(
                    f"{empty_streak} consecutive batches without survivors; "
                    "check sampling configuration")
            sched.step()
            continue
        empty_streak = 0

        l_rgb = loss_rgb(br.render.rgb, model.to_tensor(gt_rgb))
        l_patch = loss_patch(warper, br, batch, view, pixels)
        eik_pts = eikonal_points(areas, rng, cfg.eikonal_points_per_iter,
                                 near_cells, lo, hi)
        ev_eik = evaluate_field(model, basis, eik_pts, with_normals=True)
        l_eik = loss_eikonal(ev_eik.n)
        valid_n = model.to_tensor(gt_mask.astype(np.float64))
        l_normal = loss_normal(br.render.normal, model.to_tensor(gt_normal), valid_n)
        total = loss_total(l_rgb, l_patch, l_eik, l_normal, cfg.lambdas)

        if not torch.isfinite(total):
            log.error("non-finite loss at iteration %d; restoring last checkpoint", it)
            model.load_state_dict(backup)
            aborted = True
            break

        row = {"iteration": it, "loss_total": total.detach().item(),
               "loss_rgb": l_rgb.detach().item(), "loss_patch": l_patch.detach().item(),
               "loss_eik": l_eik.detach().item(), "loss_normal": l_normal.detach().item(),
               "s": model.s.detach().item(), "survivors": int(batch.n_samples),
               "chamfer": ""}
        if cfg.eval_every and gt_mesh is not None and it % cfg.eval_every == 0 and it > 0:
            cd = evaluate_chamfer(model, basis, spec, gt_mesh, cfg.eval_resolution)
            row["chamfer"] = float(cd)
            backup = copy.deepcopy(model.state_dict())
        metrics.append(row)

        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        sched.step()

    final_cd = float("nan")
    if gt_mesh is not None:
        final_cd = evaluate_chamfer(model, basis, spec, gt_mesh, cfg.eval_resolution)
        if metrics:
            metrics[-1]["chamfer"] = float(final_cd)

    if metrics_path is not None:
        write_metrics(metrics_path, metrics)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model,
                        extra={"iterations": cfg.iterations, "seed": cfg.seed,
                               "final_chamfer": final_cd, "aborted": aborted})
    return TrainResult(model=model, metrics=metrics, aborted=aborted,
                       final_chamfer=final_cd)


_METRIC_COLUMNS = ["iteration", "loss_total", "loss_rgb", "loss_patch",
                   "loss_eik", "loss_normal", "s", "survivors", "chamfer"]


def write_metrics(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(_METRIC_COLUMNS)
        for row in rows:
            out = []
            for key in _METRIC_COLUMNS:
                val = row.get(key, "")
                out.append(f"{val:.9g}" if isinstance(val, float) else val)
            writer.writerow(out)
