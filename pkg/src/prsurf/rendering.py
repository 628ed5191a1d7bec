"""Volume rendering of color and normals along sampled rays, and losses.

Opacity follows the discrete estimator used by SDF-based volume renderers:
alpha_i = max((phi_s(d_i) - phi_s(d_{i+1})) / phi_s(d_i), 0) with phi_s the
logistic CDF. Each surviving sample pair on a ray forms one segment; the
segment carries the first sample's color and normal. Transmittance
telescopes, so sum(T_i alpha_i) + T_final = 1 exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError
from .field import FieldEval, FieldModel, evaluate_field
from .grids import VoxelGrid
from .sampling import RaySampleBatch
from .scene import Camera, SceneSpec, neighbor_view_map


@dataclass
class RenderConfig:
    s_init: float = 64.0          # logistic sharpness at the start of training
    patch_half_width: int = 2     # 5x5 patches
    background: str = "white"

    def validate(self):
        if self.s_init <= 0:
            raise ConfigError("s_init must be > 0")
        if self.patch_half_width < 0:
            raise ConfigError("patch_half_width must be >= 0")
        if self.background not in ("white", "black"):
            raise ConfigError("background must be white or black")

    @property
    def background_rgb(self) -> np.ndarray:
        return np.ones(3) if self.background == "white" else np.zeros(3)


def logistic_cdf(x: torch.Tensor, s) -> torch.Tensor:
    return torch.sigmoid(s * x)


def alpha_from_sdf(d_i: torch.Tensor, d_next: torch.Tensor, s) -> torch.Tensor:
    """Opacity of the segment between two consecutive SDF samples.

    Stable form of max(1 - phi_s(d_next)/phi_s(d_i), 0): the log ratio is
    clamped at zero before exponentiation (a positive log ratio means the
    SDF increased, which the max() zeroes anyway) so neither the value nor
    the gradient can overflow.
    """
    log_ratio = F.logsigmoid(s * d_next) - F.logsigmoid(s * d_i)
    return 1.0 - torch.exp(torch.clamp(log_ratio, max=0.0))


def segment_indices(ray_index: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flat indices of samples that start a segment, and their ray ids.

    A segment is a consecutive pair of surviving samples on the same ray.
    """
    ray_index = np.asarray(ray_index)
    if len(ray_index) < 2:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    start = np.nonzero(ray_index[:-1] == ray_index[1:])[0]
    return start, ray_index[start]


def pad_by_ray(seg_ray: np.ndarray, n_rays: int):
    """Padded layout for flat per-segment values grouped by ray.

    Requires seg_ray non-decreasing. Returns (gather, mask, slot) where
    gather is (n_rays, k_max) flat indices, mask flags real segments and
    slot is each flat segment's column in the padded layout.
    """
    seg_ray = np.asarray(seg_ray, dtype=np.int64)
    counts = np.bincount(seg_ray, minlength=n_rays)
    k_max = max(int(counts.max()), 1) if len(seg_ray) else 1
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    slot = np.arange(len(seg_ray)) - starts[seg_ray]
    gather = np.zeros((n_rays, k_max), dtype=np.int64)
    mask = np.zeros((n_rays, k_max), dtype=bool)
    gather[seg_ray, slot] = np.arange(len(seg_ray))
    mask[seg_ray, slot] = True
    return gather, mask, slot


@dataclass
class RayRender:
    rgb: torch.Tensor        # (R, 3)
    normal: torch.Tensor     # (R, 3)
    t_final: torch.Tensor    # (R,)
    alphas: torch.Tensor     # (R, K) padded
    weights: torch.Tensor    # (R, K) padded, T_i * alpha_i
    mask: torch.Tensor       # (R, K) segment validity


def composite(alphas: torch.Tensor, colors: torch.Tensor, normals: torch.Tensor,
              mask: torch.Tensor, background_rgb: torch.Tensor) -> RayRender:
    """Front-to-back alpha compositing over padded per-ray segments."""
    alphas = alphas * mask
    one_minus = 1.0 - alphas
    trans = torch.cumprod(torch.cat([torch.ones_like(alphas[:, :1]), one_minus], dim=1), dim=1)
    t_before = trans[:, :-1]
    t_final = trans[:, -1]
    weights = t_before * alphas
    rgb = (weights[..., None] * colors).sum(dim=1) + t_final[:, None] * background_rgb
    normal = (weights[..., None] * normals).sum(dim=1)
    return RayRender(rgb=rgb, normal=normal, t_final=t_final,
                     alphas=alphas, weights=weights, mask=mask)


@dataclass
class BatchRender:
    render: RayRender
    seg_start: np.ndarray      # flat sample index of each segment
    seg_ray: np.ndarray        # ray id of each segment
    seg_eval: FieldEval        # field eval at segment-start points
    seg_weights: torch.Tensor  # (S_seg,) flat compositing weights
    d_all: torch.Tensor        # (S,) composed SDF at every surviving sample


def _empty_batch_render(model, n_rays: int, bg: torch.Tensor, d_all: torch.Tensor):
    empty = torch.zeros(n_rays, 0, dtype=model.dtype_)
    render = RayRender(rgb=bg.expand(n_rays, 3).clone(), normal=torch.zeros(n_rays, 3),
                       t_final=torch.ones(n_rays, dtype=model.dtype_),
                       alphas=empty, weights=empty, mask=empty)
    z = torch.zeros(0, dtype=model.dtype_)
    z3 = torch.zeros(0, 3, dtype=model.dtype_)
    ev = FieldEval(z, z, z, z3, z3, z3)
    return BatchRender(render, np.empty(0, np.int64), np.empty(0, np.int64), ev, z, d_all)


def render_batch(model: FieldModel, basis: VoxelGrid, batch: RaySampleBatch,
                 background_rgb: np.ndarray) -> BatchRender:
    """Evaluate the field along a sampled batch and composite per ray."""
    n_rays = batch.n_rays
    bg = model.to_tensor(background_rgb)
    if batch.n_samples < 2:
        return _empty_batch_render(model, n_rays, bg,
                                   torch.zeros(batch.n_samples, dtype=model.dtype_))

    ev_all = evaluate_field(model, basis, batch.points, with_normals=False)
    d_all = ev_all.d
    seg_start, seg_ray = segment_indices(batch.ray_index)
    if len(seg_start) == 0:
        return _empty_batch_render(model, n_rays, bg, d_all)

    ev_seg = evaluate_field(model, basis, batch.points[seg_start], with_normals=True)
    view_dirs = model.to_tensor(batch.directions[seg_ray])
    colors = model.color(model.to_tensor(batch.points[seg_start]), view_dirs,
                         ev_seg.d, ev_seg.n)

    seg_t = torch.as_tensor(seg_start, dtype=torch.int64)
    alphas_flat = alpha_from_sdf(d_all[seg_t], d_all[seg_t + 1], model.s)

    gather, mask_np, slot = pad_by_ray(seg_ray, n_rays)
    gather_t = torch.as_tensor(gather)
    mask = torch.as_tensor(mask_np, dtype=model.dtype_)
    render = composite(alphas_flat[gather_t], colors[gather_t],
                       ev_seg.n[gather_t], mask, bg)
    seg_weights = render.weights[torch.as_tensor(seg_ray, dtype=torch.int64),
                                 torch.as_tensor(slot)]
    return BatchRender(render=render, seg_start=seg_start, seg_ray=seg_ray,
                       seg_eval=ev_seg, seg_weights=seg_weights, d_all=d_all)


# ---------------------------------------------------------------------------
# Losses

def loss_rgb(rendered: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over rays of the per-ray L1 color error."""
    return (rendered - target).abs().sum(dim=-1).mean()


def loss_eikonal(normals: torch.Tensor) -> torch.Tensor:
    return ((normals.norm(dim=-1) - 1.0) ** 2).mean()


def loss_normal(rendered: torch.Tensor, target: torch.Tensor,
                valid: torch.Tensor) -> torch.Tensor:
    """Mean L1 between rendered and reference normals on valid rays."""
    if valid.sum() == 0:
        return torch.zeros((), dtype=rendered.dtype)
    diff = (rendered - target).abs().sum(dim=-1)
    return (diff * valid).sum() / valid.sum()


def loss_total(l_rgb, l_patch, l_eik, l_normal, lambdas=(1.0, 0.1, 0.1)):
    return l_rgb + lambdas[0] * l_patch + lambdas[1] * l_eik + lambdas[2] * l_normal


# ---------------------------------------------------------------------------
# Patch warping loss

def bilinear_sample(images: torch.Tensor, view_idx: torch.Tensor, uv: torch.Tensor):
    """Fetch colors at continuous pixel coords from a stack of images.

    images: (V, H, W, 3); uv follows the pixel-center convention. Returns
    (colors, inside) where inside flags coords with full 4-neighbor support.
    """
    _, h, w, _ = images.shape
    x = uv[..., 0] - 0.5
    y = uv[..., 1] - 0.5
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    x = torch.clamp(x, 0.0, w - 1.0)
    y = torch.clamp(y, 0.0, h - 1.0)
    x0 = torch.clamp(x.floor().long(), 0, w - 2)
    y0 = torch.clamp(y.floor().long(), 0, h - 2)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    v = view_idx[:, None].expand_as(x0) if view_idx.dim() == 1 else view_idx
    c00 = images[v, y0, x0]
    c10 = images[v, y0, x0 + 1]
    c01 = images[v, y0 + 1, x0]
    c11 = images[v, y0 + 1, x0 + 1]
    top = c00 * (1 - fx) + c10 * fx
    bot = c01 * (1 - fx) + c11 * fx
    return top * (1 - fy) + bot * fy, inside


class PatchWarper:
    """Plane-induced warping of reference patches into neighbor views."""

    def __init__(self, spec: SceneSpec, images: np.ndarray, half_width: int = 2,
                 dtype=torch.float32):
        self.half_width = int(half_width)
        self.dtype = dtype
        self.images = torch.as_tensor(images, dtype=dtype)           # (V, H, W, 3)
        self.neighbors = neighbor_view_map(spec)
        cams = spec.cameras
        self.fx = torch.tensor([c.fx for c in cams], dtype=dtype)
        self.fy = torch.tensor([c.fy for c in cams], dtype=dtype)
        self.cx = torch.tensor([c.cx for c in cams], dtype=dtype)
        self.cy = torch.tensor([c.cy for c in cams], dtype=dtype)
        self.rot = torch.as_tensor(np.stack([c.rotation for c in cams]), dtype=dtype)
        self.centers = torch.as_tensor(np.stack([c.center for c in cams]), dtype=dtype)
        self.trans = torch.as_tensor(np.stack([c.translation for c in cams]), dtype=dtype)
        hw = self.half_width
        grid = np.stack(np.meshgrid(np.arange(-hw, hw + 1), np.arange(-hw, hw + 1),
                                    indexing="xy"), axis=-1).reshape(-1, 2)
        self.offsets = torch.as_tensor(grid, dtype=dtype)             # (P, 2)

    @property
    def patch_size(self) -> int:
        return (2 * self.half_width + 1) ** 2

    def reference_patches(self, view_ids: np.ndarray, pixels: np.ndarray):
        """Ground-truth patches around each ray's pixel, (R, P, 3)."""
        v = torch.as_tensor(view_ids, dtype=torch.int64)
        uv = torch.as_tensor(pixels, dtype=self.dtype)[:, None, :] + self.offsets[None]
        colors, inside = bilinear_sample(self.images, v, uv)
        return colors, inside.all(dim=-1)

    def patch_rays(self, view_ids: np.ndarray, pixels: np.ndarray):
        """World-space rays through every patch pixel, (R, P, 3) + origins."""
        v = torch.as_tensor(view_ids, dtype=torch.int64)
        uv = torch.as_tensor(pixels, dtype=self.dtype)[:, None, :] + self.offsets[None]
        x = (uv[..., 0] - self.cx[v][:, None]) / self.fx[v][:, None]
        y = (uv[..., 1] - self.cy[v][:, None]) / self.fy[v][:, None]
        dirs_cam = torch.stack([x, y, torch.ones_like(x)], dim=-1)
        dirs = torch.einsum("rpk,rkj->rpj", dirs_cam, self.rot[v])
        return self.centers[v], dirs

    def warp(self, seg_ray: np.ndarray, view_ids: np.ndarray, pixels: np.ndarray,
             plane_points: torch.Tensor, plane_normals: torch.Tensor):
        """Warped neighbor-view patch colors per segment, (S, P, 3) + validity."""
        ray_view = view_ids[seg_ray]
        origins, dirs = self.patch_rays(ray_view, pixels[seg_ray])     # (S,3), (S,P,3)
        n = plane_normals / plane_normals.norm(dim=-1, keepdim=True).clamp_min(1e-9)
        denom = torch.einsum("spk,sk->sp", dirs, n)
        numer = torch.einsum("sk,sk->s", plane_points - origins, n)[:, None]
        safe = denom.abs() > 1e-6
        t = numer / torch.where(safe, denom, torch.ones_like(denom))
        pts = origins[:, None, :] + t[..., None] * dirs                # (S, P, 3)

        nb = torch.as_tensor(self.neighbors[ray_view], dtype=torch.int64)
        cam_pts = torch.einsum("spk,sjk->spj", pts, self.rot[nb]) + self.trans[nb][:, None]
        z = cam_pts[..., 2]
        z_ok = z > 1e-6
        u = self.fx[nb][:, None] * cam_pts[..., 0] / z.clamp_min(1e-6) + self.cx[nb][:, None]
        v2 = self.fy[nb][:, None] * cam_pts[..., 1] / z.clamp_min(1e-6) + self.cy[nb][:, None]
        colors, inside = bilinear_sample(self.images, nb[:, None].expand_as(u),
                                         torch.stack([u, v2], dim=-1))
        valid = (safe & z_ok & inside & (t > 0)).all(dim=-1)
        return colors, valid


def loss_patch(warper: PatchWarper, br: BatchRender, batch: RaySampleBatch,
               view_ids: np.ndarray, pixels: np.ndarray,
               weight_floor: float = 1e-4, var_floor: float = 1e-8) -> torch.Tensor:
    """Mean (1 - NCC) between reference and composited warped patches."""
    if len(br.seg_start) == 0:
        return torch.zeros(())
    n_rays = batch.n_rays
    pts = torch.as_tensor(batch.points[br.seg_start], dtype=br.seg_weights.dtype)
    warped, seg_valid = warper.warp(br.seg_ray, view_ids, pixels,
                                    pts, br.seg_eval.n)
    seg_ray_t = torch.as_tensor(br.seg_ray, dtype=torch.int64)
    w = br.seg_weights

    # a ray is usable if every segment that matters has a valid warp
    bad = (~seg_valid) & (w.detach() > weight_floor)
    ray_bad = torch.zeros(n_rays, dtype=torch.bool)
    ray_bad.index_put_((seg_ray_t[bad],), torch.ones_like(seg_ray_t[bad], dtype=torch.bool))

    contrib = (w * seg_valid)[:, None, None] * warped
    warped_patch = torch.zeros(n_rays, warper.patch_size, 3, dtype=w.dtype)
    warped_patch.index_add_(0, seg_ray_t, contrib)

    ref_patch, ref_inside = warper.reference_patches(view_ids, pixels)
    has_seg = torch.zeros(n_rays, dtype=torch.bool)
    has_seg[seg_ray_t] = True
    usable = (~ray_bad) & ref_inside & has_seg

    a = warped_patch.reshape(n_rays, -1)
    b = ref_patch.reshape(n_rays, -1)
    a_c = a - a.mean(dim=1, keepdim=True)
    b_c = b - b.mean(dim=1, keepdim=True)
    var_a = (a_c ** 2).mean(dim=1)
    var_b = (b_c ** 2).mean(dim=1)
    usable = usable & (var_a.detach() > var_floor) & (var_b.detach() > var_floor)
    if usable.sum() == 0:
        return torch.zeros((), dtype=w.dtype)
    # select first: degenerate rows must not reach sqrt, their grads are NaN
    a_c, b_c = a_c[usable], b_c[usable]
    ncc = (a_c * b_c).mean(dim=1) / torch.sqrt(var_a[usable] * var_b[usable])
    return (1.0 - ncc).mean()


# ---------------------------------------------------------------------------
# Full-image rendering (diagnostics and the zero-offset acceptance check)

def render_image(model: FieldModel, basis: VoxelGrid, spec: SceneSpec, camera: Camera,
                 samples_per_ray: int = 96, chunk: int = 2048,
                 use_offset: bool = True) -> np.ndarray:
    """Dense equidistant render of a full view; no dropout, no gradients.

    With use_offset False the geometry is the raw basis field, which at a
    zero-initialized model must reproduce the use_offset True render.
    """
    from .grids import grid_gradient, interpolate
    from .scene import generate_rays, ray_box_intersect

    h, w = camera.height, camera.width
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    pixels = np.stack([cols.ravel() + 0.5, rows.ravel() + 0.5], axis=-1)
    origins, dirs = generate_rays(camera, pixels)
    lo, hi = spec.basis_domain()
    near, far, hit = ray_box_intersect(origins, dirs, lo, hi)
    bg = model.to_tensor(spec.background_rgb)
    out = np.tile(spec.background_rgb, (len(origins), 1)).astype(np.float32)

    with torch.no_grad():
        idx_all = np.nonzero(hit)[0]
        steps = (np.arange(samples_per_ray) + 0.5) / samples_per_ray
        for start in range(0, len(idx_all), chunk):
            idx = idx_all[start:start + chunk]
            t = near[idx, None] + (far[idx] - near[idx])[:, None] * steps[None]
            pts = origins[idx, None] + t[..., None] * dirs[idx, None]
            flat = pts.reshape(-1, 3)
            if use_offset:
                ev = evaluate_field(model, basis, flat, with_normals=True)
                d = ev.d.reshape(len(idx), samples_per_ray)
                normals = ev.n.reshape(len(idx), samples_per_ray, 3)
            else:
                d = model.to_tensor(interpolate(basis, flat)).reshape(
                    len(idx), samples_per_ray)
                normals = model.to_tensor(grid_gradient(basis, flat)).reshape(
                    len(idx), samples_per_ray, 3)
            alphas = alpha_from_sdf(d[:, :-1], d[:, 1:], model.s)
            seg_pts = model.to_tensor(pts[:, :-1].reshape(-1, 3))
            seg_n = normals[:, :-1].reshape(-1, 3)
            seg_d = d[:, :-1].reshape(-1)
            vd = model.to_tensor(np.repeat(dirs[idx], samples_per_ray - 1, axis=0))
            colors = model.color(seg_pts, vd, seg_d, seg_n).reshape(
                len(idx), samples_per_ray - 1, 3)
            mask = torch.ones_like(alphas)
            render = composite(alphas, colors, seg_n.reshape(len(idx), -1, 3), mask, bg)
            out[idx] = render.rgb.cpu().numpy().astype(np.float32)
    return out.reshape(h, w, 3)
