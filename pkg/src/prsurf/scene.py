"""Synthetic scenes: analytic SDFs, cameras, ground-truth renders, priors.

The scene is the oracle for everything the pipeline would normally get
from real data: images and normal maps (sphere-traced from the analytic
SDF), and the local SDF fields a generalization model would predict
(sampled from the analytic SDF, then cropped to a view halfspace, biased
and noised to mimic model error).

Camera convention: world -> camera is x_cam = R @ x_world + t, camera
looks down +z, x right, y down. Pixel (u, v) are continuous image
coordinates; the center of pixel (col, row) is (col + 0.5, row + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fusion import LocalPrior
from .grids import LocalFieldTransform, VoxelGrid
from .meshing import TriangleMesh, marching_cubes


# ---------------------------------------------------------------------------
# Analytic shapes

class Shape:
    def sdf(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, pts: np.ndarray, h: float = 1e-5) -> np.ndarray:
        """Central finite differences on the analytic SDF."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        g = np.empty_like(pts)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            g[:, k] = (self.sdf(pts + e) - self.sdf(pts - e)) / (2 * h)
        return g

    def normal(self, pts: np.ndarray) -> np.ndarray:
        g = self.gradient(pts)
        n = np.linalg.norm(g, axis=-1, keepdims=True)
        return g / np.maximum(n, 1e-12)


class SphereShape(Shape):
    def __init__(self, center=(0.0, 0.0, 0.0), radius=0.5):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)

    def sdf(self, pts):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        return np.linalg.norm(pts - self.center, axis=-1) - self.radius

    def gradient(self, pts, h=1e-5):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        d = pts - self.center
        r = np.linalg.norm(d, axis=-1, keepdims=True)
        return d / np.maximum(r, 1e-12)


class TorusShape(Shape):
    """Torus around the z axis."""

    def __init__(self, center=(0.0, 0.0, 0.0), major_radius=0.4, minor_radius=0.15):
        self.center = np.asarray(center, dtype=np.float64)
        self.major_radius = float(major_radius)
        self.minor_radius = float(minor_radius)

    def sdf(self, pts):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3) - self.center
        rxy = np.linalg.norm(pts[:, :2], axis=-1)
        q = np.stack([rxy - self.major_radius, pts[:, 2]], axis=-1)
        return np.linalg.norm(q, axis=-1) - self.minor_radius


class BoxShape(Shape):
    def __init__(self, center=(0.0, 0.0, 0.0), half_extents=(0.3, 0.3, 0.3)):
        self.center = np.asarray(center, dtype=np.float64)
        self.half_extents = np.asarray(half_extents, dtype=np.float64)

    def sdf(self, pts):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        q = np.abs(pts - self.center) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside


class PlaneShape(Shape):
    """Halfspace below a plane; used by render and warp tests."""

    def __init__(self, point=(0.0, 0.0, 0.0), normal=(0.0, 0.0, 1.0)):
        self.point = np.asarray(point, dtype=np.float64)
        n = np.asarray(normal, dtype=np.float64)
        self.plane_normal = n / np.linalg.norm(n)

    def sdf(self, pts):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        return (pts - self.point) @ self.plane_normal

    def gradient(self, pts, h=1e-5):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        return np.broadcast_to(self.plane_normal, pts.shape).copy()


class UnionShape(Shape):
    """min of parts: a valid lower-bound SDF."""

    def __init__(self, parts: list[Shape]):
        self.parts = list(parts)

    def sdf(self, pts):
        vals = np.stack([p.sdf(pts) for p in self.parts], axis=0)
        return vals.min(axis=0)


def make_shape(kind: str) -> Shape:
    if kind == "sphere":
        return SphereShape(radius=0.5)
    if kind == "torus":
        return TorusShape(major_radius=0.4, minor_radius=0.16)
    if kind == "sphere_union":
        return UnionShape([BoxShape(center=(-0.12, 0.0, -0.18), half_extents=(0.34, 0.34, 0.2)),
                           SphereShape(center=(0.12, 0.0, 0.14), radius=0.36)])
    if kind == "thin_plate":
        return UnionShape([BoxShape(center=(0.0, 0.0, -0.1), half_extents=(0.44, 0.44, 0.05)),
                           SphereShape(center=(0.0, 0.0, 0.2), radius=0.26)])
    if kind == "plane":
        return PlaneShape(point=(0.0, 0.0, 0.0), normal=(0.0, 0.0, 1.0))
    raise ValueError(f"unknown shape kind {kind!r}")


class TrigAlbedo:
    """Smooth procedural RGB texture over space, range well inside [0, 1]."""

    def __init__(self, frequency: float = 9.0):
        self.frequency = float(frequency)
        self.phases = np.array([0.0, 2.1, 4.2])
        self.dirs = np.array([[1.0, 0.7, 0.3], [0.4, 1.0, 0.8], [0.7, 0.2, 1.0]])

    def rgb(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        out = np.empty((len(pts), 3))
        for c in range(3):
            out[:, c] = 0.5 + 0.4 * np.sin(self.frequency * pts @ self.dirs[c] + self.phases[c])
        return out


# ---------------------------------------------------------------------------
# Cameras

@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray    # (3, 3) world -> camera
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-8):
            raise ValueError("camera rotation must be orthonormal")
        if not self.fx > 0 or not self.fy > 0:
            raise ValueError("focal lengths must be positive")
        rot.setflags(write=False)
        tr = np.asarray(self.translation, dtype=np.float64).reshape(3)
        tr.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[2]

    def project(self, pts: np.ndarray):
        """World points -> (uv, camera depth z)."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        cam = pts @ self.rotation.T + self.translation
        z = cam[:, 2]
        u = self.fx * cam[:, 0] / z + self.cx
        v = self.fy * cam[:, 1] / z + self.cy
        return np.stack([u, v], axis=-1), z


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """World->camera rotation and translation for a camera at eye."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(fwd, up) / np.linalg.norm(up)) > 0.98:
        up = np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return rot, -rot @ eye


def generate_rays(camera: Camera, pixels: np.ndarray):
    """Back-project continuous pixel coordinates to world rays."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    x = (pixels[:, 0] - camera.cx) / camera.fx
    y = (pixels[:, 1] - camera.cy) / camera.fy
    dirs_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    dirs = dirs_cam @ camera.rotation  # R^T @ d for each row
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.center, dirs.shape).copy()
    return origins, dirs


def ray_box_intersect(origins, dirs, box_min, box_max, eps: float = 1e-9):
    """Slab test. Returns (near, far, hit); near clamped to >= 0."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    inv = 1.0 / np.where(np.abs(dirs) < eps, np.where(dirs < 0, -eps, eps), dirs)
    t0 = (np.asarray(box_min) - origins) * inv
    t1 = (np.asarray(box_max) - origins) * inv
    near = np.minimum(t0, t1).max(axis=-1)
    far = np.maximum(t0, t1).min(axis=-1)
    near = np.maximum(near, 0.0)
    hit = far > near
    return near, far, hit


def fibonacci_directions(n: int) -> np.ndarray:
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * (np.pi * (3.0 - np.sqrt(5.0)))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


# ---------------------------------------------------------------------------
# Scene

@dataclass
class SceneSpec:
    shape: Shape
    albedo: TrigAlbedo
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    cameras: list[Camera]
    light_dir: np.ndarray
    background: str = "white"
    prior_group_dirs: list[np.ndarray] = field(default_factory=list)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.bounds_min + self.bounds_max)

    @property
    def background_rgb(self) -> np.ndarray:
        return np.ones(3) if self.background == "white" else np.zeros(3)

    def basis_domain(self, pad_fraction: float = 0.05):
        """Scene box padded for the fusion/extraction lattice."""
        pad = pad_fraction * (self.bounds_max - self.bounds_min)
        return self.bounds_min - pad, self.bounds_max + pad


def make_scene(kind: str = "sphere", n_views: int = 16, image_size: int = 64,
               camera_distance: float = 1.8, background: str = "white") -> SceneSpec:
    shape = make_shape(kind)
    bounds = 0.65
    target = np.zeros(3)
    f = 1.25 * image_size * camera_distance / (2 * bounds * np.sqrt(3.0))
    cams = []
    for d in fibonacci_directions(n_views):
        eye = target + camera_distance * d
        rot, tr = look_at(eye, target)
        cams.append(Camera(fx=f, fy=f, cx=image_size / 2, cy=image_size / 2,
                           width=image_size, height=image_size, rotation=rot, translation=tr))
    return SceneSpec(
        shape=shape,
        albedo=TrigAlbedo(),
        bounds_min=np.full(3, -bounds),
        bounds_max=np.full(3, bounds),
        cameras=cams,
        light_dir=np.array([0.45, 0.3, 0.84]) / np.linalg.norm([0.45, 0.3, 0.84]),
        background=background,
        prior_group_dirs=[np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, -1.0])],
    )


def shade(spec: SceneSpec, pts: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Lambertian with an ambient floor; view-independent by construction."""
    lam = np.maximum(0.0, normals @ spec.light_dir)
    return spec.albedo.rgb(pts) * (0.35 + 0.65 * lam)[:, None]


def render_ground_truth(spec: SceneSpec, camera: Camera,
                        max_steps: int = 160, hit_eps: float = 1e-4):
    """Sphere-trace the analytic SDF.

    Returns (rgb, normal, depth, mask): rgb and normal are (H, W, 3)
    float32, normal in world frame and zero on background, depth is the
    camera-space z (inf on background), mask flags surface hits.
    """
    h, w = camera.height, camera.width
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    pixels = np.stack([cols.ravel() + 0.5, rows.ravel() + 0.5], axis=-1)
    origins, dirs = generate_rays(camera, pixels)
    near, far, hit_box = ray_box_intersect(origins, dirs, spec.bounds_min, spec.bounds_max)

    n_rays = len(origins)
    t = near.copy()
    active = hit_box.copy()
    hit = np.zeros(n_rays, dtype=bool)
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        p = origins[idx] + t[idx, None] * dirs[idx]
        s = spec.shape.sdf(p)
        converged = s < hit_eps
        hit[idx[converged]] = True
        active[idx[converged]] = False
        t[idx] += np.maximum(s, 0.25 * hit_eps)
        overshot = t[idx] > far[idx]
        active[idx[overshot]] = False

    rgb = np.tile(spec.background_rgb, (n_rays, 1))
    normal = np.zeros((n_rays, 3))
    depth = np.full(n_rays, np.inf)
    if hit.any():
        p_hit = origins[hit] + t[hit, None] * dirs[hit]
        n_hit = spec.shape.normal(p_hit)
        rgb[hit] = np.clip(shade(spec, p_hit, n_hit), 0.0, 1.0)
        normal[hit] = n_hit
        cam_pts = p_hit @ camera.rotation.T + camera.translation
        depth[hit] = cam_pts[:, 2]
    return (rgb.reshape(h, w, 3).astype(np.float32),
            normal.reshape(h, w, 3).astype(np.float32),
            depth.reshape(h, w).astype(np.float32),
            hit.reshape(h, w))


def neighbor_view_map(spec: SceneSpec) -> np.ndarray:
    """For each camera, the other camera with the closest viewpoint."""
    centers = np.stack([c.center for c in spec.cameras])
    rel = centers - spec.center
    rel /= np.linalg.norm(rel, axis=-1, keepdims=True)
    cos = rel @ rel.T
    np.fill_diagonal(cos, -np.inf)
    return np.argmax(cos, axis=1)


def ground_truth_mesh(spec: SceneSpec, resolution: int = 192) -> TriangleMesh:
    """Marching cubes of the analytic SDF on a fine lattice."""
    lo, hi = spec.bounds_min, spec.bounds_max
    spacing = float(np.max(hi - lo) / (resolution - 1))
    ax = [lo[k] + spacing * np.arange(resolution) for k in range(3)]
    pts = np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = spec.shape.sdf(pts).reshape(resolution, resolution, resolution)
    return marching_cubes(vals, lo, spacing)


# ---------------------------------------------------------------------------
# Synthetic local priors

@dataclass
class PriorCorruption:
    """Error model for the synthetic generalization-model output.

    The bias is a smooth, mostly one-signed inflation shared by all groups
    (the same pretrained model makes the same systematic error); noise is
    per-vertex and per-group. bias_freq 0 degrades to a constant offset.
    """

    noise_std: float = 0.0       # per-vertex iid noise (outliers)
    bias_amp: float = 0.0        # peak smooth low-frequency surface error
    bias_freq: float = 5.0       # spatial frequency of the bias; 0 = constant bias
    bias_seed: int = 0           # shared across groups
    crop: bool = True            # restrict to the view halfspace
    crop_overlap: float = 0.08   # how far past the scene center the view "sees"

    def validate(self):
        if self.noise_std < 0 or self.bias_amp < 0:
            raise ValueError("corruption magnitudes must be >= 0")


def _group_rotation(view_dir: np.ndarray) -> np.ndarray:
    """Orthonormal frame whose third row is the view direction."""
    fwd = view_dir / np.linalg.norm(view_dir)
    up = np.array([0.0, 0.0, 1.0])
    if abs(fwd @ up) > 0.98:
        up = np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd])


def make_local_prior(spec: SceneSpec, group_id: int, corruption: PriorCorruption,
                     resolution: int = 96, rng: np.random.Generator | None = None) -> LocalPrior:
    """Sample the scene SDF into one viewpoint group's local field.

    The local grid lives in a normalized frame (a rotated, scaled copy of
    the padded scene box mapped into [0, 1]^3). With cropping on, space
    behind the group's visibility plane follows space-carving semantics:
    columns that are free at the frontier keep opening (frontier value
    plus depth), columns that are occupied there are treated as occluded
    and fill up (frontier value minus depth). Either branch grows in
    magnitude with depth, so in min-|d| fusion a group that actually sees
    a region always beats a group that does not; a single cropped group,
    however, meshes into an open sheet because its occupied columns reach
    the lattice boundary.
    """
    corruption.validate()
    if rng is None:
        rng = np.random.default_rng(0)
    view_dir = spec.prior_group_dirs[group_id]
    view_dir = view_dir / np.linalg.norm(view_dir)
    rot = _group_rotation(view_dir)

    lo, hi = spec.basis_domain()
    center = 0.5 * (lo + hi)
    radius = 0.5 * float(np.linalg.norm(hi - lo))  # rotated box fits in this ball
    scale = 1.0 / (2.0 * radius * 1.02)
    translation = 0.5 / scale * np.ones(3) - rot @ center
    transform = LocalFieldTransform(rot, translation, scale)

    res = int(resolution)
    spacing = 1.0 / (res - 1)
    ax = spacing * np.arange(res)
    local = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
    world = (local / scale - translation) @ rot  # rot^T applied row-wise

    query = world
    behind = np.zeros(len(world))
    if corruption.crop:
        # visibility plane: the group sees the halfspace facing its viewpoint
        plane_point = spec.center - corruption.crop_overlap * view_dir
        signed = (world - plane_point) @ view_dir
        behind = np.maximum(-signed, 0.0)
        query = world + behind[:, None] * view_dir

    vals = spec.shape.sdf(query)
    vals = vals + np.where(vals >= 0.0, behind, -behind)
    if corruption.bias_amp > 0:
        if corruption.bias_freq == 0:
            vals = vals + corruption.bias_amp
        else:
            bias_rng = np.random.default_rng(corruption.bias_seed)
            phases = bias_rng.uniform(0, 2 * np.pi, size=3)
            dirs = bias_rng.normal(size=(3, 3))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            waves = np.cos(corruption.bias_freq * query @ dirs.T + phases)
            vals = vals + corruption.bias_amp * (0.45 + 0.55 * waves.mean(axis=1))
    if corruption.noise_std > 0:
        vals = vals + rng.normal(0.0, corruption.noise_std, size=vals.shape)

    grid = VoxelGrid((res, res, res), np.zeros(3), spacing,
                     vals.reshape(res, res, res).astype(np.float32))
    return LocalPrior(grid=grid, transform=transform, ident=group_id)
