"""Three-area classification of scene space and prior-guided ray sampling.

Space is split by the basis surface into:
  A2  cells whose 8 corner SDF values change sign (surface-occupied),
  A1  cells within a Chebyshev dilation radius of A2 (near-surface shell),
  A3  everything else (empty space).

Equidistant candidates along each ray are kept with probability
min(1, beta_tag * N(A2) / N(A_tag)) using a counter-based RNG keyed on
(seed, ray id, sample index), so results do not depend on evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, EmptySurfaceError
from .grids import VoxelGrid

AREA_NEAR, AREA_SURFACE, AREA_EMPTY = 1, 2, 3


@dataclass(frozen=True)
class AreaGrid:
    """Per-cell area labels on the basis grid's cell lattice."""

    resolution: tuple[int, int, int]   # cells per axis (basis vertices - 1)
    origin: np.ndarray
    spacing: float
    labels: np.ndarray                 # (cx, cy, cz) uint8 in {1, 2, 3}

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        origin.setflags(write=False)
        object.__setattr__(self, "origin", origin)

    @property
    def counts(self) -> np.ndarray:
        """Voxel counts (N(A1), N(A2), N(A3))."""
        return np.array([
            int(np.sum(self.labels == AREA_NEAR)),
            int(np.sum(self.labels == AREA_SURFACE)),
            int(np.sum(self.labels == AREA_EMPTY)),
        ])


@dataclass
class SamplingConfig:
    betas: tuple[float, float, float] = (4.0, 1.0, 0.5)
    coarse_samples_per_ray: int = 256
    dilation_voxels: int = 3

    def validate(self):
        b1, b2, b3 = self.betas
        if not (b1 > b2 > b3 > 0):
            raise ConfigError(f"betas must satisfy b1 > b2 > b3 > 0, got {self.betas}")
        if self.coarse_samples_per_ray < 1:
            raise ConfigError("coarse_samples_per_ray must be >= 1")
        if self.dilation_voxels < 0:
            raise ConfigError("dilation_voxels must be >= 0")


@dataclass
class RaySampleBatch:
    """Surviving samples of a ray batch, flat and sorted by (ray, t)."""

    origins: np.ndarray        # (R, 3)
    directions: np.ndarray     # (R, 3) unit
    near: np.ndarray           # (R,)
    far: np.ndarray            # (R,)
    ray_index: np.ndarray      # (S,) int, index into the R rays, non-decreasing
    t: np.ndarray              # (S,)
    points: np.ndarray         # (S, 3)
    tags: np.ndarray           # (S,) uint8 in {1, 2, 3}
    candidates_per_area: np.ndarray  # (3,) counts over all candidates
    survivors_per_area: np.ndarray   # (3,)

    @property
    def n_rays(self) -> int:
        return len(self.origins)

    @property
    def n_samples(self) -> int:
        return len(self.t)


def classify_areas(basis: VoxelGrid, dilation_voxels: int = 3) -> AreaGrid:
    """Label every cell of the basis lattice as A1, A2 or A3."""
    v = basis.values
    if not (v.min() < 0.0 < v.max()):
        raise EmptySurfaceError("basis field has a single sign; no surface to classify")
    neg = v < 0.0
    # a cell is surface-occupied iff its 8 corners are not all one sign
    c = neg[:-1, :-1, :-1]
    all_neg = c.copy()
    all_pos = ~neg[:-1, :-1, :-1]
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                if dx == dy == dz == 0:
                    continue
                corner = neg[dx:dx + c.shape[0], dy:dy + c.shape[1], dz:dz + c.shape[2]]
                all_neg &= corner
                all_pos &= ~corner
    surface = ~(all_neg | all_pos)
    if dilation_voxels > 0:
        size = 2 * dilation_voxels + 1
        near = ndimage.maximum_filter(surface.astype(np.uint8), size=size, mode="constant") > 0
    else:
        near = surface.copy()
    labels = np.full(surface.shape, AREA_EMPTY, dtype=np.uint8)
    labels[near] = AREA_NEAR
    labels[surface] = AREA_SURFACE
    return AreaGrid(surface.shape, basis.origin, basis.spacing, labels)


def area_tag(areas: AreaGrid, pts: np.ndarray) -> np.ndarray:
    """Area label of the cell containing each point (clamped into the lattice)."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    idx = np.floor((pts - areas.origin) / areas.spacing).astype(np.int64)
    idx = np.clip(idx, 0, np.asarray(areas.resolution) - 1)
    return areas.labels[idx[:, 0], idx[:, 1], idx[:, 2]]


def reserve_probabilities(areas: AreaGrid, cfg: SamplingConfig) -> np.ndarray:
    """Keep-probabilities (P(A1), P(A2), P(A3)); zero for absent areas."""
    counts = areas.counts
    n_ref = counts[1]
    betas = np.asarray(cfg.betas, dtype=np.float64)
    probs = np.zeros(3)
    present = counts > 0
    probs[present] = np.minimum(1.0, betas[present] * n_ref / counts[present])
    return probs


def reserve_probability(tag: int, areas: AreaGrid, cfg: SamplingConfig) -> float:
    if tag not in (AREA_NEAR, AREA_SURFACE, AREA_EMPTY):
        raise ValueError(f"tag must be 1, 2 or 3, got {tag}")
    return float(reserve_probabilities(areas, cfg)[tag - 1])


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = (np.asarray(x, dtype=np.uint64) + np.uint64(0x9E3779B97F4A7C15))
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


def counter_uniform(seed: int, ray_ids: np.ndarray, sample_ids: np.ndarray) -> np.ndarray:
    """U(0,1) keyed on (seed, ray id, sample id); order-independent."""
    hs = _splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    hr = _splitmix64(hs ^ ray_ids.astype(np.uint64))
    u = _splitmix64(hr ^ (sample_ids.astype(np.uint64) * np.uint64(0xD1B54A32D192ED03)))
    return (u >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def sample_rays(origins: np.ndarray, directions: np.ndarray,
                near: np.ndarray, far: np.ndarray,
                areas: AreaGrid, cfg: SamplingConfig, seed: int,
                ray_ids: np.ndarray | None = None,
                keep_all: bool = False) -> RaySampleBatch:
    """Equidistant candidates per ray, tagged and randomly dropped.

    Candidates sit at segment midpoints of [near, far]; candidate k of ray r
    survives iff counter_uniform(seed, ray_ids[r], k) <= P(tag). Rays whose
    near >= far contribute no candidates. keep_all skips the dropout (plain
    equidistant sampling, used by the uniform-sampling ablation).
    """
    cfg.validate()
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    near = np.asarray(near, dtype=np.float64).reshape(-1)
    far = np.asarray(far, dtype=np.float64).reshape(-1)
    n_rays = len(origins)
    if ray_ids is None:
        ray_ids = np.arange(n_rays, dtype=np.uint64)
    else:
        ray_ids = np.asarray(ray_ids, dtype=np.uint64).reshape(-1)

    k = cfg.coarse_samples_per_ray
    steps = (np.arange(k, dtype=np.float64) + 0.5) / k
    span = far - near
    valid_ray = span > 0
    t = near[:, None] + span[:, None] * steps[None, :]          # (R, K)
    pts = origins[:, None, :] + t[..., None] * directions[:, None, :]

    tags = area_tag(areas, pts.reshape(-1, 3)).reshape(n_rays, k)
    probs = reserve_probabilities(areas, cfg)
    p = probs[tags.astype(np.int64) - 1]

    if keep_all:
        keep = np.broadcast_to(valid_ray[:, None], tags.shape).copy()
    else:
        u = counter_uniform(seed, np.repeat(ray_ids, k).reshape(n_rays, k),
                            np.tile(np.arange(k, dtype=np.uint64), (n_rays, 1)))
        keep = (u <= p) & valid_ray[:, None]
    considered = np.broadcast_to(valid_ray[:, None], tags.shape)

    cand_counts = np.array([int(np.sum(considered & (tags == a))) for a in (1, 2, 3)])
    surv_counts = np.array([int(np.sum(keep & (tags == a))) for a in (1, 2, 3)])

    ray_idx_full = np.repeat(np.arange(n_rays), k).reshape(n_rays, k)
    sel = keep.reshape(-1)
    return RaySampleBatch(
        origins=origins, directions=directions, near=near, far=far,
        ray_index=ray_idx_full.reshape(-1)[sel],
        t=t.reshape(-1)[sel],
        points=pts.reshape(-1, 3)[sel],
        tags=tags.reshape(-1)[sel],
        candidates_per_area=cand_counts,
        survivors_per_area=surv_counts,
    )


def area_report_rows(batch: RaySampleBatch) -> list[dict]:
    """Per-area candidate/survivor counts for CSV export."""
    rows = []
    for i, name in enumerate(("A1", "A2", "A3")):
        c = int(batch.candidates_per_area[i])
        s = int(batch.survivors_per_area[i])
        rows.append({"area": name, "candidates": c, "survivors": s,
                     "survival_rate": (s / c) if c else 0.0})
    return rows
