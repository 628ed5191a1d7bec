"""Fuse local SDF voxel fields into a global basis field.

Each local prior is a voxel grid in its own normalized frame plus the
world -> local transform. Fusion queries every prior at every vertex of a
global lattice, keeps the value of smallest magnitude (or the mean, for
the ablation mode), then Gaussian-smooths the result.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .grids import LocalFieldTransform, VoxelGrid, gaussian_smooth, interpolate_with_oob, to_local

log = logging.getLogger(__name__)

FUSION_MODES = ("min_abs", "average")


@dataclass(frozen=True)
class LocalPrior:
    """A local SDF field and the transform into its normalized frame."""

    grid: VoxelGrid
    transform: LocalFieldTransform
    ident: int = 0


@dataclass
class FusionConfig:
    resolution: int = 128          # global lattice vertices per axis (360 at paper scale)
    sigma_voxels: float = 2.0
    mode: str = "min_abs"

    def validate(self):
        if self.resolution < 16:
            raise ConfigError(f"fusion resolution must be >= 16, got {self.resolution}")
        if self.mode not in FUSION_MODES:
            raise ConfigError(f"fusion mode must be one of {FUSION_MODES}, got {self.mode!r}")
        if self.sigma_voxels < 0:
            raise ConfigError("sigma_voxels must be >= 0")


def query_local(prior: LocalPrior, pts: np.ndarray) -> np.ndarray:
    """SDF of world points against one local field (clamped outside)."""
    vals, _ = query_local_with_oob(prior, pts)
    return vals


def query_local_with_oob(prior: LocalPrior, pts: np.ndarray):
    """Query plus the out-of-box distance in the prior's local frame."""
    local = to_local(np.asarray(pts, dtype=np.float64).reshape(-1, 3), prior.transform)
    return interpolate_with_oob(prior.grid, local)


def coverage_fraction(prior: LocalPrior, pts: np.ndarray) -> float:
    """Fraction of points that land inside the prior's grid box."""
    _, oob = query_local_with_oob(prior, pts)
    return float(np.mean(oob == 0.0))


def fuse_values(priors: list[LocalPrior], pts: np.ndarray, mode: str = "min_abs") -> np.ndarray:
    """Pre-smoothing fused SDF values at arbitrary world points.

    min_abs keeps, per point, the candidate of smallest magnitude (lowest
    prior ident wins ties); average takes the arithmetic mean.
    """
    if not priors:
        raise ConfigError("fusion requires at least one local prior")
    ordered = sorted(priors, key=lambda pr: pr.ident)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if mode == "average":
        acc = np.zeros(len(pts), dtype=np.float64)
        for pr in ordered:
            acc += query_local(pr, pts)
        return acc / len(ordered)
    if mode != "min_abs":
        raise ConfigError(f"unknown fusion mode {mode!r}")
    best = query_local(ordered[0], pts)
    for pr in ordered[1:]:
        cand = query_local(pr, pts)
        closer = np.abs(cand) < np.abs(best)
        best = np.where(closer, cand, best)
    return best


@dataclass
class FusionReport:
    basis: VoxelGrid
    pre_smooth: VoxelGrid
    all_oob_vertices: int
    coverage: list[float]


def fuse(priors: list[LocalPrior], cfg: FusionConfig,
         domain_min: np.ndarray, domain_max: np.ndarray) -> VoxelGrid:
    """Build the smoothed global basis field over the given world box."""
    return fuse_with_report(priors, cfg, domain_min, domain_max).basis


def fuse_with_report(priors: list[LocalPrior], cfg: FusionConfig,
                     domain_min: np.ndarray, domain_max: np.ndarray) -> FusionReport:
    """fuse() plus the pre-smoothing lattice and coverage diagnostics."""
    cfg.validate()
    if not priors:
        raise ConfigError("fusion requires at least one local prior")
    res = int(cfg.resolution)
    domain_min = np.asarray(domain_min, dtype=np.float64).reshape(3)
    domain_max = np.asarray(domain_max, dtype=np.float64).reshape(3)
    spacing = float(np.max(domain_max - domain_min) / (res - 1))
    ax = [domain_min[k] + spacing * np.arange(res) for k in range(3)]
    pts = np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1).reshape(-1, 3)

    fused = fuse_values(priors, pts, cfg.mode)
    oob_all = np.ones(len(pts), dtype=bool)
    coverage = []
    for pr in sorted(priors, key=lambda p: p.ident):
        _, oob = query_local_with_oob(pr, pts)
        oob_all &= oob > 0
        frac = float(np.mean(oob == 0.0))
        coverage.append(frac)
        if frac < 0.5:
            log.warning("prior %d covers only %.1f%% of the fusion lattice", pr.ident, 100 * frac)

    raw = VoxelGrid((res, res, res), domain_min, spacing, fused.reshape(res, res, res))
    basis = gaussian_smooth(raw, cfg.sigma_voxels)
    return FusionReport(basis=basis, pre_smooth=raw,
                        all_oob_vertices=int(oob_all.sum()), coverage=coverage)
