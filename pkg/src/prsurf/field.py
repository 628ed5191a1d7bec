"""Learnable residual field: hash-encoded offset SDF and color networks.

The composed SDF is d(p) = d_basis(p) + d_offset(p), where d_basis comes
from trilinear interpolation of the frozen basis grid and d_offset from a
multi-resolution hash encoding followed by a shallow MLP. The offset is
exactly zero at initialization (the decoder's last layer starts at zero),
so training starts from the basis geometry.

Normals decompose the same way: n_basis is the basis-grid gradient (a
constant with respect to the parameters), n_offset is a central finite
difference of the offset network with step equal to one finest-level
hash cell, evaluated through the network so parameter gradients flow.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError
from .grids import VoxelGrid, grid_gradient, interpolate

# distinct large primes for the spatial corner hash
_HASH_PRIMES = (73856093, 19349663, 83492791)


@dataclass
class HashEncodingConfig:
    levels: int = 14
    features_per_level: int = 2
    table_size_log2: int = 19
    base_resolution: int = 16
    growth_factor: float = 1.38

    def validate(self):
        if self.levels < 1:
            raise ConfigError("hash encoding needs at least one level")
        if self.growth_factor <= 1.0:
            raise ConfigError("growth_factor must be > 1")
        if self.table_size_log2 < 1 or self.table_size_log2 > 30:
            raise ConfigError("table_size_log2 out of range")

    @property
    def table_size(self) -> int:
        return 1 << self.table_size_log2

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level

    def level_resolutions(self) -> list[int]:
        return [int(np.floor(self.base_resolution * self.growth_factor ** lvl))
                for lvl in range(self.levels)]


class HashEncoding(nn.Module):
    """Trilinearly interpolated multi-resolution hashed feature lattices."""

    def __init__(self, cfg: HashEncodingConfig, dtype=torch.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.resolutions = cfg.level_resolutions()
        tables = torch.empty(cfg.levels, cfg.table_size, cfg.features_per_level, dtype=dtype)
        tables.uniform_(-1e-4, 1e-4)
        self.tables = nn.Parameter(tables)
        primes = torch.tensor(_HASH_PRIMES, dtype=torch.int64)
        self.register_buffer("primes", primes, persistent=False)
        # corner order: bit 0 -> x, bit 1 -> y, bit 2 -> z
        offsets = torch.tensor([[(i >> 0) & 1, (i >> 1) & 1, (i >> 2) & 1] for i in range(8)],
                               dtype=torch.int64)
        self.register_buffer("corner_offsets", offsets, persistent=False)

    def corner_indices(self, level: int, corners: torch.Tensor) -> torch.Tensor:
        """Spatial hash of integer corner coordinates into the level table."""
        mixed = (corners[..., 0] * self.primes[0]
                 ^ corners[..., 1] * self.primes[1]
                 ^ corners[..., 2] * self.primes[2])
        return mixed & (self.cfg.table_size - 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (N, 3) in [0, 1]. Returns (N, levels * features)."""
        outputs = []
        offsets = self.corner_offsets
        for level, res in enumerate(self.resolutions):
            pos = x * res
            c0 = torch.clamp(pos.floor().long(), 0, res - 1)
            frac = pos - c0
            corners = c0[:, None, :] + offsets[None, :, :]
            idx = self.corner_indices(level, corners)
            emb = self.tables[level][idx]                      # (N, 8, F)
            w = torch.ones(x.shape[0], 8, dtype=x.dtype, device=x.device)
            for axis in range(3):
                bit = offsets[:, axis] == 1
                wa = torch.where(bit[None, :], frac[:, axis, None], 1.0 - frac[:, axis, None])
                w = w * wa
            outputs.append((emb * w[..., None]).sum(dim=1))
        return torch.cat(outputs, dim=-1)

    @property
    def finest_resolution(self) -> int:
        return self.resolutions[-1]


def _make_mlp(in_dim: int, hidden: int, layers: int, out_dim: int,
              dtype=torch.float32) -> nn.Sequential:
    mods: list[nn.Module] = []
    dim = in_dim
    for _ in range(layers):
        mods.append(nn.Linear(dim, hidden, dtype=dtype))
        mods.append(nn.Softplus(beta=100.0))
        dim = hidden
    mods.append(nn.Linear(dim, out_dim, dtype=dtype))
    return nn.Sequential(*mods)


@dataclass
class FieldConfig:
    geo_encoding: HashEncodingConfig
    color_encoding: HashEncodingConfig
    hidden_width: int = 64
    hidden_layers: int = 2

    @staticmethod
    def default() -> "FieldConfig":
        return FieldConfig(geo_encoding=HashEncodingConfig(),
                           color_encoding=HashEncodingConfig())


@dataclass
class FieldEval:
    """Per-point decomposed field values (torch tensors)."""

    d_basis: torch.Tensor    # (N,)
    d_offset: torch.Tensor   # (N,)
    d: torch.Tensor          # (N,)
    n_basis: torch.Tensor    # (N, 3)
    n_offset: torch.Tensor   # (N, 3)
    n: torch.Tensor          # (N, 3)


class FieldModel(nn.Module):
    """Offset-SDF network, color network and the opacity sharpness scalar."""

    def __init__(self, cfg: FieldConfig, bounds_min, bounds_max,
                 s_init: float = 30.0, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype_ = dtype
        bmin = torch.as_tensor(np.asarray(bounds_min, dtype=np.float64), dtype=dtype)
        bmax = torch.as_tensor(np.asarray(bounds_max, dtype=np.float64), dtype=dtype)
        self.register_buffer("bounds_min", bmin)
        self.register_buffer("bounds_extent", bmax - bmin)

        self.geo_encoding = HashEncoding(cfg.geo_encoding, dtype=dtype)
        self.color_encoding = HashEncoding(cfg.color_encoding, dtype=dtype)
        self.sdf_mlp = _make_mlp(3 + cfg.geo_encoding.output_dim,
                                 cfg.hidden_width, cfg.hidden_layers, 1, dtype=dtype)
        color_in = 3 + cfg.color_encoding.output_dim + 3 + 1 + 3  # p, enc, view, d, n
        self.color_mlp = _make_mlp(color_in, cfg.hidden_width, cfg.hidden_layers, 3, dtype=dtype)
        # zero offset at start: last SDF layer starts at zero
        last = self.sdf_mlp[-1]
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)
        self.log_s = nn.Parameter(torch.tensor(float(np.log(s_init)), dtype=dtype))

    @property
    def s(self) -> torch.Tensor:
        return torch.exp(self.log_s)

    def normalize(self, pts: torch.Tensor) -> torch.Tensor:
        u = (pts - self.bounds_min) / self.bounds_extent
        return torch.clamp(u, 0.0, 1.0)

    def offset(self, pts_world: torch.Tensor) -> torch.Tensor:
        """d_offset at world points, shape (N,)."""
        u = self.normalize(pts_world)
        feats = self.geo_encoding(u)
        return self.sdf_mlp(torch.cat([u, feats], dim=-1)).squeeze(-1)

    def normal_probe_steps(self) -> torch.Tensor:
        """World-space central-difference step per axis: one finest hash cell."""
        return self.bounds_extent / self.geo_encoding.finest_resolution

    def color(self, pts_world: torch.Tensor, view_dirs: torch.Tensor,
              d: torch.Tensor, n: torch.Tensor) -> torch.Tensor:
        u = self.normalize(pts_world)
        feats = self.color_encoding(u)
        inp = torch.cat([u, feats, view_dirs, d[:, None], n], dim=-1)
        return torch.sigmoid(self.color_mlp(inp))

    def to_tensor(self, arr: np.ndarray) -> torch.Tensor:
        return torch.as_tensor(np.asarray(arr), dtype=self.dtype_)


def evaluate_field(model: FieldModel, basis: VoxelGrid, pts: np.ndarray,
                   with_normals: bool = True) -> FieldEval:
    """Composed SDF (and optionally normals) at world points.

    Basis value and gradient are constants outside the autograd graph;
    offset value and its finite-difference gradient carry gradients.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    n_pts = len(pts)
    d_basis = model.to_tensor(interpolate(basis, pts))
    pts_t = model.to_tensor(pts)

    if not with_normals:
        d_offset = model.offset(pts_t)
        zeros = torch.zeros(n_pts, 3, dtype=model.dtype_)
        return FieldEval(d_basis=d_basis, d_offset=d_offset, d=d_basis + d_offset,
                         n_basis=zeros, n_offset=zeros, n=zeros)

    n_basis = model.to_tensor(grid_gradient(basis, pts))
    steps = model.normal_probe_steps()
    # one batched pass: center then +x,-x,+y,-y,+z,-z probes
    probe = pts_t[None, :, :].repeat(7, 1, 1)
    for axis in range(3):
        probe[1 + 2 * axis, :, axis] += steps[axis]
        probe[2 + 2 * axis, :, axis] -= steps[axis]
    out = model.offset(probe.reshape(-1, 3)).reshape(7, n_pts)
    d_offset = out[0]
    n_offset = torch.stack(
        [(out[1 + 2 * a] - out[2 + 2 * a]) / (2.0 * steps[a]) for a in range(3)], dim=-1)
    return FieldEval(d_basis=d_basis, d_offset=d_offset, d=d_basis + d_offset,
                     n_basis=n_basis, n_offset=n_offset, n=n_basis + n_offset)


def sample_field_lattice(model: FieldModel, basis: VoxelGrid,
                         domain_min, domain_max, resolution: int,
                         chunk: int = 262144) -> VoxelGrid:
    """Evaluate d = d_basis + d_offset on a lattice (no gradients)."""
    domain_min = np.asarray(domain_min, dtype=np.float64)
    domain_max = np.asarray(domain_max, dtype=np.float64)
    spacing = float(np.max(domain_max - domain_min) / (resolution - 1))
    ax = [domain_min[k] + spacing * np.arange(resolution) for k in range(3)]
    pts = np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = np.empty(len(pts), dtype=np.float32)
    with torch.no_grad():
        for start in range(0, len(pts), chunk):
            part = pts[start:start + chunk]
            d_basis = interpolate(basis, part)
            d_off = model.offset(model.to_tensor(part)).cpu().numpy()
            vals[start:start + chunk] = (d_basis + d_off).astype(np.float32)
    return VoxelGrid((resolution,) * 3, domain_min, spacing, vals.reshape((resolution,) * 3))


# ---------------------------------------------------------------------------
# Checkpoints: magic 'PRCK', u32 version, u32 header length, JSON header,
# then the parameter arrays as little-endian f32 in manifest order.

_CKPT_MAGIC = b"PRCK"
_CKPT_VERSION = 1


def save_checkpoint(path, model: FieldModel, extra: dict | None = None) -> None:
    state = model.state_dict()
    names = sorted(k for k in state if state[k].is_floating_point())
    header = {
        "field_config": {
            "geo_encoding": asdict(model.cfg.geo_encoding),
            "color_encoding": asdict(model.cfg.color_encoding),
            "hidden_width": model.cfg.hidden_width,
            "hidden_layers": model.cfg.hidden_layers,
        },
        "bounds_min": model.bounds_min.tolist(),
        "bounds_extent": model.bounds_extent.tolist(),
        "arrays": [{"name": k, "shape": list(state[k].shape)} for k in names],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(np.uint32(_CKPT_VERSION).tobytes())
        f.write(np.uint32(len(blob)).tobytes())
        f.write(blob)
        for k in names:
            f.write(state[k].detach().cpu().numpy().astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[FieldModel, dict]:
    with open(path, "rb") as f:
        if f.read(4) != _CKPT_MAGIC:
            raise ValueError("not a PRCK checkpoint")
        version = int(np.frombuffer(f.read(4), dtype="<u4")[0])
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        hlen = int(np.frombuffer(f.read(4), dtype="<u4")[0])
        header = json.loads(f.read(hlen).decode("utf-8"))
        fc = header["field_config"]
        cfg = FieldConfig(geo_encoding=HashEncodingConfig(**fc["geo_encoding"]),
                          color_encoding=HashEncodingConfig(**fc["color_encoding"]),
                          hidden_width=fc["hidden_width"], hidden_layers=fc["hidden_layers"])
        bmin = np.asarray(header["bounds_min"], dtype=np.float64)
        bmax = bmin + np.asarray(header["bounds_extent"], dtype=np.float64)
        model = FieldModel(cfg, bmin, bmax)
        state = model.state_dict()
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape)
            state[entry["name"]] = torch.as_tensor(arr.copy(), dtype=torch.float32)
        model.load_state_dict(state)
    return model, header["extra"]
