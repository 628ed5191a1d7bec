"""Isosurface extraction and mesh-to-mesh Chamfer distance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .errors import EmptySurfaceError
from .grids import VoxelGrid


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray   # (V, 3) float64, world space
    triangles: np.ndarray  # (T, 3) int64

    def __post_init__(self):
        verts = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        tris = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if tris.size and (tris.min() < 0 or tris.max() >= len(verts)):
            raise ValueError("triangle indices out of range")
        verts.setflags(write=False)
        tris.setflags(write=False)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "triangles", tris)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)


def triangle_areas(mesh: TriangleMesh) -> np.ndarray:
    v = mesh.vertices
    t = mesh.triangles
    cross = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    return 0.5 * np.linalg.norm(cross, axis=1)


def marching_cubes(values: np.ndarray, origin: np.ndarray, spacing: float,
                   iso: float = 0.0) -> TriangleMesh:
    """Classic 256-case marching cubes with linear edge interpolation.

    values: (rx, ry, rz) lattice indexed [x, y, z]; vertex (i, j, k) sits at
    origin + spacing * (i, j, k). Degenerate (near-zero-area) triangles are
    dropped. Raises EmptySurfaceError when the lattice never crosses iso.
    """
    values = np.asarray(values, dtype=np.float64)
    if not (values.min() < iso < values.max()):
        raise EmptySurfaceError(f"field does not cross iso level {iso}")
    verts, faces, _, _ = measure.marching_cubes(values, level=iso, method="lorensen")
    verts = verts.astype(np.float64)
    faces = faces.astype(np.int64)
    # degeneracy judged in lattice units, before spacing can shrink areas
    cross = np.cross(verts[faces[:, 1]] - verts[faces[:, 0]],
                     verts[faces[:, 2]] - verts[faces[:, 0]])
    keep = 0.5 * np.linalg.norm(cross, axis=1) > 1e-12
    mesh = TriangleMesh(np.asarray(origin, dtype=np.float64) + spacing * verts, faces[keep])
    if mesh.n_triangles == 0:
        raise EmptySurfaceError("extraction produced no non-degenerate triangles")
    return mesh


def marching_cubes_grid(grid: VoxelGrid, iso: float = 0.0) -> TriangleMesh:
    return marching_cubes(grid.values, grid.origin, grid.spacing, iso)


def boundary_edge_count(mesh: TriangleMesh) -> int:
    """Number of edges used by exactly one triangle (0 for a closed mesh)."""
    t = mesh.triangles
    edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return int(np.sum(counts == 1))


def sample_surface(mesh: TriangleMesh, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform surface samples."""
    areas = triangle_areas(mesh)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    tri_idx = rng.choice(len(areas), size=n_samples, p=areas / total)
    u = rng.random(n_samples)
    v = rng.random(n_samples)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    t = mesh.triangles[tri_idx]
    a = mesh.vertices[t[:, 0]]
    b = mesh.vertices[t[:, 1]]
    c = mesh.vertices[t[:, 2]]
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def chamfer(mesh_a: TriangleMesh, mesh_b: TriangleMesh,
            n_samples: int = 100_000, seed: int = 0) -> float:
    """Symmetric mean nearest-neighbor distance between surface samples."""
    if mesh_a.n_triangles == 0 or mesh_b.n_triangles == 0:
        raise ValueError("chamfer requires non-empty meshes")
    rng = np.random.default_rng(seed)
    pa = sample_surface(mesh_a, n_samples, rng)
    pb = sample_surface(mesh_b, n_samples, rng)
    d_ab, _ = cKDTree(pb).query(pa, k=1)
    d_ba, _ = cKDTree(pa).query(pb, k=1)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


# ---------------------------------------------------------------------------
# Export

def save_ply(mesh: TriangleMesh, path) -> None:
    """Binary little-endian PLY."""
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {mesh.n_vertices}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {mesh.n_triangles}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    verts = mesh.vertices.astype("<f4")
    face_dtype = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
    faces = np.empty(mesh.n_triangles, dtype=face_dtype)
    faces["n"] = 3
    faces["idx"] = mesh.triangles.astype("<i4")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(verts.tobytes())
        f.write(faces.tobytes())


def load_ply(path) -> TriangleMesh:
    """Reads meshes written by save_ply (not a general PLY parser)."""
    with open(path, "rb") as f:
        data = f.read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    n_vert = n_face = 0
    for line in header:
        if line.startswith("element vertex"):
            n_vert = int(line.split()[-1])
        elif line.startswith("element face"):
            n_face = int(line.split()[-1])
    verts = np.frombuffer(data, dtype="<f4", count=3 * n_vert, offset=end).reshape(n_vert, 3)
    face_dtype = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
    faces = np.frombuffer(data, dtype=face_dtype, count=n_face, offset=end + 12 * n_vert)
    return TriangleMesh(verts.astype(np.float64), faces["idx"].astype(np.int64))


def save_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
