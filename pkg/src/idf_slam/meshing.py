"""Mesh extraction from the implicit map and PLY export."""

from __future__ import annotations

import warnings

import numpy as np
from skimage.measure import marching_cubes

from .errors import ContractViolation

MAX_VOXELS_PER_AXIS = 256


def extract_mesh(scene_map, resolution: float, bounds=None, chunk: int = 65536):
    """Marching cubes over the zero level set of the map's signed distance.

    Returns (vertices, faces) with vertices in world coordinates. Raises
    ContractViolation if the requested grid would exceed 256 voxels on any
    axis; warns and returns empty arrays when no surface crossing exists.
    """
    if bounds is None:
        bounds = scene_map.scene_bounds
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    counts = np.ceil((hi - lo) / resolution).astype(int) + 1
    if np.any(counts > MAX_VOXELS_PER_AXIS + 1):
        raise ContractViolation(
            f"grid {tuple(counts)} exceeds {MAX_VOXELS_PER_AXIS} voxels per axis; "
            "coarsen resolution or shrink bounds"
        )
    axes = [np.linspace(lo[i], lo[i] + (counts[i] - 1) * resolution, counts[i]) for i in range(3)]
    sdf = scene_map.sdf_grid(axes[0], axes[1], axes[2], chunk=chunk)
    if sdf.min() >= 0.0 or sdf.max() <= 0.0:
        warnings.warn("signed distance grid has no zero crossing; returning empty mesh")
        return np.zeros((0, 3), dtype=np.float64), np.zeros((0, 3), dtype=np.int64)
    verts, faces, _, _ = marching_cubes(sdf, level=0.0, spacing=(resolution,) * 3)
    return verts + lo, faces.astype(np.int64)


def save_ply(path, vertices: np.ndarray, faces: np.ndarray) -> None:
    """Write an ASCII PLY with vertex positions and triangular faces."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(vertices)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write(f"element face {len(faces)}\n")
        f.write("property list uchar int vertex_indices\n")
        f.write("end_header\n")
        for v in vertices:
            f.write(f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for face in faces:
            f.write(f"3 {face[0]} {face[1]} {face[2]}\n")


def load_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Read back a mesh written by save_ply."""
    with open(path) as f:
        line = f.readline().strip()
        if line != "ply":
            raise ContractViolation(f"{path} is not a PLY file")
        n_verts = n_faces = 0
        while True:
            line = f.readline()
            if not line:
                raise ContractViolation("unterminated PLY header")
            parts = line.split()
            if parts[:2] == ["element", "vertex"]:
                n_verts = int(parts[2])
            elif parts[:2] == ["element", "face"]:
                n_faces = int(parts[2])
            elif parts[:1] == ["end_header"]:
                break
        verts = np.array([f.readline().split() for _ in range(n_verts)], dtype=np.float64)
        faces_raw = [f.readline().split() for _ in range(n_faces)]
    verts = verts.reshape(n_verts, 3) if n_verts else np.zeros((0, 3))
    faces = (
        np.array(faces_raw, dtype=np.int64)[:, 1:4] if n_faces else np.zeros((0, 3), dtype=np.int64)
    )
    return verts, faces


def sample_mesh_surface(vertices: np.ndarray, faces: np.ndarray, n: int, rng) -> np.ndarray:
    """Draw n points uniformly by area over the triangle mesh."""
    if len(faces) == 0:
        raise ContractViolation("cannot sample an empty mesh")
    a = vertices[faces[:, 0]]
    b = vertices[faces[:, 1]]
    c = vertices[faces[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if total <= 0:
        raise ContractViolation("mesh has zero surface area")
    tri = rng.choice(len(faces), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))[:, None]
    r2 = rng.random(n)[:, None]
    return (1 - r1) * a[tri] + r1 * (1 - r2) * b[tri] + r1 * r2 * c[tri]
