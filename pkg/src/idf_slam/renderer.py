"""Ray casting, truncation-band sampling, and SDF-weighted rendering.

Rendering weights follow the SDF-bell scheme: w = σ(s/tr)·σ(−s/tr) peaks
where the predicted SDF crosses zero and decays on both sides, so the
normalized weights concentrate color and depth estimates at the surface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation
from .geometry import Intrinsics, Pose

# Region labels along a ray, relative to the measured depth.
FREE_SPACE = 0
TRUNCATION = 1
BEHIND = 2


@dataclass
class Ray:
    """One camera ray with its pixel measurements attached.

    ``measured_depth`` is the distance along the ray (the sensor's z-depth
    converted through the pixel's ray scale); 0 marks invalid.
    """

    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple[int, int]
    measured_rgb: np.ndarray
    measured_depth: float


@dataclass
class RaySampleSet:
    """Sample positions along one ray plus their supervision labels.

    ``sdf_targets`` holds clamp(measured_depth − d, −tr, +tr); it is only
    meaningful where the label is FREE_SPACE or TRUNCATION.
    """

    depths: np.ndarray
    sdf_targets: np.ndarray
    region_labels: np.ndarray


def pixel_directions(rows, cols, intr: Intrinsics) -> np.ndarray:
    """Unit camera-frame direction through each pixel center, shape (N, 3)."""
    x = (np.asarray(cols, dtype=np.float64) - intr.cx) / intr.fx
    y = (np.asarray(rows, dtype=np.float64) - intr.cy) / intr.fy
    d = np.stack([x, y, np.ones_like(x)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def pixel_ray_scale(rows, cols, intr: Intrinsics) -> np.ndarray:
    """Factor converting a pixel's z-depth to distance along its ray."""
    x = (np.asarray(cols, dtype=np.float64) - intr.cx) / intr.fx
    y = (np.asarray(rows, dtype=np.float64) - intr.cy) / intr.fy
    return np.sqrt(x * x + y * y + 1.0)


def generate_rays(frame, pose: Pose, pixels) -> list[Ray]:
    """Back-project pixel centers of ``frame`` into world-frame rays."""
    pixels = list(pixels)
    intr = frame.intrinsics
    rows = np.array([p[0] for p in pixels])
    cols = np.array([p[1] for p in pixels])
    if rows.size and (rows.min() < 0 or rows.max() >= intr.height or cols.min() < 0 or cols.max() >= intr.width):
        raise ContractViolation("pixel outside image bounds")
    dirs_cam = pixel_directions(rows, cols, intr)
    scale = pixel_ray_scale(rows, cols, intr)
    dirs_world = dirs_cam @ pose.rotation.T
    rays = []
    for i, (r, c) in enumerate(pixels):
        rays.append(Ray(
            origin=pose.translation.copy(),
            direction=dirs_world[i],
            pixel=(int(r), int(c)),
            measured_rgb=np.asarray(frame.rgb[int(r), int(c)], dtype=np.float64),
            measured_depth=float(frame.depth[int(r), int(c)] * scale[i]),
        ))
    return rays


def _repair_ties(depths: np.ndarray) -> np.ndarray:
    """Force strict ascent along axis 1 (ties from an rng are measure-zero)."""
    for _ in range(3):
        bad = np.diff(depths, axis=1) <= 0
        if not bad.any():
            break
        depths[:, 1:] = np.maximum(depths[:, 1:], depths[:, :-1] + 1e-9)
    return depths


def sample_batch(
    measured_depth: np.ndarray,
    s_p: int,
    tr: float,
    near: float,
    far: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized per-ray sampling; returns (depths, sdf_targets, labels), each (B, S_p).

    Rays with valid measured depth get S_p/3 samples uniform in the
    truncation band [d−tr, d+tr] and the rest stratified over [near, far];
    invalid rays get a fully stratified set labeled BEHIND (no supervision).
    """
    if near >= far:
        raise ContractViolation(f"need near < far, got {near} >= {far}")
    if s_p < 2:
        raise ContractViolation("need at least 2 samples per ray")
    measured_depth = np.asarray(measured_depth, dtype=np.float64)
    b = measured_depth.shape[0]
    n_surf = s_p // 3
    n_strat = s_p - n_surf
    if n_strat <= 0:
        raise ContractViolation("no stratified budget left")

    edges = np.linspace(near, far, n_strat + 1)
    strat = edges[:-1] + rng.random((b, n_strat)) * np.diff(edges)
    surface = measured_depth[:, None] + (rng.random((b, n_surf)) * 2.0 - 1.0) * tr
    edges_full = np.linspace(near, far, s_p + 1)
    strat_full = edges_full[:-1] + rng.random((b, s_p)) * np.diff(edges_full)

    valid = measured_depth > 0
    depths = np.where(valid[:, None], np.concatenate([strat, surface], axis=1), strat_full)
    depths = _repair_ties(np.sort(depths, axis=1))

    labels = np.full((b, s_p), BEHIND, dtype=np.int8)
    md = measured_depth[:, None]
    labels[valid[:, None] & (depths < md - tr)] = FREE_SPACE
    labels[valid[:, None] & (np.abs(md - depths) <= tr)] = TRUNCATION
    targets = np.clip(md - depths, -tr, tr)
    targets[~valid] = 0.0
    return depths, targets, labels


def sample_along_ray(ray: Ray, s_p: int, tr: float, near: float, far: float, rng) -> RaySampleSet:
    depths, targets, labels = sample_batch(np.array([ray.measured_depth]), s_p, tr, near, far, rng)
    return RaySampleSet(depths[0], targets[0], labels[0])


@dataclass
class RenderedRays:
    """Differentiable render outputs for a batch of rays."""

    rgb: Tensor
    depth: Tensor
    sdf: Tensor
    degenerate: np.ndarray


def render_rays(scene_map, origins, directions, depths, tr: float) -> RenderedRays:
    """Render a batch: origins/directions (B,3), sample depths (B,S).

    All inputs may be Tensors (pose optimization) or plain arrays (mapping).
    Rays whose unnormalized weights sum below 1e-12 fall back to uniform
    weights and are flagged degenerate; the fallback uses a masked divide so
    no NaN ever enters the backward pass.
    """
    origins = ad.as_tensor(origins)
    directions = ad.as_tensor(directions)
    depths = ad.as_tensor(depths)
    b, s = depths.shape
    if s < 1:
        raise ContractViolation("empty sample set")

    o = ad.reshape(origins, (b, 1, 3))
    d = ad.reshape(directions, (b, 1, 3))
    z = ad.reshape(depths, (b, s, 1))
    points = o + z * d
    dirs_bs = d + ad.as_tensor(np.zeros((1, s, 1), dtype=directions.dtype))
    sdf_flat, rgb_flat = scene_map.query(ad.reshape(points, (b * s, 3)), ad.reshape(dirs_bs, (b * s, 3)))
    sdf = ad.reshape(sdf_flat, (b, s))
    colors = ad.reshape(rgb_flat, (b, s, 3))

    w = ad.sigmoid(sdf * (1.0 / tr)) * ad.sigmoid(sdf * (-1.0 / tr))
    wsum = w.sum(axis=1, keepdims=True)
    degenerate = (wsum.data < 1e-12).reshape(b)
    safe = ad.where(degenerate[:, None], np.ones_like(wsum.data), wsum)
    w_hat = ad.where(
        np.broadcast_to(degenerate[:, None], (b, s)),
        np.full((b, s), 1.0 / s, dtype=w.dtype),
        w / safe,
    )
    rgb = (ad.reshape(w_hat, (b, s, 1)) * colors).sum(axis=1)
    depth = (w_hat * depths).sum(axis=1)
    return RenderedRays(rgb=rgb, depth=depth, sdf=sdf, degenerate=degenerate)


@dataclass
class RenderedRay:
    rgb: Tensor
    depth: Tensor
    sdf: Tensor
    degenerate: bool


def render(scene_map, samples: RaySampleSet, ray: Ray, tr: float) -> RenderedRay:
    """Single-ray rendering (the batch path does the work)."""
    out = render_rays(
        scene_map,
        ray.origin[None, :],
        ray.direction[None, :],
        samples.depths[None, :],
        tr,
    )
    return RenderedRay(rgb=out.rgb[0], depth=out.depth[0], sdf=out.sdf[0], degenerate=bool(out.degenerate[0]))


def render_frame(scene_map, frame, pose: Pose, cfg, stride: int = 1, chunk: int = 1024, seed: int = 0):
    """Render a full (possibly strided) frame for visualization; tape-free.

    Returns (rgb, depth) images of shape (H', W', 3) and (H', W').
    """
    intr = frame.intrinsics
    rows = np.arange(0, intr.height, stride)
    cols = np.arange(0, intr.width, stride)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    rr_f, cc_f = rr.ravel(), cc.ravel()
    dirs = pixel_directions(rr_f, cc_f, intr) @ pose.rotation.T
    scale = pixel_ray_scale(rr_f, cc_f, intr)
    origins = np.broadcast_to(pose.translation, (rr_f.size, 3))
    measured = frame.depth[rr_f, cc_f] * scale
    rng = np.random.default_rng(seed)
    rgb_out = np.zeros((rr_f.size, 3))
    depth_out = np.zeros(rr_f.size)
    with ad.no_grad():
        for start in range(0, rr_f.size, chunk):
            stop = min(start + chunk, rr_f.size)
            depths, _, _ = sample_batch(measured[start:stop], cfg.s_p, cfg.tr, cfg.near, cfg.far, rng)
            out = render_rays(scene_map, origins[start:stop], dirs[start:stop], depths, cfg.tr)
            rgb_out[start:stop] = out.rgb.data
            depth_out[start:stop] = out.depth.data
    # back to z-depth so the output is comparable with the input depth image
    depth_out /= scale
    shape = (rows.size, cols.size)
    return rgb_out.reshape(*shape, 3), depth_out.reshape(shape)
