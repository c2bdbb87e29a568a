"""Analytic RGB-D scenes: a room box with interior primitives, procedural
textures, sphere-traced depth, and smooth ground-truth trajectories.

The scene SDF follows the free-space-positive convention used by the map:
positive in air, negative inside solids (and outside the room), zero at
surfaces. Being analytic, it is exact at any query point, which is what
makes these scenes usable as ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import Frame
from .errors import DatasetError
from .geometry import Intrinsics, Pose, lookat_pose
from .renderer import pixel_directions

TRACE_TOL = 1e-5
TRACE_MAX_STEPS = 256


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius

    def area(self) -> float:
        return 4.0 * np.pi * self.radius ** 2

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.asarray(self.center) + self.radius * d


@dataclass(frozen=True)
class BoxPrim:
    center: tuple
    half: tuple

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def area(self) -> float:
        hx, hy, hz = self.half
        return 8.0 * (hx * hy + hy * hz + hx * hz)

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        hx, hy, hz = self.half
        face_areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy]) * 4.0
        faces = rng.choice(6, size=n, p=face_areas / face_areas.sum())
        u = rng.uniform(-1, 1, size=n)
        v = rng.uniform(-1, 1, size=n)
        pts = np.empty((n, 3))
        half = np.array(self.half)
        for f in range(6):
            m = faces == f
            axis = f // 2
            sign = 1.0 if f % 2 == 0 else -1.0
            others = [a for a in range(3) if a != axis]
            pts[m, axis] = sign * half[axis]
            pts[m, others[0]] = u[m] * half[others[0]]
            pts[m, others[1]] = v[m] * half[others[1]]
        return np.asarray(self.center) + pts


class SyntheticScene:
    """Room interior with solid primitives and per-surface procedural albedo."""

    def __init__(self, room_center, room_half, objects, texture_seed: int = 7):
        self.room_center = np.asarray(room_center, dtype=np.float64)
        self.room_half = np.asarray(room_half, dtype=np.float64)
        self.objects = list(objects)
        rng = np.random.default_rng(texture_seed)
        n_surface = 1 + len(self.objects)
        # each surface gets its own base color and a two-octave sinusoid bank:
        # a coarse 4..14 rad/m band for large-scale shading variety and a
        # 10..22 rad/m band (30-60 cm wavelengths) that stays comfortably
        # above the pixel footprint while giving matching some locality
        self.palette = 0.35 + 0.55 * rng.random((n_surface, 3))
        self.tex_freq = rng.uniform(4.0, 14.0, size=(n_surface, 3, 3))
        self.tex_phase = rng.uniform(0, 2 * np.pi, size=(n_surface, 3))
        self.tex_freq_fine = rng.uniform(10.0, 22.0, size=(n_surface, 3, 3))
        self.tex_phase_fine = rng.uniform(0, 2 * np.pi, size=(n_surface, 3))
        self.light_dir = np.array([0.3, -0.5, 0.81])
        self.light_dir /= np.linalg.norm(self.light_dir)

    def room_sdf(self, p: np.ndarray) -> np.ndarray:
        # positive inside the room (free space), zero at the walls
        return (self.room_half - np.abs(p - self.room_center)).min(axis=-1)

    def component_sdfs(self, p: np.ndarray) -> np.ndarray:
        parts = [self.room_sdf(p)] + [o.sdf(p) for o in self.objects]
        return np.stack(parts, axis=-1)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return self.component_sdfs(p).min(axis=-1)

    def normal(self, p: np.ndarray, h: float = 1e-4) -> np.ndarray:
        n = np.empty_like(p)
        for axis in range(3):
            step = np.zeros(3)
            step[axis] = h
            n[..., axis] = self.sdf(p + step) - self.sdf(p - step)
        norm = np.linalg.norm(n, axis=-1, keepdims=True)
        return n / np.maximum(norm, 1e-12)

    def albedo(self, p: np.ndarray) -> np.ndarray:
        """Procedural color keyed to the nearest surface component."""
        comp = np.argmin(np.abs(self.component_sdfs(p)), axis=-1)
        out = np.empty(p.shape[:-1] + (3,))
        for sid in np.unique(comp):
            m = comp == sid
            pts = p[m]
            tex = np.empty((pts.shape[0], 3))
            for ch in range(3):
                phase = pts @ self.tex_freq[sid, ch] + self.tex_phase[sid, ch]
                fine = pts @ self.tex_freq_fine[sid, ch] + self.tex_phase_fine[sid, ch]
                tex[:, ch] = (0.5 + 0.2 * np.sin(phase) + 0.12 * np.sin(2.3 * phase + 1.1)
                              + 0.2 * np.sin(fine) + 0.11 * np.sin(3.1 * fine + 0.7))
            out[m] = tex * self.palette[sid]
        return np.clip(out, 0.0, 1.0)

    def sphere_trace(self, origins: np.ndarray, dirs: np.ndarray,
                     far: float) -> np.ndarray:
        """Ray length to the first surface (0 where the trace fails)."""
        n = origins.shape[0]
        t = np.zeros(n)
        depth = np.zeros(n)
        active = np.ones(n, dtype=bool)
        for _ in range(TRACE_MAX_STEPS):
            if not active.any():
                break
            p = origins[active] + t[active, None] * dirs[active]
            s = self.sdf(p)
            hit = np.abs(s) < TRACE_TOL
            idx = np.nonzero(active)[0]
            depth[idx[hit]] = t[idx[hit]]
            active[idx[hit]] = False
            remaining = idx[~hit]
            t[remaining] += s[~hit]
            overshot = t[remaining] > far
            active[remaining[overshot]] = False
        return depth

    def render(self, pose: Pose, intr: Intrinsics, timestamp: float) -> Frame:
        """RGB-D frame by sphere tracing and Lambertian shading."""
        rr, cc = np.meshgrid(np.arange(intr.height), np.arange(intr.width), indexing="ij")
        rr_f, cc_f = rr.ravel(), cc.ravel()
        dirs_cam = pixel_directions(rr_f, cc_f, intr)
        dirs = dirs_cam @ pose.rotation.T
        origins = np.broadcast_to(pose.translation, dirs.shape)
        ray_len = self.sphere_trace(origins, dirs, far=float(self.room_half.sum() * 4))

        hit = ray_len > 0
        rgb = np.full((rr_f.size, 3), 0.05)
        points = origins[hit] + ray_len[hit, None] * dirs[hit]
        albedo = self.albedo(points)
        normals = self.normal(points)
        shade = 0.35 + 0.65 * np.maximum(normals @ self.light_dir, 0.0)
        rgb[hit] = np.clip(albedo * shade[:, None], 0.0, 1.0)

        z = ray_len * dirs_cam[:, 2]
        shape = (intr.height, intr.width)
        return Frame(rgb=rgb.reshape(*shape, 3), depth=z.reshape(shape),
                     intrinsics=intr, timestamp=timestamp)

    def free_at(self, p: np.ndarray, margin: float) -> bool:
        return bool(self.sdf(np.atleast_2d(p)).min() > margin)

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform area-weighted samples of the visible scene surface."""
        areas = [self._room_area()] + [o.area() for o in self.objects]
        probs = np.array(areas) / np.sum(areas)
        out = []
        got = 0
        while got < n:
            batch = max(n - got, 256)
            comp = rng.choice(len(probs), size=batch, p=probs)
            pts = np.empty((batch, 3))
            for sid in np.unique(comp):
                m = comp == sid
                k = int(m.sum())
                if sid == 0:
                    pts[m] = self._sample_room_surface(k, rng)
                else:
                    pts[m] = self.objects[sid - 1].sample_surface(k, rng)
            keep = self.sdf(pts) > -TRACE_TOL
            pts = pts[keep]
            out.append(pts)
            got += pts.shape[0]
        return np.concatenate(out)[:n]

    def _room_area(self) -> float:
        hx, hy, hz = self.room_half
        return 8.0 * (hx * hy + hy * hz + hx * hz)

    def _sample_room_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        box = BoxPrim(center=tuple(self.room_center), half=tuple(self.room_half))
        return box.sample_surface(n, rng)


def make_default_scene() -> SyntheticScene:
    """The 4 x 4 x 3 m test room: a sphere, a crate, and a smaller ball."""
    return SyntheticScene(
        room_center=(0.0, 0.0, 1.5),
        room_half=(2.0, 2.0, 1.5),
        objects=[
            Sphere(center=(0.8, 0.4, 0.6), radius=0.5),
            BoxPrim(center=(-0.9, -0.5, 0.4), half=(0.3, 0.4, 0.4)),
            Sphere(center=(-0.2, 0.9, 0.35), radius=0.35),
        ],
    )


class StripedScene(SyntheticScene):
    """Room whose surfaces carry a dominant repeating stripe band plus a
    weaker band at an incommensurate wavelength.

    The strong band repeats every ``lam1`` meters, so a matcher keying on it
    confuses a point with its neighbors one period over. The weak band breaks
    the tie: its phase differs between repeats, which gives a feature
    extractor something scene-specific to latch onto. The stripe direction
    rotates slowly across space (rate ``beta``), so the spurious repeat
    offsets point different ways in 3-D and do not mimic a rigid motion.
    """

    def __init__(self, lam1=0.22, a1=0.30, a2=0.08, beta=0.18, base=0.52, **kw):
        super().__init__(**kw)
        self.lam1 = lam1
        self.a1 = a1
        self.a2 = a2
        self.beta = beta
        self.base = base

    def albedo(self, p: np.ndarray) -> np.ndarray:
        x, y, z = p[..., 0], p[..., 1], p[..., 2]
        th = self.beta * (x + y + z)
        k1 = 2 * np.pi / self.lam1
        k2 = k1 / 1.618
        ph1 = k1 * (x * np.cos(th) + y * np.sin(th) + 0.6 * z)
        ph2 = k2 * (x * np.cos(th + 1.3) + y * np.sin(th + 1.3) + 0.6 * z) + 1.7
        v = np.clip(self.base + self.a1 * np.sin(ph1) + self.a2 * np.sin(ph2), 0.0, 1.0)
        return np.stack([v, v, v], axis=-1)


def make_striped_scene() -> StripedScene:
    """The default room rebuilt with the repetitive stripe texture.

    At 80x60 with the default intrinsics the strong band repeats every ~7
    pixels at typical viewing distance, which reliably fools the untrained
    matcher; tracking on this scene improves once the extractor is finetuned
    against the map.
    """
    return StripedScene(
        room_center=(0.0, 0.0, 1.5),
        room_half=(2.0, 2.0, 1.5),
        objects=[
            Sphere(center=(0.8, 0.4, 0.6), radius=0.5),
            BoxPrim(center=(-0.9, -0.5, 0.4), half=(0.3, 0.4, 0.4)),
            Sphere(center=(-0.2, 0.9, 0.35), radius=0.35),
        ],
    )


def orbit_trajectory(scene: SyntheticScene, n_frames: int, radius: float = 0.9,
                     height: float = 1.35, height_amp: float = 0.2,
                     sweep_deg: float = 360.0, margin: float = 0.15) -> list[Pose]:
    """Smooth lookat orbit inside the room; refuses to leave free space."""
    poses = []
    for k in range(n_frames):
        theta = np.radians(sweep_deg) * k / max(n_frames - 1, 1)
        eye = np.array([
            radius * np.cos(theta),
            radius * np.sin(theta),
            height + height_amp * np.sin(2.0 * theta),
        ]) + scene.room_center * np.array([1.0, 1.0, 0.0])
        target = np.array([
            -0.5 * np.cos(theta + 0.3),
            -0.5 * np.sin(theta + 0.3),
            0.7,
        ])
        if not scene.free_at(eye, margin):
            raise DatasetError(f"trajectory leaves free space at frame {k}")
        poses.append(lookat_pose(eye, target))
    return poses


def default_intrinsics(width: int = 80, height: int = 60) -> Intrinsics:
    focal = 0.866 * width  # ~60 degree horizontal field of view
    return Intrinsics(fx=focal, fy=focal, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                      width=width, height=height)


def generate_synthetic(scene: SyntheticScene, poses: list[Pose], intr: Intrinsics,
                       fps: float = 30.0) -> tuple[list[Frame], list[tuple[float, Pose]]]:
    """Render the trajectory; returns (frames, ground-truth (t, pose) pairs)."""
    frames = []
    gt = []
    for k, pose in enumerate(poses):
        ts = k / fps
        frames.append(scene.render(pose, intr, ts))
        gt.append((ts, pose))
    return frames, gt
