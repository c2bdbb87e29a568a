"""RGB-D frame containers and on-disk dataset / trajectory formats.

A dataset directory holds ``intrinsics.txt`` (one line: fx fy cx cy width
height depth_scale), ``associations.txt`` (one line per frame: color_ts
color_path depth_ts depth_path), 8-bit color PNGs, and 16-bit depth PNGs
storing depth_scale * meters. Trajectories use the plain-text line format
``timestamp tx ty tz qx qy qz qw``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .errors import DatasetError
from .geometry import Intrinsics, Pose


@dataclass
class Frame:
    """One RGB-D observation. Depth 0 marks invalid pixels."""

    rgb: np.ndarray
    depth: np.ndarray
    intrinsics: Intrinsics
    timestamp: float

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise DatasetError(f"rgb must be HxWx3, got {self.rgb.shape}")
        if self.depth.shape != self.rgb.shape[:2]:
            raise DatasetError(f"depth {self.depth.shape} does not match rgb {self.rgb.shape[:2]}")
        if self.depth.min() < 0:
            raise DatasetError("negative depth")

    @property
    def valid_depth(self) -> np.ndarray:
        return self.depth > 0


def load_dataset(directory: str | Path) -> Iterator[Frame]:
    """Yield frames sorted by color timestamp; images are read lazily."""
    directory = Path(directory)
    intr_path = directory / "intrinsics.txt"
    assoc_path = directory / "associations.txt"
    if not intr_path.exists():
        raise DatasetError(f"missing {intr_path}")
    if not assoc_path.exists():
        raise DatasetError(f"missing {assoc_path}")
    fields = intr_path.read_text().split()
    if len(fields) != 7:
        raise DatasetError(f"{intr_path} must hold 'fx fy cx cy width height depth_scale'")
    fx, fy, cx, cy = map(float, fields[:4])
    width, height = int(fields[4]), int(fields[5])
    depth_scale = float(fields[6])
    intr = Intrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)

    records = []
    for line in assoc_path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DatasetError(f"bad association line: {line!r}")
        records.append((float(parts[0]), parts[1], float(parts[2]), parts[3]))
    records.sort(key=lambda r: r[0])

    for ts, color_rel, _, depth_rel in records:
        color_path = directory / color_rel
        depth_path = directory / depth_rel
        if not color_path.exists():
            raise DatasetError(f"missing color image {color_path}")
        if not depth_path.exists():
            raise DatasetError(f"missing depth image {depth_path}")
        rgb = np.asarray(Image.open(color_path), dtype=np.float64) / 255.0
        depth_raw = np.asarray(Image.open(depth_path))
        if rgb.shape[:2] != (height, width) or depth_raw.shape != (height, width):
            raise DatasetError(f"image dims mismatch for {color_rel}")
        yield Frame(rgb=rgb, depth=depth_raw.astype(np.float64) / depth_scale,
                    intrinsics=intr, timestamp=ts)


def write_dataset(directory: str | Path, frames, depth_scale: float = 5000.0) -> None:
    """Write frames in the layout load_dataset reads back."""
    directory = Path(directory)
    (directory / "color").mkdir(parents=True, exist_ok=True)
    (directory / "depth").mkdir(parents=True, exist_ok=True)
    lines = []
    intr = None
    for i, frame in enumerate(frames):
        intr = frame.intrinsics
        color_rel = f"color/{i:06d}.png"
        depth_rel = f"depth/{i:06d}.png"
        rgb8 = np.clip(np.rint(frame.rgb * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb8).save(directory / color_rel)
        d16 = np.clip(np.rint(frame.depth * depth_scale), 0, 65535).astype(np.uint16)
        Image.fromarray(d16).save(directory / depth_rel)
        lines.append(f"{frame.timestamp:.6f} {color_rel} {frame.timestamp:.6f} {depth_rel}")
    if intr is None:
        raise DatasetError("no frames to write")
    (directory / "intrinsics.txt").write_text(
        f"{intr.fx} {intr.fy} {intr.cx} {intr.cy} {intr.width} {intr.height} {depth_scale}\n")
    (directory / "associations.txt").write_text("\n".join(lines) + "\n")


def write_trajectory(path: str | Path, entries) -> None:
    """Write (timestamp, Pose) pairs as 'timestamp tx ty tz qx qy qz qw' lines."""
    lines = []
    for ts, pose in entries:
        t = pose.translation
        q = pose.quaternion()
        lines.append(f"{ts:.6f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
                     f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path: str | Path) -> list[tuple[float, Pose]]:
    entries = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = [float(v) for v in line.split()]
        if len(vals) != 8:
            raise DatasetError(f"bad trajectory line in {path}: {line!r}")
        ts, tx, ty, tz, qx, qy, qz, qw = vals
        entries.append((ts, Pose.from_quaternion(qx, qy, qz, qw, np.array([tx, ty, tz]))))
    return entries
