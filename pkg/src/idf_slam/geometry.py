"""SE(3) poses, pinhole camera geometry, and differentiable pose increments.

Poses follow the world-from-camera convention throughout: ``rotation`` maps
camera-frame vectors into the world frame and ``translation`` is the camera
center in world coordinates. The camera looks down +z with x right and y
down (standard pinhole axes).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ContractViolation("focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def inverse_matrix(self) -> np.ndarray:
        return np.array([
            [1.0 / self.fx, 0.0, -self.cx / self.fx],
            [0.0, 1.0 / self.fy, -self.cy / self.fy],
            [0.0, 0.0, 1.0],
        ])


@dataclass
class Pose:
    """Rigid world-from-camera transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_quaternion(cls, qx: float, qy: float, qz: float, qw: float, t) -> "Pose":
        return cls(rotation_from_quaternion(qx, qy, qz, qw), t)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map (..., 3) points through the transform."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def quaternion(self) -> np.ndarray:
        """Unit quaternion (qx, qy, qz, qw) of the rotation."""
        return quaternion_from_rotation(self.rotation)

    def rotation_valid(self, tol: float = 1e-6) -> bool:
        r = self.rotation
        return (np.abs(r.T @ r - np.eye(3)).max() < tol) and abs(np.linalg.det(r) - 1.0) < tol

    def translation_to(self, other: "Pose") -> float:
        return float(np.linalg.norm(self.translation - other.translation))

    def rotation_angle_to(self, other: "Pose") -> float:
        """Relative rotation angle in degrees."""
        return rotation_angle_deg(self.rotation.T @ other.rotation)


def rotation_angle_deg(r: np.ndarray) -> float:
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def quaternion_from_rotation(r: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns (qx, qy, qz, qw) with qw ≥ 0."""
    r = np.asarray(r, dtype=np.float64)
    t = np.trace(r)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        qw = 0.25 * s
        qx = (r[2, 1] - r[1, 2]) / s
        qy = (r[0, 2] - r[2, 0]) / s
        qz = (r[1, 0] - r[0, 1]) / s
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        qw = (r[2, 1] - r[1, 2]) / s
        qx = 0.25 * s
        qy = (r[0, 1] + r[1, 0]) / s
        qz = (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] > r[2, 2]:
        s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        qw = (r[0, 2] - r[2, 0]) / s
        qx = (r[0, 1] + r[1, 0]) / s
        qy = 0.25 * s
        qz = (r[1, 2] + r[2, 1]) / s
    else:
        s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        qw = (r[1, 0] - r[0, 1]) / s
        qx = (r[0, 2] + r[2, 0]) / s
        qy = (r[1, 2] + r[2, 1]) / s
        qz = 0.25 * s
    q = np.array([qx, qy, qz, qw])
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def rotation_from_quaternion(qx: float, qy: float, qz: float, qw: float) -> np.ndarray:
    n = np.sqrt(qx * qx + qy * qy + qz * qz + qw * qw)
    if n == 0:
        raise ContractViolation("zero quaternion")
    qx, qy, qz, qw = qx / n, qy / n, qz / n, qw / n
    return np.array([
        [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw)],
        [2 * (qx * qy + qz * qw), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw)],
        [2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx * qx + qy * qy)],
    ])


def exp_so3(omega: np.ndarray) -> np.ndarray:
    """Rodrigues' formula (numpy); small angles use the series expansion."""
    omega = np.asarray(omega, dtype=np.float64)
    theta_sq = float(omega @ omega)
    k = np.array([
        [0.0, -omega[2], omega[1]],
        [omega[2], 0.0, -omega[0]],
        [-omega[1], omega[0], 0.0],
    ])
    if theta_sq < 1e-8:
        a = 1.0 - theta_sq / 6.0 + theta_sq * theta_sq / 120.0
        b = 0.5 - theta_sq / 24.0 + theta_sq * theta_sq / 720.0
    else:
        theta = np.sqrt(theta_sq)
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta_sq
    return np.eye(3) + a * k + b * (k @ k)


def apply_increment(delta: np.ndarray, base: Pose) -> Pose:
    """Left-multiply the 6-vector increment (axis-angle ω, translation u)."""
    delta = np.asarray(delta, dtype=np.float64)
    inc = Pose(exp_so3(delta[:3]), delta[3:])
    return inc.compose(base)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation from a normalized quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return rotation_from_quaternion(q[0], q[1], q[2], q[3])


def lookat_pose(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-from-camera pose looking from ``eye`` toward ``target``.

    Camera axes: z forward, x right, y down; ``up`` is the world up used to
    level the horizon.
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(forward)
    if n < 1e-12:
        raise ContractViolation("lookat target coincides with the eye")
    z = forward / n
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.stack([x, y, z], axis=1)
    return Pose(r, eye)


# -- pinhole projection (numpy, used by covisibility and the tracker) -----------


def backproject(rows: np.ndarray, cols: np.ndarray, depth: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Pixel (row, col) + depth → 3-D points in the camera frame, shape (N, 3)."""
    x = (np.asarray(cols, dtype=np.float64) - intr.cx) / intr.fx * depth
    y = (np.asarray(rows, dtype=np.float64) - intr.cy) / intr.fy * depth
    return np.stack([x, y, np.asarray(depth, dtype=np.float64)], axis=-1)


def project(points_cam: np.ndarray, intr: Intrinsics) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Camera-frame points → (col, row, depth) arrays; depth ≤ 0 marks invalid."""
    points_cam = np.asarray(points_cam, dtype=np.float64)
    z = points_cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * points_cam[..., 0] / z + intr.cx
        v = intr.fy * points_cam[..., 1] / z + intr.cy
    return u, v, z


# -- differentiable increment (tape ops) -----------------------------------------


def _skew_t(w: Tensor) -> Tensor:
    zero = ad.as_tensor(0.0)
    wx, wy, wz = w[0], w[1], w[2]
    return ad.stack([
        ad.stack([zero, -wz, wy]),
        ad.stack([wz, zero, -wx]),
        ad.stack([-wy, wx, zero]),
    ])


def rotation_exp_t(omega: Tensor) -> Tensor:
    """Differentiable Rodrigues map, (3,) → (3,3).

    The angle is a concrete scalar at trace time, so the small-angle series
    branch is picked in Python; both branches agree to ~1e-28 at the switch.
    """
    theta_sq = (omega * omega).sum()
    if float(theta_sq.data) < 1e-8:
        a = 1.0 - theta_sq * (1.0 / 6.0) + theta_sq * theta_sq * (1.0 / 120.0)
        b = 0.5 - theta_sq * (1.0 / 24.0) + theta_sq * theta_sq * (1.0 / 720.0)
    else:
        theta = ad.sqrt(theta_sq)
        a = ad.sin(theta) / theta
        b = (1.0 - ad.cos(theta)) / theta_sq
    k = _skew_t(omega)
    return ad.as_tensor(np.eye(3, dtype=omega.dtype)) + a * k + b * (k @ k)


def apply_increment_t(delta: Tensor, base: Pose) -> tuple[Tensor, Tensor]:
    """Differentiable left-multiplied increment; returns world (R, t) tensors."""
    if delta.shape != (6,):
        raise ContractViolation(f"increment must be a 6-vector, got {delta.shape}")
    omega = delta[:3]
    u = delta[3:]
    r_inc = rotation_exp_t(omega)
    r = r_inc @ ad.as_tensor(base.rotation.astype(delta.dtype))
    t = r_inc @ ad.as_tensor(base.translation.astype(delta.dtype)) + u
    return r, t
