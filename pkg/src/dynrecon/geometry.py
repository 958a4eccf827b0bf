"""SE(3) poses, dual quaternions, pinhole projection, and similarity alignment.

Quaternions are stored scalar-first (w, x, y, z) and unit-norm. Poses are
camera-to-world (or local-to-world) maps ``x_world = R x + t``. Everything is
double precision: the bundle-adjustment normal equations downstream are too
ill-conditioned for float32 at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AllZeroWeights,
    DegenerateConfiguration,
    EmptyInput,
    NonPositiveDepth,
    NonPositiveDisparity,
)

MIN_DEPTH = 1e-8


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of (w, x, y, z) quaternions."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-300:
        raise ValueError("cannot normalize zero quaternion")
    if abs(n - 1.0) < 1e-12:
        # already unit within tolerance: keep bits stable so that
        # save -> load -> construct round-trips exactly
        return q.copy()
    return q / n


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) v (..., 3) by unit quaternion q."""
    v = np.asarray(v, dtype=np.float64)
    qv = np.asarray(q[1:], dtype=np.float64)
    w = q[0]
    t = 2.0 * np.cross(qv, v)
    return v + w * t + np.cross(qv, t)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (w, x, y, z), Shepperd's method."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    return quat_normalize(q)


def rotvec_to_quat(phi: np.ndarray) -> np.ndarray:
    """Axis-angle 3-vector to unit quaternion."""
    phi = np.asarray(phi, dtype=np.float64)
    angle = np.linalg.norm(phi)
    if angle < 1e-12:
        # second-order small-angle expansion keeps this smooth near zero
        q = np.array([1.0 - angle * angle / 8.0, 0.5 * phi[0], 0.5 * phi[1], 0.5 * phi[2]])
        return quat_normalize(q)
    axis = phi / angle
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


@dataclass(frozen=True)
class RigidPose:
    """SE(3) element: x_world = R(rotation) x + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat_normalize(np.asarray(self.rotation, dtype=np.float64)))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3).copy())

    @staticmethod
    def identity() -> "RigidPose":
        return RigidPose()

    @staticmethod
    def from_matrix(m: np.ndarray) -> "RigidPose":
        m = np.asarray(m, dtype=np.float64)
        return RigidPose(matrix_to_quat(m[:3, :3]), m[:3, 3])

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = quat_to_matrix(self.rotation)
        out[:3, 3] = self.translation
        return out

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def compose(self, other: "RigidPose") -> "RigidPose":
        """self ∘ other: apply `other` first, then `self`."""
        return RigidPose(
            quat_multiply(self.rotation, other.rotation),
            quat_rotate(self.rotation, other.translation) + self.translation,
        )

    def inverse(self) -> "RigidPose":
        qc = quat_conjugate(self.rotation)
        return RigidPose(qc, -quat_rotate(qc, self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return quat_rotate(self.rotation, points) + self.translation


@dataclass(frozen=True)
class DualQuaternion:
    """Unit dual quaternion real + ε·dual encoding a rigid transform."""

    real: np.ndarray
    dual: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "real", np.asarray(self.real, dtype=np.float64).reshape(4).copy())
        object.__setattr__(self, "dual", np.asarray(self.dual, dtype=np.float64).reshape(4).copy())

    @staticmethod
    def from_pose(pose: RigidPose) -> "DualQuaternion":
        q = pose.rotation
        t = np.concatenate([[0.0], pose.translation])
        return DualQuaternion(q, 0.5 * quat_multiply(t, q))

    def normalized(self) -> "DualQuaternion":
        """Full dual-number normalization; restores real·dual = 0 exactly."""
        n = np.linalg.norm(self.real)
        if n < 1e-300:
            raise ValueError("dual quaternion with zero real part")
        real = self.real / n
        dual = self.dual / n
        dual = dual - real * np.dot(real, dual)
        return DualQuaternion(real, dual)

    def to_pose(self) -> RigidPose:
        dq = self.normalized()
        t = 2.0 * quat_multiply(dq.dual, quat_conjugate(dq.real))
        return RigidPose(dq.real, t[1:])


@dataclass(frozen=True)
class PinholeIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def unproject_dirs(self, pixels: np.ndarray) -> np.ndarray:
        """Pixel coords (..., 2) to unit-depth camera rays (..., 3)."""
        pixels = np.asarray(pixels, dtype=np.float64)
        x = (pixels[..., 0] - self.cx) / self.fx
        y = (pixels[..., 1] - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=-1)

    def pixel_grid(self) -> np.ndarray:
        """(H, W, 2) grid of pixel coordinates (x, y)."""
        xs, ys = np.meshgrid(np.arange(self.width), np.arange(self.height))
        return np.stack([xs, ys], axis=-1).astype(np.float64)


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "rotation", quat_normalize(np.asarray(self.rotation, dtype=np.float64)))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3).copy())

    @staticmethod
    def identity() -> "SimilarityTransform":
        return SimilarityTransform(1.0, np.array([1.0, 0, 0, 0]), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * quat_rotate(self.rotation, points) + self.translation

    def apply_pose(self, pose: RigidPose) -> RigidPose:
        """Similarity-conjugate a camera-to-world pose (rotates/scales its center)."""
        return RigidPose(
            quat_multiply(self.rotation, pose.rotation),
            self.apply(pose.translation),
        )


def project(pose: RigidPose, intrinsics: PinholeIntrinsics, point: np.ndarray):
    """Perspective-project a world point through a camera-to-world pose.

    Returns (pixel (2,), depth). Raises NonPositiveDepth when the point is at
    or behind the camera plane.
    """
    p_cam = pose.inverse().apply(np.asarray(point, dtype=np.float64))
    z = p_cam[2]
    if z <= MIN_DEPTH:
        raise NonPositiveDepth(f"point depth {z:.3e} <= {MIN_DEPTH}")
    pixel = np.array(
        [intrinsics.fx * p_cam[0] / z + intrinsics.cx, intrinsics.fy * p_cam[1] / z + intrinsics.cy]
    )
    return pixel, float(z)


def backproject(pose: RigidPose, intrinsics: PinholeIntrinsics, pixel: np.ndarray, disparity: float) -> np.ndarray:
    """Lift a pixel with inverse depth `disparity` (1/m) to a world point."""
    if disparity <= 0:
        raise NonPositiveDisparity(f"disparity {disparity} <= 0")
    ray = intrinsics.unproject_dirs(np.asarray(pixel, dtype=np.float64))
    return pose.apply(ray / disparity)


def dqb_blend(weights, transforms) -> RigidPose:
    """Dual-quaternion blend of rigid transforms with nonnegative weights.

    Inputs are sign-corrected to the hemisphere of the largest-weight element
    before averaging, then the blended dual quaternion is normalized and
    converted back to a rigid pose.
    """
    weights = np.asarray(weights, dtype=np.float64)
    transforms = list(transforms)
    if len(transforms) == 0 or weights.size == 0:
        raise EmptyInput("dqb_blend needs at least one transform")
    if weights.size != len(transforms):
        raise ValueError("weights and transforms must have the same length")
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    total = weights.sum()
    if total <= 0:
        raise AllZeroWeights("all blend weights are zero")
    w = weights / total

    ref = transforms[int(np.argmax(weights))].rotation
    real = np.zeros(4)
    dual = np.zeros(4)
    for wi, pose in zip(w, transforms):
        dq = DualQuaternion.from_pose(pose)
        sign = -1.0 if np.dot(dq.real, ref) < 0 else 1.0
        real += wi * sign * dq.real
        dual += wi * sign * dq.dual
    return DualQuaternion(real, dual).to_pose()


def umeyama_align(source, target) -> SimilarityTransform:
    """Least-squares similarity s, R, t minimizing Σ‖target − s·R·source − t‖²."""
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError("source and target must have matching shapes")
    n = src.shape[0]
    if n < 3:
        raise DegenerateConfiguration(f"need >= 3 point pairs, got {n}")

    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / n
    var_s = np.mean(np.sum(xs * xs, axis=1))
    if var_s < 1e-24:
        raise DegenerateConfiguration("source points are coincident")

    u, d, vt = np.linalg.svd(cov)
    if d[1] <= 1e-12 * max(d[0], 1e-12):
        raise DegenerateConfiguration("point configuration is collinear")
    s_fix = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_fix[2, 2] = -1.0
    rot = u @ s_fix @ vt
    scale = np.trace(np.diag(d) @ s_fix) / var_s
    if scale <= 0:
        raise DegenerateConfiguration("recovered non-positive scale")
    trans = mu_d - scale * rot @ mu_s
    return SimilarityTransform(float(scale), matrix_to_quat(rot), trans)
