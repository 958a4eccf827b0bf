"""Non-keyframe depth synthesis.

Keyframe pixels are back-projected, reprojected into the target frame, and
splatted into a sparse raster (z-min on conflicts). Holes are filled by
axis-aligned bilinear interpolation, and a monocular depth estimate is then
pinned to the reprojected depth by a closed-form affine (scale, shift) fit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConstantMonoDepth, InsufficientOverlap, NoValidSamples
from .geometry import MIN_DEPTH, PinholeIntrinsics, RigidPose


@dataclass
class DepthMap:
    frame_id: int
    depth: np.ndarray  # (H, W) meters
    validity: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.validity = np.asarray(self.validity, dtype=bool)
        if self.depth.shape != self.validity.shape:
            raise ValueError("depth and validity shapes differ")
        self.validity = self.validity & (self.depth > 0) & np.isfinite(self.depth)

    @staticmethod
    def dense(frame_id: int, depth: np.ndarray) -> "DepthMap":
        depth = np.asarray(depth, dtype=np.float64)
        return DepthMap(frame_id, depth, np.isfinite(depth) & (depth > 0))


@dataclass(frozen=True)
class AffineDepthFit:
    scale: float
    shift: float
    inlier_count: int


def sample_depth(depth_map: DepthMap, xy: np.ndarray):
    """Validity-aware bilinear depth lookup at continuous pixel coords (..., 2).

    Invalid corner samples are dropped from the bilinear stencil by weight
    renormalization; a sample with no valid corner is flagged invalid.
    Returns (depth (...,), ok (...,) bool).
    """
    xy = np.asarray(xy, dtype=np.float64)
    h, w = depth_map.depth.shape
    x = np.clip(xy[..., 0], 0.0, w - 1.0)
    y = np.clip(xy[..., 1], 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(int), 0, w - 1)
    y0 = np.clip(np.floor(y).astype(int), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0

    vals = np.zeros(xy.shape[:-1])
    wsum = np.zeros(xy.shape[:-1])
    for yy, xx, ww in (
        (y0, x0, (1 - fx) * (1 - fy)),
        (y0, x1, fx * (1 - fy)),
        (y1, x0, (1 - fx) * fy),
        (y1, x1, fx * fy),
    ):
        valid = depth_map.validity[yy, xx]
        wv = ww * valid
        vals += wv * depth_map.depth[yy, xx]
        wsum += wv
    ok = wsum > 1e-12
    out = np.where(ok, vals / np.where(ok, wsum, 1.0), 0.0)
    return out, ok


def reproject_depth(frame_pose: RigidPose, intrinsics: PinholeIntrinsics, neighbors):
    """Scatter neighbor-keyframe geometry into the target frame.

    neighbors: iterable of (pose, disparity (H,W), dynamic_mask (H,W) bool,
    validity (H,W) bool). Pixels that are dynamic, invalid, or land behind
    the camera or outside the frame are dropped.

    Returns (pixels (M,2), depths (M,)).
    """
    world_to_frame = frame_pose.inverse()
    pix_out = []
    dep_out = []
    grid = intrinsics.pixel_grid().reshape(-1, 2)
    rays = intrinsics.unproject_dirs(grid)
    for pose, disparity, dynamic_mask, validity in neighbors:
        disparity = np.asarray(disparity, dtype=np.float64).reshape(-1)
        keep = (
            np.asarray(validity, bool).reshape(-1)
            & ~np.asarray(dynamic_mask, bool).reshape(-1)
            & (disparity > 0)
        )
        if not keep.any():
            continue
        pts_cam = rays[keep] / disparity[keep, None]
        pts_world = pose.apply(pts_cam)
        pts_frame = world_to_frame.apply(pts_world)
        z = pts_frame[:, 2]
        front = z > MIN_DEPTH
        pts_frame = pts_frame[front]
        z = z[front]
        px = np.stack(
            [
                intrinsics.fx * pts_frame[:, 0] / z + intrinsics.cx,
                intrinsics.fy * pts_frame[:, 1] / z + intrinsics.cy,
            ],
            axis=-1,
        )
        inside = (
            (px[:, 0] >= -0.5)
            & (px[:, 0] <= intrinsics.width - 0.5)
            & (px[:, 1] >= -0.5)
            & (px[:, 1] <= intrinsics.height - 0.5)
        )
        pix_out.append(px[inside])
        dep_out.append(z[inside])
    if not pix_out or sum(len(p) for p in pix_out) == 0:
        raise NoValidSamples("no reprojectable static samples")
    return np.concatenate(pix_out, axis=0), np.concatenate(dep_out, axis=0)


def _axis_fill(filled_vals: np.ndarray, filled: np.ndarray):
    """Per-row linear interpolation between nearest filled cells.

    Returns (estimate, ok) where ok marks pixels with filled cells on both
    sides along the row axis. Filled pixels pass through exactly.
    """
    h, w = filled.shape
    idx = np.arange(w)[None, :].repeat(h, axis=0)

    left = np.where(filled, idx, -1)
    left = np.maximum.accumulate(left, axis=1)
    right = np.where(filled, idx, w)
    right = np.minimum.accumulate(right[:, ::-1], axis=1)[:, ::-1]

    ok = (left >= 0) & (right <= w - 1)
    li = np.clip(left, 0, w - 1)
    ri = np.clip(right, 0, w - 1)
    rows = np.arange(h)[:, None]
    vl = filled_vals[rows, li]
    vr = filled_vals[rows, ri]
    span = np.maximum(ri - li, 1)
    t = (idx - li) / span
    est = vl * (1 - t) + vr * t
    est = np.where(filled, filled_vals, est)
    return est, ok


def interpolate_sparse_depth(pixels: np.ndarray, depths: np.ndarray, shape, frame_id: int = -1) -> DepthMap:
    """Rasterize scattered (pixel, depth) samples into a dense depth map.

    Samples snap to the nearest cell with z-min conflict resolution; holes
    are filled by linear interpolation along rows and columns (averaged when
    both are available). Pixels with no bracketing samples along either axis
    are marked invalid.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    depths = np.asarray(depths, dtype=np.float64).reshape(-1)
    if pixels.shape[0] < 3:
        raise NoValidSamples(f"need >= 3 samples, got {pixels.shape[0]}")
    h, w = shape
    xi = np.round(pixels[:, 0]).astype(int)
    yi = np.round(pixels[:, 1]).astype(int)
    keep = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h) & (depths > 0)
    xi, yi, d = xi[keep], yi[keep], depths[keep]
    if d.size < 3:
        raise NoValidSamples("fewer than 3 samples land inside the raster")

    raster = np.full((h, w), np.inf)
    np.minimum.at(raster, (yi, xi), d)
    filled = np.isfinite(raster)
    raster = np.where(filled, raster, 0.0)

    est_h, ok_h = _axis_fill(raster, filled)
    est_v, ok_v = _axis_fill(raster.T, filled.T)
    est_v, ok_v = est_v.T, ok_v.T

    weight = ok_h.astype(float) + ok_v.astype(float)
    valid = weight > 0
    est = np.where(valid, (est_h * ok_h + est_v * ok_v) / np.maximum(weight, 1), 0.0)
    est = np.where(filled, raster, est)
    valid = valid | filled
    return DepthMap(frame_id, np.where(valid, est, 0.0), valid)


def align_mono_depth(mono: DepthMap, repro: DepthMap):
    """Closed-form least-squares (scale, shift) aligning mono depth to repro.

    Returns (AffineDepthFit, aligned DepthMap). Aligned depth covers every
    mono-valid pixel; non-positive aligned values are flagged invalid.
    """
    if mono.depth.shape != repro.depth.shape:
        raise ValueError("mono and repro shapes differ")
    joint = mono.validity & repro.validity
    n = int(joint.sum())
    if n < 2:
        raise InsufficientOverlap(f"only {n} jointly valid pixels")
    x = mono.depth[joint]
    y = repro.depth[joint]
    var = float(np.var(x))
    if var < 1e-12:
        raise ConstantMonoDepth("mono depth variance below 1e-12")
    theta = float(np.mean((x - x.mean()) * (y - y.mean())) / var)
    gamma = float(y.mean() - theta * x.mean())
    aligned = theta * mono.depth + gamma
    validity = mono.validity & (aligned > 0)
    fit = AffineDepthFit(theta, gamma, n)
    return fit, DepthMap(mono.frame_id, np.where(validity, aligned, 0.0), validity)


def multiview_consistency(
    pose_a: RigidPose,
    disp_a: np.ndarray,
    pose_b: RigidPose,
    disp_b: np.ndarray,
    intrinsics: PinholeIntrinsics,
    px_tol: float = 1.0,
    depth_tol: float = 0.05,
) -> np.ndarray:
    """Two-view symmetric reprojection check on keyframe disparities.

    A pixel of view a is consistent when its point agrees with view b's depth
    within `depth_tol` (relative) and the b->a round trip lands within
    `px_tol` pixels. Out-of-frustum pixels are inconsistent.
    """
    h, w = disp_a.shape
    grid = intrinsics.pixel_grid().reshape(-1, 2)
    rays = intrinsics.unproject_dirs(grid)
    da = np.asarray(disp_a, dtype=np.float64).reshape(-1)
    ok = da > 0

    pts_world = pose_a.apply(rays / np.where(ok, da, 1.0)[:, None])
    pts_b = pose_b.inverse().apply(pts_world)
    z_b = pts_b[:, 2]
    ok &= z_b > MIN_DEPTH
    px_b = np.stack(
        [
            intrinsics.fx * pts_b[:, 0] / np.where(ok, z_b, 1.0) + intrinsics.cx,
            intrinsics.fy * pts_b[:, 1] / np.where(ok, z_b, 1.0) + intrinsics.cy,
        ],
        axis=-1,
    )
    ok &= (px_b[:, 0] >= 0) & (px_b[:, 0] <= w - 1) & (px_b[:, 1] >= 0) & (px_b[:, 1] <= h - 1)

    depth_b_map = DepthMap.dense(-1, 1.0 / np.where(disp_b > 0, disp_b, np.inf))
    zb_obs, zb_ok = sample_depth(depth_b_map, px_b)
    ok &= zb_ok
    ok &= np.abs(z_b - zb_obs) <= depth_tol * np.maximum(zb_obs, 1e-12)

    # round trip: lift b's observed depth at the landing pixel, reproject to a
    rays_b = intrinsics.unproject_dirs(px_b)
    pts_world_rt = pose_b.apply(rays_b * np.where(ok, zb_obs, 1.0)[:, None])
    pts_a = pose_a.inverse().apply(pts_world_rt)
    z_a = pts_a[:, 2]
    ok &= z_a > MIN_DEPTH
    px_a = np.stack(
        [
            intrinsics.fx * pts_a[:, 0] / np.where(ok, z_a, 1.0) + intrinsics.cx,
            intrinsics.fy * pts_a[:, 1] / np.where(ok, z_a, 1.0) + intrinsics.cy,
        ],
        axis=-1,
    )
    ok &= np.linalg.norm(px_a - grid, axis=-1) <= px_tol
    return ok.reshape(h, w)
