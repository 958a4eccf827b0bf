"""Trajectory and image-quality metrics: ATE RMSE, PSNR, SSIM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InsufficientAssociations, ShapeMismatch
from .geometry import RigidPose, umeyama_align

ASSOCIATION_TOLERANCE = 0.02  # seconds
PSNR_CAP = 100.0
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11x11 window


@dataclass
class Trajectory:
    timestamps: np.ndarray  # (N,) seconds, strictly increasing
    poses: list  # list[RigidPose]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if len(self.poses) != self.timestamps.shape[0]:
            raise ValueError("timestamps and poses disagree in length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def positions(self) -> np.ndarray:
        return np.stack([p.translation for p in self.poses]) if self.poses else np.zeros((0, 3))


def associate(a: Trajectory, b: Trajectory, tolerance: float = ASSOCIATION_TOLERANCE):
    """Greedy nearest-neighbor timestamp association within tolerance."""
    pairs = []
    used_b = set()
    for i, t in enumerate(a.timestamps):
        j = int(np.argmin(np.abs(b.timestamps - t)))
        if j in used_b or abs(b.timestamps[j] - t) > tolerance:
            continue
        used_b.add(j)
        pairs.append((i, j))
    return pairs


def ate_rmse(estimate: Trajectory, ground_truth: Trajectory, tolerance: float = ASSOCIATION_TOLERANCE) -> float:
    """RMSE of translational residuals after similarity (Umeyama) alignment."""
    pairs = associate(estimate, ground_truth, tolerance)
    if len(pairs) < 3:
        raise InsufficientAssociations(f"only {len(pairs)} associated poses")
    est = np.stack([estimate.poses[i].translation for i, _ in pairs])
    gt = np.stack([ground_truth.poses[j].translation for _, j in pairs])
    sim = umeyama_align(est, gt)
    res = sim.apply(est) - gt
    return float(np.sqrt(np.mean(np.sum(res**2, axis=-1))))


def psnr(rendered: np.ndarray, reference: np.ndarray, mask=None) -> float:
    """10 log10(1 / MSE) over masked pixels of [0,1] images, capped at 100 dB."""
    rendered = np.asarray(rendered, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if rendered.shape != reference.shape:
        raise ShapeMismatch(f"{rendered.shape} vs {reference.shape}")
    err = (rendered - reference) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != rendered.shape[: mask.ndim]:
            raise ShapeMismatch("mask shape does not match images")
        err = err[mask]
    mse = float(np.mean(err)) if err.size else 0.0
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def _ssim_filter(img: np.ndarray) -> np.ndarray:
    return ndimage.gaussian_filter(img, sigma=SSIM_SIGMA, radius=SSIM_RADIUS, mode="reflect")


def ssim(rendered: np.ndarray, reference: np.ndarray, mask=None) -> float:
    """Gaussian-windowed (11x11, sigma 1.5) SSIM averaged over masked pixels.

    Standard constants K1 = 0.01, K2 = 0.03 at dynamic range 1. Color images
    average the per-channel SSIM maps.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if rendered.shape != reference.shape:
        raise ShapeMismatch(f"{rendered.shape} vs {reference.shape}")
    if rendered.ndim == 2:
        rendered = rendered[..., None]
        reference = reference[..., None]
    c1 = 0.01**2
    c2 = 0.03**2
    maps = []
    for c in range(rendered.shape[-1]):
        x = rendered[..., c]
        y = reference[..., c]
        mx = _ssim_filter(x)
        my = _ssim_filter(y)
        vx = _ssim_filter(x * x) - mx * mx
        vy = _ssim_filter(y * y) - my * my
        cxy = _ssim_filter(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        maps.append(num / den)
    smap = np.mean(maps, axis=0)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != smap.shape:
            raise ShapeMismatch("mask shape does not match images")
        smap = smap[mask]
    return float(np.mean(smap)) if smap.size else 1.0
