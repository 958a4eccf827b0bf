"""Semantic-guided refinement of coarse motion masks into per-frame fine masks.

Coarse masks are denoised with a median filter, prompts are seeded at the
centroids of their connected regions, and a promptable segmentation oracle
turns prompts into object masks. Across frames, prior objects are propagated
by the oracle and new coarse regions spawn new objects; candidates are
validated by counting coarse-region centroids they contain, and the coarse
threshold adapts to the dynamic pixel ratio of the latest fine mask.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import EvenKernel, OracleFailure

FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=int)
DEFAULT_PATIENCE = 5
DEFAULT_MARGIN = 1.5
QUANTILE_MIN = 0.05
QUANTILE_MAX = 0.5


@dataclass
class FineMask:
    frame_id: int
    object_ids: np.ndarray  # (H, W) int32 labels, 0 = static

    def __post_init__(self):
        self.object_ids = np.asarray(self.object_ids, dtype=np.int32)

    @property
    def mask(self) -> np.ndarray:
        return self.object_ids != 0

    @property
    def dynamic_ratio(self) -> float:
        return float(np.mean(self.object_ids != 0))


@dataclass
class PromptPoint:
    pixel: tuple  # (x, y)
    object_hint: int

    def __post_init__(self):
        self.pixel = (int(self.pixel[0]), int(self.pixel[1]))


def median_filter(mask: np.ndarray, kernel: int) -> np.ndarray:
    """Edge-clamped binary median filter (odd kernel)."""
    if kernel < 1 or kernel % 2 == 0:
        raise EvenKernel(f"kernel must be odd and >= 1, got {kernel}")
    mask = np.asarray(mask, dtype=bool)
    if kernel == 1:
        return mask.copy()
    return ndimage.median_filter(mask.astype(np.uint8), size=kernel, mode="nearest") > 0


def seed_prompts(coarse, median_kernel: int = 5) -> list:
    """One prompt per 4-connected region of the median-filtered coarse mask.

    Prompts sit at the integer-rounded region centroid, snapped to the
    nearest region pixel when the centroid falls off-region.
    """
    mask = coarse.mask if hasattr(coarse, "mask") else np.asarray(coarse, dtype=bool)
    filtered = median_filter(mask, median_kernel)
    labeled, count = ndimage.label(filtered, structure=FOUR_CONN)
    prompts = []
    for region in range(1, count + 1):
        ys, xs = np.nonzero(labeled == region)
        cx = int(round(xs.mean()))
        cy = int(round(ys.mean()))
        if labeled[cy, cx] != region:
            d2 = (xs - xs.mean()) ** 2 + (ys - ys.mean()) ** 2
            order = np.lexsort((xs, ys, d2))
            cx, cy = int(xs[order[0]]), int(ys[order[0]])
        prompts.append(PromptPoint((cx, cy), region))
    return prompts


def validate_segment(candidate: np.ndarray, coarse, min_prompt_support: int = 1, median_kernel: int = 5) -> bool:
    """Accept a candidate mask iff it contains at least `min_prompt_support`
    coarse-region centroids (the prompt candidates)."""
    candidate = np.asarray(candidate, dtype=bool)
    prompts = seed_prompts(coarse, median_kernel)
    hits = sum(1 for p in prompts if candidate[p.pixel[1], p.pixel[0]])
    return hits >= min_prompt_support


def adapt_threshold(prev_fine: Optional[FineMask], base_quantile: float, margin: float = DEFAULT_MARGIN,
                    q_min: float = QUANTILE_MIN, q_max: float = QUANTILE_MAX) -> float:
    """Coarse-mask quantile from the latest fine mask's dynamic pixel ratio."""
    if not (0.0 < base_quantile < 1.0):
        raise ValueError("base_quantile must lie in (0, 1)")
    if prev_fine is None:
        return base_quantile
    return float(np.clip(prev_fine.dynamic_ratio * margin, q_min, q_max))


class MaskTracker:
    """Object-id registry driving initialization and incremental prediction."""

    def __init__(self, oracle, min_prompt_support: int = 1, patience: int = DEFAULT_PATIENCE,
                 median_kernel: int = 5, overlap_iou: float = 0.5):
        self.oracle = oracle
        self.min_prompt_support = min_prompt_support
        self.patience = patience
        self.median_kernel = median_kernel
        self.overlap_iou = overlap_iou
        self.next_id = 1
        self.active: dict[int, dict] = {}  # id -> {mask, frame, empty}
        self.last_frame: Optional[int] = None

    def _compose(self, frame_id: int, shape, parts: dict) -> FineMask:
        raster = np.zeros(shape, dtype=np.int32)
        for oid in sorted(parts):
            m = parts[oid] & (raster == 0)
            raster[m] = oid
        return FineMask(frame_id, raster)

    def _spawn_new(self, frame_id: int, coarse, occupied: np.ndarray, shape) -> dict:
        if coarse is None:
            return {}
        prompts = seed_prompts(coarse, self.median_kernel)
        fresh_prompts = [p for p in prompts if not occupied[p.pixel[1], p.pixel[0]]]
        if not fresh_prompts:
            return {}
        try:
            segs = self.oracle.segment(frame_id, fresh_prompts)
        except Exception as exc:  # noqa: BLE001 - oracle boundary
            raise OracleFailure(str(exc)) from exc
        parts = {}
        claimed = occupied.copy()
        for seg in segs:
            if seg is None or not np.asarray(seg, bool).any():
                continue
            seg = np.asarray(seg, dtype=bool)
            if not validate_segment(seg, coarse, self.min_prompt_support, self.median_kernel):
                continue
            inter = np.logical_and(seg, claimed).sum()
            if inter > self.overlap_iou * seg.sum():
                continue  # already explained by an existing object
            oid = self.next_id
            self.next_id += 1
            parts[oid] = seg
            claimed |= seg
            self.active[oid] = {"mask": seg, "frame": frame_id, "empty": 0}
        return parts

    def init_frame(self, frame_id: int, coarse, shape) -> FineMask:
        parts = self._spawn_new(frame_id, coarse, np.zeros(shape, dtype=bool), shape)
        self.last_frame = frame_id
        return self._compose(frame_id, shape, parts)

    def step(self, frame_id: int, coarse, shape) -> FineMask:
        if self.last_frame is None:
            return self.init_frame(frame_id, coarse, shape)
        parts = {}
        if self.active:
            prior = {oid: st["mask"] for oid, st in self.active.items()}
            try:
                props = self.oracle.propagate(self.last_frame, frame_id, prior)
            except Exception as exc:  # noqa: BLE001 - oracle boundary
                raise OracleFailure(str(exc)) from exc
            for oid in list(self.active):
                m = np.asarray(props.get(oid, np.zeros(shape, bool)), dtype=bool)
                if m.any():
                    parts[oid] = m
                    self.active[oid] = {"mask": m, "frame": frame_id, "empty": 0}
                else:
                    self.active[oid]["empty"] += 1
                    if self.active[oid]["empty"] >= self.patience:
                        del self.active[oid]
        occupied = np.zeros(shape, dtype=bool)
        for m in parts.values():
            occupied |= m
        parts.update(self._spawn_new(frame_id, coarse, occupied, shape))
        self.last_frame = frame_id
        return self._compose(frame_id, shape, parts)


def init_fine_masks(frame_ids, coarse_masks: dict, oracle, shape, min_prompt_support: int = 1,
                    patience: int = DEFAULT_PATIENCE, median_kernel: int = 5):
    """Initialization phase over a window of frames.

    Returns (list of FineMask, MaskTracker) so incremental prediction can
    continue from the registry.
    """
    tracker = MaskTracker(oracle, min_prompt_support, patience, median_kernel)
    out = []
    for k, f in enumerate(frame_ids):
        coarse = coarse_masks.get(f) if isinstance(coarse_masks, dict) else coarse_masks[k]
        if k == 0:
            out.append(tracker.init_frame(f, coarse, shape))
        else:
            out.append(tracker.step(f, coarse, shape))
    return out, tracker


def extend_fine_masks(tracker: MaskTracker, frame_ids, coarse_masks: dict, shape):
    """Incremental prediction: propagate prior objects, add new ones."""
    out = []
    for f in frame_ids:
        coarse = coarse_masks.get(f) if isinstance(coarse_masks, dict) else None
        out.append(tracker.step(f, coarse, shape))
    return out
