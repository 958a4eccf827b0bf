"""Static and dynamic map optimization.

Gaussians are seeded from back-projected depth (static: masked static pixels;
dynamic: masked dynamic pixels attached to their nearest scaffold node), then
optimized photometrically with an L1 color loss, an L1 depth loss against the
aligned depth, a Huber track-reprojection loss, the dynamic-opacity-over-
static mask penalty, and the scaffold geometry regularizers. Static maps
deform rigidly with their anchor keyframes when the tracker revises poses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .depth import DepthMap
from .errors import EmptyMask, MissingAnchor, NonFiniteLoss, NoStaticPixels
from .geometry import PinholeIntrinsics, RigidPose, quat_multiply, quat_to_matrix, matrix_to_quat
from .quats import qnormalize, qrot, qconj, qmul
from .scaffold import (
    ScaffoldGraph,
    acceleration_loss_t,
    arap_loss_t,
    rbf_weights_t,
    skinning_weights,
    velocity_loss_t,
)
from .splatting import DynamicCloud, GaussianCloud, render, warp_dynamic

HUBER_DELTA = 2.0  # px


@dataclass
class LossWeights:
    rgb: float = 1.0
    depth: float = 0.5
    track: float = 0.1
    mask: float = 1.0
    arap: float = 0.2
    vel: float = 0.1
    acc: float = 0.1


@dataclass
class FrameTarget:
    t: int
    pose: RigidPose
    image: np.ndarray  # (H, W, 3)
    fine_mask: np.ndarray  # (H, W) bool, 1 = dynamic
    depth: Optional[DepthMap] = None  # supervision target for rendered depth


@dataclass
class GaussianMap:
    static: GaussianCloud
    dynamic: DynamicCloud
    static_anchor_frame: np.ndarray  # (Ns,)
    static_anchor_px: np.ndarray  # (Ns, 2) int
    scaffold: Optional[ScaffoldGraph] = None

    @staticmethod
    def empty() -> "GaussianMap":
        return GaussianMap(
            GaussianCloud.empty(), DynamicCloud.empty(),
            np.zeros(0, dtype=int), np.zeros((0, 2), dtype=int),
        )


def _footprint_scales(depth: np.ndarray, sel: np.ndarray, intrinsics: PinholeIntrinsics, stride: int):
    """Per-pixel world-space footprint from depth and its local gradient."""
    dzdy, dzdx = np.gradient(depth)
    z = depth[sel]
    sx = stride * np.sqrt((z / intrinsics.fx) ** 2 + dzdx[sel] ** 2)
    sy = stride * np.sqrt((z / intrinsics.fy) ** 2 + dzdy[sel] ** 2)
    sz = 0.5 * np.minimum(sx, sy)
    return np.stack([sx, sy, np.maximum(sz, 1e-6)], axis=-1)


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


def init_static(entries, intrinsics: PinholeIntrinsics, stride: int = 2, init_opacity: float = 0.1):
    """Seed static Gaussians from keyframe depth at strided static pixels.

    entries: iterable of (frame_id, pose, DepthMap, static_sel, image).
    Returns (GaussianCloud, anchor_frame (N,), anchor_px (N, 2)).
    """
    means, quats, log_scales, logits, colors = [], [], [], [], []
    anchor_f, anchor_px = [], []
    for frame_id, pose, depth_map, static_sel, image in entries:
        sel = np.zeros_like(static_sel, dtype=bool)
        sel[::stride, ::stride] = True
        sel &= np.asarray(static_sel, dtype=bool) & depth_map.validity
        if not sel.any():
            continue
        ys, xs = np.nonzero(sel)
        z = depth_map.depth[sel]
        rays = intrinsics.unproject_dirs(np.stack([xs, ys], axis=-1).astype(np.float64))
        pts = pose.apply(rays * z[:, None])
        means.append(pts)
        n = pts.shape[0]
        q = np.zeros((n, 4))
        q[:, 0] = 1.0
        quats.append(q)
        log_scales.append(np.log(_footprint_scales(depth_map.depth, sel, intrinsics, stride)))
        logits.append(np.full(n, _logit(init_opacity)))
        colors.append(image[sel])
        anchor_f.append(np.full(n, frame_id, dtype=int))
        anchor_px.append(np.stack([xs, ys], axis=-1))
    if not means:
        raise NoStaticPixels("no valid static pixels to seed from")
    cloud = GaussianCloud(
        np.concatenate(means), np.concatenate(quats), np.concatenate(log_scales),
        np.concatenate(logits), np.concatenate(colors),
    )
    return cloud, np.concatenate(anchor_f), np.concatenate(anchor_px)


def init_dynamic(entries, scaffold: ScaffoldGraph, intrinsics: PinholeIntrinsics,
                 stride: int = 2, init_opacity: float = 0.3) -> DynamicCloud:
    """Seed dynamic Gaussians at strided masked pixels, one per pixel.

    entries: iterable of (t, pose, DepthMap, dynamic_sel, image). Each
    Gaussian stores its state in the local frame of the nearest scaffold node
    at its reference time; empty selections yield an empty cloud.
    """
    means_l, quats_l, scales_l, logits_l, colors_l = [], [], [], [], []
    anchor, t_ref, nbrs, dws = [], [], [], []
    for t, pose, depth_map, dyn_sel, image in entries:
        if dyn_sel is None:
            raise EmptyMask(f"frame {t}: no fine mask available")
        sel = np.zeros_like(dyn_sel, dtype=bool)
        sel[::stride, ::stride] = True
        sel &= np.asarray(dyn_sel, dtype=bool) & depth_map.validity
        if not sel.any():
            continue
        ys, xs = np.nonzero(sel)
        z = depth_map.depth[sel]
        rays = intrinsics.unproject_dirs(np.stack([xs, ys], axis=-1).astype(np.float64))
        pts = pose.apply(rays * z[:, None])
        for k in range(pts.shape[0]):
            hood, _ = skinning_weights(pts[k], scaffold, t)
            m_star = int(hood[np.argmin(np.linalg.norm(scaffold.positions(t)[hood] - pts[k], axis=1))])
            node = scaffold.node_pose(m_star, t)
            inv = node.inverse()
            means_l.append(inv.apply(pts[k]))
            quats_l.append(quat_multiply(inv.rotation, np.array([1.0, 0, 0, 0])))
            anchor.append(m_star)
            t_ref.append(t)
            nbrs.append(hood)
        scales = _footprint_scales(depth_map.depth, sel, intrinsics, stride)
        scales_l.append(np.log(scales))
        logits_l.append(np.full(pts.shape[0], _logit(init_opacity)))
        colors_l.append(image[sel])
    if not means_l:
        return DynamicCloud.empty()

    kmax = max(len(h) for h in nbrs)
    n = len(means_l)
    nbr_idx = np.zeros((n, kmax), dtype=np.int64)
    nbr_mask = np.zeros((n, kmax))
    for i, h in enumerate(nbrs):
        nbr_idx[i, : len(h)] = h
        nbr_idx[i, len(h):] = h[0] if len(h) else 0
        nbr_mask[i, : len(h)] = 1.0
    local = GaussianCloud(
        np.stack(means_l), np.stack(quats_l), np.concatenate(scales_l),
        np.concatenate(logits_l), np.concatenate(colors_l),
    )
    return DynamicCloud(local, np.array(anchor), np.array(t_ref), nbr_idx, nbr_mask, np.zeros((n, kmax)))


def mask_loss(dynamic_opacity, fine_mask) -> float:
    """Mean rendered dynamic opacity over static pixels (0 when none)."""
    return float(mask_loss_t(torch.as_tensor(dynamic_opacity, dtype=torch.float64),
                             np.asarray(fine_mask, dtype=bool)))


def mask_loss_t(opacity_t: torch.Tensor, fine_mask: np.ndarray) -> torch.Tensor:
    static = torch.from_numpy(~np.asarray(fine_mask, dtype=bool))
    if not bool(static.any()):
        return torch.zeros((), dtype=torch.float64)
    return opacity_t[static].mean()


def _huber(err_norm: torch.Tensor, delta: float = HUBER_DELTA) -> torch.Tensor:
    quad = 0.5 * err_norm**2
    lin = delta * (err_norm - 0.5 * delta)
    return torch.where(err_norm <= delta, quad, lin)


def track_loss(warped_points, observed_px, visibility, poses, intrinsics: PinholeIntrinsics) -> float:
    """Mean Huber reprojection error of warped track points at visible steps.

    warped_points: (N, T, 3) world points, observed_px: (N, T, 2),
    visibility: (N, T) bool, poses: list of T camera-to-world poses.
    """
    warped = torch.as_tensor(np.asarray(warped_points, dtype=np.float64))
    obs = torch.as_tensor(np.asarray(observed_px, dtype=np.float64))
    vis = np.asarray(visibility, dtype=bool)
    total = torch.zeros((), dtype=torch.float64)
    count = 0
    for t, pose in enumerate(poses):
        m = vis[:, t]
        if not m.any():
            continue
        total = total + _track_residual_t(warped[m, t], obs[m, t], pose, intrinsics).sum()
        count += int(m.sum())
    return float(total / count) if count else 0.0


def _track_residual_t(points_t: torch.Tensor, obs_t: torch.Tensor, pose: RigidPose,
                      intrinsics: PinholeIntrinsics) -> torch.Tensor:
    r_wc = torch.from_numpy(pose.rotation_matrix().T.copy())
    t_wc = -r_wc @ torch.from_numpy(pose.translation.copy())
    cam = points_t @ r_wc.T + t_wc
    z = cam[:, 2].clamp_min(1e-6)
    px = torch.stack(
        [intrinsics.fx * cam[:, 0] / z + intrinsics.cx, intrinsics.fy * cam[:, 1] / z + intrinsics.cy],
        dim=-1,
    )
    return _huber((px - obs_t).norm(dim=-1))


@dataclass
class TrackSupervision:
    """2D track observations tied to scaffold skinning for L_track."""

    anchors: np.ndarray  # (N, 3) lifted positions at anchor time
    anchor_t: np.ndarray  # (N,)
    nbr_idx: np.ndarray  # (N, K)
    nbr_mask: np.ndarray  # (N, K)
    observed: np.ndarray  # (N, T, 2)
    visibility: np.ndarray  # (N, T)

    @staticmethod
    def from_tracks(tracks, scaffold: ScaffoldGraph, t_count: int):
        anchors, anchor_t, nbrs = [], [], []
        obs = np.zeros((len(tracks), t_count, 2))
        vis = np.zeros((len(tracks), t_count), dtype=bool)
        for i, tr in enumerate(tracks):
            t0 = int(np.argmax(tr.visibility))
            anchors.append(tr.positions[t0])
            anchor_t.append(t0)
            hood, _ = skinning_weights(tr.positions[t0], scaffold, t0)
            nbrs.append(hood)
            steps = min(t_count, tr.positions.shape[0])
            if tr.pixels is not None:
                obs[i, :steps] = tr.pixels[:steps]
            vis[i, :steps] = tr.visibility[:steps]
        kmax = max(len(h) for h in nbrs) if nbrs else 1
        nbr_idx = np.zeros((len(tracks), kmax), dtype=np.int64)
        nbr_mask = np.zeros((len(tracks), kmax))
        for i, h in enumerate(nbrs):
            nbr_idx[i, : len(h)] = h
            nbr_idx[i, len(h):] = h[0] if len(h) else 0
            nbr_mask[i, : len(h)] = 1.0
        return TrackSupervision(np.stack(anchors) if anchors else np.zeros((0, 3)),
                                np.array(anchor_t, dtype=int), nbr_idx, nbr_mask, obs, vis)


class PhotometricOptimizer:
    """Adam over the parameter groups of the map and scaffold."""

    def __init__(self, gmap: GaussianMap, scaffold: Optional[ScaffoldGraph], lrs: dict):
        self.map = gmap
        self.scaffold = scaffold
        self.lrs = dict(lrs)
        groups = []
        s = gmap.static
        if len(s):
            groups += [
                {"params": [s.means.requires_grad_(True)], "lr": lrs["means"]},
                {"params": [s.quats.requires_grad_(True)], "lr": lrs["quats"]},
                {"params": [s.log_scales.requires_grad_(True)], "lr": lrs["scales"]},
                {"params": [s.opacity_logits.requires_grad_(True)], "lr": lrs["opacities"]},
                {"params": [s.colors.requires_grad_(True)], "lr": lrs["colors"]},
            ]
        d = gmap.dynamic
        if len(d):
            groups += [
                {"params": [d.local.means.requires_grad_(True)], "lr": lrs["means"]},
                {"params": [d.local.quats.requires_grad_(True)], "lr": lrs["quats"]},
                {"params": [d.local.log_scales.requires_grad_(True)], "lr": lrs["scales"]},
                {"params": [d.local.opacity_logits.requires_grad_(True)], "lr": lrs["opacities"]},
                {"params": [d.local.colors.requires_grad_(True)], "lr": lrs["colors"]},
                {"params": [d.corrections.requires_grad_(True)], "lr": lrs["corrections"]},
            ]
        if scaffold is not None and scaffold.num_nodes > 0 and len(d):
            groups += [
                {"params": [scaffold.quats.requires_grad_(True)], "lr": lrs["nodes"]},
                {"params": [scaffold.trans.requires_grad_(True)], "lr": lrs["nodes"]},
            ]
        self.opt = torch.optim.Adam(groups) if groups else None
        self.step_count = 0

    def halve_lr(self):
        if self.opt is None:
            return
        for g in self.opt.param_groups:
            g["lr"] *= 0.5

    def release(self):
        """Drop grad tracking so the tensors can be used in no-grad contexts."""
        for cloud in (self.map.static, self.map.dynamic.local):
            for f in GaussianCloud.FIELDS:
                getattr(cloud, f).requires_grad_(False)
        self.map.dynamic.corrections.requires_grad_(False)
        if self.scaffold is not None:
            self.scaffold.quats.requires_grad_(False)
            self.scaffold.trans.requires_grad_(False)


def _total_loss(gmap: GaussianMap, scaffold: Optional[ScaffoldGraph], frames, weights: LossWeights,
                intrinsics: PinholeIntrinsics, tracks: Optional[TrackSupervision]):
    terms = {
        "rgb": torch.zeros((), dtype=torch.float64),
        "depth": torch.zeros((), dtype=torch.float64),
        "track": torch.zeros((), dtype=torch.float64),
        "mask": torch.zeros((), dtype=torch.float64),
        "arap": torch.zeros((), dtype=torch.float64),
        "vel": torch.zeros((), dtype=torch.float64),
        "acc": torch.zeros((), dtype=torch.float64),
    }
    n_frames = max(len(frames), 1)
    for target in frames:
        clouds = [gmap.static] if len(gmap.static) else []
        dyn_cloud = None
        if len(gmap.dynamic) and scaffold is not None:
            dyn_cloud = warp_dynamic(gmap.dynamic, scaffold, target.t)
            clouds.append(dyn_cloud)
        full = GaussianCloud.cat(clouds) if clouds else GaussianCloud.empty()
        out = render(full, target.pose, intrinsics)
        color_t, depth_t, _ = out.torch_maps()
        img = torch.from_numpy(np.asarray(target.image, dtype=np.float64))
        terms["rgb"] = terms["rgb"] + (color_t - img).abs().mean() / n_frames
        if target.depth is not None and weights.depth > 0:
            valid = torch.from_numpy(target.depth.validity)
            if bool(valid.any()):
                ref = torch.from_numpy(target.depth.depth)
                terms["depth"] = terms["depth"] + (depth_t - ref)[valid].abs().mean() / n_frames
        if dyn_cloud is not None and weights.mask > 0:
            dyn_out = render(dyn_cloud, target.pose, intrinsics)
            _, _, dyn_o = dyn_out.torch_maps()
            terms["mask"] = terms["mask"] + mask_loss_t(dyn_o, target.fine_mask) / n_frames

    if tracks is not None and scaffold is not None and tracks.anchors.shape[0] and weights.track > 0:
        from .scaffold import warp_transforms_t

        anchors = torch.from_numpy(tracks.anchors)
        nbr_idx = torch.from_numpy(tracks.nbr_idx)
        nbr_mask = torch.from_numpy(tracks.nbr_mask)
        anchor_t = torch.from_numpy(tracks.anchor_t.astype(np.int64))
        ts = anchor_t.view(-1, 1).expand_as(nbr_idx)
        node_pos = scaffold.trans[nbr_idx, ts]
        radii = torch.as_tensor(scaffold.radii, dtype=torch.float64)[nbr_idx]
        base_w = rbf_weights_t(anchors, node_pos, radii, nbr_mask)
        total = torch.zeros((), dtype=torch.float64)
        count = 0
        for target in frames:
            m = tracks.visibility[:, target.t]
            if not m.any():
                continue
            sel = torch.from_numpy(np.nonzero(m)[0])
            q_w, t_w = warp_transforms_t(scaffold, nbr_idx[sel], base_w[sel], anchor_t[sel], target.t)
            pts = qrot(q_w, anchors[sel]) + t_w
            obs_t = torch.from_numpy(tracks.observed[m, target.t])
            total = total + _track_residual_t(pts, obs_t, target.pose, intrinsics).sum()
            count += int(m.sum())
        if count:
            terms["track"] = total / count

    if scaffold is not None and scaffold.num_nodes >= 2 and len(gmap.dynamic):
        terms["arap"] = arap_loss_t(scaffold)
        terms["vel"] = velocity_loss_t(scaffold)
        terms["acc"] = acceleration_loss_t(scaffold)

    total = (
        weights.rgb * terms["rgb"]
        + weights.depth * terms["depth"]
        + weights.track * terms["track"]
        + weights.mask * terms["mask"]
        + weights.arap * terms["arap"]
        + weights.vel * terms["vel"]
        + weights.acc * terms["acc"]
    )
    return total, terms


def photometric_step(gmap: GaussianMap, scaffold: Optional[ScaffoldGraph], frames, weights: LossWeights,
                     state: PhotometricOptimizer, intrinsics: PinholeIntrinsics,
                     tracks: Optional[TrackSupervision] = None) -> dict:
    """One optimization step; returns the per-term loss report.

    A non-finite total aborts the step and halves every learning rate (the
    report carries "aborted": True in that case).
    """
    if state.opt is None:
        return {"total": 0.0, "aborted": False}
    state.opt.zero_grad()
    total, terms = _total_loss(gmap, scaffold, frames, weights, intrinsics, tracks)
    report = {k: float(v.detach()) for k, v in terms.items()}
    report["total"] = float(total.detach())
    if not torch.isfinite(total):
        state.halve_lr()
        report["aborted"] = True
        return report
    total.backward()
    state.opt.step()
    state.step_count += 1
    report["aborted"] = False
    return report


def deform_static(gmap: GaussianMap, intrinsics: PinholeIntrinsics, old_ctx: dict, new_ctx: dict):
    """Re-anchor static Gaussians after a pose/depth update.

    old_ctx/new_ctx: frame_id -> (pose, DepthMap). Means transport relatively
    (mu' = bp_new + R_rel (mu - bp_old)), rotations compose with the relative
    pose correction, so an identity update is a no-op and the inverse update
    restores the map exactly.
    """
    from .depth import sample_depth

    cloud = gmap.static
    if len(cloud) == 0:
        return
    means = cloud.means.detach().numpy().copy()
    quats = cloud.quats.detach().numpy().copy()
    for frame_id in np.unique(gmap.static_anchor_frame):
        if frame_id not in old_ctx or frame_id not in new_ctx:
            raise MissingAnchor(f"no pose/depth for anchor keyframe {frame_id}")
        pose_old, depth_old = old_ctx[frame_id]
        pose_new, depth_new = new_ctx[frame_id]
        sel = np.nonzero(gmap.static_anchor_frame == frame_id)[0]
        px = gmap.static_anchor_px[sel].astype(np.float64)
        d_old, ok_old = sample_depth(depth_old, px)
        d_new, ok_new = sample_depth(depth_new, px)
        ok = ok_old & ok_new
        if not ok.any():
            continue
        sel = sel[ok]
        rays = intrinsics.unproject_dirs(px[ok])
        bp_old = pose_old.apply(rays * d_old[ok][:, None])
        bp_new = pose_new.apply(rays * d_new[ok][:, None])
        rel = pose_new.compose(pose_old.inverse())
        r_rel = quat_to_matrix(rel.rotation)
        means[sel] = bp_new + (means[sel] - bp_old) @ r_rel.T
        for i in sel:
            quats[i] = quat_multiply(rel.rotation, quats[i])
    with torch.no_grad():
        cloud.means.copy_(torch.from_numpy(means))
        cloud.quats.copy_(torch.from_numpy(quats))


def prune(gmap: GaussianMap, min_opacity: float = 0.005):
    """Drop Gaussians whose decoded opacity fell below min_opacity."""
    thresh = _logit(min_opacity) if 0 < min_opacity < 1 else -np.inf
    keep_s = (gmap.static.opacity_logits.detach() > thresh).numpy()
    if not keep_s.all():
        idx = np.nonzero(keep_s)[0]
        gmap.static = gmap.static.select(idx).detached_clone()
        gmap.static_anchor_frame = gmap.static_anchor_frame[idx]
        gmap.static_anchor_px = gmap.static_anchor_px[idx]
    d = gmap.dynamic
    if len(d):
        keep_d = (d.local.opacity_logits.detach() > thresh).numpy()
        if not keep_d.all():
            idx = torch.from_numpy(np.nonzero(keep_d)[0])
            gmap.dynamic = DynamicCloud(
                d.local.select(idx).detached_clone(),
                d.anchor_node[idx], d.t_ref[idx], d.nbr_idx[idx],
                d.nbr_mask[idx], d.corrections.detach()[idx].clone(),
            )
    return gmap
