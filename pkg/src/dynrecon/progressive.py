"""Progressive batch pipeline.

Frames arrive in batches. Each batch extends the keyframe graph and runs
masked DBA, refines per-frame fine masks, derives non-keyframe poses and
dense depth, extends 2D tracks (three tracking passes: extension, newly-seen
queries, density replenishment), lifts them to 3D, warps newborn tracks into
the past with the previous scaffold, grows the scaffold and the Gaussian map
(dynamic Gaussians only at newly-seen pixels), re-anchors everything to the
tracker's latest estimates, and finishes with geometry + photometric
optimization. State checkpoints round-trip bit-exactly.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from scipy.spatial import cKDTree

from .config import RunConfig
from .depth import DepthMap, align_mono_depth, interpolate_sparse_depth, multiview_consistency, reproject_depth
from .errors import DynreconError
from .geometry import PinholeIntrinsics, RigidPose
from .masking import FineMask, MaskTracker, adapt_threshold, median_filter
from .metrics import Trajectory
from .reconstruction import (
    FrameTarget,
    GaussianMap,
    LossWeights,
    PhotometricOptimizer,
    TrackSupervision,
    init_dynamic,
    init_static,
    photometric_step,
    prune,
    deform_static,
)
from .scaffold import (
    ScaffoldGraph,
    Track3D,
    add_nodes,
    extend_timesteps,
    lift_tracks,
    optimize_geometry,
    reanchor,
    sample_nodes,
)
from .splatting import GaussianCloud, render
from .synthetic import Dataset, OracleBundle
from .tracking import FactorGraph, FlowObservation, dba_solve, normalized_residual_magnitude, coarse_mask, solve_nonkeyframe_pose

log = logging.getLogger("dynrecon")


@dataclass
class BatchWindow:
    new_frames: list
    overlap_frames: list

    def __post_init__(self):
        if self.overlap_frames and self.new_frames:
            if self.overlap_frames[-1] + 1 != self.new_frames[0]:
                raise ValueError("overlap frames must immediately precede new frames")

    @property
    def frames(self) -> list:
        return list(self.overlap_frames) + list(self.new_frames)


@dataclass
class TrackStatus:
    track_id: int
    status: str  # recently_visible | retired | new


def classify_tracks(visibility: np.ndarray, first_visible: np.ndarray, window: BatchWindow,
                    min_visible: int = 4) -> list:
    """Track triage on the overlap window: visible >= min_visible of the
    overlap frames -> recently_visible; born inside the new window -> new."""
    out = []
    overlap = window.overlap_frames
    for i in range(visibility.shape[0]):
        if window.new_frames and first_visible[i] >= window.new_frames[0]:
            out.append(TrackStatus(i, "new"))
            continue
        count = int(sum(visibility[i, f] for f in overlap if f < visibility.shape[1]))
        out.append(TrackStatus(i, "recently_visible" if count >= min_visible else "retired"))
    return out


def detect_newly_seen(points: np.ndarray, track_points: np.ndarray, r_search: float) -> np.ndarray:
    """True where a back-projected point has no lifted track within r_search."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if track_points.size == 0:
        return np.ones(points.shape[0], dtype=bool)
    tree = cKDTree(np.asarray(track_points, dtype=np.float64).reshape(-1, 3))
    d, _ = tree.query(points, k=1)
    return d > r_search


@dataclass
class PipelineState:
    config: RunConfig
    dataset: Dataset
    oracles: OracleBundle

    graph: FactorGraph = None
    kf_of_frame: dict = field(default_factory=dict)
    poses: dict = field(default_factory=dict)  # frame -> RigidPose
    depths: dict = field(default_factory=dict)  # frame -> DepthMap (dense)
    fine_masks: dict = field(default_factory=dict)  # frame -> FineMask
    mask_tracker: MaskTracker = None
    quantile: float = 0.2

    tracks2d: np.ndarray = None  # (N, T, 2)
    track_vis: np.ndarray = None  # (N, T)
    track_first: np.ndarray = None  # (N,) first visible frame
    lifted: list = field(default_factory=list)

    scaffold: Optional[ScaffoldGraph] = None
    gmap: GaussianMap = None
    track_sup: Optional[TrackSupervision] = None

    newly_seen_px: dict = field(default_factory=dict)
    processed: int = 0
    batch_index: int = 0
    loss_trace: list = field(default_factory=list)

    @property
    def intrinsics(self) -> PinholeIntrinsics:
        return self.dataset.intrinsics

    def trajectory(self) -> Trajectory:
        frames = sorted(self.poses)
        return Trajectory(np.array(frames, dtype=np.float64), [self.poses[f] for f in frames])


def _stage(state: PipelineState, name: str, t0: float):
    log.info("batch=%d stage=%s ms=%.1f", state.batch_index, name, 1e3 * (time.time() - t0))


# --- tracking front-end -------------------------------------------------------


def _sensor_depth(state: PipelineState, f: int) -> DepthMap:
    return DepthMap.dense(f, state.dataset.depths[f])


def _select_new_keyframes(state: PipelineState, frames) -> list:
    cfg = state.config
    last_kf = state.graph.keyframes[-1].frame_id if state.graph.keyframes else None
    chosen = []
    for f in frames:
        if last_kf is None:
            chosen.append(f)
            last_kf = f
            continue
        if state.oracles.flow.mean_flow_magnitude(last_kf, f) >= cfg.keyframe_threshold:
            chosen.append(f)
            last_kf = f
    return chosen


def _add_keyframes(state: PipelineState, kf_frames) -> list:
    cfg = state.config
    g = state.graph
    new_ids = []
    for f in kf_frames:
        if cfg.mode == "rgbd":
            disparity = 1.0 / np.maximum(state.dataset.depths[f], 1e-6)
        else:
            if g.keyframes:
                disparity = g.keyframes[-1].disparity.copy()
            else:
                disparity = np.ones((state.intrinsics.height, state.intrinsics.width))
        pose = g.keyframes[-1].pose if g.keyframes else state.dataset.pose(0)
        kf_id = g.add_keyframe(f, pose, disparity, image=state.dataset.images[f])
        state.kf_of_frame[f] = kf_id
        new_ids.append(kf_id)
    for kf_id in new_ids:
        for other in range(len(g.keyframes)):
            if other == kf_id or abs(other - kf_id) > cfg.edge_radius:
                continue
            fa = g.keyframes[kf_id].frame_id
            fb = g.keyframes[other].frame_id
            if not any(e.source_kf == kf_id and e.target_kf == other for e in g.edges):
                flow, conf = state.oracles.flow.flow(fa, fb)
                g.add_edge(FlowObservation(kf_id, other, flow, conf))
            if not any(e.source_kf == other and e.target_kf == kf_id for e in g.edges):
                flow, conf = state.oracles.flow.flow(fb, fa)
                g.add_edge(FlowObservation(other, kf_id, flow, conf))
    return new_ids


def _fine_suppressions(state: PipelineState) -> dict:
    sup = {}
    for f, kf_id in state.kf_of_frame.items():
        fm = state.fine_masks.get(f)
        if fm is not None:
            sup[kf_id] = fm.mask.astype(np.float64)
    return sup


def _refine_and_solve(state: PipelineState, frames):
    """Masked DBA with coarse-mask refinement, then fine masks, then DBA."""
    cfg = state.config
    g = state.graph
    masks = _fine_suppressions(state)
    coarse = {}
    for _ in range(cfg.refinement_rounds):
        dba_solve(g, masks=masks or None, iterations=cfg.dba_iterations, damping=cfg.damping)
        coarse = {}
        for k in range(len(g.keyframes)):
            if not g.targets_of(k):
                continue
            fld = normalized_residual_magnitude(g, k)
            coarse[k] = coarse_mask(fld, state.quantile)
        masks = {k: median_filter(c.mask, cfg.median_kernel).astype(np.float64) for k, c in coarse.items()}
        masks.update(_fine_suppressions(state))

    # fine masks for frames not yet covered, in temporal order (new keyframes
    # seed new objects, other frames extend by propagation)
    prev_fine = state.fine_masks.get(max(state.fine_masks)) if state.fine_masks else None
    state.quantile = adapt_threshold(prev_fine, cfg.quantile, cfg.adapt_margin)
    shape = (state.intrinsics.height, state.intrinsics.width)
    for f in frames:
        if f in state.fine_masks:
            continue
        kf_id = state.kf_of_frame.get(f)
        c = coarse.get(kf_id).mask if kf_id is not None and kf_id in coarse else None
        state.fine_masks[f] = state.mask_tracker.step(f, c, shape)

    dba_solve(g, masks=_fine_suppressions(state) or None, iterations=cfg.dba_iterations, damping=cfg.damping)
    for f, kf_id in state.kf_of_frame.items():
        state.poses[f] = g.keyframes[kf_id].pose


def _neighbor_keyframes(state: PipelineState, f: int):
    kf_frames = sorted(state.kf_of_frame)
    before = [k for k in kf_frames if k <= f]
    after = [k for k in kf_frames if k > f]
    if before and after:
        return before[-1], after[0]
    if len(before) >= 2:
        return before[-2], before[-1]
    return after[0], after[1]


def _solve_nonkeyframe_poses(state: PipelineState, frames):
    for f in frames:
        if f in state.kf_of_frame:
            continue
        ka, kb = _neighbor_keyframes(state, f)
        flows = {}
        for kf_frame in (ka, kb):
            kf_id = state.kf_of_frame[kf_frame]
            flows[kf_id] = state.oracles.flow.flow(kf_frame, f)
        sup = _fine_suppressions(state)
        a, b = state.kf_of_frame[ka], state.kf_of_frame[kb]
        pa = state.graph.keyframes[a].pose
        pb = state.graph.keyframes[b].pose
        wa = 0.5 if ka == kb else (kb - f) / (kb - ka)
        init = RigidPose(pa.rotation if wa >= 0.5 else pb.rotation,
                         wa * pa.translation + (1 - wa) * pb.translation)
        state.poses[f] = solve_nonkeyframe_pose(
            state.graph, (a, b), flows, init_pose=init,
            masks={k: sup[k] for k in (a, b) if k in sup} or None,
        )


def _dense_depths(state: PipelineState, frames):
    """Dense per-frame depth: sensor in rgbd mode, aligned mono in rgb mode."""
    cfg = state.config
    K = state.intrinsics
    for f in frames:
        if cfg.mode == "rgbd":
            state.depths[f] = _sensor_depth(state, f)
            continue
        ka, kb = _neighbor_keyframes(state, f)
        neigh = []
        ids = (state.kf_of_frame[ka], state.kf_of_frame[kb])
        valid_ab = multiview_consistency(
            state.graph.keyframes[ids[0]].pose, state.graph.keyframes[ids[0]].disparity,
            state.graph.keyframes[ids[1]].pose, state.graph.keyframes[ids[1]].disparity, K,
        )
        valid_ba = multiview_consistency(
            state.graph.keyframes[ids[1]].pose, state.graph.keyframes[ids[1]].disparity,
            state.graph.keyframes[ids[0]].pose, state.graph.keyframes[ids[0]].disparity, K,
        )
        for kf_frame, valid in ((ka, valid_ab), (kb, valid_ba)):
            kf = state.graph.keyframes[state.kf_of_frame[kf_frame]]
            dyn = state.fine_masks[kf_frame].mask if kf_frame in state.fine_masks else np.zeros(valid.shape, bool)
            neigh.append((kf.pose, kf.disparity, dyn, valid))
        try:
            px, z = reproject_depth(state.poses[f], K, neigh)
            repro = interpolate_sparse_depth(px, z, (K.height, K.width), frame_id=f)
            mono = DepthMap.dense(f, state.oracles.monodepth.depth(f))
            _, aligned = align_mono_depth(mono, repro)
            state.depths[f] = aligned
        except DynreconError:
            state.depths[f] = DepthMap.dense(f, state.oracles.monodepth.depth(f))


# --- track management ----------------------------------------------------------


def _append_tracks(state: PipelineState, tracks: np.ndarray, vis: np.ndarray, first: np.ndarray):
    if tracks.shape[0] == 0:
        return
    if state.tracks2d is None or state.tracks2d.shape[0] == 0:
        state.tracks2d = tracks
        state.track_vis = vis
        state.track_first = first
        return
    state.tracks2d = np.concatenate([state.tracks2d, tracks], axis=0)
    state.track_vis = np.concatenate([state.track_vis, vis], axis=0)
    state.track_first = np.concatenate([state.track_first, first])


def _grow_time_axis(state: PipelineState, t_new: int):
    if state.tracks2d is None:
        state.tracks2d = np.zeros((0, t_new, 2))
        state.track_vis = np.zeros((0, t_new), dtype=bool)
        state.track_first = np.zeros(0, dtype=int)
        return
    t_old = state.tracks2d.shape[1]
    if t_new <= t_old:
        return
    pad = t_new - t_old
    state.tracks2d = np.pad(state.tracks2d, ((0, 0), (0, pad), (0, 0)))
    state.track_vis = np.pad(state.track_vis, ((0, 0), (0, pad)))


def _track_points_at(state: PipelineState, t: int) -> np.ndarray:
    if not state.lifted:
        return np.zeros((0, 3))
    return np.stack([tr.positions[t] for tr in state.lifted])


def _query_grid(state: PipelineState, f: int, stride: int, dedup_px: float, exclude_near_tracks: bool):
    """Strided dynamic-region query pixels, deduplicated against live tracks."""
    mask = state.fine_masks[f].mask
    ys, xs = np.nonzero(mask)
    keep = (ys % stride == 0) & (xs % stride == 0)
    pts = np.stack([xs[keep], ys[keep]], axis=-1).astype(np.float64)
    if pts.shape[0] == 0 or not exclude_near_tracks or state.tracks2d is None or state.tracks2d.shape[0] == 0:
        return pts
    live = state.track_vis[:, f]
    if not live.any():
        return pts
    tree = cKDTree(state.tracks2d[live, f])
    d, _ = tree.query(pts, k=1)
    return pts[d > dedup_px]


def _run_tracker(state: PipelineState, queries: np.ndarray, query_frame: int, frames):
    """Query the track oracle and scatter results into the global arrays."""
    if queries.shape[0] == 0:
        return 0
    tr, vis = state.oracles.tracker.track(queries, query_frame, frames)
    t_total = state.tracks2d.shape[1]
    full_tr = np.zeros((queries.shape[0], t_total, 2))
    full_vis = np.zeros((queries.shape[0], t_total), dtype=bool)
    for fi, f in enumerate(frames):
        full_tr[:, f] = tr[:, fi]
        full_vis[:, f] = vis[:, fi]
    first = np.array([int(np.argmax(v)) if v.any() else query_frame for v in full_vis])
    ok = full_vis.any(axis=1)
    _append_tracks(state, full_tr[ok], full_vis[ok], first[ok])
    return int(ok.sum())


def _extend_recent_tracks(state: PipelineState, window: BatchWindow, statuses):
    frames = window.frames
    for st in statuses:
        if st.status != "recently_visible":
            continue
        i = st.track_id
        vis_frames = [f for f in window.overlap_frames if state.track_vis[i, f]]
        if not vis_frames:
            continue
        qf = vis_frames[-1]
        tr, vis = state.oracles.tracker.track(state.tracks2d[i, qf][None], qf, frames)
        for fi, f in enumerate(frames):
            if f in window.new_frames:
                state.tracks2d[i, f] = tr[0, fi]
                state.track_vis[i, f] = vis[0, fi]


def _lift_all_tracks(state: PipelineState):
    """(Re-)lift every track against current poses/depths; keep warped pasts."""
    if state.tracks2d is None or state.tracks2d.shape[0] == 0:
        state.lifted = []
        return
    t_total = state.processed
    poses = [state.poses[f] for f in range(t_total)]
    depths = [state.depths[f] for f in range(t_total)]
    lifted = lift_tracks(
        state.tracks2d[:, :t_total], state.track_vis[:, :t_total], poses, depths, state.intrinsics
    )
    # tracks born mid-sequence keep their scaffold-warped past positions
    for i, tr in enumerate(lifted):
        if state.lifted and i < len(state.lifted):
            old = state.lifted[i]
            n_old = min(old.positions.shape[0], t_total)
            keep = (~tr.visibility[:n_old]) & (np.arange(n_old) < state.track_first[i])
            tr.positions[:n_old][keep] = old.positions[:n_old][keep]
    state.lifted = lifted


def _warp_new_tracks_to_past(state: PipelineState, prev_scaffold: Optional[ScaffoldGraph], window: BatchWindow):
    """Carry newborn tracks into past timesteps with the previous scaffold."""
    if prev_scaffold is None or not window.new_frames or state.tracks2d is None:
        return
    from .scaffold import warp_point

    t_start = window.new_frames[0]
    t_prev = prev_scaffold.num_timesteps
    for i, tr in enumerate(state.lifted):
        if state.track_first[i] < t_start:
            continue
        t0 = int(state.track_first[i])
        src = min(t0, t_prev - 1)
        anchor = tr.positions[t0]
        for t in range(min(t_start, t_prev)):
            pose = warp_point(anchor, None, prev_scaffold, src, t)
            tr.positions[t] = pose.apply(anchor)


def warp_tracks_to_past(tracks: list, prev_scaffold: ScaffoldGraph, window_start: int) -> list:
    """Spec surface: fill past positions of window-born tracks via DQB."""
    from .scaffold import warp_point

    t_prev = prev_scaffold.num_timesteps
    for tr in tracks:
        t0 = int(np.argmax(tr.visibility))
        if t0 < window_start:
            continue
        src = min(t0, t_prev - 1)
        anchor = tr.positions[t0]
        for t in range(min(window_start, t_prev)):
            pose = warp_point(anchor, None, prev_scaffold, src, t)
            tr.positions[t] = pose.apply(anchor)
    return tracks


def multi_stage_tracking(state: PipelineState, window: BatchWindow, statuses) -> dict:
    """Three tracking passes: extension, newly-seen queries, densification."""
    cfg = state.config
    frames = window.frames
    counts = {"extended": 0, "newly_seen": 0, "replenished": 0}

    _extend_recent_tracks(state, window, statuses)
    counts["extended"] = sum(1 for s in statuses if s.status == "recently_visible")
    _lift_all_tracks(state)

    # pass 2: newly-seen spherical search per new frame
    K = state.intrinsics
    newly_seen_px = {}
    for f in window.new_frames:
        mask = state.fine_masks[f].mask & state.depths[f].validity
        ys, xs = np.nonzero(mask)
        if ys.size == 0:
            newly_seen_px[f] = np.zeros((0, 2))
            continue
        px = np.stack([xs, ys], axis=-1).astype(np.float64)
        z = state.depths[f].depth[ys, xs]
        pts = state.poses[f].apply(K.unproject_dirs(px) * z[:, None])
        fresh = detect_newly_seen(pts, _track_points_at(state, f), cfg.r_search)
        newly_seen_px[f] = px[fresh]
        queries = px[fresh][:: max(1, cfg.seed_stride)]
        n = _run_tracker(state, queries, f, frames)
        counts["newly_seen"] += n

    # pass 3: stride grid over dynamic regions, deduplicated against live tracks
    for f in window.new_frames:
        queries = _query_grid(state, f, cfg.track_grid_stride, cfg.track_dedup_px, True)
        counts["replenished"] += _run_tracker(state, queries, f, frames)

    _lift_all_tracks(state)
    state.newly_seen_px = newly_seen_px
    return counts


# --- map growth -----------------------------------------------------------------


def _covered_mask(state: PipelineState, f: int) -> np.ndarray:
    """Pixels of frame f already backed by a static Gaussian (geometric test)."""
    K = state.intrinsics
    covered = np.zeros((K.height, K.width), dtype=bool)
    if not len(state.gmap.static):
        return covered
    means = state.gmap.static.means.detach().numpy()
    cam = state.poses[f].inverse().apply(means)
    z = cam[:, 2]
    front = z > 1e-6
    xs = np.round(K.fx * cam[front, 0] / z[front] + K.cx).astype(int)
    ys = np.round(K.fy * cam[front, 1] / z[front] + K.cy).astype(int)
    ok = (xs >= 0) & (xs < K.width) & (ys >= 0) & (ys < K.height)
    covered[ys[ok], xs[ok]] = True
    # a seed covers its stride neighborhood
    r = max(1, state.config.seed_stride)
    covered = ndimage_binary_dilation(covered, r)
    return covered


def ndimage_binary_dilation(mask: np.ndarray, radius: int) -> np.ndarray:
    from scipy import ndimage

    size = 2 * radius + 1
    return ndimage.maximum_filter(mask.astype(np.uint8), size=size) > 0


def _static_entries(state: PipelineState, kf_frames, only_uncovered: bool):
    entries = []
    for f in kf_frames:
        image = state.dataset.images[f]
        depth = state.depths[f]
        static_sel = ~state.fine_masks[f].mask
        if only_uncovered:
            static_sel = static_sel & ~_covered_mask(state, f)
        entries.append((f, state.poses[f], depth, static_sel, image))
    return entries


def _extend_scaffold(state: PipelineState, statuses, t_new: int):
    cfg = state.config
    scaffold = state.scaffold
    t_old = scaffold.num_timesteps
    extend_timesteps(scaffold, t_new)
    retired = {s.track_id for s in statuses if s.status == "retired"}
    with torch.no_grad():
        for m in range(scaffold.num_nodes):
            src = int(scaffold.source_track[m]) if scaffold.source_track is not None else -1
            if src < 0 or src >= len(state.lifted):
                continue
            if src in retired:
                # frozen: hold the last state, marked observed so geometry
                # optimization and re-anchoring leave it alone
                scaffold.observed[m, t_old:] = True
                continue
            tr = state.lifted[src]
            scaffold.trans[m, t_old:] = torch.from_numpy(tr.positions[t_old:t_new])
            scaffold.observed[m, t_old:] = tr.visibility[t_old:t_new]
            scaffold.source_pixels[m, t_old:] = state.tracks2d[src, t_old:t_new]
            scaffold.source_visibility[m, t_old:] = tr.visibility[t_old:t_new]

    new_track_ids = [s.track_id for s in statuses if s.status == "new"]
    new_tracks = [state.lifted[i] for i in new_track_ids if i < len(state.lifted)]
    if new_tracks:
        add_nodes(scaffold, new_tracks, cfg.node_separation, cfg.node_count, cfg.knn)


# --- optimization ---------------------------------------------------------------


def _photometric_phase(state: PipelineState, steps: int):
    cfg = state.config
    weights = LossWeights(cfg.lambda_rgb, cfg.lambda_depth, cfg.lambda_track, cfg.lambda_mask,
                          cfg.lambda_arap, cfg.lambda_vel, cfg.lambda_acc)
    lrs = {
        "means": cfg.lr_means, "quats": cfg.lr_quats, "scales": cfg.lr_scales,
        "opacities": cfg.lr_opacities, "colors": cfg.lr_colors,
        "nodes": cfg.lr_nodes, "corrections": cfg.lr_corrections,
    }
    holdout = set()
    if cfg.holdout_stride > 1:
        holdout = {f for f in range(state.processed) if f % cfg.holdout_stride == cfg.holdout_stride - 1}
    train_frames = [f for f in range(state.processed) if f not in holdout]
    if not train_frames:
        return
    if state.scaffold is not None and len(state.lifted):
        state.track_sup = TrackSupervision.from_tracks(state.lifted, state.scaffold, state.processed)

    opt = PhotometricOptimizer(state.gmap, state.scaffold, lrs)
    done = 0
    while done < steps:
        seg = min(cfg.prune_interval, steps - done)
        for k in range(seg):
            f = train_frames[(done + k) % len(train_frames)]
            target = FrameTarget(
                f, state.poses[f], state.dataset.images[f],
                state.fine_masks[f].mask, state.depths[f],
            )
            report = photometric_step(state.gmap, state.scaffold, [target], weights, opt,
                                      state.intrinsics, state.track_sup)
            report["step"] = done + k
            report["batch"] = state.batch_index
            state.loss_trace.append(report)
        done += seg
        if done < steps and cfg.prune_opacity > 0:
            opt.release()
            prune(state.gmap, cfg.prune_opacity)
            opt = PhotometricOptimizer(state.gmap, state.scaffold, lrs)
    opt.release()


# --- batch driver ---------------------------------------------------------------


def bootstrap(dataset: Dataset, config: RunConfig, oracles: Optional[OracleBundle] = None) -> PipelineState:
    oracles = oracles or OracleBundle.for_dataset(dataset)
    state = PipelineState(config.validate(), dataset, oracles)
    state.graph = FactorGraph(dataset.intrinsics)
    state.mask_tracker = MaskTracker(oracles.segmenter, config.min_prompt_support, config.patience,
                                     config.median_kernel)
    state.quantile = config.quantile
    state.gmap = GaussianMap.empty()
    frames = list(range(min(config.batch_size, dataset.frames)))
    return process_batch(state, frames)


def process_batch(state: PipelineState, new_frames) -> PipelineState:
    cfg = state.config
    new_frames = list(new_frames)
    if not new_frames:
        return state
    t_new = new_frames[-1] + 1
    is_bootstrap = state.processed == 0
    overlap = list(range(max(0, new_frames[0] - cfg.overlap), new_frames[0]))
    window = BatchWindow(new_frames, overlap)

    old_kf_ctx = {
        state.graph.keyframes[k].frame_id: (state.graph.keyframes[k].pose,
                                            state.depths[state.graph.keyframes[k].frame_id])
        for k in range(len(state.graph.keyframes))
        if state.graph.keyframes[k].frame_id in state.depths
    }
    old_poses = dict(state.poses)
    old_depths = dict(state.depths)

    t0 = time.time()
    kf_frames = _select_new_keyframes(state, new_frames)
    if is_bootstrap and not kf_frames:
        kf_frames = [new_frames[0]]
    if is_bootstrap and len(kf_frames) < 2 and len(new_frames) > 1:
        kf_frames = sorted(set(kf_frames) | {new_frames[-1]})
    _add_keyframes(state, kf_frames)
    _stage(state, "keyframes", t0)

    t0 = time.time()
    _refine_and_solve(state, window.frames if not is_bootstrap else new_frames)
    _stage(state, "dba", t0)

    t0 = time.time()
    state.processed = t_new
    _solve_nonkeyframe_poses(state, new_frames)
    _dense_depths(state, new_frames)
    _stage(state, "poses_depths", t0)

    t0 = time.time()
    prev_scaffold = state.scaffold.clone() if state.scaffold is not None else None
    _grow_time_axis(state, t_new)
    if is_bootstrap:
        statuses = []
        for f in new_frames:
            queries = _query_grid(state, f, cfg.track_grid_stride, cfg.track_dedup_px, True)
            _run_tracker(state, queries, f, new_frames)
            _lift_all_tracks(state)
        state.newly_seen_px = {}
    else:
        statuses = classify_tracks(state.track_vis, state.track_first, window, cfg.recently_visible_min)
        multi_stage_tracking(state, window, statuses)
        _warp_new_tracks_to_past(state, prev_scaffold, window)
    _stage(state, "tracks", t0)

    t0 = time.time()
    has_dynamics = state.tracks2d is not None and state.tracks2d.shape[0] > 0
    if has_dynamics and state.scaffold is None:
        state.scaffold = sample_nodes(state.lifted, cfg.node_count, cfg.node_separation, cfg.knn)
    elif has_dynamics and state.scaffold is not None:
        _extend_scaffold(state, statuses, t_new)

    if state.scaffold is not None and not is_bootstrap:
        new_kf_ctx = {f: (state.poses[f], state.depths[f]) for f in old_kf_ctx}
        old_all = {f: old_poses[f] for f in old_poses}
        new_all = {f: state.poses[f] for f in old_poses}
        reanchor(state.scaffold, state.intrinsics, old_all, old_depths, new_all,
                 {f: state.depths[f] for f in old_depths})
        if len(state.gmap.static) and old_kf_ctx:
            deform_static(state.gmap, state.intrinsics, old_kf_ctx, new_kf_ctx)

    if state.scaffold is not None:
        optimize_geometry(state.scaffold, cfg.geometry_steps, cfg.geometry_lr)
    _stage(state, "scaffold", t0)

    t0 = time.time()
    for f in kf_frames:
        # seed keyframes one at a time so each sees the coverage of the last
        try:
            cloud, af, apx = init_static(_static_entries(state, [f], only_uncovered=True),
                                         state.intrinsics, cfg.seed_stride, cfg.init_opacity)
        except DynreconError:
            continue
        state.gmap.static = GaussianCloud.cat([state.gmap.static.detached_clone(), cloud])
        state.gmap.static_anchor_frame = np.concatenate([state.gmap.static_anchor_frame, af])
        state.gmap.static_anchor_px = np.concatenate([state.gmap.static_anchor_px, apx])

    if state.scaffold is not None:
        entries = []
        if is_bootstrap:
            for f in new_frames:
                entries.append((f, state.poses[f], state.depths[f], state.fine_masks[f].mask,
                                state.dataset.images[f]))
        else:
            for f in new_frames:
                sel = np.zeros((state.intrinsics.height, state.intrinsics.width), dtype=bool)
                px = state.newly_seen_px.get(f, np.zeros((0, 2)))
                if px.shape[0]:
                    sel[px[:, 1].astype(int), px[:, 0].astype(int)] = True
                entries.append((f, state.poses[f], state.depths[f], sel, state.dataset.images[f]))
        fresh = init_dynamic(entries, state.scaffold, state.intrinsics, cfg.seed_stride, 0.3)
        if len(fresh):
            state.gmap.dynamic = _cat_dynamic(state.gmap.dynamic, fresh)
        state.gmap.scaffold = state.scaffold
    _stage(state, "seed", t0)

    t0 = time.time()
    _photometric_phase(state, cfg.photometric_steps)
    _stage(state, "photometric", t0)

    # canonical dict orders so a save/load round trip replays identically
    state.poses = {f: state.poses[f] for f in sorted(state.poses)}
    state.depths = {f: state.depths[f] for f in sorted(state.depths)}
    state.fine_masks = {f: state.fine_masks[f] for f in sorted(state.fine_masks)}
    state.batch_index += 1
    return state


# --- checkpointing ----------------------------------------------------------------


def save_state(path, state: PipelineState):
    """Serialize the full pipeline state (dataset excluded) to one .npz."""
    from dataclasses import asdict

    from .io import save_checkpoint

    g = state.graph
    arrays = {
        "kf_frames": np.array([kf.frame_id for kf in g.keyframes], dtype=np.int64),
        "kf_poses": np.stack([np.concatenate([kf.pose.rotation, kf.pose.translation]) for kf in g.keyframes])
        if g.keyframes else np.zeros((0, 7)),
        "kf_disparity": np.stack([kf.disparity for kf in g.keyframes]) if g.keyframes else np.zeros((0, 1, 1)),
        "kf_validity": np.stack([kf.validity for kf in g.keyframes]) if g.keyframes else np.zeros((0, 1, 1), bool),
        "edge_pairs": np.array([[e.source_kf, e.target_kf] for e in g.edges], dtype=np.int64).reshape(-1, 2),
        "pose_frames": np.array(sorted(state.poses), dtype=np.int64),
        "poses": np.stack([np.concatenate([state.poses[f].rotation, state.poses[f].translation])
                           for f in sorted(state.poses)]) if state.poses else np.zeros((0, 7)),
        "depth_vals": np.stack([state.depths[f].depth for f in sorted(state.depths)])
        if state.depths else np.zeros((0, 1, 1)),
        "depth_valid": np.stack([state.depths[f].validity for f in sorted(state.depths)])
        if state.depths else np.zeros((0, 1, 1), bool),
        "fine_masks": np.stack([state.fine_masks[f].object_ids for f in sorted(state.fine_masks)])
        if state.fine_masks else np.zeros((0, 1, 1), np.int32),
    }
    mt = state.mask_tracker
    ids = sorted(mt.active) if mt is not None else []
    arrays["tracker_ids"] = np.array(ids, dtype=np.int64)
    arrays["tracker_masks"] = (
        np.stack([mt.active[i]["mask"] for i in ids]) if ids else np.zeros((0, 1, 1), bool)
    )
    arrays["tracker_meta"] = np.array(
        [[mt.active[i]["frame"], mt.active[i]["empty"]] for i in ids], dtype=np.int64
    ).reshape(-1, 2)

    if state.tracks2d is not None:
        arrays["tracks2d"] = state.tracks2d
        arrays["track_vis"] = state.track_vis
        arrays["track_first"] = state.track_first
        arrays["lifted_pos"] = np.stack([tr.positions for tr in state.lifted]) if state.lifted else np.zeros((0, 0, 3))
        arrays["lifted_vis"] = np.stack([tr.visibility for tr in state.lifted]) if state.lifted else np.zeros((0, 0), bool)

    sc = state.scaffold
    if sc is not None:
        arrays["sc_quats"] = sc.quats.detach().numpy()
        arrays["sc_trans"] = sc.trans.detach().numpy()
        arrays["sc_radii"] = sc.radii
        arrays["sc_observed"] = sc.observed
        arrays["sc_edges"] = sc.edge_array()
        arrays["sc_src_px"] = sc.source_pixels
        arrays["sc_src_vis"] = sc.source_visibility
        arrays["sc_src_track"] = sc.source_track if sc.source_track is not None else np.zeros(0, np.int64)

    gm = state.gmap
    for name in GaussianCloud.FIELDS:
        arrays[f"st_{name}"] = getattr(gm.static, name).detach().numpy()
    arrays["st_anchor_f"] = gm.static_anchor_frame
    arrays["st_anchor_px"] = gm.static_anchor_px
    for name in GaussianCloud.FIELDS:
        arrays[f"dy_{name}"] = getattr(gm.dynamic.local, name).detach().numpy()
    arrays["dy_anchor"] = gm.dynamic.anchor_node.numpy()
    arrays["dy_tref"] = gm.dynamic.t_ref.numpy()
    arrays["dy_nbr"] = gm.dynamic.nbr_idx.numpy()
    arrays["dy_nbr_mask"] = gm.dynamic.nbr_mask.detach().numpy()
    arrays["dy_corr"] = gm.dynamic.corrections.detach().numpy()

    meta = {
        "config": asdict(state.config),
        "quantile": state.quantile,
        "processed": state.processed,
        "batch_index": state.batch_index,
        "kf_of_frame": sorted(state.kf_of_frame.items()),
        "tracker_next_id": mt.next_id if mt is not None else 1,
        "tracker_last_frame": mt.last_frame if mt is not None else None,
        "has_scaffold": sc is not None,
        "has_tracks": state.tracks2d is not None,
    }
    save_checkpoint(path, arrays, meta)


def load_state(path, dataset: Dataset, oracles: Optional[OracleBundle] = None) -> PipelineState:
    """Rebuild pipeline state from a checkpoint plus the original dataset."""
    from .io import load_checkpoint
    from .splatting import DynamicCloud

    arrays, meta = load_checkpoint(path)
    cfg = RunConfig(**meta["config"])
    oracles = oracles or OracleBundle.for_dataset(dataset)
    state = PipelineState(cfg, dataset, oracles)
    state.quantile = float(meta["quantile"])
    state.processed = int(meta["processed"])
    state.batch_index = int(meta["batch_index"])

    g = FactorGraph(dataset.intrinsics)
    for k in range(arrays["kf_frames"].shape[0]):
        pv = arrays["kf_poses"][k]
        f = int(arrays["kf_frames"][k])
        g.add_keyframe(f, RigidPose(pv[:4], pv[4:]), arrays["kf_disparity"][k],
                       image=dataset.images[f], validity=arrays["kf_validity"][k])
    for i, j in arrays["edge_pairs"]:
        fa, fb = g.keyframes[int(i)].frame_id, g.keyframes[int(j)].frame_id
        flow, conf = oracles.flow.flow(fa, fb)
        g.add_edge(FlowObservation(int(i), int(j), flow, conf))
    state.graph = g
    state.kf_of_frame = {int(f): int(k) for f, k in meta["kf_of_frame"]}

    for idx, f in enumerate(arrays["pose_frames"]):
        pv = arrays["poses"][idx]
        state.poses[int(f)] = RigidPose(pv[:4], pv[4:])
        state.depths[int(f)] = DepthMap(int(f), arrays["depth_vals"][idx], arrays["depth_valid"][idx])
        state.fine_masks[int(f)] = FineMask(int(f), arrays["fine_masks"][idx])

    state.mask_tracker = MaskTracker(oracles.segmenter, cfg.min_prompt_support, cfg.patience, cfg.median_kernel)
    state.mask_tracker.next_id = int(meta["tracker_next_id"])
    state.mask_tracker.last_frame = meta["tracker_last_frame"]
    for n, oid in enumerate(arrays["tracker_ids"]):
        state.mask_tracker.active[int(oid)] = {
            "mask": arrays["tracker_masks"][n],
            "frame": int(arrays["tracker_meta"][n, 0]),
            "empty": int(arrays["tracker_meta"][n, 1]),
        }

    if meta["has_tracks"]:
        state.tracks2d = arrays["tracks2d"]
        state.track_vis = arrays["track_vis"]
        state.track_first = arrays["track_first"]
        state.lifted = [
            Track3D(arrays["lifted_pos"][i], arrays["lifted_vis"][i], i, pixels=state.tracks2d[i].copy())
            for i in range(arrays["lifted_pos"].shape[0])
        ]

    if meta["has_scaffold"]:
        m = arrays["sc_quats"].shape[0]
        adjacency = [set() for _ in range(m)]
        for a, b in arrays["sc_edges"]:
            adjacency[int(a)].add(int(b))
        neighbors = [np.array(sorted(s), dtype=np.int64) for s in adjacency]
        state.scaffold = ScaffoldGraph(
            arrays["sc_quats"], arrays["sc_trans"], arrays["sc_radii"], neighbors,
            arrays["sc_observed"], arrays["sc_src_px"], arrays["sc_src_vis"],
            arrays["sc_src_track"] if arrays["sc_src_track"].size else None,
        )

    static = GaussianCloud(*(arrays[f"st_{name}"] for name in GaussianCloud.FIELDS))
    dynamic = DynamicCloud(
        GaussianCloud(*(arrays[f"dy_{name}"] for name in GaussianCloud.FIELDS)),
        arrays["dy_anchor"], arrays["dy_tref"], arrays["dy_nbr"],
        arrays["dy_nbr_mask"], arrays["dy_corr"],
    )
    state.gmap = GaussianMap(static, dynamic, arrays["st_anchor_f"], arrays["st_anchor_px"], state.scaffold)
    return state


def _cat_dynamic(a, b):
    from .splatting import DynamicCloud

    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    kmax = max(a.nbr_idx.shape[1], b.nbr_idx.shape[1])

    def padded(d):
        k = d.nbr_idx.shape[1]
        if k == kmax:
            return d.nbr_idx, d.nbr_mask, d.corrections
        pad = kmax - k
        idx = torch.cat([d.nbr_idx, d.nbr_idx[:, :1].repeat(1, pad)], dim=1)
        msk = torch.cat([d.nbr_mask, torch.zeros(len(d), pad, dtype=torch.float64)], dim=1)
        cor = torch.cat([d.corrections, torch.zeros(len(d), pad, dtype=torch.float64)], dim=1)
        return idx, msk, cor

    ia, ma, ca = padded(a)
    ib, mb, cb = padded(b)
    return DynamicCloud(
        GaussianCloud.cat([a.local.detached_clone(), b.local.detached_clone()]),
        torch.cat([a.anchor_node, b.anchor_node]),
        torch.cat([a.t_ref, b.t_ref]),
        torch.cat([ia, ib]),
        torch.cat([ma, mb]),
        torch.cat([ca.detach(), cb.detach()]),
    )


def run_pipeline(dataset: Dataset, config: RunConfig, oracles: Optional[OracleBundle] = None) -> PipelineState:
    """Bootstrap plus batches until the sequence is consumed."""
    state = bootstrap(dataset, config, oracles)
    while state.processed < dataset.frames:
        nxt = list(range(state.processed, min(state.processed + config.batch_size, dataset.frames)))
        state = process_batch(state, nxt)
    return state
