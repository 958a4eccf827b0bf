"""Motion-scaffold graph: sparse node trajectories driving a dense motion field.

Each node carries a per-timestep rigid transform and an RBF radius. Query
points are warped between timesteps by dual-quaternion blending of the
relative node transforms over the nearest node's neighborhood, weighted by
normalized Gaussian RBFs. Geometry regularizers (rigidity, velocity,
acceleration) fill in node states at unobserved timesteps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from scipy.spatial import cKDTree

from .depth import DepthMap, sample_depth
from .errors import AllZeroWeights, MissingUpdate, NoVisibleTimestep
from .geometry import PinholeIntrinsics, RigidPose, backproject, dqb_blend
from .quats import dqb, qconj, qmul, qnormalize, qrot

DEFAULT_KNN = 8
DEFAULT_RADIUS_NEIGHBOR = 4


@dataclass
class Track3D:
    positions: np.ndarray  # (T, 3), interpolated where invisible
    visibility: np.ndarray  # (T,) bool
    source_id: int
    pixels: Optional[np.ndarray] = None  # (T, 2) source pixel trajectory

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.visibility = np.asarray(self.visibility, dtype=bool)
        if not self.visibility.any():
            raise NoVisibleTimestep(f"track {self.source_id} has no visible timestep")


@dataclass
class ScaffoldNode:
    """Spec-surface view of one node: per-timestep transforms plus RBF radius."""

    transforms: list
    radius: float


def _interp_gaps(values: np.ndarray, known: np.ndarray) -> np.ndarray:
    """Linear interpolation across unknown timesteps, constant at the ends."""
    t = np.arange(len(known))
    out = values.copy()
    if known.all():
        return out
    ki = t[known]
    for c in range(values.shape[1]):
        out[~known, c] = np.interp(t[~known], ki, values[known, c])
    return out


class ScaffoldGraph:
    """Node trajectories (M, T), kNN topology, radii, and observability."""

    def __init__(self, quats, trans, radii, neighbors, observed, source_pixels=None,
                 source_visibility=None, source_track=None):
        self.quats = torch.as_tensor(quats, dtype=torch.float64)  # (M, T, 4)
        self.trans = torch.as_tensor(trans, dtype=torch.float64)  # (M, T, 3)
        self.radii = np.asarray(radii, dtype=np.float64)  # (M,)
        self.neighbors = [np.asarray(n, dtype=np.int64) for n in neighbors]
        self.observed = np.asarray(observed, dtype=bool)  # (M, T)
        # per-node source pixel tracks, kept for re-anchoring and extension
        self.source_pixels = source_pixels  # (M, T, 2) or None
        self.source_visibility = source_visibility  # (M, T) bool or None
        self.source_track = None if source_track is None else np.asarray(source_track, dtype=np.int64)

    @property
    def num_nodes(self) -> int:
        return int(self.trans.shape[0])

    @property
    def num_timesteps(self) -> int:
        return int(self.trans.shape[1])

    def positions(self, t: int) -> np.ndarray:
        return self.trans[:, t].detach().numpy()

    def node(self, m: int) -> ScaffoldNode:
        q = self.quats[m].detach().numpy()
        tr = self.trans[m].detach().numpy()
        return ScaffoldNode([RigidPose(q[t], tr[t]) for t in range(self.num_timesteps)], float(self.radii[m]))

    def node_pose(self, m: int, t: int) -> RigidPose:
        return RigidPose(self.quats[m, t].detach().numpy(), self.trans[m, t].detach().numpy())

    def edge_array(self) -> np.ndarray:
        """All directed edges (m, n) from the symmetric adjacency, (E, 2)."""
        pairs = [(m, int(n)) for m in range(self.num_nodes) for n in self.neighbors[m]]
        if not pairs:
            return np.zeros((0, 2), dtype=np.int64)
        return np.asarray(pairs, dtype=np.int64)

    def clone(self) -> "ScaffoldGraph":
        return ScaffoldGraph(
            self.quats.detach().clone(),
            self.trans.detach().clone(),
            self.radii.copy(),
            [n.copy() for n in self.neighbors],
            self.observed.copy(),
            None if self.source_pixels is None else self.source_pixels.copy(),
            None if self.source_visibility is None else self.source_visibility.copy(),
            None if self.source_track is None else self.source_track.copy(),
        )


def lift_tracks(
    tracks2d: np.ndarray,
    visibility: np.ndarray,
    poses: list,
    depths: list,
    intrinsics: PinholeIntrinsics,
    masks: Optional[list] = None,
) -> list:
    """Back-project 2D pixel trajectories into per-timestep 3D tracks.

    tracks2d: (N, T, 2), visibility: (N, T). Depth lookups that fail (or land
    off the dynamic mask, when masks are given) demote the timestep to
    invisible. Gaps are linearly interpolated, ends held constant.
    """
    tracks2d = np.asarray(tracks2d, dtype=np.float64)
    visibility = np.asarray(visibility, dtype=bool)
    n, t_count = visibility.shape
    out = []
    for i in range(n):
        vis = visibility[i].copy()
        pos = np.zeros((t_count, 3))
        for t in range(t_count):
            if not vis[t]:
                continue
            xy = tracks2d[i, t]
            if masks is not None:
                xi = int(round(xy[0]))
                yi = int(round(xy[1]))
                m = masks[t]
                if not (0 <= yi < m.shape[0] and 0 <= xi < m.shape[1]) or not m[yi, xi]:
                    vis[t] = False
                    continue
            d, ok = sample_depth(depths[t], xy)
            if not ok:
                vis[t] = False
                continue
            pos[t] = backproject(poses[t], intrinsics, xy, 1.0 / float(d))
        if not vis.any():
            raise NoVisibleTimestep(f"track {i} has no liftable timestep")
        pos = _interp_gaps(pos, vis)
        out.append(Track3D(pos, vis, i, pixels=tracks2d[i].copy()))
    return out


def anchor_timestep(tracks: list) -> int:
    """Timestep with the most visible tracks (earliest on ties)."""
    t_count = len(tracks[0].visibility)
    counts = np.zeros(t_count, dtype=int)
    for tr in tracks:
        counts += tr.visibility.astype(int)
    return int(np.argmax(counts))


def farthest_point_sample(points: np.ndarray, target_count: int, min_separation: float) -> list:
    """Greedy FPS starting from index 0; stops when separation is violated."""
    n = points.shape[0]
    chosen = [0]
    if n == 1 or target_count <= 1:
        return chosen
    dist = np.linalg.norm(points - points[0], axis=1)
    while len(chosen) < min(target_count, n):
        nxt = int(np.argmax(dist))
        if dist[nxt] < min_separation:
            break
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return chosen


def _build_topology(positions: np.ndarray, k: int):
    m = positions.shape[0]
    neighbors = [set() for _ in range(m)]
    if m >= 2:
        tree = cKDTree(positions)
        kk = min(k + 1, m)
        _, idx = tree.query(positions, k=kk)
        idx = np.atleast_2d(idx)
        for a in range(m):
            for b in idx[a, 1:]:
                neighbors[a].add(int(b))
                neighbors[int(b)].add(a)
    return [np.array(sorted(s), dtype=np.int64) for s in neighbors]


def _default_radii(positions: np.ndarray, neighbor_rank: int) -> np.ndarray:
    m = positions.shape[0]
    if m == 1:
        return np.array([1.0])
    tree = cKDTree(positions)
    kk = min(neighbor_rank + 1, m)
    d, _ = tree.query(positions, k=kk)
    d = np.atleast_2d(d)
    radii = d[:, -1].astype(np.float64)
    floor = max(1e-6, float(np.median(radii[radii > 0])) * 1e-3) if (radii > 0).any() else 1e-6
    return np.maximum(radii, floor)


def sample_nodes(
    tracks: list,
    target_count: int,
    min_separation: float,
    knn: int = DEFAULT_KNN,
    radius_neighbor: int = DEFAULT_RADIUS_NEIGHBOR,
) -> ScaffoldGraph:
    """Subsample lifted tracks into scaffold nodes (translation-only init)."""
    if not tracks:
        raise NoVisibleTimestep("cannot sample nodes from zero tracks")
    t_anchor = anchor_timestep(tracks)
    pts = np.stack([tr.positions[t_anchor] for tr in tracks], axis=0)
    chosen = farthest_point_sample(pts, target_count, min_separation)

    t_count = tracks[0].positions.shape[0]
    m = len(chosen)
    quats = np.zeros((m, t_count, 4))
    quats[..., 0] = 1.0
    trans = np.stack([tracks[i].positions for i in chosen], axis=0)
    observed = np.stack([tracks[i].visibility for i in chosen], axis=0)
    pos_anchor = pts[chosen]
    neighbors = _build_topology(pos_anchor, knn)
    radii = _default_radii(pos_anchor, radius_neighbor)
    pixels = np.stack(
        [tracks[i].pixels if tracks[i].pixels is not None else np.zeros((t_count, 2)) for i in chosen], axis=0
    )
    track_ids = np.array([tracks[i].source_id for i in chosen], dtype=np.int64)
    return ScaffoldGraph(quats, trans, radii, neighbors, observed, pixels, observed.copy(), track_ids)


def skinning_weights(query: np.ndarray, graph: ScaffoldGraph, t_ref: int):
    """RBF weights over the nearest node's neighborhood at time t_ref.

    Returns (node_indices, weights); weights are positive and sum to one.
    """
    query = np.asarray(query, dtype=np.float64).reshape(3)
    pos = graph.positions(t_ref)
    d2_all = np.sum((pos - query) ** 2, axis=1)
    m_star = int(np.argmin(d2_all))
    hood = np.concatenate([[m_star], graph.neighbors[m_star]]).astype(np.int64)
    hood = np.unique(hood)
    d2 = d2_all[hood]
    a = d2 / (2.0 * graph.radii[hood] ** 2)
    w = np.exp(-(a - a.min()))
    w = w / w.sum()
    return hood, w


def warp_point(query, corrections, graph: ScaffoldGraph, t_src: int, t_dst: int) -> RigidPose:
    """Rigid transform carrying a point's neighborhood from t_src to t_dst."""
    hood, w = skinning_weights(query, graph, t_src)
    corrections = np.zeros(len(hood)) if corrections is None else np.asarray(corrections, dtype=np.float64)
    if corrections.shape != w.shape:
        raise ValueError("corrections length must match neighborhood size")
    w = np.maximum(w + corrections, 0.0)
    if w.sum() <= 0:
        raise AllZeroWeights("skinning weights all zero after correction clamp")
    rel = []
    for m in hood:
        src = graph.node_pose(int(m), t_src)
        dst = graph.node_pose(int(m), t_dst)
        rel.append(dst.compose(src.inverse()))
    return dqb_blend(w, rel)


def rbf_weights_t(query: torch.Tensor, node_pos: torch.Tensor, radii: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Differentiable normalized RBF weights.

    query (N, 3), node_pos (N, K, 3), radii (N, K), mask (N, K) in {0, 1}.
    """
    d2 = ((node_pos - query.unsqueeze(1)) ** 2).sum(dim=-1)
    a = d2 / (2.0 * radii**2)
    a_min = torch.where(mask > 0, a, torch.full_like(a, torch.inf)).min(dim=1, keepdim=True).values
    w = torch.exp(-(a - a_min)) * mask
    return w / w.sum(dim=1, keepdim=True).clamp_min(1e-300)


def warp_transforms_t(
    graph: ScaffoldGraph,
    nbr_idx: torch.Tensor,
    weights: torch.Tensor,
    t_src: torch.Tensor,
    t_dst: int,
    quats: Optional[torch.Tensor] = None,
    trans: Optional[torch.Tensor] = None,
):
    """Batched DQB warp: per-row blend of relative node transforms.

    nbr_idx (N, K) node indices, weights (N, K) nonnegative, t_src (N,) int.
    quats/trans override the graph tensors (used during optimization).
    Returns (q (N, 4), t (N, 3)).
    """
    gq = graph.quats if quats is None else quats
    gt = graph.trans if trans is None else trans
    ts = t_src.view(-1, 1).expand_as(nbr_idx)
    q_src = qnormalize(gq[nbr_idx, ts])
    t_src_v = gt[nbr_idx, ts]
    q_dst = qnormalize(gq[nbr_idx, t_dst])
    t_dst_v = gt[nbr_idx, t_dst]

    q_rel = qmul(q_dst, qconj(q_src))
    t_rel = t_dst_v - qrot(q_rel, t_src_v)
    return dqb(weights, q_rel, t_rel)


def _positions_from(trans: torch.Tensor) -> torch.Tensor:
    return trans


def arap_loss_t(graph: ScaffoldGraph, quats=None, trans=None) -> torch.Tensor:
    """Edge-length plus local-frame rigidity energy over adjacent timesteps."""
    gq = qnormalize(graph.quats if quats is None else quats)
    gt = graph.trans if trans is None else trans
    edges = graph.edge_array()
    if edges.shape[0] == 0 or graph.num_timesteps < 2:
        return torch.zeros((), dtype=torch.float64)
    pm = gt[edges[:, 0]]  # (E, T, 3)
    pn = gt[edges[:, 1]]
    diff = pn - pm
    length = diff.norm(dim=-1)
    term1 = (length[:, :-1] - length[:, 1:]) ** 2

    qm = gq[edges[:, 0]]  # (E, T, 4)
    local = qrot(qconj(qm), diff)
    term2 = ((local[:, :-1] - local[:, 1:]) ** 2).sum(dim=-1)
    return (term1 + term2).mean()


def velocity_loss_t(graph: ScaffoldGraph, trans=None) -> torch.Tensor:
    gt = graph.trans if trans is None else trans
    edges = graph.edge_array()
    if edges.shape[0] == 0 or graph.num_timesteps < 2:
        return torch.zeros((), dtype=torch.float64)
    vel = gt[:, 1:] - gt[:, :-1]
    dv = vel[edges[:, 0]] - vel[edges[:, 1]]
    return (dv**2).sum(dim=-1).mean()


def acceleration_loss_t(graph: ScaffoldGraph, trans=None) -> torch.Tensor:
    gt = graph.trans if trans is None else trans
    if graph.num_timesteps < 3:
        return torch.zeros((), dtype=torch.float64)
    acc = gt[:, 2:] - 2.0 * gt[:, 1:-1] + gt[:, :-2]
    return (acc**2).sum(dim=-1).mean()


def arap_loss(graph: ScaffoldGraph) -> float:
    if graph.num_nodes < 2:
        return 0.0
    return float(arap_loss_t(graph))


def velocity_loss(graph: ScaffoldGraph) -> float:
    return float(velocity_loss_t(graph))


def acceleration_loss(graph: ScaffoldGraph) -> float:
    return float(acceleration_loss_t(graph))


def geometry_energy_t(graph: ScaffoldGraph, quats=None, trans=None, weights=(1.0, 1.0, 1.0)) -> torch.Tensor:
    wa, wv, wc = weights
    return (
        wa * arap_loss_t(graph, quats, trans)
        + wv * velocity_loss_t(graph, trans)
        + wc * acceleration_loss_t(graph, trans)
    )


def optimize_geometry(graph: ScaffoldGraph, steps: int = 300, learn_rate: float = 1e-2, weights=(1.0, 1.0, 1.0)) -> ScaffoldGraph:
    """Descend the geometry energy on transforms at unobserved timesteps.

    Observed timesteps stay bit-identical. Steps that would increase the
    energy are rejected and the learning rate halved, so the accepted loss
    sequence is non-increasing.
    """
    free = ~graph.observed
    if not free.any() or graph.num_nodes < 2:
        return graph
    free_idx = torch.from_numpy(np.argwhere(free))  # (F, 2)
    fm, ft = free_idx[:, 0], free_idx[:, 1]

    base_q = graph.quats.detach().clone()
    base_t = graph.trans.detach().clone()
    pq = base_q[fm, ft].clone().requires_grad_(True)
    pt = base_t[fm, ft].clone().requires_grad_(True)

    def assemble():
        q = base_q.clone()
        t = base_t.clone()
        q[fm, ft] = pq
        t[fm, ft] = pt
        return q, t

    opt = torch.optim.Adam([pq, pt], lr=learn_rate)
    q, t = assemble()
    prev = geometry_energy_t(graph, q, t, weights)
    for _ in range(steps):
        opt.zero_grad()
        q, t = assemble()
        loss = geometry_energy_t(graph, q, t, weights)
        loss.backward()
        saved = (pq.detach().clone(), pt.detach().clone())
        opt.step()
        with torch.no_grad():
            q, t = assemble()
            new_loss = geometry_energy_t(graph, q, t, weights)
            if not torch.isfinite(new_loss) or new_loss > prev:
                pq.copy_(saved[0])
                pt.copy_(saved[1])
                for g in opt.param_groups:
                    g["lr"] *= 0.5
            else:
                prev = new_loss

    with torch.no_grad():
        graph.quats[fm, ft] = qnormalize(pq.detach())
        graph.trans[fm, ft] = pt.detach()
    return graph


def reanchor(
    graph: ScaffoldGraph,
    intrinsics: PinholeIntrinsics,
    old_poses: dict,
    old_depths: dict,
    new_poses: dict,
    new_depths: dict,
) -> ScaffoldGraph:
    """Shift node trajectories to follow updated pose/depth estimates.

    Observed timesteps move by (new lift - old lift) of the node's source
    pixel; unobserved timesteps receive linearly interpolated offsets, so an
    identity update leaves the graph bit-identical and optimized unobserved
    states are preserved up to the interpolated correction.
    """
    if graph.source_pixels is None or graph.source_visibility is None:
        raise MissingUpdate("graph has no source pixel anchors")
    t_count = graph.num_timesteps
    offsets = np.zeros((graph.num_nodes, t_count, 3))
    for m in range(graph.num_nodes):
        vis = graph.source_visibility[m]
        known = np.zeros(t_count, dtype=bool)
        off = np.zeros((t_count, 3))
        for t in range(t_count):
            if not vis[t]:
                continue
            if t not in new_poses or t not in new_depths:
                raise MissingUpdate(f"no updated pose/depth for frame {t}")
            if t not in old_poses or t not in old_depths:
                raise MissingUpdate(f"no prior pose/depth for frame {t}")
            xy = graph.source_pixels[m, t]
            d_old, ok_old = sample_depth(old_depths[t], xy)
            d_new, ok_new = sample_depth(new_depths[t], xy)
            if not (ok_old and ok_new):
                continue
            p_old = backproject(old_poses[t], intrinsics, xy, 1.0 / float(d_old))
            p_new = backproject(new_poses[t], intrinsics, xy, 1.0 / float(d_new))
            off[t] = p_new - p_old
            known[t] = True
        if known.any():
            offsets[m] = _interp_gaps(off, known)
    with torch.no_grad():
        graph.trans += torch.from_numpy(offsets)
    return graph


def extend_timesteps(graph: ScaffoldGraph, new_t_count: int) -> ScaffoldGraph:
    """Grow the time axis; new entries repeat the last state, unobserved."""
    t_old = graph.num_timesteps
    if new_t_count <= t_old:
        return graph
    extra = new_t_count - t_old
    with torch.no_grad():
        graph.quats = torch.cat([graph.quats, graph.quats[:, -1:].repeat(1, extra, 1)], dim=1)
        graph.trans = torch.cat([graph.trans, graph.trans[:, -1:].repeat(1, extra, 1)], dim=1)
    graph.observed = np.concatenate([graph.observed, np.zeros((graph.num_nodes, extra), dtype=bool)], axis=1)
    if graph.source_pixels is not None:
        graph.source_pixels = np.concatenate(
            [graph.source_pixels, np.repeat(graph.source_pixels[:, -1:], extra, axis=1)], axis=1
        )
    if graph.source_visibility is not None:
        graph.source_visibility = np.concatenate(
            [graph.source_visibility, np.zeros((graph.num_nodes, extra), dtype=bool)], axis=1
        )
    return graph


def add_nodes(graph: ScaffoldGraph, tracks: list, min_separation: float, target_count: int,
              knn: int = DEFAULT_KNN, radius_neighbor: int = DEFAULT_RADIUS_NEIGHBOR) -> ScaffoldGraph:
    """Append nodes sampled from new tracks; existing nodes keep their state.

    New candidates are FPS-filtered against each other and rejected when they
    fall within min_separation of an existing node at the anchor time.
    """
    if not tracks:
        return graph
    t_anchor = anchor_timestep(tracks)
    pts = np.stack([tr.positions[t_anchor] for tr in tracks], axis=0)
    order = farthest_point_sample(pts, target_count, min_separation)
    existing = graph.positions(t_anchor)
    chosen = []
    for i in order:
        d = np.linalg.norm(existing - pts[i], axis=1).min() if existing.shape[0] else np.inf
        dn = min((np.linalg.norm(pts[j] - pts[i]) for j in chosen), default=np.inf)
        if d >= min_separation and dn >= min_separation:
            chosen.append(i)
    if not chosen:
        return graph
    t_count = graph.num_timesteps
    m_new = len(chosen)
    quats = np.zeros((m_new, t_count, 4))
    quats[..., 0] = 1.0
    trans = np.stack([tracks[i].positions[:t_count] for i in chosen], axis=0)
    observed = np.stack([tracks[i].visibility[:t_count] for i in chosen], axis=0)
    pixels = np.stack(
        [tracks[i].pixels[:t_count] if tracks[i].pixels is not None else np.zeros((t_count, 2)) for i in chosen],
        axis=0,
    )

    m_old = graph.num_nodes
    with torch.no_grad():
        graph.quats = torch.cat([graph.quats, torch.from_numpy(quats)], dim=0)
        graph.trans = torch.cat([graph.trans, torch.from_numpy(trans)], dim=0)
    graph.observed = np.concatenate([graph.observed, observed], axis=0)
    if graph.source_pixels is not None:
        graph.source_pixels = np.concatenate([graph.source_pixels, pixels], axis=0)
    if graph.source_visibility is not None:
        graph.source_visibility = np.concatenate([graph.source_visibility, observed.copy()], axis=0)
    if graph.source_track is not None:
        track_ids = np.array([tracks[i].source_id for i in chosen], dtype=np.int64)
        graph.source_track = np.concatenate([graph.source_track, track_ids])

    # existing adjacency is never rewired; new nodes link to their k nearest
    # among all nodes, with back-edges added to keep the adjacency symmetric
    all_pos = graph.positions(t_anchor)
    adjacency = [set(n.tolist()) for n in graph.neighbors] + [set() for _ in chosen]
    tree = cKDTree(all_pos)
    for j in range(m_new):
        node_id = m_old + j
        kk = min(knn + 1, graph.num_nodes)
        _, idx = tree.query(all_pos[node_id], k=kk)
        for b in np.atleast_1d(idx):
            b = int(b)
            if b == node_id:
                continue
            adjacency[node_id].add(b)
            adjacency[b].add(node_id)
    graph.neighbors = [np.array(sorted(s), dtype=np.int64) for s in adjacency]
    new_radii = _default_radii(all_pos, radius_neighbor)[m_old:]
    graph.radii = np.concatenate([graph.radii, new_radii])
    return graph
