"""Keyframe factor graph, masked dense bundle adjustment, and motion masks.

The graph stores camera-to-world poses and per-pixel disparities per
keyframe, with dense flow observations on directed edges. DBA minimizes the
weighted flow-reprojection error with Levenberg-Marquardt, eliminating the
per-pixel disparity block through its diagonal Schur complement. Motion
masks enter purely as confidence suppression: weight = confidence x (1 -
suppression), recomputed from the flow residual after each refinement round.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import MissingEdge, NoConnectedEdges, SingularNormalEquations
from .geometry import MIN_DEPTH, PinholeIntrinsics, RigidPose, rotvec_to_quat

MIN_DISPARITY = 1e-6


@dataclass
class FlowObservation:
    source_kf: int
    target_kf: int
    predicted_pixels: np.ndarray  # (H, W, 2) absolute target coords
    confidence: np.ndarray  # (H, W) in [0, 1]

    def __post_init__(self):
        self.predicted_pixels = np.asarray(self.predicted_pixels, dtype=np.float64)
        self.confidence = np.clip(np.asarray(self.confidence, dtype=np.float64), 0.0, 1.0)
        if self.predicted_pixels.shape[:2] != self.confidence.shape:
            raise ValueError("flow and confidence rasters disagree in shape")


@dataclass
class Keyframe:
    id: int
    frame_id: int
    pose: RigidPose
    disparity: np.ndarray  # (H, W) 1/m
    image: Optional[np.ndarray] = None  # (H, W, 3)
    validity: Optional[np.ndarray] = None  # invalid-disparity flags

    def __post_init__(self):
        self.disparity = np.asarray(self.disparity, dtype=np.float64)
        if self.validity is None:
            self.validity = self.disparity > 0
        self.validity = np.asarray(self.validity, dtype=bool)


class FactorGraph:
    def __init__(self, intrinsics: PinholeIntrinsics):
        self.intrinsics = intrinsics
        self.keyframes: list[Keyframe] = []
        self.edges: list[FlowObservation] = []

    def add_keyframe(self, frame_id, pose, disparity, image=None, validity=None) -> int:
        kf = Keyframe(len(self.keyframes), frame_id, pose, disparity, image, validity)
        self.keyframes.append(kf)
        return kf.id

    def add_edge(self, obs: FlowObservation):
        if obs.source_kf >= len(self.keyframes) or obs.target_kf >= len(self.keyframes):
            raise MissingEdge("edge references a keyframe that does not exist")
        self.edges.append(obs)

    def find_edge(self, i: int, j: int) -> FlowObservation:
        for e in self.edges:
            if e.source_kf == i and e.target_kf == j:
                return e
        raise MissingEdge(f"no edge ({i}, {j})")

    def targets_of(self, i: int) -> list:
        return [e.target_kf for e in self.edges if e.source_kf == i]


@dataclass
class ResidualField:
    keyframe: int
    magnitude: np.ndarray  # (H, W) normalized mean residual magnitude
    pixel_valid: np.ndarray  # (H, W)
    valid: bool = True


@dataclass
class CoarseMask:
    keyframe: int
    mask: np.ndarray  # (H, W) bool, 1 = dynamic

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)


def _reproject(graph: FactorGraph, i: int, j: int):
    """Project keyframe i's pixels into keyframe j via its disparities.

    Returns (pixels (P, 2), valid (P,), cam-frame z (P,)).
    """
    K = graph.intrinsics
    kf_i = graph.keyframes[i]
    kf_j = graph.keyframes[j]
    d = kf_i.disparity.reshape(-1)
    valid = kf_i.validity.reshape(-1) & (d > 0)
    rays = K.unproject_dirs(K.pixel_grid().reshape(-1, 2))
    pts_i = rays / np.where(valid, d, 1.0)[:, None]
    pts_w = kf_i.pose.apply(pts_i)
    pts_j = kf_j.pose.inverse().apply(pts_w)
    z = pts_j[:, 2]
    valid = valid & (z > MIN_DEPTH)
    zs = np.where(valid, z, 1.0)
    px = np.stack([K.fx * pts_j[:, 0] / zs + K.cx, K.fy * pts_j[:, 1] / zs + K.cy], axis=-1)
    return px, valid, z


def camera_induced_flow(graph: FactorGraph, edge) -> tuple:
    """Flow induced by camera motion alone: p_ij - p_i. Returns (flow, valid)."""
    i, j = edge
    graph.find_edge(i, j)
    K = graph.intrinsics
    grid = K.pixel_grid().reshape(-1, 2)
    px, valid, _ = _reproject(graph, i, j)
    flow = (px - grid).reshape(K.height, K.width, 2)
    return flow, valid.reshape(K.height, K.width)


def residual_flow(graph: FactorGraph, edge) -> tuple:
    """Observed minus camera-induced flow. Returns (residual, valid)."""
    i, j = edge
    obs = graph.find_edge(i, j)
    K = graph.intrinsics
    px, valid, _ = _reproject(graph, i, j)
    res = obs.predicted_pixels.reshape(-1, 2) - px
    return res.reshape(K.height, K.width, 2), valid.reshape(K.height, K.width)


def normalized_residual_magnitude(graph: FactorGraph, keyframe: int) -> ResidualField:
    """Mean over connected edges of |residual| / mean observed flow magnitude."""
    K = graph.intrinsics
    grid = K.pixel_grid()
    edges = [e for e in graph.edges if e.source_kf == keyframe]
    if not edges:
        raise NoConnectedEdges(f"keyframe {keyframe} has no outgoing edges")
    acc = np.zeros((K.height, K.width))
    cnt = np.zeros((K.height, K.width))
    used = 0
    for obs in edges:
        mean_obs = float(np.mean(np.linalg.norm(obs.predicted_pixels - grid, axis=-1)))
        if mean_obs < 1e-12:
            continue  # degenerate edge: no observed motion to normalize by
        res, valid = residual_flow(graph, (keyframe, obs.target_kf))
        mag = np.linalg.norm(res, axis=-1) / mean_obs
        acc += np.where(valid, mag, 0.0)
        cnt += valid
        used += 1
    if used == 0:
        return ResidualField(keyframe, np.zeros((K.height, K.width)), np.zeros((K.height, K.width), bool), valid=False)
    pixel_valid = cnt > 0
    field = np.where(pixel_valid, acc / np.maximum(cnt, 1), 0.0)
    return ResidualField(keyframe, field, pixel_valid, valid=True)


def coarse_mask(residual_field: ResidualField, quantile: float) -> CoarseMask:
    """Threshold the residual field at its top `quantile` fraction.

    The threshold is the (1 - quantile) linear-interpolation quantile; all
    pixels >= it are masked, so tie groups are included wholesale.
    """
    if not (0.0 < quantile < 1.0):
        raise ValueError("quantile must lie in (0, 1)")
    field = residual_field.magnitude
    if not residual_field.valid or not residual_field.pixel_valid.any():
        return CoarseMask(residual_field.keyframe, np.zeros_like(field, dtype=bool))
    vals = field[residual_field.pixel_valid]
    thresh = np.quantile(vals, 1.0 - quantile)
    return CoarseMask(residual_field.keyframe, residual_field.pixel_valid & (field >= thresh))


@dataclass
class DBADiagnostics:
    objectives: list = field(default_factory=list)
    accepted: int = 0
    rejected: int = 0
    converged: bool = False
    final_damping: float = 0.0


def _skew(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _edge_linearization(graph: FactorGraph, obs: FlowObservation, suppression):
    """Per-pixel residual, weights, and Jacobians for one directed edge.

    Residual convention: eps = p_ij - observed, so the normal equations solve
    J^T W J dx = -J^T W eps. Pose Jacobians use left (world-frame)
    perturbations; J_pose_j = -J_pose_i holds exactly in that frame.
    """
    K = graph.intrinsics
    i, j = obs.source_kf, obs.target_kf
    kf_i = graph.keyframes[i]
    kf_j = graph.keyframes[j]
    d = kf_i.disparity.reshape(-1)
    valid = kf_i.validity.reshape(-1) & (d > 0)

    rays = K.unproject_dirs(K.pixel_grid().reshape(-1, 2))
    dsafe = np.where(valid, d, 1.0)
    pts_i = rays / dsafe[:, None]
    pts_w = kf_i.pose.apply(pts_i)
    r_j = kf_j.pose.rotation_matrix()
    pts_j = (pts_w - kf_j.pose.translation) @ r_j
    z = pts_j[:, 2]
    valid &= z > MIN_DEPTH
    zs = np.where(valid, z, 1.0)

    px = np.stack([K.fx * pts_j[:, 0] / zs + K.cx, K.fy * pts_j[:, 1] / zs + K.cy], axis=-1)
    eps = px - obs.predicted_pixels.reshape(-1, 2)

    w = obs.confidence.reshape(-1).copy()
    if suppression is not None:
        w = w * (1.0 - np.clip(suppression.reshape(-1), 0.0, 1.0))
    w = np.where(valid, w, 0.0)

    zero = np.zeros_like(zs)
    jp0 = np.stack([K.fx / zs, zero, -K.fx * pts_j[:, 0] / zs**2], axis=-1)
    jp1 = np.stack([zero, K.fy / zs, -K.fy * pts_j[:, 1] / zs**2], axis=-1)
    j_proj = np.stack([jp0, jp1], axis=-2)  # (P, 2, 3)
    a_w = j_proj @ r_j.T[None]  # d pixel / d world point

    j_pose_i = np.concatenate([a_w, -(a_w @ _skew(pts_w))], axis=-1)  # (P, 2, 6)
    j_disp = (a_w @ ((-(pts_w - kf_i.pose.translation) / dsafe[:, None])[..., None]))[..., 0]  # (P, 2)
    return eps, w, j_pose_i, j_disp


def _objective(graph: FactorGraph, suppressions) -> float:
    total = 0.0
    for obs in graph.edges:
        sup = suppressions.get(obs.source_kf) if suppressions else None
        eps, w, _, _ = _edge_linearization(graph, obs, sup)
        total += float(np.sum(w * np.sum(eps**2, axis=-1)))
    return total


def dba_solve(
    graph: FactorGraph,
    masks=None,
    iterations: int = 8,
    damping: float = 1e-4,
    fixed_poses=(0,),
    optimize_disparities: bool = True,
    hook: Optional[Callable] = None,
) -> DBADiagnostics:
    """Levenberg-Marquardt on the masked flow-reprojection objective.

    masks: per-source-keyframe suppression rasters in [0, 1] (dict or array);
    the effective pixel weight is confidence x (1 - suppression). Pose 0 is
    gauge-anchored unless `fixed_poses` says otherwise; per-pixel disparities
    are eliminated through the diagonal Schur complement. Accepted steps
    never increase the objective. Singular normal systems retry with 10x
    damping up to 5 times, then raise SingularNormalEquations. Non-converged
    runs simply return the best iterate with diagnostics.
    """
    n_kf = len(graph.keyframes)
    diag = DBADiagnostics(final_damping=damping)
    if n_kf <= 1 or not graph.edges:
        diag.converged = True
        return diag

    suppressions = {}
    if masks is not None:
        if isinstance(masks, dict):
            suppressions = {k: np.asarray(v, dtype=np.float64) for k, v in masks.items()}
        else:
            suppressions = {k: np.asarray(masks[k], dtype=np.float64) for k in range(n_kf)}

    fixed = set(int(f) for f in fixed_poses)
    free = [k for k in range(n_kf) if k not in fixed]
    if not free:
        diag.converged = True
        return diag
    block = {k: bi for bi, k in enumerate(free)}
    n_var = 6 * len(free)
    h, w_img = graph.intrinsics.height, graph.intrinsics.width
    n_px = h * w_img

    lam = damping
    obj = _objective(graph, suppressions)
    diag.objectives.append(obj)

    for it in range(iterations):
        # one linearization; inner loop retries the step with larger damping
        lin = []
        for obs in graph.edges:
            sup = suppressions.get(obs.source_kf)
            lin.append((obs, *_edge_linearization(graph, obs, sup)))

        b_mat = np.zeros((n_var, n_var))
        v_vec = np.zeros(n_var)
        c_diag = {k: np.zeros(n_px) for k in range(n_kf)}
        rhs_d = {k: np.zeros(n_px) for k in range(n_kf)}
        e_blocks = {}  # (source kf, pose kf) -> (P, 6)

        for obs, eps, w, j_i, j_d in lin:
            i, j = obs.source_kf, obs.target_kf
            jw_i = j_i * w[:, None, None]
            g_ii = np.einsum("pka,pkb->ab", jw_i, j_i)
            r_i = np.einsum("pka,pk->a", jw_i, eps)
            if i in block:
                bi = block[i]
                b_mat[6 * bi : 6 * bi + 6, 6 * bi : 6 * bi + 6] += g_ii
                v_vec[6 * bi : 6 * bi + 6] -= r_i
            if j in block:
                bj = block[j]
                b_mat[6 * bj : 6 * bj + 6, 6 * bj : 6 * bj + 6] += g_ii  # J_j = -J_i
                v_vec[6 * bj : 6 * bj + 6] += r_i
            if i in block and j in block:
                bi, bj = block[i], block[j]
                b_mat[6 * bi : 6 * bi + 6, 6 * bj : 6 * bj + 6] -= g_ii
                b_mat[6 * bj : 6 * bj + 6, 6 * bi : 6 * bi + 6] -= g_ii
            if optimize_disparities:
                c_diag[i] += w * np.sum(j_d**2, axis=-1)
                rhs_d[i] -= w * np.sum(j_d * eps, axis=-1)
                e_i = np.einsum("pka,pk->pa", jw_i, j_d)  # (P, 6)
                if i in block:
                    e_blocks[(i, i)] = e_blocks.get((i, i), 0) + e_i
                if j in block:
                    e_blocks[(i, j)] = e_blocks.get((i, j), 0) - e_i

        stepped = False
        for attempt in range(6):
            s_mat = b_mat.copy()
            s_rhs = v_vec.copy()
            s_mat[np.arange(n_var), np.arange(n_var)] += lam * np.maximum(np.diag(b_mat), 1e-12)

            c_eff = {}
            if optimize_disparities:
                for i in range(n_kf):
                    c = c_diag[i] * (1.0 + lam)
                    c_eff[i] = np.where(c > 1e-12, c, np.inf)
                # Schur complement: group the pose blocks touched by keyframe i's pixels
                for i in range(n_kf):
                    touched = sorted({p for (s, p) in e_blocks if s == i})
                    if not touched or not np.isfinite(c_eff[i]).any():
                        continue
                    g = np.concatenate([e_blocks[(i, p)] for p in touched], axis=1)  # (P, 6m)
                    inv_c = 1.0 / c_eff[i]
                    s_local = np.einsum("pa,pb,p->ab", g, g, inv_c)
                    u_local = g.T @ (rhs_d[i] * inv_c)
                    for ai, pa in enumerate(touched):
                        ba = block[pa]
                        s_rhs[6 * ba : 6 * ba + 6] -= u_local[6 * ai : 6 * ai + 6]
                        for bi_, pb in enumerate(touched):
                            bb = block[pb]
                            s_mat[6 * ba : 6 * ba + 6, 6 * bb : 6 * bb + 6] -= s_local[
                                6 * ai : 6 * ai + 6, 6 * bi_ : 6 * bi_ + 6
                            ]

            try:
                delta = np.linalg.solve(s_mat, s_rhs)
                if not np.all(np.isfinite(delta)):
                    raise np.linalg.LinAlgError("non-finite step")
            except np.linalg.LinAlgError:
                lam *= 10.0
                if attempt == 5:
                    raise SingularNormalEquations("normal equations singular after damping retries")
                continue

            old_poses = [kf.pose for kf in graph.keyframes]
            old_disp = [kf.disparity.copy() for kf in graph.keyframes] if optimize_disparities else None

            for k in free:
                xi = delta[6 * block[k] : 6 * block[k] + 6]
                dq = rotvec_to_quat(xi[3:])
                inc = RigidPose(dq, xi[:3])
                graph.keyframes[k].pose = inc.compose(graph.keyframes[k].pose)

            if optimize_disparities:
                for i in range(n_kf):
                    touched = sorted({p for (s, p) in e_blocks if s == i})
                    if not touched:
                        continue
                    g = np.concatenate([e_blocks[(i, p)] for p in touched], axis=1)
                    dp = np.concatenate([delta[6 * block[p] : 6 * block[p] + 6] for p in touched])
                    dd = (rhs_d[i] - g @ dp) / c_eff[i]
                    dd = np.where(np.isfinite(dd), dd, 0.0)
                    new_d = graph.keyframes[i].disparity.reshape(-1) + dd
                    graph.keyframes[i].disparity = np.maximum(new_d, MIN_DISPARITY).reshape(h, w_img)

            new_obj = _objective(graph, suppressions)
            if new_obj <= obj:
                obj = new_obj
                diag.objectives.append(obj)
                diag.accepted += 1
                lam = max(lam * 0.5, 1e-10)
                stepped = True
                break
            # reject: restore and raise damping
            for k, p in zip(range(n_kf), old_poses):
                graph.keyframes[k].pose = p
            if optimize_disparities:
                for k, dsp in zip(range(n_kf), old_disp):
                    graph.keyframes[k].disparity = dsp
            diag.rejected += 1
            lam *= 10.0

        diag.final_damping = lam
        if hook is not None:
            hook(it, graph, obj)
        if not stepped:
            break
        if len(diag.objectives) >= 2:
            prev, cur = diag.objectives[-2], diag.objectives[-1]
            if prev - cur <= 1e-12 * max(prev, 1.0):
                diag.converged = True
                break
    return diag


def solve_nonkeyframe_pose(
    graph: FactorGraph,
    neighbor_ids,
    flows_to_frame: dict,
    init_pose: Optional[RigidPose] = None,
    masks=None,
    iterations: int = 10,
    damping: float = 1e-4,
) -> RigidPose:
    """Pose of an in-between frame from flow out of its two neighbor keyframes.

    Builds a temporary three-node graph with the neighbor keyframes frozen
    (poses and disparities) and only the frame pose free.
    """
    neighbor_ids = list(neighbor_ids)
    if len(neighbor_ids) != 2:
        raise MissingEdge("need exactly two neighbor keyframes")
    for nid in neighbor_ids:
        if nid not in flows_to_frame:
            raise MissingEdge(f"missing flow from keyframe {nid} into the frame")

    K = graph.intrinsics
    tmp = FactorGraph(K)
    for nid in neighbor_ids:
        kf = graph.keyframes[nid]
        tmp.add_keyframe(kf.frame_id, kf.pose, kf.disparity, validity=kf.validity)
    if init_pose is None:
        a = graph.keyframes[neighbor_ids[0]].pose
        init_pose = RigidPose(a.rotation, 0.5 * (a.translation + graph.keyframes[neighbor_ids[1]].pose.translation))
    frame_node = tmp.add_keyframe(-1, init_pose, np.ones((K.height, K.width)))

    sup = {}
    for local, nid in enumerate(neighbor_ids):
        flow, conf = flows_to_frame[nid]
        tmp.add_edge(FlowObservation(local, frame_node, flow, conf))
        if masks is not None and nid in masks:
            sup[local] = np.asarray(masks[nid], dtype=np.float64)

    dba_solve(
        tmp,
        masks=sup if sup else None,
        iterations=iterations,
        damping=damping,
        fixed_poses=(0, 1),
        optimize_disparities=False,
    )
    return tmp.keyframes[frame_node].pose


def select_keyframes(mean_flow: Callable[[int, int], float], frame_ids, threshold: float) -> list:
    """Fixed mean-flow-distance keyframe rule: new keyframe when the mean
    flow magnitude from the last keyframe reaches `threshold` pixels."""
    frame_ids = list(frame_ids)
    if not frame_ids:
        return []
    keyframes = [frame_ids[0]]
    for f in frame_ids[1:]:
        if mean_flow(keyframes[-1], f) >= threshold:
            keyframes.append(f)
    return keyframes


def track_with_mask_refinement(
    graph: FactorGraph,
    quantile: float = 0.2,
    rounds: int = 4,
    iterations: int = 4,
    damping: float = 1e-4,
    median_kernel: int = 5,
    hook: Optional[Callable] = None,
):
    """Alternate DBA with coarse-mask recomputation from the flow residual.

    Returns (coarse masks by keyframe, suppression rasters used last). The
    hook receives (round index, graph, masks) after each refinement round.
    """
    from .masking import median_filter

    masks: dict = {}
    coarse: dict = {}
    for r in range(rounds):
        dba_solve(graph, masks=masks if masks else None, iterations=iterations, damping=damping)
        coarse = {}
        for k in range(len(graph.keyframes)):
            if not graph.targets_of(k):
                continue
            fld = normalized_residual_magnitude(graph, k)
            coarse[k] = coarse_mask(fld, quantile)
        masks = {k: median_filter(c.mask, median_kernel).astype(np.float64) for k, c in coarse.items()}
        if hook is not None:
            hook(r, graph, coarse)
    return coarse, masks
