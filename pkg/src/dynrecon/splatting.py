"""CPU differentiable Gaussian rasterizer.

Gaussians are projected through the affine approximation of the perspective
map, alpha-composited front to back per pixel, and depth is rendered from the
ray-Gaussian intersection point (the maximum-density point of the 3D Gaussian
along each viewing ray) instead of the z-buffer value. The whole forward pass
is torch float64, so parameter gradients come out of reverse mode exactly.

Opacity is stored as a pre-sigmoid logit and scale as log-scale, keeping the
optimizer inside the valid set by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .errors import BehindCamera, StaleForwardState
from .geometry import MIN_DEPTH, PinholeIntrinsics, RigidPose
from .quats import qnormalize, quat_to_rotmat

TILE = 16
ALPHA_MAX = 0.999
TRANSMITTANCE_MIN = 1e-4
DILATION_FLOOR = 0.3  # px^2, minimum eigenvalue of the projected covariance
CUTOFF_SIGMA = 3.0


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


@dataclass
class Gaussian3D:
    """One Gaussian primitive; scale and opacity in unconstrained storage."""

    mean: np.ndarray  # (3,)
    rotation: np.ndarray  # quaternion (w, x, y, z)
    log_scale: np.ndarray  # (3,)
    opacity_logit: float
    color: np.ndarray  # (3,) RGB in [0, 1]

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)

    @staticmethod
    def from_physical(mean, rotation, scale, opacity, color) -> "Gaussian3D":
        scale = np.asarray(scale, dtype=np.float64).reshape(3)
        if np.any(scale <= 0):
            raise ValueError("scale must be positive")
        if not (0 < opacity < 1):
            raise ValueError("opacity must be in (0, 1) for logit storage")
        return Gaussian3D(mean, rotation, np.log(scale), _logit(opacity), color)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.opacity_logit)))


@dataclass
class DynamicGaussian:
    """Dynamic primitive: base Gaussian at t_ref plus skinning corrections."""

    base: Gaussian3D
    t_ref: int
    corrections: np.ndarray  # Δw, one per skinning neighbor

    def __post_init__(self):
        self.corrections = np.asarray(self.corrections, dtype=np.float64).reshape(-1)


class GaussianCloud:
    """Stacked tensor storage for N Gaussians (float64)."""

    FIELDS = ("means", "quats", "log_scales", "opacity_logits", "colors")

    def __init__(self, means, quats, log_scales, opacity_logits, colors):
        self.means = torch.as_tensor(means, dtype=torch.float64).reshape(-1, 3)
        self.quats = torch.as_tensor(quats, dtype=torch.float64).reshape(-1, 4)
        self.log_scales = torch.as_tensor(log_scales, dtype=torch.float64).reshape(-1, 3)
        self.opacity_logits = torch.as_tensor(opacity_logits, dtype=torch.float64).reshape(-1)
        self.colors = torch.as_tensor(colors, dtype=torch.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return int(self.means.shape[0])

    @staticmethod
    def empty() -> "GaussianCloud":
        return GaussianCloud(
            np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3))
        )

    @staticmethod
    def from_gaussians(gaussians) -> "GaussianCloud":
        gaussians = list(gaussians)
        if not gaussians:
            return GaussianCloud.empty()
        return GaussianCloud(
            np.stack([g.mean for g in gaussians]),
            np.stack([g.rotation for g in gaussians]),
            np.stack([g.log_scale for g in gaussians]),
            np.array([g.opacity_logit for g in gaussians]),
            np.stack([g.color for g in gaussians]),
        )

    def to_gaussians(self) -> list:
        out = []
        for i in range(len(self)):
            out.append(
                Gaussian3D(
                    self.means[i].detach().numpy(),
                    self.quats[i].detach().numpy(),
                    self.log_scales[i].detach().numpy(),
                    float(self.opacity_logits[i]),
                    self.colors[i].detach().numpy(),
                )
            )
        return out

    def select(self, idx) -> "GaussianCloud":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return GaussianCloud(
            self.means[idx], self.quats[idx], self.log_scales[idx],
            self.opacity_logits[idx], self.colors[idx],
        )

    def detached_clone(self) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, f).detach().clone() for f in self.FIELDS))

    @staticmethod
    def cat(clouds) -> "GaussianCloud":
        clouds = [c for c in clouds]
        if not clouds:
            return GaussianCloud.empty()
        return GaussianCloud(*(torch.cat([getattr(c, f) for c in clouds], dim=0) for f in GaussianCloud.FIELDS))


@dataclass
class TileContributors:
    x0: int
    y0: int
    x1: int
    y1: int
    ids: np.ndarray  # input-order Gaussian indices touching this tile


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    opacity: np.ndarray  # (H, W)
    contributors: list  # list[TileContributors]
    _tensors: Optional[tuple] = field(default=None, repr=False)  # (C, D, O) torch
    _inputs: Optional[dict] = field(default=None, repr=False)  # decoded-space handles
    _consumed: bool = field(default=False, repr=False)

    def torch_maps(self):
        if self._tensors is None:
            raise StaleForwardState("forward state was not retained or already released")
        return self._tensors


def _world_to_cam(pose: RigidPose):
    r_wc = torch.from_numpy(pose.rotation_matrix().T.copy())
    t_wc = -r_wc @ torch.from_numpy(pose.translation.copy())
    return r_wc, t_wc


def _anchor(t: torch.Tensor) -> torch.Tensor:
    if t.requires_grad or not torch.is_grad_enabled():
        return t
    return t.detach().clone().requires_grad_(True)


def _decode(cloud: GaussianCloud):
    """Decoded-space tensors plus differentiation anchors.

    Gradient anchors: raw quaternion (renormalization happens downstream, so
    finite differences on raw components match), decoded scale and opacity
    (so d(color)/d(opacity) is reported in physical units).
    """
    quat_anchor = _anchor(cloud.quats)
    scale = torch.exp(_anchor(cloud.log_scales))
    opacity = torch.sigmoid(_anchor(cloud.opacity_logits))
    return {
        "mean": _anchor(cloud.means),
        "rotation_anchor": quat_anchor,
        "rotation": qnormalize(quat_anchor),
        "scale": scale,
        "opacity": opacity,
        "color": _anchor(cloud.colors),
    }


def _project_cloud(dec, pose: RigidPose, intrinsics: PinholeIntrinsics):
    """Camera-space means, 2D means/covariances, and 3D covariance inverses."""
    r_wc, t_wc = _world_to_cam(pose)
    p_cam = dec["mean"] @ r_wc.T + t_wc

    rot = quat_to_rotmat(dec["rotation"])  # (N, 3, 3)
    m_fac = rot * dec["scale"].unsqueeze(-2)  # R @ diag(s)
    a_cam = r_wc.unsqueeze(0) @ m_fac
    cov_cam = a_cam @ a_cam.transpose(-1, -2)  # (N, 3, 3)

    x, y, z = p_cam.unbind(-1)
    zc = z.clamp_min(MIN_DEPTH)
    fx, fy = intrinsics.fx, intrinsics.fy
    mean2 = torch.stack([fx * x / zc + intrinsics.cx, fy * y / zc + intrinsics.cy], dim=-1)

    zero = torch.zeros_like(zc)
    jrow0 = torch.stack([fx / zc, zero, -fx * x / zc**2], dim=-1)
    jrow1 = torch.stack([zero, fy / zc, -fy * y / zc**2], dim=-1)
    jac = torch.stack([jrow0, jrow1], dim=-2)  # (N, 2, 3)
    cov2 = jac @ cov_cam @ jac.transpose(-1, -2)

    # eigenvalue floor keeps every splat at least DILATION_FLOOR px^2 wide
    a = cov2[:, 0, 0]
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1]
    disc = torch.sqrt(torch.clamp(0.25 * (a - c) ** 2 + b * b, min=0.0) + 1e-300)
    lam_min = 0.5 * (a + c) - disc
    lift = (DILATION_FLOOR - lam_min).clamp_min(0.0)
    a = a + lift
    c = c + lift

    tr = cov_cam.diagonal(dim1=-2, dim2=-1).sum(-1)
    jitter = (1e-14 * tr + 1e-30).reshape(-1, 1, 1) * torch.eye(3, dtype=torch.float64)
    cov_cam_inv = torch.linalg.inv(cov_cam + jitter)

    lam_max = 0.5 * (a + c) + torch.sqrt(torch.clamp(0.25 * (a - c) ** 2 + b * b, min=0.0) + 1e-300)
    radius = CUTOFF_SIGMA * torch.sqrt(lam_max)
    return p_cam, mean2, (a, b, c), cov_cam_inv, radius


def project_gaussian(g: Gaussian3D, pose: RigidPose, intrinsics: PinholeIntrinsics):
    """Project one Gaussian: 2D mean, 2D covariance, and a d̂(pixel) function.

    Raises BehindCamera when the mean is at or behind the camera plane. The
    returned covariance carries the isotropic dilation floor (its smallest
    eigenvalue is lifted to DILATION_FLOOR when below it).
    """
    cloud = GaussianCloud.from_gaussians([g])
    with torch.no_grad():
        dec = _decode(cloud)
        r_wc, t_wc = _world_to_cam(pose)
        z = float((dec["mean"] @ r_wc.T + t_wc)[0, 2])
        if z <= MIN_DEPTH:
            raise BehindCamera(f"gaussian depth {z:.3e} <= {MIN_DEPTH}")
        p_cam, mean2, (a, b, c), cov_inv, _ = _project_cloud(dec, pose, intrinsics)
    cov = np.array([[float(a[0]), float(b[0])], [float(b[0]), float(c[0])]])
    mu_c = p_cam[0].detach().numpy()
    inv3 = cov_inv[0].detach().numpy()

    def intersection_depth(pixel) -> float:
        pixel = np.asarray(pixel, dtype=np.float64).reshape(2)
        v = np.array(
            [(pixel[0] - intrinsics.cx) / intrinsics.fx, (pixel[1] - intrinsics.cy) / intrinsics.fy, 1.0]
        )
        return float((v @ inv3 @ mu_c) / (v @ inv3 @ v))

    return mean2[0].detach().numpy(), cov, intersection_depth


def _canonical_order(p_cam, mean2, opacity):
    """Permutation-invariant contributor pre-order (used for tie-stability)."""
    z = p_cam[:, 2].detach().numpy()
    mx = mean2[:, 0].detach().numpy()
    my = mean2[:, 1].detach().numpy()
    op = opacity.detach().numpy()
    return np.lexsort((op, my, mx, z))


def render(
    gaussians,
    pose: RigidPose,
    intrinsics: PinholeIntrinsics,
    retain_graph: bool = True,
) -> RenderOutput:
    """Rasterize Gaussians into color, ray-intersection depth, and opacity.

    Contributors are alpha-composited strictly front to back in per-pixel
    d̂ order (ties resolved by a canonical parameter order, which makes the
    output invariant to the input ordering). Alpha is clamped to ALPHA_MAX
    and accumulation stops once transmittance falls below TRANSMITTANCE_MIN.
    """
    cloud = gaussians if isinstance(gaussians, GaussianCloud) else GaussianCloud.from_gaussians(gaussians)
    h, w = intrinsics.height, intrinsics.width
    dec = _decode(cloud)

    if len(cloud) == 0:
        zero_c = torch.zeros((h, w, 3), dtype=torch.float64)
        zero_s = torch.zeros((h, w), dtype=torch.float64)
        return RenderOutput(
            zero_c.numpy(), zero_s.numpy(), zero_s.numpy().copy(), [],
            _tensors=(zero_c, zero_s, zero_s.clone()), _inputs=dec,
        )

    p_cam, mean2, (cov_a, cov_b, cov_c), cov_inv, radius = _project_cloud(dec, pose, intrinsics)

    visible = (p_cam[:, 2] > MIN_DEPTH).detach()
    idx_vis = torch.nonzero(visible, as_tuple=False).reshape(-1)
    flat_c = torch.zeros((h * w, 3), dtype=torch.float64)
    flat_d = torch.zeros(h * w, dtype=torch.float64)
    flat_o = torch.zeros(h * w, dtype=torch.float64)
    contributors = []

    if idx_vis.numel() > 0:
        order = _canonical_order(p_cam[idx_vis], mean2[idx_vis], dec["opacity"][idx_vis])
        idx = idx_vis[torch.from_numpy(order.copy())]

        mean2_v = mean2[idx]
        cov_av, cov_bv, cov_cv = cov_a[idx], cov_b[idx], cov_c[idx]
        inv3_v = cov_inv[idx]
        pcam_v = p_cam[idx]
        op_v = dec["opacity"][idx]
        col_v = dec["color"][idx]
        rad_np = radius[idx].detach().numpy()
        m2_np = mean2_v.detach().numpy()
        ids_np = idx.numpy()

        det = cov_av * cov_cv - cov_bv**2
        inv_a = cov_cv / det
        inv_b = -cov_bv / det
        inv_c = cov_av / det

        for ty0 in range(0, h, TILE):
            ty1 = min(ty0 + TILE, h)
            for tx0 in range(0, w, TILE):
                tx1 = min(tx0 + TILE, w)
                hit = (
                    (m2_np[:, 0] + rad_np >= tx0)
                    & (m2_np[:, 0] - rad_np <= tx1 - 1)
                    & (m2_np[:, 1] + rad_np >= ty0)
                    & (m2_np[:, 1] - rad_np <= ty1 - 1)
                )
                sel = np.nonzero(hit)[0]
                if sel.size == 0:
                    continue
                contributors.append(TileContributors(tx0, ty0, tx1, ty1, ids_np[sel]))
                sel_t = torch.from_numpy(sel)

                ys, xs = torch.meshgrid(
                    torch.arange(ty0, ty1, dtype=torch.float64),
                    torch.arange(tx0, tx1, dtype=torch.float64),
                    indexing="ij",
                )
                px = torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=-1)  # (P, 2)
                delta = px.unsqueeze(0) - mean2_v[sel_t].unsqueeze(1)  # (G, P, 2)
                dx, dy = delta[..., 0], delta[..., 1]
                expo = -0.5 * (
                    inv_a[sel_t].unsqueeze(1) * dx**2
                    + 2.0 * inv_b[sel_t].unsqueeze(1) * dx * dy
                    + inv_c[sel_t].unsqueeze(1) * dy**2
                )
                alpha = (op_v[sel_t].unsqueeze(1) * torch.exp(expo)).clamp(max=ALPHA_MAX)

                v = torch.stack(
                    [
                        (px[:, 0] - intrinsics.cx) / intrinsics.fx,
                        (px[:, 1] - intrinsics.cy) / intrinsics.fy,
                        torch.ones(px.shape[0], dtype=torch.float64),
                    ],
                    dim=-1,
                )  # (P, 3)
                au = torch.einsum("gij,gj->gi", inv3_v[sel_t], pcam_v[sel_t])  # (G, 3)
                num = torch.einsum("pk,gk->gp", v, au)
                den = torch.einsum("pi,gij,pj->gp", v, inv3_v[sel_t], v)
                dhat = num / den.clamp_min(1e-300)

                sort_idx = torch.argsort(dhat.detach(), dim=0, stable=True)
                alpha_s = torch.gather(alpha, 0, sort_idx)
                dhat_s = torch.gather(dhat, 0, sort_idx)
                col_tile = col_v[sel_t].unsqueeze(1).expand(-1, px.shape[0], -1)
                col_s = torch.gather(col_tile, 0, sort_idx.unsqueeze(-1).expand(-1, -1, 3))

                one_minus = 1.0 - alpha_s
                t_incl = torch.cumprod(one_minus, dim=0)
                t_excl = torch.cat([torch.ones(1, alpha_s.shape[1], dtype=torch.float64), t_incl[:-1]], dim=0)
                live = (t_excl >= TRANSMITTANCE_MIN).to(torch.float64).detach()
                wgt = alpha_s * t_excl * live  # (G, P)

                tile_c = torch.einsum("gp,gpc->pc", wgt, col_s)
                tile_d = (wgt * dhat_s).sum(dim=0)
                tile_o = wgt.sum(dim=0)

                yy, xx = torch.meshgrid(
                    torch.arange(ty0, ty1), torch.arange(tx0, tx1), indexing="ij"
                )
                flat_idx = (yy * w + xx).reshape(-1)
                flat_c = flat_c.index_put((flat_idx,), tile_c)
                flat_d = flat_d.index_put((flat_idx,), tile_d)
                flat_o = flat_o.index_put((flat_idx,), tile_o)

    color_t = flat_c.reshape(h, w, 3)
    depth_t = flat_d.reshape(h, w)
    opac_t = flat_o.reshape(h, w)
    return RenderOutput(
        color_t.detach().numpy(),
        depth_t.detach().numpy(),
        opac_t.detach().numpy(),
        contributors,
        _tensors=(color_t, depth_t, opac_t) if retain_graph else None,
        _inputs=dec,
    )


def render_backward(output: RenderOutput, grad_color=None, grad_depth=None, grad_opacity=None) -> dict:
    """Pull upstream image gradients back to decoded Gaussian parameters.

    Returns gradients w.r.t. mean, rotation (quaternion), scale, opacity, and
    color. Zero upstream gradients yield zero parameter gradients. The
    retained forward state is consumed; a second call raises
    StaleForwardState.
    """
    if output._consumed or output._tensors is None:
        raise StaleForwardState("render output already consumed or not retained")
    color_t, depth_t, opac_t = output._tensors
    names = ("mean", "rotation", "scale", "opacity", "color")
    anchors = ("mean", "rotation_anchor", "scale", "opacity", "color")
    inputs = [output._inputs[k] for k in anchors]

    if not color_t.requires_grad:
        # nothing reached the image: empty scene or everything culled
        output._consumed = True
        output._tensors = None
        if any(inp.numel() > 0 and not inp.requires_grad for inp in inputs):
            raise StaleForwardState("forward pass ran without gradient tracking")
        return {n: torch.zeros_like(i).numpy() for n, i in zip(names, inputs)}

    gc = torch.zeros_like(color_t) if grad_color is None else torch.as_tensor(grad_color, dtype=torch.float64)
    gd = torch.zeros_like(depth_t) if grad_depth is None else torch.as_tensor(grad_depth, dtype=torch.float64)
    go = torch.zeros_like(opac_t) if grad_opacity is None else torch.as_tensor(grad_opacity, dtype=torch.float64)

    grads = torch.autograd.grad(
        outputs=(color_t, depth_t, opac_t),
        inputs=inputs,
        grad_outputs=(gc, gd, go),
        retain_graph=False,
        allow_unused=True,
    )
    output._consumed = True
    output._tensors = None
    out = {}
    for name, g, ref in zip(names, grads, inputs):
        out[name] = torch.zeros_like(ref).numpy() if g is None else g.numpy()
    return out


class DynamicCloud:
    """Dynamic Gaussians stored relative to their anchor scaffold node.

    World-space state at t_ref is reconstructed differentiably from the
    anchor node's transform, so re-anchoring the scaffold moves the attached
    Gaussians with it.
    """

    def __init__(self, local: GaussianCloud, anchor_node, t_ref, nbr_idx, nbr_mask, corrections):
        self.local = local
        self.anchor_node = torch.as_tensor(anchor_node, dtype=torch.long).reshape(-1)
        self.t_ref = torch.as_tensor(t_ref, dtype=torch.long).reshape(-1)
        self.nbr_idx = torch.as_tensor(nbr_idx, dtype=torch.long)  # (N, K)
        self.nbr_mask = torch.as_tensor(nbr_mask, dtype=torch.float64)  # (N, K)
        self.corrections = torch.as_tensor(corrections, dtype=torch.float64)  # (N, K)

    def __len__(self) -> int:
        return len(self.local)

    @staticmethod
    def empty() -> "DynamicCloud":
        return DynamicCloud(
            GaussianCloud.empty(), np.zeros(0, dtype=int), np.zeros(0, dtype=int),
            np.zeros((0, 1), dtype=int), np.zeros((0, 1)), np.zeros((0, 1)),
        )

    def world_at_ref(self, graph, quats=None, trans=None):
        """World-space means/rotations at each Gaussian's reference time."""
        from .quats import qmul, qrot  # local alias, avoids shadowing

        gq = graph.quats if quats is None else quats
        gt = graph.trans if trans is None else trans
        qa = qnormalize(gq[self.anchor_node, self.t_ref])
        ta = gt[self.anchor_node, self.t_ref]
        means_w = qrot(qa, self.local.means) + ta
        quats_w = qmul(qa, qnormalize(self.local.quats))
        return means_w, quats_w

    def to_dynamic_gaussians(self, graph) -> list:
        means_w, quats_w = self.world_at_ref(graph)
        out = []
        for i in range(len(self)):
            base = Gaussian3D(
                means_w[i].detach().numpy(),
                quats_w[i].detach().numpy(),
                self.local.log_scales[i].detach().numpy(),
                float(self.local.opacity_logits[i]),
                self.local.colors[i].detach().numpy(),
            )
            k = int(self.nbr_mask[i].sum())
            out.append(DynamicGaussian(base, int(self.t_ref[i]), self.corrections[i, :k].detach().numpy()))
        return out


def warp_dynamic(dynamic, graph, t: int, quats=None, trans=None) -> GaussianCloud:
    """Warp dynamic Gaussians from their reference times to timestep t.

    Accepts a DynamicCloud (differentiable path) or a list of DynamicGaussian
    (converted via per-element skinning lookups). Scale, opacity, and color
    ride along unchanged.
    """
    from .scaffold import rbf_weights_t, skinning_weights, warp_transforms_t
    from .quats import qmul, qrot

    if isinstance(dynamic, DynamicCloud):
        if len(dynamic) == 0:
            return GaussianCloud.empty()
        gq = graph.quats if quats is None else quats
        gt = graph.trans if trans is None else trans
        means_ref, quats_ref = dynamic.world_at_ref(graph, gq, gt)
        ts = dynamic.t_ref.view(-1, 1).expand_as(dynamic.nbr_idx)
        node_pos = gt[dynamic.nbr_idx, ts]
        radii = torch.as_tensor(graph.radii, dtype=torch.float64)[dynamic.nbr_idx]
        base_w = rbf_weights_t(means_ref, node_pos, radii, dynamic.nbr_mask)
        wts = torch.clamp(base_w + dynamic.corrections, min=0.0) * dynamic.nbr_mask
        if torch.any(wts.sum(dim=1) <= 0):
            from .errors import AllZeroWeights

            raise AllZeroWeights("a dynamic Gaussian lost all skinning weight")
        q_w, t_w = warp_transforms_t(graph, dynamic.nbr_idx, wts, dynamic.t_ref, t, gq, gt)
        return GaussianCloud(
            qrot(q_w, means_ref) + t_w,
            qmul(q_w, quats_ref),
            dynamic.local.log_scales,
            dynamic.local.opacity_logits,
            dynamic.local.colors,
        )

    out = []
    for dg in dynamic:
        pose = warp_point(dg.base.mean, dg.corrections, graph, int(dg.t_ref), t)
        out.append(
            Gaussian3D(
                pose.apply(dg.base.mean),
                _np_qmul(pose.rotation, dg.base.rotation),
                dg.base.log_scale,
                dg.base.opacity_logit,
                dg.base.color,
            )
        )
    return GaussianCloud.from_gaussians(out)


def _np_qmul(a, b):
    from .geometry import quat_multiply

    return quat_multiply(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))


def warp_point(query, corrections, graph, t_src: int, t_dst: int):
    from .scaffold import warp_point as _wp

    return _wp(query, corrections, graph, t_src, t_dst)
