"""Batched, differentiable quaternion / dual-quaternion kernels (torch, float64).

Convention matches `geometry`: scalar-first (w, x, y, z) quaternions, poses
act as x' = R x + t. These kernels back the scaffold warp and the renderer;
everything here must stay differentiable end to end.
"""

from __future__ import annotations

import torch


def qnormalize(q: torch.Tensor) -> torch.Tensor:
    return q / q.norm(dim=-1, keepdim=True).clamp_min(1e-300)


def qmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def qconj(q: torch.Tensor) -> torch.Tensor:
    return q * torch.tensor([1.0, -1.0, -1.0, -1.0], dtype=q.dtype, device=q.device)


def qrot(q: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Rotate vectors v (..., 3) by unit quaternions q (..., 4)."""
    qv = q[..., 1:]
    w = q[..., :1]
    t = 2.0 * torch.cross(qv, v, dim=-1)
    return v + w * t + torch.cross(qv, t, dim=-1)


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def pose_inverse(q: torch.Tensor, t: torch.Tensor):
    qc = qconj(q)
    return qc, -qrot(qc, t)


def pose_compose(qa: torch.Tensor, ta: torch.Tensor, qb: torch.Tensor, tb: torch.Tensor):
    """(qa, ta) ∘ (qb, tb): apply b first."""
    return qmul(qa, qb), qrot(qa, tb) + ta


def dqb(weights: torch.Tensor, quats: torch.Tensor, trans: torch.Tensor):
    """Dual-quaternion blend over the last blend axis.

    weights: (..., K) nonnegative, at least one positive per row.
    quats:   (..., K, 4) unit quaternions, trans: (..., K, 3).
    Returns (q, t) of the blended rigid transform. Hemisphere is fixed
    against the largest-weight element per row (sign factors are detached,
    so gradients see a locally smooth blend).
    """
    w = weights / weights.sum(dim=-1, keepdim=True).clamp_min(1e-300)

    ref_idx = torch.argmax(weights.detach(), dim=-1, keepdim=True)
    ref = torch.gather(quats.detach(), -2, ref_idx.unsqueeze(-1).expand(*ref_idx.shape, 4))
    sign = torch.sign((quats.detach() * ref).sum(dim=-1, keepdim=True))
    sign = torch.where(sign == 0, torch.ones_like(sign), sign)

    t_quat = torch.cat([torch.zeros_like(trans[..., :1]), trans], dim=-1)
    real = sign * quats
    dual = 0.5 * qmul(t_quat, real)

    br = (w.unsqueeze(-1) * real).sum(dim=-2)
    bd = (w.unsqueeze(-1) * dual).sum(dim=-2)

    n = br.norm(dim=-1, keepdim=True).clamp_min(1e-300)
    br = br / n
    bd = bd / n
    bd = bd - br * (br * bd).sum(dim=-1, keepdim=True)
    t = 2.0 * qmul(bd, qconj(br))[..., 1:]
    return br, t
