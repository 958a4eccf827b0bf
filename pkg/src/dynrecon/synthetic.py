"""Ground-truth scene generator and oracle suite.

Scenes are textured rectangles (walls, floor, box faces) plus rigid movers.
Depth, instance labels, correspondences, tracks, and segmentation all come
from exact analytic ray casting against the rectangles; photometric ground
truth is rendered with the package's own splatting renderer from a
Gaussianized version of the same geometry, so a perfect reconstruction is
exactly representable. All oracles are deterministic functions of
(scene spec, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .errors import InvalidSpec
from .geometry import MIN_DEPTH, PinholeIntrinsics, RigidPose, rotvec_to_quat
from .splatting import GaussianCloud, render


@dataclass
class Rect:
    """Textured rectangle: origin corner plus two edge vectors."""

    origin: np.ndarray  # (3,)
    u: np.ndarray  # (3,) full edge
    v: np.ndarray  # (3,) full edge
    object_id: int  # 0 = static, >0 = mover instance
    texture_seed: int

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)


@dataclass
class MoverSpec:
    half_extents: np.ndarray  # (3,)
    trajectory: list  # per-timestep RigidPose (object-to-world)
    texture_seed: int

    def __post_init__(self):
        self.half_extents = np.asarray(self.half_extents, dtype=np.float64)


@dataclass
class SceneSpec:
    intrinsics: PinholeIntrinsics
    frames: int
    static_rects: list
    movers: list
    camera: list  # per-timestep RigidPose
    gaussian_spacing: float = 0.05
    flow_sigma: float = 0.0
    depth_affine: tuple = (1.0, 0.0)
    depth_sigma: float = 0.0
    dropout: float = 0.0
    seed: int = 0

    def validate(self):
        if self.frames < 1:
            raise InvalidSpec("frames must be >= 1")
        if len(self.camera) != self.frames:
            raise InvalidSpec("camera trajectory length must equal frame count")
        for m in self.movers:
            if len(m.trajectory) != self.frames:
                raise InvalidSpec("mover trajectory length must equal frame count")
        if self.flow_sigma < 0 or self.depth_sigma < 0 or not (0 <= self.dropout <= 1):
            raise InvalidSpec("noise knobs must be nonnegative (dropout in [0,1])")
        if self.depth_affine[0] <= 0:
            raise InvalidSpec("depth affine scale must be positive")


def _texture(seed: int, s: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Smooth deterministic RGB texture on [0,1]^2 (sinusoid mixture)."""
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.25, 0.75, size=3)
    out = np.zeros(s.shape + (3,))
    for c in range(3):
        val = np.full_like(s, base[c])
        for _ in range(3):
            fu, fv = rng.uniform(0.5, 3.0, size=2)
            ph = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.08, 0.22)
            val = val + amp * np.sin(2 * np.pi * (fu * s + fv * t) + ph)
        out[..., c] = val
    return np.clip(out, 0.03, 0.97)


def _box_rects(half: np.ndarray, object_id: int, texture_seed: int) -> list:
    """Six rectangles of an axis-aligned box in the object frame."""
    hx, hy, hz = half
    faces = [
        ((-hx, -hy, -hz), (2 * hx, 0, 0), (0, 2 * hy, 0)),  # front (z-)
        ((-hx, -hy, hz), (2 * hx, 0, 0), (0, 2 * hy, 0)),  # back
        ((-hx, -hy, -hz), (0, 0, 2 * hz), (0, 2 * hy, 0)),  # left
        ((hx, -hy, -hz), (0, 0, 2 * hz), (0, 2 * hy, 0)),  # right
        ((-hx, -hy, -hz), (2 * hx, 0, 0), (0, 0, 2 * hz)),  # top (y-)
        ((-hx, hy, -hz), (2 * hx, 0, 0), (0, 0, 2 * hz)),  # bottom
    ]
    return [
        Rect(np.array(o), np.array(u), np.array(v), object_id, texture_seed + k)
        for k, (o, u, v) in enumerate(faces)
    ]


def _transform_rect(rect: Rect, pose: RigidPose) -> Rect:
    rot = pose.rotation_matrix()
    return Rect(pose.apply(rect.origin), rot @ rect.u, rot @ rect.v, rect.object_id, rect.texture_seed)


class Scene:
    """Resolved scene: world-space rectangles per timestep, camera, textures."""

    def __init__(self, spec: SceneSpec):
        spec.validate()
        self.spec = spec
        self.intrinsics = spec.intrinsics
        self.frames = spec.frames
        self.camera = list(spec.camera)
        self._mover_rects_obj = []
        for k, m in enumerate(spec.movers):
            self._mover_rects_obj.append(_box_rects(m.half_extents, k + 1, m.texture_seed))

    def mover_pose(self, mover_idx: int, t: int) -> RigidPose:
        return self.spec.movers[mover_idx].trajectory[t]

    def rects_at(self, t: int) -> list:
        rects = list(self.spec.static_rects)
        for k, obj_rects in enumerate(self._mover_rects_obj):
            pose = self.mover_pose(k, t)
            rects.extend(_transform_rect(r, pose) for r in obj_rects)
        return rects

    def cast(self, t: int, pixels: np.ndarray):
        """Exact ray cast at continuous pixel coords (N, 2).

        Returns (depth (N,), label (N,), world points (N, 3), hit (N,)).
        """
        pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        cam = self.camera[t]
        rot = cam.rotation_matrix()
        dirs_cam = self.intrinsics.unproject_dirs(pixels)
        dirs = dirs_cam @ rot.T
        origin = cam.translation

        best_s = np.full(pixels.shape[0], np.inf)
        label = np.zeros(pixels.shape[0], dtype=np.int32)
        for rect in self.rects_at(t):
            n = np.cross(rect.u, rect.v)
            denom = dirs @ n
            valid = np.abs(denom) > 1e-14
            s = ((rect.origin - origin) @ n) / np.where(valid, denom, 1.0)
            valid &= s > MIN_DEPTH
            s = np.where(valid, s, 1.0)
            x = origin + s[:, None] * dirs
            rel = x - rect.origin
            uu = rect.u @ rect.u
            vv = rect.v @ rect.v
            uv = rect.u @ rect.v
            ru = rel @ rect.u
            rv = rel @ rect.v
            det = uu * vv - uv * uv
            a = (ru * vv - rv * uv) / det
            b = (rv * uu - ru * uv) / det
            valid &= (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1)
            closer = valid & (s < best_s)
            best_s = np.where(closer, s, best_s)
            label = np.where(closer, rect.object_id, label)
        hit = np.isfinite(best_s)
        depth = np.where(hit, best_s, 0.0)  # s is z-depth: ray dirs have unit camera z
        world = origin + np.where(hit, best_s, 0.0)[:, None] * dirs
        return depth, label, world, hit

    def gaussian_cloud(self, t: int) -> GaussianCloud:
        """Gaussianized geometry at timestep t (photometric ground truth)."""
        spacing = self.spec.gaussian_spacing
        means, quats, log_scales, logits, colors = [], [], [], [], []
        for rect in self.rects_at(t):
            lu = np.linalg.norm(rect.u)
            lv = np.linalg.norm(rect.v)
            nu = max(2, int(np.ceil(lu / spacing)))
            nv = max(2, int(np.ceil(lv / spacing)))
            ss, tt = np.meshgrid((np.arange(nu) + 0.5) / nu, (np.arange(nv) + 0.5) / nv)
            pts = rect.origin + ss[..., None] * rect.u + tt[..., None] * rect.v
            col = _texture(rect.texture_seed, ss, tt)
            n = nu * nv
            means.append(pts.reshape(-1, 3))
            colors.append(col.reshape(-1, 3))
            sigma = 0.65 * max(lu / nu, lv / nv)
            log_scales.append(np.full((n, 3), np.log(sigma)))
            q = np.zeros((n, 4))
            q[:, 0] = 1.0
            quats.append(q)
            logits.append(np.full(n, 2.1972245773362196))  # opacity 0.9
        return GaussianCloud(
            np.concatenate(means),
            np.concatenate(quats),
            np.concatenate(log_scales),
            np.concatenate(logits),
            np.concatenate(colors),
        )


@dataclass
class Dataset:
    """Generated sequence: everything the learned networks would have seen."""

    spec: SceneSpec
    images: np.ndarray  # (T, H, W, 3) in [0, 1]
    depths: np.ndarray  # (T, H, W) exact surface depth
    labels: np.ndarray  # (T, H, W) uint8 instance ids, 0 = static
    scene: Scene = field(repr=False, default=None)

    @property
    def intrinsics(self) -> PinholeIntrinsics:
        return self.spec.intrinsics

    @property
    def frames(self) -> int:
        return self.spec.frames

    def pose(self, t: int) -> RigidPose:
        return self.scene.camera[t]

    def dynamic_mask(self, t: int) -> np.ndarray:
        return self.labels[t] > 0


def generate(spec: SceneSpec, seed: Optional[int] = None) -> Dataset:
    """Render the dataset; deterministic for a given (spec, seed)."""
    if seed is not None:
        spec.seed = int(seed)
    scene = Scene(spec)
    K = spec.intrinsics
    grid = K.pixel_grid().reshape(-1, 2)
    images = np.zeros((spec.frames, K.height, K.width, 3))
    depths = np.zeros((spec.frames, K.height, K.width))
    labels = np.zeros((spec.frames, K.height, K.width), dtype=np.uint8)
    with torch.no_grad():
        for t in range(spec.frames):
            d, l, _, hit = scene.cast(t, grid)
            if not hit.all():
                raise InvalidSpec(f"frame {t}: {int((~hit).sum())} rays escape the scene")
            depths[t] = d.reshape(K.height, K.width)
            labels[t] = l.reshape(K.height, K.width).astype(np.uint8)
            out = render(scene.gaussian_cloud(t), scene.camera[t], K, retain_graph=False)
            images[t] = out.color
    return Dataset(spec, images, depths, labels, scene)


def _rng_for(base_seed: int, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(base_seed) & 0x7FFFFFFF, *[int(k) & 0x7FFFFFFF for k in key]]))


class CorrespondenceOracle:
    """Exact surface-point transport between frames."""

    def __init__(self, dataset: Dataset):
        self.ds = dataset
        self.scene = dataset.scene
        self.K = dataset.intrinsics

    def transport(self, i: int, j: int, pixels: np.ndarray):
        """Carry continuous pixels of frame i to frame j.

        Returns (target pixels (N, 2), target depth (N,), visible (N,)).
        Visibility = in front of the camera, inside the frame, and not
        occluded at frame j.
        """
        pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        depth_i, label_i, world, hit = self.scene.cast(i, pixels)
        pts = world.copy()
        for m in range(len(self.ds.spec.movers)):
            sel = label_i == (m + 1)
            if sel.any():
                rel = self.scene.mover_pose(m, j).compose(self.scene.mover_pose(m, i).inverse())
                pts[sel] = rel.apply(world[sel])
        cam_j = self.scene.camera[j].inverse()
        p_cam = cam_j.apply(pts)
        z = p_cam[:, 2]
        front = z > MIN_DEPTH
        zsafe = np.where(front, z, 1.0)
        px = np.stack(
            [self.K.fx * p_cam[:, 0] / zsafe + self.K.cx, self.K.fy * p_cam[:, 1] / zsafe + self.K.cy],
            axis=-1,
        )
        inside = (
            front
            & (px[:, 0] >= 0)
            & (px[:, 0] <= self.K.width - 1)
            & (px[:, 1] >= 0)
            & (px[:, 1] <= self.K.height - 1)
        )
        visible = hit & inside
        if visible.any():
            cast_d, _, _, cast_hit = self.scene.cast(j, px[visible])
            occ_free = cast_hit & (np.abs(cast_d - z[visible]) <= 0.005 * np.maximum(cast_d, 1e-9) + 1e-9)
            vis_idx = np.nonzero(visible)[0]
            visible[vis_idx] = occ_free
        px[~front] = 0.0
        return px, z, visible


class FlowOracle:
    """Dense optical-flow stand-in: exact correspondences plus noise."""

    def __init__(self, dataset: Dataset, sigma: Optional[float] = None):
        self.corr = CorrespondenceOracle(dataset)
        self.ds = dataset
        self.sigma = dataset.spec.flow_sigma if sigma is None else float(sigma)
        self.seed = dataset.spec.seed

    def flow(self, i: int, j: int):
        """Returns (predicted pixels (H, W, 2), confidence (H, W))."""
        K = self.ds.intrinsics
        grid = K.pixel_grid().reshape(-1, 2)
        px, _, visible = self.corr.transport(i, j, grid)
        conf = visible.astype(np.float64)
        if self.sigma > 0:
            rng = _rng_for(self.seed, 101, i, j)
            noise = rng.normal(0.0, self.sigma, size=px.shape)
            px = px + noise
            mag = np.linalg.norm(noise, axis=-1)
            conf = conf * np.clip(1.0 - mag / (3.0 * self.sigma + 1e-12), 0.0, 1.0)
        h, w = K.height, K.width
        return px.reshape(h, w, 2), conf.reshape(h, w)

    def mean_flow_magnitude(self, i: int, j: int) -> float:
        K = self.ds.intrinsics
        grid = K.pixel_grid().reshape(-1, 2)
        px, _, _ = self.corr.transport(i, j, grid)
        return float(np.mean(np.linalg.norm(px - grid, axis=-1)))


class TrackOracle:
    """Long-term 2D point-track stand-in with per-timestep visibility."""

    def __init__(self, dataset: Dataset, dropout: Optional[float] = None):
        self.corr = CorrespondenceOracle(dataset)
        self.ds = dataset
        self.dropout = dataset.spec.dropout if dropout is None else float(dropout)
        self.seed = dataset.spec.seed

    def track(self, query_pixels: np.ndarray, query_frame: int, frames):
        """Track query pixels (N, 2) through `frames`.

        Returns (tracks (N, F, 2), visibility (N, F)). Dropout is a pure
        function of the query arguments, so identical queries reproduce
        identical visibility.
        """
        query_pixels = np.asarray(query_pixels, dtype=np.float64).reshape(-1, 2)
        frames = list(frames)
        n = query_pixels.shape[0]
        tracks = np.zeros((n, len(frames), 2))
        vis = np.zeros((n, len(frames)), dtype=bool)
        for fi, f in enumerate(frames):
            px, _, visible = self.corr.transport(query_frame, f, query_pixels)
            tracks[:, fi] = px
            vis[:, fi] = visible
        if self.dropout > 0:
            key_px = int(np.round(query_pixels.sum() * 64)) if n else 0
            rng = _rng_for(self.seed, 202, query_frame, n, frames[0], frames[-1], key_px)
            drop = rng.random(vis.shape) < self.dropout
            vis &= ~drop
        return tracks, vis


class MonoDepthOracle:
    """Monocular depth stand-in: hidden affine warp of true depth plus noise."""

    def __init__(self, dataset: Dataset, affine: Optional[tuple] = None, sigma: Optional[float] = None):
        self.ds = dataset
        self.affine = tuple(dataset.spec.depth_affine) if affine is None else tuple(affine)
        self.sigma = dataset.spec.depth_sigma if sigma is None else float(sigma)
        self.seed = dataset.spec.seed
        if self.affine[0] <= 0:
            raise InvalidSpec("mono-depth affine scale must be positive")

    def depth(self, t: int) -> np.ndarray:
        a, b = self.affine
        d = a * self.ds.depths[t] + b
        if self.sigma > 0:
            rng = _rng_for(self.seed, 303, t)
            d = d + rng.normal(0.0, self.sigma, size=d.shape)
        return d


class LabelBackedSegmenter:
    """Promptable-segmentation stand-in backed by instance label rasters."""

    def __init__(self, labels_provider):
        self._labels = labels_provider

    @staticmethod
    def synthetic(dataset: Dataset) -> "LabelBackedSegmenter":
        return LabelBackedSegmenter(lambda t: dataset.labels[t])

    def segment(self, frame_id: int, prompts):
        """One mask per prompt (None when the prompt lands on static)."""
        labels = self._labels(frame_id)
        out = []
        for p in prompts:
            x, y = int(round(p.pixel[0])), int(round(p.pixel[1]))
            if not (0 <= y < labels.shape[0] and 0 <= x < labels.shape[1]):
                out.append(None)
                continue
            lab = int(labels[y, x])
            out.append(None if lab == 0 else labels == lab)
        return out

    def propagate(self, prev_frame_id: int, frame_id: int, prior: dict) -> dict:
        """Extend prior object masks into a new frame by majority label."""
        prev = self._labels(prev_frame_id)
        cur = self._labels(frame_id)
        out = {}
        for key, mask in prior.items():
            mask = np.asarray(mask, dtype=bool)
            if not mask.any():
                out[key] = np.zeros_like(cur, dtype=bool)
                continue
            vals, counts = np.unique(prev[mask], return_counts=True)
            nz = vals != 0
            if not nz.any():
                out[key] = np.zeros_like(cur, dtype=bool)
                continue
            lab = int(vals[nz][np.argmax(counts[nz])])
            out[key] = cur == lab
        return out


@dataclass
class OracleBundle:
    flow: FlowOracle
    tracker: TrackOracle
    segmenter: LabelBackedSegmenter
    monodepth: MonoDepthOracle

    @staticmethod
    def for_dataset(dataset: Dataset) -> "OracleBundle":
        return OracleBundle(
            FlowOracle(dataset),
            TrackOracle(dataset),
            LabelBackedSegmenter.synthetic(dataset),
            MonoDepthOracle(dataset),
        )


def make_scene(
    preset: str = "desk",
    frames: int = 32,
    seed: int = 0,
    width: int = 64,
    height: int = 48,
    movers: int = 1,
    flow_sigma: float = 0.0,
    depth_affine: tuple = (1.0, 0.0),
    depth_sigma: float = 0.0,
    dropout: float = 0.0,
    dynamic_fraction: float = 0.18,
) -> SceneSpec:
    """Deterministic desk-scale scene presets.

    `desk`: textured back wall, slanted side wall, and floor, with `movers`
    rigid boxes sweeping across the view while the camera translates and
    gently rotates. `static`: the same set without movers.
    """
    if preset not in ("desk", "static"):
        raise InvalidSpec(f"unknown preset '{preset}'")
    rng = np.random.default_rng(seed)
    fx = fy = 60.0
    K = PinholeIntrinsics(fx, fy, width / 2.0, height / 2.0, width, height)

    statics = [
        Rect(np.array([-4.0, -3.0, 3.4]), np.array([8.0, 0, 0]), np.array([0, 6.0, 0]), 0, 7000 + seed),
        Rect(np.array([-3.2, -2.5, 1.1]), np.array([0.9, 0, 2.8]), np.array([0, 5.0, 0]), 0, 7100 + seed),
        Rect(np.array([-4.0, 0.62, 0.7]), np.array([8.0, 0, 0]), np.array([0, 0.45, 3.0]), 0, 7200 + seed),
    ]

    # gentle translation + small look-around rotation
    camera = []
    for t in range(frames):
        a = t / max(frames - 1, 1)
        pos = np.array(
            [0.16 * np.sin(2 * np.pi * a * 0.75), 0.05 * np.sin(2 * np.pi * a * 0.5 + 0.7), 0.10 * a]
        )
        rv = np.array([0.02 * np.sin(2 * np.pi * a), 0.035 * np.sin(2 * np.pi * a * 0.5), 0.0])
        camera.append(RigidPose(rotvec_to_quat(rv), pos))

    mover_specs = []
    if preset == "desk":
        # size movers so together they cover roughly dynamic_fraction of the view
        per = dynamic_fraction / max(movers, 1)
        z0 = 2.0
        half_w = 0.5 * np.sqrt(per * width * height) * z0 / fx * 1.25
        for m in range(movers):
            half = np.array([half_w, half_w * 0.75, 0.35 * half_w])
            lane_y = rng.uniform(-0.35, 0.2)
            zm = z0 + rng.uniform(-0.15, 0.35)
            x_from = -0.85 + 0.3 * m
            x_to = 0.85 - 0.25 * m
            spin = rng.uniform(-0.25, 0.25)
            traj = []
            for t in range(frames):
                a = t / max(frames - 1, 1)
                pos = np.array(
                    [x_from + (x_to - x_from) * a, lane_y + 0.12 * np.sin(2 * np.pi * a + m), zm]
                )
                rv = np.array([0.0, spin * a, 0.0])
                traj.append(RigidPose(rotvec_to_quat(rv), pos))
            mover_specs.append(MoverSpec(half, traj, 9000 + 17 * m + seed))

    return SceneSpec(
        intrinsics=K,
        frames=frames,
        static_rects=statics,
        movers=mover_specs,
        camera=camera,
        gaussian_spacing=0.055,
        flow_sigma=flow_sigma,
        depth_affine=depth_affine,
        depth_sigma=depth_sigma,
        dropout=dropout,
        seed=seed,
    )
