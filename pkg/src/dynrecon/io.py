"""On-disk formats: depth rasters, images, label masks, trajectories,
datasets, and binary checkpoints.

Depth rasters are little-endian float32 grids behind a 16-byte header
(magic "DPTH", uint32 width, uint32 height, uint32 reserved); invalid pixels
are NaN. Trajectories are text lines `timestamp tx ty tz qx qy qz qw` with
`#` comments. Checkpoints are .npz archives (bit-deterministic for fixed
content). Images and label masks are lossless PNG.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .depth import DepthMap
from .errors import ConfigError
from .geometry import PinholeIntrinsics, RigidPose, rotvec_to_quat
from .metrics import Trajectory

DEPTH_MAGIC = b"DPTH"


def write_depth(path, depth_map: DepthMap):
    depth = np.where(depth_map.validity, depth_map.depth, np.nan).astype("<f4")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC)
        f.write(struct.pack("<III", w, h, 0))
        f.write(depth.tobytes(order="C"))


def read_depth(path, frame_id: int = -1) -> DepthMap:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DEPTH_MAGIC:
            raise ConfigError(f"{path}: bad depth raster magic {magic!r}")
        w, h, _ = struct.unpack("<III", f.read(12))
        data = np.frombuffer(f.read(4 * w * h), dtype="<f4").reshape(h, w).astype(np.float64)
    valid = np.isfinite(data) & (data > 0)
    return DepthMap(frame_id, np.where(valid, data, 0.0), valid)


def write_image(path, image: np.ndarray):
    """Save an RGB float image in [0, 1] as 8-bit PNG."""
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_image(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_label_mask(path, labels: np.ndarray):
    Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="L").save(path, format="PNG")


def read_label_mask(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.uint8)


def write_trajectory(path, trajectory: Trajectory, comment: str = ""):
    with open(path, "w") as f:
        if comment:
            f.write(f"# {comment}\n")
        f.write("# timestamp tx ty tz qx qy qz qw\n")
        for t, pose in zip(trajectory.timestamps, trajectory.poses):
            w, x, y, z = pose.rotation
            tx, ty, tz = pose.translation
            f.write(f"{t:.6f} {tx:.9f} {ty:.9f} {tz:.9f} {x:.9f} {y:.9f} {z:.9f} {w:.9f}\n")


def read_trajectory(path) -> Trajectory:
    stamps = []
    poses = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.split()]
            if len(vals) != 8:
                raise ConfigError(f"{path}: trajectory lines need 8 fields, got {len(vals)}")
            t, tx, ty, tz, qx, qy, qz, qw = vals
            stamps.append(t)
            poses.append(RigidPose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz])))
    return Trajectory(np.array(stamps), poses)


def save_checkpoint(path, arrays: dict, meta: dict):
    """Deterministic .npz checkpoint: sorted array keys + canonical JSON meta."""
    payload = {k: np.ascontiguousarray(arrays[k]) for k in sorted(arrays)}
    payload["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True, separators=(",", ":")).encode(), dtype=np.uint8
    ).copy()
    with open(path, "wb") as f:
        np.savez(f, **payload)


def load_checkpoint(path):
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
        meta = json.loads(bytes(data["__meta__"].tobytes()).decode())
    return arrays, meta


# --- dataset directory layout -------------------------------------------------

def save_dataset(out_dir, dataset):
    """Write a generated dataset so file-replay mode can reload it exactly."""
    from .synthetic import Dataset  # local import to keep io importable alone

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depths").mkdir(exist_ok=True)
    (out / "labels").mkdir(exist_ok=True)
    for t in range(dataset.frames):
        write_image(out / "images" / f"{t:05d}.png", dataset.images[t])
        write_depth(out / "depths" / f"{t:05d}.dpth", DepthMap.dense(t, dataset.depths[t]))
        write_label_mask(out / "labels" / f"{t:05d}.png", dataset.labels[t])
    traj = Trajectory(np.arange(dataset.frames, dtype=np.float64), [dataset.pose(t) for t in range(dataset.frames)])
    write_trajectory(out / "groundtruth.txt", traj, comment="ground-truth camera trajectory")
    spec_payload = _spec_to_json(dataset.spec)
    (out / "scene.json").write_text(json.dumps(spec_payload, sort_keys=True, indent=1))


def load_dataset(in_dir):
    """Reload a dataset directory; oracles rebuild from the stored scene."""
    from .synthetic import generate

    in_dir = Path(in_dir)
    spec = _spec_from_json(json.loads((in_dir / "scene.json").read_text()))
    ds = generate(spec)
    # stored rasters are authoritative for replay (byte-quantized images)
    frames = ds.frames
    for t in range(frames):
        ds.images[t] = read_image(in_dir / "images" / f"{t:05d}.png")
        dm = read_depth(in_dir / "depths" / f"{t:05d}.dpth", t)
        ds.depths[t] = np.where(dm.validity, dm.depth, 0.0)
        ds.labels[t] = read_label_mask(in_dir / "labels" / f"{t:05d}.png")
    return ds


def _pose_to_list(p: RigidPose) -> list:
    return [*map(float, p.rotation), *map(float, p.translation)]


def _pose_from_list(v) -> RigidPose:
    return RigidPose(np.array(v[:4]), np.array(v[4:]))


def _spec_to_json(spec) -> dict:
    return {
        "intrinsics": [spec.intrinsics.fx, spec.intrinsics.fy, spec.intrinsics.cx,
                       spec.intrinsics.cy, spec.intrinsics.width, spec.intrinsics.height],
        "frames": spec.frames,
        "gaussian_spacing": spec.gaussian_spacing,
        "flow_sigma": spec.flow_sigma,
        "depth_affine": list(spec.depth_affine),
        "depth_sigma": spec.depth_sigma,
        "dropout": spec.dropout,
        "seed": spec.seed,
        "static_rects": [
            {
                "origin": r.origin.tolist(), "u": r.u.tolist(), "v": r.v.tolist(),
                "object_id": r.object_id, "texture_seed": r.texture_seed,
            }
            for r in spec.static_rects
        ],
        "movers": [
            {
                "half_extents": m.half_extents.tolist(),
                "texture_seed": m.texture_seed,
                "trajectory": [_pose_to_list(p) for p in m.trajectory],
            }
            for m in spec.movers
        ],
        "camera": [_pose_to_list(p) for p in spec.camera],
    }


def _spec_from_json(data: dict):
    from .synthetic import MoverSpec, Rect, SceneSpec

    fx, fy, cx, cy, w, h = data["intrinsics"]
    return SceneSpec(
        intrinsics=PinholeIntrinsics(fx, fy, cx, cy, int(w), int(h)),
        frames=int(data["frames"]),
        static_rects=[
            Rect(np.array(r["origin"]), np.array(r["u"]), np.array(r["v"]),
                 int(r["object_id"]), int(r["texture_seed"]))
            for r in data["static_rects"]
        ],
        movers=[
            MoverSpec(np.array(m["half_extents"]),
                      [_pose_from_list(p) for p in m["trajectory"]],
                      int(m["texture_seed"]))
            for m in data["movers"]
        ],
        camera=[_pose_from_list(p) for p in data["camera"]],
        gaussian_spacing=float(data["gaussian_spacing"]),
        flow_sigma=float(data["flow_sigma"]),
        depth_affine=tuple(data["depth_affine"]),
        depth_sigma=float(data["depth_sigma"]),
        dropout=float(data["dropout"]),
        seed=int(data["seed"]),
    )
