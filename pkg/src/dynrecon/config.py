"""Run configuration: flat `section.key = value` text files with defaults."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class RunConfig:
    # dataset / run
    dataset: str = ""  # dataset directory; empty means synthesize from preset
    preset: str = "desk"
    frames: int = 32
    movers: int = 1
    mode: str = "rgbd"  # rgbd | rgb
    seed: int = 0
    holdout_stride: int = 0  # 0 disables held-out views

    # oracle noise knobs
    flow_sigma: float = 0.0
    depth_affine_a: float = 1.0
    depth_affine_b: float = 0.0
    depth_sigma: float = 0.0
    dropout: float = 0.0

    # tracking
    keyframe_threshold: float = 2.0  # mean-flow px distance for a new keyframe
    edge_radius: int = 2  # keyframe connectivity radius
    quantile: float = 0.2  # coarse-mask threshold: top fraction at init
    refinement_rounds: int = 3
    dba_iterations: int = 6
    damping: float = 1e-4
    median_kernel: int = 5

    # masking
    min_prompt_support: int = 1
    patience: int = 5
    adapt_margin: float = 1.5

    # scaffold / progressive
    node_count: int = 48
    node_separation: float = 0.04
    knn: int = 8
    r_search: float = 0.02  # meters, newly-seen spherical search radius
    batch_size: int = 16
    overlap: int = 8
    track_grid_stride: int = 4
    track_dedup_px: float = 2.0
    geometry_steps: int = 150
    geometry_lr: float = 1e-2
    photometric_steps: int = 300
    recently_visible_min: int = 4

    # reconstruction
    seed_stride: int = 2
    init_opacity: float = 0.1
    prune_opacity: float = 0.005
    prune_interval: int = 100
    lambda_rgb: float = 1.0
    lambda_depth: float = 0.5
    lambda_track: float = 0.1
    lambda_mask: float = 1.0
    lambda_arap: float = 0.2
    lambda_vel: float = 0.1
    lambda_acc: float = 0.1
    lr_means: float = 2e-3
    lr_quats: float = 1e-3
    lr_scales: float = 5e-3
    lr_opacities: float = 5e-2
    lr_colors: float = 2e-2
    lr_nodes: float = 1e-3
    lr_corrections: float = 1e-3

    def validate(self):
        if self.mode not in ("rgbd", "rgb"):
            raise ConfigError(f"mode must be rgbd or rgb, got '{self.mode}'")
        if not (0 < self.quantile < 1):
            raise ConfigError("quantile must lie in (0, 1)")
        if self.overlap < 1 or self.batch_size < 1:
            raise ConfigError("batch_size and overlap must be >= 1")
        if self.r_search <= 0:
            raise ConfigError("r_search must be positive")
        return self


_SECTIONS = {
    "run": ("dataset", "preset", "frames", "movers", "mode", "seed", "holdout_stride"),
    "noise": ("flow_sigma", "depth_affine_a", "depth_affine_b", "depth_sigma", "dropout"),
    "tracking": (
        "keyframe_threshold", "edge_radius", "quantile", "refinement_rounds",
        "dba_iterations", "damping", "median_kernel",
    ),
    "masking": ("min_prompt_support", "patience", "adapt_margin"),
    "progressive": (
        "node_count", "node_separation", "knn", "r_search", "batch_size", "overlap",
        "track_grid_stride", "track_dedup_px", "geometry_steps", "geometry_lr",
        "photometric_steps", "recently_visible_min",
    ),
    "reconstruction": (
        "seed_stride", "init_opacity", "prune_opacity", "prune_interval",
        "lambda_rgb", "lambda_depth", "lambda_track", "lambda_mask",
        "lambda_arap", "lambda_vel", "lambda_acc",
        "lr_means", "lr_quats", "lr_scales", "lr_opacities", "lr_colors",
        "lr_nodes", "lr_corrections",
    ),
}

_KEY_TO_FIELD = {f"{sec}.{name}": name for sec, names in _SECTIONS.items() for name in names}

_COMMENTS = {
    "tracking.quantile": "fraction of pixels masked as dynamic at initialization (top 20%)",
    "tracking.median_kernel": "median filter size denoising coarse motion masks",
    "progressive.r_search": "meters; spherical search radius for newly-seen pixels",
    "progressive.overlap": "frames shared with the previous batch",
    "reconstruction.lambda_mask": "weight of the dynamic-opacity-over-static penalty",
}


def parse_config(text: str, base: RunConfig = None) -> RunConfig:
    cfg = RunConfig() if base is None else base
    types = {f.name: f.type for f in fields(RunConfig)}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'section.key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _KEY_TO_FIELD:
            raise ConfigError(f"line {ln}: unknown key '{key}'")
        name = _KEY_TO_FIELD[key]
        kind = types[name]
        try:
            if kind == "int":
                setattr(cfg, name, int(val))
            elif kind == "float":
                setattr(cfg, name, float(val))
            else:
                setattr(cfg, name, val)
        except ValueError as exc:
            raise ConfigError(f"line {ln}: bad value for '{key}': {val}") from exc
    return cfg.validate()


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def default_config_text() -> str:
    cfg = RunConfig()
    out = []
    for sec, names in _SECTIONS.items():
        out.append(f"# [{sec}]")
        for name in names:
            key = f"{sec}.{name}"
            comment = _COMMENTS.get(key)
            line = f"{key} = {getattr(cfg, name)}"
            if comment:
                line += f"  # {comment}"
            out.append(line)
        out.append("")
    return "\n".join(out)
