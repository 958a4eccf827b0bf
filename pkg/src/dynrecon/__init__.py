"""Online dynamic 3D scene reconstruction at desk scale.

Tracks a moving camera through scenes with moving objects, separates static
and dynamic content with flow-residual motion masks, and progressively
reconstructs both into a 3D-Gaussian map deformed by a motion-scaffold graph.
Learned perception (flow, tracking, segmentation, monocular depth) is
replaced by deterministic synthetic oracles.
"""

import os

import torch

__version__ = "0.1.0"


def configure_threads() -> int:
    """Pin worker parallelism from DYNRECON_THREADS (default 1, deterministic)."""
    n = max(1, int(os.environ.get("DYNRECON_THREADS", "1")))
    torch.set_num_threads(n)
    return n


configure_threads()
