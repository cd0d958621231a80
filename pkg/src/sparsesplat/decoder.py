"""Implicit convolutional decoder: view index -> C-channel residual map.

A coordconv grid at 1/16 resolution (x, y, view index) goes through four
conv / leaky-ReLU / bilinear-x2 stages and a final linear conv.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .scene import SegMask

STAGES = 4
KERNEL = 3
WIDTH_PRESET = (8, 4, 2, 1)
LEAK = 0.2

# capacity factor by number of input views, per head
DEPTH_CAPACITY = {2: 10, 3: 15, 4: 18}
OPACITY_CAPACITY = {2: 6, 3: 10, 4: 12}


def capacity_for(head: str, n_views: int) -> int:
    table = {"depth": DEPTH_CAPACITY, "opacity": OPACITY_CAPACITY}[head]
    return table[min(max(n_views, 2), 4)]


@dataclass
class DecoderParams:
    height: int
    width: int
    capacity: int
    channels: int
    head: str
    kernels: list[Tensor] = field(default_factory=list)
    biases: list[Tensor] = field(default_factory=list)

    def parameters(self) -> list[Tensor]:
        out = []
        for k, b in zip(self.kernels, self.biases):
            out += [k, b]
        return out

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def layer_shapes(self) -> list[tuple[int, ...]]:
        return [k.shape for k in self.kernels]


def layer_widths(capacity: int, channels: int) -> list[int]:
    return [3] + [w * capacity for w in WIDTH_PRESET] + [channels]


def build(height: int, width: int, capacity: int, channels: int, head: str = "depth", rng=None) -> DecoderParams:
    if height % 16 or width % 16:
        raise ValueError(
            f"decoder output {height}x{width} must be divisible by 16; pad the images to a multiple of 16"
        )
    if channels < 1 or capacity < 1:
        raise ValueError("channels and capacity must be >= 1")
    if head not in ("depth", "opacity"):
        raise ValueError(f"unknown head {head!r}")
    rng = np.random.default_rng(rng)
    widths = layer_widths(capacity, channels)
    params = DecoderParams(height, width, capacity, channels, head)
    for cin, cout in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(cin * KERNEL * KERNEL)
        params.kernels.append(Tensor(rng.uniform(-bound, bound, (cout, cin, KERNEL, KERNEL)), requires_grad=True))
        params.biases.append(Tensor(np.zeros(cout), requires_grad=True))
    return params


def coord_input(height: int, width: int, n: float) -> np.ndarray:
    """(3, H/16, W/16) coordconv grid with the view index broadcast as a third channel."""
    bh, bw = height // 16, width // 16
    ys = (np.arange(bh) + 0.5) / bh * 2.0 - 1.0
    xs = (np.arange(bw) + 0.5) / bw * 2.0 - 1.0
    grid = np.empty((3, bh, bw))
    grid[0] = xs[None, :]
    grid[1] = ys[:, None]
    grid[2] = n
    return grid


def normalized_index(view_index: int, n_views: int) -> float:
    return 0.0 if n_views < 2 else view_index / (n_views - 1)


def decode(params: DecoderParams, n: float) -> Tensor:
    """Full-resolution (C, H, W) map for normalized view index ``n``."""
    x = Tensor(coord_input(params.height, params.width, n))
    for i in range(STAGES):
        x = ad.conv2d(x, params.kernels[i], params.biases[i])
        x = ad.leaky_relu(x, LEAK)
        x = ad.upsample_bilinear2x(x)
    return ad.conv2d(x, params.kernels[STAGES], params.biases[STAGES])


def apply_mask(residual, seg) -> Tensor:
    """Per-pixel channel selection: sum_c S_c * residual_c.

    ``seg`` is a SegMask or a raw (C, H, W) one-hot array.
    """
    if not isinstance(seg, SegMask):
        seg = SegMask.from_onehot(seg)
    residual = ad.as_tensor(residual)
    if residual.shape != (seg.channels,) + seg.shape:
        raise ValueError(f"shape mismatch: residual {residual.shape} vs mask {(seg.channels,) + seg.shape}")
    return ad.sum_(ad.mul(residual, seg.onehot()), axis=0)
