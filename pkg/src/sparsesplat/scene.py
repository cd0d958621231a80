"""Per-pixel Gaussian grids and their materialization into a cloud."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import Camera, pixel_centers, unproject_g

DEPTH_FLOOR = 1e-3
OPACITY_MIN = 0.005
OPACITY_MAX = 0.995
# initial opacity by number of input views; more views -> lower start value
ALPHA_INIT_BY_VIEWS = {2: 0.6, 3: 0.5, 4: 0.35}


def alpha_init_for_views(n_views: int) -> float:
    if n_views < 2:
        raise ValueError("initial opacity is defined for 2 or more input views")
    return ALPHA_INIT_BY_VIEWS.get(n_views, ALPHA_INIT_BY_VIEWS[4])


class SegMask:
    """C-channel one-hot partition of an image, stored as per-pixel labels."""

    def __init__(self, labels: np.ndarray, channels: int):
        labels = np.asarray(labels)
        if channels < 1:
            raise ValueError(f"channel count must be >= 1, got {channels}")
        if labels.ndim != 2 or labels.min(initial=0) < 0 or labels.max(initial=0) >= channels:
            raise ValueError("labels must be a 2-d map with values in [0, channels)")
        self.labels = labels.astype(np.int64)
        self.channels = int(channels)

    @classmethod
    def from_onehot(cls, s: np.ndarray) -> SegMask:
        s = np.asarray(s)
        if s.ndim != 3:
            raise ValueError(f"mask must be (C, H, W), got shape {s.shape}")
        if not np.all((s == 0) | (s == 1)) or not np.all(s.sum(axis=0) == 1):
            raise ValueError("mask is not a partition: each pixel needs exactly one active channel")
        return cls(np.argmax(s, axis=0), s.shape[0])

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def onehot(self) -> np.ndarray:
        return (self.labels[None] == np.arange(self.channels)[:, None, None]).astype(np.float64)


@dataclass
class PixelGaussianGrid:
    view_index: int
    depth_init: np.ndarray  # (H, W)
    color_dc: Tensor  # (H, W, 3)
    rotation: Tensor  # (H, W, 4) wxyz
    log_scale: Tensor  # (H, W, 3)
    alpha_init: float
    frozen_covariance: bool = True

    def __post_init__(self):
        if np.any(~np.isfinite(self.depth_init)) or np.any(self.depth_init <= 0):
            raise ValueError(f"view {self.view_index}: initial depth must be positive and finite")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth_init.shape

    @classmethod
    def create(cls, view_index: int, depth_init: np.ndarray, colors: np.ndarray, alpha_init: float) -> PixelGaussianGrid:
        h, w = depth_init.shape
        rot = np.zeros((h, w, 4))
        rot[..., 0] = 1.0
        return cls(
            view_index=view_index,
            depth_init=np.asarray(depth_init, dtype=np.float64),
            color_dc=Tensor(np.clip(colors, 0.0, 1.0), requires_grad=True),
            rotation=Tensor(rot, requires_grad=True),
            log_scale=Tensor(np.zeros((h, w, 3)), requires_grad=True),
            alpha_init=float(alpha_init),
        )


@dataclass
class GaussianCloud:
    positions: Tensor  # (N, 3)
    scales: Tensor  # (N, 3)
    quats: Tensor  # (N, 4)
    opacity: Tensor  # (N,)
    colors: Tensor  # (N, 3)
    source: np.ndarray  # (N, 3) int: view, row, col
    depth: Tensor | None = field(default=None, repr=False)  # per-pixel depth map of a single-view slice

    def __len__(self) -> int:
        return self.positions.shape[0]


def radius_from_depth(camera: Camera, depth, convention: str = "pixel"):
    """Sphere radius giving each Gaussian a one-pixel footprint at ``depth``.

    ``"pixel"``: r = f * D / H with f the normalized vertical focal length
    tan(fov_y / 2) = H / (2 fy), i.e. r = D / (2 fy): the sphere's projected
    diameter is one pixel.
    ``"literal"``: r = fy * D / H with fy taken in pixels.
    Accepts arrays or tensors; tensors stay differentiable.
    """
    if convention == "pixel":
        k = 0.5 / camera.fy
    elif convention == "literal":
        k = camera.fy / camera.height
    else:
        raise ValueError(f"unknown radius convention {convention!r}")
    if isinstance(depth, Tensor):
        return ad.mul(depth, k)
    return np.asarray(depth, dtype=np.float64) * k


def materialize(
    grid: PixelGaussianGrid,
    residual_depth,
    residual_opacity,
    camera: Camera,
    radius_convention: str = "pixel",
) -> GaussianCloud:
    """Build the cloud slice of one view from its grid and residual maps.

    Depth = max(D_init + dD, DEPTH_FLOOR); opacity = clamp(alpha_init + dA).
    With ``frozen_covariance`` the Gaussians are spheres sized from the
    current depth; otherwise rotation and log_scale are used.
    """
    h, w = grid.shape
    residual_depth = ad.as_tensor(residual_depth)
    residual_opacity = ad.as_tensor(residual_opacity)
    for name, res in (("depth", residual_depth), ("opacity", residual_opacity)):
        if res.shape != (h, w):
            raise ValueError(f"view {grid.view_index}: residual {name} has shape {res.shape}, expected {(h, w)}")
        if not np.all(np.isfinite(res.data)):
            raise FloatingPointError(f"view {grid.view_index}: non-finite residual {name}")

    depth = ad.clamp(ad.add(grid.depth_init, residual_depth), DEPTH_FLOOR)
    positions = unproject_g(camera, pixel_centers(camera), depth)
    opacity = ad.clamp(ad.add(residual_opacity, grid.alpha_init), OPACITY_MIN, OPACITY_MAX)

    n = h * w
    if grid.frozen_covariance:
        r = ad.reshape(radius_from_depth(camera, depth, radius_convention), (n,))
        scales = ad.stack_last([r, r, r])
        quats = Tensor(np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)))
    else:
        scales = ad.exp(ad.reshape(grid.log_scale, (n, 3)))
        quats = ad.reshape(grid.rotation, (n, 4))

    rows, cols = np.mgrid[0:h, 0:w]
    source = np.stack([np.full(n, grid.view_index), rows.ravel(), cols.ravel()], axis=1)
    return GaussianCloud(
        positions=ad.reshape(positions, (n, 3)),
        scales=scales,
        quats=quats,
        opacity=ad.reshape(opacity, (n,)),
        colors=ad.reshape(grid.color_dc, (n, 3)),
        source=source,
        depth=depth,
    )


def concat_clouds(clouds: list[GaussianCloud]) -> GaussianCloud:
    if len(clouds) == 1:
        return clouds[0]
    return GaussianCloud(
        positions=ad.concat([c.positions for c in clouds]),
        scales=ad.concat([c.scales for c in clouds]),
        quats=ad.concat([c.quats for c in clouds]),
        opacity=ad.concat([c.opacity for c in clouds]),
        colors=ad.concat([c.colors for c in clouds]),
        source=np.concatenate([c.source for c in clouds]),
    )


def unfreeze_covariance(grid: PixelGaussianGrid, depth: np.ndarray, camera: Camera, radius_convention: str = "pixel") -> None:
    """Switch a grid to free covariance, seeded to reproduce the frozen spheres."""
    r = radius_from_depth(camera, depth, radius_convention)
    h, w = grid.shape
    grid.log_scale = Tensor(np.repeat(np.log(r)[..., None], 3, axis=-1), requires_grad=True)
    rot = np.zeros((h, w, 4))
    rot[..., 0] = 1.0
    grid.rotation = Tensor(rot, requires_grad=True)
    grid.frozen_covariance = False
