"""SceneBundle: every view's grid plus the shared decoders and optimizer state."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import decoder as dec
from .autodiff import Tensor
from .config import TrainConfig
from .geometry import Camera
from .raster import RasterSettings
from .scene import GaussianCloud, PixelGaussianGrid, SegMask, concat_clouds, materialize


@dataclass
class AlignParams:
    scales: np.ndarray
    offsets: np.ndarray
    history: list = field(default_factory=list)


@dataclass
class SceneBundle:
    cameras: list[Camera]
    grids: list[PixelGaussianGrid]
    segmasks: list[SegMask]
    config: TrainConfig
    depth_gain: float
    depth_decoder: dec.DecoderParams | None = None
    opacity_decoder: dec.DecoderParams | None = None
    # per-pixel residual maps, used instead of the decoders when they are disabled
    depth_residuals: list[Tensor] | None = None
    opacity_residuals: list[Tensor] | None = None
    align: AlignParams | None = None
    iteration: int = 0
    optimizer_state: dict = field(default_factory=dict)
    loss_history: list = field(default_factory=list)

    @property
    def n_views(self) -> int:
        return len(self.grids)

    @property
    def num_gaussians(self) -> int:
        return sum(g.shape[0] * g.shape[1] for g in self.grids)

    def raster_settings(self) -> RasterSettings:
        c = self.config
        return RasterSettings(
            cutoff_sigma=c.cutoff_sigma, min_transmittance=c.min_transmittance, dilation=c.cov_dilation
        )

    def residuals(self, view: int) -> tuple[Tensor, Tensor]:
        """(residual depth, residual opacity) maps of one view."""
        if self.depth_decoder is not None:
            n = dec.normalized_index(view, self.n_views)
            seg = self.segmasks[view]
            d = dec.apply_mask(dec.decode(self.depth_decoder, n), seg)
            a = dec.apply_mask(dec.decode(self.opacity_decoder, n), seg)
            return ad.mul(d, self.depth_gain), a
        return ad.mul(self.depth_residuals[view], self.depth_gain), self.opacity_residuals[view]

    def materialize_view(self, view: int) -> GaussianCloud:
        d, a = self.residuals(view)
        return materialize(self.grids[view], d, a, self.cameras[view], self.config.radius_convention)

    def materialize_all(self) -> tuple[GaussianCloud, list[GaussianCloud]]:
        slices = [self.materialize_view(v) for v in range(self.n_views)]
        return concat_clouds(slices), slices

    def current_depths(self) -> list[np.ndarray]:
        with ad.no_grad():
            return [self.materialize_view(v).depth.data.copy() for v in range(self.n_views)]

    def parameter_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        groups: dict[str, list[tuple[str, Tensor]]] = {"color": [], "decoder": [], "residual": []}
        for v, g in enumerate(self.grids):
            groups["color"].append((f"view{v}.color_dc", g.color_dc))
        if self.depth_decoder is not None:
            for head, params in (("depth", self.depth_decoder), ("opacity", self.opacity_decoder)):
                for i, (k, b) in enumerate(zip(params.kernels, params.biases)):
                    groups["decoder"].append((f"{head}_decoder.kernel{i}", k))
                    groups["decoder"].append((f"{head}_decoder.bias{i}", b))
        else:
            for v in range(self.n_views):
                groups["residual"].append((f"view{v}.depth_residual", self.depth_residuals[v]))
                groups["residual"].append((f"view{v}.opacity_residual", self.opacity_residuals[v]))
        if any(not g.frozen_covariance for g in self.grids):
            groups["rotation"] = [(f"view{v}.rotation", g.rotation) for v, g in enumerate(self.grids)]
            groups["log_scale"] = [(f"view{v}.log_scale", g.log_scale) for v, g in enumerate(self.grids)]
        return {k: v for k, v in groups.items() if v}

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for items in self.parameter_groups().values():
            out.update(dict(items))
        return out
