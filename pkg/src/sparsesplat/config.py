"""Run configuration shared by init, training, rendering and evaluation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from .scene import ALPHA_INIT_BY_VIEWS


@dataclass
class TrainConfig:
    # coarse depth alignment
    align_iters: int = 1000
    align_lr: float = 1e-2
    # regularized optimization: first phase1_iters keep spheres, the rest free covariance
    total_iters: int = 13000
    phase1_iters: int = 8000
    scale_factor: float = 1.0
    # learning rates per parameter group
    lr_decoder: float = 1e-4
    lr_color: float = 2.5e-3
    lr_rotation: float = 1e-3
    lr_log_scale: float = 5e-3
    lr_residual: float = 1e-3
    # objective
    beta_m: float = 5.0
    beta_f: float = 0.1
    lambda_ssim: float = 0.2
    lambda_ramp: str = "linear"
    # representation
    channels: int = 5
    depth_gain_factor: float = 0.1
    radius_convention: str = "pixel"
    alpha_init_by_views: dict = field(default_factory=lambda: dict(ALPHA_INIT_BY_VIEWS))
    use_decoder: bool = True
    use_alignment: bool = True
    # rendering
    samples_per_pixel: int = 4
    cov_dilation: float = 0.3
    min_transmittance: float = 1e-4
    cutoff_sigma: float = 3.0
    # flow consistency and evaluation
    tau: float = 1.0
    occlusion_threshold: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.phase1_iters > self.total_iters:
            raise ValueError("phase1_iters must not exceed total_iters")
        for name in ("lr_decoder", "lr_color", "lr_rotation", "lr_log_scale", "lr_residual", "align_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.scale_factor <= 0:
            raise ValueError("scale_factor must be positive")
        if self.samples_per_pixel not in (1, 4):
            raise ValueError("samples_per_pixel must be 1 or 4")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")

    @property
    def scaled_total_iters(self) -> int:
        return max(1, int(round(self.total_iters / self.scale_factor)))

    @property
    def scaled_phase1_iters(self) -> int:
        return min(self.scaled_total_iters, int(round(self.phase1_iters / self.scale_factor)))

    def lr_for(self, group: str) -> float:
        return getattr(self, f"lr_{group}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alpha_init_by_views"] = {str(k): v for k, v in self.alpha_init_by_views.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "alpha_init_by_views" in d:
            d["alpha_init_by_views"] = {int(k): float(v) for k, v in d["alpha_init_by_views"].items()}
        return cls(**d)

    def alpha_init(self, n_views: int) -> float:
        if n_views < 2:
            raise ValueError("initial opacity needs at least 2 input views")
        table = self.alpha_init_by_views
        return table.get(n_views, table[max(table)])
