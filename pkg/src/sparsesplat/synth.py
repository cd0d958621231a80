"""Analytic test scenes: textured planes seen by a few pinhole cameras."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, CameraError, pixel_centers, ray_basis


@dataclass
class Plane:
    z: float  # world z of the fronto-parallel plane
    half_extent: float  # half side length in x and y
    base: tuple = (0.5, 0.5, 0.5)
    wavelength: float = 1.0  # texture period in world units
    phase: float = 0.0


@dataclass
class SynthSpec:
    width: int = 64
    height: int = 64
    n_views: int = 3
    focal: float = 64.0
    baseline: float = 0.15  # training cameras spread over [-baseline, baseline] in x
    planes: list = field(
        default_factory=lambda: [
            Plane(z=2.0, half_extent=0.35, base=(0.75, 0.4, 0.3), wavelength=0.5, phase=0.3),
            Plane(z=4.0, half_extent=3.0, base=(0.3, 0.5, 0.65), wavelength=1.0, phase=1.1),
        ]
    )
    heldout_x: tuple = (-0.075, 0.075)
    depth_noise: float = 0.0  # std of i.i.d. depth noise, as a fraction of noise_scale
    noise_scale: str = "range"  # "range": plane depth range; "depth": the pixel's own depth
    # planted corruption (s, o) per training view; monodepth = (depth - o) / s
    corruption: list | None = None
    seed: int = 0

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("width", "height", "n_views", "focal", "baseline", "depth_noise", "noise_scale", "seed")}
        d["heldout_x"] = list(self.heldout_x)
        d["planes"] = [vars(p) | {"base": list(p.base)} for p in self.planes]
        d["corruption"] = None if self.corruption is None else [list(map(float, c)) for c in self.corruption]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SynthSpec:
        d = dict(d)
        if "planes" in d:
            d["planes"] = [Plane(**{**p, "base": tuple(p.get("base", (0.5, 0.5, 0.5)))}) for p in d["planes"]]
        if "heldout_x" in d:
            d["heldout_x"] = tuple(d["heldout_x"])
        return cls(**d)


@dataclass
class SynthScene:
    cameras: list
    images: list
    depths: list  # ground-truth planar depth
    monodepths: list  # corrupted depth fed to the pipeline
    flows: dict  # (i, j) -> (H, W, 2)
    corruption: list  # (s, o) per view
    heldout_cameras: list
    heldout_images: list
    heldout_depths: list


def random_corruption(n_views: int, rng, s_range=(0.5, 2.0), o_range=(-1.0, 1.0)) -> list:
    """View 0 stays metric; others get a random scale/offset."""
    out = [(1.0, 0.0)]
    for _ in range(1, n_views):
        out.append((float(rng.uniform(*s_range)), float(rng.uniform(*o_range))))
    return out


def make_camera(spec: SynthSpec, x: float, y: float = 0.0, index: int = 0) -> Camera:
    """Camera at (x, y, 0) looking down +z, so every plane is fronto-parallel."""
    pose = np.hstack([np.eye(3), -np.array([[x], [y], [0.0]])])
    return Camera(
        fx=spec.focal, fy=spec.focal, cx=spec.width / 2.0, cy=spec.height / 2.0,
        width=spec.width, height=spec.height, world_to_cam=pose, view_index=index,
    )


def trace(spec: SynthSpec, camera: Camera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pixel (color, planar depth, world point) by ray/plane intersection at pixel centers."""
    uv = pixel_centers(camera)
    a, b = ray_basis(camera, uv)  # world point = a * d + b
    depth = np.full(uv.shape[:2], np.inf)
    color = np.zeros(uv.shape[:2] + (3,))
    for plane in spec.planes:
        with np.errstate(divide="ignore", invalid="ignore"):
            d = (plane.z - b[..., 2]) / a[..., 2]
        pts = a * d[..., None] + b
        hit = (d > 0) & (np.abs(pts[..., 0]) <= plane.half_extent) & (np.abs(pts[..., 1]) <= plane.half_extent)
        closer = hit & (d < depth)
        depth[closer] = d[closer]
        tex = plane_texture(plane, pts[..., 0], pts[..., 1])
        color[closer] = tex[closer]
    if not np.all(np.isfinite(depth)):
        raise CameraError(f"view {camera.view_index}: some pixels see no geometry")
    points = a * depth[..., None] + b
    return color, depth, points


def plane_texture(plane: Plane, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    k = 2 * np.pi / plane.wavelength
    out = np.empty(x.shape + (3,))
    out[..., 0] = plane.base[0] + 0.2 * np.sin(k * x + plane.phase) * np.cos(0.7 * k * y)
    out[..., 1] = plane.base[1] + 0.2 * np.cos(k * y - plane.phase)
    out[..., 2] = plane.base[2] + 0.15 * np.sin(0.8 * k * (x + y) + 2 * plane.phase)
    return np.clip(out, 0.0, 1.0)


def analytic_flow(src: Camera, dst: Camera, points: np.ndarray) -> np.ndarray:
    """Pixel displacement taking each src pixel center to the projection of its 3D point in dst."""
    xc = points @ dst.R.T + dst.t
    q = np.stack([dst.fx * xc[..., 0] / xc[..., 2] + dst.cx, dst.fy * xc[..., 1] / xc[..., 2] + dst.cy], axis=-1)
    return q - pixel_centers(src)


def generate(spec: SynthSpec) -> SynthScene:
    if spec.n_views < 1:
        raise CameraError("need at least one view")
    rng = np.random.default_rng(spec.seed)
    xs = np.linspace(-spec.baseline, spec.baseline, spec.n_views) if spec.n_views > 1 else np.zeros(1)
    if spec.n_views > 1 and spec.baseline <= 0:
        raise CameraError("degenerate camera placement: views coincide (baseline must be positive)")
    cams = [make_camera(spec, float(x), 0.02 * (i % 2), i) for i, x in enumerate(xs)]
    centers = np.array([c.center for c in cams])
    for i in range(len(cams)):
        for j in range(i + 1, len(cams)):
            if np.linalg.norm(centers[i] - centers[j]) < 1e-6:
                raise CameraError(f"degenerate camera placement: views {i} and {j} coincide")
    for c in cams:
        if c.center[2] >= min(p.z for p in spec.planes):
            raise CameraError("degenerate camera placement: camera at or beyond the nearest plane")

    traced = [trace(spec, c) for c in cams]
    images = [t[0] for t in traced]
    depths = [t[1] for t in traced]
    corruption = spec.corruption if spec.corruption is not None else [(1.0, 0.0)] * spec.n_views
    if len(corruption) != spec.n_views:
        raise ValueError("corruption needs one (s, o) pair per view")
    if spec.noise_scale == "range":
        zs = [p.z for p in spec.planes]
        scale = lambda d: max(zs) - min(zs) if len(zs) > 1 else zs[0]
    elif spec.noise_scale == "depth":
        scale = lambda d: d
    else:
        raise ValueError(f"unknown noise_scale {spec.noise_scale!r}")
    monodepths = []
    for d, (s, o) in zip(depths, corruption):
        noisy = d + spec.depth_noise * scale(d) * rng.standard_normal(d.shape)
        md = (noisy - o) / s
        if np.any(md <= 0):
            raise ValueError("planted corruption produces non-positive depth")
        monodepths.append(md)
    flows = {}
    for i in range(spec.n_views):
        for j in range(spec.n_views):
            if i != j:
                flows[(i, j)] = analytic_flow(cams[i], cams[j], traced[i][2])

    ho_cams = [make_camera(spec, float(x), 0.01, spec.n_views + k) for k, x in enumerate(spec.heldout_x)]
    ho = [trace(spec, c) for c in ho_cams]
    return SynthScene(
        cameras=cams,
        images=images,
        depths=depths,
        monodepths=monodepths,
        flows=flows,
        corruption=[tuple(map(float, c)) for c in corruption],
        heldout_cameras=ho_cams,
        heldout_images=[t[0] for t in ho],
        heldout_depths=[t[1] for t in ho],
    )
