"""End-to-end steps shared by the CLI and the tests: synth, init, train, render, eval."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import fileio
from .bundle import SceneBundle
from .config import TrainConfig
from .geometry import Camera
from .initialization import all_consistency_masks, initialize
from .losses import build_correspondences, ssim_map
from .optim import TrainData, train
from .raster import RenderOutput, occlusion_mask, render
from .synth import SynthSpec, generate

log = logging.getLogger(__name__)

# iteration structure and constants echoed into every report
REFERENCE_CONSTANTS = {
    "align_iters": 1000,
    "total_iters": 13000,
    "phase1_iters": 8000,
    "phase2_iters": 5000,
    "beta_m": 5.0,
    "beta_f": 0.1,
    "channels": 5,
    "alpha_init_by_views": {"2": 0.6, "3": 0.5, "4": 0.35},
    "occlusion_threshold": 1e-3,
}


def write_synth_dataset(out_dir, spec: SynthSpec) -> Path:
    """Generate an analytic scene and write it as a manifest-described dataset."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scene = generate(spec)
    views = []
    for i, (img, md, cam) in enumerate(zip(scene.images, scene.monodepths, scene.cameras)):
        fileio.write_png(out_dir / f"view{i}.png", img)
        fileio.write_pfm(out_dir / f"view{i}_depth.pfm", md.astype(np.float32))
        fileio.write_pfm(out_dir / f"view{i}_gt_depth.pfm", scene.depths[i].astype(np.float32))
        views.append({"image": f"view{i}.png", "depth": f"view{i}_depth.pfm", "camera": cam.to_dict()})
    flows = []
    for (i, j), f in sorted(scene.flows.items()):
        name = f"flow_{i}_{j}.flo"
        fileio.write_flo(out_dir / name, f.astype(np.float32))
        flows.append({"src": i, "dst": j, "file": name})
    heldout = []
    for k, (cam, img, dep) in enumerate(zip(scene.heldout_cameras, scene.heldout_images, scene.heldout_depths)):
        fileio.write_png(out_dir / f"heldout{k}.png", img)
        fileio.write_pfm(out_dir / f"heldout{k}_depth.pfm", dep.astype(np.float32))
        heldout.append({"name": f"heldout{k}", "image": f"heldout{k}.png", "depth": f"heldout{k}_depth.pfm",
                        "camera": cam.to_dict()})
    zs = [p.z for p in spec.planes]
    manifest = {
        "views": views,
        "flows": flows,
        "heldout": heldout,
        "output": "out",
        "meta": {
            "generator": spec.to_dict(),
            "planted_corruption": [list(c) for c in scene.corruption],
            "depth_range": max(zs) - min(zs),
        },
    }
    path = out_dir / "manifest.json"
    fileio.write_json(path, manifest)
    return path


def correspondences(dataset: fileio.Dataset, tau: float):
    masks = all_consistency_masks(dataset.flows, tau)
    return masks, build_correspondences(dataset.flows, masks, dataset.cameras)


def run_init(dataset: fileio.Dataset, config: TrainConfig) -> SceneBundle:
    if dataset.n_views < 2:
        raise fileio.DataError("initialization needs at least 2 input views")
    if not dataset.flows:
        raise fileio.DataError("manifest lists no flows; alignment and the flow loss need them")
    h, w = dataset.images[0].shape[:2]
    if config.use_decoder and (h % 16 or w % 16):
        raise fileio.DataError(f"{dataset.root}: images are {w}x{h}; the decoder needs sides divisible by 16")
    bundle, _ = initialize(dataset.images, dataset.monodepths, dataset.cameras, dataset.flows, config)
    return bundle


def run_train(bundle: SceneBundle, dataset: fileio.Dataset, until: int | None = None, callback=None) -> list[dict]:
    _, corrs = correspondences(dataset, bundle.config.tau)
    return train(bundle, TrainData(dataset.images, corrs), until=until, callback=callback)


def render_view(bundle: SceneBundle, camera: Camera, samples_per_pixel: int | None = None) -> RenderOutput:
    spp = bundle.config.samples_per_pixel if samples_per_pixel is None else samples_per_pixel
    with ad.no_grad():
        cloud, _ = bundle.materialize_all()
        return render(cloud, camera, spp, bundle.raster_settings())


def surface_depth(out: RenderOutput) -> np.ndarray:
    """Composited depth divided by accumulated opacity (0 where nothing was drawn)."""
    acc = out.accum_opacity.data
    return np.where(acc > 0, out.depth.data / np.where(acc > 0, acc, 1.0), 0.0)


def masked_psnr(img: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float | None:
    m = mask.astype(bool)
    if not m.any():
        return None
    mse = float(np.mean((img[m] - target[m]) ** 2))
    return float("inf") if mse == 0 else float(-10.0 * np.log10(mse))


def masked_ssim(img: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float | None:
    m = mask.astype(bool)
    if not m.any():
        return None
    with ad.no_grad():
        smap = ssim_map(img, target).data
    return float(smap[m].mean())


def evaluate(bundle: SceneBundle, dataset: fileio.Dataset, out_dir=None, depth_range_value: float | None = None) -> dict:
    """Render every held-out view and score it on the non-occluded pixels."""
    cfg = bundle.config
    if not dataset.heldout:
        raise fileio.DataError("manifest has no held-out views to evaluate")
    if depth_range_value is None:
        depth_range_value = dataset.meta.get("depth_range")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    views = []
    for hv in dataset.heldout:
        out = render_view(bundle, hv.camera)
        mask = occlusion_mask(out, cfg.occlusion_threshold)
        color = np.clip(out.color.data, 0.0, 1.0)
        depth = surface_depth(out)
        entry = {"name": hv.name, "coverage": float(mask.mean()), "mean_accum_opacity": None,
                 "psnr": None, "ssim": None, "depth_mae": None}
        if mask.any():
            entry["mean_accum_opacity"] = float(out.accum_opacity.data[mask.astype(bool)].mean())
        if hv.image is not None:
            entry["psnr"] = masked_psnr(color, hv.image, mask)
            entry["ssim"] = masked_ssim(color, hv.image, mask)
        if hv.depth is not None and mask.any():
            entry["depth_mae"] = float(np.abs(depth - hv.depth)[mask.astype(bool)].mean())
            if depth_range_value:
                entry["depth_mae_fraction_of_range"] = entry["depth_mae"] / depth_range_value
        if out_dir is not None:
            fileio.write_png(Path(out_dir) / f"{hv.name}.png", color)
            fileio.write_pfm(Path(out_dir) / f"{hv.name}_depth.pfm", depth.astype(np.float32))
        views.append(entry)

    def avg(key):
        vals = [v[key] for v in views if v.get(key) is not None]
        return float(np.mean(vals)) if vals else None

    report = {
        "iteration": bundle.iteration,
        "config": cfg.to_dict(),
        "constants": dict(REFERENCE_CONSTANTS),
        "schedule": {
            "align_iters": cfg.align_iters,
            "total_iters": cfg.total_iters,
            "phase1_iters": cfg.phase1_iters,
            "phase2_iters": cfg.total_iters - cfg.phase1_iters,
            "scale_factor": cfg.scale_factor,
            "scaled_total_iters": cfg.scaled_total_iters,
            "scaled_phase1_iters": cfg.scaled_phase1_iters,
        },
        "align": None if bundle.align is None else {
            "scales": bundle.align.scales.tolist(), "offsets": bundle.align.offsets.tolist()},
        "depth_range": depth_range_value,
        "views": views,
        "mean": {k: avg(k) for k in ("psnr", "ssim", "coverage", "depth_mae", "depth_mae_fraction_of_range",
                                     "mean_accum_opacity")},
    }
    if out_dir is not None:
        fileio.write_json(Path(out_dir) / "report.json", _json_safe(report))
    return report


def _json_safe(obj):
    if isinstance(obj, float) and not np.isfinite(obj):
        return None if np.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    return obj

