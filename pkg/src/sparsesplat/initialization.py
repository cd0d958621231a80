"""Starting point of the optimization.

Flow consistency masks, coarse per-view scale/offset alignment of the
monocular depths, depth-based segmentation and the initial bundle.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from . import decoder as dec
from .autodiff import Tensor
from .bundle import AlignParams, SceneBundle
from .config import TrainConfig
from .geometry import Camera, ray_basis
from .losses import Correspondence, build_correspondences
from .optim import AdamState, adam_step
from .scene import PixelGaussianGrid, SegMask

log = logging.getLogger(__name__)

MIN_CORRESPONDENCES = 100
MIN_SCALE = 1e-3
RESIDUAL_ZERO = 1e-12


def sample_flow(flow: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear lookup of an (H, W, 2) flow at pixel coordinates ``uv``."""
    with ad.no_grad():
        return np.stack([ad.bilinear_lookup(flow[..., k], uv).data for k in range(2)], axis=-1)


def consistency_mask(flow_ij: np.ndarray, flow_ji: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Forward-backward check: 1 where F_ij(p) + F_ji(p + F_ij(p)) stays within ``tau`` pixels."""
    flow_ij = np.asarray(flow_ij, dtype=np.float64)
    flow_ji = np.asarray(flow_ji, dtype=np.float64)
    if flow_ij.shape != flow_ji.shape or flow_ij.shape[-1] != 2:
        raise ValueError(f"shape mismatch: {flow_ij.shape} vs {flow_ji.shape}")
    if tau <= 0:
        raise ValueError("tau must be positive")
    h, w = flow_ij.shape[:2]
    v, u = np.mgrid[0:h, 0:w]
    p = np.stack([u + 0.5, v + 0.5], axis=-1)
    q = p + flow_ij
    inside = (q[..., 0] >= 0) & (q[..., 0] <= w) & (q[..., 1] >= 0) & (q[..., 1] <= h)
    back = sample_flow(flow_ji, q)
    err = np.linalg.norm(flow_ij + back, axis=-1)
    return (inside & (err <= tau) & np.all(np.isfinite(flow_ij), axis=-1)).astype(np.uint8)


def all_consistency_masks(flows: dict, tau: float = 1.0) -> dict:
    masks = {}
    for (i, j), f in flows.items():
        if (j, i) not in flows:
            raise ValueError(f"flow {i}->{j} has no reverse flow {j}->{i}")
        masks[(i, j)] = consistency_mask(f, flows[(j, i)], tau)
    return masks


def _alignment_terms(monodepths, corrs, cameras):
    """Per pair, the pieces of x = a * (s * Dm + o) + b on both ends.

    Depth is affine in (s, o), so the bilinear lookups are done once here.
    """
    terms = []
    for c in corrs:
        if len(c) == 0:
            continue
        ai, bi = ray_basis(cameras[c.src], c.p_uv)
        aj, bj = ray_basis(cameras[c.dst], c.q_uv)
        mi = monodepths[c.src].reshape(-1)[c.pixel_index]
        with ad.no_grad():
            mj = ad.bilinear_lookup(monodepths[c.dst], c.q_uv).data
        terms.append((c.src, c.dst, ai * mi[:, None], ai, bi, aj * mj[:, None], aj, bj))
    return terms


def alignment_objective(terms, scales, offsets):
    """Summed L1 correspondence distance and its (sub)gradient w.r.t. scales and offsets.

    Residuals at round-off level count as zero (0 is in the L1 subgradient there).
    """
    n = len(scales)
    gs, go = np.zeros(n), np.zeros(n)
    total = 0.0
    for i, j, ai_m, ai, bi, aj_m, aj, bj in terms:
        r = (scales[i] * ai_m + offsets[i] * ai + bi) - (scales[j] * aj_m + offsets[j] * aj + bj)
        scale = np.abs(scales[i] * ai_m).max(initial=1.0) + np.abs(bi).max(initial=0.0)
        sg = np.where(np.abs(r) > RESIDUAL_ZERO * scale, np.sign(r), 0.0)
        total += float(np.abs(r).sum())
        gs[i] += np.sum(sg * ai_m)
        go[i] += np.sum(sg * ai)
        gs[j] -= np.sum(sg * aj_m)
        go[j] -= np.sum(sg * aj)
    return total, gs, go


def least_squares_alignment(terms, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Scales/offsets minimizing the squared correspondence distance, view 0 fixed.

    The residual is linear in (s, o), so this is one small linear solve.
    """
    rows, rhs = [], []
    for i, j, ai_m, ai, bi, aj_m, aj, bj in terms:
        a = np.zeros((ai.shape[0], 3, 2 * n))
        a[:, :, 2 * i] += ai_m
        a[:, :, 2 * i + 1] += ai
        a[:, :, 2 * j] -= aj_m
        a[:, :, 2 * j + 1] -= aj
        rows.append(a.reshape(-1, 2 * n))
        rhs.append((bj - bi).reshape(-1))
    full = np.concatenate(rows)
    # view 0 is pinned at s=1, o=0: its scale column moves to the right-hand side
    a = full[:, 2:]
    b = np.concatenate(rhs) - full[:, 0]
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    scales = np.concatenate([[1.0], sol[0::2]])
    offsets = np.concatenate([[0.0], sol[1::2]])
    return np.maximum(scales, MIN_SCALE), offsets


def align_depths(
    monodepths: list[np.ndarray],
    corrs: list[Correspondence],
    cameras: list[Camera],
    iters: int = 1000,
    lr: float = 1e-2,
    warm_start: bool = True,
) -> AlignParams:
    """Per-view scale/offset making monocular depths agree in 3D along flow.

    Minimizes the L1 distance between unprojected corresponding pixels with
    Adam, starting from the least-squares solution of the same residuals.
    View 0 is held at s=1, o=0 to fix the gauge. Offsets are optimized
    about each view's mean depth (d = s * (Dm - mean) + o') so s and o are not
    fighting each other, and the step size follows a cosine decay so the L1
    objective settles instead of chattering at the lr scale.
    """
    n = len(monodepths)
    if n < 2:
        raise ValueError("alignment needs at least 2 views")
    counts = {}
    for c in corrs:
        counts[(c.src, c.dst)] = len(c)
        if len(c) < MIN_CORRESPONDENCES:
            log.warning("only %d consistent correspondences for pair %d->%d", len(c), c.src, c.dst)
    total = sum(counts.values())
    if total == 0:
        raise ValueError("no consistent correspondences between any views; cannot align depths")

    dm = [np.asarray(d, dtype=np.float64) for d in monodepths]
    terms = _alignment_terms(dm, corrs, cameras)
    mu = np.array([d.mean() for d in dm])
    s, o = least_squares_alignment(terms, n) if warm_start else (np.ones(n), np.zeros(n))
    oc = o + s * mu  # centered offset o' = o + s * mu
    states = {(k, i): AdamState.zeros(()) for k in ("s", "o") for i in range(1, n)}
    history = []
    for it in range(iters):
        loss, gs, go = alignment_objective(terms, s, oc - s * mu)
        history.append(loss / total)
        # chain rule through o = o' - s * mu
        gs_c = gs - go * mu
        step = lr * 0.5 * (1.0 + np.cos(np.pi * it / iters))
        for i in range(1, n):
            s[i] = adam_step(s[i], gs_c[i] / total, states[("s", i)], step, name=f"align.s{i}")
            oc[i] = adam_step(oc[i], go[i] / total, states[("o", i)], step, name=f"align.o{i}")
            s[i] = max(s[i], MIN_SCALE)
    offsets = oc - s * mu
    offsets[0] = 0.0
    history.append(alignment_objective(terms, s, offsets)[0] / total)
    return AlignParams(scales=s, offsets=offsets, history=history)


def segment_by_depth(depth: np.ndarray, channels: int = 5) -> SegMask:
    """Split a view into ``channels`` equal-population disparity bins.

    Ranks (ties share their mean rank) are binned, so the result depends only
    on the depth ordering.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    disp = 1.0 / (1.0 + depth)
    flat = disp.ravel()
    if np.all(flat == flat[0]):
        return SegMask(np.zeros(depth.shape, np.int64), channels)
    ranks = rankdata(flat, method="average") - 1.0
    labels = np.floor(channels * (ranks + 0.5) / flat.size).astype(np.int64)
    return SegMask(np.clip(labels, 0, channels - 1).reshape(depth.shape), channels)


def depth_range(depths: list[np.ndarray]) -> float:
    lo = min(float(d.min()) for d in depths)
    hi = max(float(d.max()) for d in depths)
    return hi - lo if hi > lo else max(hi, 1e-3)


def init_scene(
    images: list[np.ndarray],
    depths_init: list[np.ndarray],
    cameras: list[Camera],
    segmasks: list[SegMask] | None = None,
    config: TrainConfig | None = None,
    alpha_init: float | None = None,
    align: AlignParams | None = None,
) -> SceneBundle:
    """Per-pixel grids from images and aligned depths, plus fresh decoders."""
    config = config or TrainConfig()
    n = len(images)
    if not (n == len(depths_init) == len(cameras)):
        raise ValueError("images, depths and cameras must have the same length")
    h, w = images[0].shape[:2]
    for v in range(n):
        if images[v].shape[:2] != (h, w) or depths_init[v].shape != (h, w):
            raise ValueError(f"view {v}: resolution mismatch, expected {h}x{w}")
        if (cameras[v].height, cameras[v].width) != (h, w):
            raise ValueError(f"view {v}: camera is {cameras[v].width}x{cameras[v].height}, image is {w}x{h}")
        if np.any(depths_init[v] <= 0):
            raise ValueError(f"view {v}: initial depth must be positive")
    if alpha_init is None:
        alpha_init = config.alpha_init(n)
    if segmasks is None:
        segmasks = [segment_by_depth(d, config.channels) for d in depths_init]

    grids = [PixelGaussianGrid.create(v, depths_init[v], images[v][..., :3], alpha_init) for v in range(n)]
    gain = config.depth_gain_factor * depth_range(depths_init)
    rng = np.random.default_rng(config.seed)
    bundle = SceneBundle(
        cameras=list(cameras), grids=grids, segmasks=list(segmasks), config=config, depth_gain=gain, align=align
    )
    if config.use_decoder:
        bundle.depth_decoder = dec.build(h, w, dec.capacity_for("depth", n), config.channels, "depth", rng)
        bundle.opacity_decoder = dec.build(h, w, dec.capacity_for("opacity", n), config.channels, "opacity", rng)
    else:
        bundle.depth_residuals = [Tensor(np.zeros((h, w)), requires_grad=True) for _ in range(n)]
        bundle.opacity_residuals = [Tensor(np.zeros((h, w)), requires_grad=True) for _ in range(n)]
    return bundle


def initialize(
    images: list[np.ndarray],
    monodepths: list[np.ndarray],
    cameras: list[Camera],
    flows: dict,
    config: TrainConfig | None = None,
) -> tuple[SceneBundle, dict]:
    """Masks -> alignment -> segmentation -> bundle. Returns the bundle and the masks."""
    config = config or TrainConfig()
    masks = all_consistency_masks(flows, config.tau)
    corrs = build_correspondences(flows, masks, cameras)
    if config.use_alignment:
        align = align_depths(monodepths, corrs, cameras, config.align_iters, config.align_lr)
    else:
        align = AlignParams(np.ones(len(monodepths)), np.zeros(len(monodepths)))
    depths = [align.scales[i] * monodepths[i] + align.offsets[i] for i in range(len(monodepths))]
    depths = [np.maximum(d, 1e-3) for d in depths]
    segmasks = [segment_by_depth(d, config.channels) for d in monodepths]
    bundle = init_scene(images, depths, cameras, segmasks, config, align=align)
    return bundle, masks

