"""Differentiable front-to-back splatting of a Gaussian cloud.

All Gaussians are globally sorted by view-space depth, binned per pixel and
composited at a fixed set of sub-pixel sample points whose results are
averaged. The backward pass replays each sample's compositing list and
treats the sort order as constant.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import COV_DILATION, Z_NEAR, Camera, covariance_3d, project, project_covariance

DET_EPS = 1e-12
N_GRAD = 10


@dataclass
class RasterSettings:
    cutoff_sigma: float = 3.0
    min_transmittance: float = 1e-4
    dilation: float = COV_DILATION
    z_near: float = Z_NEAR
    # backward accumulates into this many row-chunk buffers, merged in order
    grad_chunks: int = 8


@dataclass
class RenderOutput:
    color: Tensor  # (H, W, 3)
    depth: Tensor  # (H, W)
    accum_opacity: Tensor  # (H, W)


def sample_offsets(samples_per_pixel: int) -> np.ndarray:
    """Sub-pixel sample positions relative to the pixel's top-left corner."""
    if samples_per_pixel == 1:
        return np.array([[0.5, 0.5]])
    if samples_per_pixel == 4:
        return np.array([[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]])
    raise ValueError(f"samples_per_pixel must be 1 or 4, got {samples_per_pixel}")


def set_threads(n: int) -> None:
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


set_threads(os.cpu_count() or 1)


@njit(cache=True)
def _bin(order, x_lo, x_hi, y_lo, y_hi, h, w):
    counts = np.zeros(h * w + 1, np.int64)
    for k in order:
        for y in range(y_lo[k], y_hi[k] + 1):
            for x in range(x_lo[k], x_hi[k] + 1):
                counts[y * w + x + 1] += 1
    starts = np.cumsum(counts)
    lists = np.empty(starts[-1], np.int64)
    pos = starts[:-1].copy()
    for k in order:
        for y in range(y_lo[k], y_hi[k] + 1):
            for x in range(x_lo[k], x_hi[k] + 1):
                p = y * w + x
                lists[pos[p]] = k
                pos[p] += 1
    return starts, lists


@njit(parallel=True, cache=True)
def _forward(starts, lists, means, conic, opacity, colors, depth, offsets, h, w, cut2, tmin):
    out = np.zeros((h, w, 5))
    ns = offsets.shape[0]
    inv_ns = 1.0 / ns
    for y in prange(h):
        for x in range(w):
            p = y * w + x
            s0 = starts[p]
            s1 = starts[p + 1]
            for s in range(ns):
                px = x + offsets[s, 0]
                py = y + offsets[s, 1]
                t = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                d = 0.0
                for idx in range(s0, s1):
                    k = lists[idx]
                    dx = px - means[k, 0]
                    dy = py - means[k, 1]
                    q = conic[k, 0] * dx * dx + 2.0 * conic[k, 1] * dx * dy + conic[k, 2] * dy * dy
                    if q > cut2:
                        continue
                    gam = opacity[k] * np.exp(-0.5 * q)
                    wt = t * gam
                    r += wt * colors[k, 0]
                    g += wt * colors[k, 1]
                    b += wt * colors[k, 2]
                    d += wt * depth[k]
                    t *= 1.0 - gam
                    if t < tmin:
                        break
                out[y, x, 0] += r * inv_ns
                out[y, x, 1] += g * inv_ns
                out[y, x, 2] += b * inv_ns
                out[y, x, 3] += d * inv_ns
                out[y, x, 4] += (1.0 - t) * inv_ns
    return out


@njit(parallel=True, cache=True)
def _backward(starts, lists, means, conic, opacity, colors, depth, offsets, h, w, cut2, tmin, gout, n, nchunks, maxlen):
    # columns: mean x/y, conic A/B/C, opacity, rgb, depth
    buf = np.zeros((nchunks, n, N_GRAD))
    ns = offsets.shape[0]
    inv_ns = 1.0 / ns
    rows = (h + nchunks - 1) // nchunks
    for c in prange(nchunks):
        ks = np.empty(maxlen, np.int64)
        gams = np.empty(maxlen)
        ts = np.empty(maxlen)
        gs = np.empty(maxlen)
        for y in range(c * rows, min(h, (c + 1) * rows)):
            for x in range(w):
                p = y * w + x
                s0 = starts[p]
                s1 = starts[p + 1]
                if s1 == s0:
                    continue
                gr = gout[y, x, 0] * inv_ns
                gg = gout[y, x, 1] * inv_ns
                gb = gout[y, x, 2] * inv_ns
                gd = gout[y, x, 3] * inv_ns
                ga = gout[y, x, 4] * inv_ns
                for s in range(ns):
                    px = x + offsets[s, 0]
                    py = y + offsets[s, 1]
                    t = 1.0
                    m = 0
                    for idx in range(s0, s1):
                        k = lists[idx]
                        dx = px - means[k, 0]
                        dy = py - means[k, 1]
                        q = conic[k, 0] * dx * dx + 2.0 * conic[k, 1] * dx * dy + conic[k, 2] * dy * dy
                        if q > cut2:
                            continue
                        e = np.exp(-0.5 * q)
                        gam = opacity[k] * e
                        ks[m] = k
                        gams[m] = gam
                        gs[m] = e
                        ts[m] = t
                        m += 1
                        t *= 1.0 - gam
                        if t < tmin:
                            break
                    t_end = t
                    sr = 0.0
                    sg = 0.0
                    sb = 0.0
                    sd = 0.0
                    for j in range(m - 1, -1, -1):
                        k = ks[j]
                        gam = gams[j]
                        tk = ts[j]
                        wt = tk * gam
                        one_m = 1.0 - gam
                        dgam = (
                            gr * (tk * colors[k, 0] - sr / one_m)
                            + gg * (tk * colors[k, 1] - sg / one_m)
                            + gb * (tk * colors[k, 2] - sb / one_m)
                            + gd * (tk * depth[k] - sd / one_m)
                            + ga * (t_end / one_m)
                        )
                        buf[c, k, 6] += gr * wt
                        buf[c, k, 7] += gg * wt
                        buf[c, k, 8] += gb * wt
                        buf[c, k, 9] += gd * wt
                        sr += colors[k, 0] * wt
                        sg += colors[k, 1] * wt
                        sb += colors[k, 2] * wt
                        sd += depth[k] * wt

                        dx = px - means[k, 0]
                        dy = py - means[k, 1]
                        buf[c, k, 5] += dgam * gs[j]
                        dq = -0.5 * dgam * gam
                        buf[c, k, 0] -= dq * 2.0 * (conic[k, 0] * dx + conic[k, 1] * dy)
                        buf[c, k, 1] -= dq * 2.0 * (conic[k, 1] * dx + conic[k, 2] * dy)
                        buf[c, k, 2] += dq * dx * dx
                        buf[c, k, 3] += dq * 2.0 * dx * dy
                        buf[c, k, 4] += dq * dy * dy
    return buf


def _conic(cov: np.ndarray) -> np.ndarray:
    """Inverse of each 2x2 covariance (a, b, c) as (A, B, C); zero where singular."""
    det = cov[:, 0] * cov[:, 2] - cov[:, 1] ** 2
    inv = np.where(det > 0, 1.0 / np.where(det > 0, det, 1.0), 0.0)
    return np.stack([cov[:, 2] * inv, -cov[:, 1] * inv, cov[:, 0] * inv], axis=-1)


def _conic_vjp(conic: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Map gradients w.r.t. (A, B, C) to gradients w.r.t. (a, b, c).

    With M = inv(S), dL/dS = -M G M where G is the symmetric gradient of M;
    the off-diagonal entry appears twice in both matrices.
    """
    A, B, C = conic[:, 0], conic[:, 1], conic[:, 2]
    gA, gB, gC = g[:, 0], 0.5 * g[:, 1], g[:, 2]
    # (G M) then M (G M), written out for symmetric 2x2
    gm00 = gA * A + gB * B
    gm01 = gA * B + gB * C
    gm10 = gB * A + gC * B
    gm11 = gB * B + gC * C
    s00 = A * gm00 + B * gm10
    s01 = A * gm01 + B * gm11
    s11 = B * gm01 + C * gm11
    return -np.stack([s00, 2.0 * s01, s11], axis=-1)


def _prepare(means, cov, valid, depth, offsets, h, w, cutoff_sigma):
    """Depth order of drawable Gaussians and their pixel bounding boxes."""
    det = cov[:, 0] * cov[:, 2] - cov[:, 1] ** 2
    ok = (
        valid
        & (det >= DET_EPS)
        & (cov[:, 0] > 0)
        & np.all(np.isfinite(means), axis=1)
        & np.all(np.isfinite(cov), axis=1)
    )
    rx = cutoff_sigma * np.sqrt(np.where(ok, cov[:, 0], 0.0))
    ry = cutoff_sigma * np.sqrt(np.where(ok, cov[:, 2], 0.0))
    mx = np.where(ok, means[:, 0], -1e9)
    my = np.where(ok, means[:, 1], -1e9)
    # pixel x is touched when some sample x + off lies inside [mx - rx, mx + rx]
    x_lo = np.ceil(mx - rx - offsets[:, 0].max())
    x_hi = np.floor(mx + rx - offsets[:, 0].min())
    y_lo = np.ceil(my - ry - offsets[:, 1].max())
    y_hi = np.floor(my + ry - offsets[:, 1].min())
    ok &= (x_hi >= 0) & (x_lo <= w - 1) & (y_hi >= 0) & (y_lo <= h - 1)
    x_lo = np.clip(x_lo, 0, w - 1).astype(np.int64)
    x_hi = np.clip(x_hi, 0, w - 1).astype(np.int64)
    y_lo = np.clip(y_lo, 0, h - 1).astype(np.int64)
    y_hi = np.clip(y_hi, 0, h - 1).astype(np.int64)
    idx = np.nonzero(ok)[0]
    order = idx[np.argsort(depth[idx], kind="stable")]
    return order, x_lo, x_hi, y_lo, y_hi


def rasterize(
    means: Tensor,
    cov2d: Tensor,
    opacity: Tensor,
    colors: Tensor,
    depth: Tensor,
    valid: np.ndarray,
    height: int,
    width: int,
    samples_per_pixel: int = 4,
    settings: RasterSettings | None = None,
) -> Tensor:
    """Composite projected Gaussians into an (H, W, 5) image: rgb, depth, accumulated opacity.

    means (N, 2) pixel coords, cov2d (N, 3) as (a, b, c), opacity (N,),
    colors (N, 3), depth (N,) view-space z. ``valid`` marks Gaussians in
    front of the near plane.
    """
    settings = settings or RasterSettings()
    offsets = sample_offsets(samples_per_pixel)
    n = means.shape[0]
    if n == 0:
        return ad.custom_op(np.zeros((height, width, 5)), (means, cov2d, opacity, colors, depth), lambda g: (None,) * 5)
    m, cv, op, col, dp = (np.ascontiguousarray(t.data) for t in (means, cov2d, opacity, colors, depth))
    order, x_lo, x_hi, y_lo, y_hi = _prepare(m, cv, np.asarray(valid, bool), dp, offsets, height, width, settings.cutoff_sigma)
    starts, lists = _bin(order, x_lo, x_hi, y_lo, y_hi, height, width)
    cut2 = settings.cutoff_sigma**2
    tmin = settings.min_transmittance
    con = _conic(cv)
    out = _forward(starts, lists, m, con, op, col, dp, offsets, height, width, cut2, tmin)

    def bw(g):
        maxlen = int(np.diff(starts).max()) if starts.size > 1 else 0
        buf = _backward(
            starts, lists, m, con, op, col, dp, offsets, height, width, cut2, tmin,
            np.ascontiguousarray(g), n, settings.grad_chunks, max(maxlen, 1),
        )
        total = buf[0].copy()
        for c in range(1, buf.shape[0]):
            total += buf[c]
        return total[:, 0:2], _conic_vjp(con, total[:, 2:5]), total[:, 5], total[:, 6:9], total[:, 9]

    return ad.custom_op(out, (means, cov2d, opacity, colors, depth), bw)


def render(cloud, camera: Camera, samples_per_pixel: int = 4, settings: RasterSettings | None = None) -> RenderOutput:
    """Render a Gaussian cloud (positions, scales, quats, opacity, colors) from ``camera``."""
    settings = settings or RasterSettings()
    uvz, valid = project(camera, cloud.positions, settings.z_near)
    sigma = covariance_3d(cloud.scales, cloud.quats)
    cov2d = project_covariance(camera, cloud.positions, sigma, settings.dilation)
    img = rasterize(
        uvz[:, 0:2], cov2d, cloud.opacity, cloud.colors, uvz[:, 2], valid,
        camera.height, camera.width, samples_per_pixel, settings,
    )
    return RenderOutput(color=img[:, :, 0:3], depth=img[:, :, 3], accum_opacity=img[:, :, 4])


def occlusion_mask(render_out: RenderOutput, threshold: float = 1e-3) -> np.ndarray:
    """1 where accumulated opacity reaches ``threshold`` (reconstructed), else 0."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return (render_out.accum_opacity.data >= threshold).astype(np.uint8)
