"""Training objectives: photometric, disparity TV / masked TV, flow, total."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import Camera, unproject_g
from .scene import SegMask

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class LossWeights:
    beta_m: float = 5.0
    beta_f: float = 0.1
    lambda_ssim: float = 0.2
    lambda_s: float = 0.0

    def __post_init__(self):
        if self.beta_m < 0 or self.beta_f < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 <= self.lambda_s <= 1.0:
            raise ValueError(f"lambda_s must lie in [0, 1], got {self.lambda_s}")


@dataclass
class Correspondence:
    """Consistent pixel pairs of the ordered view pair (src -> dst)."""

    src: int
    dst: int
    pixel_index: np.ndarray  # (M,) flat index into the src image
    p_uv: np.ndarray  # (M, 2) src pixel centers
    q_uv: np.ndarray  # (M, 2) flow targets in dst

    def __len__(self) -> int:
        return len(self.pixel_index)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _blur_array(a: np.ndarray, win: np.ndarray) -> np.ndarray:
    out = correlate1d(a, win, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, win, axis=1, mode="constant", cval=0.0)


def gaussian_blur(x) -> Tensor:
    """Separable Gaussian filter over the first two axes, zero padded, same size.

    The kernel is symmetric, so the backward pass is the same filter.
    """
    x = ad.as_tensor(x)
    win = gaussian_window()
    return ad.custom_op(_blur_array(x.data, win), (x,), lambda g: (_blur_array(g, win),))


def ssim_map(img, target: np.ndarray) -> Tensor:
    """Per-pixel, per-channel SSIM of ``img`` (differentiable) against a fixed ``target``."""
    img = ad.as_tensor(img)
    target = np.asarray(target, dtype=np.float64)
    mu_y = _blur_array(target, gaussian_window())
    syy = _blur_array(target * target, gaussian_window()) - mu_y * mu_y
    mu_x = gaussian_blur(img)
    sxx = ad.sub(gaussian_blur(ad.mul(img, img)), ad.mul(mu_x, mu_x))
    sxy = ad.sub(gaussian_blur(ad.mul(img, target)), ad.mul(mu_x, mu_y))
    num = ad.mul(ad.add(ad.mul(mu_x, 2.0 * mu_y), SSIM_C1), ad.add(ad.mul(sxy, 2.0), SSIM_C2))
    den = ad.mul(ad.add(ad.mul(mu_x, mu_x), mu_y * mu_y + SSIM_C1), ad.add(sxx, syy + SSIM_C2))
    return ad.div(num, den)


def ssim(img, target: np.ndarray) -> Tensor:
    """Mean SSIM, both images (H, W, C) in [0, 1]."""
    return ad.mean(ssim_map(img, target))


def photometric(color, target: np.ndarray, lambda_ssim: float = 0.2) -> Tensor:
    """(1 - lambda) * L1 + lambda * (1 - SSIM)."""
    color = ad.as_tensor(color)
    target = np.asarray(target, dtype=np.float64)
    if color.shape != target.shape:
        raise ValueError(f"shape mismatch: render {color.shape} vs target {target.shape}")
    l1 = ad.mean(ad.abs_(ad.sub(color, target)))
    if lambda_ssim == 0.0:
        return l1
    return ad.add(ad.mul(l1, 1.0 - lambda_ssim), ad.mul(ad.sub(1.0, ssim(color, target)), lambda_ssim))


def disparity(depth) -> Tensor:
    return ad.reciprocal(ad.add(depth, 1.0))


def tv_losses(depth, seg: SegMask) -> tuple[Tensor, Tensor]:
    """Total variation of 1/(1+depth), globally and within segmentation regions.

    Forward differences over the (H-1) x (W-1) interior; the masked variant
    drops every difference whose two pixels carry different labels.
    """
    depth = ad.as_tensor(depth)
    if depth.shape != seg.shape:
        raise ValueError(f"shape mismatch: depth {depth.shape} vs mask {seg.shape}")
    w = disparity(depth)
    dx = ad.abs_(ad.sub(w[:-1, 1:], w[:-1, :-1]))
    dy = ad.abs_(ad.sub(w[1:, :-1], w[:-1, :-1]))
    lab = seg.labels
    same_x = (lab[:-1, 1:] == lab[:-1, :-1]).astype(np.float64)
    same_y = (lab[1:, :-1] == lab[:-1, :-1]).astype(np.float64)
    tv = ad.mean(ad.add(dx, dy))
    mtv = ad.mean(ad.add(ad.mul(dx, same_x), ad.mul(dy, same_y)))
    return tv, mtv


def schedule_lambda_s(iteration: int, total_iterations: int, shape: str = "linear") -> float:
    """Blend weight of the masked TV term: 0 at the start, 1 at the end."""
    if total_iterations <= 0:
        return 1.0
    if not 0 <= iteration <= total_iterations:
        raise ValueError(f"iteration {iteration} outside [0, {total_iterations}]")
    t = iteration / total_iterations
    if shape == "linear":
        return t
    if shape == "cosine":
        return 0.5 - 0.5 * math.cos(math.pi * t)
    raise ValueError(f"unknown ramp shape {shape!r}")


def build_correspondences(flows: dict, masks: dict, cameras: list[Camera]) -> list[Correspondence]:
    """Turn per-pair flows (H, W, 2) and consistency masks into index lists."""
    out = []
    for (i, j) in sorted(flows):
        flow = np.asarray(flows[(i, j)], dtype=np.float64)
        mask = np.asarray(masks[(i, j)]).astype(bool)
        cam = cameras[i]
        v, u = np.nonzero(mask)
        p_uv = np.stack([u + 0.5, v + 0.5], axis=-1).astype(np.float64)
        q_uv = p_uv + flow[v, u]
        out.append(Correspondence(i, j, v * cam.width + u, p_uv, q_uv))
    return out


def correspondence_distance(depths: list, cameras: list[Camera], corrs: list[Correspondence]) -> tuple[Tensor, int]:
    """Sum over pairs of |g(D_i[p], p) - g(D_j[q], q)|_1 and the pair count."""
    total = None
    count = 0
    for c in corrs:
        if len(c) == 0:
            continue
        di = ad.index(ad.reshape(depths[c.src], (-1,)), c.pixel_index)
        dj = ad.bilinear_lookup(depths[c.dst], c.q_uv)
        xi = unproject_g(cameras[c.src], c.p_uv, di)
        xj = unproject_g(cameras[c.dst], c.q_uv, dj)
        term = ad.sum_(ad.abs_(ad.sub(xi, xj)))
        total = term if total is None else ad.add(total, term)
        count += len(c)
    if total is None:
        return Tensor(0.0), 0
    return total, count


def flow_loss(depths: list, cameras: list[Camera], corrs: list[Correspondence]) -> Tensor:
    """Mean L1 distance between 3D points of flow-corresponding pixels.

    ``depths`` are the current per-view depth maps D_init + dD (tensors).
    Normalized by the number of consistent pixels; 0 when there are none.
    """
    total, count = correspondence_distance(depths, cameras, corrs)
    if count == 0:
        return total
    return ad.mul(total, 1.0 / count)


def total_loss(photo, tv, mtv, flow, weights: LossWeights) -> Tensor:
    multi = ad.add(ad.mul(tv, 1.0 - weights.lambda_s), ad.mul(mtv, weights.lambda_s))
    return ad.add(ad.add(photo, ad.mul(multi, weights.beta_m)), ad.mul(flow, weights.beta_f))
