"""Adam and the two-phase training schedule."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .losses import LossWeights, flow_loss, photometric, schedule_lambda_s, total_loss, tv_losses
from .raster import render
from .scene import unfreeze_covariance

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


class NumericalError(FloatingPointError):
    """Raised when a loss or gradient turns non-finite."""


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, shape) -> AdamState:
        return cls(np.zeros(shape), np.zeros(shape), 0)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float, name: str = "param") -> np.ndarray:
    """One Adam update; returns the new parameter array and updates ``state`` in place."""
    grad = np.asarray(grad, dtype=np.float64)
    if state.m.shape != np.shape(param) or grad.shape != np.shape(param):
        raise ValueError(f"{name}: state/gradient shape does not match parameter shape {np.shape(param)}")
    if not np.all(np.isfinite(grad)):
        raise NumericalError(f"non-finite gradient in parameter group {name!r}")
    state.t += 1
    state.m = BETA1 * state.m + (1.0 - BETA1) * grad
    state.v = BETA2 * state.v + (1.0 - BETA2) * grad * grad
    m_hat = state.m / (1.0 - BETA1**state.t)
    v_hat = state.v / (1.0 - BETA2**state.t)
    return param - lr * m_hat / (np.sqrt(v_hat) + EPS)


@dataclass
class TrainData:
    images: list  # (H, W, 3) arrays in [0, 1]
    correspondences: list  # losses.Correspondence


def _renormalize(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def train(bundle, data: TrainData, until: int | None = None, callback: Callable | None = None) -> list[dict]:
    """Run the schedule from ``bundle.iteration`` up to ``until`` (default: the end).

    One training view per iteration, round-robin. The first phase keeps
    isotropic spheres sized from the current depth; at the boundary every
    grid switches to free rotation/log-scale seeded with the same values.
    """
    cfg = bundle.config
    total = cfg.scaled_total_iters
    phase1 = cfg.scaled_phase1_iters
    stop = total if until is None else min(until, total)
    settings = bundle.raster_settings()
    history = []
    while bundle.iteration < stop:
        it = bundle.iteration
        if it >= phase1 and any(g.frozen_covariance for g in bundle.grids):
            depths = bundle.current_depths()
            for v, g in enumerate(bundle.grids):
                unfreeze_covariance(g, depths[v], bundle.cameras[v], cfg.radius_convention)
        view = it % bundle.n_views
        lam = schedule_lambda_s(it, total, cfg.lambda_ramp)
        weights = LossWeights(cfg.beta_m, cfg.beta_f, cfg.lambda_ssim, lam)
        groups = bundle.parameter_groups()
        params = [t for items in groups.values() for _, t in items]
        for t in params:
            t.zero_grad()

        with ad.Tape() as tape:
            cloud, slices = bundle.materialize_all()
            out = render(cloud, bundle.cameras[view], cfg.samples_per_pixel, settings)
            photo = photometric(out.color, data.images[view], cfg.lambda_ssim)
            if cfg.beta_m > 0:
                tv, mtv = tv_losses(out.depth, bundle.segmasks[view])
            else:
                tv = mtv = ad.Tensor(0.0)
            if cfg.beta_f > 0 and data.correspondences:
                fl = flow_loss([s.depth for s in slices], bundle.cameras, data.correspondences)
            else:
                fl = ad.Tensor(0.0)
            loss = total_loss(photo, tv, mtv, fl, weights)
            if not np.isfinite(loss.item()):
                raise NumericalError(f"non-finite loss at iteration {it}")
            ad.backward(loss)
            tape.clear()

        for group, items in groups.items():
            lr = cfg.lr_for(group)
            for name, t in items:
                state = bundle.optimizer_state.get(name)
                if state is None or state.m.shape != t.shape:
                    state = bundle.optimizer_state[name] = AdamState.zeros(t.shape)
                grad = np.zeros(t.shape) if t.grad is None else t.grad
                t.data = adam_step(t.data, grad, state, lr, name=f"{group}:{name}")
                t.grad = None
        for g in bundle.grids:
            np.clip(g.color_dc.data, 0.0, 1.0, out=g.color_dc.data)
            if not g.frozen_covariance:
                g.rotation.data = _renormalize(g.rotation.data)

        record = {
            "iteration": it,
            "view": view,
            "lambda_s": lam,
            "total": loss.item(),
            "photometric": photo.item(),
            "tv": tv.item(),
            "mtv": mtv.item(),
            "flow": fl.item(),
        }
        history.append(record)
        bundle.loss_history.append(record)
        bundle.iteration += 1
        if callback is not None:
            callback(record)
    return history
