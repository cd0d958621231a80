"""Central finite-difference checks for every differentiable op.

Each trial draws fresh inputs, a random output weighting w and a random
direction v, and compares <grad(sum(w * f(x))), v> with the central
difference of sum(w * f(x +- eps v)). Inputs close to a kink (abs at 0,
clamp bounds, the splat cutoff, early termination) are redrawn.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import decoder as dec
from .autodiff import Tensor
from .geometry import Camera, covariance_3d, look_at_pose, project, project_covariance, unproject_g
from .losses import Correspondence, LossWeights, flow_loss, photometric, ssim, total_loss, tv_losses
from .raster import RasterSettings, _conic, render, sample_offsets
from .scene import GaussianCloud, PixelGaussianGrid, SegMask, materialize

EPS = 1e-5
TOL = 1e-4
TOL_RASTER = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float
    trials: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def rel_err(a: float, b: float, floor: float = 1e-10) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def directional_check(fn: Callable, arrays: list[np.ndarray], rng, eps: float = EPS, same_piece=None) -> float:
    """Relative error between analytic and central-difference directional derivatives.

    ``same_piece(a, b)``, when given, tells whether two input sets lie on the
    same smooth piece of a piecewise-smooth ``fn``; directions whose +-eps
    probes leave the piece are redrawn.
    """
    with ad.no_grad():
        out0 = fn(*[Tensor(a) for a in arrays])
    w = rng.standard_normal(out0.shape)
    for _ in range(100):
        vs = [rng.standard_normal(a.shape) for a in arrays]
        if same_piece is None or all(
            same_piece(arrays, [a + sgn * eps * v for a, v in zip(arrays, vs)]) for sgn in (1.0, -1.0)
        ):
            break

    def f(xs):
        with ad.no_grad():
            return float(np.sum(w * fn(*[Tensor(x) for x in xs]).data))

    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        out = fn(*ts)
        loss = ad.sum_(ad.mul(out, w))
        ad.backward(loss)
        tape.clear()
    analytic = sum(float(np.sum((t.grad if t.grad is not None else 0.0) * v)) for t, v in zip(ts, vs))
    plus = f([a + eps * v for a, v in zip(arrays, vs)])
    minus = f([a - eps * v for a, v in zip(arrays, vs)])
    numeric = (plus - minus) / (2 * eps)
    return rel_err(analytic, numeric)


def _away_from(x: np.ndarray, points, margin: float) -> np.ndarray:
    """Nudge entries of ``x`` lying within ``margin`` of any of ``points``."""
    x = x.copy()
    for p in points:
        close = np.abs(x - p) < margin
        x[close] = p + np.where(x[close] >= p, margin, -margin) * 2
    return x


# ------------------------------------------------------------------ op makers


def _elementwise_cases():
    def unary(op, lo=-2.0, hi=2.0, kinks=()):
        def make(rng):
            a = _away_from(rng.uniform(lo, hi, (5, 4)), kinks, 1e-3)
            return op, [a]

        return make

    def binary(op, positive_b=False):
        def make(rng):
            a = rng.uniform(-2, 2, (5, 4))
            b = rng.uniform(0.5, 2, (5, 4)) if positive_b else rng.uniform(-2, 2, (5, 4))
            return op, [a, b]

        return make

    def broadcast(rng):
        return (lambda a, s: ad.mul(ad.add(a, s), s)), [rng.uniform(-1, 1, (3, 4)), rng.uniform(0.5, 1.5, ())]

    return {
        "add": binary(ad.add),
        "sub": binary(ad.sub),
        "mul": binary(ad.mul),
        "div": binary(ad.div, positive_b=True),
        "sqdiff": binary(ad.sqdiff),
        "scalar_broadcast": broadcast,
        "neg": unary(ad.neg),
        "abs": unary(ad.abs_, kinks=(0.0,)),
        "exp": unary(ad.exp),
        "reciprocal": unary(ad.reciprocal, 0.5, 2.0),
        "sigmoid": unary(ad.sigmoid, -4, 4),
        "leaky_relu": unary(ad.leaky_relu, kinks=(0.0,)),
        "clamp": unary(lambda a: ad.clamp(a, -1.0, 1.0), kinks=(-1.0, 1.0)),
    }


def _shape_cases():
    def reduce_sum(rng):
        return (lambda a: ad.sum_(a, axis=1)), [rng.standard_normal((4, 5, 3))]

    def reduce_mean(rng):
        return (lambda a: ad.mean(a, axis=(0, 2))), [rng.standard_normal((4, 5, 3))]

    def index_scatter(rng):
        idx = rng.integers(0, 20, 30)  # repeats exercise scatter-add
        return (lambda a: ad.index(ad.reshape(a, (-1,)), idx)), [rng.standard_normal((4, 5))]

    def index_slice(rng):
        return (lambda a: ad.index(a, (slice(1, 3), slice(None), 0))), [rng.standard_normal((4, 5, 2))]

    def concat(rng):
        return (lambda a, b: ad.concat([a, b], axis=0)), [rng.standard_normal((2, 3)), rng.standard_normal((4, 3))]

    def stack(rng):
        return (lambda a, b: ad.stack_last([a, b])), [rng.standard_normal((3, 2)), rng.standard_normal((3, 2))]

    return {
        "sum": reduce_sum,
        "mean": reduce_mean,
        "index_scatter": index_scatter,
        "index_slice": index_slice,
        "concat": concat,
        "stack_last": stack,
    }


def _image_cases():
    def conv(rng):
        return ad.conv2d, [rng.standard_normal((3, 6, 5)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)]

    def upsample(rng):
        return ad.upsample_bilinear2x, [rng.standard_normal((2, 3, 4))]

    def lookup(rng):
        h, w = 5, 6
        xy = np.stack([rng.uniform(0.6, w - 0.6, 20), rng.uniform(0.6, h - 0.6, 20)], -1)
        xy = _away_from(xy - 0.5, np.arange(0, 7), 1e-3) + 0.5
        return (lambda img: ad.bilinear_lookup(img, xy)), [rng.standard_normal((h, w))]

    return {"conv2d": conv, "upsample_bilinear2x": upsample, "bilinear_lookup": lookup}


def _random_camera(rng, width=16, height=16) -> Camera:
    pos = rng.uniform(-0.3, 0.3, 3)
    pose = look_at_pose(pos, [rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), 4.0])
    f = rng.uniform(14, 20)
    return Camera(fx=f, fy=f * rng.uniform(0.9, 1.1), cx=width / 2, cy=height / 2, width=width, height=height,
                  world_to_cam=pose)


def _random_quats(rng, n):
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True) * rng.uniform(0.8, 1.2, (n, 1))


def _geometry_cases():
    def unproject(rng):
        cam = _random_camera(rng)
        uv = rng.uniform(0, 16, (10, 2))
        return (lambda d: unproject_g(cam, uv, d)), [rng.uniform(1, 5, 10)]

    def proj(rng):
        cam = _random_camera(rng)
        x = np.column_stack([rng.uniform(-1, 1, (8, 2)), rng.uniform(3, 6, 8)])
        return (lambda x: project(cam, x)[0]), [x]

    def proj_cov(rng):
        cam = _random_camera(rng)
        x = np.column_stack([rng.uniform(-1, 1, (8, 2)), rng.uniform(3, 6, 8)])
        return (lambda x, s, q: project_covariance(cam, x, covariance_3d(s, q))), [
            x, rng.uniform(0.05, 0.3, (8, 3)), _random_quats(rng, 8)
        ]

    def cov3d(rng):
        return covariance_3d, [rng.uniform(0.05, 1.0, (6, 3)), _random_quats(rng, 6)]

    return {"unproject_g": unproject, "project": proj, "project_covariance": proj_cov, "covariance_3d": cov3d}


def _raster_pieces(cam, pos, scales, quats, opacity, spp, settings):
    """Discrete state of the compositing: depth order, samples inside the cutoff, terminated samples.

    Also returns the smallest |q - cutoff^2| and the smallest depth gap, used
    to prefilter scenes sitting right on a seam.
    """
    with ad.no_grad():
        uvz, valid = project(cam, pos, settings.z_near)
        cov = project_covariance(cam, pos, covariance_3d(scales, quats), settings.dilation).data
    uvz = uvz.data
    order = np.argsort(uvz[:, 2], kind="stable")
    con = _conic(cov)
    cut2 = settings.cutoff_sigma**2
    ys, xs = np.mgrid[0 : cam.height, 0 : cam.width]
    inside, done, qgap = [], [], np.inf
    for off in sample_offsets(spp):
        dx = (xs + off[0]).ravel()[:, None] - uvz[order, 0]
        dy = (ys + off[1]).ravel()[:, None] - uvz[order, 1]
        q = con[order, 0] * dx * dx + 2 * con[order, 1] * dx * dy + con[order, 2] * dy * dy
        qgap = min(qgap, float(np.abs(q - cut2).min()))
        gam = np.where(q <= cut2, opacity[order] * np.exp(-0.5 * q), 0.0)
        inside.append(q <= cut2)
        done.append(np.cumprod(1.0 - gam, axis=1) < settings.min_transmittance)
    zgap = float(np.min(np.diff(np.sort(uvz[:, 2])))) if len(uvz) > 1 else np.inf
    return (valid, order, np.stack(inside), np.stack(done)), qgap, zgap


def _raster_case(spp: int):
    def make(rng):
        settings = RasterSettings()
        for _ in range(100):
            cam = _random_camera(rng)
            n = 10
            pos = np.column_stack([rng.uniform(-0.8, 0.8, (n, 2)), rng.uniform(3.0, 5.0, n)])
            scales = rng.uniform(0.05, 0.25, (n, 3))
            quats = _random_quats(rng, n)
            opacity = rng.uniform(0.2, 0.8, n)
            colors = rng.uniform(0, 1, (n, 3))
            _, qgap, zgap = _raster_pieces(cam, pos, scales, quats, opacity, spp, settings)
            if qgap > 1e-3 and zgap > 1e-3:
                break

        def fn(p, s, q, a, c):
            cloud = GaussianCloud(p, s, q, a, c, np.zeros((len(p.data), 3), np.int64))
            out = render(cloud, cam, spp, settings)
            return ad.stack_last([out.color[..., 0], out.color[..., 1], out.color[..., 2], out.depth,
                                  out.accum_opacity])

        def same_piece(xs, ys):
            pa = _raster_pieces(cam, *xs[:4], spp, settings)[0]
            pb = _raster_pieces(cam, *ys[:4], spp, settings)[0]
            return all(np.array_equal(u, v) for u, v in zip(pa, pb))

        return fn, [pos, scales, quats, opacity, colors], same_piece

    return make


def _min_preactivation(params, n: float) -> float:
    with ad.no_grad():
        x = Tensor(dec.coord_input(params.height, params.width, n))
        smallest = np.inf
        for i in range(dec.STAGES):
            x = ad.conv2d(x, params.kernels[i], params.biases[i])
            smallest = min(smallest, float(np.abs(x.data).min()))
            x = ad.upsample_bilinear2x(ad.leaky_relu(x, dec.LEAK))
    return smallest


def _decoder_case(rng):
    # redraw until no leaky-ReLU input sits within reach of the FD step
    for _ in range(100):
        params = dec.build(16, 16, 2, 3, "depth", rng)
        for b in params.biases:
            b.data[:] = rng.normal(0, 0.05, b.shape)
        n = float(rng.uniform(-1, 1))
        if _min_preactivation(params, n) > 2e-3:
            break
    seg = SegMask(rng.integers(0, 3, (16, 16)), 3)
    shapes = [k.shape for k in params.kernels] + [b.shape for b in params.biases]
    nk = len(params.kernels)

    def fn(*arrs):
        p = dec.DecoderParams(params.height, params.width, params.capacity, params.channels, params.head,
                              list(arrs[:nk]), list(arrs[nk:]))
        return dec.apply_mask(dec.decode(p, n), seg)

    return fn, [np.asarray(k.data).copy() for k in params.kernels] + [np.asarray(b.data).copy() for b in params.biases]


def _materialize_case(frozen: bool):
    def make(rng):
        cam = _random_camera(rng, 6, 5)
        depth = rng.uniform(2, 4, (5, 6))
        grid = PixelGaussianGrid.create(0, depth, rng.uniform(0, 1, (5, 6, 3)), 0.5)
        grid.frozen_covariance = frozen
        rot, logs = _random_quats(rng, 30).reshape(5, 6, 4), rng.uniform(-3, -1, (5, 6, 3))

        def fn(dd, da, col, q, ls):
            grid.color_dc, grid.rotation, grid.log_scale = col, q, ls
            c = materialize(grid, dd, da, cam)
            return ad.concat([ad.reshape(c.positions, (-1,)), ad.reshape(c.scales, (-1,)), ad.reshape(c.quats, (-1,)),
                              c.opacity, ad.reshape(c.colors, (-1,))])

        return fn, [rng.uniform(-0.2, 0.2, (5, 6)), rng.uniform(-0.2, 0.2, (5, 6)), grid.color_dc.data.copy(), rot, logs]

    return make


def _loss_cases():
    def photo(rng):
        target = rng.uniform(0, 1, (12, 12, 3))
        return (lambda c: photometric(c, target)), [rng.uniform(0, 1, (12, 12, 3))]

    def ssim_case(rng):
        target = rng.uniform(0, 1, (12, 12, 3))
        return (lambda c: ssim(c, target)), [rng.uniform(0, 1, (12, 12, 3))]

    def tv(rng):
        seg = SegMask(rng.integers(0, 3, (8, 8)), 3)
        return (lambda d: ad.stack_last(list(tv_losses(d, seg)))), [rng.uniform(1, 4, (8, 8))]

    def flow(rng):
        cams = [_random_camera(rng, 8, 8) for _ in range(2)]
        corrs = []
        for i, j in ((0, 1), (1, 0)):
            m = 15
            p = rng.uniform(0, 8, (m, 2))
            p = np.floor(p) + 0.5
            q = _away_from(rng.uniform(0.6, 7.4, (m, 2)) - 0.5, np.arange(0, 9), 1e-3) + 0.5
            idx = (p[:, 1] - 0.5).astype(int) * 8 + (p[:, 0] - 0.5).astype(int)
            corrs.append(Correspondence(i, j, idx, p, q))
        return (lambda d0, d1: flow_loss([d0, d1], cams, corrs)), [rng.uniform(2, 4, (8, 8)), rng.uniform(2, 4, (8, 8))]

    def total(rng):
        w = LossWeights(5.0, 0.1, 0.2, float(rng.uniform()))
        return (lambda a, b, c, d: total_loss(a, b, c, d, w)), [rng.uniform(0, 1, ()) for _ in range(4)]

    return {"photometric": photo, "ssim": ssim_case, "tv_losses": tv, "flow_loss": flow, "total_loss": total}


def all_cases() -> dict[str, tuple[Callable, float]]:
    cases = {}
    for group in (_elementwise_cases(), _shape_cases(), _image_cases(), _geometry_cases(), _loss_cases()):
        cases.update({k: (v, TOL) for k, v in group.items()})
    cases["decoder"] = (_decoder_case, TOL)
    cases["materialize_frozen"] = (_materialize_case(True), TOL)
    cases["materialize_free"] = (_materialize_case(False), TOL)
    cases["rasterizer_spp1"] = (_raster_case(1), TOL_RASTER)
    cases["rasterizer_spp4"] = (_raster_case(4), TOL_RASTER)
    return cases


def run(trials: int = 100, seed: int = 0, names=None) -> list[CheckResult]:
    results = []
    for name, (make, tol) in all_cases().items():
        if names is not None and name not in names:
            continue
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(trials):
            fn, arrays, *piece = make(rng)
            worst = max(worst, directional_check(fn, arrays, rng, same_piece=piece[0] if piece else None))
        results.append(CheckResult(name, worst, tol, trials, time.perf_counter() - t0))
    return results


def format_report(results: list[CheckResult]) -> str:
    lines = [f"{'op':24s} {'max rel err':>12s} {'tol':>8s}  status"]
    for r in results:
        lines.append(f"{r.name:24s} {r.max_rel_err:12.3e} {r.tol:8.0e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
