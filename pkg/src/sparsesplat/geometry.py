"""Pinhole cameras and the pixel-ray parameterization.

Depth is planar (camera-frame z) everywhere. Pixel centers sit at
integer + 0.5, origin top-left, v grows downward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, as_tensor, custom_op

Z_NEAR = 1e-4
COV_DILATION = 0.3


class CameraError(ValueError):
    pass


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam: np.ndarray = field(default_factory=lambda: np.hstack([np.eye(3), np.zeros((3, 1))]))
    view_index: int = 0

    def __post_init__(self):
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64).reshape(3, 4)
        self.width = int(self.width)
        self.height = int(self.height)
        self.validate()

    def validate(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise CameraError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise CameraError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )
        r = self.R
        if not np.all(np.isfinite(self.world_to_cam)):
            raise CameraError("world_to_cam contains non-finite values")
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise CameraError("rotation part of world_to_cam is not a proper rotation")

    @property
    def R(self) -> np.ndarray:
        return self.world_to_cam[:, :3]

    @property
    def t(self) -> np.ndarray:
        return self.world_to_cam[:, 3]

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
            "world_to_cam": [float(v) for v in self.world_to_cam.reshape(-1)],
        }

    @classmethod
    def from_dict(cls, d: dict, view_index: int = 0) -> Camera:
        missing = {"fx", "fy", "cx", "cy", "width", "height", "world_to_cam"} - set(d)
        if missing:
            raise CameraError(f"camera entry missing fields: {sorted(missing)}")
        w2c = np.asarray(d["world_to_cam"], dtype=np.float64)
        if w2c.size != 12:
            raise CameraError(f"world_to_cam must have 12 values, got {w2c.size}")
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
            world_to_cam=w2c.reshape(3, 4),
            view_index=view_index,
        )


def look_at_pose(position, target=(0.0, 0.0, 0.0), down=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera [R|t] for a camera at ``position`` looking at ``target``.

    Camera axes: x right, y along ``down`` (projected), z forward.
    """
    position = np.asarray(position, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - position
    z /= np.linalg.norm(z)
    y = np.asarray(down, dtype=np.float64) - z * np.dot(down, z)
    norm = np.linalg.norm(y)
    if norm < 1e-9:
        raise CameraError("viewing direction is parallel to the down vector")
    y /= norm
    x = np.cross(y, z)
    r = np.stack([x, y, z])
    return np.hstack([r, (-r @ position)[:, None]])


def pixel_centers(camera: Camera) -> np.ndarray:
    """(H, W, 2) array of (u, v) pixel-center coordinates."""
    v, u = np.mgrid[0 : camera.height, 0 : camera.width].astype(np.float64)
    return np.stack([u + 0.5, v + 0.5], axis=-1)


def ray_basis(camera: Camera, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (a, b) with world point x(d) = a * d + b for pixel coords ``uv``."""
    uv = np.asarray(uv, dtype=np.float64)
    rays = np.stack(
        [(uv[..., 0] - camera.cx) / camera.fx, (uv[..., 1] - camera.cy) / camera.fy, np.ones(uv.shape[:-1])],
        axis=-1,
    )
    a = rays @ camera.R  # R^T applied to row vectors
    b = -camera.R.T @ camera.t
    return a, np.broadcast_to(b, a.shape)


def unproject_g(camera: Camera, p, d) -> Tensor:
    """Lift pixel(s) ``p`` (..., 2) at planar depth ``d`` (...) to world points (..., 3)."""
    d = as_tensor(d)
    p = np.asarray(p, dtype=np.float64)
    if np.any(d.data <= 0):
        raise ValueError("depth must be positive for unprojection")
    if p.shape[:-1] != d.shape:
        raise ValueError(f"shape mismatch: pixels {p.shape} vs depth {d.shape}")
    a, b = ray_basis(camera, p)
    out = a * d.data[..., None] + b
    return custom_op(out, (d,), lambda g: ((g * a).sum(axis=-1),))


def project(camera: Camera, x, z_near: float = Z_NEAR) -> tuple[Tensor, np.ndarray]:
    """Project world points (..., 3) to (u, v, z).

    Returns a tensor whose last axis is (u, v, z) and a boolean array that is
    False for points at or behind ``z_near`` (their u, v are meaningless and
    receive zero gradient).
    """
    x = as_tensor(x)
    xc = x.data @ camera.R.T + camera.t
    z = xc[..., 2]
    valid = z > z_near
    zs = np.where(valid, z, 1.0)
    u = camera.fx * xc[..., 0] / zs + camera.cx
    v = camera.fy * xc[..., 1] / zs + camera.cy
    out = np.stack([u, v, z], axis=-1)

    def bw(g):
        gu = np.where(valid, g[..., 0], 0.0)
        gv = np.where(valid, g[..., 1], 0.0)
        gxc = np.empty(xc.shape)
        gxc[..., 0] = gu * camera.fx / zs
        gxc[..., 1] = gv * camera.fy / zs
        gxc[..., 2] = (
            g[..., 2] - gu * camera.fx * xc[..., 0] / zs**2 - gv * camera.fy * xc[..., 1] / zs**2
        )
        return (gxc @ camera.R,)

    return custom_op(out, (x,), bw), valid


def _projection_jacobian(camera: Camera, xc: np.ndarray) -> np.ndarray:
    x, y, z = xc[..., 0], xc[..., 1], xc[..., 2]
    j = np.zeros(xc.shape[:-1] + (2, 3))
    j[..., 0, 0] = camera.fx / z
    j[..., 0, 2] = -camera.fx * x / z**2
    j[..., 1, 1] = camera.fy / z
    j[..., 1, 2] = -camera.fy * y / z**2
    return j


def project_covariance(camera: Camera, x, sigma, dilation: float = COV_DILATION) -> Tensor:
    """Image-space covariance J W Sigma W^T J^T + dilation * I.

    x: (..., 3) world means; sigma: (..., 3, 3) symmetric world covariances.
    Returns (..., 3) holding the unique entries (a, b, c) of [[a, b], [b, c]].
    Points behind the camera get a dilation-only covariance and no gradient.
    """
    x, sigma = as_tensor(x), as_tensor(sigma)
    if sigma.shape[-2:] != (3, 3) or x.shape[:-1] != sigma.shape[:-2]:
        raise ValueError(f"shape mismatch: means {x.shape} vs covariances {sigma.shape}")
    s = sigma.data
    if np.abs(s - np.swapaxes(s, -1, -2)).max(initial=0.0) > 1e-9 * max(1.0, np.abs(s).max(initial=0.0)):
        raise ValueError("covariance input is not symmetric")
    w = camera.R
    xc = x.data @ w.T + camera.t
    valid = xc[..., 2] > Z_NEAR
    xcs = np.where(valid[..., None], xc, np.array([0.0, 0.0, 1.0]))
    jac = _projection_jacobian(camera, xcs)
    t = jac @ w  # (..., 2, 3)
    cov = t @ s @ np.swapaxes(t, -1, -2)
    cov = np.where(valid[..., None, None], cov, 0.0)
    out = np.stack([cov[..., 0, 0] + dilation, cov[..., 0, 1], cov[..., 1, 1] + dilation], axis=-1)

    def bw(g):
        g = np.where(valid[..., None], g, 0.0)
        gm = np.empty(g.shape[:-1] + (2, 2))
        gm[..., 0, 0] = g[..., 0]
        gm[..., 0, 1] = gm[..., 1, 0] = 0.5 * g[..., 1]
        gm[..., 1, 1] = g[..., 2]
        gsigma = np.swapaxes(t, -1, -2) @ gm @ t
        gt = 2.0 * gm @ t @ s
        gj = gt @ w.T
        xx, yy, zz = xcs[..., 0], xcs[..., 1], xcs[..., 2]
        fx, fy = camera.fx, camera.fy
        gxc = np.zeros(xc.shape)
        gxc[..., 0] = -gj[..., 0, 2] * fx / zz**2
        gxc[..., 1] = -gj[..., 1, 2] * fy / zz**2
        gxc[..., 2] = (
            -gj[..., 0, 0] * fx / zz**2
            + gj[..., 0, 2] * 2 * fx * xx / zz**3
            - gj[..., 1, 1] * fy / zz**2
            + gj[..., 1, 2] * 2 * fy * yy / zz**3
        )
        return gxc @ w, gsigma

    return custom_op(out, (x, sigma), bw)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def _rotmat_vjp(q: np.ndarray, gr: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the (unnormalized) quaternion given dL/dR."""
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    g = gr
    gw = 2 * (
        -z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0] - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1]
    )
    gx = 2 * (
        y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1] - w * g[..., 1, 2]
        + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2]
    )
    gy = 2 * (
        -2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0] + z * g[..., 1, 2]
        - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2]
    )
    gz = 2 * (
        -2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0] - 2 * z * g[..., 1, 1]
        + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1]
    )
    gqn = np.stack([gw, gx, gy, gz], axis=-1)
    return (gqn - qn * (gqn * qn).sum(axis=-1, keepdims=True)) / norm


def covariance_3d(scales, quats) -> Tensor:
    """World covariance R diag(s^2) R^T from per-axis scales (..., 3) and quaternions (..., 4, wxyz)."""
    scales, quats = as_tensor(scales), as_tensor(quats)
    r = quat_to_rotmat(quats.data)
    m = r * scales.data[..., None, :]
    out = m @ np.swapaxes(m, -1, -2)

    def bw(g):
        gm = (g + np.swapaxes(g, -1, -2)) @ m
        gs = (gm * r).sum(axis=-2)
        gr = gm * scales.data[..., None, :]
        return gs, _rotmat_vjp(quats.data, gr)

    return custom_op(out, (scales, quats), bw)
