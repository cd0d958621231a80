"""On-disk formats: PFM depth, Middlebury flow, PNG images, JSON manifests and checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import decoder as dec
from .autodiff import Tensor
from .bundle import AlignParams, SceneBundle
from .config import TrainConfig
from .geometry import Camera, CameraError
from .optim import AdamState
from .scene import PixelGaussianGrid, SegMask

FLO_MAGIC = 202021.25
CKPT_MAGIC = b"SPSPLAT\0"
CKPT_VERSION = 1


class DataError(ValueError):
    """Malformed or missing input data."""


def _fail(path, offset: int, expected: str, got: str = "") -> DataError:
    msg = f"{path}: at byte {offset}: expected {expected}"
    return DataError(msg + (f", got {got}" if got else ""))


# ------------------------------------------------------------------------ PFM


def _read_line(buf: bytes, pos: int, path) -> tuple[str, int]:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise _fail(path, pos, "a newline-terminated header line", "end of file")
    return buf[pos:end].decode("ascii", errors="replace").strip(), end + 1


def read_pfm(path) -> np.ndarray:
    """Grayscale (Pf) or color (PF) PFM as float32, top row first."""
    buf = Path(path).read_bytes()
    kind, pos = _read_line(buf, 0, path)
    if kind not in ("Pf", "PF"):
        raise _fail(path, 0, "'Pf' or 'PF' magic", repr(kind))
    dims_at = pos
    dims, pos = _read_line(buf, pos, path)
    try:
        w, h = (int(v) for v in dims.split())
    except ValueError:
        raise _fail(path, dims_at, "'<width> <height>'", repr(dims)) from None
    if w <= 0 or h <= 0:
        raise _fail(path, dims_at, "positive dimensions", f"{w}x{h}")
    scale_at = pos
    scale_line, pos = _read_line(buf, pos, path)
    try:
        scale = float(scale_line)
    except ValueError:
        raise _fail(path, scale_at, "a float scale line", repr(scale_line)) from None
    if scale == 0:
        raise _fail(path, scale_at, "a non-zero scale (sign gives endianness)", "0")
    ch = 3 if kind == "PF" else 1
    count = w * h * ch
    if len(buf) - pos != 4 * count:
        raise _fail(path, pos, f"{4 * count} bytes of float data for {w}x{h}x{ch}", f"{len(buf) - pos} bytes")
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).astype(np.float32)
    data = data.reshape((h, w, ch) if ch == 3 else (h, w))
    return np.ascontiguousarray(data[::-1])  # PFM stores the bottom row first


def write_pfm(path, data: np.ndarray) -> None:
    data = np.asarray(data)
    if data.ndim == 2:
        kind = "Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        kind = "PF"
    else:
        raise ValueError(f"PFM holds (H, W) or (H, W, 3) arrays, got {data.shape}")
    h, w = data.shape[:2]
    header = f"{kind}\n{w} {h}\n-1.0\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(data[::-1], dtype="<f4").tobytes())


# ----------------------------------------------------------------------- flow


def read_flo(path) -> np.ndarray:
    """Middlebury .flo as an (H, W, 2) float32 array of (u, v) displacements."""
    buf = Path(path).read_bytes()
    if len(buf) < 12:
        raise _fail(path, 0, "a 12-byte header", f"{len(buf)} bytes")
    (magic,) = struct.unpack_from("<f", buf, 0)
    if magic != FLO_MAGIC:
        raise _fail(path, 0, f"magic {FLO_MAGIC}", repr(magic))
    w, h = struct.unpack_from("<ii", buf, 4)
    if w <= 0 or h <= 0:
        raise _fail(path, 4, "positive width and height", f"{w}x{h}")
    need = 8 * w * h
    if len(buf) - 12 != need:
        raise _fail(path, 12, f"{need} bytes of flow data for {w}x{h}", f"{len(buf) - 12} bytes")
    return np.frombuffer(buf, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float32)


def write_flo(path, flow: np.ndarray) -> None:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    Path(path).write_bytes(struct.pack("<fii", FLO_MAGIC, w, h) + np.ascontiguousarray(flow, dtype="<f4").tobytes())


# ---------------------------------------------------------------------- image


def read_png(path) -> np.ndarray:
    """8-bit PNG as (H, W, 3) float64 in [0, 1]; no gamma conversion."""
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise _fail(path, 0, "a PNG signature", str(im.format))
            if im.mode not in ("RGB", "RGBA", "L"):
                raise _fail(path, 0, "an 8-bit RGB, RGBA or grayscale PNG", f"mode {im.mode}")
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except DataError:
        raise
    except FileNotFoundError:
        raise DataError(f"{path}: file not found") from None
    except OSError as e:
        raise _fail(path, 0, "a decodable PNG", str(e)) from None
    return arr


def write_png(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.float64)
    Image.fromarray(np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)).save(path, format="PNG")


# ------------------------------------------------------------- cameras / json


def read_json(path) -> dict:
    text = Path(path).read_bytes()
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise _fail(path, e.pos, "valid JSON", e.msg) from None
    except UnicodeDecodeError as e:
        raise _fail(path, e.start, "UTF-8 text", e.reason) from None


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_camera(path, view_index: int = 0) -> Camera:
    try:
        return Camera.from_dict(read_json(path), view_index)
    except DataError:
        raise
    except (CameraError, TypeError, ValueError) as e:
        raise DataError(f"{path}: {e}") from None


# ------------------------------------------------------------------ manifests


@dataclass
class HeldoutView:
    camera: Camera
    image: np.ndarray | None = None
    depth: np.ndarray | None = None
    name: str = ""


@dataclass
class Dataset:
    root: Path
    images: list
    monodepths: list
    cameras: list
    flows: dict
    heldout: list = field(default_factory=list)
    output: Path | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_views(self) -> int:
        return len(self.images)


def _camera_entry(entry, root: Path, manifest, index: int) -> Camera:
    try:
        if isinstance(entry, str):
            return read_camera(root / entry, index)
        return Camera.from_dict(entry, index)
    except (CameraError, TypeError, ValueError) as e:
        raise DataError(f"{manifest}: view {index}: {e}") from None


def load_dataset(manifest_path) -> Dataset:
    """Read every file a manifest references and check shapes agree.

    Manifest layout (paths relative to the manifest's directory)::

        {"views": [{"image": "v0.png", "depth": "v0.pfm", "camera": {...} | "cam0.json"}, ...],
         "flows": [{"src": 0, "dst": 1, "file": "f01.flo"}, ...],
         "heldout": [{"image": ..., "depth": ..., "camera": ...}],   # optional
         "output": "out"}                                             # optional
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"{manifest_path}: manifest not found")
    m = read_json(manifest_path)
    root = manifest_path.parent
    if not isinstance(m, dict) or not isinstance(m.get("views"), list) or not m["views"]:
        raise DataError(f"{manifest_path}: expected an object with a non-empty 'views' list")

    def need(path_str, what):
        p = root / path_str
        if not p.exists():
            raise DataError(f"{manifest_path}: {what} file {p} does not exist")
        return p

    images, depths, cameras = [], [], []
    for i, v in enumerate(m["views"]):
        if not isinstance(v, dict):
            raise DataError(f"{manifest_path}: view {i} must be an object")
        for key in ("image", "depth", "camera"):
            if key not in v:
                raise DataError(f"{manifest_path}: view {i} is missing '{key}'")
        images.append(read_png(need(v["image"], f"view {i} image")))
        depths.append(read_pfm(need(v["depth"], f"view {i} depth")).astype(np.float64))
        cameras.append(_camera_entry(v["camera"], root, manifest_path, i))
    h, w = images[0].shape[:2]
    for i in range(len(images)):
        if images[i].shape[:2] != (h, w) or depths[i].shape != (h, w):
            raise DataError(
                f"{manifest_path}: view {i}: image {images[i].shape[:2]} / depth {depths[i].shape} "
                f"do not match the first view's {h}x{w}"
            )
        if (cameras[i].height, cameras[i].width) != (h, w):
            raise DataError(f"{manifest_path}: view {i}: camera is {cameras[i].width}x{cameras[i].height}, image {w}x{h}")
        if not np.all(np.isfinite(depths[i])) or np.any(depths[i] <= 0):
            raise DataError(f"{manifest_path}: view {i}: depth must be positive and finite")

    flows = {}
    for k, e in enumerate(m.get("flows", [])):
        try:
            i, j = int(e["src"]), int(e["dst"])
            e["file"]
        except (KeyError, TypeError, ValueError):
            raise DataError(f"{manifest_path}: flow entry {k}: expected integer 'src', 'dst' and a 'file'") from None
        if not (0 <= i < len(images) and 0 <= j < len(images)) or i == j:
            raise DataError(f"{manifest_path}: flow entry {i}->{j} references invalid views")
        f = read_flo(need(e["file"], f"flow {i}->{j}")).astype(np.float64)
        if f.shape[:2] != (h, w):
            raise DataError(f"{manifest_path}: flow {i}->{j} is {f.shape[1]}x{f.shape[0]}, expected {w}x{h}")
        flows[(i, j)] = f

    heldout = []
    for k, v in enumerate(m.get("heldout", [])):
        if not isinstance(v, dict) or "camera" not in v:
            raise DataError(f"{manifest_path}: held-out view {k} needs a 'camera'")
        cam = _camera_entry(v["camera"], root, manifest_path, len(images) + k)
        img = read_png(need(v["image"], f"held-out view {k} image")) if "image" in v else None
        dep = read_pfm(need(v["depth"], f"held-out view {k} depth")).astype(np.float64) if "depth" in v else None
        heldout.append(HeldoutView(cam, img, dep, v.get("name", f"heldout{k}")))
    out = root / m["output"] if "output" in m else None
    return Dataset(root, images, depths, cameras, flows, heldout, out, m.get("meta", {}))


# ---------------------------------------------------------------- checkpoints


class CheckpointError(DataError):
    pass


class _Writer:
    def __init__(self):
        self.arrays: list[tuple[str, np.ndarray]] = []

    def add(self, name: str, a) -> str:
        a = np.asarray(a.data if isinstance(a, Tensor) else a)
        if a.dtype.kind == "f":
            a = a.astype("<f8")
        elif a.dtype.kind in "iub":
            a = a.astype("<i8")
        else:
            raise TypeError(f"cannot store array {name} of dtype {a.dtype}")
        self.arrays.append((name, np.ascontiguousarray(a)))
        return name


def _bundle_header(b: SceneBundle, w: _Writer) -> dict:
    grids = []
    for v, g in enumerate(b.grids):
        grids.append({
            "view_index": g.view_index,
            "alpha_init": g.alpha_init,
            "frozen_covariance": g.frozen_covariance,
            "depth_init": w.add(f"grid{v}.depth_init", g.depth_init),
            "color_dc": w.add(f"grid{v}.color_dc", g.color_dc),
            "rotation": w.add(f"grid{v}.rotation", g.rotation),
            "log_scale": w.add(f"grid{v}.log_scale", g.log_scale),
        })
    segs = [{"channels": s.channels, "labels": w.add(f"seg{v}.labels", s.labels)} for v, s in enumerate(b.segmasks)]
    decoders = {}
    for head, p in (("depth", b.depth_decoder), ("opacity", b.opacity_decoder)):
        if p is None:
            continue
        decoders[head] = {
            "height": p.height, "width": p.width, "capacity": p.capacity, "channels": p.channels, "head": p.head,
            "kernels": [w.add(f"{head}_decoder.kernel{i}", k) for i, k in enumerate(p.kernels)],
            "biases": [w.add(f"{head}_decoder.bias{i}", x) for i, x in enumerate(p.biases)],
        }
    residuals = None
    if b.depth_residuals is not None:
        residuals = {
            "depth": [w.add(f"residual{v}.depth", r) for v, r in enumerate(b.depth_residuals)],
            "opacity": [w.add(f"residual{v}.opacity", r) for v, r in enumerate(b.opacity_residuals)],
        }
    align = None
    if b.align is not None:
        align = {
            "scales": w.add("align.scales", b.align.scales),
            "offsets": w.add("align.offsets", b.align.offsets),
            "history": w.add("align.history", np.asarray(b.align.history, dtype=np.float64)),
        }
    opt = {}
    for name in sorted(b.optimizer_state):
        st = b.optimizer_state[name]
        opt[name] = {"t": int(st.t), "m": w.add(f"adam.{name}.m", st.m), "v": w.add(f"adam.{name}.v", st.v)}
    return {
        "config": b.config.to_dict(),
        "cameras": [c.to_dict() for c in b.cameras],
        "depth_gain": float(b.depth_gain),
        "iteration": int(b.iteration),
        "grids": grids,
        "segmasks": segs,
        "decoders": decoders,
        "residuals": residuals,
        "align": align,
        "optimizer": opt,
        "loss_history": b.loss_history,
    }


def save_checkpoint(path, bundle: SceneBundle) -> None:
    """Versioned little-endian container: magic, version, JSON header, raw float64/int64 arrays.

    The header is serialized with sorted keys and no timestamps, so equal
    bundles give byte-identical files.
    """
    w = _Writer()
    header = _bundle_header(bundle, w)
    table, offset = {}, 0
    for name, a in w.arrays:
        table[name] = {"dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes}
        offset += a.nbytes
    header["arrays"] = table
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IQ", CKPT_VERSION, len(hbytes)))
        f.write(hbytes)
        for _, a in w.arrays:
            f.write(a.tobytes())


def load_checkpoint(path) -> SceneBundle:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: checkpoint not found")
    buf = path.read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: at byte 0: expected checkpoint magic {CKPT_MAGIC!r}, got {buf[:8]!r}")
    if len(buf) < 20:
        raise CheckpointError(f"{path}: at byte 8: expected a 12-byte version/header-size block, file too short")
    version, hlen = struct.unpack_from("<IQ", buf, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: at byte 8: expected checkpoint version {CKPT_VERSION}, got {version}")
    try:
        header = json.loads(buf[20 : 20 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: at byte 20: expected a JSON header of {hlen} bytes ({e})") from None
    base = 20 + hlen

    def arr(name):
        meta = header["arrays"][name]
        start = base + meta["offset"]
        if meta["dtype"] not in ("<f8", "<i8") or start < base:
            raise CheckpointError(f"{path}: array {name}: expected a little-endian 8-byte dtype at a valid offset")
        if start + meta["nbytes"] > len(buf):
            raise CheckpointError(f"{path}: at byte {start}: expected {meta['nbytes']} bytes for {name}, file truncated")
        return np.frombuffer(buf, dtype=meta["dtype"], count=meta["nbytes"] // 8, offset=start).reshape(meta["shape"]).copy()

    try:
        return _bundle_from_header(header, arr)
    except CheckpointError:
        raise
    except (KeyError, IndexError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: at byte 20: header is missing or has a malformed field ({e!r})") from None


def _bundle_from_header(header: dict, arr) -> SceneBundle:
    config = TrainConfig.from_dict(header["config"])
    cameras = [Camera.from_dict(c, i) for i, c in enumerate(header["cameras"])]
    grids = []
    for g in header["grids"]:
        grid = PixelGaussianGrid(
            view_index=g["view_index"],
            depth_init=arr(g["depth_init"]),
            color_dc=Tensor(arr(g["color_dc"]), requires_grad=True),
            rotation=Tensor(arr(g["rotation"]), requires_grad=True),
            log_scale=Tensor(arr(g["log_scale"]), requires_grad=True),
            alpha_init=g["alpha_init"],
            frozen_covariance=g["frozen_covariance"],
        )
        grids.append(grid)
    segs = [SegMask(arr(s["labels"]), s["channels"]) for s in header["segmasks"]]
    bundle = SceneBundle(cameras=cameras, grids=grids, segmasks=segs, config=config, depth_gain=header["depth_gain"])
    for head, d in header["decoders"].items():
        p = dec.DecoderParams(d["height"], d["width"], d["capacity"], d["channels"], d["head"])
        p.kernels = [Tensor(arr(n), requires_grad=True) for n in d["kernels"]]
        p.biases = [Tensor(arr(n), requires_grad=True) for n in d["biases"]]
        setattr(bundle, f"{head}_decoder", p)
    if header["residuals"] is not None:
        bundle.depth_residuals = [Tensor(arr(n), requires_grad=True) for n in header["residuals"]["depth"]]
        bundle.opacity_residuals = [Tensor(arr(n), requires_grad=True) for n in header["residuals"]["opacity"]]
    if header["align"] is not None:
        a = header["align"]
        bundle.align = AlignParams(arr(a["scales"]), arr(a["offsets"]), arr(a["history"]).tolist())
    for name, st in header["optimizer"].items():
        bundle.optimizer_state[name] = AdamState(arr(st["m"]), arr(st["v"]), st["t"])
    bundle.iteration = header["iteration"]
    bundle.loss_history = header["loss_history"]
    return bundle
