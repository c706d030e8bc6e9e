"""HDR image buffers, silhouette masks, pinhole cameras and scene files.

Images are handled as ``(height, width, channels)`` numpy arrays with a
top-left origin. The PFM codec keeps the on-disk header so that a file
read and written back is reproduced byte for byte.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "PfmError",
    "ImageF",
    "read_pfm",
    "load_pfm",
    "save_pfm",
    "load_mask",
    "save_mask",
    "log_radiance",
    "Camera",
    "look_at",
    "View",
    "SceneConfig",
    "load_scene",
    "save_scene",
]

DEFAULT_LOG_FLOOR = 1e-6
MASK_THRESHOLD = 128


class PfmError(ValueError):
    """Malformed PFM stream; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class ImageF:
    """Float image plus the PFM framing it was read with.

    ``data`` has shape ``(height, width, channels)`` with channels 1 or 3,
    rows stored top to bottom.
    """

    data: np.ndarray
    scale: float = 1.0
    little_endian: bool = True
    header: bytes | None = field(default=None, repr=False)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]


_TOKEN = re.compile(rb"\S+")


def _next_token(buf, pos):
    # PFM headers are whitespace separated; the payload starts after exactly
    # one whitespace byte following the scale token.
    m = _TOKEN.search(buf, pos)
    if m is None:
        raise PfmError("unexpected end of header", len(buf))
    return m.group(0), m.start(), m.end()


def _parse_pfm(buf):
    tag, start, pos = _next_token(buf, 0)
    if start != 0 or tag not in (b"PF", b"Pf"):
        raise PfmError(f"bad magic {tag[:8]!r}, expected PF or Pf", start)
    channels = 3 if tag == b"PF" else 1
    dims = []
    for name in ("width", "height"):
        tok, start, pos = _next_token(buf, pos)
        try:
            value = int(tok)
        except ValueError:
            raise PfmError(f"non-integer {name} {tok[:16]!r}", start) from None
        if value < 0:
            raise PfmError(f"negative {name} {value}", start)
        dims.append(value)
    tok, start, pos = _next_token(buf, pos)
    try:
        scale = float(tok)
    except ValueError:
        raise PfmError(f"bad scale {tok[:16]!r}", start) from None
    if scale == 0.0 or not np.isfinite(scale):
        raise PfmError(f"scale must be finite and nonzero, got {tok!r}", start)
    if pos >= len(buf) or buf[pos : pos + 1] not in (b"\n", b"\r", b" ", b"\t"):
        raise PfmError("missing separator after scale", pos)
    header_end = pos + 1
    width, height = dims
    n = width * height * channels
    payload = len(buf) - header_end
    if payload < 4 * n:
        raise PfmError(f"truncated payload: need {4 * n} bytes, have {payload}", len(buf))
    if payload > 4 * n:
        raise PfmError(f"{payload - 4 * n} trailing bytes after payload", header_end + 4 * n)
    little = scale < 0
    dtype = np.dtype("<f4" if little else ">f4")
    data = np.frombuffer(buf, dtype=dtype, count=n, offset=header_end)
    data = data.reshape(height, width, channels)[::-1].astype(np.float32)
    return ImageF(data, abs(scale), little, bytes(buf[:header_end]))


def read_pfm(path) -> ImageF:
    """Read a PF (RGB) or Pf (grey) file, either byte order."""
    return _parse_pfm(Path(path).read_bytes())


def load_pfm(path) -> np.ndarray:
    """Read a PFM file and return its pixels as ``(H, W, C)`` float32."""
    return read_pfm(path).data


def _header_matches(header, img):
    try:
        parsed = _parse_pfm(header + b"\0" * (4 * img.data.size))
    except PfmError:
        return False
    return parsed.data.shape == img.data.shape and parsed.little_endian == img.little_endian


def save_pfm(image, path) -> None:
    """Write ``image`` (an :class:`ImageF` or an ``(H, W[, C])`` array) as PFM."""
    if not isinstance(image, ImageF):
        arr = np.asarray(image, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        image = ImageF(arr)
    data = np.asarray(image.data, dtype=np.float32)
    if data.ndim != 3 or data.shape[2] not in (1, 3):
        raise ValueError(f"PFM holds 1 or 3 channels, got shape {data.shape}")
    if image.header is not None and _header_matches(image.header, image):
        header = image.header
    else:
        tag = "PF" if data.shape[2] == 3 else "Pf"
        scale = -abs(image.scale) if image.little_endian else abs(image.scale)
        header = f"{tag}\n{data.shape[1]} {data.shape[0]}\n{scale!r}\n".encode("ascii")
    dtype = np.dtype("<f4" if image.little_endian else ">f4")
    body = np.ascontiguousarray(data[::-1], dtype=dtype).tobytes()
    Path(path).write_bytes(header + body)


def load_mask(path) -> np.ndarray:
    """Read an 8-bit PNG silhouette; pixels >= 128 are object."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr >= MASK_THRESHOLD


def save_mask(mask, path) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)).save(path)


def log_radiance(image, floor=DEFAULT_LOG_FLOOR) -> np.ndarray:
    """Natural log of ``max(image, floor)`` elementwise."""
    if not floor > 0:
        raise ValueError(f"log floor must be positive, got {floor}")
    return np.log(np.maximum(np.asarray(image, dtype=np.float64), floor))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a world-to-camera transform ``x_c = R x_w + t``.

    The camera frame is x right, y down, z forward; pixel ``(row i, col j)``
    has its center at continuous coordinates ``(j + 0.5, i + 0.5)``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        err = np.abs(R @ R.T - np.eye(3)).max()
        if err >= 1e-9 or np.linalg.det(R) <= 0:
            raise ValueError(f"rotation is not proper orthonormal (error {err:.3g})")
        if self.width <= 0 or self.height <= 0 or self.fx <= 0 or self.fy <= 0:
            raise ValueError("camera image size and focal lengths must be positive")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def K(self):
        return np.array([self.fx, self.fy, self.cx, self.cy])

    @property
    def center(self):
        return -self.R.T @ self.t

    @property
    def normal_frame(self):
        """Rotation from world to the view frame used for normals and RMs.

        The view frame is the camera frame with y and z flipped, so x points
        right, y up and z toward the viewer; visible normals have n_z > 0.
        """
        return np.diag([1.0, -1.0, -1.0]) @ self.R

    def project(self, points):
        """Project world points; returns ``(uv, depth)``.

        ``depth`` is the coordinate along the optical axis. Points with
        ``depth <= 0`` lie behind the camera and their ``uv`` is meaningless.
        """
        p = np.asarray(points, dtype=np.float64)
        pc = p @ self.R.T + self.t
        z = pc[..., 2]
        if np.any((z == 0) & (np.abs(pc[..., :2]).max(axis=-1) == 0)):
            raise ValueError("cannot project the camera center")
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[..., 0] / z + self.cx
            v = self.fy * pc[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def unproject(self, uv, depth):
        uv = np.asarray(uv, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        x = (uv[..., 0] - self.cx) / self.fx * depth
        y = (uv[..., 1] - self.cy) / self.fy * depth
        pc = np.stack([x, y, depth], axis=-1)
        return (pc - self.t) @ self.R

    def pixel_rays(self):
        """World-space ray origin and unit directions through pixel centers.

        Directions have shape ``(height, width, 3)``.
        """
        j, i = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)
        d = np.stack([(j - self.cx) / self.fx, (i - self.cy) / self.fy, np.ones_like(j)], axis=-1)
        d = d @ self.R
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return self.center, d

    def to_dict(self):
        return {"K": self.K.tolist(), "R": self.R.tolist(), "t": self.t.tolist(),
                "width": self.width, "height": self.height}


def look_at(eye, target, up, focal, width, height) -> Camera:
    """Camera at ``eye`` looking at ``target`` with the image y axis along -up."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return Camera(focal, focal, width / 2.0, height / 2.0, R, -R @ eye, width, height)


@dataclass
class View:
    """One input view. ``image``/``mask`` are loaded lazily from their paths."""

    camera: Camera
    image_path: str | None = None
    mask_path: str | None = None
    _image: np.ndarray | None = field(default=None, repr=False)
    _mask: np.ndarray | None = field(default=None, repr=False)

    @property
    def image(self):
        if self._image is None:
            self._image = load_pfm(self.image_path).astype(np.float64)
        return self._image

    @property
    def mask(self):
        if self._mask is None:
            self._mask = load_mask(self.mask_path)
        return self._mask


@dataclass
class SceneConfig:
    views: list
    volume_min: np.ndarray
    volume_max: np.ndarray
    grid_res: int = 128

    def __post_init__(self):
        self.volume_min = np.asarray(self.volume_min, dtype=np.float64)
        self.volume_max = np.asarray(self.volume_max, dtype=np.float64)
        if len(self.views) < 2:
            raise ValueError(f"a scene needs at least 2 views, got {len(self.views)}")
        if np.any(self.volume_max <= self.volume_min):
            raise ValueError("reconstruction volume must have positive extent")
        if self.grid_res < 4:
            raise ValueError("grid_res must be at least 4")

    @property
    def cameras(self):
        return [v.camera for v in self.views]

    @property
    def bounding_center(self):
        return 0.5 * (self.volume_min + self.volume_max)

    def viewing_direction(self, k):
        """Unit vector from the volume center toward camera ``k`` (world frame)."""
        d = self.views[k].camera.center - self.bounding_center
        return d / np.linalg.norm(d)


def load_scene(path) -> SceneConfig:
    """Parse the JSON scene file; relative image paths resolve against it."""
    path = Path(path)
    doc = json.loads(path.read_text())
    views = []
    for entry in doc["views"]:
        fx, fy, cx, cy = entry["K"]
        image = path.parent / entry["image"]
        if "width" in entry:
            w, h = entry["width"], entry["height"]
        else:
            probe = read_pfm(image)
            w, h = probe.width, probe.height
        cam = Camera(fx, fy, cx, cy, np.array(entry["R"]).reshape(3, 3), entry["t"], w, h)
        views.append(View(cam, str(image), str(path.parent / entry["mask"])))
    vol = doc["volume"]
    return SceneConfig(views, vol["min"], vol["max"], int(doc.get("grid_res", 128)))


def save_scene(scene, path) -> None:
    path = Path(path)
    views = []
    for v in scene.views:
        d = v.camera.to_dict()
        d["R"] = np.asarray(d["R"]).reshape(-1).tolist()
        d["image"] = str(Path(v.image_path).relative_to(path.parent))
        d["mask"] = str(Path(v.mask_path).relative_to(path.parent))
        views.append(d)
    doc = {"views": views,
           "volume": {"min": scene.volume_min.tolist(), "max": scene.volume_max.tolist()},
           "grid_res": scene.grid_res}
    path.write_text(json.dumps(doc, indent=2))
