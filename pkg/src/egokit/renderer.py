"""Virtual RGB-D rendering: pinhole projection and z-buffered point splatting."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rotmath
from .errors import CorruptPayload, ValidationError

DEPTH_MAGIC = b"DPTH"
EMPTY = 0.0


@dataclass(frozen=True)
class CameraIntrinsics:
    K: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        k = np.asarray(self.K, dtype=float)
        object.__setattr__(self, "K", k)
        if k.shape != (3, 3):
            raise ValidationError("K must be 3x3")
        if not (k[0, 0] > 0 and k[1, 1] > 0):
            raise ValidationError("focal lengths must be positive")
        if not (0 <= k[0, 2] < self.width and 0 <= k[1, 2] < self.height):
            raise ValidationError("principal point outside the image")

    @classmethod
    def pinhole(cls, fx, fy, cx, cy, width, height) -> "CameraIntrinsics":
        return cls(np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]]), int(width), int(height))

    def to_dict(self) -> dict:
        k = self.K
        return {"fx": k[0, 0], "fy": k[1, 1], "cx": k[0, 2], "cy": k[1, 2], "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls.pinhole(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"])


@dataclass(frozen=True)
class CameraExtrinsics:
    T_cw: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.T_cw, dtype=float)
        object.__setattr__(self, "T_cw", t)
        if t.shape != (4, 4) or not np.allclose(t[3], [0, 0, 0, 1], atol=1e-12):
            raise ValidationError("T_cw must be 4x4 with last row (0, 0, 0, 1)")
        if not rotmath.is_rotation(t[:3, :3]):
            raise ValidationError("T_cw rotation block is not a rotation")

    @classmethod
    def identity(cls) -> "CameraExtrinsics":
        return cls(np.eye(4))

    @classmethod
    def from_rt(cls, r, t) -> "CameraExtrinsics":
        m = np.eye(4)
        m[:3, :3] = r
        m[:3, 3] = t
        return cls(m)


@dataclass
class DepthMap:
    depth: np.ndarray  # (H, W) float32 meters, EMPTY where uncovered
    mask: np.ndarray  # (H, W) bool

    @classmethod
    def empty(cls, width: int, height: int) -> "DepthMap":
        return cls(np.full((height, width), EMPTY, dtype=np.float32), np.zeros((height, width), dtype=bool))

    @property
    def shape(self):
        return self.depth.shape

    def __eq__(self, other):
        return (
            isinstance(other, DepthMap)
            and self.depth.tobytes() == other.depth.tobytes()
            and np.array_equal(self.mask, other.mask)
        )


def homogeneous(points) -> np.ndarray:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    return np.concatenate([points, np.ones((points.shape[0], 1))], axis=1)


def project_points(intr: CameraIntrinsics, extr: CameraExtrinsics, p_w):
    """Project homogeneous world points (N, 4).

    Returns integer pixels (N, 2) as (u, v), camera depths (N,), and validity
    flags (positive depth and inside the image). Rounding is half-up.
    """
    p_w = np.asarray(p_w, dtype=float).reshape(-1, 4)
    p_c = (extr.T_cw @ p_w.T).T[:, :3]
    z = p_c[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        normalized = p_c / z[:, None]
        uv = (intr.K @ normalized.T).T[:, :2]
    front = z > 0
    uv = np.where(front[:, None], uv, 0.0)
    pix = np.floor(uv + 0.5).astype(np.int64)
    inside = (pix[:, 0] >= 0) & (pix[:, 0] < intr.width) & (pix[:, 1] >= 0) & (pix[:, 1] < intr.height)
    return pix, z, front & inside


def unproject(intr: CameraIntrinsics, pixels, depths) -> np.ndarray:
    """Camera-frame points for pixel centers at the given depths."""
    pixels = np.asarray(pixels, dtype=float)
    ones = np.ones((pixels.shape[0], 1))
    rays = np.linalg.solve(intr.K, np.concatenate([pixels, ones], axis=1).T).T
    return rays * np.asarray(depths, dtype=float)[:, None]


def render_depth(intr: CameraIntrinsics, extr: CameraExtrinsics, point_sets, splat_radius: int = 0) -> DepthMap:
    """Z-buffer the given homogeneous point sets into one metric depth map."""
    dm = DepthMap.empty(intr.width, intr.height)
    buf = np.full((intr.height, intr.width), np.inf)
    for pts in point_sets:
        pts = np.asarray(pts, dtype=float).reshape(-1, 4)
        if pts.shape[0] == 0:
            continue
        pix, z, valid = project_points(intr, extr, pts)
        pix, z = pix[valid], z[valid]
        for du in range(-splat_radius, splat_radius + 1):
            for dv in range(-splat_radius, splat_radius + 1):
                u, v = pix[:, 0] + du, pix[:, 1] + dv
                ok = (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
                np.minimum.at(buf, (v[ok], u[ok]), z[ok])
    covered = np.isfinite(buf)
    dm.depth[covered] = buf[covered].astype(np.float32)
    dm.mask[:] = covered
    return dm


def splat_colors(intr, extr, point_sets, colors, background=(96, 96, 96)) -> np.ndarray:
    """Schematic 8-bit RGB raster: the nearest point's color wins per pixel.

    On exact depth ties the later point set wins.
    """
    buf = np.full((intr.height, intr.width), np.inf)
    projected = []
    for pts in point_sets:
        pix, z, valid = project_points(intr, extr, pts)
        pix, z = pix[valid], z[valid]
        np.minimum.at(buf, (pix[:, 1], pix[:, 0]), z)
        projected.append((pix, z))
    img = np.empty((intr.height, intr.width, 3), dtype=np.uint8)
    img[:] = np.asarray(background, dtype=np.uint8)
    for (pix, z), color in zip(projected, colors):
        hit = z <= buf[pix[:, 1], pix[:, 0]]
        img[pix[hit, 1], pix[hit, 0]] = np.asarray(color, dtype=np.uint8)
    return img


# ---------------------------------------------------------------------------
# containers: see docs/formats.md


def depth_to_bytes(dm: DepthMap) -> bytes:
    h, w = dm.depth.shape
    return (
        DEPTH_MAGIC
        + struct.pack("<II", w, h)
        + np.ascontiguousarray(dm.depth, dtype="<f4").tobytes()
        + np.packbits(dm.mask.ravel()).tobytes()
    )


def depth_from_bytes(data: bytes, name: str = "depth") -> DepthMap:
    if len(data) < 12 or data[:4] != DEPTH_MAGIC:
        raise CorruptPayload(f"{name}: bad depth map header")
    w, h = struct.unpack_from("<II", data, 4)
    n = w * h
    expected = 12 + 4 * n + (n + 7) // 8
    if len(data) != expected:
        raise CorruptPayload(f"{name}: expected {expected} bytes, found {len(data)}")
    depth = np.frombuffer(data, dtype="<f4", count=n, offset=12).reshape(h, w).astype(np.float32)
    mask = np.unpackbits(np.frombuffer(data, dtype=np.uint8, offset=12 + 4 * n))[:n].reshape(h, w).astype(bool)
    return DepthMap(depth, mask)


def save_depth(dm: DepthMap, path) -> None:
    Path(path).write_bytes(depth_to_bytes(dm))


def load_depth(path) -> DepthMap:
    return depth_from_bytes(Path(path).read_bytes(), str(path))


def rgb_to_bytes(img: np.ndarray) -> bytes:
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def rgb_from_bytes(data: bytes, name: str = "rgb") -> np.ndarray:
    try:
        magic, dims, maxval, payload = data.split(b"\n", 3)
        w, h = (int(x) for x in dims.split())
    except ValueError as exc:
        raise CorruptPayload(f"{name}: bad PPM header") from exc
    if magic != b"P6" or maxval != b"255" or len(payload) != w * h * 3:
        raise CorruptPayload(f"{name}: bad PPM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def depth_to_pgm(dm: DepthMap, max_depth: float = 2.0) -> bytes:
    """8-bit grayscale visualization, near is bright, empty is black."""
    h, w = dm.depth.shape
    scaled = np.where(dm.mask, 255.0 * (1.0 - np.clip(dm.depth / max_depth, 0, 1)), 0.0)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + scaled.astype(np.uint8).tobytes()
