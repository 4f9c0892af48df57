"""Grasp-point extraction from masks and pinhole-camera geometry.

Pixel coordinates are ``(u, v) = (column, row)``; masks and depth maps are
indexed ``[v, u]``.  World points are metres.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from PIL import Image

from .errors import (
    BehindCameraError,
    DepthHoleError,
    EmptyMaskError,
    InvalidDisparityError,
    InvalidInputError,
    RayMissError,
)
from .state import GEOMETRY_CLASSES, CameraModel, GraspPoint2D, GraspPoint3D

RAY_STEP = 0.5       # pixels; below one pixel so a 1-px rim cannot be stepped over
MAX_RAY_ANGLES = 16
DEPTH_QUANTUM = 1e-4  # metres per unit in 16-bit depth files


@dataclass(eq=False)
class BinaryMask:
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2 or self.bits.size == 0:
            raise InvalidInputError("mask must be a non-empty 2-D raster")

    @classmethod
    def from_rows(cls, width: int, height: int, bits) -> BinaryMask:
        flat = np.asarray(bits, dtype=bool).ravel()
        if width <= 0 or height <= 0 or flat.size != width * height:
            raise InvalidInputError("pixel count must equal width * height")
        return cls(flat.reshape(height, width))

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def __eq__(self, other):
        return isinstance(other, BinaryMask) and np.array_equal(self.bits, other.bits)


def _bits(mask) -> np.ndarray:
    return mask.bits if isinstance(mask, BinaryMask) else np.asarray(mask, dtype=bool)


def centroid(mask) -> tuple[float, float]:
    """Mean (u, v) of the set pixels."""
    vs, us = np.nonzero(_bits(mask))
    if us.size == 0:
        raise EmptyMaskError("mask has no set pixels")
    return (float(us.mean()), float(vs.mean()))


def _nearest_set_pixel(bits: np.ndarray, cx: float, cy: float) -> tuple[int, int, float]:
    vs, us = np.nonzero(bits)
    d2 = (us - cx) ** 2 + (vs - cy) ** 2
    # lexsort keeps ties deterministic: distance, then row, then column
    i = np.lexsort((us, vs, d2))[0]
    return int(us[i]), int(vs[i]), float(math.sqrt(d2[i]))


def ray_march(bits: np.ndarray, cx: float, cy: float, theta: float) -> tuple[int, int, float] | None:
    """First set pixel along the ray from (cx, cy) at angle theta, or None if it leaves the image.

    Samples at r = 0, RAY_STEP, 2*RAY_STEP, ... with nearest-pixel lookup
    (numpy rounding, ties to even).
    """
    h, w = bits.shape
    c, s = math.cos(theta), math.sin(theta)
    r = 0.0
    while True:
        u = int(np.rint(cx + r * c))
        v = int(np.rint(cy + r * s))
        if not (0 <= u < w and 0 <= v < h):
            return None
        if bits[v, u]:
            return u, v, r
        r += RAY_STEP


def grasp_point_2d(mask, geometry_class: str, rng_seed: int | None = 0, object_id: str = "",
                   theta: float | None = None) -> GraspPoint2D:
    """Pick a pixel grasp target on ``mask`` according to the object's geometry class.

    ``irregular`` marches a ray from the centroid at a random angle and returns the
    first set pixel (radius 0 when the centroid itself is on the mask). ``rimmed``
    returns the set pixel nearest the centroid. ``round`` and ``flat`` use the
    centroid. Every returned point is checked against the mask; an off-mask
    centroid falls back to the nearest set pixel.

    ``theta`` pins the first ray angle (testing hook); later retries still draw
    from the seeded generator.
    """
    if geometry_class not in GEOMETRY_CLASSES:
        raise InvalidInputError(f"unknown geometry class {geometry_class!r}")
    bits = _bits(mask)
    cx, cy = centroid(bits)

    if geometry_class == "irregular":
        rng = np.random.default_rng(rng_seed)
        for attempt in range(MAX_RAY_ANGLES):
            th = theta if (attempt == 0 and theta is not None) else float(rng.uniform(0.0, 2.0 * math.pi))
            hit = ray_march(bits, cx, cy, th)
            if hit is not None:
                u, v, r = hit
                break
        else:
            raise RayMissError(f"no mask pixel hit after {MAX_RAY_ANGLES} ray angles")
    elif geometry_class == "rimmed":
        u, v, r = _nearest_set_pixel(bits, cx, cy)
    else:
        u, v = int(np.rint(cx)), int(np.rint(cy))
        r = 0.0
        if not (0 <= v < bits.shape[0] and 0 <= u < bits.shape[1] and bits[v, u]):
            u, v, r = _nearest_set_pixel(bits, cx, cy)

    on_mask = bool(bits[v, u])
    if not on_mask:  # pragma: no cover - every branch above lands on a set pixel
        raise RayMissError("grasp point failed mask verification")
    return GraspPoint2D(float(u), float(v), object_id, on_mask, float(r))


def mask_yaw(mask) -> float:
    """Principal-axis orientation of a mask in image coordinates, radians in [-pi/2, pi/2)."""
    vs, us = np.nonzero(_bits(mask))
    if us.size < 2:
        return 0.0
    du, dv = us - us.mean(), vs - vs.mean()
    mu20, mu02, mu11 = (du * du).mean(), (dv * dv).mean(), (du * dv).mean()
    if abs(mu11) < 1e-12 and abs(mu20 - mu02) < 1e-12:
        return 0.0
    return 0.5 * math.atan2(2.0 * mu11, mu20 - mu02)


# -- pinhole camera ------------------------------------------------------------------

def project_to_pixel(cam: CameraModel, world) -> tuple[float, float, float]:
    """World point -> (u, v, z_axial) through K [R | t]."""
    p = cam.R @ np.asarray(world, dtype=float) + cam.t
    z = float(p[2])
    if z <= 0:
        raise BehindCameraError(f"point is behind the camera (z_axial={z})")
    uvw = cam.K @ p
    return (float(uvw[0] / uvw[2]), float(uvw[1] / uvw[2]), z)


def project_points(cam: CameraModel, world: np.ndarray) -> np.ndarray:
    """Vectorised `project_to_pixel` for an (N, 3) array; returns (N, 3) of (u, v, z_axial)."""
    p = np.asarray(world, dtype=float) @ cam.R.T + cam.t
    if np.any(p[:, 2] <= 0):
        raise BehindCameraError("at least one point is behind the camera")
    uvw = p @ cam.K.T
    return np.column_stack([uvw[:, 0] / uvw[:, 2], uvw[:, 1] / uvw[:, 2], p[:, 2]])


def stereo_depth(B, f, d):
    """Axial depth from stereo disparity: B * f / d.

    Exact for `fractions.Fraction` inputs.
    """
    if d <= 0:
        raise InvalidDisparityError(f"disparity must be positive, got {d}")
    return B * f / d


def backproject(cam: CameraModel, u: float, v: float, z_axial: float) -> tuple[float, float, float]:
    """Pixel plus axial depth -> world point, R^-1 (z K^-1 [u v 1] - t)."""
    if not z_axial > 0:
        raise InvalidInputError(f"z_axial must be positive, got {z_axial}")
    ray = cam.K_inv @ np.array([u, v, 1.0])
    X = cam.R.T @ (z_axial * ray - cam.t)
    return (float(X[0]), float(X[1]), float(X[2]))


def backproject_points(cam: CameraModel, uvz: np.ndarray) -> np.ndarray:
    """Vectorised `backproject` for an (N, 3) array of (u, v, z_axial)."""
    uvz = np.asarray(uvz, dtype=float)
    if np.any(uvz[:, 2] <= 0):
        raise InvalidInputError("z_axial must be positive")
    rays = np.column_stack([uvz[:, 0], uvz[:, 1], np.ones(len(uvz))]) @ cam.K_inv.T
    return (uvz[:, 2:3] * rays - cam.t) @ cam.R


# -- depth sources -------------------------------------------------------------------

class DepthSource(Protocol):
    def depth_at(self, u: int, v: int) -> float: ...


class DenseDepth:
    """Dense depth raster in metres."""

    def __init__(self, depth: np.ndarray):
        self.depth = np.asarray(depth, dtype=float)

    def depth_at(self, u: int, v: int) -> float:
        h, w = self.depth.shape
        if not (0 <= u < w and 0 <= v < h):
            raise DepthHoleError(f"pixel ({u}, {v}) outside the depth map")
        return float(self.depth[v, u])


class StereoDepth:
    """Depth from a disparity raster via `stereo_depth`."""

    def __init__(self, disparity: np.ndarray, baseline: float, focal: float):
        self.disparity = np.asarray(disparity, dtype=float)
        self.baseline = baseline
        self.focal = focal

    def depth_at(self, u: int, v: int) -> float:
        h, w = self.disparity.shape
        if not (0 <= u < w and 0 <= v < h):
            raise DepthHoleError(f"pixel ({u}, {v}) outside the disparity map")
        d = float(self.disparity[v, u])
        if not d > 0:
            raise DepthHoleError(f"no disparity at ({u}, {v})")
        return stereo_depth(self.baseline, self.focal, d)


def grasp_point_3d(gp: GraspPoint2D, depth, cam: CameraModel, yaw: float = 0.0,
                   center_uv: tuple[float, float] | None = None) -> GraspPoint3D:
    """Lift a pixel grasp point to the world using the depth at that pixel.

    ``center_uv`` (the mask centroid) is back-projected at the same depth to give
    the object's top-surface centre.
    """
    source = depth if hasattr(depth, "depth_at") else DenseDepth(depth)
    u, v = int(round(gp.u)), int(round(gp.v))
    z = source.depth_at(u, v)
    if not (math.isfinite(z) and z > 0):
        raise DepthHoleError(f"invalid depth {z} at ({u}, {v})")
    X, Y, Z = backproject(cam, gp.u, gp.v, z)
    center = None
    if center_uv is not None:
        center = backproject(cam, center_uv[0], center_uv[1], z)
    return GraspPoint3D(X, Y, Z, gp.object_id, yaw, center)


# -- raster files --------------------------------------------------------------------

def save_mask(path, mask, meta: dict | None = None) -> None:
    """Write a mask as an 8-bit grayscale PNG (0/255) plus a JSON sidecar."""
    bits = _bits(mask)
    path = Path(path)
    Image.fromarray(bits.astype(np.uint8) * 255).save(path)
    sidecar = {"kind": "mask", "width": bits.shape[1], "height": bits.shape[0], **(meta or {})}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_mask(path) -> tuple[BinaryMask, dict]:
    path = Path(path)
    arr = np.asarray(Image.open(path))
    meta = json.loads(path.with_suffix(".json").read_text())
    if arr.shape != (meta["height"], meta["width"]):
        raise InvalidInputError("mask raster does not match its sidecar dimensions")
    return BinaryMask(arr > 127), meta


def save_depth(path, depth: np.ndarray, cam: CameraModel | None = None,
               quantum: float = DEPTH_QUANTUM) -> None:
    """Write depth as a 16-bit PNG in units of ``quantum`` metres, plus a JSON sidecar.

    Depth values must already lie on the quantum grid for a bit-exact round trip.
    """
    depth = np.asarray(depth, dtype=float)
    units = np.rint(depth / quantum)
    if units.min() < 0 or units.max() > 65535:
        raise InvalidInputError("depth out of the 16-bit range for this quantum")
    path = Path(path)
    Image.fromarray(units.astype(np.uint16)).save(path)
    sidecar = {"kind": "depth", "width": depth.shape[1], "height": depth.shape[0],
               "units": "m", "quantum": quantum,
               "camera": None if cam is None else cam.to_dict()}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_depth(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    units = np.asarray(Image.open(path)).astype(np.int64)
    if units.shape != (meta["height"], meta["width"]):
        raise InvalidInputError("depth raster does not match its sidecar dimensions")
    return quantize_depth(units * meta["quantum"], meta["quantum"]), meta


def quantize_depth(depth: np.ndarray, quantum: float = DEPTH_QUANTUM) -> np.ndarray:
    """Snap depths to the storage grid; stable under repeated application."""
    return np.rint(np.asarray(depth, dtype=float) / quantum) * quantum
