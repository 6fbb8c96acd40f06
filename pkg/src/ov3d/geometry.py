"""Oriented 3D boxes, exact 3D IoU, and pinhole projection to 2D boxes.

Coordinate conventions used throughout the package:

* World frame == camera frame: x right, y down, z forward (the camera sits
  at the origin looking down +z). Gravity axis is y, so boxes rotate about
  y only ("yaw").
* Box size is (width, depth, height) = extents along the local x, z, y
  axes respectively.
* The bird's-eye-view (BEV) plane is (x, z); the vertical interval is y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera

DEPTH_EPS = 1e-6


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    y = math.fmod(float(yaw) + math.pi, 2.0 * math.pi)
    if y < 0.0:
        y += 2.0 * math.pi
    return y - math.pi


@dataclass(frozen=True, eq=False)
class Box3D:
    """Yaw-oriented cuboid.

    center: (3,) world units; size: (width, depth, height), all > 0;
    yaw: radians about the vertical (y) axis, normalized to [-pi, pi).
    """

    center: np.ndarray
    size: np.ndarray
    yaw: float

    def __eq__(self, other):
        return (
            isinstance(other, Box3D)
            and np.array_equal(self.center, other.center)
            and np.array_equal(self.size, other.size)
            and self.yaw == other.yaw
        )

    def __hash__(self):
        return hash((self.center.tobytes(), self.size.tobytes(), self.yaw))

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64).reshape(3).copy()
        size = np.asarray(self.size, dtype=np.float64).reshape(3).copy()
        if not (np.all(np.isfinite(center)) and np.all(np.isfinite(size))):
            raise ValueError("box parameters must be finite")
        if np.any(size <= 0.0):
            raise ValueError(f"box size must be strictly positive, got {size}")
        center.flags.writeable = False
        size.flags.writeable = False
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    def corners(self) -> np.ndarray:
        """Return the 8 corners as an (8, 3) array.

        Canonical order: corner k has local offsets
        ((bx-0.5)*w, (by-0.5)*h, (bz-0.5)*d) with k = bx + 2*by + 4*bz,
        bits bx/by/bz in {0, 1} along local x/y/z, rotated by yaw and
        translated to the center.
        """
        cached = self.__dict__.get("_corners")
        if cached is not None:
            return cached
        w, d, h = self.size
        bits = ((np.arange(8)[:, None] >> np.arange(3)) & 1).astype(np.float64)
        local = (bits - 0.5) * np.array([w, h, d])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
        result = local @ rot.T + self.center
        result.flags.writeable = False
        object.__setattr__(self, "_corners", result)  # memo on immutable value
        return result

    def bev_corners(self) -> np.ndarray:
        """4 BEV footprint corners in the (x, z) plane, CCW order."""
        cached = self.__dict__.get("_bev_corners")
        if cached is not None:
            return cached
        w, d = self.size[0], self.size[1]
        local = np.array(
            [[w / 2, d / 2], [-w / 2, d / 2], [-w / 2, -d / 2], [w / 2, -d / 2]]
        )
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, s], [-s, c]])
        result = local @ rot.T + np.array([self.center[0], self.center[2]])
        result.flags.writeable = False
        object.__setattr__(self, "_bev_corners", result)
        return result

    def volume(self) -> float:
        return float(self.size[0] * self.size[1] * self.size[2])

    def contains_points(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of points (N, 3) inside the closed box."""
        rel = np.asarray(points, dtype=np.float64) - self.center
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        # inverse rotation about y
        x = c * rel[:, 0] - s * rel[:, 2]
        z = s * rel[:, 0] + c * rel[:, 2]
        y = rel[:, 1]
        half = self.size / 2.0
        return (
            (np.abs(x) <= half[0]) & (np.abs(y) <= half[2]) & (np.abs(z) <= half[1])
        )


@dataclass(frozen=True, eq=False)
class Box2D:
    """Axis-aligned pixel box: min corner and max corner, min <= max."""

    min_xy: np.ndarray
    max_xy: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, Box2D)
            and np.array_equal(self.min_xy, other.min_xy)
            and np.array_equal(self.max_xy, other.max_xy)
        )

    def __hash__(self):
        return hash((self.min_xy.tobytes(), self.max_xy.tobytes()))

    def __post_init__(self):
        lo = np.asarray(self.min_xy, dtype=np.float64).reshape(2).copy()
        hi = np.asarray(self.max_xy, dtype=np.float64).reshape(2).copy()
        if np.any(lo > hi):
            raise ValueError(f"min corner must not exceed max corner: {lo} vs {hi}")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "min_xy", lo)
        object.__setattr__(self, "max_xy", hi)

    def area(self) -> float:
        wh = self.max_xy - self.min_xy
        return float(wh[0] * wh[1])


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics: focal lengths, principal point, image size (px)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")


def iou2d(a: Box2D, b: Box2D) -> float:
    """Intersection-over-union of two axis-aligned 2D boxes."""
    lo = np.maximum(a.min_xy, b.min_xy)
    hi = np.minimum(a.max_xy, b.max_xy)
    wh = np.clip(hi - lo, 0.0, None)
    inter = float(wh[0] * wh[1])
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def polygon_clip(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of a convex polygon by a convex polygon.

    Both polygons are (N, 2) arrays in CCW order. Returns the intersection
    polygon vertices (possibly empty).
    """
    output = [tuple(p) for p in subject]
    cp1 = tuple(clip[-1])
    for cp2 in (tuple(p) for p in clip):
        if not output:
            break
        edge_dx = cp2[0] - cp1[0]
        edge_dy = cp2[1] - cp1[1]

        def inside(p):
            return edge_dx * (p[1] - cp1[1]) - edge_dy * (p[0] - cp1[0]) >= 0.0

        def intersect(p, q):
            dcx, dcy = cp1[0] - cp2[0], cp1[1] - cp2[1]
            dpx, dpy = p[0] - q[0], p[1] - q[1]
            n1 = cp1[0] * cp2[1] - cp1[1] * cp2[0]
            n2 = p[0] * q[1] - p[1] * q[0]
            denom = dcx * dpy - dcy * dpx
            return ((n1 * dpx - n2 * dcx) / denom, (n1 * dpy - n2 * dcy) / denom)

        input_list = output
        output = []
        s = input_list[-1]
        for e in input_list:
            if inside(e):
                if not inside(s):
                    output.append(intersect(s, e))
                output.append(e)
            elif inside(s):
                output.append(intersect(s, e))
            s = e
        cp1 = cp2
    return np.array(output, dtype=np.float64).reshape(-1, 2)


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a polygon given as an (N, 2) vertex array."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, 1)) - np.dot(y, np.roll(x, 1))))


def iou3d(a: Box3D, b: Box3D, axis_aligned: bool = False) -> float:
    """Exact IoU of two yaw-oriented boxes.

    BEV footprint intersection (convex polygon clipping) times the vertical
    (y) interval overlap, over the union volume. With ``axis_aligned`` the
    yaw of both boxes is ignored (fallback for axis-aligned evaluation).
    """
    if axis_aligned:
        a = Box3D(a.center, a.size, 0.0)
        b = Box3D(b.center, b.size, 0.0)
    # exact cheap rejections before polygon clipping
    ay0, ay1 = a.center[1] - a.size[2] / 2, a.center[1] + a.size[2] / 2
    by0, by1 = b.center[1] - b.size[2] / 2, b.center[1] + b.size[2] / 2
    y_overlap = min(ay1, by1) - max(ay0, by0)
    if y_overlap <= 0.0:
        return 0.0
    dx = a.center[0] - b.center[0]
    dz = a.center[2] - b.center[2]
    reach = 0.5 * (math.hypot(a.size[0], a.size[1]) + math.hypot(b.size[0], b.size[1]))
    if dx * dx + dz * dz >= reach * reach:
        return 0.0
    inter_poly = polygon_clip(a.bev_corners(), b.bev_corners())
    bev_area = polygon_area(inter_poly)
    if bev_area <= 0.0:
        return 0.0
    inter = bev_area * y_overlap
    union = a.volume() + b.volume() - inter
    return float(inter / union)


def project_box(box: Box3D, intrinsics: CameraIntrinsics) -> Box2D:
    """Project a 3D box to the axis-aligned hull of its pinhole-projected
    corners, clipped to the image bounds.

    Raises BehindCamera if any corner has depth <= DEPTH_EPS: the box is not
    observable and the caller must skip it.
    """
    corners = box.corners()
    z = corners[:, 2]
    if np.any(z <= DEPTH_EPS):
        raise BehindCamera(
            f"box at {box.center.tolist()} has corner depth {z.min():.3g}"
        )
    u = intrinsics.fx * corners[:, 0] / z + intrinsics.cx
    v = intrinsics.fy * corners[:, 1] / z + intrinsics.cy
    lo = np.array([u.min(), v.min()])
    hi = np.array([u.max(), v.max()])
    bounds = np.array([intrinsics.width, intrinsics.height], dtype=np.float64)
    lo = np.clip(lo, 0.0, bounds)
    hi = np.clip(hi, 0.0, bounds)
    return Box2D(lo, hi)
