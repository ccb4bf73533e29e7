"""Membership tests, rasterization and bounding boxes for the primitive shapes.

Cells are sampled at their centres (integer + 0.5) and boundaries are
inclusive. The 2D square and triangle are inscribed in the circle of radius
``r`` about ``l``: the square is upright with half-side ``r / sqrt(2)`` and the
equilateral triangle has its apex at ``l - (0, r)`` (pointing up on screen).
Cubes are axis aligned with half-edge ``r``; cylinders stand along z.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import CANVAS, Prim2D, Prim3D, Shape2D, Shape3D

SQRT2 = math.sqrt(2.0)
COS30 = math.sqrt(3.0) / 2.0

_centers = np.arange(CANVAS) + 0.5


def _mask2d(kind: Shape2D, lx, ly, r, px, py):
    dx = px - lx
    dy = py - ly
    if kind is Shape2D.CIRCLE:
        return dx * dx + dy * dy <= r * r
    if kind is Shape2D.SQUARE:
        half = r / SQRT2
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    # Apex (0, -r), base vertices (+-r cos30, r/2). Each slanted edge is the
    # line through the apex with slope sqrt(3); inside means below it.
    half_base = r * COS30
    return (
        (dy <= r / 2.0)
        & (half_base * (dy + r) + 1.5 * r * dx >= 0)
        & (half_base * (dy + r) - 1.5 * r * dx >= 0)
    )


def member2d(kind: Shape2D, l, r, p) -> bool:
    """Whether point ``p = (x, y)`` lies inside the primitive centred at ``l``."""
    return bool(_mask2d(kind, l[0], l[1], r, p[0], p[1]))


@lru_cache(maxsize=4096)
def _raster(kind: Shape2D, lx: int, ly: int, r: int) -> np.ndarray:
    py, px = np.meshgrid(_centers, _centers, indexing="ij")
    out = _mask2d(kind, lx, ly, r, px, py)
    out.flags.writeable = False
    return out


def rasterize2d(kind: Shape2D, l, r) -> np.ndarray:
    """64x64 boolean raster ``[y, x]`` of a 2D primitive. Returns a fresh array."""
    return _raster(kind, int(l[0]), int(l[1]), int(r)).copy()


def rasterize_prim(p: Prim2D) -> np.ndarray:
    """Cached, read-only raster of ``p``; the executor never mutates its inputs."""
    return _raster(p.kind, p.x, p.y, p.r)


def _mask3d(kind: Shape3D, l, r, h, px, py, pz):
    dx, dy, dz = px - l[0], py - l[1], pz - l[2]
    if kind is Shape3D.SPHERE:
        return dx * dx + dy * dy + dz * dz <= r * r
    if kind is Shape3D.CUBE:
        return (np.abs(dx) <= r) & (np.abs(dy) <= r) & (np.abs(dz) <= r)
    return (dx * dx + dy * dy <= r * r) & (np.abs(dz) <= h / 2.0)


def member3d(kind: Shape3D, l, r, h, p) -> bool:
    return bool(_mask3d(kind, l, r, h, p[0], p[1], p[2]))


@lru_cache(maxsize=256)
def _voxels(kind: Shape3D, l: tuple[int, int, int], r: int, h) -> np.ndarray:
    # Separable evaluation keeps this cheap: broadcast 1-D axes to (64, 64, 64).
    c = _centers
    px, py, pz = c[:, None, None], c[None, :, None], c[None, None, :]
    out = np.broadcast_to(_mask3d(kind, l, r, h, px, py, pz), (CANVAS,) * 3).copy()
    out.flags.writeable = False
    return out


def voxelize3d(kind: Shape3D, l, r, h=None) -> np.ndarray:
    """64^3 boolean grid ``[x, y, z]`` of a 3D primitive."""
    return _voxels(kind, tuple(int(v) for v in l), int(r), h).copy()


def voxelize_prim(p: Prim3D) -> np.ndarray:
    return _voxels(p.kind, (p.x, p.y, p.z), p.r, p.h)


@dataclass(frozen=True)
class Box2D:
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def area(self) -> float:
        return max(0.0, self.x1 - self.x0) * max(0.0, self.y1 - self.y0)

    def contains(self, x: float, y: float) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1


def bounding_box2d(kind: Shape2D, l, r) -> Box2D:
    """Tight axis-aligned box of the continuous shape."""
    lx, ly = l
    if kind is Shape2D.CIRCLE:
        return Box2D(lx - r, ly - r, lx + r, ly + r)
    if kind is Shape2D.SQUARE:
        half = r / SQRT2
        return Box2D(lx - half, ly - half, lx + half, ly + half)
    half_base = r * COS30
    return Box2D(lx - half_base, ly - r, lx + half_base, ly + r / 2.0)


def prim_box(p: Prim2D) -> Box2D:
    return bounding_box2d(p.kind, (p.x, p.y), p.r)


def box_iou(a: Box2D, b: Box2D) -> float:
    inter = Box2D(max(a.x0, b.x0), max(a.y0, b.y0), min(a.x1, b.x1), min(a.y1, b.y1)).area
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0
