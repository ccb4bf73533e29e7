"""Edge extraction, distance transforms, Chamfer distance, IoU and the shaped reward."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import CANVAS, Mode, Program, execute, validate

DIAGONAL = CANVAS * math.sqrt(2.0)


@dataclass(frozen=True)
class RewardConfig:
    gamma: float = 20.0
    max_len: int = 13

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")


@dataclass(frozen=True)
class RewardValue:
    r: float
    cd: float | None = None


def edge_mask(g: np.ndarray) -> np.ndarray:
    """ON cells with at least one OFF 4-neighbour; outside the grid counts as OFF."""
    g = np.asarray(g, dtype=bool)
    padded = np.pad(g, 1, constant_values=False)
    interior = np.ones_like(g)
    for axis in range(g.ndim):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[tuple(slice(1, -1) for _ in range(g.ndim))]
    return g & ~interior


def edge_points(g: np.ndarray) -> np.ndarray:
    """Pixel-centre coordinates ``(x, y)`` of the edge cells of a 2D grid, shape (n, 2)."""
    ys, xs = np.nonzero(edge_mask(g))
    return np.stack([xs + 0.5, ys + 0.5], axis=1)


def distance_transform(g: np.ndarray, edges: np.ndarray | None = None) -> np.ndarray:
    """Exact Euclidean distance from every cell centre to the nearest edge cell of ``g``.

    Returns an all-``inf`` field when ``g`` has no edge cells.
    """
    if edges is None:
        edges = edge_mask(g)
    if not edges.any():
        return np.full(edges.shape, np.inf)
    return ndimage.distance_transform_edt(~edges)


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric edge Chamfer distance between two 2D grids, scaled into [0, 1].

    Both directions average the nearest-edge distance over one edge set and
    contribute half each; the sum is divided by the 64x64 canvas diagonal.
    Two empty edge sets give 0, exactly one empty gives 1.
    """
    ea, eb = edge_mask(a), edge_mask(b)
    na, nb = int(ea.sum()), int(eb.sum())
    if na == 0 and nb == 0:
        return 0.0
    if na == 0 or nb == 0:
        return 1.0
    da = distance_transform(a, ea)
    db = distance_transform(b, eb)
    d = 0.5 * db[ea].mean() + 0.5 * da[eb].mean()
    return float(min(d / DIAGONAL, 1.0))


class ShapeTarget:
    """A fixed target with its edge map and distance field precomputed.

    ``distance(pred)`` equals ``shape_distance(pred, target, mode)``.
    """

    def __init__(self, target: np.ndarray, mode: Mode | str = Mode.D2):
        self.grid = np.asarray(target, dtype=bool)
        self.mode = Mode(mode)
        if self.mode is Mode.D2:
            self.edges = edge_mask(self.grid)
            self.n_edges = int(self.edges.sum())
            self.dt = distance_transform(self.grid, self.edges)

    def distance(self, pred: np.ndarray) -> float:
        if self.mode is Mode.D3:
            return 1.0 - iou3d(pred, self.grid) / 100.0
        ep = edge_mask(pred)
        n = int(ep.sum())
        if n == 0 and self.n_edges == 0:
            return 0.0
        if n == 0 or self.n_edges == 0:
            return 1.0
        d = 0.5 * self.dt[ep].mean() + 0.5 * distance_transform(pred, ep)[self.edges].mean()
        return float(min(d / DIAGONAL, 1.0))


def chamfer_pixels(a: np.ndarray, b: np.ndarray) -> float:
    """Chamfer distance in pixel units, as tabulated in evaluation reports."""
    return chamfer(a, b) * DIAGONAL


def iou3d(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two occupancy grids, in percent."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 100.0
    return 100.0 * np.count_nonzero(a & b) / union


def shape_distance(pred: np.ndarray, target: np.ndarray, mode: Mode | str) -> float:
    """The objective used throughout: Chamfer in 2D, ``1 - IoU/100`` in 3D."""
    if Mode(mode) is Mode.D3:
        return 1.0 - iou3d(pred, target) / 100.0
    return chamfer(pred, target)


def shaped_reward(cd: float, gamma: float = 20.0) -> float:
    return (1.0 - cd) ** gamma


def reward(p: Program, target: np.ndarray, cfg: RewardConfig = RewardConfig()) -> RewardValue:
    if not validate(p).valid or len(p.body()) > cfg.max_len:
        return RewardValue(0.0, None)
    cd = shape_distance(execute(p), target, p.mode)
    return RewardValue(shaped_reward(cd, cfg.gamma), cd)
