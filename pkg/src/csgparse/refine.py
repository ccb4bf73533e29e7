"""Render-in-the-loop refinement of primitive positions and sizes.

Program structure, operation order and primitive kinds never change; only
the integer parameters move. Each sweep visits every parameter in program
order and tries ``value +- delta`` for every delta of the schedule, clamped
so the primitive stays inside the canvas, and keeps the best strictly
improving move.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .core import (
    CANVAS, InvalidProgram, Prim2D, Prim3D, Program, Shape3D, execute, validate,
)
from .metrics import ShapeTarget


@dataclass(frozen=True)
class RefineConfig:
    max_sweeps: int = 10
    steps: tuple[int, ...] = (8, 4, 2, 1)

    def __post_init__(self):
        if self.max_sweeps < 0:
            raise ValueError("max_sweeps must be >= 0")


def param_names(p) -> tuple[str, ...]:
    if isinstance(p, Prim2D):
        return ("x", "y", "r")
    if p.kind is Shape3D.CYLINDER:
        return ("x", "y", "z", "r", "h")
    return ("x", "y", "z", "r")


def param_bounds(p, name: str) -> tuple[int, int]:
    """Inclusive integer range for one parameter, the others held fixed."""
    if name == "r":
        if isinstance(p, Prim3D) and p.kind is Shape3D.CYLINDER:
            axes = (p.x, p.y)
        else:
            axes = (p.x, p.y) if isinstance(p, Prim2D) else (p.x, p.y, p.z)
        return 1, min(min(c, CANVAS - c) for c in axes)
    if name == "h":
        return 1, 2 * min(p.z, CANVAS - p.z)
    if name == "z" and p.kind is Shape3D.CYLINDER:
        half = math.ceil(p.h / 2)
        return half, CANVAS - half
    return p.r, CANVAS - p.r


def contained(p) -> bool:
    return all(lo <= getattr(p, n) <= hi for n in param_names(p) for lo, hi in [param_bounds(p, n)])


def refine(program: Program, target: np.ndarray, cfg: RefineConfig = RefineConfig()):
    """Coordinate-descent refinement against ``target``.

    Returns ``(refined_program, trace)`` where ``trace[i]`` is the objective
    (Chamfer in 2D, ``1 - IoU/100`` in 3D) after ``i`` sweeps. The search
    stops early after a sweep that accepts no move.
    """
    report = validate(program)
    if not report.valid:
        raise InvalidProgram(report)
    goal = ShapeTarget(target, program.mode)
    ins = list(program.instructions)
    slots = [i for i, x in enumerate(ins) if isinstance(x, (Prim2D, Prim3D))]

    def score(instrs) -> float:
        return goal.distance(execute(Program(program.mode, instrs, program.max_len)))

    best = score(ins)
    trace = [best]
    for _ in range(cfg.max_sweeps):
        moved = False
        for i in slots:
            for name in param_names(ins[i]):
                prim = ins[i]
                cur = getattr(prim, name)
                lo, hi = param_bounds(prim, name)
                tried = set()
                move, move_score = None, best
                for d in cfg.steps:
                    for v in (cur - d, cur + d):
                        v = min(max(v, lo), hi)
                        if v == cur or v in tried:
                            continue
                        tried.add(v)
                        cand = replace(prim, **{name: v})
                        ins[i] = cand
                        s = score(ins)
                        if s < move_score:
                            move, move_score = cand, s
                ins[i] = prim
                if move is not None:
                    ins[i] = move
                    best = move_score
                    moved = True
        trace.append(best)
        if not moved:
            break
    return Program(program.mode, tuple(ins), program.max_len), trace
