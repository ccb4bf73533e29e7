"""Instruction set, program text format, validity checks and the stack executor.

Programs are postfix sequences: primitives push a rendered canvas, boolean
operations pop two canvases (left pushed first) and push the result.

Coordinate conventions:

* 2D grids are ``bool`` arrays of shape ``(64, 64)`` indexed ``[y, x]``
  (row-major, y grows downward).
* 3D grids are ``bool`` arrays of shape ``(64, 64, 64)`` indexed ``[x, y, z]``.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np

CANVAS = 64
MAX_LEN = 13
LOCATIONS = tuple(range(8, 57, 8))
SIZES = tuple(range(8, 33, 4))


class Mode(str, enum.Enum):
    D2 = "2d"
    D3 = "3d"


class Shape2D(enum.Enum):
    CIRCLE = "c"
    SQUARE = "s"
    TRIANGLE = "t"


class Shape3D(enum.Enum):
    SPHERE = "sp"
    CUBE = "cu"
    CYLINDER = "cy"


class BoolOp(enum.Enum):
    UNION = "union"
    INTERSECT = "intersect"
    SUBTRACT = "subtract"


@dataclass(frozen=True)
class Prim2D:
    kind: Shape2D
    x: int
    y: int
    r: int

    def __str__(self):
        return f"{self.kind.value}({self.x},{self.y},{self.r})"


@dataclass(frozen=True)
class Prim3D:
    kind: Shape3D
    x: int
    y: int
    z: int
    r: int
    h: int | None = None  # cylinders only

    def __str__(self):
        args = [self.x, self.y, self.z, self.r]
        if self.kind is Shape3D.CYLINDER:
            args.append(self.h)
        return f"{self.kind.value}({','.join(map(str, args))})"


@dataclass(frozen=True)
class Op:
    op: BoolOp

    def __str__(self):
        return self.op.value


@dataclass(frozen=True)
class Stop:
    def __str__(self):
        return "$"


STOP = Stop()
Instruction = Union[Prim2D, Prim3D, Op, Stop]
Primitive = Union[Prim2D, Prim3D]


class CSGSyntaxError(ValueError):
    """Raised by :func:`parse_program` with the character offset of the problem."""

    def __init__(self, message: str, position: int, reason: str = "syntax"):
        super().__init__(f"{message} (at {position})")
        self.position = position
        self.reason = reason


class InvalidProgram(ValueError):
    def __init__(self, report: "ValidityReport"):
        super().__init__(f"invalid program: {report}")
        self.report = report


@dataclass(frozen=True)
class Program:
    mode: Mode
    instructions: tuple[Instruction, ...]
    max_len: int = MAX_LEN

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "instructions", tuple(self.instructions))

    def __len__(self):
        return len(self.instructions)

    def __iter__(self):
        return iter(self.instructions)

    def body(self) -> tuple[Instruction, ...]:
        """Instructions without the trailing Stop."""
        ins = self.instructions
        if ins and isinstance(ins[-1], Stop):
            return ins[:-1]
        return ins

    def primitives(self) -> list[Primitive]:
        return [i for i in self.instructions if isinstance(i, (Prim2D, Prim3D))]

    def with_stop(self) -> "Program":
        if self.instructions and isinstance(self.instructions[-1], Stop):
            return self
        return Program(self.mode, self.instructions + (STOP,), self.max_len)

    def __str__(self):
        return format_program(self)


# ---------------------------------------------------------------- text format

_TOKEN = re.compile(
    r"\s*(?:(?P<prim>[a-z]+)\s*\((?P<args>[^()]*)\)|(?P<word>[a-z]+|\$))",
)
_PRIM_ARITY = {"c": 3, "s": 3, "t": 3, "sp": 4, "cu": 4, "cy": 5}


def _on_grid(values: Iterable[int], grid: tuple[int, ...]) -> bool:
    return all(v in grid for v in values)


def parse_program(text: str, mode: Mode | str = Mode.D2, *, strict: bool = True,
                  max_len: int = MAX_LEN) -> Program:
    """Parse postfix program text such as ``"c(32,32,16) s(16,16,12) union"``.

    With ``strict=True`` (the default) primitive parameters must lie on the
    discrete vocabulary grids (locations 8..56 step 8, sizes 8..32 step 4).
    ``strict=False`` accepts any integers, which is what refined programs use.
    """
    mode = Mode(mode)
    out: list[Instruction] = []
    pos = 0
    n = len(text)
    while True:
        while pos < n and text[pos].isspace():
            pos += 1
        if pos >= n:
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise CSGSyntaxError(f"unexpected character {text[pos]!r}", pos)
        start = m.start() + (len(m.group(0)) - len(m.group(0).lstrip()))
        if out and isinstance(out[-1], Stop):
            raise CSGSyntaxError("instruction after stop symbol", start)
        if m.group("prim"):
            out.append(_parse_prim(m.group("prim"), m.group("args"), mode, strict, start))
        else:
            word = m.group("word")
            if word == "$":
                out.append(STOP)
            else:
                try:
                    out.append(Op(BoolOp(word)))
                except ValueError:
                    raise CSGSyntaxError(f"unknown token {word!r}", start) from None
        pos = m.end()
    if not out:
        raise CSGSyntaxError("empty program", 0, reason="empty")
    return Program(mode, tuple(out), max_len)


def _parse_prim(name: str, args: str, mode: Mode, strict: bool, pos: int) -> Primitive:
    if name not in _PRIM_ARITY:
        raise CSGSyntaxError(f"unknown primitive {name!r}", pos)
    is3d = len(name) == 2
    if is3d != (mode is Mode.D3):
        raise CSGSyntaxError(f"{name!r} is not a {mode.value} primitive", pos, reason="mixed_mode")
    try:
        vals = [int(a) for a in args.split(",")]
    except ValueError:
        raise CSGSyntaxError(f"bad arguments {args!r}", pos) from None
    if len(vals) != _PRIM_ARITY[name]:
        raise CSGSyntaxError(f"{name} takes {_PRIM_ARITY[name]} arguments", pos)
    ndim = 3 if is3d else 2
    loc, sizes = vals[:ndim], vals[ndim:]
    if strict and not (_on_grid(loc, LOCATIONS) and _on_grid(sizes, SIZES)):
        raise CSGSyntaxError(f"off-grid parameters in {name}({args})", pos, reason="off_grid")
    if not strict and (any(v < 0 or v > CANVAS for v in loc) or any(s < 1 for s in sizes)):
        raise CSGSyntaxError(f"parameters out of range in {name}({args})", pos, reason="range")
    if is3d:
        kind = Shape3D(name)
        h = vals[4] if kind is Shape3D.CYLINDER else None
        return Prim3D(kind, vals[0], vals[1], vals[2], vals[3], h)
    return Prim2D(Shape2D(name), *vals)


def format_program(p: Program | Iterable[Instruction]) -> str:
    return " ".join(str(i) for i in p)


# ------------------------------------------------------------------ validity

@dataclass(frozen=True)
class ValidityReport:
    valid: bool
    reason: str = "ok"  # ok | stack_underflow | leftover_operands | empty | mixed_mode | too_long | misplaced_stop
    at: int | None = None
    count: int | None = None


def validate(p: Program) -> ValidityReport:
    """Check that ``p`` is a well-formed postfix expression.

    Primitives push, operations pop two and push one; the stack must never
    underflow and must hold exactly one canvas at the end.
    """
    body = p.body()
    if any(isinstance(i, Stop) for i in body):
        return ValidityReport(False, "misplaced_stop", at=body.index(STOP))
    if not body:
        return ValidityReport(False, "empty")
    want = Prim3D if p.mode is Mode.D3 else Prim2D
    other = Prim2D if p.mode is Mode.D3 else Prim3D
    depth = 0
    for k, ins in enumerate(body):
        if isinstance(ins, other):
            return ValidityReport(False, "mixed_mode", at=k)
        if isinstance(ins, want):
            depth += 1
        else:
            if depth < 2:
                return ValidityReport(False, "stack_underflow", at=k)
            depth -= 1
    if depth != 1:
        return ValidityReport(False, "leftover_operands", count=depth)
    if len(body) > p.max_len:
        return ValidityReport(False, "too_long", count=len(body))
    return ValidityReport(True)


def is_valid(p: Program) -> bool:
    return validate(p).valid


# --------------------------------------------------------------- expression tree

@dataclass(frozen=True)
class Leaf:
    prim: Primitive


@dataclass(frozen=True)
class Node:
    op: BoolOp
    left: "ExprTree"
    right: "ExprTree"


ExprTree = Union[Leaf, Node]


def to_tree(p: Program) -> ExprTree:
    report = validate(p)
    if not report.valid:
        raise InvalidProgram(report)
    stack: list[ExprTree] = []
    for ins in p.body():
        if isinstance(ins, Op):
            right = stack.pop()
            left = stack.pop()
            stack.append(Node(ins.op, left, right))
        else:
            stack.append(Leaf(ins))
    return stack[0]


def tree_to_postfix(t: ExprTree) -> list[Instruction]:
    if isinstance(t, Leaf):
        return [t.prim]
    return tree_to_postfix(t.left) + tree_to_postfix(t.right) + [Op(t.op)]


def tree_signature(t: ExprTree):
    """Tree shape with ops and primitive kinds, ignoring primitive parameters."""
    if isinstance(t, Leaf):
        return t.prim.kind
    return (t.op, tree_signature(t.left), tree_signature(t.right))


# ----------------------------------------------------------------- execution

def apply_op(op: BoolOp, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if op is BoolOp.UNION:
        return a | b
    if op is BoolOp.INTERSECT:
        return a & b
    return a & ~b


def _execute(p: Program, mode: Mode, render) -> np.ndarray:
    if p.mode is not mode:
        raise InvalidProgram(ValidityReport(False, "mixed_mode"))
    report = validate(p)
    if not report.valid:
        raise InvalidProgram(report)
    stack: list[np.ndarray] = []
    for ins in p.body():
        if isinstance(ins, Op):
            b = stack.pop()
            a = stack.pop()
            stack.append(apply_op(ins.op, a, b))
        else:
            stack.append(render(ins))
    return np.array(stack[0], dtype=bool)


def execute2d(p: Program) -> np.ndarray:
    from .geometry import rasterize_prim
    return _execute(p, Mode.D2, rasterize_prim)


def execute3d(p: Program) -> np.ndarray:
    from .geometry import voxelize_prim
    return _execute(p, Mode.D3, voxelize_prim)


def execute(p: Program) -> np.ndarray:
    return execute3d(p) if p.mode is Mode.D3 else execute2d(p)


def execute_trace(p: Program) -> list[tuple[ExprTree, np.ndarray]]:
    """Execute ``p`` and return every (subtree, canvas) pair produced, in order."""
    from .geometry import rasterize_prim, voxelize_prim
    render = voxelize_prim if p.mode is Mode.D3 else rasterize_prim
    report = validate(p)
    if not report.valid:
        raise InvalidProgram(report)
    stack: list[tuple[ExprTree, np.ndarray]] = []
    trace = []
    for ins in p.body():
        if isinstance(ins, Op):
            (tb, b), (ta, a) = stack.pop(), stack.pop()
            item = (Node(ins.op, ta, tb), apply_op(ins.op, a, b))
        else:
            item = (Leaf(ins), render(ins))
        stack.append(item)
        trace.append(item)
    return trace
