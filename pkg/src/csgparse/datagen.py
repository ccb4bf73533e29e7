"""Instruction vocabularies and synthetic program/dataset generation."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .core import (
    CANVAS, LOCATIONS, SIZES, STOP, BoolOp, Mode, Op, Prim2D, Prim3D, Program,
    Shape2D, Shape3D, apply_op, format_program,
)
from .geometry import rasterize_prim, voxelize_prim
from .io import write_atomic

OPS = (Op(BoolOp.UNION), Op(BoolOp.INTERSECT), Op(BoolOp.SUBTRACT))

# Full-scale split sizes (train, val, test) per program length.
FULL_SPLITS_2D = {3: (25_000, 5_000, 5_000), 5: (100_000, 10_000, 50_000),
             7: (150_000, 20_000, 50_000), 9: (250_000, 20_000, 50_000),
             11: (350_000, 20_000, 100_000), 13: (350_000, 20_000, 100_000)}
FULL_SPLITS_3D = {3: (100_000, 10_000, 20_000), 5: (200_000, 20_000, 40_000),
             7: (400_000, 40_000, 80_000)}
LENGTHS = {Mode.D2: (3, 5, 7, 9, 11, 13), Mode.D3: (3, 5, 7)}


class GenerationTimeout(RuntimeError):
    pass


def _inside(c: int, half: float) -> bool:
    return c - half >= 0 and c + half <= CANVAS


class Vocabulary:
    """Ordered instruction list: primitives, then union, intersect, subtract, Stop."""

    def __init__(self, mode: Mode | str, entries):
        self.mode = Mode(mode)
        self.entries = tuple(entries)
        self.index = {e: i for i, e in enumerate(self.entries)}
        self.n_prims = len(self.entries) - 4
        self.stop_index = len(self.entries) - 1
        self.start_index = len(self.entries)  # decoder input only, never emitted

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def encode(self, p: Program) -> list[int]:
        return [self.index[i] for i in p.instructions]

    def decode(self, tokens, max_len: int = 13) -> Program:
        return Program(self.mode, tuple(self.entries[t] for t in tokens), max_len)

    def is_op(self, i: int) -> bool:
        return self.n_prims <= i < self.stop_index

    @property
    def text(self) -> str:
        return "\n".join(str(e) for e in self.entries) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(f"{self.mode.value}\n{self.text}".encode()).hexdigest()

    def manifest(self) -> dict:
        kinds: dict[str, int] = {}
        for e in self.entries[: self.n_prims]:
            kinds[e.kind.value] = kinds.get(e.kind.value, 0) + 1
        return {"mode": self.mode.value, "size": len(self), "primitives": self.n_prims,
                "per_kind": kinds, "sha256": self.hash}


@lru_cache(maxsize=None)
def build_vocabulary(mode: Mode | str = Mode.D2) -> Vocabulary:
    """Enumerate every on-grid primitive that lies fully inside the canvas.

    Containment is judged on ``l +- r`` per axis (and ``z +- h/2`` for
    cylinders).
    """
    mode = Mode(mode)
    prims = []
    if mode is Mode.D2:
        for kind in Shape2D:
            for x in LOCATIONS:
                for y in LOCATIONS:
                    for r in SIZES:
                        if _inside(x, r) and _inside(y, r):
                            prims.append(Prim2D(kind, x, y, r))
    else:
        for kind in Shape3D:
            for x in LOCATIONS:
                for y in LOCATIONS:
                    for z in LOCATIONS:
                        for r in SIZES:
                            if not (_inside(x, r) and _inside(y, r)):
                                continue
                            if kind is Shape3D.CYLINDER:
                                for h in SIZES:
                                    if _inside(z, h / 2):
                                        prims.append(Prim3D(kind, x, y, z, r, h))
                            elif _inside(z, r):
                                prims.append(Prim3D(kind, x, y, z, r))
    return Vocabulary(mode, prims + list(OPS) + [STOP])


def expected_vocab_size(mode: Mode | str) -> int:
    """Closed-form primitive count implied by the containment rule (ops/Stop excluded)."""
    mode = Mode(mode)
    per_axis = {r: sum(_inside(c, r) for c in LOCATIONS) for r in SIZES}
    if mode is Mode.D2:
        return 3 * sum(n * n for n in per_axis.values())
    cubes = sum(n ** 3 for n in per_axis.values())
    z_h = sum(sum(_inside(z, h / 2) for z in LOCATIONS) for h in SIZES)
    return 2 * cubes + sum(n * n for n in per_axis.values()) * z_h


# ----------------------------------------------------------------- sampling

@dataclass(frozen=True)
class Thresholds:
    change_frac: float = 0.10
    min_on: int | None = None  # None: 64 pixels in 2D, 512 voxels in 3D
    op_weights: tuple[float, float, float] = (0.18, 0.54, 0.28)  # union, intersect, subtract
    max_attempts: int = 10_000
    local_retries: int = 25

    def min_on_for(self, mode: Mode) -> int:
        if self.min_on is not None:
            return self.min_on
        return 512 if mode is Mode.D3 else 64


def op_changes_enough(a: np.ndarray, b: np.ndarray, out: np.ndarray, frac: float = 0.10) -> bool:
    """The result's ON count must differ from *each* operand's by ``frac * (|a| + |b|)``."""
    na, nb, no = np.count_nonzero(a), np.count_nonzero(b), np.count_nonzero(out)
    need = frac * (na + nb)
    return abs(no - na) >= need and abs(no - nb) >= need


def _skeleton(n_prims: int, rng: np.random.Generator) -> list[bool]:
    """Random postfix shape: True marks a primitive slot, False an operation."""
    slots, depth, left = [], 0, n_prims
    while left or depth > 1:
        if left and (depth < 2 or rng.random() < left / (left + depth - 1)):
            slots.append(True)
            depth += 1
            left -= 1
        else:
            slots.append(False)
            depth -= 1
    return slots


def sample_program(length: int, vocab: Vocabulary, rng: np.random.Generator,
                   thresholds: Thresholds = Thresholds()) -> Program:
    """Draw one program of exactly ``length`` instructions that passes the rejection rules.

    Each boolean step must change the ON count by at least ``change_frac`` of
    the operands' summed counts, and the final canvas needs ``min_on`` cells.
    The operation drawn for a step is kept; a failing step redraws whichever
    operands are lone primitives, and a step with no such operand (or too
    many failures) restarts the program. Every rejection counts against
    ``max_attempts``.
    """
    if length < 1 or length % 2 == 0:
        raise ValueError(f"program length must be odd, got {length}")
    render = voxelize_prim if vocab.mode is Mode.D3 else rasterize_prim
    weights = np.asarray(thresholds.op_weights, dtype=float)
    weights = weights / weights.sum()
    min_on = thresholds.min_on_for(vocab.mode)
    attempts = 0

    def draw_prim():
        return vocab.entries[int(rng.integers(vocab.n_prims))]

    while attempts < thresholds.max_attempts:
        slots = _skeleton((length + 1) // 2, rng)
        stack: list[tuple[list, np.ndarray]] = []
        ok = True
        for is_prim in slots:
            if is_prim:
                p = draw_prim()
                stack.append(([p], render(p)))
                continue
            (rt, b), (lt, a) = stack.pop(), stack.pop()
            op = OPS[int(rng.choice(3, p=weights))]
            leaves = [side for side, t in (("r", rt), ("l", lt)) if len(t) == 1]
            for k in range(thresholds.local_retries):
                out = apply_op(op.op, a, b)
                if op_changes_enough(a, b, out, thresholds.change_frac) and out.any():
                    break
                attempts += 1
                if not leaves:
                    ok = False
                    break
                p = draw_prim()
                if leaves[k % len(leaves)] == "r":
                    rt, b = [p], render(p)
                else:
                    lt, a = [p], render(p)
            else:
                ok = False
            if not ok:
                break
            stack.append((lt + rt + [op], out))
        if ok and np.count_nonzero(stack[0][1]) >= min_on:
            return Program(vocab.mode, tuple(stack[0][0]), max(13, length))
        attempts += 1
    raise GenerationTimeout(f"no admissible length-{length} program in {thresholds.max_attempts} attempts")


# ------------------------------------------------------------------ datasets

@dataclass
class DatasetSpec:
    mode: Mode | str = Mode.D2
    counts: dict[int, int] = field(default_factory=lambda: {3: 100})
    seed: int = 0
    splits: tuple[float, float, float] = (0.8, 0.1, 0.1)
    thresholds: Thresholds = Thresholds()

    def __post_init__(self):
        self.mode = Mode(self.mode)
        for length in self.counts:
            if length % 2 == 0:
                raise ValueError(f"program lengths must be odd, got {length}")


def _split_sizes(n: int, fracs) -> tuple[int, int, int]:
    n_val = int(round(n * fracs[1]))
    n_test = int(round(n * fracs[2]))
    return n - n_val - n_test, n_val, n_test


def generate_programs(mode, length: int, count: int, rng: np.random.Generator,
                      thresholds: Thresholds = Thresholds()) -> list[str]:
    """``count`` unique canonical program texts of one length, in generation order."""
    vocab = build_vocabulary(mode)
    seen: dict[str, None] = {}
    misses = 0
    while len(seen) < count:
        text = format_program(sample_program(length, vocab, rng, thresholds))
        if text in seen:
            misses += 1
            if misses > thresholds.max_attempts:
                raise GenerationTimeout(f"cannot find {count} unique length-{length} programs")
            continue
        seen[text] = None
    return list(seen)


def generate_dataset(spec: DatasetSpec, out_dir: str | os.PathLike) -> dict:
    """Write ``{split}_len{L}.txt`` files plus ``manifest.json`` under ``out_dir``.

    Programs are deduplicated by canonical text before splitting, so the
    splits are disjoint. Output is byte-identical for a fixed spec.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    vocab = build_vocabulary(spec.mode)
    files = {}
    for length in sorted(spec.counts):
        progs = generate_programs(spec.mode, length, spec.counts[length], rng, spec.thresholds)
        n_train, n_val, _ = _split_sizes(len(progs), spec.splits)
        parts = {"train": progs[:n_train], "val": progs[n_train:n_train + n_val],
                 "test": progs[n_train + n_val:]}
        for split, lines in parts.items():
            name = f"{split}_len{length}.txt"
            write_atomic(out / name, "".join(line + "\n" for line in lines))
            files[name] = len(lines)
    manifest = {
        "mode": spec.mode.value,
        "seed": spec.seed,
        "counts": {str(k): v for k, v in sorted(spec.counts.items())},
        "splits": list(spec.splits),
        "files": files,
        "vocabulary": vocab.manifest(),
        "thresholds": {"change_frac": spec.thresholds.change_frac,
                       "min_on": spec.thresholds.min_on_for(spec.mode),
                       "op_weights": list(spec.thresholds.op_weights)},
    }
    write_atomic(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_split(data_dir: str | os.PathLike, split: str, mode=None) -> list[Program]:
    """Read every ``{split}_len*.txt`` program file in a generated dataset directory."""
    from .core import parse_program
    data = Path(data_dir)
    if mode is None:
        mode = json.loads((data / "manifest.json").read_text())["mode"]
    progs = []
    for path in sorted(data.glob(f"{split}_len*.txt"), key=lambda p: int(p.stem.split("len")[1])):
        for line in path.read_text().splitlines():
            if line.strip():
                progs.append(parse_program(line, mode, strict=False))
    return progs
