"""Grid file formats: plain PBM for 2D canvases and CSGV1 for voxel grids."""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .core import CANVAS

CSGV1_HEADER = f"CSGV1 {CANVAS} {CANVAS} {CANVAS}\n".encode("ascii")


class GridFormatError(ValueError):
    pass


def write_atomic(path: str | os.PathLike, data: bytes | str) -> None:
    """Write via a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_pbm(grid: np.ndarray) -> str:
    g = np.asarray(grid, dtype=bool)
    if g.ndim != 2:
        raise GridFormatError(f"PBM needs a 2D grid, got shape {g.shape}")
    h, w = g.shape
    rows = "\n".join(" ".join("1" if v else "0" for v in row) for row in g)
    return f"P1\n{w} {h}\n{rows}\n"


def decode_pbm(text: str) -> np.ndarray:
    tokens = []
    for line in text.splitlines():
        tokens.extend(line.split("#", 1)[0].split())
    if not tokens or tokens[0] != "P1":
        raise GridFormatError("not a plain PBM (P1) file")
    try:
        w, h = int(tokens[1]), int(tokens[2])
    except (IndexError, ValueError):
        raise GridFormatError("bad PBM size line") from None
    # P1 allows cells without separating whitespace
    cells = "".join(tokens[3:])
    if len(cells) != w * h or set(cells) - {"0", "1"}:
        raise GridFormatError(f"expected {w * h} binary cells, got {len(cells)}")
    return (np.frombuffer(cells.encode("ascii"), dtype=np.uint8) == ord("1")).reshape(h, w)


def write_pbm(path, grid: np.ndarray) -> None:
    write_atomic(path, encode_pbm(grid))


def read_pbm(path) -> np.ndarray:
    return decode_pbm(Path(path).read_text(encoding="ascii"))


def encode_csgv1(grid: np.ndarray) -> bytes:
    g = np.asarray(grid, dtype=bool)
    if g.shape != (CANVAS,) * 3:
        raise GridFormatError(f"CSGV1 needs a {CANVAS}^3 grid, got shape {g.shape}")
    return CSGV1_HEADER + g.astype(np.uint8).tobytes(order="C")


def decode_csgv1(data: bytes) -> np.ndarray:
    if not data.startswith(CSGV1_HEADER):
        raise GridFormatError("missing CSGV1 header")
    body = data[len(CSGV1_HEADER):]
    if len(body) != CANVAS ** 3:
        raise GridFormatError(f"expected {CANVAS ** 3} voxel bytes, got {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    if arr.max(initial=0) > 1:
        raise GridFormatError("voxel bytes must be 0x00 or 0x01")
    return arr.reshape((CANVAS,) * 3).astype(bool)


def write_csgv1(path, grid: np.ndarray) -> None:
    write_atomic(path, encode_csgv1(grid))


def read_csgv1(path) -> np.ndarray:
    return decode_csgv1(Path(path).read_bytes())


def read_grid(path) -> np.ndarray:
    """Read either format, sniffing the header."""
    data = Path(path).read_bytes()
    if data.startswith(b"CSGV1"):
        return decode_csgv1(data)
    return decode_pbm(data.decode("ascii"))


def write_grid(path, grid: np.ndarray) -> None:
    if np.ndim(grid) == 3:
        write_csgv1(path, grid)
    else:
        write_pbm(path, grid)
