"""
Programs, rendering and shape distance
======================================

A CSG program is a postfix list of placed primitives and boolean operators.
This walk-through parses a couple of programs, runs them on the stack
executor, looks at the expression tree, compares shapes with the edge
Chamfer distance and writes the grids to disk.

Run with ``python3 demos/programs_and_rendering.py [out_dir]``.
"""
import sys
from pathlib import Path

import numpy as np

from csgparse.core import execute, execute_trace, format_program, parse_program, tree_to_postfix
from csgparse.io import read_grid, write_grid
from csgparse.metrics import chamfer, edge_mask, iou3d


def ascii(grid, step=4):
    """Coarse text preview: one character per ``step`` x ``step`` block."""
    rows = []
    for y in range(0, grid.shape[0], step):
        rows.append("".join("#" if grid[y:y + step, x:x + step].mean() >= 0.5 else "."
                            for x in range(0, grid.shape[1], step)))
    return "\n".join(rows)


out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

# %%
# Parsing is whitespace tolerant; formatting gives the canonical text back.
prog = parse_program("c(32,32,16)   s(16,16,12)\n union  t(40,40,12) subtract")
print(format_program(prog))

# %%
# The executor keeps a stack of canvases. ``execute_trace`` exposes the
# intermediate results, which is handy for seeing what each operator did.
for node, canvas in execute_trace(prog):
    print(f"{int(canvas.sum()):5d} cells  {format_program(tree_to_postfix(node))}")

shape = execute(prog)
print(ascii(shape))

# %%
# Chamfer distance works on 4-neighbour edge pixels and is normalised by the
# canvas diagonal, so a small shift gives a small distance.
shifted = execute(parse_program("c(32,32,16) s(24,16,12) union t(40,40,12) subtract"))
print("edge pixels:", int(edge_mask(shape).sum()))
print("CD to itself:", chamfer(shape, shape))
print("CD to shifted copy: %.4f" % chamfer(shape, shifted))

# %%
# 3D programs use spheres, cubes and z-axis cylinders on a 64^3 grid and are
# compared by IoU.
solid = execute(parse_program("cu(32,32,32,16) sp(32,32,32,20) intersect cy(32,32,32,8,32) subtract", "3d"))
other = execute(parse_program("cu(32,32,32,16) cy(32,32,32,8,32) subtract", "3d"))
print("voxels:", int(solid.sum()), " IoU vs cube minus cylinder: %.1f" % iou3d(solid, other))

# %%
# Grids go to plain PBM (2D) or the CSGV1 binary format (3D).
write_grid(out / "shape.pbm", shape)
write_grid(out / "solid.csgv", solid)
assert np.array_equal(read_grid(out / "shape.pbm"), shape)
assert np.array_equal(read_grid(out / "solid.csgv"), solid)
print("wrote", sorted(p.name for p in out.iterdir()))
