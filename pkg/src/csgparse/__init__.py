"""Parse 2D and 3D shapes into constructive solid geometry programs."""
from .core import (
    CANVAS, BoolOp, CSGSyntaxError, InvalidProgram, Mode, Op, Prim2D, Prim3D, Program, STOP,
    Shape2D, Shape3D, execute, execute2d, execute3d, format_program, parse_program, to_tree,
    validate,
)
from .datagen import Vocabulary, build_vocabulary
from .metrics import chamfer, iou3d, reward, shape_distance

__version__ = "0.1.0"
