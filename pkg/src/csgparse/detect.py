"""Using the parser as a primitive detector, and VOC-style average precision."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Prim2D, Program, Shape2D
from .geometry import Box2D, box_iou, prim_box


@dataclass(frozen=True)
class Detection:
    kind: Shape2D
    box: Box2D
    score: float
    prim: Prim2D | None = None


@dataclass(frozen=True)
class GroundTruth:
    kind: Shape2D
    box: Box2D


def detections_from_beam(programs: Sequence[Program]) -> list[Detection]:
    """Score each distinct primitive by the fraction of beam programs containing it.

    Accepts programs or anything with a ``.program`` attribute (beam candidates).
    """
    progs = [getattr(p, "program", p) for p in programs]
    k = len(progs)
    if k == 0:
        raise ValueError("need at least one beam program")
    counts: Counter = Counter()
    for p in progs:
        counts.update({x for x in p.primitives() if isinstance(x, Prim2D)})
    order = sorted(counts, key=lambda x: (-counts[x], str(x)))
    return [Detection(x.kind, prim_box(x), counts[x] / k, x) for x in order]


def ground_truth(program: Program) -> list[GroundTruth]:
    return [GroundTruth(x.kind, prim_box(x)) for x in program.primitives()]


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the monotone precision envelope (all-points interpolation)."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


@dataclass
class MAPResult:
    ap: dict[Shape2D, float]
    curves: dict[Shape2D, tuple[np.ndarray, np.ndarray]]

    @property
    def map(self) -> float:
        return float(np.mean(list(self.ap.values()))) if self.ap else 0.0


def evaluate_map(detections: Sequence[Sequence[Detection]], truths: Sequence[Sequence[GroundTruth]],
                 iou_thresh: float = 0.5) -> MAPResult:
    """Per-class AP over a test set; ``detections[i]`` and ``truths[i]`` belong to image i.

    Detections are ranked by descending score (stable in input order) and each
    is matched to the unmatched same-class ground truth of highest IoU, if
    that IoU reaches ``iou_thresh``. Classes without ground truth are left
    out of the mean.
    """
    if len(detections) != len(truths):
        raise ValueError("detections and ground truths must cover the same images")
    ap, curves = {}, {}
    for kind in Shape2D:
        gts = [[g for g in t if g.kind is kind] for t in truths]
        n_gt = sum(len(g) for g in gts)
        if n_gt == 0:
            continue
        dets = [(d.score, img, d) for img, ds in enumerate(detections) for d in ds if d.kind is kind]
        dets.sort(key=lambda e: -e[0])
        used = [np.zeros(len(g), dtype=bool) for g in gts]
        tp = np.zeros(len(dets))
        for j, (_, img, d) in enumerate(dets):
            best, best_iou = -1, iou_thresh
            for gi, g in enumerate(gts[img]):
                if used[img][gi]:
                    continue
                iou = box_iou(d.box, g.box)
                if iou >= best_iou:
                    best, best_iou = gi, iou
                    if iou == 1.0:
                        break
            if best >= 0:
                used[img][best] = True
                tp[j] = 1
        ctp = np.cumsum(tp)
        recall = ctp / n_gt
        precision = ctp / np.arange(1, len(dets) + 1) if len(dets) else np.zeros(0)
        ap[kind] = average_precision(recall, precision) if len(dets) else 0.0
        curves[kind] = (recall, precision)
    return MAPResult(ap, curves)
