"""Finite-difference verification of the supervised-loss gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import Program
from ..datagen import OPS, Vocabulary, build_vocabulary, sample_program
from ..core import STOP
from .model import PolicyConfig, PolicyModel
from .train import render_batch, supervised_loss


@dataclass
class GradCheckReport:
    blocks: dict[str, float]     # block name -> max relative error over checked entries
    checked: dict[str, int]      # block name -> entries checked

    @property
    def max_error(self) -> float:
        return max(self.blocks.values(), default=0.0)

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_error <= tol

    def lines(self) -> list[str]:
        return [f"{k:14s} n={self.checked[k]:5d} max_rel_err={v:.3e}" for k, v in self.blocks.items()]


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(model: PolicyModel, shapes, seqs, eps: float = 1e-4, max_entries: int | None = None,
               seed: int = 0, bn_train: bool = False) -> GradCheckReport:
    """Compare backprop gradients with central differences, block by block.

    Dropout is disabled. ``max_entries`` caps the entries per block: half are
    the largest analytic entries, half uniformly random. With ``bn_train``
    batch normalisation uses batch statistics instead of running ones.
    """
    if bn_train:
        model = model.with_config(dropout=0.0)

    def loss():
        return supervised_loss(model, shapes, seqs, np.random.default_rng(0) if bn_train else None)

    _, grads, _ = loss()
    rng = np.random.default_rng(seed)
    blocks, checked = {}, {}
    for name, p in model.params.items():
        flat = p.reshape(-1)
        g = grads[name].reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            idx = np.arange(flat.size)
        else:
            top = np.argsort(-np.abs(g))[: max_entries // 2]
            rest = rng.choice(flat.size, size=max_entries - len(top), replace=False)
            idx = np.unique(np.concatenate([top, rest]))
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + eps
            lp = loss()[0]
            flat[i] = old - eps
            lm = loss()[0]
            flat[i] = old
            num[j] = (lp - lm) / (2 * eps)
        blocks[name] = float(rel_error(g[idx], num).max()) if len(idx) else 0.0
        checked[name] = len(idx)
    return GradCheckReport(blocks, checked)


def toy_vocabulary(n_prims: int = 8) -> Vocabulary:
    """A small 2D vocabulary: evenly spaced primitives, the three ops and Stop."""
    full = build_vocabulary("2d")
    step = max(full.n_prims // n_prims, 1)
    prims = [full.entries[i * step] for i in range(n_prims)]
    return Vocabulary("2d", prims + list(OPS) + [STOP])


def toy_problem(d_h: int = 8, n_programs: int = 2, seed: int = 0, zero: bool = False):
    """Tiny model plus a batch of (shape, sequence) pairs for gradient checks."""
    vocab = toy_vocabulary()
    cfg = PolicyConfig(vocab_size=len(vocab), conv_widths=(2, 2, 2), d_enc=6, d_emb=4,
                       d_h=d_h, dropout=0.0, vocab_hash=vocab.hash)
    model = PolicyModel.zeros(cfg) if zero else PolicyModel.init(cfg, seed)
    rng = np.random.default_rng(seed)
    from ..datagen import Thresholds
    progs: list[Program] = [sample_program(3, vocab, rng, Thresholds(min_on=1)) for _ in range(n_programs)]
    shapes = render_batch(progs)
    seqs = [vocab.encode(p.with_stop()) for p in progs]
    return model, shapes, seqs
