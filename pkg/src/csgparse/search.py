"""Decoding strategies over a trained parser, and the nearest-neighbour baseline."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Mode, Program, execute, validate
from .datagen import Vocabulary
from .metrics import ShapeTarget, shaped_reward
from .policy.layers import log_softmax
from .policy.model import PolicyModel


class Selection(enum.Enum):
    BEST_CD = "best_cd"
    BEST_LOG_PROB = "best_log_prob"


@dataclass(frozen=True)
class SearchConfig:
    k: int = 10
    selection: Selection = Selection.BEST_CD
    gamma: float = 20.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("beam width must be at least 1")


@dataclass
class Candidate:
    program: Program
    tokens: tuple[int, ...]
    log_prob: float
    valid: bool
    rendered: np.ndarray | None = None
    cd: float | None = None       # Chamfer in 2D, 1 - IoU/100 in 3D
    reward: float | None = None


def make_candidate(tokens, log_prob: float, vocab: Vocabulary, target: ShapeTarget,
                   max_len: int, gamma: float = 20.0) -> Candidate:
    prog = vocab.decode(tokens, max_len)
    if not validate(prog).valid:
        return Candidate(prog, tuple(tokens), log_prob, False)
    rendered = execute(prog)
    cd = target.distance(rendered)
    return Candidate(prog, tuple(tokens), log_prob, True, rendered, cd, shaped_reward(cd, gamma))


def select(cands: Sequence[Candidate], selection: Selection = Selection.BEST_CD) -> Candidate:
    """Minimum-distance valid candidate (earliest wins ties), else the first candidate."""
    if selection is Selection.BEST_CD:
        valid = [c for c in cands if c.valid]
        if valid:
            return min(valid, key=lambda c: c.cd)
    return max(cands, key=lambda c: c.log_prob)


def greedy_decode(shape, model: PolicyModel, vocab: Vocabulary, gamma: float = 20.0) -> Candidate:
    feat, _ = model.encode_batch(shape)
    ro = model.run_decoder(feat)
    seq = ro.sequences()[0]
    return make_candidate(seq, float(ro.logp.sum()), vocab, ShapeTarget(shape, vocab.mode),
                          model.cfg.max_len, gamma)


@dataclass
class BeamResult:
    candidates: list[Candidate]
    selected: Candidate


def beam_decode(shape, model: PolicyModel, vocab: Vocabulary, cfg: SearchConfig = SearchConfig()) -> BeamResult:
    """Length-synchronous beam search over summed log-probabilities.

    Hypotheses that emitted Stop are frozen but stay in the pool, competing
    with live extensions by total log-probability. The search ends when the
    top ``k`` of the pool are all finished. Ties go to the earlier
    hypothesis, then the lower token index.
    """
    k = cfg.k
    stop, start = model.cfg.stop_index, model.cfg.start_index
    feat = model.encode_batch(shape)[0]
    # pool entries: (tokens, log_prob, hidden or None when finished)
    live = [((), 0.0, np.zeros(model.cfg.d_h))]
    finished: list[tuple[tuple, float]] = []
    for t in range(model.max_steps):
        if not live:
            break
        H = np.stack([h for _, _, h in live])
        prev = np.array([toks[-1] if toks else start for toks, _, _ in live])
        logits, Hn, _ = model._step(H, prev, np.repeat(feat, len(live), axis=0))
        if t == model.max_steps - 1:
            lp = np.full(logits.shape, -np.inf)
            lp[:, stop] = 0.0
        else:
            lp = log_softmax(logits)
        base = np.array([s for _, s, _ in live])
        scores = (base[:, None] + lp).ravel()
        order = np.argsort(-scores, kind="stable")[:k]
        ext = [(order_i // lp.shape[1], order_i % lp.shape[1], scores[order_i]) for order_i in order
               if np.isfinite(scores[order_i])]
        # merge frozen hypotheses with the new extensions, keep the best k
        pool = [("done", toks, s, None) for toks, s in finished]
        pool += [("ext", live[b][0] + (int(tok),), float(s), Hn[b]) for b, tok, s in ext]
        pool.sort(key=lambda e: -e[2])  # stable: frozen ones win ties
        pool = pool[:k]
        finished = [(toks, s) for kind, toks, s, _ in pool if kind == "done" or toks[-1] == stop]
        live = [(toks, s, h) for kind, toks, s, h in pool if kind == "ext" and toks[-1] != stop]
    target = ShapeTarget(shape, vocab.mode)
    cands = [make_candidate(toks, s, vocab, target, model.cfg.max_len, cfg.gamma)
             for toks, s in sorted(finished, key=lambda e: -e[1])]
    return BeamResult(cands, select(cands, cfg.selection))


def sample_decode(shape, model: PolicyModel, vocab: Vocabulary, n: int,
                  rng: np.random.Generator, gamma: float = 20.0) -> list[Candidate]:
    if n <= 0:
        return []
    feat, _ = model.encode_batch(shape)
    ro = model.run_decoder(np.repeat(feat, n, axis=0), sample_rng=rng)
    target = ShapeTarget(shape, vocab.mode)
    return [make_candidate(seq, float(lp), vocab, target, model.cfg.max_len, gamma)
            for seq, lp in zip(ro.sequences(), ro.logp.sum(axis=1))]


class EmptyTrainset(ValueError):
    pass


def nn_retrieve(target: np.ndarray, shapes: Sequence[np.ndarray], programs: Sequence[Program],
                mode: Mode | str = Mode.D2):
    """Training entry whose shape is closest to ``target``; ties go to the earliest.

    Returns ``(index, shape, program, distance)``.
    """
    if len(shapes) == 0:
        raise EmptyTrainset("nearest-neighbour retrieval needs a non-empty training set")
    t = ShapeTarget(target, mode)
    dists = [t.distance(s) for s in shapes]
    i = int(np.argmin(dists))
    return i, shapes[i], programs[i], float(dists[i])
