"""Supervised and policy-gradient training for :class:`PolicyModel`."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..core import Mode, Program, execute
from ..datagen import Vocabulary
from ..metrics import RewardConfig, reward
from .model import PolicyModel

log = logging.getLogger(__name__)


def pad_targets(seqs: Sequence[Sequence[int]], stop: int) -> np.ndarray:
    n = max(len(s) for s in seqs)
    out = np.full((len(seqs), n), stop, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def _onehot_minus(probs: np.ndarray, tok: np.ndarray) -> np.ndarray:
    g = probs.copy()
    g[np.arange(len(tok)), tok] -= 1.0
    return g


def render_batch(programs: Sequence[Program]) -> np.ndarray:
    return np.stack([execute(p) for p in programs])


# ---------------------------------------------------------------- supervised

def supervised_loss(model: PolicyModel, shapes, seqs, dropout_rng=None):
    """Teacher-forced negative log-likelihood summed over programs and steps.

    ``seqs`` are vocabulary index lists ending with Stop. Returns
    ``(loss, grads, rollout)``; ``grads`` matches ``model.params``.
    """
    bn_train = model.cfg.batch_norm and dropout_rng is not None
    feat, enc_cache = model.encode_batch(shapes, dropout_rng, bn_train=bn_train)
    targets = pad_targets(seqs, model.cfg.stop_index)
    ro = model.run_decoder(feat, targets=targets, dropout_rng=dropout_rng, keep_cache=True)
    loss = -float(ro.logp.sum())
    dlogits = [_onehot_minus(p, targets[:, t]) * ro.grad_mask[:, t, None]
               for t, p in enumerate(ro.probs)]
    grads = model.zero_grads()
    dfeat = model.decoder_backward(ro, dlogits, grads)
    model.encode_backward(dfeat, enc_cache, grads)
    return loss, grads, ro


def sequence_log_prob(model: PolicyModel, shape, seq) -> float:
    """Log-probability of one token sequence, scored step by step via ``decode_step``."""
    feat = model.encode(shape)
    state = model.initial_state()
    total, prev = 0.0, None
    for tok in seq:
        probs, state = model.decode_step(state, prev, feat)
        total += float(np.log(probs[tok]))
        prev = tok
    return total


def teacher_forced_accuracy(model: PolicyModel, shapes, seqs) -> float:
    feat, _ = model.encode_batch(shapes)
    targets = pad_targets(seqs, model.cfg.stop_index)
    ro = model.run_decoder(feat, targets=targets, keep_cache=True)
    hits = np.stack([p.argmax(axis=1) for p in ro.probs], axis=1) == targets
    return float(hits[ro.alive].mean())


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGDMomentum:
    def __init__(self, lr: float = 0.01, momentum: float = 0.9):
        self.lr, self.momentum = lr, momentum
        self.buf: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> None:
        for k, g in grads.items():
            b = self.buf.get(k)
            b = g.copy() if b is None else self.momentum * b + g
            self.buf[k] = b
            params[k] -= self.lr * b


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    dropout: bool = True
    checkpoint_path: str | None = None
    checkpoint_every: int = 0  # epochs; 0 disables


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)  # mean per-token loss per epoch


def train_supervised(model: PolicyModel, programs: Sequence[Program], vocab: Vocabulary,
                     cfg: TrainConfig = TrainConfig(), shapes: np.ndarray | None = None,
                     callback: Callable[[int, float], None] | None = None) -> TrainResult:
    """Minibatch Adam on the teacher-forced likelihood. Updates ``model`` in place."""
    from .checkpoint import save_checkpoint

    rng = np.random.default_rng(cfg.seed)
    seqs = [vocab.encode(p.with_stop()) for p in programs]
    opt = Adam(cfg.lr)
    result = TrainResult()
    n = len(seqs)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, tokens = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start: start + cfg.batch_size]
            batch = shapes[idx] if shapes is not None else render_batch([programs[i] for i in idx])
            loss, grads, ro = supervised_loss(model, batch, [seqs[i] for i in idx],
                                              rng if cfg.dropout else None)
            opt.step(model.params, grads)
            total += loss
            tokens += int(ro.grad_mask.sum())
        result.losses.append(total / max(tokens, 1))
        if callback:
            callback(epoch, result.losses[-1])
        if cfg.checkpoint_path and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(cfg.checkpoint_path, model)
    if cfg.checkpoint_path:
        save_checkpoint(cfg.checkpoint_path, model)
    return result


# ----------------------------------------------------------- policy gradient

@dataclass
class BaselineState:
    """Exponential running average of batch-mean rewards.

    The first observed batch mean seeds the average (``b`` is 0 until then).
    """
    b: float = 0.0
    momentum: float = 0.9
    seen: int = 0

    def update(self, mean_reward: float) -> "BaselineState":
        if not self.seen:
            return BaselineState(mean_reward, self.momentum, 1)
        b = self.momentum * self.b + (1 - self.momentum) * mean_reward
        return BaselineState(b, self.momentum, self.seen + 1)


RewardFn = Callable[[int, list], float]


def csg_reward_fn(vocab: Vocabulary, targets, rcfg: RewardConfig = RewardConfig()) -> RewardFn:
    """Reward of a sampled token sequence against ``targets[shape_index]``."""
    def fn(i: int, seq: list) -> float:
        prog = vocab.decode(seq, rcfg.max_len)
        return reward(prog, targets[i], rcfg).r
    return fn


@dataclass
class PolicyGradient:
    grads: dict           # estimate of the gradient of expected reward (ascent direction)
    rewards: np.ndarray   # (B, S)
    sequences: list


def policy_gradient(model: PolicyModel, shapes, reward_fn: RewardFn, n_samples: int,
                    baseline: float, rng: np.random.Generator, dropout: bool = True) -> PolicyGradient:
    """Monte-Carlo gradient of expected reward with a constant baseline.

    For each shape, ``n_samples`` programs are sampled until Stop (or the
    step limit); the estimate averages ``sum_t grad log pi(a_t) * (R - b)``
    over samples and over the batch.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample per shape")
    drop_rng = rng if dropout else None
    feat, enc_cache = model.encode_batch(shapes, drop_rng)
    B = feat.shape[0]
    rep = np.repeat(feat, n_samples, axis=0)
    ro = model.run_decoder(rep, sample_rng=rng, dropout_rng=drop_rng, keep_cache=True)
    seqs = ro.sequences()
    rewards = np.array([reward_fn(k // n_samples, s) for k, s in enumerate(seqs)], dtype=float)
    # surrogate loss = -mean (R - b) log pi; backprop its gradient, then negate
    weight = (rewards - baseline) / (B * n_samples)
    dlogits = [_onehot_minus(p, ro.tokens[:, t]) * (weight * ro.grad_mask[:, t])[:, None]
               for t, p in enumerate(ro.probs)]
    grads = model.zero_grads()
    drep = model.decoder_backward(ro, dlogits, grads)
    model.encode_backward(drep.reshape(B, n_samples, -1).sum(axis=1), enc_cache, grads)
    for g in grads.values():
        np.negative(g, out=g)
    return PolicyGradient(grads, rewards.reshape(B, n_samples), seqs)


def reinforce_step(model: PolicyModel, shapes, baseline: BaselineState, n_samples: int,
                   reward_fn: RewardFn, opt: SGDMomentum, rng: np.random.Generator,
                   dropout: bool = True):
    """One policy-gradient update. Returns ``(gradient, new baseline, mean reward)``."""
    pg = policy_gradient(model, shapes, reward_fn, n_samples, baseline.b, rng, dropout)
    opt.step(model.params, {k: -g for k, g in pg.grads.items()})
    mean_r = float(pg.rewards.mean())
    return pg.grads, baseline.update(mean_r), mean_r


@dataclass
class RLConfig:
    steps: int = 200
    batch_size: int = 32
    n_samples: int = 1
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    dropout: bool = True
    reward: RewardConfig = RewardConfig()


def train_rl(model: PolicyModel, targets: np.ndarray, vocab: Vocabulary, cfg: RLConfig = RLConfig(),
             callback: Callable[[int, float], None] | None = None) -> list[float]:
    """REINFORCE fine-tuning on unlabelled target shapes; returns per-step mean reward."""
    rng = np.random.default_rng(cfg.seed)
    opt = SGDMomentum(cfg.lr, cfg.momentum)
    baseline = BaselineState()
    history = []
    n = len(targets)
    for step in range(cfg.steps):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        fn = csg_reward_fn(vocab, targets[idx], cfg.reward)
        _, baseline, mean_r = reinforce_step(model, targets[idx], baseline, cfg.n_samples, fn,
                                             opt, rng, cfg.dropout)
        history.append(mean_r)
        if callback:
            callback(step, mean_r)
    return history


def expected_reward(model: PolicyModel, targets, vocab: Vocabulary, n_samples: int = 16,
                    seed: int = 0, rcfg: RewardConfig = RewardConfig()) -> float:
    """Monte-Carlo mean reward of the (dropout-free) policy over ``targets``."""
    rng = np.random.default_rng(seed)
    feat, _ = model.encode_batch(targets)
    ro = model.run_decoder(np.repeat(feat, n_samples, axis=0), sample_rng=rng)
    fn = csg_reward_fn(vocab, targets, rcfg)
    return float(np.mean([fn(k // n_samples, s) for k, s in enumerate(ro.sequences())]))


def mode_of(model: PolicyModel) -> Mode:
    return Mode(model.cfg.mode)
