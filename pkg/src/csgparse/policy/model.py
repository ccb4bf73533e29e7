"""Convolutional encoder + GRU decoder producing per-step instruction distributions.

Per decoder step the previous instruction (or START) goes through a ReLU
embedding, is concatenated with the shape feature, fed to a GRU, then two
dense layers and a softmax over the output vocabulary (START excluded).
Dropout applies to non-recurrent connections only.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ..core import CANVAS, Mode
from . import layers as L


class StepLimitExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    mode: str = "2d"
    vocab_size: int = 361
    conv_widths: tuple[int, ...] = (8, 16, 32)
    kernel: int = 3
    d_enc: int | None = 256  # None: use the flattened conv output directly
    d_emb: int = 64
    d_h: int = 256
    dropout: float = 0.2
    max_len: int = 13
    batch_norm: bool = False
    vocab_hash: str = ""
    input_size: int = CANVAS

    @property
    def ndim(self) -> int:
        return 3 if Mode(self.mode) is Mode.D3 else 2

    @property
    def flat_dim(self) -> int:
        side = self.input_size // 2 ** len(self.conv_widths)
        return self.conv_widths[-1] * side ** self.ndim

    @property
    def feat_dim(self) -> int:
        return self.d_enc if self.d_enc else self.flat_dim

    @property
    def stop_index(self) -> int:
        return self.vocab_size - 1

    @property
    def start_index(self) -> int:
        return self.vocab_size

    @classmethod
    def full_2d(cls, **kw) -> "PolicyConfig":
        return cls(**{"conv_widths": (8, 16, 32), "d_enc": None, "d_emb": 128, "d_h": 2048, **kw})

    @classmethod
    def desk_3d(cls, **kw) -> "PolicyConfig":
        return cls(**{"mode": "3d", "vocab_size": 6181, "conv_widths": (4, 8, 16, 32, 32),
                      "d_enc": None, "batch_norm": True, **kw})

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PolicyConfig":
        d = json.loads(text)
        d["conv_widths"] = tuple(d["conv_widths"])
        return cls(**d)


@dataclass
class DecoderState:
    hidden: np.ndarray
    step: int = 0


@dataclass
class Rollout:
    """Tokens chosen by one decoder run over a batch, with per-step bookkeeping.

    ``tokens[b, t]`` is the instruction emitted at step t; ``logp[b, t]`` its
    log-probability (0 for the forced Stop at the step limit); ``alive``
    marks steps up to and including each row's Stop; ``grad_mask`` is
    ``alive`` minus forced steps.
    """
    tokens: np.ndarray
    logp: np.ndarray
    alive: np.ndarray
    grad_mask: np.ndarray
    probs: list = field(default_factory=list)
    caches: list = field(default_factory=list)

    def sequences(self) -> list[list[int]]:
        out = []
        for row, alive in zip(self.tokens, self.alive):
            out.append([int(t) for t, a in zip(row, alive) if a])
        return out


def param_shapes(cfg: PolicyConfig) -> dict[str, tuple[tuple[int, ...], int]]:
    """Parameter name -> (shape, fan_in), in a fixed order."""
    shapes = {}
    c_in = 1
    kk = cfg.kernel ** cfg.ndim
    for i, c in enumerate(cfg.conv_widths):
        shapes[f"conv{i}.W"] = ((kk, c_in, c), kk * c_in)
        shapes[f"conv{i}.b"] = ((c,), kk * c_in)
        if cfg.batch_norm:
            shapes[f"bn{i}.gamma"] = ((c,), 0)
            shapes[f"bn{i}.beta"] = ((c,), 0)
        c_in = c
    if cfg.d_enc:
        shapes["proj.W"] = ((cfg.flat_dim, cfg.d_enc), cfg.flat_dim)
        shapes["proj.b"] = ((cfg.d_enc,), cfg.flat_dim)
    V, H, E = cfg.vocab_size, cfg.d_h, cfg.d_emb
    shapes["emb.W"] = ((V + 1, E), V + 1)
    shapes["emb.b"] = ((E,), V + 1)
    shapes["gru.Wx"] = ((cfg.feat_dim + E, 3 * H), H)
    shapes["gru.Wh"] = ((H, 3 * H), H)
    shapes["gru.bx"] = ((3 * H,), H)
    shapes["gru.bh"] = ((3 * H,), H)
    shapes["fc1.W"] = ((H, H), H)
    shapes["fc1.b"] = ((H,), H)
    shapes["fc2.W"] = ((H, V), H)
    shapes["fc2.b"] = ((V,), H)
    return shapes


class PolicyModel:
    """Parameters plus forward/backward passes of the parser network."""

    def __init__(self, cfg: PolicyConfig, params: dict[str, np.ndarray], bn_stats=None):
        self.cfg = cfg
        self.params = params
        self.bn_stats = bn_stats or {
            i: {"mean": np.zeros(c), "var": np.ones(c)} for i, c in enumerate(cfg.conv_widths)
        }

    @classmethod
    def init(cls, cfg: PolicyConfig, seed: int = 0) -> "PolicyModel":
        rng = np.random.default_rng(seed)
        params = {}
        for name, (shape, fan_in) in param_shapes(cfg).items():
            if name.endswith("gamma"):
                params[name] = np.ones(shape)
            elif name.endswith("beta"):
                params[name] = np.zeros(shape)
            else:
                params[name] = L.init_uniform(rng, shape, fan_in)
        return cls(cfg, params)

    @classmethod
    def zeros(cls, cfg: PolicyConfig) -> "PolicyModel":
        return cls(cfg, {n: np.zeros(s) for n, (s, _) in param_shapes(cfg).items()})

    def copy(self) -> "PolicyModel":
        return PolicyModel(self.cfg, {k: v.copy() for k, v in self.params.items()},
                           {i: dict(s) for i, s in self.bn_stats.items()})

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # ------------------------------------------------------------ encoder

    def _prepare(self, shapes) -> np.ndarray:
        x = np.asarray(shapes, dtype=np.float64)
        if x.ndim == self.cfg.ndim:
            x = x[None]
        if x.shape[1:] != (self.cfg.input_size,) * self.cfg.ndim:
            raise ValueError(f"expected {self.cfg.ndim}D grids of side {self.cfg.input_size}, got {x.shape}")
        return x[..., None]

    def encode_batch(self, shapes, rng: np.random.Generator | None = None, bn_train: bool = False):
        """Feature vectors for a batch of grids plus the cache for :meth:`encode_backward`.

        Dropout is active only when ``rng`` is given.
        """
        cfg, P = self.cfg, self.params
        x = self._prepare(shapes)
        cache = []
        for i in range(len(cfg.conv_widths)):
            y, xp = L.conv_forward(x, P[f"conv{i}.W"], P[f"conv{i}.b"], cfg.kernel)
            a = np.maximum(y, 0.0)
            m = L.dropout_mask(rng, a.shape, cfg.dropout)
            if m is not None:
                a = a * m
            x, pool = L.maxpool_forward(a)
            bn = None
            if cfg.batch_norm:
                x, bn = L.batchnorm_forward(x, P[f"bn{i}.gamma"], P[f"bn{i}.beta"],
                                            self.bn_stats[i], bn_train)
            cache.append((xp, y, m, pool, bn))
        flat = x.reshape(x.shape[0], -1)
        proj = None
        if cfg.d_enc:
            pre = flat @ P["proj.W"] + P["proj.b"]
            feat = np.maximum(pre, 0.0)
            m = L.dropout_mask(rng, feat.shape, cfg.dropout)
            if m is not None:
                feat = feat * m
            proj = (flat, pre, m)
        else:
            feat = flat
        return feat, (cache, proj, x.shape)

    def encode(self, shape) -> np.ndarray:
        """Deterministic (inference-mode) feature vector of a single grid."""
        return self.encode_batch(shape)[0][0]

    def encode_backward(self, dfeat: np.ndarray, enc_cache, grads: dict) -> None:
        cfg, P = self.cfg, self.params
        cache, proj, last_shape = enc_cache
        if proj is not None:
            flat, pre, m = proj
            d = dfeat if m is None else dfeat * m
            d = d * (pre > 0)
            grads["proj.W"] += flat.T @ d
            grads["proj.b"] += d.sum(axis=0)
            dflat = d @ P["proj.W"].T
        else:
            dflat = dfeat
        dx = dflat.reshape(last_shape)
        for i in reversed(range(len(cfg.conv_widths))):
            xp, y, m, pool, bn = cache[i]
            if bn is not None:
                dx, dg, db = L.batchnorm_backward(dx, bn)
                grads[f"bn{i}.gamma"] += dg
                grads[f"bn{i}.beta"] += db
            da = L.maxpool_backward(dx, pool)
            if m is not None:
                da = da * m
            dy = da * (y > 0)
            dx, dW, db = L.conv_backward(dy, xp, P[f"conv{i}.W"], cfg.kernel, need_dx=i > 0)
            grads[f"conv{i}.W"] += dW
            grads[f"conv{i}.b"] += db

    # ------------------------------------------------------------ decoder

    def _step(self, h, prev, feat, rng=None):
        """One decoder step for a batch. Returns (logits, new hidden, cache)."""
        cfg, P = self.cfg, self.params
        emb_pre = P["emb.W"][prev] + P["emb.b"]
        emb = np.maximum(emb_pre, 0.0)
        x = np.concatenate([feat, emb], axis=1)
        h_new, gcache = L.gru_forward(x, h, P["gru.Wx"], P["gru.Wh"], P["gru.bx"], P["gru.bh"])
        mh = L.dropout_mask(rng, h_new.shape, cfg.dropout)
        hd = h_new if mh is None else h_new * mh
        f1_pre = hd @ P["fc1.W"] + P["fc1.b"]
        f1 = np.maximum(f1_pre, 0.0)
        m1 = L.dropout_mask(rng, f1.shape, cfg.dropout)
        f1d = f1 if m1 is None else f1 * m1
        logits = f1d @ P["fc2.W"] + P["fc2.b"]
        return logits, h_new, (prev, emb_pre, gcache, mh, hd, f1_pre, m1, f1d)

    def initial_state(self, batch: int = 1) -> DecoderState:
        return DecoderState(np.zeros((batch, self.cfg.d_h)), 0)

    @property
    def max_steps(self) -> int:
        """Decoder calls per program: ``max_len`` instructions plus a terminal Stop."""
        return self.cfg.max_len + 1

    def decode_step(self, state: DecoderState, prev: int | None, feat: np.ndarray):
        """Distribution over the vocabulary for the next instruction.

        ``prev`` is the previous vocabulary index, or ``None`` for START.
        """
        if state.step >= self.max_steps:
            raise StepLimitExceeded(f"decoder already ran {state.step} steps")
        feat = np.atleast_2d(feat)
        prev_idx = np.full(feat.shape[0], self.cfg.start_index if prev is None else prev)
        logits, h, _ = self._step(state.hidden, prev_idx, feat)
        probs = L.softmax(logits)
        if feat.shape[0] == 1:
            probs = probs[0]
        return probs, DecoderState(h, state.step + 1)

    def run_decoder(self, feat: np.ndarray, *, targets: np.ndarray | None = None,
                    sample_rng: np.random.Generator | None = None,
                    dropout_rng: np.random.Generator | None = None,
                    keep_cache: bool = False) -> Rollout:
        """Unroll the decoder over a batch.

        With ``targets`` (``(B, L)`` index array padded with Stop) the run is
        teacher-forced; otherwise tokens are sampled with ``sample_rng`` or,
        if that is ``None``, chosen greedily (lowest index wins ties). Free
        runs stop each row at its first Stop and force Stop at the step limit.
        """
        cfg = self.cfg
        B = feat.shape[0]
        stop = cfg.stop_index
        n_steps = targets.shape[1] if targets is not None else self.max_steps
        if n_steps > self.max_steps:
            raise StepLimitExceeded(f"{n_steps} steps requested, limit {self.max_steps}")
        h = np.zeros((B, cfg.d_h))
        prev = np.full(B, cfg.start_index)
        done = np.zeros(B, dtype=bool)
        tokens = np.full((B, n_steps), stop)
        logp = np.zeros((B, n_steps))
        alive = np.zeros((B, n_steps), dtype=bool)
        grad_mask = np.zeros((B, n_steps), dtype=bool)
        ro = Rollout(tokens, logp, alive, grad_mask)
        for t in range(n_steps):
            logits, h, cache = self._step(h, prev, feat, dropout_rng)
            lp = L.log_softmax(logits)
            forced = targets is None and t == n_steps - 1
            if targets is not None:
                tok = targets[:, t]
            elif forced:
                tok = np.full(B, stop)
            elif sample_rng is not None:
                p = np.exp(lp)
                u = sample_rng.random((B, 1))
                tok = (np.cumsum(p, axis=1) < u * p.sum(axis=1, keepdims=True)).sum(axis=1)
                tok = np.minimum(tok, cfg.vocab_size - 1)
            else:
                tok = lp.argmax(axis=1)
            live = ~done
            tokens[:, t] = np.where(live, tok, stop)
            alive[:, t] = live
            grad_mask[:, t] = live & (not forced)
            logp[:, t] = np.where(grad_mask[:, t], lp[np.arange(B), tok], 0.0)
            if keep_cache:
                ro.probs.append(np.exp(lp))
                ro.caches.append(cache)
            done |= tokens[:, t] == stop
            prev = tokens[:, t]
            if targets is None and done.all():
                ro.tokens, ro.logp = tokens[:, : t + 1], logp[:, : t + 1]
                ro.alive, ro.grad_mask = alive[:, : t + 1], grad_mask[:, : t + 1]
                break
        return ro

    def decoder_backward(self, ro: Rollout, dlogits: list[np.ndarray], grads: dict) -> np.ndarray:
        """Backprop per-step logit gradients through time; returns d(feature)."""
        P = self.params
        E = self.cfg.d_emb
        gg = {"Wx": grads["gru.Wx"], "Wh": grads["gru.Wh"], "bx": grads["gru.bx"], "bh": grads["gru.bh"]}
        dfeat = None
        dh_next = None
        for t in reversed(range(len(ro.caches))):
            prev, emb_pre, gcache, mh, hd, f1_pre, m1, f1d = ro.caches[t]
            dl = dlogits[t]
            grads["fc2.W"] += f1d.T @ dl
            grads["fc2.b"] += dl.sum(axis=0)
            df1 = dl @ P["fc2.W"].T
            if m1 is not None:
                df1 = df1 * m1
            df1 = df1 * (f1_pre > 0)
            grads["fc1.W"] += hd.T @ df1
            grads["fc1.b"] += df1.sum(axis=0)
            dh = df1 @ P["fc1.W"].T
            if mh is not None:
                dh = dh * mh
            if dh_next is not None:
                dh = dh + dh_next
            dx, dh_next = L.gru_backward(dh, gcache, P["gru.Wx"], P["gru.Wh"], gg)
            d_feat_t = dx[:, :-E]
            dfeat = d_feat_t if dfeat is None else dfeat + d_feat_t
            demb = dx[:, -E:] * (emb_pre > 0)
            np.add.at(grads["emb.W"], prev, demb)
            grads["emb.b"] += demb.sum(axis=0)
        return dfeat

    # ------------------------------------------------------------ helpers

    def with_config(self, **kw) -> "PolicyModel":
        return PolicyModel(replace(self.cfg, **kw), self.params, self.bn_stats)

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))
