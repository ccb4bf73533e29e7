"""
Reward fine-tuning and primitive detection
==========================================

Two uses of a trained parser beyond plain decoding. First, REINFORCE
fine-tuning on unlabelled shapes: the model samples programs, each is
rendered and scored with the shaped Chamfer reward, and the policy moves
toward the better ones. Second, treating the beam as a detector: every
primitive that appears in the k beam programs becomes a detection whose score
is the fraction of programs containing it, evaluated with mean average
precision.

Usage: ``python3 demos/rl_and_detection.py CHECKPOINT`` where the checkpoint
comes from ``csg train-sup`` (see README). Without one, a short supervised
run is done first.
"""
import sys

import numpy as np

from csgparse.core import Prim2D, Program, execute, parse_program
from csgparse.datagen import build_vocabulary, generate_programs
from csgparse.detect import detections_from_beam, evaluate_map, ground_truth
from csgparse.policy import (
    PolicyConfig, PolicyModel, RLConfig, TrainConfig, expected_reward, load_checkpoint, train_rl,
    train_supervised,
)
from csgparse.policy.train import render_batch
from csgparse.search import SearchConfig, beam_decode

vocab = build_vocabulary("2d")
texts = generate_programs("2d", 3, 150, np.random.default_rng(1))

if len(sys.argv) > 1:
    model = load_checkpoint(sys.argv[1], vocab.hash)
else:
    model = PolicyModel.init(PolicyConfig(vocab_hash=vocab.hash), seed=0)
    train_supervised(model, [parse_program(t) for t in texts[:50]], vocab, TrainConfig(epochs=150, batch_size=25))

# %%
# Targets the model has not seen: held-out programs with every primitive
# nudged by up to 3 pixels, so most of them are off the vocabulary grid.
rng = np.random.default_rng(2)


def jitter(p):
    out = []
    for i in p.instructions:
        if isinstance(i, Prim2D):
            i = Prim2D(i.kind, int(np.clip(i.x + rng.integers(-3, 4), i.r, 64 - i.r)),
                       int(np.clip(i.y + rng.integers(-3, 4), i.r, 64 - i.r)), i.r)
        out.append(i)
    return Program(p.mode, tuple(out))


held = [parse_program(t) for t in texts[50:]]
targets = render_batch([jitter(p) for p in held])

before = expected_reward(model, targets, vocab, 16)
history = train_rl(model, targets, vocab, RLConfig(steps=100),
                   callback=lambda s, r: print(f"step {s:3d}  batch reward {r:.3f}") if s % 20 == 0 else None)
print(f"expected reward {before:.3f} -> {expected_reward(model, targets, vocab, 16):.3f}")

# %%
# Detection on the un-jittered held-out shapes, where boxes are known exactly.
dets, truths = [], []
for p in held[:30]:
    beam = beam_decode(execute(p), model, vocab, SearchConfig(k=10))
    dets.append(detections_from_beam(beam.candidates))
    truths.append(ground_truth(p))
res = evaluate_map(dets, truths)
for kind, ap in res.ap.items():
    print(f"AP {kind.name.lower():9s} {ap:.3f}")
print(f"MAP {res.map:.3f}")
