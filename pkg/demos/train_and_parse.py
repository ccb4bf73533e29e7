"""
Training a parser and decoding shapes
=====================================

Generate a small synthetic dataset, fit the encoder/decoder policy to it with
teacher forcing, then parse shapes back into programs with greedy and beam
decoding, compare against nearest-neighbour retrieval and polish the result
with refinement.

The model is tiny and the dataset is 60 programs, so this is a sanity run and
takes a minute or two on one CPU. Pass a different epoch count as the first
argument to trade time for accuracy.
"""
import sys
import time

import numpy as np

from csgparse.core import execute, format_program, parse_program
from csgparse.datagen import build_vocabulary, generate_programs
from csgparse.metrics import chamfer
from csgparse.policy import PolicyConfig, PolicyModel, TrainConfig, teacher_forced_accuracy, train_supervised
from csgparse.policy.train import render_batch
from csgparse.refine import refine
from csgparse.search import SearchConfig, beam_decode, greedy_decode, nn_retrieve

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 150
vocab = build_vocabulary("2d")
texts = generate_programs("2d", 3, 60, np.random.default_rng(0))
train = [parse_program(t) for t in texts[:50]]
test = [parse_program(t) for t in texts[50:]]
shapes = render_batch(train)

# %%
# Supervised training. The loss is the mean per-token negative log likelihood.
model = PolicyModel.init(PolicyConfig(vocab_hash=vocab.hash), seed=0)
print(f"{model.n_params()} parameters")
t0 = time.time()


def report(epoch, loss):
    if epoch % 25 == 0 or epoch == epochs - 1:
        print(f"epoch {epoch:4d}  loss {loss:.4f}  {time.time() - t0:5.1f}s")


train_supervised(model, train, vocab, TrainConfig(epochs=epochs, batch_size=25), shapes=shapes, callback=report)
seqs = [vocab.encode(p.with_stop()) for p in train]
print("teacher-forced accuracy: %.3f" % teacher_forced_accuracy(model, shapes, seqs))


def text(p):
    return format_program(p.body())


# %%
# Decode a few shapes. Beam search keeps the 10 best hypotheses and returns the
# one whose rendering is closest to the target.
for where, prog in [("train", p) for p in train[:3]] + [("held out", p) for p in test[:3]]:
    target = execute(prog)
    g = greedy_decode(target, model, vocab)
    b = beam_decode(target, model, vocab, SearchConfig(k=10)).selected
    _, _, nn_prog, nn_cd = nn_retrieve(target, shapes, train)
    print(f"\ntruth  {prog}  ({where})")
    print(f"greedy {text(g.program)}  cd={g.cd if g.valid else float('nan'):.4f}")
    print(f"beam10 {text(b.program)}  cd={b.cd if b.valid else float('nan'):.4f}")
    print(f"nn     {nn_prog}  cd={nn_cd:.4f}")
    if b.valid:
        refined, trace = refine(b.program, target)
        print(f"refine {text(refined)}  cd={trace[-1]:.4f}  after {len(trace) - 1} sweeps")

# %%
# Refinement alone can already recover small misplacements.
target = execute(parse_program("c(36,28,16)", strict=False))
start = parse_program("c(32,32,16)")
refined, trace = refine(start, target)
print(f"\n{start} -> {refined}: cd {chamfer(execute(start), target):.4f} -> {trace[-1]:.4f}")
