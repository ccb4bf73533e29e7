"""Command-line entry point ``csg``.

Every subcommand accepts ``--config FILE`` holding ``key=value`` lines; any
flag may be set there and explicit flags win. Exit status is 0 on success,
1 on a usage error and 2 when the command itself fails.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .core import Mode, Prim2D, Prim3D, parse_program, format_program, execute
from .datagen import DatasetSpec, build_vocabulary, generate_dataset, load_split
from .io import read_grid, write_atomic, write_grid

log = logging.getLogger("csgparse")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def read_config(path: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().lstrip("-").replace("-", "_")] = v.strip()
    return out


def _lengths(text: str) -> dict[int, int]:
    try:
        pairs = [item.split(":") for item in text.split(",") if item]
        return {int(k): int(v) for k, v in pairs}
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LEN:COUNT[,LEN:COUNT...], got {text!r}") from None


def _emit(records, path: str | None) -> None:
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    if path:
        write_atomic(path, text)
    else:
        sys.stdout.write(text)


def _load_model(path: str):
    from .policy import load_checkpoint
    from .policy.model import PolicyConfig
    with np.load(path, allow_pickle=False) as z:
        mode = PolicyConfig.from_json(str(z["config"])).mode
    vocab = build_vocabulary(mode)
    return load_checkpoint(path, vocab.hash), vocab


def _dataset_shapes(args):
    progs = load_split(args.data, args.split)
    if args.limit:
        progs = progs[: args.limit]
    return progs, [execute(p) for p in progs]


def _parse_one(args, text: str):
    return parse_program(text, args.mode, strict=False, max_len=args.max_len)


# ---------------------------------------------------------------- commands

def cmd_exec(args):
    if (args.program is None) == (args.program_file is None):
        raise UsageError("exec: give exactly one of --program or --program-file")
    text = args.program if args.program is not None else Path(args.program_file).read_text().strip()
    write_grid(args.out, execute(_parse_one(args, text)))


def cmd_render_prim(args):
    p = _parse_one(args, args.prim)
    if len(p.instructions) != 1 or not isinstance(p.instructions[0], (Prim2D, Prim3D)):
        raise UsageError("render-prim: --prim must be a single primitive")
    write_grid(args.out, execute(p))


def cmd_gen(args):
    spec = DatasetSpec(Mode(args.mode), args.lengths, args.seed)
    manifest = generate_dataset(spec, args.out)
    print(json.dumps({"files": manifest["files"], "vocab_sha256": manifest["vocabulary"]["sha256"]}))


def cmd_vocab(args):
    vocab = build_vocabulary(args.mode)
    if args.out:
        write_atomic(args.out, vocab.text)
    print(json.dumps(vocab.manifest(), sort_keys=True))


def cmd_train_sup(args):
    from .policy import PolicyConfig, PolicyModel, TrainConfig, train_supervised
    vocab = build_vocabulary(args.mode)
    progs = load_split(args.data, "train", args.mode)
    if args.limit:
        progs = progs[: args.limit]
    if args.init:
        model, vocab = _load_model(args.init)
    else:
        kw = dict(vocab_size=len(vocab), vocab_hash=vocab.hash, max_len=args.max_len, d_h=args.d_h)
        cfg = PolicyConfig(**kw) if args.mode == "2d" else PolicyConfig.desk_3d(**kw)
        model = PolicyModel.init(cfg, args.seed)
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                       checkpoint_path=args.ckpt, checkpoint_every=args.checkpoint_every)

    def report(epoch, loss):
        print(json.dumps({"epoch": epoch, "loss": loss}), flush=True)

    train_supervised(model, progs, vocab, tcfg, callback=report)


def cmd_train_rl(args):
    from .metrics import RewardConfig
    from .policy import RLConfig, save_checkpoint, train_rl
    model, vocab = _load_model(args.ckpt)
    if args.data:
        _, shapes = _dataset_shapes(args)
    else:
        shapes = [read_grid(p) for p in args.inputs]
    if not shapes:
        raise UsageError("train-rl: no target shapes (use --data or --in)")
    cfg = RLConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                   reward=RewardConfig(args.gamma, model.cfg.max_len))

    def report(step, r):
        print(json.dumps({"step": step, "mean_reward": r}), flush=True)

    train_rl(model, np.stack(shapes), vocab, cfg, callback=report)
    save_checkpoint(args.out, model)


def _infer(shape, model, vocab, args):
    from .refine import RefineConfig, refine
    from .search import SearchConfig, beam_decode, greedy_decode
    if args.beam and args.beam > 1:
        cand = beam_decode(shape, model, vocab, SearchConfig(k=args.beam, gamma=args.gamma)).selected
    else:
        cand = greedy_decode(shape, model, vocab, args.gamma)
    if not cand.valid:
        return cand.program, None
    if args.refine:
        prog, trace = refine(cand.program, shape, RefineConfig(max_sweeps=args.refine))
        return prog, trace[-1]
    return cand.program, cand.cd


def _record(i, mode: Mode, prog, dist, t0):
    rec = {"id": i, "program": format_program(prog.body()), "time": round(time.perf_counter() - t0, 6)}
    if mode is Mode.D3:
        rec["iou"] = None if dist is None else 100.0 * (1.0 - dist)
    else:
        rec["cd"] = dist
    return rec


def cmd_infer(args):
    model, vocab = _load_model(args.ckpt)
    records = []
    for path in args.inputs:
        t0 = time.perf_counter()
        prog, dist = _infer(read_grid(path), model, vocab, args)
        records.append(_record(path, vocab.mode, prog, dist, t0))
    _emit(records, args.report)


def _evaluate(args, mode: Mode):
    model, vocab = _load_model(args.ckpt)
    if vocab.mode is not mode:
        raise UsageError(f"checkpoint is {vocab.mode.value}; this command evaluates {mode.value}")
    _, shapes = _dataset_shapes(args)
    records = []
    for i, shape in enumerate(shapes):
        t0 = time.perf_counter()
        prog, dist = _infer(shape, model, vocab, args)
        records.append(_record(i, mode, prog, dist, t0))
    _emit(records, args.report)
    key = "cd" if mode is Mode.D2 else "iou"
    vals = [r[key] if r[key] is not None else (1.0 if mode is Mode.D2 else 0.0) for r in records]
    print(json.dumps({"n": len(vals), f"mean_{key}": float(np.mean(vals)) if vals else None}),
          file=sys.stderr)


def cmd_eval_cd(args):
    _evaluate(args, Mode.D2)


def cmd_eval_iou(args):
    _evaluate(args, Mode.D3)


def cmd_nn(args):
    from .search import nn_retrieve
    train = load_split(args.data, "train", args.mode)
    shapes = [execute(p) for p in train]
    queries = [(p, read_grid(p)) for p in args.inputs] if args.inputs else \
        list(enumerate(_dataset_shapes(args)[1]))
    records = []
    for qid, q in queries:
        t0 = time.perf_counter()
        _, _, prog, dist = nn_retrieve(q, shapes, train, args.mode)
        records.append(_record(qid, Mode(args.mode), prog, dist, t0))
    _emit(records, args.report)


def cmd_detect(args):
    from .detect import detections_from_beam
    from .search import SearchConfig, beam_decode
    model, vocab = _load_model(args.ckpt)
    records = []
    for path in args.inputs:
        res = beam_decode(read_grid(path), model, vocab, SearchConfig(k=args.beam))
        for d in detections_from_beam(res.candidates):
            records.append({"id": path, "class": d.kind.value, "score": d.score,
                            "box": [d.box.x0, d.box.y0, d.box.x1, d.box.y1], "prim": str(d.prim)})
    _emit(records, args.report)


def cmd_eval_map(args):
    from .detect import detections_from_beam, evaluate_map, ground_truth
    from .search import SearchConfig, beam_decode
    model, vocab = _load_model(args.ckpt)
    progs, shapes = _dataset_shapes(args)
    dets = [detections_from_beam(beam_decode(s, model, vocab, SearchConfig(k=args.beam)).candidates)
            for s in shapes]
    res = evaluate_map(dets, [ground_truth(p) for p in progs], args.iou_thresh)
    print(json.dumps({"ap": {k.value: v for k, v in res.ap.items()}, "map": res.map}, sort_keys=True))


def cmd_gradcheck(args):
    from .policy import grad_check, toy_problem
    model, shapes, seqs = toy_problem(d_h=args.d_h, seed=args.seed)
    rep = grad_check(model, shapes, seqs, max_entries=args.max_entries, seed=args.seed)
    for line in rep.lines():
        print(line)
    print(json.dumps({"max_rel_error": rep.max_error, "passed": rep.passed(args.tol)}))
    if not rep.passed(args.tol):
        raise RuntimeError(f"gradient check failed: max relative error {rep.max_error:.3g} > {args.tol}")


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value file; explicit flags override it")
    common.add_argument("--mode", choices=["2d", "3d"], default="2d")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--gamma", type=float, default=20.0)
    common.add_argument("--max-len", type=int, default=13)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="csg", description="Parse shapes into CSG programs.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help):
        p = sub.add_parser(name, parents=[common], help=help)
        p.set_defaults(func=fn)
        return p

    def decoding(p):
        p.add_argument("--beam", type=int, default=1)
        p.add_argument("--refine", type=int, default=0, help="refinement sweeps")
        p.add_argument("--report", help="JSON-lines output (default stdout)")

    def dataset(p, required=True):
        p.add_argument("--data", required=required)
        p.add_argument("--split", default="test")
        p.add_argument("--limit", type=int, default=0)

    p = add("exec", cmd_exec, "render a program")
    p.add_argument("--program")
    p.add_argument("--program-file")
    p.add_argument("--out", required=True)

    p = add("render-prim", cmd_render_prim, "render one primitive")
    p.add_argument("--prim", required=True)
    p.add_argument("--out", required=True)

    p = add("gen", cmd_gen, "generate a synthetic program dataset")
    p.add_argument("--lengths", type=_lengths, default={3: 100})
    p.add_argument("--out", required=True)

    p = add("vocab", cmd_vocab, "print the vocabulary manifest")
    p.add_argument("--out", help="also write the vocabulary, one instruction per line")

    p = add("train-sup", cmd_train_sup, "supervised training")
    p.add_argument("--data", required=True)
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--ckpt", required=True, help="output checkpoint")
    p.add_argument("--init", help="start from this checkpoint")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--d-h", type=int, default=256)
    p.add_argument("--checkpoint-every", type=int, default=0)

    p = add("train-rl", cmd_train_rl, "policy-gradient fine-tuning")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    dataset(p, required=False)
    p.add_argument("--in", dest="inputs", nargs="*", default=[])
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.01)

    p = add("infer", cmd_infer, "parse grid files")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    decoding(p)

    for name, fn in (("eval-cd", cmd_eval_cd), ("eval-iou", cmd_eval_iou)):
        p = add(name, fn, "evaluate a checkpoint on a dataset split")
        p.add_argument("--ckpt", required=True)
        dataset(p)
        decoding(p)

    p = add("nn", cmd_nn, "nearest-neighbour retrieval baseline")
    dataset(p)
    p.add_argument("--in", dest="inputs", nargs="*", default=[])
    p.add_argument("--report")

    p = add("detect", cmd_detect, "primitive detections from beam programs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--beam", type=int, default=10)
    p.add_argument("--report")

    p = add("eval-map", cmd_eval_map, "detection mean average precision")
    p.add_argument("--ckpt", required=True)
    dataset(p)
    p.add_argument("--beam", type=int, default=10)
    p.add_argument("--iou-thresh", type=float, default=0.5)

    p = add("gradcheck", cmd_gradcheck, "finite-difference check on a toy model")
    p.add_argument("--d-h", type=int, default=8)
    p.add_argument("--max-entries", type=int, default=None)
    p.add_argument("--tol", type=float, default=1e-3)
    return parser


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        try:
            values = read_config(known.config)
        except OSError as e:
            raise UsageError(f"cannot read config: {e}") from None
        # find the subcommand parser so string defaults get type-converted
        cmd = next((a for a in argv if a in parser._subparsers._group_actions[0].choices), None)
        if cmd is not None:
            sp = parser._subparsers._group_actions[0].choices[cmd]
            dests = {a.dest for a in sp._actions}
            unknown = sorted(set(values) - dests)
            if unknown:
                raise UsageError(f"unknown config keys: {', '.join(unknown)}")
            sp.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        if getattr(args, "beam", 1) < 1:
            raise UsageError("--beam must be >= 1")
    except UsageError as e:
        print(str(e).rstrip(), file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as e:
        print(f"csg {args.command}: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - surface as a runtime failure
        log.debug("command failed", exc_info=True)
        print(f"csg {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
