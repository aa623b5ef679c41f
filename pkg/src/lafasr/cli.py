"""Command-line entry point: ``lafasr <subcommand> ...`` (exit 0 on success, 1 on error)."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .ablation import format_table, run_ablation, train_probe
from .checkpoint import read_container, write_container
from .config import load_config, parse_config
from .corpus import corpus_config, gen_corpus, load_dataset, load_split
from .features import ManifestRecord, apply_cmvn, compute_cmvn, load_utterance
from .gradcheck import format_report, run_gradcheck, summarize, toy_config
from .metrics import decode_dataset, evaluate
from .model import Model
from .streaming import run_stream
from .training import Adam, load_checkpoint, load_cmvn, save_checkpoint, train_loop

log = logging.getLogger("lafasr")


def _load_eval_data(ckpt: str, manifest: str):
    model, cmvn = load_checkpoint(ckpt)
    return model, load_dataset(manifest, model.cfg, cmvn)


def cmd_gen_data(args) -> int:
    paths = gen_corpus(load_config(args.config), args.out)
    for split, path in paths.items():
        print(f"{split}\t{path}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    cfg.synth = corpus_config(args.data).synth  # the data decides what the inputs look like
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = load_split(args.data, "train", cfg)
    cmvn = load_cmvn(Path(args.data) / "cmvn.qfn")
    if args.resume:
        model, _ = load_checkpoint(args.resume)
        model.cfg.train = cfg.train
        optimizer = Adam(model.params, cfg.train)
        optim_path = Path(args.resume).with_name("optim.qfn")
        if optim_path.exists():
            optimizer.load_state(read_container(optim_path))
    else:
        model = Model.create(cfg)
        optimizer = Adam(model.params, cfg.train)
    steps = max(cfg.train.max_steps - optimizer.step_count, 0)
    mode = "a" if args.resume else "w"
    with open(out / "train.log", mode, encoding="utf-8") as log_file:
        train_loop(model, train, model.cfg, steps, log_file, optimizer)
    save_checkpoint(model, out / "model.qfn", cmvn)
    write_container(out / "optim.qfn", optimizer.state())
    print(f"trained to step {optimizer.step_count}; checkpoint {out / 'model.qfn'}")
    return 0


def cmd_eval(args) -> int:
    model, data = _load_eval_data(args.ckpt, args.manifest)
    chunk = None if args.full else args.chunk
    report = evaluate(data, model, chunk=chunk, method=args.method)
    name = "non-stream" if chunk is None else f"stream C={chunk}"
    sys.stdout.write(report.to_table("-", name))
    return 0


def cmd_decode(args) -> int:
    model, data = _load_eval_data(args.ckpt, args.manifest)
    for d in decode_dataset(data, model, chunk=args.chunk, method=args.method):
        print(f"{d.utt_id}\t{' '.join(map(str, d.hypothesis.tokens))}\t{d.hypothesis.score:.6f}")
    return 0


def _source_record(src: str, accents: int) -> ManifestRecord:
    """``synth:SEED[:ACCENT]`` or a WAV path."""
    if src.startswith("synth:"):
        parts = src.split(":")
        seed = int(parts[1])
        accent = int(parts[2]) if len(parts) > 2 else seed % accents
        return ManifestRecord(f"synth-{seed}", f"synth:{seed}", [], accent)
    return ManifestRecord(Path(src).stem, src, [], 0)


def cmd_stream_decode(args) -> int:
    model, cmvn = load_checkpoint(args.ckpt)
    rec = _source_record(args.wav_or_synth, model.cfg.synth.accents)
    utt = load_utterance(rec, model.cfg.synth)
    x = utt.features.frames
    if model.cfg.features.cmvn == "utterance":
        x = apply_cmvn(x, compute_cmvn([x]))
    elif cmvn is not None:
        x = apply_cmvn(x, cmvn)

    def emit(k, tokens):
        print(f"{utt.id}\t{k}\t{' '.join(map(str, tokens))}", flush=True)

    session = run_stream(np.asarray(x, dtype=np.float32), args.chunk, model, emit)
    print(f"{utt.id}\tfinal\t{' '.join(map(str, session.tokens))}")
    return 0


def cmd_probe_layer(args) -> int:
    model, cmvn = load_checkpoint(args.ckpt)
    train_manifest = args.train_manifest or str(Path(args.manifest).with_name("train.tsv"))
    train = load_dataset(train_manifest, model.cfg, cmvn)
    test = load_dataset(args.manifest, model.cfg, cmvn)
    steps = args.steps if args.steps is not None else model.cfg.ablation.probe_steps
    acc = train_probe(model, train, test, args.layer, steps, model.cfg.train.seed)
    print(f"L{args.layer}\t{100 * acc:.2f}")
    return 0


def cmd_grad_check(args) -> int:
    cfg = toy_config()
    if args.config:
        cfg = parse_config(Path(args.config).read_text(encoding="utf-8"), cfg)
    results = run_gradcheck(cfg)
    print(format_report(results, args.tol))
    return 0 if max(summarize(results).values()) < args.tol else 1


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    cfg.synth = corpus_config(args.data).synth
    result = run_ablation(cfg, args.data, args.out, seeds=args.seeds)
    sys.stdout.write(format_table(result))
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="lafasr", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic accent corpus")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated corpus")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    for name, func in (("eval", cmd_eval), ("decode", cmd_decode)):
        p = sub.add_parser(name)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--method", choices=("greedy", "rescore"))
        if name == "eval":
            g = p.add_mutually_exclusive_group()
            g.add_argument("--chunk", type=int)
            g.add_argument("--full", action="store_true")
        else:
            p.add_argument("--chunk", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("stream-decode", help="chunk-by-chunk decoding with partial results")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--wav-or-synth", required=True, help="WAV path or synth:SEED[:ACCENT]")
    p.add_argument("--chunk", type=int, required=True)
    p.set_defaults(func=cmd_stream_decode)

    p = sub.add_parser("probe-layer", help="AID accuracy of a head trained on one frozen encoder layer")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--train-manifest")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_probe_layer)

    p = sub.add_parser("grad-check", help="64-bit finite-difference gradient suite")
    p.add_argument("--config")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("ablate", help="train and compare the ablation variants")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except Exception as e:  # noqa: BLE001 - every failure maps to exit code 1
        log.debug("command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
