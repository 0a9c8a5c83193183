"""Command-line surface.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical
abort (including gradcheck failures), 3 integrity error. argparse's own
usage failures are remapped from its default 2 to 1.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from .checkpoint import load_checkpoint
from .data import SyntheticTaskSpec, generate
from .errors import ConfigError, IntegrityError, NumericalAbort
from .metrics import adequacy_proxy, bleu4
from .training import (TrainConfig, model_for_direction,
                       models_from_checkpoint, train)

USAGE_ERROR = 1
NUMERICAL_ERROR = 2
INTEGRITY_ERROR = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; 2 is reserved for numerical aborts
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pastfuture",
                     description="Jointly trained direction-reversed "
                                 "translation models with step-capsule "
                                 "consistency training.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic parallel corpus")
    p.add_argument("--task", required=True,
                   choices=("copy", "reverse", "mapped"))
    p.add_argument("--vocab", type=int, default=32)
    p.add_argument("--min-len", type=int, default=4)
    p.add_argument("--max-len", type=int, default=16)
    p.add_argument("--size", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window", type=int, default=1,
                   help="mapped task: local shuffle block length")
    p.add_argument("--out", required=True,
                   help="corpus prefix; writes <out>.src and <out>.tgt")

    p = sub.add_parser("train", help="train from a key=value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=("baseline", "dual", "dual-pretrain"),
                   help="override the config file's mode")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("translate", help="decode a file of sentences")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True,
                   help="one whitespace-tokenized sentence per line")
    p.add_argument("--direction", choices=("fwd", "bwd"), default="fwd")

    p = sub.add_parser("eval", help="BLEU and adequacy against references")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--direction", choices=("fwd", "bwd"), default="fwd")

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of every gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("serve", help="run the HTTP translation service")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    return parser


def _read_lines(path) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n").split() for line in fh]


def _load_direction(ckpt_path, direction):
    ck = load_checkpoint(ckpt_path)
    _, models, src_vocab, tgt_vocab = models_from_checkpoint(ck)
    model = model_for_direction(ck, models, direction)
    if direction == "fwd":
        return model, src_vocab, tgt_vocab
    return model, tgt_vocab, src_vocab


def cmd_gen_data(args) -> int:
    spec = SyntheticTaskSpec(task=args.task, vocab_size=args.vocab,
                             min_len=args.min_len, max_len=args.max_len,
                             size=args.size, seed=args.seed,
                             window=args.window)
    corpus = generate(spec)
    corpus.save(args.out)
    print(f"wrote {len(corpus)} pairs to {args.out}.src / {args.out}.tgt "
          f"(digest {corpus.digest()[:12]})")
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig.from_file(args.config)
    if args.mode:
        cfg = dataclasses.replace(cfg, mode=args.mode)
    ck, reports = train(cfg, args.out_dir)
    if reports:
        print(reports[-1].as_line())
    print(f"final checkpoint at step {ck.step}: "
          f"{args.out_dir}/checkpoint.bin")
    return 0


def cmd_translate(args) -> int:
    model, in_vocab, out_vocab = _load_direction(args.ckpt, args.direction)
    from .decoding import translate_corpus
    sentences = _read_lines(args.input)
    for hyp in translate_corpus(model, in_vocab, out_vocab, sentences):
        print(" ".join(hyp))
    return 0


def cmd_eval(args) -> int:
    model, in_vocab, out_vocab = _load_direction(args.ckpt, args.direction)
    from .decoding import translate_corpus
    sources = _read_lines(args.src)
    references = _read_lines(args.ref)
    if len(sources) != len(references):
        raise ConfigError(f"{len(sources)} source lines vs "
                          f"{len(references)} reference lines")
    hyps = translate_corpus(model, in_vocab, out_vocab, sources)
    bleu = bleu4(hyps, references)
    under, over = adequacy_proxy(hyps, references)
    print(f"bleu={bleu:.2f} under_rate={under:.4f} over_rate={over:.4f} "
          f"n={len(sources)}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite, suite_passed
    results = run_suite(seed=args.seed, tol=args.tol)
    return 0 if suite_passed(results) else NUMERICAL_ERROR


def cmd_serve(args) -> int:
    import uvicorn

    from .service.app import create_app
    app = create_app(args.ckpt)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "translate": cmd_translate,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return NUMERICAL_ERROR
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return INTEGRITY_ERROR
    except (ConfigError, FileNotFoundError, IsADirectoryError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
