"""Command-line entry points: train, generate, eval, and serve."""

from __future__ import annotations

import argparse
import json
import os
import secrets
import sys

from .autodiff import SeededSampler
from .data import (
    SPECIAL_TOKENS,
    build_vocab,
    encode_examples,
    load_corpus,
    tokenize,
)
from .decoder import generate_n
from .errors import ContractError, PersonaCvaeError
from .metrics import evaluate, render_table
from .params import TrainConfig
from .service import MAX_SEED, create_app
from .trainer import load_model, train


def build_parser():
    parser = argparse.ArgumentParser(
        prog="persona-cvae",
        description="Train and serve a persona-grounded dialogue generator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model on a dialogue corpus")
    p.add_argument("--config", required=True, help="JSON training configuration")
    p.add_argument("--data", required=True, help="corpus file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", choices=["jsonl", "convai2-text"],
                   help="corpus format (default: by file extension)")

    p = sub.add_parser("generate", help="sample responses for one context")
    p.add_argument("--ckpt", help="checkpoint path (or set PERSONA_CVAE_CKPT)")
    p.add_argument("--input", action="append", required=True,
                   help="context utterance, oldest first; repeat for more turns")
    p.add_argument("--personas", required=True,
                   help="file with one persona sentence per line")
    p.add_argument("--n", type=int, default=1, help="number of responses")
    p.add_argument("--seed", type=int, help="sampling seed (echoed to stdout)")
    p.add_argument("--no-sds", action="store_true",
                   help="disable the persona word mixture")
    p.add_argument("--no-fds", action="store_true",
                   help="disable forced persona decoding")

    p = sub.add_parser("eval", help="score generated responses on a corpus")
    p.add_argument("--ckpt", help="checkpoint path (or set PERSONA_CVAE_CKPT)")
    p.add_argument("--data", required=True, help="corpus file")
    p.add_argument("--n", type=int, choices=[1, 5, 10], default=5,
                   help="responses sampled per turn")
    p.add_argument("--report", required=True, help="where to write the JSON report")
    p.add_argument("--format", choices=["jsonl", "convai2-text"],
                   help="corpus format (default: by file extension)")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")

    p = sub.add_parser("serve", help="run the HTTP inference service")
    p.add_argument("--ckpt", help="checkpoint path (or set PERSONA_CVAE_CKPT)")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")

    return parser


def _corpus_format(path, explicit):
    if explicit:
        return explicit
    return "jsonl" if path.endswith(".jsonl") else "convai2-text"


def _resolve_ckpt(args, parser):
    ckpt = args.ckpt or os.environ.get("PERSONA_CVAE_CKPT")
    if not ckpt:
        parser.error("--ckpt is required (or set PERSONA_CVAE_CKPT)")
    return ckpt


def _check_seed(args, parser):
    if getattr(args, "seed", None) is not None and args.seed < 0:
        parser.error("--seed must be nonnegative")


def _cmd_train(args):
    with open(args.config, encoding="utf-8") as f:
        config = TrainConfig.from_dict(json.load(f))
    raw = load_corpus(args.data, fmt=_corpus_format(args.data, args.format))
    vocab = build_vocab(raw, cap=config.vocab_cap)
    examples = encode_examples(raw, vocab, threshold=config.label_threshold)
    print(f"training on {len(examples)} examples, vocabulary size {vocab.size}")

    def progress(c):
        print(f"step {c['step']:>6}  total {c['total']:.4f}  "
              f"recon/token {c['recon_per_token']:.4f}  kl {c['kl']:.4f}")

    _, history = train(
        config, examples, vocab, out_dir=args.out,
        log_path=os.path.join(args.out, "train_log.csv"), progress=progress,
    )
    last = history[-1]
    print(f"finished at step {last['step']}: total {last['total']:.4f}, "
          f"recon/token {last['recon_per_token']:.4f}")
    print(f"checkpoint written to {os.path.join(args.out, 'model.ckpt')}")
    return 0


def _cmd_generate(args, parser):
    ckpt = _resolve_ckpt(args, parser)
    if args.n < 1:
        parser.error("--n must be at least 1")
    params, vocab = load_model(ckpt)
    with open(args.personas, encoding="utf-8") as f:
        persona_lines = [line.strip() for line in f if line.strip()]
    personas = [vocab.encode(tokenize(line)) for line in persona_lines]
    context = [vocab.encode(tokenize(u)) for u in args.input]
    if any(not u for u in context):
        raise ContractError("context utterances must contain at least one token")
    seed = args.seed if args.seed is not None else secrets.randbelow(MAX_SEED)
    result = generate_n(
        context, personas, args.n, params, SeededSampler(seed),
        max_len=params.config.max_len,
        sds_on=not args.no_sds, fds_on=not args.no_fds,
    )
    print(f"seed: {seed}")
    for i, (ids, sel, used) in enumerate(
        zip(result.responses, result.selected_persona, result.fds_used), start=1
    ):
        words = vocab.decode(ids)
        text = " ".join(w for w in words if w not in SPECIAL_TOKENS)
        sel_txt = "-" if sel is None else str(sel)
        flags = " fds" if used else ""
        print(f"{i}\t{text}\tpersona={sel_txt}{flags}")
    return 0


def _cmd_eval(args, parser):
    ckpt = _resolve_ckpt(args, parser)
    _check_seed(args, parser)
    params, vocab = load_model(ckpt)
    raw = load_corpus(args.data, fmt=_corpus_format(args.data, args.format))
    examples = encode_examples(raw, vocab, threshold=params.config.label_threshold)
    root = SeededSampler(args.seed)
    responses_per_turn, personas_per_turn = [], []
    for t, ex in enumerate(examples):
        res = generate_n(ex.context, ex.personas, args.n, params, root.child(t),
                         max_len=params.config.max_len)
        responses_per_turn.append([
            [w for w in vocab.decode(ids) if w not in SPECIAL_TOKENS]
            for ids in res.responses
        ])
        personas_per_turn.append([vocab.decode(p) for p in ex.personas])
    report = evaluate(responses_per_turn, personas_per_turn, vocab.idf_table(),
                      n=args.n)
    with open(args.report, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2)
        f.write("\n")
    print(render_table(report))
    return 0


def _cmd_serve(args, parser):
    ckpt = _resolve_ckpt(args, parser)
    params, vocab = load_model(ckpt)
    import uvicorn

    uvicorn.run(create_app(params, vocab), host=args.host, port=args.port)
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _check_seed(args, parser)
    try:
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "generate":
            return _cmd_generate(args, parser)
        if args.command == "eval":
            return _cmd_eval(args, parser)
        return _cmd_serve(args, parser)
    except (PersonaCvaeError, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
