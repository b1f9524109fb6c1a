"""Command line entry point: ``mmc <subcommand>``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import corpus as corpus_mod
from .config import TrainConfig, load_config
from .data import synth_generate


def _config(path) -> TrainConfig:
    return load_config(path) if path else TrainConfig()


def cmd_train(args):
    from .harness import train

    cfg = _config(args.config)
    ledger = train(cfg, args.out, resume=args.resume)
    last = ledger.epochs[-1]
    print(f"trained {last['epoch']} epochs, final loss {last['loss']:.6g}; ledger in {args.out}")


def cmd_eval(args):
    from .harness import evaluate

    cfg = _config(args.config)
    report = evaluate(args.ckpt, cfg, subset=args.split, tau=args.tau)
    if args.out:
        report.write_csv(args.out)
    else:
        sys.stdout.write(report.to_csv())


def cmd_ablate(args):
    from .harness import ablate

    rows = ablate(_config(args.config), args.out)
    for row in rows:
        cd, fs = row["report"].mean
        print(f"{row['name']:<22} CD {cd:.4f} ({row['cd_improv_pct']:+.2f}%)  "
              f"F {fs:.4f} ({row['fscore_improv_pct']:+.2f}%)")


def cmd_complete(args):
    from .harness import complete

    complete(args.ckpt, args.partial, args.image, args.out, prompt=args.prompt,
             category=args.category, plot_path=args.plot)
    print(f"wrote {args.out}")


def cmd_synth(args):
    seed = int(os.environ.get("MMC_SEED", args.seed))
    synth_generate(args.root, args.n_models, args.categories.split(","), seed)
    print(f"generated {args.n_models} models x {args.categories} under {args.root}")


def cmd_corpus_build(args):
    seed = int(os.environ.get("MMC_SEED", args.seed))
    backend = corpus_mod.make_text_backend(args.backend, seed, args.transcripts, args.endpoint)
    taxonomy = corpus_mod.load_taxonomy(args.taxonomy)
    policy = corpus_mod.RetryPolicy(args.retries, args.backoff)
    corpus_mod.build_corpus(args.root, taxonomy, backend, seed, args.out, resume=args.resume,
                            concurrency=args.concurrency, policy=policy)
    print(f"wrote {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a completion model")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default="runs/train")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--config")
    e.add_argument("--split", default="eval", choices=["train", "eval", "heldout"])
    e.add_argument("--tau", type=float)
    e.add_argument("--out", help="CSV path (stdout if omitted)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the fusion ablation grid")
    a.add_argument("--config", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("complete", help="complete a single partial cloud")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--partial", required=True)
    c.add_argument("--image", required=True)
    c.add_argument("--prompt")
    c.add_argument("--category")
    c.add_argument("--out", default="completed.xyz")
    c.add_argument("--plot")
    c.set_defaults(func=cmd_complete)

    s = sub.add_parser("synth-gen", help="generate a procedural dataset")
    s.add_argument("--root", required=True)
    s.add_argument("--n-models", type=int, default=16)
    s.add_argument("--categories", default="chair")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    cp = sub.add_parser("corpus", help="text corpus tools")
    csub = cp.add_subparsers(dest="corpus_command", required=True)
    b = csub.add_parser("build", help="build the description corpus")
    b.add_argument("--root", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--backend", choices=["stub", "replay", "external"], default="stub")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--resume", action="store_true")
    b.add_argument("--taxonomy")
    b.add_argument("--transcripts")
    b.add_argument("--endpoint", default="")
    b.add_argument("--concurrency", type=int, default=1)
    b.add_argument("--retries", type=int, default=2)
    b.add_argument("--backoff", type=float, default=0.5)
    b.set_defaults(func=cmd_corpus_build)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
