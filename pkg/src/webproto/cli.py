"""Command-line entry points: generate-data, train, evaluate,
inspect-prototypes, ablate, sweep, export-embeddings.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import datagen, evaluation, trainer
from .config import load_config
from .model import load_checkpoint
from .prototypes import PrototypeStore


def _add_common(p: argparse.ArgumentParser, config=True) -> None:
    if config:
        p.add_argument("--config", required=True, help="YAML config path")
    p.add_argument("--seed", type=int, default=None,
                   help="overrides the config seed")
    p.add_argument("--out", required=True, help="output directory or file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="webproto")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data",
                       help="write a synthetic dataset directory")
    _add_common(p)

    p = sub.add_parser("train", help="run the four-stage curriculum")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--baseline", action="store_true",
                   help="plain cross-entropy on web labels instead")

    p = sub.add_parser("evaluate", help="score a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--curation-log", default=None)
    p.add_argument("--out", required=True, help="report file")

    p = sub.add_parser("inspect-prototypes",
                       help="dump per-class prototype report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="report file")

    p = sub.add_parser("ablate", help="paired learned-vs-cosine metric runs")
    _add_common(p)
    p.add_argument("--data", default=None, help="existing dataset directory")
    p.add_argument("--no-relation-module", action="store_true",
                   help="also run the cosine-metric variant (default on)")

    p = sub.add_parser("sweep", help="train and evaluate across K values")
    _add_common(p)
    p.add_argument("--k-list", default="0,1,2,4,8,16",
                   help="comma-separated shots-per-class values")

    p = sub.add_parser("export-embeddings",
                       help="dump embeddings for all splits")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="TSV file")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "generate-data":
        cfg = load_config(args.config, seed=args.seed)
        web, fewshot, test = datagen.generate(cfg.data)
        datagen.save_dataset(args.out, cfg.data, web, fewshot, test)
        n_clean, n_flip, n_ood = datagen.noise_summary(web)
        print(f"wrote {args.out}: {len(web)} web "
              f"({n_clean} clean, {n_flip} flipped, {n_ood} ood), "
              f"{len(fewshot)} fewshot, {len(test)} test")
        return 0

    if args.command == "train":
        cfg = load_config(args.config, seed=args.seed)
        if args.baseline:
            ckpt = trainer.train_baseline(cfg, args.data, args.out)
        else:
            ckpt = trainer.train(cfg, args.data, args.out)
            evaluation.plot_metrics(args.out)
        print(f"checkpoint: {ckpt}")
        return 0

    if args.command == "evaluate":
        report = evaluation.evaluate(args.checkpoint, args.data,
                                     curation_log=args.curation_log)
        Path(args.out).write_text(report.to_text())
        print(report.to_text(), end="")
        return 0

    if args.command == "inspect-prototypes":
        _, _, extra = load_checkpoint(args.checkpoint)
        if extra.get("protos") is None:
            print("checkpoint has no prototypes (stage < 2)", file=sys.stderr)
            return 1
        store = PrototypeStore.from_state(extra["protos"])
        Path(args.out).write_text(store.dump_report())
        print(f"wrote {args.out}")
        return 0

    if args.command == "ablate":
        cfg = load_config(args.config, seed=args.seed)
        full, ablated = evaluation.ablate_relation(cfg, args.out,
                                                   data_dir=args.data)
        print(f"learned metric: top1={full.top1:.4f} "
              f"correction_f1={full.correction_f1:.4f}")
        print(f"cosine metric:  top1={ablated.top1:.4f} "
              f"correction_f1={ablated.correction_f1:.4f}")
        return 0

    if args.command == "sweep":
        cfg = load_config(args.config, seed=args.seed)
        ks = [int(k) for k in args.k_list.split(",")]
        rows = evaluation.kshot_sweep(cfg, ks, args.out)
        for r in rows:
            print(f"K={r['K']}: top1={r['top1']:.4f} gap={r['gap']:.4f} "
                  f"gain={r['gain_over_0shot']:+.4f}")
        return 0

    if args.command == "export-embeddings":
        n = evaluation.export_embeddings(args.checkpoint, args.data, args.out)
        print(f"wrote {n} rows to {args.out}")
        return 0

    return 2


if __name__ == "__main__":
    raise SystemExit(main())
