"""Command-line entry point: ``styleret <subcommand> [--config F] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import pipeline as pl
from .encoder import load_backbone
from .promptbank import load_bank
from .retrieval import load_index, measure_latency, query
from .synthdata import StyleTag, load_dataset
from .training import fit, gradient_check

log = logging.getLogger("styleret")


def _config(args) -> pl.RunConfig:
    cfg = pl.RunConfig.load(args.config) if args.config else pl.RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out:
        cfg.out = args.out
    cfg.validate()
    return cfg


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_generate(cfg, args):
    ds = pl.stage_generate(cfg, Path(cfg.out))
    _print({"out": str(Path(cfg.out) / pl.DATA_DIR), "manifest_hash": ds.manifest.content_hash().hex()})


def cmd_warmup(cfg, args):
    backbone, losses = pl.stage_warmup(cfg, Path(cfg.out))
    _print({"backbone_hash": backbone.content_hash(), "first_loss": losses[0] if losses else None,
            "last_loss": losses[-1] if losses else None})


def cmd_train(cfg, args):
    out = Path(cfg.out)
    if not (args.data or args.bank or args.backbone):
        bank, report = pl.stage_tune(cfg, out)
    else:
        try:
            dataset = load_dataset(args.data or out / pl.DATA_DIR)
            backbone = load_backbone(args.backbone or out / pl.BACKBONE_FILE)
            enc = cfg.prototype_encoder()
            bank_path = Path(args.bank or out / pl.BANK_FILE)
            bank = load_bank(bank_path) if bank_path.exists() else pl.init_bank(cfg, dataset, enc)
            report = fit(dataset, bank, backbone, cfg.train_config(), enc, cfg.train.tasks,
                         log_path=out / pl.TRAIN_LOG)
            pl.save_bank(bank, bank_path)
        except (ValueError, RuntimeError, OSError) as exc:
            raise pl.StageError("tune", str(exc)) from exc
    _print({"bank_hash": bank.content_hash(), "backbone_unchanged": report.backbone_unchanged,
            "first_joint": report.joint[0] if report.joint else None,
            "last_joint": report.joint[-1] if report.joint else None})


def cmd_build_index(cfg, args):
    index = pl.stage_index(cfg, Path(cfg.out))
    _print({"records": len(index), "index_hash": index.content_hash()})


def _models(cfg, stage):
    out = Path(cfg.out)
    try:
        return (load_dataset(out / pl.DATA_DIR), load_backbone(out / pl.BACKBONE_FILE),
                load_bank(out / pl.BANK_FILE), load_index(out / pl.INDEX_FILE))
    except (ValueError, OSError) as exc:
        raise pl.StageError(stage, str(exc)) from exc


def cmd_query(cfg, args):
    dataset, backbone, bank, index = _models(cfg, "query")
    try:
        sample = dataset.sample(args.class_id, args.instance, StyleTag.parse(args.style))
        res = query(index, sample, backbone, bank, cfg.prototype_encoder(), args.k)
    except (ValueError, IndexError) as exc:
        raise pl.StageError("query", str(exc)) from exc
    _print({"query": res.query, "ids": res.ids, "scores": res.scores})


def cmd_evaluate(cfg, args):
    if args.task:
        cfg.eval.tasks = [t.strip() for t in args.task.split(",")]
    if args.k:
        cfg.eval.ks = [int(k) for k in args.k.split(",")]
    cfg.validate()
    res = pl.stage_evaluate(cfg, Path(cfg.out))
    _print({"tasks": res["tasks"], "fusion": res["fusion"], "baseline": res["baseline"]})


def cmd_ablate(cfg, args):
    values = None
    if args.values:
        cast = str if args.axis == "insertion_mode" else int
        values = [cast(v) for v in args.values.split(",")]
    try:
        table = pl.ablate(cfg, args.axis, values)
    except pl.StageError:
        raise
    except (ValueError, RuntimeError, OSError) as exc:
        raise pl.StageError("ablate", str(exc)) from exc
    print(pl.format_table(table))


def cmd_bench_latency(cfg, args):
    dataset, backbone, bank, index = _models(cfg, "latency")
    try:
        style = StyleTag.parse(args.style)
        stats = measure_latency(index, dataset.samples(style, cfg.eval.split), backbone, bank,
                                cfg.prototype_encoder(), repetitions=args.repetitions)
    except ValueError as exc:
        raise pl.StageError("latency", str(exc)) from exc
    (Path(cfg.out) / "latency.json").write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
    _print({k: {m: v for m, v in stats[k].items() if m != "samples_ms"} for k in ("embed", "rank")})


def cmd_grad_check(cfg, args):
    report = gradient_check(seed=cfg.seed)
    _print({"max_rel_error": report.max_rel_error, "per_tensor": report.per_tensor,
            "num_scalars": report.num_scalars, "seconds": report.seconds})
    if report.max_rel_error >= args.tol:
        raise pl.StageError("grad-check", f"max relative error {report.max_rel_error:.3g} >= {args.tol}")


def cmd_run(cfg, args):
    res = pl.run_pipeline(cfg)
    _print({"tasks": res["tasks"], "fusion": res["fusion"],
            "backbone_unchanged": res["backbone_check"]["unchanged"], "timings": res["timings"]})


def build_parser() -> argparse.ArgumentParser:
    def globals_(default):
        p = argparse.ArgumentParser(add_help=False, argument_default=default)
        p.add_argument("--config", help="run config (JSON)")
        p.add_argument("--seed", type=int, help="global seed propagated to every module")
        p.add_argument("--out", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true", default=default or False)
        return p

    # flags may appear before or after the subcommand; the copy on each
    # subparser must not reset values given before it
    common = globals_(argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="styleret", description=__doc__, parents=[globals_(None)])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, parents=[common])
        p.set_defaults(func=func)
        return p

    add("generate-data", cmd_generate, "write the synthetic corpora")
    add("warmup", cmd_warmup, "train and freeze the backbone on natural pairs")
    p = add("train", cmd_train, "prompt-tune the bank against the frozen backbone")
    p.add_argument("--data")
    p.add_argument("--bank")
    p.add_argument("--backbone")
    add("build-index", cmd_build_index, "embed targets into the shared index")
    p = add("query", cmd_query, "rank the index for one stored sample")
    p.add_argument("--style", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--class-id", type=int, default=0)
    p.add_argument("--instance", type=int, default=0)
    p = add("evaluate", cmd_evaluate, "R@k per task; writes results.json")
    p.add_argument("--task", help="comma list, e.g. sketch2image,text2image")
    p.add_argument("--k", help="comma list, e.g. 1,5")
    p = add("ablate", cmd_ablate, "sweep one bank setting")
    p.add_argument("--axis", required=True, choices=sorted(pl.AXES))
    p.add_argument("--values")
    p = add("bench-latency", cmd_bench_latency, "time the embed and rank stages")
    p.add_argument("--style", default="sketch")
    p.add_argument("--repetitions", type=int, default=5)
    p = add("grad-check", cmd_grad_check, "autograd vs finite differences on a small model")
    p.add_argument("--tol", type=float, default=1e-4)
    add("run", cmd_run, "generate, warmup, tune, index and evaluate")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = _config(args)
        args.func(cfg, args)
    except pl.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return pl.EXIT_CONFIG
    except pl.StageError as exc:
        print(f"stage {exc.stage} failed: {exc}", file=sys.stderr)
        return exc.exit_code
    return pl.EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
