"""Command-line interface.

Commands: gen-data, train, sample, eval, ablate, import. Exit codes:
0 success, 1 validation error (bad inputs/config), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig
from .dataset import gen_dataset, import_external
from .evaluate import ablate, evaluate, report_table
from .fusion import FUSION_KINDS
from .motion import write_motion_json
from .scene import read_ply
from .train import (condition_for, restore_model, sample_features, train,
                    default_vocab)


def _load_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "variant", None):
        cfg = cfg.replace(fusion_kind=args.variant)
    if getattr(args, "k", None):
        cfg = cfg.replace(k_per_condition=args.k)
    return cfg


def _common_flags(p, out_required=True):
    p.add_argument("--config", metavar="PATH", default=None,
                   help="JSON run configuration (defaults used if omitted)")
    p.add_argument("--seed", metavar="N", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--out", metavar="DIR", required=out_required,
                   help="output directory")
    p.add_argument("--workers", metavar="N", type=int, default=1,
                   help="worker count (current implementation is serial)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="stmgen",
        description="Language-guided scene-aware motion generation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    _common_flags(p)
    p.add_argument("--size", type=int, default=256,
                   help="number of records (default 256)")

    p = sub.add_parser("train", help="train the diffusion model")
    _common_flags(p)
    p.add_argument("--manifest", required=True, help="manifest.jsonl path")
    p.add_argument("--variant", metavar="NAME", choices=FUSION_KINDS,
                   help="fusion variant override")
    p.add_argument("--resume", metavar="CKPT", default=None,
                   help="continue from a checkpoint")

    p = sub.add_parser("sample", help="sample motions for one condition")
    _common_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True, help="scene PLY file")
    p.add_argument("--caption", required=True)
    p.add_argument("--k", metavar="N", type=int, default=3,
                   help="number of samples")
    p.add_argument("--variant", metavar="NAME", choices=FUSION_KINDS)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _common_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--variant", metavar="NAME", choices=FUSION_KINDS)
    p.add_argument("--k", metavar="N", type=int, default=None,
                   help="samples per condition")

    p = sub.add_parser("ablate", help="train+evaluate several fusion variants")
    _common_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--variants", nargs="+", default=list(FUSION_KINDS),
                   choices=FUSION_KINDS)

    p = sub.add_parser("import", help="import an external corpus")
    _common_flags(p)
    p.add_argument("--src", required=True, help="source directory")
    return parser


def _cmd_gen_data(args):
    cfg = _load_config(args)
    records = gen_dataset(args.out, args.size, cfg.seed,
                          n_frames=cfg.n_frames)
    print(f"wrote {len(records)} records to {args.out}")


def _cmd_train(args):
    cfg = _load_config(args)
    path = train(cfg, args.manifest, args.out, resume_from=args.resume)
    print(f"checkpoint: {path}")


def _cmd_sample(args):
    cfg = _load_config(args)
    meta, arrays = load_checkpoint(args.checkpoint)
    cfg = cfg.replace(fusion_kind=meta["fusion_kind"]) \
        if args.variant is None else cfg
    model = restore_model(cfg, meta, arrays, default_vocab())
    cloud = read_ply(args.scene)
    z_c = condition_for(model, cfg, cloud, args.caption)
    feats = sample_features(model, cfg, z_c, args.k, seed=cfg.seed,
                            mean=arrays["feat_mean"].astype(np.float64),
                            std=arrays["feat_std"].astype(np.float64))
    os.makedirs(args.out, exist_ok=True)
    for i, f in enumerate(feats):
        write_motion_json(os.path.join(args.out, f"sample_{i:03d}.json"), f,
                          num_joints=cfg.num_joints)
    print(f"wrote {len(feats)} motions to {args.out}")


def _cmd_eval(args):
    cfg = _load_config(args)
    report = evaluate(cfg, args.manifest, args.checkpoint, out_dir=args.out)
    print(report_table(report), end="")


def _cmd_ablate(args):
    cfg = _load_config(args)
    rows = ablate(cfg, args.manifest, args.variants, args.out, seed=cfg.seed)
    with open(os.path.join(args.out, "ablation.txt"),
              encoding="utf-8") as fh:
        print(fh.read(), end="")
    return rows


def _cmd_import(args):
    _, warnings = import_external(args.src, args.out)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "sample": _cmd_sample,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "import": _cmd_import,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failures exit 2
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
