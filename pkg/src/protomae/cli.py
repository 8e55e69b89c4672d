"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numeric error (including a
failed verification suite).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import geometry, pipeline, shapes, verification
from .config import RunConfig, preset
from .errors import ConfigError, NumericError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protomae",
        description="Masked point-cloud autoencoder with prototype-based "
                    "component grouping")
    parser.add_argument("--config", metavar="PATH",
                        help="flat key = value config file")
    parser.add_argument("--preset", metavar="NAME",
                        help="named preset (paper-default, test-small, toy)")
    parser.add_argument("--seed", type=int, metavar="U64",
                        help="override the run seed")
    parser.add_argument("--out", metavar="DIR", default="runs",
                        help="output directory (default: runs)")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="per-epoch progress on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("pretrain", help="self-supervised pre-training")

    p = sub.add_parser("finetune", help="classification fine-tuning")
    p.add_argument("--checkpoint", required=True, metavar="PATH",
                   help="pre-training checkpoint to start from")
    p.add_argument("--csep", action="store_true",
                   help="prototype-prompted head instead of the plain one")

    p = sub.add_parser("ablate", help="masking-strategy comparison")
    p.add_argument("--strategies", default="randm,randbm,csem",
                   help="comma list from {randm, randbm, csem}")

    p = sub.add_parser("export-groups",
                       help="write per-point component ids for one cloud")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--cloud", metavar="PATH",
                   help="input cloud file (x y z per line); omit to generate")
    p.add_argument("--kind", default="plane",
                   help="generated shape kind when --cloud is omitted")
    p.add_argument("--cloud-seed", type=int, default=pipeline.HELD_OUT_SEED_BASE,
                   help="generation seed when --cloud is omitted")

    sub.add_parser("gradcheck", help="finite-difference gradient suite")

    p = sub.add_parser("oracle-suite", help="brute-force geometry oracles")
    p.add_argument("--instances", type=int, default=200)
    return parser


def _load_config(args: argparse.Namespace) -> RunConfig:
    if args.config and args.preset:
        raise ConfigError("--config and --preset are mutually exclusive")
    if args.config:
        cfg = RunConfig.from_file(args.config)
    else:
        cfg = preset(args.preset or "test-small")
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg.validate()


def _cmd_pretrain(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    out = Path(args.out) / "pretrain"
    res = pipeline.pretrain(cfg, out)
    final = res.metrics[-1]
    print(f"pretrain done: {cfg.epochs} epochs in {res.wall_seconds:.1f}s, "
          f"final total {final['total']:.6f} "
          f"(l_3d {final['l_3d']:.6f} l_proto {final['l_proto']:.6f} "
          f"l_cont {final['l_cont']:.6f})")
    print(f"checkpoint: {res.checkpoint_path}")
    return 0


def _cmd_finetune(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    out = Path(args.out) / "finetune"
    res = pipeline.finetune(cfg, args.checkpoint, csep=args.csep, out_dir=out)
    print(f"finetune done after {len(res.metrics)} epochs: "
          f"train {res.train_accuracy:.3f} val {res.val_accuracy:.3f}")
    print(f"checkpoint: {res.checkpoint_path}")
    return 0


def _cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    out = Path(args.out) / "ablate"
    rows = pipeline.ablate(cfg, strategies, out)
    for row in rows:
        print(f"{row['strategy']}: total {row['total']:.6f} "
              f"purity {row['component_purity']:.3f} "
              f"accuracy {row['downstream_accuracy']:.3f}")
    print(f"table: {out / 'ablation.csv'}")
    return 0


def _cmd_export_groups(args: argparse.Namespace) -> int:
    from . import checkpoint as ckpt_mod

    ck = ckpt_mod.load(args.checkpoint)
    cfg = ck.config() if not (args.config or args.preset) else _load_config(args)
    store = pipeline.init_model(cfg, decoder=True, pcsm_branch=True)
    ckpt_mod.load_into(store, ck, strict=False)
    if args.cloud:
        points = geometry.load_cloud(args.cloud).points
    else:
        points = shapes.make_shape(args.kind, cfg.n_points,
                                   seed=args.cloud_seed).points
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "groups.txt"
    labels = pipeline.export_groups(store, points, cfg, out_path)
    import numpy as np
    print(f"wrote {labels.size} points, {np.unique(labels).size} distinct "
          f"components: {out_path}")
    return 0


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    cfg = preset("toy") if not (args.config or args.preset) else _load_config(args)
    reports = verification.gradient_suite(cfg)
    failed = False
    for r in reports:
        status = "ok" if r.ok else "FAIL"
        print(f"{status} {r.loss}: {r.tensors} tensors, {r.probes} probes "
              f"({r.skipped} at kinks skipped), max rel err {r.max_rel_err:.3e}"
              + (f" at {r.worst_parameter}" if r.worst_parameter else ""))
        failed = failed or not r.ok
    if failed:
        raise NumericError("gradient suite failed")
    return 0


def _cmd_oracle_suite(args: argparse.Namespace) -> int:
    reports = verification.oracle_suite(instances=args.instances)
    failed = False
    for r in reports:
        status = "ok" if r.ok else "FAIL"
        print(f"{status} {r.op}: {r.instances} instances, "
              f"{r.mismatches} mismatches, max deviation {r.max_deviation:.3e}")
        failed = failed or not r.ok
    if failed:
        raise NumericError("oracle suite failed")
    return 0


_COMMANDS = {
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "ablate": _cmd_ablate,
    "export-groups": _cmd_export_groups,
    "gradcheck": _cmd_gradcheck,
    "oracle-suite": _cmd_oracle_suite,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(message)s", stream=sys.stderr)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
