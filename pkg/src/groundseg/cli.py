"""Command-line interface: gen-data, train, eval, grad-check, inspect."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import data, gradcheck, train as train_mod
from .config import RunConfig


def _cmd_gen_data(args) -> int:
    records = data.make_dataset(args.slides, args.patches_per_slide, args.seed)
    splits = data.split_dataset(records, seed=args.seed)
    manifest = data.persist_dataset(splits, args.out)
    print(f"wrote {len(records)} patches "
          f"({len(splits.train)}/{len(splits.val)}/{len(splits.test)} train/val/test) "
          f"to {manifest}")
    return 0


def _cmd_train(args) -> int:
    config = RunConfig.from_json(Path(args.config).read_text())
    out = Path(args.out)
    try:
        bundle, log = train_mod.train(config)
    except train_mod.TrainingDiverged as e:
        train_mod.save_checkpoint(e.bundle, out)
        e.train_log.to_jsonl(out / "train_log.jsonl")
        print(f"training diverged at step {e.step}; last good checkpoint saved to {out}",
              file=sys.stderr)
        return 1
    train_mod.save_checkpoint(bundle, out)
    log.to_jsonl(out / "train_log.jsonl")
    final = log.steps[-1]["total"] if log.steps else float("nan")
    print(f"trained {bundle.step} steps; final total loss {final:.4f}; checkpoint at {out}")
    return 0


def _cmd_eval(args) -> int:
    bundle = train_mod.load_checkpoint(args.ckpt)
    data_dir = args.data or bundle.config.data_dir
    if data_dir is None:
        print("no dataset directory: pass --data or train with one", file=sys.stderr)
        return 1
    splits = data.load_dataset(data_dir)
    report = train_mod.evaluate(bundle, splits.part(args.split), args.task)
    print(report.to_table())
    if args.report:
        Path(args.report).write_text(report.to_json())
        print(f"report written to {args.report}")
    return 0


def _cmd_grad_check(args) -> int:
    report = gradcheck.run_fixture(args.fixture)
    tol = gradcheck.fixture_tolerance(args.fixture)
    ok = not report.nonfinite and report.max_rel_error < tol
    print(f"{args.fixture}: {report} (tolerance {tol:g}) -> {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def _cmd_inspect(args) -> int:
    root = Path(args.ckpt)
    manifest = json.loads((root / "manifest.json").read_text())
    total = 0
    print(f"checkpoint at step {manifest['step']}")
    for entry in manifest["arrays"]:
        n = 1
        for s in entry["shape"]:
            n *= s
        total += n
        print(f"  {entry['name']:32s} {str(entry['shape']):20s} {entry['nbytes']} bytes")
    print(f"total scalars: {total}")
    config = RunConfig.from_json((root / "config.json").read_text())
    print(f"steps={config.steps} lr={config.lr} batch={config.batch_size} seed={config.seed}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="groundseg",
                                     description="text-grounded nuclei segmentation, desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--slides", type=int, default=10)
    p.add_argument("--patches-per-slide", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="train from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one task")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), required=True)
    p.add_argument("--task", choices=("reasoning", "referring", "conversation"), required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--data", default=None, help="override the dataset directory")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--fixture", choices=gradcheck.FIXTURE_NAMES, required=True)
    p.set_defaults(fn=_cmd_grad_check)

    p = sub.add_parser("inspect", help="describe a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(fn=_cmd_inspect)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
