"""Command-line entry point: ``i2iu <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from ..checkpoint import CheckpointError, load_model, load_probe, save_model
from ..datasets import write_idx_images
from ..metrics import evaluate_model
from ..models import init_model
from ..unlearning import METHODS, retain_pool, run_unlearn
from . import experiments as ex
from .config import load_config
from .report import LEDGER_FILE, RunLedger, emit_report

SUBCOMMANDS = ("gen-data", "train", "unlearn", "eval", "verify-theory", "sweep", "cross-val", "report")


class CliError(Exception):
    pass


def build_parser():
    parser = argparse.ArgumentParser(prog="i2iu", description="Encoder-space unlearning for "
                                     "image-to-image models at desk scale.")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")
    sub.required = True

    def common(p, out_default="runs"):
        p.add_argument("--config", help="YAML experiment config (default: packaged config)")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", default=None, help=f"output directory (default: {out_default})")
        p.add_argument("--format", choices=("json", "csv"), default="json")
        return p

    common(sub.add_parser("gen-data", help="render the dataset and write its manifest"))
    common(sub.add_parser("train", help="pretrain the original model and the probe"))
    p = common(sub.add_parser("unlearn", help="unlearn the forget classes from a checkpoint"))
    p.add_argument("--method", choices=METHODS, default="ours")
    p.add_argument("--alpha", type=float)
    p.add_argument("--original", help="original checkpoint (default: train or reuse the cached one)")
    p.add_argument("--retain-source", default="real", help="real | proxy | subsample:<n>")
    p = common(sub.add_parser("eval", help="score a checkpoint on the heldout splits"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--probe", help="probe checkpoint (default: train or reuse the cached one)")
    p = common(sub.add_parser("verify-theory", help="numerical checks of the bound and KL claims"))
    p.add_argument("--original", help="encoder to test (default: a freshly initialised one)")
    common(sub.add_parser("sweep", help="every experiment and the report bundle"))
    p = common(sub.add_parser("cross-val", help="second-pass reconstruction through the original"))
    p.add_argument("--alpha", type=float)
    p = sub.add_parser("report", help="re-emit the report bundle from a run directory")
    p.add_argument("--out", default="runs")
    return parser


def _config(args):
    try:
        cfg = load_config(args.config)
    except FileNotFoundError as exc:
        raise CliError(str(exc)) from exc
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    return cfg.with_overrides(seed=args.seed, out=args.out, alpha=getattr(args, "alpha", None))


def _dump(obj, path, fmt):
    if fmt == "json":
        with open(path, "w", encoding="utf-8", newline="") as f:
            json.dump(obj, f, sort_keys=True, indent=1)
            f.write("\n")
        return
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\r\n")
        w.writerow(["config_hash", "split", "metric", "value"])
        for split, vals in sorted(obj["splits"].items()):
            for k, v in sorted(vals.items()):
                w.writerow([obj["config_hash"], split, k, repr(v)])


def _write_losses(path, losses, config_hash):
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\r\n")
        w.writerow(["config_hash", "step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([config_hash, i, repr(float(v))])


def _load_model(path):
    if not os.path.isfile(path):
        raise CliError(f"checkpoint not found: {path}")
    try:
        return load_model(path)
    except (CheckpointError, OSError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}") from exc


def cmd_gen_data(args):
    cfg = _config(args)
    lab = ex.Lab(cfg)
    manifest = lab.write_manifest()
    write_idx_images(lab.dataset.images, os.path.join(lab.out, "images.idx"))
    labels = os.path.join(lab.out, "labels.csv")
    with open(labels, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\r\n")
        w.writerow(["config_hash", "index", "label"])
        for i, y in enumerate(lab.dataset.labels):
            w.writerow([cfg.hash, i, int(y)])
    print(manifest)


def cmd_train(args):
    lab = ex.Lab(_config(args))
    lab.original()
    lab.probe()
    base = lab.baseline()
    _dump(base.to_dict(), os.path.join(lab.out, f"original_metrics.{args.format}"), args.format)
    for rec in lab.ledger.runs.values():
        if rec.checkpoint:
            print(os.path.join(lab.out, rec.checkpoint))


def cmd_unlearn(args):
    cfg = _config(args)
    lab = ex.Lab(cfg)
    original = _load_model(args.original) if args.original else lab.original()
    ucfg = lab.unlearn_config(retain_source=args.retain_source)
    retain = retain_pool(lab.dataset, lab.splits, ucfg.retain_source, ucfg.seed)
    res = run_unlearn(args.method, original, retain, lab.images("forget"), lab.mask, ucfg)
    res.model.meta["config_hash"] = cfg.hash
    os.makedirs(lab.out, exist_ok=True)
    path = os.path.join(lab.out, f"{args.method}.ckpt")
    save_model(res.model, path)
    _write_losses(os.path.join(lab.out, f"{args.method}_losses.csv"), res.losses, cfg.hash)
    print(path)


def cmd_eval(args):
    cfg = _config(args)
    model = _load_model(args.checkpoint)
    lab = ex.Lab(cfg)
    if args.probe:
        if not os.path.isfile(args.probe):
            raise CliError(f"probe checkpoint not found: {args.probe}")
        lab._probe = load_probe(args.probe)
    report = evaluate_model(model, lab.probe(), lab.heldout(("retain", "forget", "proxy")),
                            lab.mask, os.path.basename(args.checkpoint), cfg.hash)
    path = os.path.join(lab.out, f"metrics.{args.format}")
    _dump(report.to_dict(), path, args.format)
    print(path)


def cmd_verify_theory(args):
    cfg = _config(args)
    lab = ex.Lab(cfg)
    encoder = (_load_model(args.original) if args.original else init_model(cfg.seed)).encoder
    summary = ex.run_theory(encoder=encoder, images=lab.images("retain"), mask=lab.mask,
                            settings=cfg.data.get("theory"), seed=cfg.seed)
    summary["config_hash"] = cfg.hash
    path = os.path.join(lab.out, "theory.json")
    with open(path, "w", encoding="utf-8", newline="") as f:
        json.dump(summary, f, sort_keys=True, indent=1)
        f.write("\n")
    print(f"theorem1 violations={summary['theorem1_violations']} tight={summary['theorem1_tight']}")
    print(f"lemma1 gaussian max in {summary['lemma1_gaussian_max']}/{summary['lemma1_checked']}")
    print(path)


def cmd_sweep(args):
    lab = ex.Lab(_config(args))
    ledger = ex.run_all(lab)
    written = emit_report(ledger, os.path.join(lab.out, "report"))
    for c in ledger.checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']} value={c['value']}")
    print(f"{len(written)} report files in {os.path.join(lab.out, 'report')}")


def cmd_cross_val(args):
    lab = ex.Lab(_config(args))
    ex.run_cross_validation(lab)
    lab.ledger.save()
    written = emit_report(lab.ledger, os.path.join(lab.out, "report"))
    print(f"{len(written)} report files in {os.path.join(lab.out, 'report')}")


def cmd_report(args):
    path = os.path.join(args.out, LEDGER_FILE)
    if not os.path.isfile(path):
        raise CliError(f"no ledger at {path}; run `i2iu sweep` first")
    ledger = RunLedger.load(path)
    written = emit_report(ledger, os.path.join(args.out, "report"))
    print(f"{len(written)} report files in {os.path.join(args.out, 'report')}")


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "unlearn": cmd_unlearn,
            "eval": cmd_eval, "verify-theory": cmd_verify_theory, "sweep": cmd_sweep,
            "cross-val": cmd_cross_val, "report": cmd_report}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        HANDLERS[args.command](args)
    except CliError as exc:
        print(f"i2iu: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, ArithmeticError) as exc:
        print(f"i2iu {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
