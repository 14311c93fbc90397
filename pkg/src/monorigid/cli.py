"""Command-line interface: ``monorigid {gen,train,eval,gradcheck,validate-warp}``.

Exit codes: 0 success, 1 validation failure or bad usage, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .diffcore import ContractError

log = logging.getLogger("monorigid")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; this CLI reserves 2 for runtime errors
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="monorigid", description="Self-supervised monocular depth with per-instance rigid motion.",
                formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    g = sub.add_parser("gen", help="render a synthetic dataset", formatter_class=fmt)
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--sequences", type=int, default=10, help="number of sequences")
    g.add_argument("--frames", type=int, default=3, help="frames per sequence (>= 3)")
    g.add_argument("--objects", type=int, default=2, help="moving objects per sequence")
    g.add_argument("--seed", type=int, default=0, help="random seed")
    g.add_argument("--width", type=int, default=192, help="image width in pixels")
    g.add_argument("--height", type=int, default=64, help="image height in pixels")
    g.add_argument("--depth-near", type=float, default=0.5, help="nearest allowed depth")
    g.add_argument("--depth-far", type=float, default=80.0, help="farthest allowed depth")

    t = sub.add_parser("train", help="train a model and write an EMA checkpoint", formatter_class=fmt)
    t.add_argument("--data", required=True, help="dataset directory written by gen")
    t.add_argument("--config", required=True, help='JSON run config {"model": {...}, "train": {...}}')
    t.add_argument("--out", required=True, help="output directory for checkpoint and log")
    t.add_argument("--ablation", choices=["A2", "A3", "A4", "A5", "A6"], default=None,
                   help="apply an ablation preset on top of the model config")
    t.add_argument("--seed", type=int, default=None, help="override the train seed of the config")
    t.add_argument("--log-every", type=int, default=50, help="progress line every N steps")

    e = sub.add_parser("eval", help="evaluate a checkpoint's depth", formatter_class=fmt)
    e.add_argument("--data", required=True, help="dataset directory written by gen")
    e.add_argument("--checkpoint", required=True, help="checkpoint file written by train")
    e.add_argument("--report", required=True, help="report JSON path (a sibling .csv is written too)")
    e.add_argument("--dynamic-masks", default=None,
                   help="directory of external masks <dir>/<seq_id>/frame_<k>.png; default uses GT motion")
    e.add_argument("--export-depth", default=None, help="directory for 16-bit depth PNGs")
    e.add_argument("--no-median-scaling", action="store_true", help="report metric depth as predicted")

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite (64-bit)", formatter_class=fmt)
    c.add_argument("--op", default=None, help="check a single primitive (see --list)")
    c.add_argument("--pipeline", action="store_true", help="check only the warp-to-loss pipeline")
    c.add_argument("--list", action="store_true", help="list primitive names and exit")
    c.add_argument("--seeds", type=int, default=10, help="seeds 0..N-1 per case")
    c.add_argument("--tol", type=float, default=1e-4, help="max relative error")

    w = sub.add_parser("validate-warp", help="cross-check the analytic warp against renderer geometry",
                       formatter_class=fmt)
    w.add_argument("--data", required=True, help="dataset directory written by gen")
    w.add_argument("--tol", type=float, default=1e-5, help="pixel tolerance")
    w.add_argument("--min-agreement", type=float, default=0.99,
                   help="required fraction of non-occluded pixels within tolerance")
    return p


def cmd_gen(a):
    from .synthscene import SceneConfig, generate_dataset, write_dataset

    if a.sequences < 1:
        raise ContractError("--sequences must be >= 1")
    cfg = SceneConfig(width=a.width, height=a.height, frames=a.frames, n_objects=a.objects,
                      depth_range=(a.depth_near, a.depth_far), seed=a.seed)
    manifest = write_dataset(generate_dataset(cfg, a.sequences), a.out, cfg)
    print(f"wrote {a.sequences} sequences x {a.frames} frames to {a.out} "
          f"(dynamic fraction {manifest['dynamic_fraction']:.4f})")
    return EXIT_OK


def cmd_train(a):
    from .nets import apply_ablation
    from .trainer import dump_run_config, load_run_config, train

    model_config, train_config = load_run_config(a.config)
    if a.ablation:
        model_config = apply_ablation(model_config, a.ablation)
    if a.seed is not None:
        d = train_config.to_dict()
        d["seed"] = a.seed
        train_config = type(train_config)(**d)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(dump_run_config(model_config, train_config) + "\n")
    t0 = time.time()

    def progress(row):
        if row["step"] % a.log_every == 0:
            log.info("step %d epoch %d loss %.5f (%.0fs)", row["step"], row["epoch"], row["total"], time.time() - t0)

    ckpt = train(a.data, model_config, train_config, out, progress=progress)
    print(f"checkpoint {ckpt} ({time.time() - t0:.0f}s)")
    return EXIT_OK


def cmd_eval(a):
    from .evalkit import MetricsConfig, evaluate

    cfg = MetricsConfig(median_scaling=not a.no_median_scaling)
    report, (jpath, cpath) = evaluate(a.checkpoint, a.data, a.report, a.dynamic_masks, cfg, a.export_depth)
    for cat, row in report.rows.items():
        if row is None:
            print(f"{cat:>18}: absent")
        else:
            print(f"{cat:>18}: " + " ".join(f"{k}={v:.4f}" for k, v in row.items()))
    print(f"report {jpath} and {cpath}")
    return EXIT_OK


def cmd_gradcheck(a):
    from .gradsuite import PRIMITIVES, run_suite

    if a.list:
        print("\n".join(sorted(PRIMITIVES)))
        return EXIT_OK
    if a.op is not None and a.op not in PRIMITIVES:
        raise ContractError(f"unknown op {a.op!r}; use --list")
    if a.seeds < 1:
        raise ContractError("--seeds must be >= 1")
    names = [] if a.pipeline else ([a.op] if a.op else None)
    pipeline = a.pipeline or a.op is None
    worst, failed = {}, 0
    for name, seed, err in run_suite(names, pipeline, range(a.seeds)):
        worst[name] = max(worst.get(name, 0.0), err)
        if not err < a.tol:
            failed += 1
            print(f"FAIL {name} seed {seed}: max relative error {err:.3e}")
    for name, err in worst.items():
        print(f"{'ok  ' if err < a.tol else 'FAIL'} {name:<26} {err:.3e}")
    print(f"{len(worst)} cases, {failed} failing seeds, tolerance {a.tol:g}")
    return EXIT_INVALID if failed else EXIT_OK


def cmd_validate_warp(a):
    from .synthscene import read_dataset, validate_warp

    _, sequences = read_dataset(a.data)
    checks = validate_warp(sequences, a.tol)
    bad = [c for c in checks if c.agreement < a.min_agreement]
    for c in bad:
        print(f"FAIL {c.seq_id} {c.target}->{c.source}: agreement {c.agreement:.4f}, max error {c.max_error:.2e}")
    worst = max((c.max_error for c in checks), default=0.0)
    low = min((c.agreement for c in checks), default=1.0)
    print(f"{len(checks)} frame pairs, lowest agreement {low:.4f}, max error {worst:.2e} px")
    return EXIT_INVALID if bad or not checks else EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "validate-warp": cmd_validate_warp}


def main(argv=None):
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    try:
        return COMMANDS[args.command](args)
    except ContractError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
