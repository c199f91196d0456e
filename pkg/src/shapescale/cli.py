"""Command-line entry point.

Exit codes: 0 on success, 1 on a runtime failure (including a failed
gradient check), 2 on a usage error or an invalid configuration.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import gradsuite, kitti, reports
from .config import RunConfig, category_presets
from .errors import ConfigurationError
from .msm import MSMConfig
from .train import Model, ablate_lambda, eval_scenes, evaluate, train_loop

OUTPUT_ENV = "SHAPESCALE_OUTPUT_DIR"

log = logging.getLogger("shapescale")


class UsageError(Exception):
    pass


def output_dir(args, cfg: RunConfig | None = None) -> Path:
    """``--out`` beats the environment variable, which beats the config."""
    if getattr(args, "out", None):
        return Path(args.out)
    if os.environ.get(OUTPUT_ENV):
        return Path(os.environ[OUTPUT_ENV])
    return Path(cfg.output_dir if cfg is not None else RunConfig().output_dir)


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        return RunConfig.load(path).validate()
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except (ConfigurationError, TypeError) as exc:
        raise UsageError(f"invalid config {path}: {exc}") from None


def parse_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def parse_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    seeds = tuple(range(args.seeds))

    def progress(res):
        if args.verbose:
            print(f"  {res.name} seed={res.seed} err={res.error:.3e}", flush=True)

    results = gradsuite.run_suite(seeds, names=args.only, progress=progress)
    summary = gradsuite.summarize(results)
    for name, entry in summary.items():
        status = "PASS" if entry["passed"] else "FAIL"
        print(f"{status} {name:24s} max_rel_err={entry['max_error']:.3e} seeds={entry['seeds']}")
    out = output_dir(args)
    reports.write_json(out / "gradcheck.json", {"epsilon": gradsuite.EPSILON,
                                                "threshold": gradsuite.THRESHOLD, "ops": summary})
    ok = all(e["passed"] for e in summary.values())
    print("gradient suite " + ("passed" if ok else "FAILED"))
    return 0 if ok else 1


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.steps is not None:
        cfg = cfg.replace(steps=args.steps)
    out = output_dir(args, cfg) / f"train-synth-seed{cfg.seed}"
    result = train_loop(cfg)
    csv_path = reports.write_metrics_csv(out / "metrics.csv", result.reports)
    result.model.save(out / "model.npz")
    cfg.dump(out / "config.json")
    final = result.reports[-1] if result.reports else None
    reports.write_json(out / "summary.json", {
        "seed": cfg.seed, "steps": cfg.steps,
        "final": reports.report_dict(final) if final else None,
        "final_train_loss": result.loss_trace[-1] if result.loss_trace else None,
    })
    print(f"wrote {csv_path}")
    if final:
        print(f"step {final.step}: total_loss={final.total_loss:.4f} "
              f"matching_accuracy={final.matching_accuracy:.4f} "
              f"position_precision={final.position_precision:.4f} "
              f"weighted_position_precision={final.weighted_position_precision:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    if not Path(args.model).exists():
        raise UsageError(f"model file not found: {args.model}")
    model = Model.load(args.model, cfg)
    rep = evaluate(model, eval_scenes(cfg, args.scenes), step=cfg.steps)
    out = output_dir(args, cfg)
    reports.write_json(out / "eval-keypoints.json", reports.report_dict(rep))
    print(f"position_precision={rep.position_precision:.4f} "
          f"weighted_position_precision={rep.weighted_position_precision:.4f} "
          f"matching_accuracy={rep.matching_accuracy:.4f}" + (" (empty)" if rep.empty else ""))
    return 0


def cmd_label_stats(args) -> int:
    try:
        presets = category_presets(args.category, joint=args.joint)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    labels = args.labels if args.labels is not None else kitti.fixture_dir()
    try:
        records = kitti.parse_label_dir(labels)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    report = kitti.label_stats(records, presets, MSMConfig(args.w1, args.w2), [args.category])
    out = output_dir(args) / f"label-stats-{args.category}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(kitti.format_report(report))
    cat = report["categories"][args.category]
    print(f"{args.category}: {cat['count']} records, scale in [1, 14]: "
          f"{cat['scale_in_range']} ({cat['scale_in_range_fraction']:.4f}), "
          f"preset counts {cat['preset_counts']}, ties {cat['ties']}")
    print(f"wrote {out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    if args.steps is not None:
        cfg = cfg.replace(steps=args.steps)
    if args.eval_scenes is not None:
        cfg = cfg.replace(eval_scenes=args.eval_scenes)
    cfg = cfg.replace(eval_interval=max(cfg.steps, 1))

    def progress(lam, seed, rep):
        print(f"  lambda={lam!r} seed={seed} matching_accuracy={rep.matching_accuracy:.4f}", flush=True)

    results = ablate_lambda(cfg, args.values, args.seeds, progress)
    rows, per_run = [], []
    for lam in args.values:
        reps = [results[(float(lam), s)] for s in args.seeds]
        rows.append([repr(float(lam)), str(len(reps))] + [
            repr(float(np.mean([getattr(r, k) for r in reps])))
            for k in reports.ABLATION_COLUMNS[2:]])
        per_run += [{"lambda_msm": float(lam), "seed": s, **reports.report_dict(results[(float(lam), s)])}
                    for s in args.seeds]
    out = output_dir(args, cfg)
    path = reports.write_rows(out / "ablate-lambda.csv", reports.ABLATION_COLUMNS, rows)
    reports.write_json(out / "ablate-lambda.json", {"values": args.values, "seeds": args.seeds,
                                                     "runs": per_run})
    print("lambda_msm  matching_accuracy")
    for row in rows:
        print(f"{row[0]:>10}  {float(row[2]):.4f}")
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shapescale", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    g.add_argument("--seeds", type=int, default=len(gradsuite.DEFAULT_SEEDS))
    g.add_argument("--only", type=lambda s: s.split(","), default=None,
                   help="comma-separated op names")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gradcheck)

    t = sub.add_parser("train-synth", help="train on synthetic scenes")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval-keypoints", help="key-point precision of a saved model")
    e.add_argument("--model", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--scenes", type=int, default=None)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("label-stats", help="shape/scale statistics of KITTI labels")
    s.add_argument("--labels", help="label directory or file (default: bundled fixture)")
    s.add_argument("--category", required=True)
    s.add_argument("--joint", action="store_true", help="use the joint-training Car presets")
    s.add_argument("--w1", type=float, default=MSMConfig.w1)
    s.add_argument("--w2", type=float, default=MSMConfig.w2)
    s.add_argument("--out")
    s.set_defaults(func=cmd_label_stats)

    a = sub.add_parser("ablate-lambda", help="sweep the matching-loss weight")
    a.add_argument("--values", type=parse_floats, default=[0.0, 0.1, 0.2, 0.3, 0.4])
    a.add_argument("--seeds", type=parse_ints, default=[0, 1, 2, 3, 4])
    a.add_argument("--config")
    a.add_argument("--steps", type=int)
    a.add_argument("--eval-scenes", type=int)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        log.debug("failure", exc_info=True)
        print(f"{parser.prog}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
