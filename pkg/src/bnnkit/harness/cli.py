"""Command-line entry point: train, sweep, export, infer, verify, report."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..binarizers import TrainingProgress
from ..normalizers import BatchNormParams
from ..packed import export_model, import_model, to_packed, verify_fold
from .augment import augment
from .config import ExperimentConfig, load_config, override, parse_grid
from .experiment import load_data, load_model, run_experiment, run_sweep
from .report import collect, comparison_csv, summarize


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    return override(cfg, seed=args.seed, dataset=args.dataset, epochs=args.epochs, out=args.out)


def _checkpoint(args, cfg) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    return Path(cfg.out) / cfg.name / f"model_seed_{cfg.seeds[0]}.npz"


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.seed is None:
        cfg = cfg.with_overrides(seeds=str(cfg.seeds[0]))
    summary = run_experiment(cfg)
    print(summary.to_json(), end="")
    return 1 if summary.degraded else 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    factors = parse_grid(Path(args.grid).read_text())
    summaries, comparison = run_sweep(cfg, factors, one_factor=not args.allow_multi_factor)
    out = Path(cfg.out)
    report = summarize(summaries)
    (out / "report.csv").write_text(report.csv())
    (out / "comparison.csv").write_text(comparison_csv(comparison))
    print(report.text())
    for row in comparison:
        print(f"{row['variant']}: delta median {100 * row['delta_median']:+.2f} points")
    return 0


def cmd_export(args) -> int:
    cfg = _config(args)
    model = load_model(cfg, _checkpoint(args, cfg))
    target = Path(args.model) if args.model else Path(cfg.out) / cfg.name / "model.bnnf"
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(export_model(model))
    print(f"wrote {target}")
    return 0


def _test_batch(cfg, limit: int | None):
    data = load_data(cfg)
    x = augment(data.test.images, cfg.augment, None, data.stats, train=False)
    y = data.test.labels
    return (x[:limit], y[:limit]) if limit else (x, y)


def cmd_infer(args) -> int:
    cfg = _config(args)
    packed = import_model(Path(args.model).read_bytes())
    x, y = _test_batch(cfg, args.limit)
    logits = np.concatenate([packed(x[i:i + 256]) for i in range(0, len(x), 256)])
    acc = float(np.mean(logits.argmax(axis=1) == y))
    print(json.dumps({"samples": int(len(y)), "accuracy": acc}))
    return 0


def cmd_verify(args) -> int:
    """Packed-vs-float agreement on the test split, plus a random fold check."""
    cfg = _config(args)
    model = load_model(cfg, _checkpoint(args, cfg))
    packed = to_packed(model)
    x, _ = _test_batch(cfg, args.limit)
    float_logits = model(x, TrainingProgress(1.0), 2, mode="eval").data
    packed_logits = packed(x)
    agree = float(np.mean(float_logits.argmax(axis=1) == packed_logits.argmax(axis=1)))
    rng = np.random.default_rng(0 if args.seed is None else args.seed)
    bn = BatchNormParams.create(16)
    bn.gamma.data = rng.normal(size=16)
    bn.beta.data = rng.normal(size=16)
    bn.running_mu = rng.normal(size=16) * 4
    bn.running_var = rng.random(16) + 0.1
    fold = verify_fold(rng.choice([-1.0, 1.0], (4, 16, 12, 12)), rng.choice([-1.0, 1.0], (16, 16, 3, 3)), bn)
    print(json.dumps({"top1_agreement": agree, "max_logit_diff": float(np.abs(float_logits - packed_logits).max()),
                      "fold_elements": fold.elements, "fold_disagree": fold.disagree, "fold_ties": fold.ties}))
    return 0 if agree >= 0.99 and fold.exact else 1


def cmd_report(args) -> int:
    root = Path(args.out or ".")
    report = summarize(collect(root))
    (root / "report.csv").write_text(report.csv())
    print(report.text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bnnkit", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="key = value experiment config")
        p.add_argument("--seed", type=int, help="run this single seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--dataset", help="dataset directory")
        p.add_argument("--epochs", type=int)

    p = sub.add_parser("train", help="train one config for one seed")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="baseline plus a one-factor grid, all seeds")
    common(p)
    p.add_argument("--grid", required=True, help="file of 'key = v1, v2' factor lines")
    p.add_argument("--allow-multi-factor", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export", help="fold a trained checkpoint into a packed model file")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--model", help="output model file (default <out>/<name>/model.bnnf)")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("infer", help="evaluate a packed model file on the test split")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("verify", help="check packed inference against the float model")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--limit", type=int, default=256)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="tabulate every summary.json under --out")
    common(p, config_required=False)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
