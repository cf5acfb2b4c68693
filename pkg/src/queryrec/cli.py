"""Command-line entry point: ``queryrec <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .analysis import (
    bootstrap_compare,
    bootstrap_standard_error,
    correlation_samples,
    correlation_scores,
    js_histogram,
    user_js_divergences,
    write_histogram_csv,
    write_json,
)
from .config import RunConfig, load_config
from .data import load_features, load_interactions, save_bundle
from .gradcheck import MODULES, format_results, main_gradcheck
from .rng import Rng


def _config(path, overrides=None) -> RunConfig:
    if path is None:
        cfg = RunConfig.from_flat({k: v for k, v in (overrides or {}).items() if v is not None})
        cfg.validate()
        return cfg
    return load_config(path, overrides)


def _set_pairs(pairs) -> dict[str, str]:
    out = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {pair!r}")
        out[key.strip()] = value.strip()
    return out


def _read_floats(path) -> list[float]:
    with open(path, encoding="utf-8") as fh:
        return [float(line) for line in fh if line.strip()]


def cmd_synth_gen(args) -> int:
    cfg = _config(args.config, _set_pairs(args.set))
    if cfg.data_dir:
        raise ValueError("synth-gen needs a synthetic config (data_dir must be empty)")
    bundle = pipeline.make_dataset(cfg)
    save_bundle(bundle, args.out)
    print(json.dumps({"out": str(args.out), "rec": len(bundle.rec), "search": len(bundle.search)}))
    return 0


def cmd_analyze(args) -> int:
    rec = load_interactions(args.rec, "rec")
    search = load_interactions(args.search, "search")
    items_path = args.items or Path(args.rec).with_name("item_features.tsv")
    items = load_features(items_path, "item_id")
    category = np.zeros(1 + max(items), dtype=np.int64)
    for i, fields in items.items():
        category[i] = fields[0]
    n_categories = int(category.max()) + 1
    os.makedirs(args.out, exist_ok=True)
    out = Path(args.out)
    rng = Rng(args.seed)
    js = user_js_divergences(rec, search, category, n_categories)
    write_histogram_csv(out / "js_histogram.csv", js_histogram(list(js.values())))
    samples, p_src, users = correlation_samples(rec, search, category, args.samples, rng.child("samples"))
    report = correlation_scores(samples, p_src)
    se1, se2 = bootstrap_standard_error(samples, p_src, args.resamples, rng.child("se"), groups=users)
    corr = {**report.to_json(), "R1_se": se1, "R2_se": se2}
    shifted = sum(v >= 0.5 for v in js.values())
    summary = {
        "users": len(js),
        "shifted_users": shifted,
        "shifted_fraction": shifted / len(js) if js else 0.0,
        "mean_js": float(np.mean(list(js.values()))) if js else 0.0,
        "correlation": corr,
    }
    if args.auc_a and args.auc_b:
        boot = bootstrap_compare(_read_floats(args.auc_a), _read_floats(args.auc_b), args.resamples, rng.child("auc"))
        summary["bootstrap"] = boot.to_json()
    write_json(out / "analysis.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_train_diffusion(args) -> int:
    cfg = _config(args.config, _set_pairs(args.set))
    aug = pipeline.train_diffusion(cfg, args.out)
    print(json.dumps({"out": str(args.out), "final_loss": aug.loss_curve_[-1], "steps": len(aug.loss_curve_)}))
    return 0


def cmd_augment(args) -> int:
    sets = pipeline.augment(args.ckpt, args.out)
    generated = sum(len(v - sets.positives.get(q, frozenset())) for q, v in sets.enhanced.items())
    print(json.dumps({"out": str(args.out), "queries_augmented": len(sets.enhanced), "items_generated": generated}))
    return 0


def cmd_train(args) -> int:
    overrides = _set_pairs(args.set)
    if args.lambda2 is not None:
        overrides["lambda2"] = str(args.lambda2)
    if args.lambda3 is not None:
        overrides["lambda3"] = str(args.lambda3)
    if args.no_nip:
        overrides["lambda2"] = "0"
    if args.no_contrastive:
        overrides["lambda3"] = "0"
    if args.no_diffusion:
        overrides["use_diffusion"] = "false"
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    cfg = _config(args.config, overrides)
    model = pipeline.train(cfg, args.out)
    result = {"out": str(args.out), "best_step": model.best_step_, "epochs": len(model.metrics_)}
    if model.bundle_.test:
        result["test_auc"] = model.evaluate("test")["auc"]
    print(json.dumps(result))
    return 0


def cmd_evaluate(args) -> int:
    _, _, model = pipeline.load_model(args.ckpt)
    print(json.dumps(model.evaluate(args.split)))
    return 0


def cmd_gradcheck(args) -> int:
    results, seconds = main_gradcheck(args.module)
    print(format_results(results, seconds))
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="queryrec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, required=True):
        p.add_argument("--config", required=required, help="flat key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (repeatable)")

    p = sub.add_parser("synth-gen", help="generate a synthetic dataset directory")
    with_config(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("analyze", help="interest-shift histogram, R1/R2 ratios, bootstrap comparison")
    p.add_argument("--rec", required=True)
    p.add_argument("--search", required=True)
    p.add_argument("--items", help="item_features.tsv (default: next to --rec)")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=None, help="rec clicks sampled for R1/R2 (default: all)")
    p.add_argument("--resamples", type=int, default=1000)
    p.add_argument("--auc-a", help="file with one AUC per line (baseline)")
    p.add_argument("--auc-b", help="file with one AUC per line (candidate)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("train-diffusion", help="fit the denoiser and save it")
    with_config(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train_diffusion)

    p = sub.add_parser("augment", help="write enlarged positive sets from a denoiser checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="TSV path")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="run diffusion, augmentation and joint training")
    with_config(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--lambda2", type=float)
    p.add_argument("--lambda3", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-diffusion", action="store_true")
    p.add_argument("--no-nip", action="store_true", help="drop the next-item loss (lambda2 = 0)")
    p.add_argument("--no-contrastive", action="store_true", help="drop the contrastive loss (lambda3 = 0)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="AUC of a trained checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test", choices=("val", "test"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--module", choices=MODULES)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, FloatingPointError) as exc:
        print(f"queryrec {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
