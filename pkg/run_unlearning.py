#!/usr/bin/env python3
"""
Run machine-unlearning experiments and the individual pipeline stages
(evaluate, attack, mask) from the command line.

Exit codes: 0 ok, 1 configuration error, 2 runtime error.
"""

import argparse
import json
import sys
from dataclasses import replace
from datetime import datetime
from fractions import Fraction
from pathlib import Path

import settings
from attack import AdvConfig, attack_forget_set, export_noises
from cohort_data import load_directory_dataset
from errors import ConfigurationError, ContractError, IngestionError
from evaluation import DEFAULT_LAMBDA, evaluate
from experiment import MethodSpec, aggregate, load_config, load_report, run
from export_artifacts import export_masks_and_noise
from masking import (
    build_mask,
    gradient_discrepancy_scores,
    random_mask,
    random_noise_mask,
    top_gradient_mask,
)
from substrate import load_model
from unlearn import METHODS

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def _fraction(text):
    try:
        return float(Fraction(text))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description="Attack-and-Reset machine unlearning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="Run an experiment config (all methods x seeds)")
    p.add_argument("config", type=Path)
    p.add_argument("--methods", nargs="+", default=None, help="Override the config's method list")
    p.add_argument("--seeds", nargs="+", type=int, default=None, help="Override the config's seeds")
    p.add_argument("--output-dir", type=Path, default=None)
    p.add_argument("--ascent-epochs", type=int, default=None, help="Early stop for neggrad/advneggrad")

    p = sub.add_parser("evaluate", help="Utility / forgetting / NoMUS of a saved model")
    p.add_argument("model", type=Path)
    p.add_argument("dataset", type=Path)
    p.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA)

    for name, help_text in (
        ("attack", "Generate adversarial noise for the forget set"),
        ("mask", "Build a filter mask for a saved model"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("model", type=Path)
        p.add_argument("dataset", type=Path)
        p.add_argument("--steps", type=int, default=AdvConfig.steps)
        p.add_argument("--epsilon", type=_fraction, default=AdvConfig.epsilon)
        p.add_argument("--alpha", type=_fraction, default=AdvConfig.alpha)
        p.add_argument("--out", type=Path, default=None)
    p.add_argument(
        "--strategy",
        choices=["aru", "random", "top_gradient", "random_noise"],
        default="aru",
    )
    p.add_argument("--ratio", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("report", help="Summarize a finished run directory")
    p.add_argument("run_dir", type=Path)

    p = sub.add_parser("export", help="Export ARU masks and noise images for a run")
    p.add_argument("run_dir", type=Path)

    return parser.parse_args(argv)


def _banner(title):
    print("=" * 80)
    print(title)
    print(f"Time: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    print("=" * 80)


def cmd_run(args):
    _banner("Unlearning experiment")
    config = load_config(args.config)
    if args.methods:
        # methods missing from the file inherit its defaults block
        raw_methods = {spec.id: spec for spec in config.methods}
        unknown = [m for m in args.methods if m not in METHODS]
        if unknown:
            raise ConfigurationError(f"unknown method(s) {unknown}; expected one of {sorted(METHODS)}")
        config = replace(
            config,
            methods=tuple(raw_methods.get(m, MethodSpec(m, config.defaults)) for m in args.methods),
        )
    if args.seeds:
        config = replace(config, seeds=tuple(args.seeds))
    if args.output_dir:
        config = replace(config, output_dir=str(args.output_dir))
    if args.ascent_epochs is not None:
        config = replace(
            config,
            methods=tuple(replace(s, params=replace(s.params, ascent_epochs=args.ascent_epochs)) for s in config.methods),
        )

    print(f"🧪 {len(config.methods)} method(s) x {len(config.seeds)} seed(s) -> {config.output_dir}")
    report = run(config)
    _print_summary(report.aggregates)
    if config.export_artifacts:
        for path in export_masks_and_noise(config.output_dir):
            print(f"💾 Artifacts saved to {path}")
    print(f"📝 Report written to {Path(config.output_dir) / 'report.json'}")
    return EXIT_OK


def cmd_evaluate(args):
    model = load_model(args.model)
    bundle = load_directory_dataset(args.dataset)
    metrics = evaluate(model, bundle, args.lam)
    print(json.dumps(metrics.to_dict(), indent=2))
    return EXIT_OK


def _adv_cfg(args):
    return AdvConfig(steps=args.steps, epsilon=args.epsilon, alpha=args.alpha)


def cmd_attack(args):
    model = load_model(args.model)
    bundle = load_directory_dataset(args.dataset)
    cfg = _adv_cfg(args)
    print(f"⚔️  Attacking {len(bundle.forget)} forget images ({cfg.steps} steps, eps={cfg.epsilon:.5f})...")
    pairs = attack_forget_set(model, bundle, cfg)
    out = args.out or args.dataset / "noise"
    export_noises(pairs, out, cfg)
    largest = max(float(p.noise.abs().max()) for p in pairs)
    print(f"✓ {len(pairs)} noises, max |delta| = {largest:.5f}")
    print(f"💾 Noise saved to {out}")
    return EXIT_OK


def cmd_mask(args):
    model = load_model(args.model)
    bundle = load_directory_dataset(args.dataset)
    cfg = _adv_cfg(args)
    if args.strategy == "aru":
        pairs = attack_forget_set(model, bundle, cfg)
        mask = build_mask(gradient_discrepancy_scores(model, bundle.forget, pairs), args.ratio)
    elif args.strategy == "random":
        mask = random_mask(model, args.ratio, args.seed)
    elif args.strategy == "top_gradient":
        mask = top_gradient_mask(model, bundle.forget, args.ratio)
    else:
        mask = random_noise_mask(model, bundle.forget, cfg, args.ratio, args.seed)

    for layer_id in mask.layer_ids():
        print(f"   {layer_id}: {mask.count(layer_id)}/{mask[layer_id].numel()} filters masked")
    out = args.out or Path(f"{args.strategy}_mask.txt")
    mask.save(out)
    print(f"💾 Mask saved to {out}")
    return EXIT_OK


def _print_summary(aggregates):
    print("\n" + "=" * 80)
    print("📊 RESULT (mean ± std over seeds, %):")
    print(f"{'method':<20}{'utility':>18}{'forgetting':>18}{'nomus':>18}")
    for entry in aggregates:
        cells = [
            f"{100 * entry[f'{m}_mean']:.2f} ± {100 * entry[f'{m}_std']:.2f}"
            for m in ("utility", "forgetting", "nomus")
        ]
        print(f"{entry['method']:<20}" + "".join(f"{c:>18}" for c in cells))
    print("=" * 80)


def cmd_report(args):
    data = load_report(args.run_dir)
    recomputed = aggregate(data["rows"])
    if json.dumps(recomputed, sort_keys=True) != json.dumps(data["aggregates"], sort_keys=True):
        print("⚠️  Stored aggregates differ from the per-seed rows; showing recomputed values")
    _print_summary(recomputed)

    ranked = sorted(recomputed, key=lambda e: (-e["nomus_mean"], e["method"]))
    print("\nNoMUS ranking: " + " > ".join(e["method"] for e in ranked))
    by_utility = sorted(recomputed, key=lambda e: (-e["utility_mean"], e["method"]))
    by_forgetting = sorted(recomputed, key=lambda e: (e["forgetting_mean"], e["method"]))
    print("Utility (higher first): " + " > ".join(e["method"] for e in by_utility))
    print("Forgetting (lower F first): " + " > ".join(e["method"] for e in by_forgetting))
    for original in data.get("originals", []):
        print(
            f"   original seed {original['seed']}: U={100 * original['utility']:.2f}% "
            f"F={100 * original['forgetting']:.2f}% MIA={original['mia_accuracy']:.3f}"
        )

    timings_path = args.run_dir / "timings.json"
    if timings_path.exists():
        per_method = {}
        for t in json.loads(timings_path.read_text()):
            per_method.setdefault(t["method"], []).append(t["wall_clock_s"])
        print("\n⏱️  Mean wall-clock per method:")
        for method, values in per_method.items():
            print(f"   {method:<20}{sum(values) / len(values):>10.2f}s")
    return EXIT_OK


def cmd_export(args):
    for path in export_masks_and_noise(args.run_dir):
        print(f"💾 Artifacts saved to {path}")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "evaluate": cmd_evaluate,
    "attack": cmd_attack,
    "mask": cmd_mask,
    "report": cmd_report,
    "export": cmd_export,
}


def main(argv=None):
    args = parse_args(argv)
    settings.configure_logging()
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, ContractError, IngestionError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        print(f"❌ Error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
