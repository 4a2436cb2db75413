#!/usr/bin/env python3
"""
Export ARU filter masks and adversarial-noise visualizations for a finished run.

Rebuilds the run from its config.resolved.yaml, so the files match what the
run itself used.
"""

import logging
import sys
from pathlib import Path

import settings
from attack import attack_forget_set, export_noises
from errors import UnlearningError
from experiment import build_bundle, load_config, train_original
from masking import build_mask, gradient_discrepancy_scores
from unlearn import MethodParams

logger = logging.getLogger(__name__)


def _aru_params(config):
    for spec in config.methods:
        if spec.id == "aru":
            return spec.params
    return MethodParams()


def export_masks_and_noise(run_dir, cache_dir=None):
    """Write artifacts/seed_<n>/aru_mask.txt and artifacts/seed_<n>/noise/ per seed."""
    run_dir = Path(run_dir)
    config = load_config(run_dir / "config.resolved.yaml")
    params = _aru_params(config)
    bundle = build_bundle(config)

    written = []
    for seed in config.seeds:
        model = train_original(config, seed, bundle, cache_dir)
        pairs = attack_forget_set(model, bundle, params.adv)
        mask = build_mask(gradient_discrepancy_scores(model, bundle.forget, pairs), params.ratio)
        seed_dir = run_dir / "artifacts" / f"seed_{seed}"
        mask.save(seed_dir / "aru_mask.txt")
        export_noises(pairs, seed_dir / "noise", params.adv)
        written.append(seed_dir)
        logger.info("exported mask (%d filters) and %d noises to %s", mask.count(), len(pairs), seed_dir)
    return written


if __name__ == "__main__":
    settings.configure_logging()
    if len(sys.argv) != 2:
        print("Usage: python3 export_artifacts.py <run_dir>")
        sys.exit(1)
    try:
        for path in export_masks_and_noise(sys.argv[1]):
            print(f"💾 Artifacts saved to {path}")
    except UnlearningError as e:
        print(f"❌ {e}", file=sys.stderr)
        sys.exit(1)
