"""
Config-driven experiment runner: resolves an ExperimentConfig, trains (or
loads) the original model per seed, runs every configured unlearning method,
evaluates it and assembles the report.
"""

import csv
import hashlib
import json
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

import settings
from attack import AdvConfig, NoiseCache
from cohort_data import SyntheticConfig, generate_synthetic, load_directory_dataset
from errors import ConfigurationError
from evaluation import DEFAULT_LAMBDA, evaluate
from substrate import ORIGINAL_TRAIN, TrainConfig, build_model, load_model, save_model, sgd_train
from unlearn import METHODS, MethodParams, UnlearnRequest, run_method

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_SEEDS = list(range(10))
REPORT_CSV_COLUMNS = ["method", "seed", "utility", "forgetting", "nomus", "wall_clock_s"]
TRAINING_LOG_COLUMNS = ["method", "seed", "stage", "epoch", "loss", "accuracy"]
TOP_LEVEL_KEYS = {
    "dataset", "methods", "seeds", "output_dir", "lambda", "original",
    "defaults", "workers", "export_artifacts",
}


@dataclass(frozen=True)
class MethodSpec:
    id: str
    params: MethodParams = MethodParams()


@dataclass(frozen=True)
class ExperimentConfig:
    synthetic: Optional[SyntheticConfig] = SyntheticConfig()
    directory: Optional[str] = None
    methods: tuple = tuple(MethodSpec(m) for m in METHODS)
    seeds: tuple = tuple(DEFAULT_SEEDS)
    output_dir: str = str(settings.RUNS_DIR / "default")
    lam: float = DEFAULT_LAMBDA
    original: TrainConfig = ORIGINAL_TRAIN
    defaults: MethodParams = MethodParams()
    workers: int = 1
    export_artifacts: bool = False

    def to_dict(self):
        dataset = {"directory": self.directory} if self.directory else {"synthetic": _plain(asdict(self.synthetic))}
        return {
            "dataset": dataset,
            "methods": [{"id": m.id, "params": _plain(asdict(m.params))} for m in self.methods],
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "lambda": self.lam,
            "original": asdict(self.original),
            "defaults": _plain(asdict(self.defaults)),
            "workers": self.workers,
            "export_artifacts": self.export_artifacts,
        }

    def config_hash(self):
        """Cache key of original models: dataset + original training recipe."""
        payload = {"dataset": self.to_dict()["dataset"], "original": asdict(self.original)}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _plain(obj):
    """Tuples to lists, so the structure round-trips through YAML/JSON."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _number(value, where):
    # accepts "8/255" style fractions as well as plain numbers
    if isinstance(value, str):
        try:
            return float(Fraction(value.strip()))
        except (ValueError, ZeroDivisionError):
            raise ConfigurationError(f"{where}: not a number: {value!r}")
    return value


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where}: expected a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"{where}: unknown key(s) {unknown}")
    values = {k: _number(v, f"{where}.{k}") for k, v in data.items()}
    if "image_shape" in values:
        values["image_shape"] = tuple(values["image_shape"])
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigurationError(f"{where}: {e}")


def _method_params(data, base, where):
    if data is None:
        return base
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where}: expected a mapping")
    merged = asdict(base)
    for key, value in data.items():
        if key not in merged:
            raise ConfigurationError(f"{where}: unknown key {key!r}")
        if isinstance(merged[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"{where}.{key}: expected a mapping")
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    adv = _build(AdvConfig, merged.pop("adv"), f"{where}.adv")
    finetune = _build(TrainConfig, merged.pop("finetune"), f"{where}.finetune")
    retrain = _build(TrainConfig, merged.pop("retrain"), f"{where}.retrain")
    merged = {k: _number(v, f"{where}.{k}") for k, v in merged.items()}
    return MethodParams(adv=adv, finetune=finetune, retrain=retrain, **merged)


def parse_config(raw):
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a mapping")
    unknown = sorted(set(raw) - TOP_LEVEL_KEYS)
    if unknown:
        raise ConfigurationError(f"unknown config key(s) {unknown}")

    dataset = raw.get("dataset") or {}
    if set(dataset) - {"synthetic", "directory"}:
        raise ConfigurationError("dataset takes either 'synthetic' or 'directory'")
    if "synthetic" in dataset and "directory" in dataset:
        raise ConfigurationError("dataset takes either 'synthetic' or 'directory', not both")
    synthetic, directory = None, None
    if "directory" in dataset:
        directory = str(dataset["directory"])
    else:
        synthetic = _build(SyntheticConfig, dataset.get("synthetic"), "dataset.synthetic").validate()

    original = ORIGINAL_TRAIN
    if raw.get("original") is not None:
        if not isinstance(raw["original"], dict):
            raise ConfigurationError("original: expected a mapping")
        original = _build(TrainConfig, {**asdict(ORIGINAL_TRAIN), **raw["original"]}, "original")
    defaults = _method_params(raw.get("defaults"), MethodParams(), "defaults")

    methods = []
    for i, entry in enumerate(raw.get("methods") or list(METHODS)):
        if isinstance(entry, str):
            entry = {"id": entry}
        if not isinstance(entry, dict) or "id" not in entry:
            raise ConfigurationError(f"methods[{i}]: expected a method id or {{id, params}}")
        if entry["id"] not in METHODS:
            raise ConfigurationError(
                f"methods[{i}]: unknown method {entry['id']!r}; expected one of {sorted(METHODS)}"
            )
        methods.append(MethodSpec(entry["id"], _method_params(entry.get("params"), defaults, f"methods[{i}].params")))

    seeds = raw.get("seeds", DEFAULT_SEEDS)
    if not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigurationError("seeds must be a non-empty list of integers")
    workers = raw.get("workers", 1)
    if not isinstance(workers, int) or workers < 1:
        raise ConfigurationError("workers must be a positive integer")
    lam = _number(raw.get("lambda", DEFAULT_LAMBDA), "lambda")
    if not 0 <= lam <= 1:
        raise ConfigurationError(f"lambda must lie in [0, 1], got {lam}")

    return ExperimentConfig(
        synthetic=synthetic,
        directory=directory,
        methods=tuple(methods),
        seeds=tuple(seeds),
        output_dir=str(raw.get("output_dir", settings.RUNS_DIR / "default")),
        lam=lam,
        original=original,
        defaults=defaults,
        workers=workers,
        export_artifacts=bool(raw.get("export_artifacts", False)),
    )


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigurationError(f"{path}: invalid YAML: {e}")
    return parse_config(raw)


def write_resolved_config(config, out_dir):
    path = Path(out_dir) / "config.resolved.yaml"
    path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
    return path


def build_bundle(config):
    if config.directory:
        return load_directory_dataset(config.directory)
    return generate_synthetic(config.synthetic)


def original_cache_path(config, seed, cache_dir=None):
    cache_dir = Path(cache_dir or settings.CACHE_DIR)
    return cache_dir / f"original_{config.config_hash()}_seed{seed}.pt"


def train_original(config, seed, bundle=None, cache_dir=None):
    """Train theta on the full train split (retain + forget), cached per (config hash, seed)."""
    path = original_cache_path(config, seed, cache_dir)
    if path.exists():
        logger.info("loading cached original model %s", path)
        return load_model(path)
    bundle = bundle or build_bundle(config)
    model = build_model(bundle.num_classes, bundle.image_shape, seed)
    model, log = sgd_train(model, bundle.train, config.original.with_seed(seed), stage="original")
    if log:
        logger.info("original model seed %d: train accuracy %.3f", seed, log[-1].accuracy)
    save_model(model, path)
    return model


@dataclass
class SeedResult:
    seed: int
    rows: list
    original: dict
    timings: list
    training_log: list


@dataclass
class RunReport:
    config_hash: str
    lam: float
    rows: list
    aggregates: list
    originals: list
    timings: list = field(default_factory=list)

    def to_json(self):
        return json.dumps(
            {
                "schema_version": SCHEMA_VERSION,
                "config_hash": self.config_hash,
                "lambda": self.lam,
                "rows": self.rows,
                "aggregates": self.aggregates,
                "originals": self.originals,
            },
            indent=2,
            sort_keys=True,
        ) + "\n"


def aggregate(rows):
    """Mean and standard deviation of U, F and NoMUS per method, in first-seen order."""
    order = []
    grouped = {}
    for row in rows:
        if row["method"] not in grouped:
            order.append(row["method"])
            grouped[row["method"]] = []
        grouped[row["method"]].append(row)
    out = []
    for method in order:
        group = grouped[method]
        entry = {"method": method, "n": len(group)}
        for metric in ("utility", "forgetting", "nomus"):
            values = np.array([r[metric] for r in group], dtype=np.float64)
            entry[f"{metric}_mean"] = float(values.mean())
            entry[f"{metric}_std"] = float(values.std(ddof=1)) if len(values) > 1 else 0.0
        out.append(entry)
    return out


def run_seed(config, seed, cache_dir=None):
    """Every configured method for one seed; sequential and self-contained."""
    bundle = build_bundle(config)
    original = train_original(config, seed, bundle, cache_dir)
    original_metrics = evaluate(original, bundle, config.lam).to_dict()
    cache = NoiseCache()

    rows, timings, training_log = [], [], []
    for spec in config.methods:
        request = UnlearnRequest(spec.id, original, bundle, spec.params, seed, cache=cache)
        result = run_method(request)
        metrics = evaluate(result.model, bundle, config.lam)
        prov = result.provenance
        rows.append({
            "method": spec.id,
            "seed": seed,
            **metrics.to_dict(),
            "model_checksum": prov.model_checksum,
            "mask_checksum": prov.mask_checksum,
            "audit": prov.audit,
            "params": prov.params,
        })
        timings.append({"method": spec.id, "seed": seed, "wall_clock_s": prov.wall_clock_s})
        for entry in prov.epoch_logs:
            training_log.append({"method": spec.id, "seed": seed, "stage": spec.id, **entry})
        logger.info(
            "%s seed %d: U=%.4f F=%.4f NoMUS=%.4f",
            spec.id, seed, metrics.utility, metrics.forgetting, metrics.nomus,
        )
    return SeedResult(seed, rows, {"seed": seed, **original_metrics}, timings, training_log)


def _write_training_log(path, entries):
    """One row per training epoch of this run; a rerun replaces the file."""
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=TRAINING_LOG_COLUMNS)
        writer.writeheader()
        for entry in entries:
            writer.writerow({k: entry[k] for k in TRAINING_LOG_COLUMNS})


def write_report(report, out_dir):
    out_dir = Path(out_dir)
    (out_dir / "report.json").write_text(report.to_json())
    wall_clock = {(t["method"], t["seed"]): t["wall_clock_s"] for t in report.timings}
    with open(out_dir / "report.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_CSV_COLUMNS)
        for row in report.rows:
            writer.writerow([
                row["method"], row["seed"], row["utility"], row["forgetting"], row["nomus"],
                f"{wall_clock.get((row['method'], row['seed']), float('nan')):.3f}",
            ])
    (out_dir / "timings.json").write_text(json.dumps(report.timings, indent=2) + "\n")


def run(config, cache_dir=None):
    """Run a whole experiment and write report.json / report.csv into its output dir."""
    out_dir = Path(config.output_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigurationError(f"output_dir {out_dir} is not writable: {e}")
    write_resolved_config(config, out_dir)

    cache_dir = Path(cache_dir or settings.CACHE_DIR)

    if config.workers > 1 and len(config.seeds) > 1:
        # torch thread pools do not survive fork
        context = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=config.workers, mp_context=context) as pool:
            results = list(pool.map(run_seed, [config] * len(config.seeds), config.seeds, [cache_dir] * len(config.seeds)))
    else:
        results = [run_seed(config, seed, cache_dir) for seed in config.seeds]

    rows = [row for r in results for row in r.rows]
    report = RunReport(
        config_hash=config.config_hash(),
        lam=config.lam,
        rows=rows,
        aggregates=aggregate(rows),
        originals=[r.original for r in results],
        timings=[t for r in results for t in r.timings],
    )
    write_report(report, out_dir)
    _write_training_log(out_dir / "training_log.csv", [e for r in results for e in r.training_log])
    return report


def load_report(run_dir):
    path = Path(run_dir) / "report.json"
    if not path.exists():
        raise ConfigurationError(f"no report.json in {run_dir}")
    data = json.loads(path.read_text())
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ConfigurationError(f"unsupported report schema {data.get('schema_version')}")
    return data
