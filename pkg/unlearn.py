"""
Unlearning methods behind one interface: Attack-and-Reset (attack, reset,
fine-tune), the fine-tuning / gradient-ascent baselines, retraining from
scratch and the masking ablations.
"""

import itertools
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

from attack import AdvConfig, attack_forget_set
from cohort_data import AccessAudit, batch_iterator
from errors import ConfigurationError
from masking import (
    FilterMask,
    build_mask,
    gradient_discrepancy_scores,
    random_mask,
    random_noise_mask,
    reset_filters,
    top_gradient_mask,
)
from substrate import (
    FINETUNE_TRAIN,
    ORIGINAL_TRAIN,
    TrainConfig,
    build_model,
    cross_entropy,
    forward,
    model_checksum,
    sgd_train,
)

logger = logging.getLogger(__name__)

MASK_STRATEGIES = ("random", "top_gradient", "random_noise")
DEFAULT_CF_K = 3


@dataclass(frozen=True)
class MethodParams:
    ratio: float = 0.5
    k: int = DEFAULT_CF_K
    adv: AdvConfig = AdvConfig()
    finetune: TrainConfig = FINETUNE_TRAIN
    retrain: TrainConfig = ORIGINAL_TRAIN
    forget_weight: float = 1.0
    ascent_epochs: Optional[int] = None
    noise_steps: Optional[int] = None

    def __post_init__(self):
        if not 0 <= self.ratio < 1:
            raise ConfigurationError(f"ratio must lie in [0, 1), got {self.ratio}")
        if self.k < 1:
            raise ConfigurationError(f"k must be >= 1, got {self.k}")
        if self.forget_weight < 0:
            raise ConfigurationError("forget_weight must be >= 0")
        if self.ascent_epochs is not None and self.ascent_epochs < 0:
            raise ConfigurationError("ascent_epochs must be >= 0")

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if "adv" in data:
            data["adv"] = AdvConfig(**data["adv"])
        for name in ("finetune", "retrain"):
            if name in data:
                data[name] = TrainConfig(**data[name])
        return cls(**data)


@dataclass
class Provenance:
    method: str
    seed: int
    params: dict
    wall_clock_s: float
    model_checksum: str
    epoch_logs: list = field(default_factory=list)
    step_logs: list = field(default_factory=list)
    audit: dict = field(default_factory=dict)
    mask_checksum: Optional[str] = None


@dataclass
class UnlearnedModel:
    model: object
    provenance: Provenance
    audit: AccessAudit
    mask: Optional[FilterMask] = None


def _finish(method, model, seed, params, started, audit, epoch_logs=(), step_logs=(), mask=None):
    result = UnlearnedModel(
        model=model,
        provenance=Provenance(
            method=method,
            seed=seed,
            params=params,
            wall_clock_s=time.perf_counter() - started,
            model_checksum=model_checksum(model),
            epoch_logs=[asdict(e) for e in epoch_logs],
            step_logs=list(step_logs),
            audit=audit.as_dict(),
            mask_checksum=None if mask is None else mask.checksum(),
        ),
        audit=audit,
        mask=mask,
    )
    logger.info("%s (seed %d) finished in %.2fs", method, seed, result.provenance.wall_clock_s)
    return result


def _require(records, name):
    if not records:
        raise ConfigurationError(f"{name} set is empty")


def _reset_and_finetune(model, bundle, mask, ft_cfg, seed, audit):
    reset = reset_filters(model, mask, seed)
    return sgd_train(reset, bundle.retain, ft_cfg, audit=audit, stage="finetune")


def aru(model, bundle, adv_cfg=AdvConfig(), ratio=0.5, ft_cfg=FINETUNE_TRAIN, seed=0, cache=None):
    """Attack the forget set, reset the filters its noise singles out, fine-tune on retain."""
    _require(bundle.retain, "retain")
    started = time.perf_counter()
    audit = AccessAudit()
    pairs = attack_forget_set(model, bundle, adv_cfg, cache=cache, audit=audit)
    scores = gradient_discrepancy_scores(model, bundle.forget, pairs, audit=audit)
    mask = build_mask(scores, ratio)
    tuned, log = _reset_and_finetune(model, bundle, mask, ft_cfg, seed, audit)
    params = {"adv": asdict(adv_cfg), "ratio": ratio, "finetune": asdict(ft_cfg)}
    return _finish("aru", tuned, seed, params, started, audit, log, mask=mask)


def retrain_scratch(bundle, train_cfg=ORIGINAL_TRAIN, seed=0):
    _require(bundle.retain, "retain")
    started = time.perf_counter()
    audit = AccessAudit()
    fresh = build_model(bundle.num_classes, bundle.image_shape, seed)
    trained, log = sgd_train(fresh, bundle.retain, train_cfg, audit=audit, stage="retrain")
    return _finish("retrain", trained, seed, {"retrain": asdict(train_cfg)}, started, audit, log)


def finetune(model, bundle, ft_cfg=FINETUNE_TRAIN):
    _require(bundle.retain, "retain")
    started = time.perf_counter()
    audit = AccessAudit()
    tuned, log = sgd_train(model, bundle.retain, ft_cfg, audit=audit, stage="finetune")
    return _finish("finetune", tuned, ft_cfg.seed, {"finetune": asdict(ft_cfg)}, started, audit, log)


def neg_grad(model, bundle, cfg=FINETUNE_TRAIN):
    """Gradient ascent on the forget set."""
    _require(bundle.forget, "forget")
    started = time.perf_counter()
    audit = AccessAudit()
    tuned, log = sgd_train(model, bundle.forget, cfg, ascent=True, audit=audit, stage="ascent")
    return _finish("neggrad", tuned, cfg.seed, {"finetune": asdict(cfg)}, started, audit, log)


def _cycled_batches(records, batch_size, seed):
    for epoch in itertools.count():
        yield from batch_iterator(records, batch_size, seed, epoch)


def adv_neg_grad(model, bundle, cfg=FINETUNE_TRAIN, forget_weight=1.0):
    """Per step: CE(retain batch) - forget_weight * CE(forget batch).

    Forget batches are cycled (reshuffled each pass) when the forget set runs
    out before the retain epoch ends.
    """
    _require(bundle.retain, "retain")
    _require(bundle.forget, "forget")
    started = time.perf_counter()
    audit = AccessAudit()
    step_log = []

    aux = None
    if forget_weight > 0:
        forget_stream = _cycled_batches(bundle.forget, cfg.batch_size, cfg.seed)

        def aux(current):
            batch = next(forget_stream)
            audit.record("ascent", batch.records)
            return -forget_weight * cross_entropy(forward(current, batch.images), batch.labels)

    tuned, log = sgd_train(
        model, bundle.retain, cfg, aux_loss=aux, audit=audit, stage="finetune", step_log=step_log
    )
    params = {"finetune": asdict(cfg), "forget_weight": forget_weight}
    return _finish("advneggrad", tuned, cfg.seed, params, started, audit, log, step_log)


def cf_k(model, bundle, k=DEFAULT_CF_K, cfg=FINETUNE_TRAIN):
    """Fine-tune only the last k parameterized layers on retain."""
    _require(bundle.retain, "retain")
    if not 1 <= k <= len(model.layer_ids):
        raise ConfigurationError(f"k must lie in [1, {len(model.layer_ids)}], got {k}")
    started = time.perf_counter()
    audit = AccessAudit()
    trainable = set(model.layer_ids[-k:])
    tuned, log = sgd_train(
        model, bundle.retain, cfg, trainable=trainable.__contains__, audit=audit, stage="finetune"
    )
    return _finish("cf_k", tuned, cfg.seed, {"k": k, "finetune": asdict(cfg)}, started, audit, log)


def masked_variant(model, bundle, strategy, ratio=0.5, ft_cfg=FINETUNE_TRAIN, seed=0, adv_cfg=AdvConfig(), noise_steps=None):
    """Reset filters chosen by an ablation strategy, then fine-tune on retain."""
    _require(bundle.retain, "retain")
    started = time.perf_counter()
    audit = AccessAudit()
    if strategy == "random":
        mask = random_mask(model, ratio, seed)
    elif strategy == "top_gradient":
        _require(bundle.forget, "forget")
        mask = top_gradient_mask(model, bundle.forget, ratio, audit=audit)
    elif strategy == "random_noise":
        _require(bundle.forget, "forget")
        mask = random_noise_mask(model, bundle.forget, adv_cfg, ratio, seed, steps=noise_steps, audit=audit)
    else:
        raise ConfigurationError(f"unknown mask strategy {strategy!r}; expected one of {MASK_STRATEGIES}")
    tuned, log = _reset_and_finetune(model, bundle, mask, ft_cfg, seed, audit)
    params = {"strategy": strategy, "ratio": ratio, "finetune": asdict(ft_cfg)}
    if strategy == "random_noise":
        params["adv"] = asdict(adv_cfg)
        params["noise_steps"] = noise_steps
    return _finish(f"{strategy}_mask", tuned, seed, params, started, audit, log, mask=mask)


@dataclass
class UnlearnRequest:
    method: str
    model: object
    bundle: object
    params: MethodParams = MethodParams()
    seed: int = 0
    cache: object = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(
                f"unknown method {self.method!r}; expected one of {sorted(METHODS)}"
            )


def _ascent_cfg(request):
    cfg = request.params.finetune.with_seed(request.seed)
    if request.params.ascent_epochs is not None:
        cfg = replace(cfg, epochs=request.params.ascent_epochs)
    return cfg


def _masked(strategy):
    def run(request):
        p = request.params
        return masked_variant(
            request.model, request.bundle, strategy, p.ratio,
            p.finetune.with_seed(request.seed), request.seed, p.adv, p.noise_steps,
        )
    return run


METHODS = {
    "aru": lambda r: aru(
        r.model, r.bundle, r.params.adv, r.params.ratio,
        r.params.finetune.with_seed(r.seed), r.seed, cache=r.cache,
    ),
    "retrain": lambda r: retrain_scratch(r.bundle, r.params.retrain.with_seed(r.seed), r.seed),
    "finetune": lambda r: finetune(r.model, r.bundle, r.params.finetune.with_seed(r.seed)),
    "neggrad": lambda r: neg_grad(r.model, r.bundle, _ascent_cfg(r)),
    "advneggrad": lambda r: adv_neg_grad(r.model, r.bundle, _ascent_cfg(r), r.params.forget_weight),
    "cf_k": lambda r: cf_k(r.model, r.bundle, r.params.k, r.params.finetune.with_seed(r.seed)),
    "random_mask": _masked("random"),
    "top_grad_mask": _masked("top_gradient"),
    "random_noise_mask": _masked("random_noise"),
}


def run_method(request: UnlearnRequest):
    result = METHODS[request.method](request)
    result.provenance.method = request.method
    result.provenance.params = {"method_params": asdict(request.params), **result.provenance.params}
    return result


def replay(provenance, model, bundle):
    """Re-run a method from its provenance echo."""
    params = MethodParams.from_dict(provenance.params["method_params"])
    return run_method(UnlearnRequest(provenance.method, model, bundle, params, provenance.seed))
