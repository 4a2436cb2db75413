from dataclasses import asdict, replace

import pytest
import torch

from attack import attack_forget_set
from conftest import FAST_FINETUNE
from errors import ConfigurationError
from evaluation import collect_losses
from masking import build_mask, gradient_discrepancy_scores, random_mask, reset_filters
from substrate import TrainConfig, accuracy, build_model, forward, model_checksum, sgd_train
from unlearn import (
    METHODS,
    MethodParams,
    UnlearnRequest,
    adv_neg_grad,
    aru,
    cf_k,
    finetune,
    masked_variant,
    neg_grad,
    replay,
    retrain_scratch,
    run_method,
)

FAST_PARAMS = MethodParams(
    finetune=FAST_FINETUNE,
    retrain=TrainConfig(learning_rate=0.01, batch_size=16, epochs=1),
    noise_steps=1,
)


@pytest.fixture(scope="module")
def memorized_model(tiny_bundle):
    """Trained until the tiny train split is fit."""
    model = build_model(tiny_bundle.num_classes, tiny_bundle.image_shape, init_seed=0)
    trained, _ = sgd_train(model, tiny_bundle.train, TrainConfig(learning_rate=0.01, batch_size=8, epochs=15))
    return trained


def _mean_forget_loss(model, bundle):
    losses = collect_losses(model, bundle.forget)
    return sum(losses) / len(losses)


class TestAru:
    def test_zero_ratio_equals_finetune(self, tiny_model, tiny_bundle):
        degenerate = aru(tiny_model, tiny_bundle, ratio=0.0, ft_cfg=FAST_FINETUNE, seed=0)
        plain = finetune(tiny_model, tiny_bundle, FAST_FINETUNE)
        assert degenerate.mask.count() == 0
        assert degenerate.provenance.model_checksum == plain.provenance.model_checksum

    def test_mask_checksum_matches_rebuilt_mask(self, tiny_model, tiny_bundle):
        result = aru(tiny_model, tiny_bundle, ft_cfg=FAST_FINETUNE, seed=1)
        pairs = attack_forget_set(tiny_model, tiny_bundle)
        rebuilt = build_mask(gradient_discrepancy_scores(tiny_model, tiny_bundle.forget, pairs), 0.5)
        assert result.provenance.mask_checksum == rebuilt.checksum()

    def test_forget_data_only_in_attack_and_scoring(self, tiny_model, tiny_bundle):
        result = aru(tiny_model, tiny_bundle, ft_cfg=FAST_FINETUNE)
        assert result.audit.stages_touching("forget") == ["attack", "scoring"]
        assert result.audit.count("forget", "finetune") == 0
        assert result.audit.count("retain", "finetune") == 2 * len(tiny_bundle.retain)

    def test_original_model_untouched(self, tiny_model, tiny_bundle):
        before = model_checksum(tiny_model)
        aru(tiny_model, tiny_bundle, ft_cfg=FAST_FINETUNE)
        assert model_checksum(tiny_model) == before

    def test_empty_retain(self, tiny_model, tiny_bundle):
        with pytest.raises(ConfigurationError):
            aru(tiny_model, replace(tiny_bundle, retain=[]), ft_cfg=FAST_FINETUNE)


class TestBaselines:
    def test_retrain_never_sees_forget(self, tiny_bundle):
        result = retrain_scratch(tiny_bundle, FAST_PARAMS.retrain, seed=0)
        assert result.audit.count("forget") == 0
        assert result.audit.stages_touching("retain") == ["retrain"]

    def test_retrain_is_deterministic(self, tiny_bundle):
        a = retrain_scratch(tiny_bundle, FAST_PARAMS.retrain, seed=2)
        b = retrain_scratch(tiny_bundle, FAST_PARAMS.retrain, seed=2)
        assert a.provenance.model_checksum == b.provenance.model_checksum

    def test_finetune_zero_epochs(self, tiny_model, tiny_bundle):
        result = finetune(tiny_model, tiny_bundle, TrainConfig(epochs=0))
        assert result.provenance.model_checksum == model_checksum(tiny_model)

    def test_finetune_never_sees_forget(self, tiny_model, tiny_bundle):
        assert finetune(tiny_model, tiny_bundle, FAST_FINETUNE).audit.count("forget") == 0

    def test_finetune_keeps_utility(self, tiny_model, tiny_bundle):
        tuned = finetune(tiny_model, tiny_bundle, FAST_FINETUNE).model
        # at most two of the 16 test predictions may flip
        assert accuracy(tuned, tiny_bundle.test) >= accuracy(tiny_model, tiny_bundle.test) - 2 / len(tiny_bundle.test)

    def test_neg_grad_step_raises_forget_loss(self, tiny_model, tiny_bundle):
        cfg = TrainConfig(learning_rate=1e-3, momentum=0.0, batch_size=len(tiny_bundle.forget), epochs=1)
        result = neg_grad(tiny_model, tiny_bundle, cfg)
        assert _mean_forget_loss(result.model, tiny_bundle) > _mean_forget_loss(tiny_model, tiny_bundle)
        assert result.audit.stages_touching("forget") == ["ascent"]

    def test_neg_grad_epoch_lowers_forget_accuracy(self, memorized_model, tiny_bundle):
        cfg = TrainConfig(learning_rate=0.01, momentum=0.9, batch_size=1, epochs=1)
        result = neg_grad(memorized_model, tiny_bundle, cfg)
        assert accuracy(result.model, tiny_bundle.forget) < accuracy(memorized_model, tiny_bundle.forget)

    def test_neg_grad_zero_epochs(self, tiny_model, tiny_bundle):
        result = neg_grad(tiny_model, tiny_bundle, TrainConfig(epochs=0))
        assert result.provenance.model_checksum == model_checksum(tiny_model)

    def test_adv_neg_grad_without_forget_weight_is_finetune(self, tiny_model, tiny_bundle):
        a = adv_neg_grad(tiny_model, tiny_bundle, FAST_FINETUNE, forget_weight=0.0)
        b = finetune(tiny_model, tiny_bundle, FAST_FINETUNE)
        assert a.provenance.model_checksum == b.provenance.model_checksum
        assert a.audit.count("forget") == 0

    def test_adv_neg_grad_step_log_decomposes(self, tiny_model, tiny_bundle):
        result = adv_neg_grad(tiny_model, tiny_bundle, FAST_FINETUNE)
        steps = result.provenance.step_logs
        assert len(steps) == FAST_FINETUNE.epochs * 2  # 32 retain / batch 16
        for step in steps:
            assert step["aux"] < 0
            assert step["objective"] == pytest.approx(step["loss"] + step["aux"], abs=1e-5)

    def test_adv_neg_grad_cycles_forget_batches(self, tiny_model, tiny_bundle):
        cfg = replace(FAST_FINETUNE, batch_size=8)
        result = adv_neg_grad(tiny_model, tiny_bundle, cfg)
        # 4 retain batches per epoch against a forget set of 2 batches
        assert result.audit.count("forget", "ascent") == cfg.epochs * 4 * 8
        assert result.audit.count("forget", "finetune") == 0

    def test_cf_k_with_every_layer_equals_finetune(self, tiny_model, tiny_bundle):
        a = cf_k(tiny_model, tiny_bundle, k=len(tiny_model.layer_ids), cfg=FAST_FINETUNE)
        b = finetune(tiny_model, tiny_bundle, FAST_FINETUNE)
        assert a.provenance.model_checksum == b.provenance.model_checksum

    def test_cf_k_freezes_earlier_layers(self, tiny_model, tiny_bundle):
        result = cf_k(tiny_model, tiny_bundle, k=3, cfg=FAST_FINETUNE)
        assert result.audit.count("forget") == 0
        for layer_id in ("conv1", "conv2", "conv3"):
            assert torch.equal(getattr(tiny_model, layer_id).weight, getattr(result.model, layer_id).weight)
        assert not torch.equal(tiny_model.fc2.weight, result.model.fc2.weight)

    @pytest.mark.parametrize("k", [0, 7])
    def test_cf_k_range(self, tiny_model, tiny_bundle, k):
        with pytest.raises(ConfigurationError):
            cf_k(tiny_model, tiny_bundle, k=k, cfg=FAST_FINETUNE)


class TestMaskedVariant:
    def test_random_strategy_uses_random_mask(self, tiny_model, tiny_bundle):
        result = masked_variant(tiny_model, tiny_bundle, "random", 0.5, FAST_FINETUNE, seed=3)
        assert result.mask.checksum() == random_mask(tiny_model, 0.5, 3).checksum()
        assert result.audit.count("forget") == 0

    @pytest.mark.parametrize("strategy", ["random", "top_gradient", "random_noise"])
    def test_cardinality(self, tiny_model, tiny_bundle, strategy):
        result = masked_variant(tiny_model, tiny_bundle, strategy, 0.5, FAST_FINETUNE, noise_steps=1)
        for layer_id in tiny_model.conv_layer_ids:
            assert result.mask.count(layer_id) == getattr(tiny_model, layer_id).out_channels // 2
        assert result.audit.count("forget", "finetune") == 0

    def test_differs_from_aru_only_in_mask(self, tiny_model, tiny_bundle):
        # both are reset(mask) followed by the same retain fine-tune
        attacked = aru(tiny_model, tiny_bundle, ft_cfg=FAST_FINETUNE, seed=1)
        ablated = masked_variant(tiny_model, tiny_bundle, "random", 0.5, FAST_FINETUNE, seed=1)
        assert attacked.mask.checksum() != ablated.mask.checksum()
        for result in (attacked, ablated):
            rebuilt, _ = sgd_train(reset_filters(tiny_model, result.mask, 1), tiny_bundle.retain, FAST_FINETUNE)
            assert model_checksum(rebuilt) == result.provenance.model_checksum

    def test_unknown_strategy(self, tiny_model, tiny_bundle):
        with pytest.raises(ConfigurationError):
            masked_variant(tiny_model, tiny_bundle, "fisher")


class TestRegistry:
    def test_method_ids(self):
        assert sorted(METHODS) == sorted([
            "aru", "retrain", "finetune", "neggrad", "advneggrad",
            "cf_k", "random_mask", "top_grad_mask", "random_noise_mask",
        ])

    def test_unknown_method(self, tiny_model, tiny_bundle):
        with pytest.raises(ConfigurationError):
            UnlearnRequest("scrub", tiny_model, tiny_bundle)

    def test_invalid_params(self):
        with pytest.raises(ConfigurationError):
            MethodParams(ratio=1.0)
        with pytest.raises(ConfigurationError):
            MethodParams(k=0)

    @pytest.mark.parametrize("method", sorted(METHODS))
    def test_every_method_runs(self, tiny_model, tiny_bundle, method):
        result = run_method(UnlearnRequest(method, tiny_model, tiny_bundle, FAST_PARAMS, seed=1))
        assert result.provenance.method == method
        assert result.provenance.seed == 1
        assert result.provenance.params["method_params"] == asdict(FAST_PARAMS)
        logits = forward(result.model, torch.stack([r.image for r in tiny_bundle.test]))
        assert torch.isfinite(logits).all()

    def test_ascent_epochs_override(self, tiny_model, tiny_bundle):
        params = replace(FAST_PARAMS, ascent_epochs=0)
        result = run_method(UnlearnRequest("neggrad", tiny_model, tiny_bundle, params))
        assert result.provenance.model_checksum == model_checksum(tiny_model)

    @pytest.mark.parametrize("method", ["aru", "advneggrad", "random_noise_mask"])
    def test_replay_reproduces_checksum(self, tiny_model, tiny_bundle, method):
        result = run_method(UnlearnRequest(method, tiny_model, tiny_bundle, FAST_PARAMS, seed=4))
        again = replay(result.provenance, tiny_model, tiny_bundle)
        assert again.provenance.model_checksum == result.provenance.model_checksum
        assert again.provenance.mask_checksum == result.provenance.mask_checksum
