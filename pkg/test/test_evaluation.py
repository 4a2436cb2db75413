import copy
import logging
import math

import numpy as np
import pytest
import torch

from errors import ContractError
from evaluation import (
    DEFAULT_LAMBDA,
    Metrics,
    collect_losses,
    evaluate,
    fit_mia,
    forgetting_score,
    nomus,
)
from substrate import accuracy, forward


def best_threshold_accuracy(forget, unseen):
    """Exhaustive single-threshold classifier accuracy, either direction."""
    x = np.concatenate([forget, unseen])
    y = np.concatenate([np.ones(len(forget)), np.zeros(len(unseen))])
    order = np.argsort(x, kind="stable")
    x, y = x[order], y[order]
    n = len(x)
    # predict "forget" for the first i points (low loss), "unseen" for the rest
    forget_below = np.concatenate([[0], np.cumsum(y)])
    unseen_above = (n - len(forget)) - np.concatenate([[0], np.cumsum(1 - y)])
    low_is_forget = (forget_below + unseen_above) / n
    # only cut between distinct values
    valid = np.concatenate([[True], x[1:] != x[:-1], [True]])
    return float(max(low_is_forget[valid].max(), (1 - low_is_forget[valid]).max()))


class TestNomus:
    def test_reproduces_reported_rows(self):
        assert nomus(0.5925, 0.0061) == pytest.approx(0.79015, abs=1e-4)
        assert nomus(0.5913, 0.1852) == pytest.approx(0.61045, abs=1e-4)

    def test_perfect_model(self):
        assert nomus(1.0, 0.0) == 1.0

    def test_lambda_weights(self):
        assert nomus(0.6, 0.1, lam=1.0) == pytest.approx(0.6)
        assert nomus(0.6, 0.1, lam=0.0) == pytest.approx(0.8)

    def test_monotone(self):
        rng = np.random.default_rng(0)
        for u, f in zip(rng.uniform(0, 1, 200), rng.uniform(0, 0.5, 200)):
            assert nomus(min(u + 0.01, 1.0), f) >= nomus(u, f)
            assert nomus(u, min(f + 0.01, 0.5)) <= nomus(u, f)
            assert 0.0 <= nomus(u, f) <= 1.0


class TestForgettingScore:
    @pytest.mark.parametrize("m, expected", [(0.5, 0.0), (1.0, 0.5), (0.473, 0.027), (0.0, 0.5)])
    def test_values(self, m, expected):
        assert forgetting_score(m) == pytest.approx(expected)


class TestFitMia:
    def test_separated_distributions(self):
        rng = np.random.default_rng(1)
        result = fit_mia(rng.uniform(0.0, 0.1, 100).tolist(), rng.uniform(2.0, 3.0, 120).tolist())
        assert result.accuracy >= 0.99
        assert result.weight < 0  # low loss means forget

    def test_identical_lists(self):
        losses = np.random.default_rng(2).exponential(1.0, 300).tolist()
        result = fit_mia(losses, losses)
        assert result.accuracy == pytest.approx(0.5, abs=0.02)
        assert result.forget_prior == 0.5

    def test_all_losses_equal_reports_majority_rate(self, caplog):
        with caplog.at_level(logging.WARNING):
            result = fit_mia([1.0] * 3, [1.0] * 5)
        assert result.accuracy == pytest.approx(5 / 8)
        assert "identical" in caplog.text

    def test_matches_exhaustive_threshold_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n_forget, n_unseen = rng.integers(2000, 4000, size=2)
            gap = rng.uniform(0.5, 3.0)
            scale = rng.uniform(0.1, 5.0)
            forget = rng.normal(0.0, scale, n_forget)
            unseen = rng.normal(gap * scale, scale, n_unseen)
            result = fit_mia(forget.tolist(), unseen.tolist())
            assert abs(result.accuracy - best_threshold_accuracy(forget, unseen)) <= 0.02

    @pytest.mark.parametrize("outliers", [0, 3])
    def test_matches_oracle_on_skewed_losses(self, outliers):
        # loss-shaped sets at benchmark size: exponential, 50-200 points, either side lower
        rng = np.random.default_rng(7 + outliers)
        for i in range(50):
            n_forget, n_unseen = rng.integers(50, 201, size=2)
            low, high = 0.3, 0.3 * rng.uniform(1.5, 4.0)
            if i % 2:
                low, high = high, low
            forget = rng.exponential(low, n_forget)
            unseen = np.concatenate([rng.exponential(high, n_unseen), rng.uniform(20.0, 50.0, outliers)])
            result = fit_mia(forget.tolist(), unseen.tolist())
            assert abs(result.accuracy - best_threshold_accuracy(forget, unseen)) <= 0.02

    def test_bias_reproduces_reported_accuracy(self):
        rng = np.random.default_rng(8)
        forget = rng.exponential(0.2, 120)
        unseen = np.concatenate([rng.exponential(0.6, 90), [25.0, 40.0]])
        result = fit_mia(forget.tolist(), unseen.tolist())
        x = np.concatenate([forget, unseen])
        z = (x - x.mean()) / x.std()
        predicted = result.weight * z + result.bias >= 0
        truth = np.arange(len(x)) < len(forget)
        assert np.mean(predicted == truth) == pytest.approx(result.accuracy)

    def test_affine_rescaling(self):
        rng = np.random.default_rng(4)
        forget = rng.exponential(0.5, 400)
        unseen = rng.exponential(1.0, 400)
        base = fit_mia(forget.tolist(), unseen.tolist()).accuracy
        scaled = fit_mia((3 * forget + 1).tolist(), (3 * unseen + 1).tolist()).accuracy
        assert scaled == pytest.approx(base, abs=0.02)

    def test_deterministic(self):
        forget, unseen = [0.1, 0.4, 0.2, 0.9], [1.1, 0.3, 2.0]
        a, b = fit_mia(forget, unseen), fit_mia(forget, unseen)
        assert (a.weight, a.bias, a.accuracy) == (b.weight, b.bias, b.accuracy)

    def test_empty(self):
        with pytest.raises(ContractError):
            fit_mia([], [1.0])


class TestCollectLosses:
    def test_uniform_logits(self, tiny_model, tiny_bundle):
        model = copy.deepcopy(tiny_model)
        with torch.no_grad():
            model.fc2.weight.zero_()
            model.fc2.bias.zero_()
        losses = collect_losses(model, tiny_bundle.forget)
        assert losses == pytest.approx([math.log(tiny_bundle.num_classes)] * len(tiny_bundle.forget), abs=1e-6)

    def test_confident_correct_model(self, tiny_model, tiny_bundle):
        model = copy.deepcopy(tiny_model)
        records = tiny_bundle.forget[:4]
        with torch.no_grad():
            model.fc2.weight.zero_()
            model.fc2.bias.fill_(-50.0)
            model.fc2.bias[records[0].label] = 50.0
        same_label = [r for r in tiny_bundle.forget if r.label == records[0].label]
        assert max(collect_losses(model, same_label)) < 1e-6

    def test_matches_softmax_oracle(self, tiny_model, tiny_bundle):
        records = tiny_bundle.unseen
        with torch.no_grad():
            logits = torch.cat([forward(tiny_model, r.image[None]) for r in records]).double().numpy()
        expected = [
            float(np.log(np.exp(row - row.max()).sum()) + row.max() - row[r.label])
            for row, r in zip(logits, records)
        ]
        assert collect_losses(tiny_model, records) == pytest.approx(expected, abs=1e-4)

    def test_order_preserved(self, tiny_model, tiny_bundle):
        records = tiny_bundle.unseen
        assert collect_losses(tiny_model, records[::-1]) == pytest.approx(collect_losses(tiny_model, records)[::-1], abs=1e-5)

    def test_empty(self, tiny_model):
        with pytest.raises(ContractError):
            collect_losses(tiny_model, [])


class TestEvaluate:
    def test_composition(self, tiny_model, tiny_bundle):
        metrics = evaluate(tiny_model, tiny_bundle)
        mia = fit_mia(collect_losses(tiny_model, tiny_bundle.forget), collect_losses(tiny_model, tiny_bundle.unseen))
        assert metrics.utility == accuracy(tiny_model, tiny_bundle.test)
        assert metrics.mia_accuracy == mia.accuracy
        assert metrics.forgetting == abs(mia.accuracy - 0.5)
        assert metrics.nomus == nomus(metrics.utility, metrics.forgetting, DEFAULT_LAMBDA)
        assert 0.0 <= metrics.forgetting <= 0.5

    def test_deterministic(self, tiny_model, tiny_bundle):
        assert evaluate(tiny_model, tiny_bundle) == evaluate(tiny_model, tiny_bundle)

    def test_report_fields(self):
        metrics = Metrics(utility=0.9, forgetting=0.0, nomus=0.95, mia_accuracy=0.5)
        assert metrics.to_dict() == {
            "utility": 0.9,
            "forgetting": 0.0,
            "nomus": 0.95,
            "mia_accuracy": 0.5,
            "lambda": 0.5,
        }

    def test_ideal_forgetting(self):
        # F = 0 leaves NoMUS = (U + 1) / 2
        assert nomus(0.7, forgetting_score(0.5)) == pytest.approx(0.85)
