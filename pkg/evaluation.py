"""
Utility, MIA-based forgetting score and NoMUS for a model against a bundle.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch

from cohort_data import batch_iterator
from errors import ContractError
from substrate import accuracy, cross_entropy, forward

logger = logging.getLogger(__name__)

MIA_ITERATIONS = 500
MIA_STEP = 1.0
DEFAULT_LAMBDA = 0.5


@dataclass
class MIAResult:
    forget_losses: list
    unseen_losses: list
    weight: float
    bias: float
    accuracy: float
    forget_prior: float


@dataclass
class Metrics:
    utility: float
    forgetting: float
    nomus: float
    mia_accuracy: float
    lam: float = DEFAULT_LAMBDA

    def to_dict(self):
        return {
            "utility": self.utility,
            "forgetting": self.forgetting,
            "nomus": self.nomus,
            "mia_accuracy": self.mia_accuracy,
            "lambda": self.lam,
        }


def collect_losses(model, records, batch_size=256):
    """Per-sample cross-entropy, in record order."""
    if not records:
        raise ContractError("collect_losses needs at least one record")
    losses = []
    with torch.no_grad():
        for batch in batch_iterator(records, batch_size):
            logits = forward(model, batch.images)
            losses.extend(cross_entropy(logits, batch.labels, reduction="none").tolist())
    return losses


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _refit_bias(scores, y):
    """Bias b maximizing the accuracy of `scores + b >= 0` on (scores, y).

    Cuts only fall between distinct scores; among equally good cuts the one
    labelling the fewest samples as forget wins.
    """
    order = np.argsort(-scores, kind="stable")
    ranked, labels = scores[order], y[order]
    n = len(ranked)
    # predicting the k highest scores as forget
    true_pos = np.concatenate([[0.0], np.cumsum(labels)])
    false_pos = np.concatenate([[0.0], np.cumsum(1.0 - labels)])
    correct = true_pos + (n - labels.sum()) - false_pos
    valid = np.ones(n + 1, dtype=bool)
    valid[1:n] = ranked[:-1] > ranked[1:]
    k = int(np.argmax(np.where(valid, correct, -1.0)))
    if k == 0:
        bias = -(ranked[0] + 1.0)
    elif k == n:
        bias = -(ranked[-1] - 1.0)
    else:
        bias = -0.5 * (ranked[k - 1] + ranked[k])
    return float(bias), float(correct[k] / n)


def fit_mia(forget_losses, unseen_losses, iterations=MIA_ITERATIONS, step=MIA_STEP):
    """Single-feature logistic regression separating forget (1) from unseen (0).

    Deterministic full-batch gradient descent from zero init on losses
    standardized by the pooled mean/std. The fitted weight fixes the
    scale; the decision cut is then re-fit to the accuracy-maximizing one
    along it, in whichever orientation scores higher. Accuracy is measured
    on the same pooled data.
    """
    if not forget_losses or not unseen_losses:
        raise ContractError("fit_mia needs non-empty forget and unseen losses")
    x = np.asarray(list(forget_losses) + list(unseen_losses), dtype=np.float64)
    y = np.concatenate([np.ones(len(forget_losses)), np.zeros(len(unseen_losses))])
    prior = len(forget_losses) / len(x)

    std = x.std()
    if not np.isfinite(std) or std == 0.0:
        logger.warning("all MIA losses identical; reporting the majority-class rate")
        return MIAResult(list(forget_losses), list(unseen_losses), 0.0, 0.0, max(prior, 1 - prior), prior)

    z = (x - x.mean()) / std
    w, b = 0.0, 0.0
    for _ in range(iterations):
        residual = _sigmoid(w * z + b) - y
        w -= step * float(np.mean(residual * z))
        b -= step * float(np.mean(residual))

    b, acc = _refit_bias(w * z, y)
    # outliers can flip the fitted direction against the bulk of the data
    flipped_b, flipped_acc = _refit_bias(-w * z, y)
    if flipped_acc > acc:
        w, b, acc = -w, flipped_b, flipped_acc
    return MIAResult(list(forget_losses), list(unseen_losses), w, b, acc, prior)


def forgetting_score(mia_accuracy):
    """F = |M - 0.5|; 0 when forget and unseen are indistinguishable."""
    return abs(mia_accuracy - 0.5)


def nomus(utility, forgetting, lam=DEFAULT_LAMBDA):
    """U * lambda + (1 - 2F) * (1 - lambda)."""
    return utility * lam + (1.0 - 2.0 * forgetting) * (1.0 - lam)


def evaluate(model, bundle, lam=DEFAULT_LAMBDA):
    """Utility on test, MIA forgetting on forget vs unseen, and NoMUS."""
    utility = accuracy(model, bundle.test)
    mia = fit_mia(collect_losses(model, bundle.forget), collect_losses(model, bundle.unseen))
    forgetting = forgetting_score(mia.accuracy)
    return Metrics(
        utility=utility,
        forgetting=forgetting,
        nomus=nomus(utility, forgetting, lam),
        mia_accuracy=mia.accuracy,
        lam=lam,
    )
