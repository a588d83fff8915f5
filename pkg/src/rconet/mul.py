"""Multi-expert uncertainty-aware classification head.

Each expert is a dropout mask over the mixed moment features followed by one
dense classifier shared by all experts. Training resamples the masks every
iteration; inference uses a frozen set. Uncertainty is the population
variance of the per-expert losses.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericWarning
from .layers import Dense, DropoutMask, dropout
from .tensor import Tensor

RATE_CYCLE = (0.1, 0.3, 0.5)
PROB_FLOOR = 1e-12
DEFAULT_CLASS_WEIGHTS = (1.0, 1.0, 20.0)


@dataclass(frozen=True)
class ClassWeights:
    values: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals or any(v <= 0 for v in vals):
            raise ContractError(f"class weights must all be positive, got {vals}")
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.values)

    def array(self):
        return np.asarray(self.values)


def one_hot(labels, n_classes):
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def weighted_ce(pred, y, lam):
    """-(1/C) * sum_c lam_c * y_c * log(pred_c), per sample.

    ``pred`` is (C,) or (N, C) probabilities, ``y`` matching one-hot rows.
    Probabilities below 1e-12 are clamped there with a NumericWarning.
    """
    pred = T.tensor(pred)
    y = np.asarray(y, dtype=np.float64)
    if pred.shape != y.shape:
        raise ContractError(f"prediction {pred.shape} and target {y.shape} differ")
    lam = lam if isinstance(lam, ClassWeights) else ClassWeights(tuple(lam))
    c = pred.shape[-1]
    if len(lam) != c:
        raise ContractError(f"{len(lam)} class weights for {c} classes")
    if np.any((pred.data < PROB_FLOOR) & (y > 0)):
        warnings.warn("predicted probability of the true class clamped at 1e-12", NumericWarning,
                      stacklevel=2)
    logp = T.log(T.clip_min(pred, PROB_FLOOR))
    coef = Tensor(-(y * lam.array()) / c)
    return T.sum(T.mul(logp, coef), axis=-1)


def uncertainty_sigma(per_expert):
    """Population variance of the expert losses (divisor s)."""
    vals = np.asarray([float(v.item()) if isinstance(v, Tensor) else float(v) for v in per_expert])
    if vals.size == 0:
        raise ContractError("need at least one expert loss")
    return float(np.mean((vals - vals.mean()) ** 2))


@dataclass
class UncertaintyReport:
    sigma: np.ndarray  # per sample (inference) or scalar (training)
    per_expert_losses: np.ndarray
    sigma_predictive: np.ndarray | None = None


class ExpertEnsemble:
    """s dropout experts over one shared classifier (in_dim -> hidden -> C)."""

    def __init__(self, rng, in_dim, n_classes, s=4, hidden=64, rates=None):
        if s < 1:
            raise ContractError("need at least one expert")
        self.in_dim = in_dim
        self.n_classes = n_classes
        self.rates = tuple(rates) if rates is not None else tuple(RATE_CYCLE[j % 3] for j in range(s))
        if len(self.rates) != s:
            raise ContractError(f"{len(self.rates)} rates for {s} experts")
        self.fc1 = Dense.init(rng, in_dim, hidden)
        self.fc2 = Dense.init(rng, hidden, n_classes, gain=1.0)
        self.train_masks = [DropoutMask.sample(rng, (in_dim,), r) for r in self.rates]
        self.frozen_masks = [DropoutMask.sample(rng, (in_dim,), r, frozen=True) for r in self.rates]

    @property
    def s(self):
        return len(self.rates)

    def params(self):
        return {"fc1.weight": self.fc1.weight, "fc1.bias": self.fc1.bias,
                "fc2.weight": self.fc2.weight, "fc2.bias": self.fc2.bias}

    def resample(self, rng):
        for m in self.train_masks:
            m.resample(rng)

    def masks(self, mode):
        if mode == "train":
            return self.train_masks
        if mode == "eval":
            return self.frozen_masks
        raise ContractError(f"unknown mode {mode!r}")

    def classify(self, features):
        """Shared classifier logits, no dropout."""
        return self.fc2(T.relu(self.fc1(features)))

    def expert_probs(self, features, j, mode="train"):
        if not 0 <= j < self.s:
            raise ContractError(f"expert index {j} outside 0..{self.s - 1}")
        mask = self.masks(mode)[j]
        return T.softmax(self.classify(dropout(features, mask, mode)), axis=-1)


def _flat(features):
    f = features.mixed if hasattr(features, "mixed") else T.tensor(features)
    return f if f.ndim == 2 else T.reshape(f, (f.shape[0], -1))


def expert_loss(ens, j, features, labels, lam, mode="train"):
    """Mean weighted cross-entropy of expert ``j`` (0-based) over the batch."""
    f = _flat(features)
    probs = ens.expert_probs(f, j, mode)
    return T.mean(weighted_ce(probs, one_hot(labels, ens.n_classes), lam))


def ensemble_loss(ens, features, labels, lam, mode="train"):
    """L_M = mean of the expert losses; also returns the per-expert tensors."""
    f = _flat(features)
    y = one_hot(labels, ens.n_classes)
    per_expert = [T.mean(weighted_ce(ens.expert_probs(f, j, mode), y, lam)) for j in range(ens.s)]
    total = per_expert[0]
    for loss in per_expert[1:]:
        total = T.add(total, loss)
    return T.div(total, float(ens.s)), per_expert


def _all_expert_probs(ens, features):
    f = _flat(features)
    return np.stack([ens.expert_probs(f, j, "eval").data for j in range(ens.s)])  # (s, N, C)


def ensemble_predict(ens, features):
    """Mean of the experts' softmax outputs under the frozen masks, and argmax."""
    probs = _all_expert_probs(ens, features).mean(axis=0)
    return probs, probs.argmax(axis=1)


def inference_uncertainty(ens, features, lam):
    """Per-sample sigma using the ensemble argmax as pseudo-label.

    ``sigma_predictive`` is the class-averaged variance of the experts'
    probability vectors, emitted alongside for comparison.
    """
    lam = lam if isinstance(lam, ClassWeights) else ClassWeights(tuple(lam))
    p = _all_expert_probs(ens, features)
    mean = p.mean(axis=0)
    pseudo = mean.argmax(axis=1)
    n = mean.shape[0]
    c = mean.shape[1]
    true_p = np.maximum(p[:, np.arange(n), pseudo], PROB_FLOOR)  # (s, N)
    losses = -(lam.array()[pseudo] * np.log(true_p)) / c
    sigma = ((losses - losses.mean(axis=0)) ** 2).mean(axis=0)
    predictive = ((p - mean) ** 2).mean(axis=0).mean(axis=1)
    return UncertaintyReport(sigma, losses.T, predictive)
