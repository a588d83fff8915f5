"""The full network: deformable encoder, mixed moment features, multi-expert
head, and the MI critic, tied together by L_total = L_M - alpha * L_I."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .layers import BatchNorm, Encoder, avg_pool2d
from .mhmf import MomentProjectorBank, mixed_moments
from .mi import ESTIMATORS, Discriminator, NegativeSampler, PairBatch, estimate
from .mul import ClassWeights, ExpertEnsemble, DEFAULT_CLASS_WEIGHTS, ensemble_loss, uncertainty_sigma

SUMMARY_POOL = 4


@dataclass
class TrainConfig:
    alpha: float = 0.2
    lr: float = 2e-4
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    k: int = 4
    s: int = 4
    estimator: str = "jsd"
    lam: tuple = DEFAULT_CLASS_WEIGHTS
    negatives: int = 4
    widths: tuple = (8, 16, 32)
    deformable: tuple = (True, True, True)
    convs_per_stage: int = 1
    hidden: int = 64
    folds: int = 5
    image_size: int = 28
    n_classes: int = 3

    def __post_init__(self):
        self.lam = tuple(float(v) for v in self.lam)
        self.widths = tuple(int(v) for v in self.widths)
        self.deformable = tuple(bool(v) for v in self.deformable)
        self.estimator = self.estimator.lower()
        if self.alpha < 0:
            raise ContractError("alpha must be non-negative")
        if self.lr < 0:
            raise ContractError("learning rate must be non-negative")
        if self.k < 1 or self.s < 1:
            raise ContractError("k and s must be at least 1")
        if self.estimator not in ESTIMATORS:
            raise ContractError(f"unknown estimator {self.estimator!r}")
        if len(self.deformable) != len(self.widths):
            raise ContractError("one deformable flag per encoder stage")
        if len(self.lam) != self.n_classes:
            raise ContractError(f"{len(self.lam)} class weights for {self.n_classes} classes")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def _latent_extent(size, stages):
    for _ in range(stages):
        size //= 2
    return size


@dataclass
class Forward:
    latent: T.Tensor  # encoder output (N, C, h, w)
    features: T.Tensor  # flattened mixed moments (N, k*C*h*w)


class RCoNet:
    def __init__(self, cfg: TrainConfig, rng=None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.encoder = Encoder.init(rng, 1, cfg.widths, cfg.deformable, cfg.convs_per_stage)
        c = cfg.widths[-1]
        side = _latent_extent(cfg.image_size, len(cfg.widths))
        if side < 1:
            raise ContractError(f"image size {cfg.image_size} too small for {len(cfg.widths)} stages")
        self.bank = MomentProjectorBank.init(rng, c, cfg.k)
        self.moment_bns = [BatchNorm.init(c) for _ in range(cfg.k)]
        self.feature_dim = cfg.k * c * side * side
        self.head = ExpertEnsemble(rng, self.feature_dim, cfg.n_classes, cfg.s, cfg.hidden)
        summary = (cfg.image_size // SUMMARY_POOL) ** 2
        self.disc = Discriminator.init(rng, summary + c * side * side, hidden=64)
        self.lam = ClassWeights(cfg.lam)
        self.epoch = 0

    # ---------------------------------------------------------- parameters
    def encoder_params(self):
        """psi: everything except the critic."""
        out = {f"encoder.{n}": t for n, t in self.encoder.params().items()}
        out.update({f"mhmf.{n}": t for n, t in self.bank.params().items()})
        for r, bn in enumerate(self.moment_bns):
            out[f"mhmf.bn{r + 1}.gamma"] = bn.gamma
            out[f"mhmf.bn{r + 1}.beta"] = bn.beta
        out.update({f"head.{n}": t for n, t in self.head.params().items()})
        return out

    def critic_params(self):
        """theta: the MI discriminator."""
        return {f"disc.{n}": t for n, t in self.disc.params().items()}

    def params(self):
        out = self.encoder_params()
        out.update(self.critic_params())
        return out

    def batch_norms(self):
        out = {f"encoder.{n}": bn for n, bn in self.encoder.batch_norms().items()}
        out.update({f"mhmf.bn{r + 1}": bn for r, bn in enumerate(self.moment_bns)})
        return out

    # ------------------------------------------------------------- forward
    def forward(self, x, mode="train"):
        a = self.encoder(x, mode)
        mm = mixed_moments(self.bank, a)
        normed = [bn(phi, mode) for bn, phi in zip(self.moment_bns, mm.per_order)]
        mixed = T.concat(normed, axis=1)
        return Forward(a, T.reshape(mixed, (mixed.shape[0], -1)))

    def summary(self, x):
        """Coarse view of the input image paired with the latent by the critic."""
        pooled = avg_pool2d(T.tensor(x), SUMMARY_POOL)
        return T.reshape(pooled, (pooled.shape[0], -1))

    def mi_term(self, x, latent, labels, sampler):
        z = T.reshape(latent, (latent.shape[0], -1))
        idx = sampler.draw(z.shape[0], labels, self.cfg.negatives)
        b = PairBatch(self.summary(x), z, idx)
        return estimate(self.cfg.estimator, self.disc, b)


@dataclass
class LossTerms:
    total: T.Tensor
    l_m: T.Tensor
    l_i: T.Tensor
    sigma: float
    features: T.Tensor


def loss_terms(model: RCoNet, x, labels, cfg: TrainConfig, rng, mode="train"):
    """All pieces of the objective for one batch, features included."""
    labels = np.asarray(labels)
    sampler = NegativeSampler("cross_category", rng=rng)
    if mode == "train":
        model.head.resample(rng)
    out = model.forward(x, mode)
    l_i = model.mi_term(x, out.latent, labels, sampler)
    l_m, per_expert = ensemble_loss(model.head, out.features, labels, model.lam, mode)
    if cfg.alpha == 0:
        l_total = l_m
    else:
        l_total = T.sub(l_m, T.mul(l_i, cfg.alpha))
    return LossTerms(l_total, l_m, l_i, uncertainty_sigma(per_expert), out.features)


def total_loss(model: RCoNet, x, labels, cfg: TrainConfig, rng, mode="train"):
    """(L_total, L_M, L_I, sigma) for one batch.

    Resamples the training dropout masks from ``rng`` and draws
    cross-category negatives from the same generator. Raises SamplingError
    for a single-class batch.
    """
    t = loss_terms(model, x, labels, cfg, rng, mode)
    return t.total, t.l_m, t.l_i, t.sigma
