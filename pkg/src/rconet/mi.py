"""Neural mutual-information estimators (DV, JSD, NCE) and negative sampling.

A discriminator scores (input-summary, latent) pairs. Joint pairs keep an
input with its own latent; product pairs swap in another input ``x'`` for the
same latent. ``PairBatch.neg_index[i, m]`` names the ``x'`` row paired with
latent ``i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, SamplingError
from .layers import Dense
from .tensor import Tensor

ESTIMATORS = ("dv", "jsd", "nce")


@dataclass
class Discriminator:
    """Dense critic T(x, z) -> R on the concatenation [x, z]."""

    layers: list

    @classmethod
    def init(cls, rng, in_dim, hidden=64, depth=2):
        dims = [in_dim] + [hidden] * depth + [1]
        layers = [Dense.init(rng, a, b, gain=1.0) for a, b in zip(dims[:-1], dims[1:])]
        return cls(layers)

    @classmethod
    def constant(cls, in_dim, c, hidden=4):
        """Critic that outputs exactly ``c`` everywhere (zero weights)."""
        d = cls([Dense(Tensor(np.zeros((in_dim, hidden)), True), Tensor(np.zeros(hidden), True)),
                 Dense(Tensor(np.zeros((hidden, 1)), True), Tensor(np.full(1, float(c)), True))])
        return d

    def __call__(self, x, z):
        h = T.concat([x, z], axis=1)
        for layer in self.layers[:-1]:
            h = T.tanh(layer(h))
        return T.reshape(self.layers[-1](h), (h.shape[0],))

    def params(self):
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"fc{i}.weight"] = layer.weight
            out[f"fc{i}.bias"] = layer.bias
        return out


@dataclass
class PairBatch:
    x: Tensor  # (n, dx)
    z: Tensor  # (n, dz)
    neg_index: np.ndarray  # (n, M) rows of x paired with each latent
    neg_mask: np.ndarray | None = None  # (n, M) bool, False marks padding

    def __post_init__(self):
        self.x, self.z = T.tensor(self.x), T.tensor(self.z)
        if self.x.shape[0] == 0:
            raise ContractError("pair batch is empty")
        if self.x.shape[0] != self.z.shape[0]:
            raise ContractError("inputs and latents differ in count")
        self.neg_index = np.asarray(self.neg_index, dtype=np.intp)
        if self.neg_index.ndim != 2 or self.neg_index.shape[0] != self.x.shape[0]:
            raise ContractError(f"neg_index must be (n, M), got {self.neg_index.shape}")
        if self.neg_index.shape[1] == 0:
            raise ContractError("every anchor needs at least one negative")
        mask = self.valid_mask
        if not mask.any(axis=1).all():
            raise ContractError("an anchor has zero negatives")
        rows = np.arange(self.x.shape[0])[:, None]
        if np.any((self.neg_index == rows) & mask):
            raise ContractError("a product pair reuses its own input")

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def negatives_per_anchor(self):
        return self.neg_index.shape[1]

    @property
    def valid_mask(self):
        if self.neg_mask is None:
            return np.ones(self.neg_index.shape, dtype=bool)
        return np.asarray(self.neg_mask, dtype=bool)


@dataclass
class NegativeSampler:
    policy: str = "cross_category"
    rng_seed: int = 0
    rng: np.random.Generator | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.policy not in ("cross_category", "shuffle"):
            raise ContractError(f"unknown negative policy {self.policy!r}")
        if self.rng is None:
            self.rng = np.random.default_rng(self.rng_seed)

    def draw(self, n, labels=None, num_negatives=1):
        """(n, M) indices; each row uniform over eligible candidates."""
        if n < 2:
            raise SamplingError("need at least two samples to form negatives")
        if self.policy == "shuffle":
            # uniform over j != i: draw from n-1 slots and skip the anchor
            idx = self.rng.integers(0, n - 1, size=(n, num_negatives))
            return idx + (idx >= np.arange(n)[:, None])
        labels = np.asarray(labels)
        if labels.shape != (n,):
            raise ContractError("cross-category sampling needs one label per sample")
        if np.unique(labels).size < 2:
            raise SamplingError("cross-category sampling needs at least two classes in the batch")
        out = np.empty((n, num_negatives), dtype=np.intp)
        for i in range(n):
            pool = np.flatnonzero(labels != labels[i])
            out[i] = pool[self.rng.integers(0, pool.size, size=num_negatives)]
        return out


def sample_negatives(x, z, sampler: NegativeSampler, labels=None, num_negatives=1):
    x, z = T.tensor(x), T.tensor(z)
    idx = sampler.draw(x.shape[0], labels, num_negatives)
    return PairBatch(x, z, idx)


def scores(d: Discriminator, b: PairBatch):
    """Critic outputs on joint pairs (n,) and product pairs (n, M)."""
    n, m = b.neg_index.shape
    joint = d(b.x, b.z)
    xs = T.take(b.x, b.neg_index.reshape(-1), axis=0)
    zs = T.take(b.z, np.repeat(np.arange(n), m), axis=0)
    product = T.reshape(d(xs, zs), (n, m))
    return joint, product


def dv_from_scores(joint, product, mask=None):
    """E_J[T] - log E_M[e^T], the log-mean-exp taken as logsumexp - log count."""
    count = product.size if mask is None else int(np.count_nonzero(mask))
    lse = T.logsumexp(product, axis=None, mask=mask)
    return T.sub(T.mean(joint), T.sub(lse, math.log(count)))


def jsd_from_scores(joint, product, mask=None):
    """E_J[-softplus(-T)] - E_M[softplus(T)]."""
    pos = T.neg(T.mean(T.softplus(T.neg(joint))))
    sp = T.softplus(product)
    if mask is None:
        neg = T.mean(sp)
    else:
        m = np.asarray(mask, dtype=np.float64)
        neg = T.div(T.sum(T.mul(sp, Tensor(m))), float(m.sum()))
    return T.sub(pos, neg)


def nce_from_scores(joint, product, mask=None):
    """Mean over anchors of T(x, z) - logsumexp over that anchor's negatives."""
    lse = T.logsumexp(product, axis=1, mask=mask)
    return T.mean(T.sub(joint, lse))


_FROM_SCORES = {"dv": dv_from_scores, "jsd": jsd_from_scores, "nce": nce_from_scores}


def estimate(name, d, b):
    try:
        fn = _FROM_SCORES[name.lower()]
    except KeyError:
        raise ContractError(f"unknown estimator {name!r}") from None
    joint, product = scores(d, b)
    return fn(joint, product, b.neg_mask)


def estimate_dv(d, b):
    return estimate("dv", d, b)


def estimate_jsd(d, b):
    return estimate("jsd", d, b)


def estimate_nce(d, b, negatives_per_anchor=None):
    if negatives_per_anchor is not None and negatives_per_anchor != b.negatives_per_anchor:
        raise ContractError(
            f"batch groups {b.negatives_per_anchor} negatives per anchor, not {negatives_per_anchor}")
    return estimate("nce", d, b)


def nats(name, value, negatives_per_anchor):
    """Put an estimator's raw value on the MI scale in nats.

    NCE as written omits the 1/M inside its log-partition, so its raw value
    sits log M below the MI it tracks. DV is already in nats; JSD has no nat
    scale and is returned as is.
    """
    if name.lower() == "nce":
        return value + math.log(negatives_per_anchor)
    return value


# ------------------------------------------------------ Gaussian benchmark

def gaussian_mi(rho):
    return -0.5 * math.log(1.0 - rho * rho)


def gaussian_pairs(rng, rho, n):
    x = rng.standard_normal(n)
    z = rho * x + math.sqrt(1.0 - rho * rho) * rng.standard_normal(n)
    return x[:, None], z[:, None]


def evaluate_estimator(name, d, x, z, rng, negatives=16, chunk=2000):
    """Raw estimate on a fixed sample, product pairs drawn with ``shuffle``."""
    sampler = NegativeSampler("shuffle", int(rng.integers(2**31)))
    if name == "dv":
        # one pooled log-partition over every product pair in the sample
        b = PairBatch(x, z, sampler.draw(len(x), num_negatives=negatives))
        return estimate(name, d, b).item()
    values, weights = [], []
    for start in range(0, len(x), chunk):
        xs, zs = x[start:start + chunk], z[start:start + chunk]
        b = PairBatch(xs, zs, sampler.draw(len(xs), num_negatives=negatives))
        values.append(estimate(name, d, b).item())
        weights.append(len(xs))
    return float(np.average(values, weights=weights))


def train_gaussian_estimator(name, rho, samples=10_000, epochs=40, batch_size=500,
                             negatives=None, lr=2e-3, seed=0, hidden=64, eval_samples=None):
    """Fit a critic on a bivariate Gaussian with correlation ``rho``.

    Returns per-epoch rows ``(epoch, estimator, estimate_nats, analytic_mi)``
    where the estimate is measured on a held-out sample of the same size, and
    the trained discriminator.
    """
    from .optim import Adam

    name = name.lower()
    if name not in ESTIMATORS:
        raise ContractError(f"unknown estimator {name!r}")
    m = negatives or (16 if name == "nce" else 1)
    rng = np.random.default_rng(seed)
    x_train, z_train = gaussian_pairs(rng, rho, samples)
    x_eval, z_eval = gaussian_pairs(rng, rho, eval_samples or samples)
    d = Discriminator.init(rng, 2, hidden=hidden)
    opt = Adam(d.params(), lr=lr, weight_decay=0.0)
    sampler = NegativeSampler("shuffle", int(rng.integers(2**31)))
    truth = gaussian_mi(rho)
    eval_m = 16 if name == "nce" else max(m, 4)
    rows = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(samples)
        for start in range(0, samples, batch_size):
            sel = order[start:start + batch_size]
            if sel.size < 2:
                continue
            xb, zb = x_train[sel], z_train[sel]
            b = PairBatch(xb, zb, sampler.draw(sel.size, num_negatives=m))
            loss = T.neg(estimate(name, d, b))
            opt.zero_grad()
            loss.backward()
            opt.step()
        raw = evaluate_estimator(name, d, x_eval, z_eval, rng, negatives=eval_m)
        rows.append((epoch, name, nats(name, raw, eval_m), truth))
    return rows, d
