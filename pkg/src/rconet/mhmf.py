"""Mixed high-order moment features.

The order-r moment of a feature map is approximated by the Hadamard product
of r learned 1x1 projections, built recursively (phi_r = phi_{r-1} * K_r(a))
so each projection is evaluated once, then the orders 1..k are stacked along
the channel axis.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor


@dataclass
class MomentProjectorBank:
    weights: list  # k tensors of shape (C, C)
    biases: list  # k tensors of shape (C,)

    def __post_init__(self):
        if not self.weights:
            raise ContractError("a projector bank needs at least one kernel")
        if len(self.weights) != len(self.biases):
            raise ContractError("weights and biases differ in count")
        c = self.weights[0].shape[0]
        for w, b in zip(self.weights, self.biases):
            if w.shape != (c, c) or b.shape != (c,):
                raise DimensionError(f"every kernel must map {c} channels to {c}")

    @property
    def k(self):
        return len(self.weights)

    @property
    def channels(self):
        return self.weights[0].shape[0]

    @classmethod
    def init(cls, rng, channels, k):
        """Unit-variance random weights scaled by 1/sqrt(C); trainable."""
        if k < 1:
            raise ContractError("k must be at least 1")
        ws = [Tensor(rng.standard_normal((channels, channels)) / np.sqrt(channels), True) for _ in range(k)]
        bs = [Tensor(np.zeros(channels), True) for _ in range(k)]
        return cls(ws, bs)

    @classmethod
    def identity(cls, channels, k):
        return cls([Tensor(np.eye(channels), True) for _ in range(k)],
                   [Tensor(np.zeros(channels), True) for _ in range(k)])

    def params(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"K{i + 1}.weight"] = w
            out[f"K{i + 1}.bias"] = b
        return out


@dataclass
class MomentFeature:
    per_order: list
    mixed: Tensor


def project(bank, a, i):
    """Apply the 1x1 kernel K_{i+1} to a (C,H,W) or (N,C,H,W) map."""
    a = T.tensor(a)
    c = bank.channels
    if a.ndim not in (3, 4) or a.shape[-3] != c:
        raise DimensionError(f"expected {c} channels in (C,H,W) or (N,C,H,W), got {a.shape}")
    # channels last, one matmul over every pixel, channels back
    axes = (1, 2, 0) if a.ndim == 3 else (0, 2, 3, 1)
    moved = T.transpose(a, axes)
    flat = T.reshape(moved, (-1, c))
    y = T.matmul(flat, T.transpose(bank.weights[i]))
    y = T.add(y, T.broadcast_to(bank.biases[i], y.shape))
    y = T.reshape(y, moved.shape)
    back = (2, 0, 1) if a.ndim == 3 else (0, 3, 1, 2)
    return T.transpose(y, back)


def moment_order(bank, a, r):
    if not 1 <= r <= bank.k:
        raise ContractError(f"order {r} outside 1..{bank.k}")
    phi = project(bank, a, 0)
    for i in range(1, r):
        phi = T.mul(phi, project(bank, a, i))
    return phi


def mixed_moments(bank, a):
    """All orders 1..k, each projection computed once, stacked on channels."""
    a = T.tensor(a)
    per_order = [project(bank, a, 0)]
    for i in range(1, bank.k):
        per_order.append(T.mul(per_order[-1], project(bank, a, i)))
    axis = a.ndim - 3
    return MomentFeature(per_order, T.concat(per_order, axis=axis))


# -------------------------------------------------------- expressiveness demo

def _monomials(order):
    return [(order - j, j) for j in range(order + 1)]


def _term_name(px, py):
    parts = []
    for var, p in (("x", px), ("y", py)):
        if p == 1:
            parts.append(var)
        elif p > 1:
            parts.append(f"{var}^{p}")
    return "".join(parts) or "1"


def moment_expressiveness_demo(samples, max_order, config_id=0, standardize=False):
    """Raw sample moments E[x^i y^j] for every i + j = r, r = 1..max_order.

    Returns rows ``(config_id, order, moment_value, term)``. With
    ``standardize`` the cloud is whitened first (zero mean, identity
    covariance) so orders 1 and 2 coincide across clouds and only higher
    orders can tell them apart. Degenerate clouds skip whitening.
    """
    pts = np.asarray(samples, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.shape[0] < 3:
        raise ContractError("moment demo needs at least 3 samples")
    if max_order < 1:
        raise ContractError("max_order must be at least 1")
    if standardize:
        pts = whiten(pts)
    rows = []
    d = pts.shape[1]
    for r in range(1, max_order + 1):
        if d == 1:
            rows.append((config_id, r, float(np.mean(pts[:, 0] ** r)), _term_name(r, 0)))
            continue
        for px, py in _monomials(r):
            value = float(np.mean(pts[:, 0] ** px * pts[:, 1] ** py))
            rows.append((config_id, r, value, _term_name(px, py)))
    return rows


def whiten(pts):
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / len(pts)
    vals, vecs = np.linalg.eigh(cov)
    if np.any(vals <= 1e-12):
        return centered
    return centered @ vecs @ np.diag(vals ** -0.5) @ vecs.T


MIXTURE_CONFIGS = {
    # name: list of (weight, mean, cov-scale)
    "triangle": [(1 / 3, (0.0, 2.0), 0.35), (1 / 3, (-1.8, -1.0), 0.35), (1 / 3, (1.8, -1.0), 0.35)],
    "skewed": [(0.6, (-0.8, 0.0), 0.4), (0.3, (1.0, 0.8), 0.3), (0.1, (2.6, -1.6), 0.2)],
    "single": [(1.0, (0.0, 0.0), 1.0)],
}


def sample_mixture(rng, components, n=350):
    weights = np.array([c[0] for c in components])
    choice = rng.choice(len(components), size=n, p=weights / weights.sum())
    pts = np.empty((n, 2))
    for i, (_, mu, scale) in enumerate(components):
        sel = choice == i
        pts[sel] = rng.normal(mu, np.sqrt(scale), size=(sel.sum(), 2))
    return pts


def mixture_demo(seed=0, max_order=4, n=350):
    """Whitened moment rows for every mixture configuration plus the clouds."""
    rng = np.random.default_rng(seed)
    rows, clouds = [], {}
    for cid, (name, comps) in enumerate(MIXTURE_CONFIGS.items()):
        pts = sample_mixture(rng, comps, n)
        clouds[name] = whiten(pts)
        rows.extend(moment_expressiveness_demo(pts, max_order, config_id=name, standardize=True))
    return rows, clouds


def order_summary(rows):
    """Per (config, order) Euclidean norm of the order's moment vector."""
    out = {}
    for key, group in itertools.groupby(sorted(rows, key=lambda r: (str(r[0]), r[1])),
                                        key=lambda r: (r[0], r[1])):
        out[key] = float(np.sqrt(np.sum([g[2] ** 2 for g in group])))
    return out
