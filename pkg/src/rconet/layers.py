"""Convolution, deformable convolution, batch normalization, dropout and dense
layers for the encoder and heads.

Image tensors are ``(N, C, H, W)``; the convolution functions also accept a
single ``(C, H, W)`` image and return an unbatched result. Offset fields are
``(N, 2*kh*kw, H_out, W_out)`` with channel ``2n`` holding the row shift and
``2n + 1`` the column shift of kernel tap ``n`` (taps in row-major order).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor, node

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise DimensionError(f"conv weight must be (out, in, kh, kw), got {self.weight.shape}")
        _, _, kh, kw = self.weight.shape
        if self.stride < 1:
            raise ContractError("stride must be positive")
        if not 0 <= self.padding < min(kh, kw):
            raise ContractError(f"padding {self.padding} must be below the kernel extent")
        if self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} outputs")

    @property
    def kernel_size(self):
        return self.weight.shape[2], self.weight.shape[3]

    @property
    def taps(self):
        return self.weight.shape[2] * self.weight.shape[3]

    def output_size(self, h, w):
        kh, kw = self.kernel_size
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        return ho, wo

    @classmethod
    def init(cls, rng, in_ch, out_ch, kernel=3, stride=1, padding=None, zero=False):
        """He fan-in initialization (or all zeros)."""
        padding = kernel // 2 if padding is None else padding
        shape = (out_ch, in_ch, kernel, kernel)
        if zero:
            w = np.zeros(shape)
        else:
            w = rng.standard_normal(shape) * np.sqrt(2.0 / (in_ch * kernel * kernel))
        return cls(Tensor(w, True), Tensor(np.zeros(out_ch), True), stride, padding)


def _batched(x):
    x = T.tensor(x)
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected (C,H,W) or (N,C,H,W), got {x.shape}")
    return x, False


def _unbatch(out, squeeze):
    return T.reshape(out, out.shape[1:]) if squeeze else out


def _cols_to_output(cols, p, n, ho, wo):
    """(N*Ho*Wo, C*K) columns -> (N, C_out, Ho, Wo) via the weight matrix."""
    wmat = p.weight.data.reshape(p.weight.shape[0], -1)
    out = cols @ wmat.T + p.bias.data
    return np.ascontiguousarray(out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)), wmat


def conv2d(x, p: ConvParams):
    """Cross-correlation with zero padding; differentiable in x, weight and bias."""
    x, squeeze = _batched(x)
    n, c, h, w = x.shape
    co, ci, kh, kw = p.weight.shape
    if c != ci:
        raise DimensionError(f"input has {c} channels, kernel expects {ci}")
    s, pad = p.stride, p.padding
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise DimensionError(f"input {h}x{w} smaller than kernel {kh}x{kw} after padding")
    ho, wo = p.output_size(h, w)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    # (N, C, Ho, Wo, kh, kw) -> (N, Ho, Wo, C, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    out, wmat = _cols_to_output(cols, p, n, ho, wo)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, co)
        gw = (g2.T @ cols).reshape(p.weight.shape)
        gb = g2.sum(axis=0)
        gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gw, gb

    return _unbatch(node(out, (x, p.weight, p.bias), backward, "conv2d"), squeeze)


def _sample_grid(p, n, ho, wo, dy, dx):
    kh, kw = p.kernel_size
    ki, kj = np.meshgrid(np.arange(kh), np.arange(kw), indexing="ij")
    base_y = (np.arange(ho) * p.stride - p.padding)[None, None, :, None] + ki.reshape(1, -1, 1, 1)
    base_x = (np.arange(wo) * p.stride - p.padding)[None, None, None, :] + kj.reshape(1, -1, 1, 1)
    return base_y + dy, base_x + dx


def deform_conv2d(x, p: ConvParams, off):
    """Deformable convolution: b(p0) = sum_n w(pn) * a(p0 + pn + dpn).

    Fractional sample positions are read by bilinear interpolation; corners
    outside the image read as zero. Gradients reach the input, the kernel and
    the offsets (through the interpolation weights).
    """
    x, squeeze = _batched(x)
    off = T.tensor(off)
    if off.ndim == 3:
        off = T.reshape(off, (1,) + off.shape)
    n, c, h, w = x.shape
    co, ci, kh, kw = p.weight.shape
    k = kh * kw
    if kh % 2 == 0 or kw % 2 == 0:
        # the sampling grid is centred on the output location
        raise ContractError(f"deformable kernel extents must be odd, got {kh}x{kw}")
    if c != ci:
        raise DimensionError(f"input has {c} channels, kernel expects {ci}")
    ho, wo = p.output_size(h, w)
    if ho < 1 or wo < 1:
        raise DimensionError(f"input {h}x{w} smaller than kernel {kh}x{kw} after padding")
    if off.shape != (n, 2 * k, ho, wo):
        raise DimensionError(f"offset field {off.shape} does not match expected {(n, 2 * k, ho, wo)}")
    od = off.data.reshape(n, k, 2, ho, wo)
    py, px = _sample_grid(p, n, ho, wo, od[:, :, 0], od[:, :, 1])
    y0 = np.floor(py)
    x0 = np.floor(px)
    ly, lx = py - y0, px - x0
    y0 = y0.astype(np.intp)
    x0 = x0.astype(np.intp)
    flat_x = x.data.reshape(n, c, h * w)
    corners = []
    for cy, cx, wy, wx in ((0, 0, 1 - ly, 1 - lx), (0, 1, 1 - ly, lx), (1, 0, ly, 1 - lx), (1, 1, ly, lx)):
        yy, xx = y0 + cy, x0 + cx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = np.where(valid, yy * w + xx, 0).reshape(n, 1, -1)
        vals = np.take_along_axis(flat_x, idx, axis=2).reshape(n, c, k, ho, wo)
        vals = vals * valid[:, None]
        corners.append((idx, valid, wy, wx, vals))
    sampled = _blend(corners)
    cols = np.ascontiguousarray(sampled.transpose(0, 3, 4, 1, 2)).reshape(n * ho * wo, c * k)
    out, wmat = _cols_to_output(cols, p, n, ho, wo)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, co)
        gw = (g2.T @ cols).reshape(p.weight.shape)
        gb = g2.sum(axis=0)
        gs = (g2 @ wmat).reshape(n, ho, wo, c, k).transpose(0, 3, 4, 1, 2)  # (N,C,K,Ho,Wo)
        base = (np.arange(n)[:, None] * c + np.arange(c)[None, :])[:, :, None] * (h * w)
        gx = np.zeros(n * c * h * w)
        for idx, valid, wy, wx, _ in corners:
            contrib = gs * (wy * wx * valid)[:, None]
            flat_idx = (base + idx).reshape(-1)
            gx += np.bincount(flat_idx, weights=contrib.reshape(-1), minlength=gx.size)
        (_, _, _, _, v00), (_, _, _, _, v01), (_, _, _, _, v10), (_, _, _, _, v11) = corners
        lxb, lyb = lx[:, None], ly[:, None]
        d_dy = ((1 - lxb) * (v10 - v00) + lxb * (v11 - v01))
        d_dx = ((1 - lyb) * (v01 - v00) + lyb * (v11 - v10))
        goff = np.stack([(gs * d_dy).sum(axis=1), (gs * d_dx).sum(axis=1)], axis=2)
        return gx.reshape(n, c, h, w), gw, gb, goff.reshape(n, 2 * k, ho, wo)

    out_t = node(out, (x, p.weight, p.bias, off), backward, "deform_conv2d")
    return _unbatch(out_t, squeeze)


def _blend(corners):
    total = 0.0
    for _, _, wy, wx, vals in corners:
        total = total + (wy * wx)[:, None] * vals
    return total


def predict_offsets(x, offset_conv: ConvParams, kernel_size=None):
    """Offsets for a deformable kernel from a companion convolution over x.

    ``kernel_size`` is the (kh, kw) of the deformable kernel; it defaults to
    the companion's own kernel.
    """
    kh, kw = kernel_size or offset_conv.kernel_size
    if offset_conv.weight.shape[0] != 2 * kh * kw:
        raise ContractError(
            f"offset convolution needs {2 * kh * kw} output channels, has {offset_conv.weight.shape[0]}")
    return conv2d(x, offset_conv)


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels):
        return cls(np.zeros(channels), np.ones(channels))


def batch_norm(x, gamma, beta, mode, running: RunningStats):
    """Per-channel batch normalization over (N, C) or (N, C, H, W) inputs.

    Train mode normalizes by the biased batch variance and folds the batch
    statistics into ``running`` with momentum 0.9; eval mode applies the
    frozen running statistics as a fixed affine map.
    """
    x, gamma, beta = T.tensor(x), T.tensor(gamma), T.tensor(beta)
    if x.ndim not in (2, 4):
        raise DimensionError(f"batch_norm expects (N,C) or (N,C,H,W), got {x.shape}")
    n, c = x.shape[:2]
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    g_ = gamma.data.reshape(bshape)
    if mode == "train":
        if n < 2:
            raise ContractError("batch_norm in train mode needs at least 2 samples")
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        m = x.size // c
        r = running.momentum
        running.mean = r * running.mean + (1 - r) * mu.reshape(c)
        running.var = r * running.var + (1 - r) * var.reshape(c)
    elif mode == "eval":
        mu = running.mean.reshape(bshape)
        var = running.var.reshape(bshape)
    else:
        raise ContractError(f"unknown mode {mode!r}")
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x.data - mu) * inv
    out = g_ * xhat + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * g_
        if mode == "train":
            gx = inv / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            gx = dxhat * inv
        return gx, ggamma, gbeta

    return node(out, (x, gamma, beta), backward, "batch_norm")


@dataclass
class DropoutMask:
    """Binary keep-mask over the feature extent plus its drop rate."""

    keep: np.ndarray
    rate: float
    frozen: bool = False

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ContractError(f"dropout rate must lie in [0, 1), got {self.rate}")
        self.keep = np.asarray(self.keep, dtype=np.float64)

    @classmethod
    def sample(cls, rng, shape, rate, frozen=False):
        if not 0.0 <= rate < 1.0:
            raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
        keep = (rng.random(shape) >= rate).astype(np.float64)
        return cls(keep, rate, frozen)

    def resample(self, rng):
        if self.frozen:
            raise ContractError("cannot resample a frozen mask")
        self.keep = (rng.random(self.keep.shape) >= self.rate).astype(np.float64)


def dropout(x, mask: DropoutMask, mode="train"):
    """Inverted dropout: x * keep / (1 - rate), the mask shared across the batch."""
    x = T.tensor(x)
    if mode not in ("train", "eval"):
        raise ContractError(f"unknown mode {mode!r}")
    if mode == "eval" and not mask.frozen:
        raise ContractError("eval-mode dropout needs a frozen mask")
    if mask.keep.shape != x.shape[1:] and mask.keep.shape != x.shape:
        raise DimensionError(f"mask {mask.keep.shape} does not match features {x.shape}")
    scale = mask.keep / (1.0 - mask.rate)
    return node(x.data * scale, (x,), lambda g: (g * scale,), "dropout")


def avg_pool2d(x, size=2):
    """Non-overlapping average pooling; trailing rows/cols that do not fill a
    window are dropped."""
    x = T.tensor(x)
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise DimensionError(f"input {h}x{w} smaller than pool window {size}")
    crop = x.data[:, :, :ho * size, :wo * size]
    out = crop.reshape(n, c, ho, size, wo, size).mean(axis=(3, 5))

    def backward(g):
        gx = np.zeros(x.shape)
        up = np.repeat(np.repeat(g, size, axis=2), size, axis=3) / (size * size)
        gx[:, :, :ho * size, :wo * size] = up
        return (gx,)

    return node(out, (x,), backward, "avg_pool2d")


def dense(x, weight, bias):
    """x @ W + b for x (N, in), W (in, out)."""
    out = T.matmul(x, weight)
    return T.add(out, T.broadcast_to(bias, out.shape))


# ------------------------------------------------------------ layer objects

@dataclass
class Dense:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng, n_in, n_out, gain=2.0):
        w = rng.standard_normal((n_in, n_out)) * np.sqrt(gain / n_in)
        return cls(Tensor(w, True), Tensor(np.zeros(n_out), True))

    def __call__(self, x):
        return dense(x, self.weight, self.bias)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class BatchNorm:
    gamma: Tensor
    beta: Tensor
    running: RunningStats

    @classmethod
    def init(cls, channels):
        return cls(Tensor(np.ones(channels), True), Tensor(np.zeros(channels), True),
                   RunningStats.fresh(channels))

    def __call__(self, x, mode):
        return batch_norm(x, self.gamma, self.beta, mode, self.running)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}


@dataclass
class ConvBlock:
    """Convolution (optionally deformable) followed by batch norm and ReLU."""

    conv: ConvParams
    bn: BatchNorm
    offset_conv: ConvParams | None = None

    @classmethod
    def init(cls, rng, in_ch, out_ch, deformable, kernel=3):
        conv = ConvParams.init(rng, in_ch, out_ch, kernel)
        off = ConvParams.init(rng, in_ch, 2 * kernel * kernel, kernel, zero=True) if deformable else None
        return cls(conv, BatchNorm.init(out_ch), off)

    @property
    def deformable(self):
        return self.offset_conv is not None

    def __call__(self, x, mode):
        if self.deformable:
            offsets = predict_offsets(x, self.offset_conv, self.conv.kernel_size)
            y = deform_conv2d(x, self.conv, offsets)
        else:
            y = conv2d(x, self.conv)
        return T.relu(self.bn(y, mode))

    def params(self):
        out = {"conv.weight": self.conv.weight, "conv.bias": self.conv.bias,
               "bn.gamma": self.bn.gamma, "bn.beta": self.bn.beta}
        if self.deformable:
            out["offset.weight"] = self.offset_conv.weight
            out["offset.bias"] = self.offset_conv.bias
        return out


@dataclass
class Encoder:
    """Stack of stages; each stage is ``convs_per_stage`` conv blocks then 2x2
    average pooling. The last block of a stage is deformable when the stage's
    flag is set."""

    stages: list = field(default_factory=list)

    @classmethod
    def init(cls, rng, in_ch=1, widths=(8, 16, 32), deformable=(True, True, True), convs_per_stage=1):
        stages, ch = [], in_ch
        for width, deform in zip(widths, deformable):
            blocks = []
            for b in range(convs_per_stage):
                last = b == convs_per_stage - 1
                blocks.append(ConvBlock.init(rng, ch, width, deformable=deform and last))
                ch = width
            stages.append(blocks)
        return cls(stages)

    def __call__(self, x, mode):
        for blocks in self.stages:
            for block in blocks:
                x = block(x, mode)
            x = avg_pool2d(x, 2)
        return x

    def params(self):
        out = {}
        for si, blocks in enumerate(self.stages):
            for bi, block in enumerate(blocks):
                for name, t in block.params().items():
                    out[f"stage{si}.block{bi}.{name}"] = t
        return out

    def batch_norms(self):
        return {f"stage{si}.block{bi}.bn": block.bn
                for si, blocks in enumerate(self.stages) for bi, block in enumerate(blocks)}
