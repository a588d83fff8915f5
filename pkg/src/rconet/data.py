"""Synthetic three-class image data, label-noise injection, augmentation and
the RCDS dataset file format.

Class 0 is a smooth low-intensity field. Classes 1 and 2 add one localized
Gaussian blob whose shape parameters are interpolated by the similarity knob
``delta``: at delta = 1 both classes draw from the same distribution.

RCDS layout (little-endian)::

    b"RCDS" | u16 version | u32 n | u16 n_classes | u16 H | u16 W
    n_classes x (u16 length | utf-8 class name)
    n x (u8 label | u8 relabeled flag | u8 original class | H*W f32 pixels)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConstraintError, ContractError, FormatError

CLASS_NAMES = ("normal", "pneumonia", "covid")
REFERENCE_TRAIN_COUNTS = (7966, 5451, 207)
REFERENCE_TEST_COUNTS = (885, 594, 31)

RCDS_MAGIC = b"RCDS"
RCDS_VERSION = 1
_HEADER = struct.Struct("<4sHIHHH")


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, 1, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int
    class_names: tuple = CLASS_NAMES
    relabeled_from: np.ndarray | None = None  # (N,) original class, -1 when clean

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.class_names = tuple(self.class_names)
        n = self.labels.shape[0]
        if self.images.shape[0] != n:
            raise ContractError("images and labels differ in length")
        if self.relabeled_from is None:
            self.relabeled_from = np.full(n, -1, dtype=np.int64)
        self.relabeled_from = np.asarray(self.relabeled_from, dtype=np.int64)
        if self.relabeled_from.shape != (n,):
            raise ContractError("provenance length does not match the sample count")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ContractError("label outside the class range")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def n_classes(self):
        return len(self.class_names)

    @property
    def clean(self):
        return self.relabeled_from < 0

    def counts(self):
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        return LabeledDataset(self.images[idx], self.labels[idx], self.class_names,
                              self.relabeled_from[idx])

    @classmethod
    def concat(cls, parts):
        parts = list(parts)
        return cls(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]),
                   parts[0].class_names, np.concatenate([p.relabeled_from for p in parts]))


# ---------------------------------------------------------------- synthesis

@dataclass
class SyntheticSpec:
    counts: tuple = (800, 550, 80)
    size: int = 28
    delta: float = 0.0
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if any(c < 0 for c in self.counts):
            raise ContractError("class counts must be non-negative")
        if not 0.0 <= self.delta <= 1.0:
            raise ContractError(f"similarity delta must lie in [0, 1], got {self.delta}")


# blob shape per class: (major-axis sigma, aspect ratio, peak intensity)
BLOB_CLASS1 = np.array([3.5, 1.0, 0.8])
BLOB_CLASS2 = np.array([3.0, 4.0, 1.0])


def blob_params(cls_id, delta):
    if cls_id == 1:
        return BLOB_CLASS1
    return (1.0 - delta) * BLOB_CLASS2 + delta * BLOB_CLASS1


def _background(rng, size, yy, xx):
    base = rng.uniform(0.02, 0.08)
    amp = rng.uniform(0.0, 0.06)
    fy, fx = rng.uniform(0.2, 0.8, size=2)
    py, px = rng.uniform(0, 2 * np.pi, size=2)
    wave = np.sin(2 * np.pi * fy * yy / size + py) * np.cos(2 * np.pi * fx * xx / size + px)
    return base + amp * (wave + 1.0) / 2.0


def _blob(rng, params, size, yy, xx):
    sigma, aspect, peak = params
    sigma = sigma * rng.uniform(0.85, 1.15)
    peak = peak * rng.uniform(0.9, 1.1)
    cy, cx = (size - 1) / 2 + rng.uniform(-3, 3, size=2)
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    minor = sigma / aspect
    return peak * np.exp(-0.5 * ((u / sigma) ** 2 + (v / minor) ** 2))


def generate_synthetic(spec: SyntheticSpec) -> LabeledDataset:
    """Deterministic per seed; pixels are rounded to float32 so the on-disk
    form round-trips exactly."""
    rng = np.random.default_rng(spec.seed)
    size = spec.size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    labels = np.repeat(np.arange(len(spec.counts)), spec.counts)
    images = np.empty((labels.size, 1, size, size))
    for i, c in enumerate(labels):
        img = _background(rng, size, yy, xx)
        if c > 0:
            img = img + _blob(rng, blob_params(c, spec.delta), size, yy, xx)
        img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
        images[i, 0] = np.clip(img, 0.0, 1.0)
    images = images.astype(np.float32).astype(np.float64)
    names = CLASS_NAMES if len(spec.counts) == 3 else tuple(f"class{i}" for i in range(len(spec.counts)))
    return LabeledDataset(images, labels, names)


# ------------------------------------------------------------- label noise

@dataclass
class NoiseSpec:
    ratio: float
    seed: int = 0
    minority: int = -1  # class whose inflow must equal its outflow

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ContractError(f"noise ratio must lie in [0, 1), got {self.ratio}")


def relabel_quotas(counts, ratio):
    """floor(ratio * n_c) per class."""
    return [int(np.floor(ratio * n + 1e-9)) for n in counts]


def inject_label_noise(d: LabeledDataset, spec: NoiseSpec) -> LabeledDataset:
    """Relabel floor(ratio * n_c) samples of every class to a wrong class.

    The minority class (default: last) sends its quota uniformly to the other
    classes; exactly as many of the other classes' selected samples are then
    relabeled to the minority class, and the rest move among the non-minority
    classes. Images are never touched.
    """
    c = d.n_classes
    if c < 2 or np.unique(d.labels).size < 2:
        raise ContractError("label noise needs at least two classes present")
    rng = np.random.default_rng(spec.seed)
    minority = spec.minority % c
    others = [k for k in range(c) if k != minority]
    counts = d.counts()
    quota = relabel_quotas(counts, spec.ratio)
    labels = d.labels.copy()
    origin = d.relabeled_from.copy()

    picked = {k: rng.choice(np.flatnonzero(d.labels == k), size=quota[k], replace=False) for k in range(c)}
    inflow = quota[minority]
    pool = np.concatenate([picked[k] for k in others]) if others else np.empty(0, np.intp)
    if pool.size < inflow:
        raise ConstraintError(
            f"balance rule needs {inflow} samples moved into class {minority} but only "
            f"{pool.size} are selected from the other classes (deficit {inflow - pool.size})")
    if len(others) == 1 and pool.size != inflow:
        raise ConstraintError(
            f"with two classes every selected sample must move to class {minority}: "
            f"{pool.size} selected vs {inflow} leaving (deficit {abs(pool.size - inflow)})")

    for i in picked[minority]:
        labels[i] = others[rng.integers(len(others))]
    to_minority = rng.choice(pool, size=inflow, replace=False) if inflow else np.empty(0, np.intp)
    to_minority_set = set(to_minority.tolist())
    for i in to_minority:
        labels[i] = minority
    for i in pool:
        if i in to_minority_set:
            continue
        own = d.labels[i]
        choices = [k for k in others if k != own]
        labels[i] = choices[rng.integers(len(choices))]
    moved = np.concatenate([pool, picked[minority]]).astype(np.intp)
    first_time = origin[moved] < 0
    origin[moved[first_time]] = d.labels[moved[first_time]]
    return LabeledDataset(d.images, labels, d.class_names, origin)


def noise_table(before: LabeledDataset, after: LabeledDataset):
    """Rows (class, clean, noise, total) over the original class membership."""
    rows = []
    for k, name in enumerate(before.class_names):
        members = before.labels == k
        noisy = int(np.count_nonzero(members & (after.labels != before.labels)))
        total = int(members.sum())
        rows.append((name, total - noisy, noisy, total))
    return rows


def inflow_outflow(before: LabeledDataset, after: LabeledDataset, cls):
    inflow = int(np.count_nonzero((before.labels != cls) & (after.labels == cls)))
    outflow = int(np.count_nonzero((before.labels == cls) & (after.labels != cls)))
    return inflow, outflow


# ------------------------------------------------------------- augmentation

MAX_ANGLE = 25.0
MAX_SHIFT = 3


def hflip(img):
    return img[..., ::-1].copy()


def translate(img, dx, dy):
    """Integer shift with zero fill; +dx moves content right, +dy down."""
    if abs(dx) > MAX_SHIFT or abs(dy) > MAX_SHIFT or int(dx) != dx or int(dy) != dy:
        raise ContractError(f"translation ({dx}, {dy}) outside +-{MAX_SHIFT} integer pixels")
    dx, dy = int(dx), int(dy)
    h, w = img.shape[-2:]
    out = np.zeros_like(img)
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[..., yd, xd] = img[..., ys, xs]
    return out


def rotate(img, angle, limit=MAX_ANGLE):
    """Counter-clockwise rotation about the image center (as displayed with
    row 0 on top), bilinear resampling, zero fill outside."""
    if abs(angle) > limit:
        raise ContractError(f"rotation angle {angle} outside +-{limit} degrees")
    h, w = img.shape[-2:]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    t = np.deg2rad(angle)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: output pixel -> source position
    dy, dx = yy - cy, xx - cx
    sx = np.cos(t) * dx - np.sin(t) * dy + cx
    sy = np.sin(t) * dx + np.cos(t) * dy + cy
    return bilinear_sample(img, sy, sx)


def bilinear_sample(img, sy, sx):
    h, w = img.shape[-2:]
    y0, x0 = np.floor(sy).astype(int), np.floor(sx).astype(int)
    ly, lx = sy - y0, sx - x0
    out = np.zeros(img.shape[:-2] + sy.shape)
    for cy, cx, wgt in ((0, 0, (1 - ly) * (1 - lx)), (0, 1, (1 - ly) * lx),
                        (1, 0, ly * (1 - lx)), (1, 1, ly * lx)):
        yi, xi = y0 + cy, x0 + cx
        ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = img[..., np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        out += wgt * ok * vals
    return out


def apply_op(img, op):
    kind, *args = op
    if kind == "hflip":
        return hflip(img)
    if kind == "translate":
        return translate(img, *args)
    if kind == "rotate":
        return rotate(img, *args)
    raise ContractError(f"unknown augmentation {kind!r}")


def random_ops(rng, n_angles=5):
    """The augmentation menu: flip, one random shift, five random angles."""
    ops = [("hflip",)]
    dx, dy = rng.integers(-MAX_SHIFT, MAX_SHIFT + 1, size=2)
    ops.append(("translate", int(dx), int(dy)))
    ops.extend(("rotate", float(a)) for a in rng.uniform(-MAX_ANGLE, MAX_ANGLE, size=n_angles))
    return ops


def augment(d: LabeledDataset, ops, per_sample_count=1, seed=0, classes=None):
    """Append ``per_sample_count`` augmented copies of each selected sample.

    Each copy applies one op drawn uniformly from ``ops`` and keeps the
    source label and provenance. ``classes`` restricts which samples are
    augmented (default: all).
    """
    if per_sample_count < 0:
        raise ContractError("per_sample_count must be non-negative")
    for op in ops:  # validate bounds before doing any work
        if op[0] == "rotate" and abs(op[1]) > MAX_ANGLE:
            raise ContractError(f"rotation angle {op[1]} outside +-{MAX_ANGLE} degrees")
        if op[0] == "translate" and (abs(op[1]) > MAX_SHIFT or abs(op[2]) > MAX_SHIFT):
            raise ContractError(f"translation {op[1:]} outside +-{MAX_SHIFT} pixels")
    rng = np.random.default_rng(seed)
    sel = np.arange(len(d)) if classes is None else np.flatnonzero(np.isin(d.labels, classes))
    new_imgs, src = [], []
    for i in sel:
        for _ in range(per_sample_count):
            op = ops[rng.integers(len(ops))]
            new_imgs.append(apply_op(d.images[i], op))
            src.append(i)
    if not new_imgs:
        return d
    src = np.asarray(src, dtype=np.intp)
    # stored at float32 precision like generated images, so saves round-trip
    imgs = np.clip(np.stack(new_imgs), 0.0, 1.0).astype(np.float32).astype(np.float64)
    extra = LabeledDataset(imgs, d.labels[src], d.class_names, d.relabeled_from[src])
    return LabeledDataset.concat([d, extra])


# ------------------------------------------------------------------ RCDS io

def dataset_to_bytes(d: LabeledDataset) -> bytes:
    n = len(d)
    h, w = (d.images.shape[-2:] if n else (0, 0))
    if n and d.images.shape[1] != 1:
        raise ContractError("RCDS stores single-channel images")
    parts = [_HEADER.pack(RCDS_MAGIC, RCDS_VERSION, n, d.n_classes, h, w)]
    for name in d.class_names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    if n:
        flags = (d.relabeled_from >= 0).astype(np.uint8)
        orig = np.where(d.relabeled_from >= 0, d.relabeled_from, 0).astype(np.uint8)
        rec = np.dtype([("label", "u1"), ("flag", "u1"), ("orig", "u1"), ("px", "<f4", (h * w,))])
        arr = np.empty(n, dtype=rec)
        arr["label"] = d.labels
        arr["flag"] = flags
        arr["orig"] = orig
        arr["px"] = d.images.reshape(n, h * w).astype("<f4")
        parts.append(arr.tobytes())
    return b"".join(parts)


def dataset_from_bytes(buf: bytes) -> LabeledDataset:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    magic, version, n, n_classes, h, w = _HEADER.unpack_from(buf, 0)
    if magic != RCDS_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != RCDS_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    pos = _HEADER.size
    names = []
    for _ in range(n_classes):
        if pos + 2 > len(buf):
            raise FormatError("truncated class-name table", pos)
        (length,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + length > len(buf):
            raise FormatError("truncated class name", pos)
        try:
            names.append(buf[pos:pos + length].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError("class name is not utf-8", pos) from exc
        pos += length
    rec = np.dtype([("label", "u1"), ("flag", "u1"), ("orig", "u1"), ("px", "<f4", (h * w,))])
    expected = pos + n * rec.itemsize
    if len(buf) != expected:
        raise FormatError(f"sample block holds {len(buf) - pos} bytes, header implies "
                          f"{expected - pos}", min(len(buf), expected))
    if n == 0:
        return LabeledDataset(np.zeros((0, 1, h, w)), np.zeros(0, np.int64), tuple(names))
    arr = np.frombuffer(buf, dtype=rec, count=n, offset=pos)
    labels = arr["label"].astype(np.int64)
    if labels.max() >= n_classes:
        raise FormatError("label outside the class table", pos)
    origin = np.where(arr["flag"] > 0, arr["orig"].astype(np.int64), -1)
    images = arr["px"].astype(np.float64).reshape(n, 1, h, w)
    return LabeledDataset(images, labels, tuple(names), origin)


def dataset_save(d: LabeledDataset, path):
    Path(path).write_bytes(dataset_to_bytes(d))


def dataset_load(path) -> LabeledDataset:
    return dataset_from_bytes(Path(path).read_bytes())
