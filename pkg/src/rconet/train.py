"""Training loop, stratified k-fold splits and evaluation."""

from __future__ import annotations

import csv
from dataclasses import astuple, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ContractError
from .metrics import compute_metrics, confusion
from .model import RCoNet, TrainConfig, loss_terms
from .mul import ensemble_predict, inference_uncertainty
from .optim import Adam

EVAL_CHUNK = 256


@dataclass
class EpochLog:
    epoch: int
    L_M: float
    L_I: float
    sigma: float
    train_acc: float
    val_acc: float = float("nan")


def make_batches(labels, batch_size, rng):
    """Shuffled index batches, each holding at least two classes.

    A trailing batch of one sample is folded into its predecessor. A batch
    that happens to be single-class swaps one member with a sample of
    another class from a batch that stays mixed after the swap.
    """
    labels = np.asarray(labels)
    n = labels.size
    if n < 2:
        raise ContractError("need at least two samples to form a batch")
    if np.unique(labels).size < 2:
        raise ContractError("training data holds a single class")
    order = rng.permutation(n)
    batches = [order[i:i + batch_size].copy() for i in range(0, n, batch_size)]
    if len(batches) > 1 and batches[-1].size < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    for b in batches:
        if np.unique(labels[b]).size > 1:
            continue
        c = labels[b[0]]
        for o in batches:
            if o is b:
                continue
            others = np.flatnonzero(labels[o] != c)
            # after trading o[j] for a class-c sample, o must still be mixed
            if others.size >= 2:
                j = others[0]
                o[j], b[0] = b[0], o[j]
                break
    return batches


def batch_accuracy(model, features, labels):
    logits = model.head.classify(features).data
    return float(np.mean(logits.argmax(axis=1) == labels))


BATCH_LOG_HEADER = ("epoch", "batch", "size", "L_M", "L_I", "sigma")


def train_epoch(model: RCoNet, opt: Adam, images, labels, cfg: TrainConfig, rng, batch_log=None):
    """One pass over the data; returns the per-epoch means of the logged terms.

    When ``batch_log`` is a list, one row per batch (see BATCH_LOG_HEADER) is
    appended to it.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractError("training set is empty")
    sums = np.zeros(4)
    count = 0
    for b, idx in enumerate(make_batches(labels, cfg.batch_size, rng)):
        t = loss_terms(model, images[idx], labels[idx], cfg, rng)
        opt.zero_grad()
        t.total.backward()
        opt.step()
        w = idx.size
        if batch_log is not None:
            batch_log.append((model.epoch + 1, b, w, t.l_m.item(), t.l_i.item(), t.sigma))
        sums += w * np.array([t.l_m.item(), t.l_i.item(), t.sigma,
                              batch_accuracy(model, t.features, labels[idx])])
        count += w
    model.epoch += 1
    means = sums / count
    return EpochLog(model.epoch, *(float(v) for v in means))


def make_optimizer(model: RCoNet, cfg: TrainConfig):
    return Adam(model.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)


def fit(model: RCoNet, train, cfg: TrainConfig, val=None, rng=None, opt=None, progress=None,
        batch_log=None):
    """Train for ``cfg.epochs``; ``train``/``val`` are LabeledDatasets.

    Returns (epoch logs, optimizer). All randomness comes from ``rng``
    (seeded from ``cfg.seed`` when omitted).
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    opt = opt or make_optimizer(model, cfg)
    logs = []
    for _ in range(cfg.epochs):
        log = train_epoch(model, opt, train.images, train.labels, cfg, rng, batch_log)
        if val is not None and len(val.labels):
            preds = predict(model, val.images)[0].argmax(axis=1)
            log.val_acc = float(np.mean(preds == val.labels))
        logs.append(log)
        if progress:
            progress(log)
    return logs, opt


def kfold_split(labels, folds=5, seed=0):
    """Stratified folds as (train_idx, val_idx) pairs.

    Each class is shuffled and dealt round-robin, continuing from the fold
    where the previous class stopped, so fold sizes differ by at most one.
    """
    labels = np.asarray(labels)
    if folds < 2:
        raise ContractError("need at least two folds")
    if labels.size < folds:
        raise ContractError(f"{labels.size} samples cannot fill {folds} folds")
    rng = np.random.default_rng(seed)
    assignment = np.empty(labels.size, dtype=np.intp)
    start = 0
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c))
        assignment[members] = (start + np.arange(members.size)) % folds
        start = (start + members.size) % folds
    out = []
    for f in range(folds):
        out.append((np.flatnonzero(assignment != f), np.flatnonzero(assignment == f)))
    return out


def stratified_holdout(labels, test_fraction=0.2, seed=0):
    """(train_idx, test_idx) with each class split in the same proportion."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c))
        k = int(round(test_fraction * members.size))
        test.append(members[:k])
        train.append(members[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def predict(model: RCoNet, images):
    """Ensemble probabilities and per-sample uncertainty in inference mode."""
    probs, sig, pred_sig = [], [], []
    for start in range(0, len(images), EVAL_CHUNK):
        feats = model.forward(images[start:start + EVAL_CHUNK], "eval").features
        p, _ = ensemble_predict(model.head, feats)
        u = inference_uncertainty(model.head, feats, model.lam)
        probs.append(p)
        sig.append(u.sigma)
        pred_sig.append(u.sigma_predictive)
    return np.concatenate(probs), np.concatenate(sig), np.concatenate(pred_sig)


def prediction_header(n_classes):
    return (["sample_id", "predicted_class"] + [f"p_{c}" for c in range(n_classes)]
            + ["sigma_pseudo_label", "sigma_predictive"])


def evaluate(model: RCoNet, dataset):
    """(MetricsReport, per-sample rows) on a LabeledDataset."""
    if len(dataset.labels) == 0:
        raise ContractError("evaluation set is empty")
    probs, sig, pred_sig = predict(model, dataset.images)
    preds = probs.argmax(axis=1)
    report = compute_metrics(confusion(preds, dataset.labels, probs.shape[1]),
                             list(dataset.class_names))
    rows = [[i, int(preds[i]), *probs[i].tolist(), float(sig[i]), float(pred_sig[i])]
            for i in range(len(preds))]
    return report, rows


def write_rows(path, header, rows):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.9g}" if isinstance(v, float) else v for v in row])


def write_epoch_log(path, logs):
    write_rows(path, [f.name for f in fields(EpochLog)], [astuple(log) for log in logs])
