"""Scaled-down noise and alpha sweeps on the synthetic task.

Every run draws its own train/test split of one synthetic dataset, injects
label noise into the training part only, trains a fresh model and records
the test accuracy and the mean training-time uncertainty.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from .data import LabeledDataset, NoiseSpec, SyntheticSpec, generate_synthetic, inject_label_noise
from .model import RCoNet, TrainConfig
from .train import evaluate, fit, stratified_holdout

SWEEP_DATA = SyntheticSpec(counts=(800, 550, 80), delta=0.6, seed=0)
NOISE_RATIOS = (0.0, 0.1, 0.2, 0.3)
ALPHAS = (0.0, 0.2, 0.4)
SEEDS = (0, 1, 2, 3, 4)
# desk-scale schedule: larger batches and fewer epochs than the defaults so
# that the sweeps fit on one CPU core
SWEEP_TRAINING = dict(batch_size=16, epochs=6)


@dataclass
class RunResult:
    seed: int
    noise_ratio: float
    alpha: float
    test_acc: float
    macro_bac: float
    mean_sigma: float
    seconds: float


def run_once(dataset: LabeledDataset, cfg: TrainConfig, noise_ratio=0.0, test_fraction=0.2):
    """Train on a noisy split of ``dataset`` and score on its clean test part."""
    train_idx, test_idx = stratified_holdout(dataset.labels, test_fraction, cfg.seed)
    train, test = dataset.subset(train_idx), dataset.subset(test_idx)
    if noise_ratio > 0:
        train = inject_label_noise(train, NoiseSpec(noise_ratio, cfg.seed))
    start = time.perf_counter()
    model = RCoNet(cfg)
    logs, _ = fit(model, train, cfg)
    report, _ = evaluate(model, test)
    return RunResult(cfg.seed, noise_ratio, cfg.alpha, report.multiclass_accuracy,
                     report.macro["BAC"], float(np.mean([log.sigma for log in logs])),
                     time.perf_counter() - start)


def noise_sweep(ratios=NOISE_RATIOS, seeds=SEEDS, base=None, data_spec=SWEEP_DATA, progress=None):
    base = base or TrainConfig(**SWEEP_TRAINING)
    data = generate_synthetic(data_spec)
    results = []
    for seed in seeds:
        for rho in ratios:
            r = run_once(data, replace(base, seed=seed), rho)
            results.append(r)
            if progress:
                progress(r)
    return results


def alpha_sweep(alphas=ALPHAS, seeds=SEEDS, base=None, data_spec=SWEEP_DATA, progress=None):
    base = base or TrainConfig(**SWEEP_TRAINING)
    data = generate_synthetic(data_spec)
    results = []
    for seed in seeds:
        for alpha in alphas:
            r = run_once(data, replace(base, seed=seed, alpha=alpha))
            results.append(r)
            if progress:
                progress(r)
    return results


def by_key(results, key, value):
    """{key value: [metric per seed, seed-ordered]}"""
    out = {}
    for r in sorted(results, key=lambda r: r.seed):
        out.setdefault(getattr(r, key), []).append(getattr(r, value))
    return {k: np.asarray(v) for k, v in sorted(out.items())}


def paired_increase_p(lower, higher):
    """One-sided Wilcoxon signed-rank p-value that ``higher`` exceeds ``lower``."""
    diff = np.asarray(higher) - np.asarray(lower)
    if np.all(diff == 0):
        return 1.0
    return float(stats.wilcoxon(diff, alternative="greater").pvalue)


@dataclass
class NoiseTrend:
    ratios: tuple
    mean_sigma: tuple
    mean_acc: tuple
    sigma_p_values: tuple  # one per successive ratio pair
    clean_acc: float

    @property
    def sigma_increasing(self):
        return all(p < 0.05 for p in self.sigma_p_values)

    @property
    def acc_degrading(self):
        acc = self.mean_acc
        return all(b <= a for a, b in zip(acc, acc[1:])) and acc[-1] < acc[0]


def noise_trend(results):
    sig = by_key(results, "noise_ratio", "mean_sigma")
    acc = by_key(results, "noise_ratio", "test_acc")
    ratios = tuple(sig)
    p = tuple(paired_increase_p(sig[a], sig[b]) for a, b in zip(ratios, ratios[1:]))
    return NoiseTrend(ratios, tuple(float(sig[r].mean()) for r in ratios),
                      tuple(float(acc[r].mean()) for r in ratios), p, float(acc[ratios[0]].mean()))


def alpha_spread(results):
    """(mean ACC per alpha, max - min of those means)."""
    acc = by_key(results, "alpha", "test_acc")
    means = {a: float(v.mean()) for a, v in acc.items()}
    return means, max(means.values()) - min(means.values())
