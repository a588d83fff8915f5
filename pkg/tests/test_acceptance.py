"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``criterion N: PASS/FAIL`` line; the lines are repeated in
the terminal summary. Criteria 7 and 8 train 35 models between them and take
roughly 25 minutes on one core.
"""

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from rconet import mhmf, mi
from rconet import tensor as T
from rconet.checkpoint import from_bytes, to_bytes
from rconet.cli import main
from rconet.data import (
    REFERENCE_TRAIN_COUNTS,
    LabeledDataset,
    NoiseSpec,
    SyntheticSpec,
    dataset_from_bytes,
    dataset_to_bytes,
    generate_synthetic,
    inflow_outflow,
    inject_label_noise,
    noise_table,
)
from rconet.experiments import alpha_spread, alpha_sweep, noise_sweep, noise_trend
from rconet.layers import (
    ConvParams,
    Dense,
    DropoutMask,
    Encoder,
    RunningStats,
    avg_pool2d,
    batch_norm,
    conv2d,
    deform_conv2d,
    dropout,
    predict_offsets,
)
from rconet.metrics import ConfusionMatrix, binary_metrics, compute_metrics
from rconet.mhmf import MomentProjectorBank, mixed_moments, moment_order
from rconet.mi import Discriminator, NegativeSampler, PairBatch
from rconet.model import RCoNet, TrainConfig, loss_terms
from rconet.mul import ClassWeights, ExpertEnsemble, ensemble_loss, uncertainty_sigma, weighted_ce
from rconet.tensor import Tensor, grad_check
from rconet.train import fit

TOL_GRAD = 1e-4


def conv_params(rng, out_ch, in_ch, k, stride=1, padding=0):
    return ConvParams(Tensor(rng.uniform(-1, 1, (out_ch, in_ch, k, k)), True),
                      Tensor(rng.uniform(-1, 1, out_ch), True), stride, padding)


def off_grid_offsets(rng, shape):
    """Offsets whose fractional parts avoid the kinks of bilinear sampling."""
    frac = rng.uniform(0.2, 0.8, shape) * rng.choice([-1, 1], shape)
    return frac + rng.integers(-1, 2, shape)


# ----------------------------------------------------------------------- 1

def test_criterion_01_gradient_integrity(criterion):
    with criterion(1, "gradient integrity") as notes:
        start = time.perf_counter()
        rng = np.random.default_rng(0)
        worst = {}

        p = conv_params(rng, 2, 2, 3, stride=2, padding=1)
        x = Tensor(rng.uniform(-2, 2, (2, 2, 6, 6)), True)
        g = rng.standard_normal((2, 2, 3, 3))
        worst["conv2d"] = max(grad_check(lambda _: T.sum(T.mul(conv2d(x, p), Tensor(g))), t)
                              for t in (x, p.weight, p.bias))

        p = conv_params(rng, 2, 2, 3, padding=1)
        x = Tensor(rng.uniform(-2, 2, (2, 2, 5, 5)), True)
        off = Tensor(off_grid_offsets(rng, (2, 18, 5, 5)), True)
        g = rng.standard_normal((2, 2, 5, 5))
        worst["deform_conv2d"] = max(
            grad_check(lambda _: T.sum(T.mul(deform_conv2d(x, p, off), Tensor(g))), t)
            for t in (x, p.weight, p.bias, off))

        oc = conv_params(rng, 18, 2, 3, padding=1)
        oc.weight.data *= 0.1
        g = rng.standard_normal((2, 18, 5, 5))
        worst["offset predictor"] = max(
            grad_check(lambda _: T.sum(T.mul(predict_offsets(x, oc), Tensor(g))), t)
            for t in (x, oc.weight, oc.bias))

        xb = Tensor(rng.uniform(-2, 2, (4, 3, 3, 3)), True)
        gamma, beta = Tensor(rng.uniform(0.5, 1.5, 3), True), Tensor(rng.uniform(-1, 1, 3), True)
        g = rng.standard_normal((4, 3, 3, 3))
        worst["batch_norm"] = max(grad_check(
            lambda _: T.sum(T.mul(batch_norm(xb, gamma, beta, "train", RunningStats.fresh(3)), Tensor(g))),
            t) for t in (xb, gamma, beta))

        m = DropoutMask.sample(rng, (4,), 0.5)
        xd = Tensor(rng.uniform(-2, 2, (3, 4)), True)
        worst["dropout"] = grad_check(lambda t: T.sum(T.tanh(dropout(t, m))), xd)

        xp = Tensor(rng.uniform(-2, 2, (2, 1, 5, 5)), True)
        worst["avg_pool2d"] = grad_check(lambda t: T.sum(T.power(avg_pool2d(t, 2), 2)), xp)

        dn = Dense.init(rng, 4, 3)
        xx = Tensor(rng.uniform(-2, 2, (5, 4)), True)
        worst["dense"] = max(grad_check(lambda _: T.sum(T.tanh(dn(xx))), t)
                             for t in (xx, dn.weight, dn.bias))

        enc = Encoder.init(rng, 1, (2, 3), (True, False))
        for name, t in enc.params().items():
            if ".offset." in name:
                t.data = rng.normal(0.0, 0.05, t.shape)
        xe = Tensor(rng.uniform(0, 1, (3, 1, 8, 8)), True)
        ge = rng.standard_normal((3, 3, 2, 2))
        enc_loss = lambda _: T.sum(T.mul(enc(xe, "train"), Tensor(ge)))  # noqa: E731
        pick = np.random.default_rng(1)
        worst["encoder"] = max(grad_check(enc_loss, t, coords=pick.choice(t.size, min(t.size, 8), False))
                               for t in enc.params().values())

        d = Discriminator.init(rng, 5, hidden=8)
        xs, zs = rng.standard_normal((6, 3)), Tensor(rng.standard_normal((6, 2)), True)
        b = PairBatch(xs, zs, NegativeSampler("shuffle", rng=rng).draw(6, num_negatives=3))
        for name in ("dv", "jsd", "nce"):
            worst[f"mi {name}"] = max(grad_check(lambda _: mi.estimate(name, d, b), t)
                                      for t in [zs, *d.params().values()])

        bank = MomentProjectorBank.init(rng, 2, 4)
        a = Tensor(rng.uniform(-1, 1, (2, 2, 3, 3)), True)
        gm = rng.standard_normal((2, 8, 3, 3))
        mm_loss = lambda _: T.sum(T.mul(mixed_moments(bank, a).mixed, Tensor(gm)))  # noqa: E731
        worst["mhmf k=4"] = max(grad_check(mm_loss, t) for t in [a, *bank.params().values()])

        lam = ClassWeights((1.0, 1.0, 20.0))
        ens = ExpertEnsemble(rng, 6, 3, s=3, hidden=5)
        f = Tensor(rng.standard_normal((4, 6)), True)
        head_loss = lambda _: ensemble_loss(ens, f, [0, 1, 2, 0], lam)[0]  # noqa: E731
        worst["multi-expert head"] = max(grad_check(head_loss, t) for t in [f, *ens.params().values()])

        cfg = TrainConfig(alpha=0.4, widths=(2, 3, 4), image_size=12, hidden=6, negatives=2)
        model = RCoNet(cfg)
        for name, t in model.params().items():
            if ".offset." in name:
                t.data = rng.normal(0.0, 0.05, t.shape)
        xm = rng.random((4, 1, 12, 12))
        ym = np.array([0, 1, 2, 1])
        full = lambda _: loss_terms(model, xm, ym, cfg, np.random.default_rng(4)).total  # noqa: E731
        worst["total loss"] = max(grad_check(full, t, coords=pick.choice(t.size, min(t.size, 6), False))
                                  for t in model.params().values())

        elapsed = time.perf_counter() - start
        top = max(worst, key=worst.get)
        notes.append(f"max rel. error {worst[top]:.2e} ({top}), {elapsed:.1f} s")
        failing = {k: v for k, v in worst.items() if v >= TOL_GRAD}
        assert not failing, failing
        assert elapsed < 60


# ----------------------------------------------------------------------- 2

@pytest.mark.slow
def test_criterion_02_mi_estimators(criterion):
    with criterion(2, "MI estimators on bivariate Gaussians") as notes:
        rng = np.random.default_rng(0)
        b = PairBatch(rng.standard_normal((8, 1)), rng.standard_normal((8, 1)),
                      NegativeSampler("shuffle", rng=rng).draw(8, num_negatives=1))
        jsd0 = mi.estimate_jsd(Discriminator.constant(2, 0.0), b).item()
        notes.append(f"JSD(T=0) {jsd0:.15f}")
        failures = []
        for rho in (0.0, 0.5, 0.8):
            truth = mi.gaussian_mi(rho)
            start = time.perf_counter()
            dv = mi.train_gaussian_estimator("dv", rho, samples=10_000)[0][-1][2]
            nce = mi.train_gaussian_estimator("nce", rho, samples=10_000, negatives=16)[0][-1][2]
            elapsed = time.perf_counter() - start
            notes.append(f"rho={rho}: DV {dv:.4f} NCE {nce:.4f} vs {truth:.4f} ({elapsed:.0f} s)")
            if abs(dv - truth) > 0.10 or abs(nce - truth) > 0.15 or elapsed > 120:
                failures.append(rho)
        assert jsd0 == -2 * math.log(2)
        assert not failures, failures


# ----------------------------------------------------------------------- 3

def test_criterion_03_deformable_reduction(criterion):
    with criterion(3, "deformable convolution reduces to conv2d") as notes:
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(100):
            k = int(rng.choice([1, 3, 5]))
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, k))
            h, w = (int(v) for v in rng.integers(k, k + 6, size=2))
            p = conv_params(rng, int(rng.integers(1, 4)), int(rng.integers(1, 4)), k, stride, pad)
            x = rng.standard_normal((2, p.weight.shape[1], h, w))
            ho, wo = p.output_size(h, w)
            out = deform_conv2d(x, p, np.zeros((2, 2 * k * k, ho, wo)))
            worst = max(worst, float(np.max(np.abs(out.data - conv2d(x, p).data))))
        yy, xx = np.mgrid[0:9, 0:9].astype(float)
        unit = ConvParams(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        affine_err = 0.0
        for _ in range(20):
            cy, cx, c0 = rng.uniform(-2, 2, 3)
            img = cy * yy + cx * xx + c0
            off = rng.uniform(-0.99, 0.99, size=(2, 9, 9))
            out = deform_conv2d(img[None], unit, off).data[0]
            ty, tx = yy + off[0], xx + off[1]
            inside = (ty >= 0) & (ty <= 8) & (tx >= 0) & (tx <= 8)
            affine_err = max(affine_err, float(np.max(np.abs(out - (cy * ty + cx * tx + c0))[inside])))
        notes.append(f"zero-offset max diff {worst:.1e}, affine max diff {affine_err:.1e}")
        assert worst < 1e-12
        assert affine_err < 1e-10


# ----------------------------------------------------------------------- 4

def test_criterion_04_mhmf_equivalence(criterion):
    with criterion(4, "mixed moment recursion") as notes:
        worst = 0.0
        for k in range(1, 7):
            rng = np.random.default_rng(k)
            bank = MomentProjectorBank.init(rng, 3, k)
            for i in range(k):
                bank.biases[i].data = rng.uniform(-0.5, 0.5, 3)
            a = rng.standard_normal((2, 3, 4, 5))
            direct = np.ones_like(a)
            for r in range(1, k + 1):
                w, b = bank.weights[r - 1].data, bank.biases[r - 1].data
                direct = direct * (np.einsum("oc,nchw->nohw", w, a) + b[None, :, None, None])
                worst = max(worst, float(np.max(np.abs(moment_order(bank, a, r).data - direct))))
            assert mixed_moments(bank, a).mixed.shape == (2, k * 3, 4, 5)
        a = np.random.default_rng(9).uniform(-2, 2, (2, 2, 3, 3))
        ident = MomentProjectorBank.identity(2, 6)
        for r in range(1, 7):
            assert np.array_equal(moment_order(ident, a, r).data, np.prod([a] * r, axis=0))
        notes.append(f"recursion vs direct product max diff {worst:.1e}")
        assert worst < 1e-12
        rows, _ = mhmf.mixture_demo(seed=0, max_order=4, n=350)
        assert rows


# ----------------------------------------------------------------------- 5

def test_criterion_05_mul_algebra(criterion):
    with criterion(5, "multi-expert uncertainty algebra") as notes:
        lam = ClassWeights((1.0, 1.0, 20.0))
        rng = np.random.default_rng(5)
        ens = ExpertEnsemble(rng, 6, 3, s=3, hidden=5, rates=(0.0, 0.0, 0.0))
        f = rng.standard_normal((4, 6))
        lm, per = ensemble_loss(ens, f, [0, 1, 2, 0], lam)
        assert uncertainty_sigma(per) == 0.0
        assert abs(uncertainty_sigma([0.2, 0.4]) - 0.01) < 1e-15
        ens = ExpertEnsemble(rng, 6, 3, s=4, hidden=5)
        lm, per = ensemble_loss(ens, f, [0, 1, 2, 0], lam)
        vals = [p.item() for p in per]
        assert min(vals) <= lm.item() <= max(vals)
        ce = weighted_ce(np.array([0.1, 0.1, 0.8]), np.eye(3)[2], lam).item()
        assert abs(ce - (-(1 / 3) * 20 * math.log(0.8))) < 1e-9
        assert abs(ce - 1.48762) < 1e-5
        sizes = {sum(p.size for p in ExpertEnsemble(rng, 6, 3, s=s, hidden=5).params().values())
                 for s in (1, 2, 4, 8)}
        assert len(sizes) == 1
        notes.append(f"weighted CE {ce:.9f}")


# ----------------------------------------------------------------------- 6

def test_criterion_06_noise_injection(criterion):
    with criterion(6, "label-noise counts and class-2 balance") as notes:
        labels = np.repeat(np.arange(3), REFERENCE_TRAIN_COUNTS)
        before = LabeledDataset(np.zeros((labels.size, 1, 1, 1)), labels)
        after = inject_label_noise(before, NoiseSpec(0.1, 0))
        table = [(r[1], r[2]) for r in noise_table(before, after)]
        notes.append(f"clean/noise {table}")
        assert table == [(7170, 796), (4906, 545), (187, 20)]
        for ratio in (0.1, 0.2, 0.3):
            for seed in range(3):
                out = inject_label_noise(before, NoiseSpec(ratio, seed))
                inflow, outflow = inflow_outflow(before, out, 2)
                assert inflow == outflow == int(math.floor(ratio * 207 + 1e-9))


# ----------------------------------------------------------------------- 7

@pytest.mark.slow
def test_criterion_07_noise_trend(criterion):
    with criterion(7, "uncertainty rises and accuracy falls with label noise") as notes:
        start = time.perf_counter()
        results = noise_sweep()
        elapsed = time.perf_counter() - start
        trend = noise_trend(results)
        notes.append("mean sigma " + ", ".join(f"{v:.5f}" for v in trend.mean_sigma))
        notes.append("mean ACC " + ", ".join(f"{v:.4f}" for v in trend.mean_acc))
        notes.append("p " + ", ".join(f"{p:.4f}" for p in trend.sigma_p_values))
        notes.append(f"{elapsed / 60:.1f} min")
        assert trend.clean_acc >= 0.90
        assert trend.sigma_increasing
        assert trend.acc_degrading
        assert elapsed <= 30 * 60


# ----------------------------------------------------------------------- 8

@pytest.mark.slow
def test_criterion_08_alpha_sensitivity(criterion):
    with criterion(8, "accuracy is insensitive to the MI weight") as notes:
        means, spread = alpha_spread(alpha_sweep())
        notes.append("mean ACC " + ", ".join(f"alpha={a}: {v:.4f}" for a, v in means.items()))
        notes.append(f"spread {100 * spread:.2f} pp")
        assert spread <= 0.03
        assert means[0.2] >= means[0.0]


# ----------------------------------------------------------------------- 9

def test_criterion_09_metrics(criterion):
    with criterion(9, "metric formulas on hand-built confusion matrices") as notes:
        v = compute_metrics(ConfusionMatrix(np.array([[95, 5], [10, 90]]))).per_class[1].values
        expected = {"ACC": 0.925, "SEN": 0.9, "SPE": 0.95, "BAC": 0.925, "PPV": 90 / 95}
        for key, want in expected.items():
            assert abs(v[key] - want) < 1e-12, key
        assert abs(v["PPV"] - 0.9474) < 1e-4
        assert binary_metrics(31, 100, 4, 0)[0]["SEN"] == 1.0
        f1 = binary_metrics(8, 82, 8, 2)[0]
        assert abs(f1["ACC"] - 0.9) < 1e-12 and abs(f1["SEN"] - 0.8) < 1e-12
        assert abs(f1["F1"] - 2 * 0.72 / 1.7) < 1e-12
        notes.append(f"accuracy-sensitivity F1 {f1['F1']:.5f}")


# ----------------------------------------------------------------------- 10

def test_criterion_10_determinism(criterion, tmp_path, monkeypatch, capsys):
    with criterion(10, "deterministic runs and bit-exact round trips") as notes:
        monkeypatch.setenv("RCONET_THREADS", "1")
        data = tmp_path / "d.rcds"
        assert main(["gen", "--out", str(data), "--counts", "10,8,6", "--seed", "3"]) == 0
        manifests = []
        for run in ("a", "b"):
            assert main(["train", "--data", str(data), "--out", str(tmp_path / run), "--epochs", "1",
                         "--folds", "2", "--hidden", "8"]) == 0
            doc = json.loads((tmp_path / run / "manifest.json").read_text())
            doc.pop("timings")
            manifests.append(doc)
        capsys.readouterr()
        assert manifests[0] == manifests[1]

        d = inject_label_noise(generate_synthetic(SyntheticSpec((12, 10, 8), seed=4)), NoiseSpec(0.2, 1))
        raw = dataset_to_bytes(d)
        assert dataset_to_bytes(dataset_from_bytes(raw)) == raw

        cfg = TrainConfig(widths=(4, 6, 8), hidden=8, negatives=2, epochs=1)
        model = RCoNet(cfg)
        _, opt = fit(model, d, cfg)
        blob = to_bytes(model, opt)
        assert to_bytes(*from_bytes(blob)) == blob
        notes.append(f"{len(manifests[0]['artifacts'])} artifacts matched, checkpoint {len(blob)} bytes")


def test_default_config_is_the_best_setting():
    """The sweeps use k = 4, s = 4, alpha = 0.2."""
    cfg = TrainConfig()
    assert (cfg.k, cfg.s, cfg.alpha) == (4, 4, 0.2)
    assert replace(cfg, alpha=0.4).alpha == 0.4
