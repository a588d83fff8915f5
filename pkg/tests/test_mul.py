"""Multi-expert head: weighted cross-entropy, expert losses, uncertainty."""

import math
import warnings

import numpy as np
import pytest

from rconet import tensor as T
from rconet.errors import ContractError, NumericWarning
from rconet.layers import DropoutMask
from rconet.mul import (
    ClassWeights,
    ExpertEnsemble,
    ensemble_loss,
    ensemble_predict,
    expert_loss,
    inference_uncertainty,
    one_hot,
    uncertainty_sigma,
    weighted_ce,
)
from rconet.tensor import Tensor, grad_check

LAM = ClassWeights((1.0, 1.0, 20.0))


def ensemble(s=4, rates=None, in_dim=6, seed=0):
    return ExpertEnsemble(np.random.default_rng(seed), in_dim, 3, s=s, hidden=5, rates=rates)


class TestWeightedCE:
    def test_perfect_prediction(self):
        assert weighted_ce(np.eye(3)[1], np.eye(3)[1], LAM).item() == 0.0

    def test_hand_value(self):
        got = weighted_ce(np.array([0.1, 0.1, 0.8]), np.eye(3)[2], LAM).item()
        assert abs(got - (-(1 / 3) * 20 * math.log(0.8))) < 1e-12
        assert abs(got - 1.48762) < 1e-5

    def test_uniform_weights_scale_ce(self):
        p = np.array([[0.2, 0.5, 0.3], [0.6, 0.3, 0.1]])
        y = one_hot([1, 0], 3)
        got = weighted_ce(p, y, (1, 1, 1)).data
        np.testing.assert_allclose(got, -np.log([0.5, 0.6]) / 3)

    def test_linear_in_lambda(self):
        p, y = np.array([0.3, 0.3, 0.4]), np.eye(3)[2]
        base = weighted_ce(p, y, LAM).item()
        assert weighted_ce(p, y, (2.5, 2.5, 50.0)).item() == pytest.approx(2.5 * base)

    def test_zero_probability_clamped_with_warning(self):
        with pytest.warns(NumericWarning):
            v = weighted_ce(np.array([1.0, 0.0, 0.0]), np.eye(3)[2], LAM).item()
        assert v == pytest.approx(-(20 / 3) * math.log(1e-12))

    def test_no_warning_for_valid_input(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            weighted_ce(np.array([0.2, 0.3, 0.5]), np.eye(3)[0], LAM)

    @pytest.mark.parametrize("bad", [(1, 0, 1), (1, -2, 1), ()])
    def test_weights_positive(self, bad):
        with pytest.raises(ContractError):
            ClassWeights(bad)

    def test_grad_check(self):
        p = Tensor(np.array([[0.2, 0.3, 0.5], [0.7, 0.2, 0.1]]), True)
        assert grad_check(lambda t: T.sum(weighted_ce(t, one_hot([2, 0], 3), LAM)), p) < 1e-4


class TestSigma:
    def test_equal_losses(self):
        assert uncertainty_sigma([0.3, 0.3, 0.3]) == 0.0

    def test_pair(self):
        assert uncertainty_sigma([0.2, 0.4]) == pytest.approx(0.01, abs=1e-15)

    def test_pseudo_label_pair(self):
        assert uncertainty_sigma([0.01, 0.95]) == pytest.approx(0.2209, abs=1e-12)

    def test_shift_invariant(self):
        vals = np.array([0.1, 0.7, 0.35, 0.2])
        assert uncertainty_sigma(vals + 3.0) == pytest.approx(uncertainty_sigma(vals), abs=1e-12)

    def test_empty(self):
        with pytest.raises(ContractError):
            uncertainty_sigma([])


class TestExperts:
    def test_single_rate_zero_expert_is_plain_classifier(self):
        ens = ensemble(s=1, rates=(0.0,))
        f = np.random.default_rng(1).standard_normal((4, 6))
        probs = T.softmax(ens.classify(f), axis=-1)
        plain = T.mean(weighted_ce(probs, one_hot([0, 1, 2, 1], 3), LAM)).item()
        assert expert_loss(ens, 0, f, [0, 1, 2, 1], LAM).item() == pytest.approx(plain, abs=1e-15)

    def test_identical_masks_identical_losses(self):
        ens = ensemble(s=2)
        ens.train_masks[1] = DropoutMask(ens.train_masks[0].keep.copy(), ens.train_masks[0].rate)
        f = np.random.default_rng(2).standard_normal((3, 6))
        losses = [expert_loss(ens, j, f, [0, 1, 2], LAM).item() for j in range(2)]
        assert losses[0] == losses[1]

    def test_batch_mean_of_per_sample(self):
        ens = ensemble(s=3)
        f = np.random.default_rng(3).standard_normal((4, 6))
        labels = [2, 0, 1, 2]
        per = [expert_loss(ens, 1, f[i:i + 1], labels[i:i + 1], LAM).item() for i in range(4)]
        assert expert_loss(ens, 1, f, labels, LAM).item() == pytest.approx(np.mean(per), abs=1e-14)

    @pytest.mark.parametrize("j", [-1, 4])
    def test_index_range(self, j):
        with pytest.raises(ContractError):
            expert_loss(ensemble(s=4), j, np.zeros((2, 6)), [0, 1], LAM)

    def test_rate_cycle(self):
        assert ensemble(s=5).rates == (0.1, 0.3, 0.5, 0.1, 0.3)

    def test_masks_differ(self):
        ens = ensemble(s=4, in_dim=64)
        keeps = [m.keep.tobytes() for m in ens.train_masks]
        assert len(set(keeps)) == 4

    def test_parameter_count_independent_of_s(self):
        sizes = {sum(p.size for p in ensemble(s=s).params().values()) for s in (1, 2, 4, 8)}
        assert len(sizes) == 1

    def test_shared_weights_reach_every_expert(self):
        ens = ensemble(s=3)
        f = np.random.default_rng(4).standard_normal((3, 6))
        before = [expert_loss(ens, j, f, [0, 1, 2], LAM).item() for j in range(3)]
        ens.fc2.weight.data += np.random.default_rng(11).standard_normal(ens.fc2.weight.shape)
        after = [expert_loss(ens, j, f, [0, 1, 2], LAM).item() for j in range(3)]
        assert all(a != b for a, b in zip(before, after))


class TestEnsemble:
    def test_mean_within_bounds(self):
        ens = ensemble(s=4)
        f = np.random.default_rng(5).standard_normal((6, 6))
        lm, per = ensemble_loss(ens, f, [0, 1, 2, 0, 1, 2], LAM)
        vals = [p.item() for p in per]
        assert min(vals) <= lm.item() <= max(vals)
        assert lm.item() == pytest.approx(np.mean(vals), abs=1e-15)

    def test_rate_zero_experts_agree(self):
        ens = ensemble(s=3, rates=(0.0, 0.0, 0.0))
        f = np.random.default_rng(6).standard_normal((4, 6))
        lm, per = ensemble_loss(ens, f, [0, 1, 2, 0], LAM)
        assert lm.item() == pytest.approx(per[0].item(), abs=1e-15)
        assert uncertainty_sigma(per) == 0.0

    def test_grad_check(self):
        ens = ensemble(s=3)
        f = Tensor(np.random.default_rng(7).standard_normal((4, 6)), True)
        loss = lambda _: ensemble_loss(ens, f, [0, 1, 2, 0], LAM)[0]  # noqa: E731
        for t in [f, *ens.params().values()]:
            assert grad_check(loss, t) < 1e-4

    def test_single_expert_predict(self):
        ens = ensemble(s=1)
        f = np.random.default_rng(8).standard_normal((3, 6))
        probs, _ = ensemble_predict(ens, f)
        np.testing.assert_allclose(probs, ens.expert_probs(Tensor(f), 0, "eval").data)

    def test_probability_average(self, monkeypatch):
        ens = ensemble(s=2)
        table = [np.array([[0.6, 0.3, 0.1]]), np.array([[0.2, 0.7, 0.1]])]
        monkeypatch.setattr(ens, "expert_probs", lambda f, j, mode="train": Tensor(table[j]))
        probs, pred = ensemble_predict(ens, np.zeros((1, 6)))
        np.testing.assert_allclose(probs, [[0.4, 0.5, 0.1]])
        assert pred[0] == 1

    def test_inference_is_deterministic(self):
        ens = ensemble(s=4)
        f = np.random.default_rng(9).standard_normal((5, 6))
        assert np.array_equal(ensemble_predict(ens, f)[0], ensemble_predict(ens, f)[0])

    def test_agreeing_experts_have_zero_sigma(self):
        ens = ensemble(s=3, rates=(0.0, 0.0, 0.0))
        for m in ens.frozen_masks:
            m.keep[:] = 1.0
        rep = inference_uncertainty(ens, np.random.default_rng(10).standard_normal((4, 6)), LAM)
        assert np.all(rep.sigma == 0.0)
        np.testing.assert_allclose(rep.sigma_predictive, 0.0, atol=1e-30)

    def test_pseudo_label_sigma(self, monkeypatch):
        ens = ensemble(s=2)
        # pseudo-label class 0; losses -(1/3) ln p -> choose p to give 0.01 and 0.95
        p1, p2 = math.exp(-0.03), math.exp(-2.85)
        table = [np.array([[p1, (1 - p1) / 2, (1 - p1) / 2]]),
                 np.array([[p2, (1 - p2) * 0.3, (1 - p2) * 0.7]])]
        monkeypatch.setattr(ens, "expert_probs", lambda f, j, mode="train": Tensor(table[j]))
        rep = inference_uncertainty(ens, np.zeros((1, 6)), LAM)
        np.testing.assert_allclose(rep.per_expert_losses[0], [0.01, 0.95])
        assert rep.sigma[0] == pytest.approx(0.2209, abs=1e-12)
