import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hkd import autodiff as ad
from hkd import losses
from hkd.autodiff import ShapeError, Tensor
from hkd.losses import LossWeights

import oracles


def _onehot_probs(labels, Y):
    o = np.zeros(labels.shape + (Y,))
    np.put_along_axis(o, labels[..., None], 1.0, axis=-1)
    return o


def _random_probs(rng, shape):
    x = rng.normal(size=shape)
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


class TestHardTarget:
    def test_perfect_prediction_zero(self):
        labels = np.array([[0, 2, 1]])
        o = _onehot_probs(labels, 3)
        assert losses.hard_target_loss(Tensor(o), labels, [3]).item() == 0.0

    def test_uniform_43(self):
        o = np.full((2, 4, 43), 1 / 43)
        loss = losses.hard_target_loss(Tensor(o), np.zeros((2, 4), int), [4, 2]).item()
        assert abs(loss - math.log(43)) <= 1e-9

    def test_nesting_order(self):
        # Per-utterance CE values a, b, c, d come from chosen reference probabilities.
        p = np.array([[0.5, 0.0, 0.0], [0.25, 0.125, 0.8]])
        o = np.zeros((2, 3, 2))
        o[..., 0] = p
        o[..., 1] = 1 - p
        o[0, 1:] = 0.5  # padding rows; must be ignored
        labels = np.zeros((2, 3), int)
        a, b, c, d = (-math.log(v) for v in (0.5, 0.25, 0.125, 0.8))
        got = losses.hard_target_loss(Tensor(o), labels, [1, 3]).item()
        assert abs(got - (a + (b + c + d) / 3) / 2) <= 1e-12
        assert abs(got - (a + b + c + d) / 4) > 1e-3

    def test_zero_probability_is_clamped_and_flagged(self):
        o = np.array([[[1.0, 0.0]]])
        diag = {}
        loss = losses.hard_target_loss(Tensor(o), np.array([[1]]), [1], diagnostics=diag).item()
        assert loss == pytest.approx(-math.log(1e-12))
        assert diag["clamped"] == 1

    def test_label_shape_mismatch(self):
        with pytest.raises(ShapeError):
            losses.hard_target_loss(Tensor(np.full((1, 2, 3), 1 / 3)), np.zeros((1, 3), int), [2])

    def test_matches_unbatched_oracle(self):
        rng = np.random.default_rng(0)
        lengths = [3, 1, 4]
        o = _random_probs(rng, (3, 4, 5))
        labels = rng.integers(0, 5, size=(3, 4))
        got = losses.hard_target_loss(Tensor(o), labels, lengths).item()
        per = [[-math.log(o[n, t, labels[n, t]]) for t in range(T)] for n, T in enumerate(lengths)]
        assert abs(got - oracles.nested_mean(per)) <= 1e-12

    def test_gradient(self):
        rng = np.random.default_rng(1)
        v = Tensor(rng.normal(size=(2, 3, 4)))
        labels = rng.integers(0, 4, size=(2, 3))
        err = ad.grad_check(lambda v: losses.hard_target_loss(ad.softmax(v), labels, [3, 2]), [v])
        assert err <= 1e-4


class TestSoftTarget:
    def test_reduces_to_hard_target_at_tau_one(self):
        rng = np.random.default_rng(2)
        labels = rng.integers(0, 5, size=(2, 4))
        # A one-hot teacher at temperature 1 needs logits with an infinite gap;
        # 800 is enough to make the other probabilities underflow to 0.
        teacher_logits = _onehot_probs(labels, 5) * 800.0
        assert (ad.softmax(Tensor(teacher_logits)).data == _onehot_probs(labels, 5)).all()
        student = Tensor(rng.normal(size=(2, 4, 5)))
        st_loss = losses.soft_target_loss(teacher_logits, student, 1.0, [4, 2]).item()
        ht_loss = losses.hard_target_loss(ad.softmax(student), labels, [4, 2]).item()
        assert abs(st_loss - ht_loss) <= 1e-9

    def test_self_is_tau_squared_entropy(self):
        rng = np.random.default_rng(3)
        v = rng.normal(scale=3, size=(2, 3, 6))
        tau = 5.0
        lengths = [3, 2]
        got = losses.soft_target_loss(v, Tensor(v), tau, lengths).item()
        ent = [[oracles.cross_entropy(oracles.softmax_temp(v[n, t], tau), oracles.softmax_temp(v[n, t], tau)) for t in range(T)]
               for n, T in enumerate(lengths)]
        assert abs(got - tau**2 * oracles.nested_mean(ent)) <= 1e-9

    def test_gradient_tau_5(self):
        rng = np.random.default_rng(4)
        teacher = rng.normal(scale=2, size=(2, 3, 4))
        student = Tensor(rng.normal(scale=2, size=(2, 3, 4)))
        err = ad.grad_check(lambda s: losses.soft_target_loss(teacher, s, 5.0, [3, 1]), [student])
        assert err <= 1e-4

    def test_no_gradient_reaches_teacher(self):
        rng = np.random.default_rng(5)
        teacher = Tensor(rng.normal(size=(1, 2, 3)), requires_grad=True)
        student = Tensor(rng.normal(size=(1, 2, 3)), requires_grad=True)
        loss = losses.soft_target_loss(teacher, student, 2.0, [2])
        grads = ad.backward(loss, [teacher, student])
        assert not grads[teacher].any()
        assert grads[student].any()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            losses.soft_target_loss(np.zeros((1, 2, 3)), Tensor(np.zeros((1, 2, 4))), 1.0, [2])

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), tau=st.floats(0.5, 10))
    def test_matches_unbatched_oracle(self, seed, tau):
        rng = np.random.default_rng(seed)
        lengths = [int(x) for x in rng.integers(1, 4, size=3)]
        t_logits = rng.normal(scale=2, size=(3, 3, 4))
        s_logits = rng.normal(scale=2, size=(3, 3, 4))
        got = losses.soft_target_loss(t_logits, Tensor(s_logits), tau, lengths).item()
        per = [[oracles.cross_entropy(oracles.softmax_temp(t_logits[n, t], tau), oracles.softmax_temp(s_logits[n, t], tau))
                for t in range(T)] for n, T in enumerate(lengths)]
        assert got == pytest.approx(tau**2 * oracles.nested_mean(per), rel=1e-10)
        assert got >= 0


class TestContextLosses:
    def test_identical_zero(self):
        s = np.random.default_rng(6).normal(size=(2, 3, 4))
        assert losses.utterance_context_loss(s, Tensor(s), [3, 2]).item() == 0.0
        assert losses.dialogue_context_loss(s, Tensor(s), [3, 2]).item() == 0.0

    def test_single_utterance(self):
        got = losses.utterance_context_loss(np.array([[[1.0, 0.0]]]), Tensor(np.array([[[0.0, 1.0]]])), [1]).item()
        assert got == 2.0

    @pytest.mark.parametrize("fn", [losses.utterance_context_loss, losses.dialogue_context_loss])
    def test_nesting_example(self, fn):
        # Per-utterance squared distances {2, 4} and {6}: ((2+4)/2 + 6)/2 = 4.5.
        teacher = np.zeros((2, 2, 2))
        student = np.zeros((2, 2, 2))
        student[0, 0] = [1, 1]
        student[0, 1] = [2, 0]
        student[1, 0] = [math.sqrt(6), 0]
        student[1, 1] = [100, 100]  # padding
        assert abs(fn(teacher, Tensor(student), [2, 1]).item() - 4.5) <= 1e-9

    def test_width_mismatch_names_both(self):
        with pytest.raises(ShapeError, match="8.*6"):
            losses.utterance_context_loss(np.zeros((1, 2, 8)), Tensor(np.zeros((1, 2, 6))), [2])

    def test_depth_constraint(self):
        with pytest.raises(ValueError):
            losses.dialogue_context_loss(np.zeros((1, 1, 2)), Tensor(np.zeros((1, 1, 2))), [1], teacher_depth=1, student_depth=2)

    def test_gradients(self):
        rng = np.random.default_rng(7)
        teacher = rng.normal(size=(2, 3, 4))
        student = Tensor(rng.normal(size=(2, 3, 4)))
        assert ad.grad_check(lambda s: losses.utterance_context_loss(teacher, s, [3, 2]), [student]) <= 1e-4
        assert ad.grad_check(lambda s: losses.dialogue_context_loss(teacher, s, [1, 3]), [student]) <= 1e-4


class TestCombined:
    def _terms(self, ht=1.0, st=2.0, uc=0.5, dc=0.5):
        return [Tensor(np.array(x)) for x in (ht, st, uc, dc)]

    def test_paper_weights_example(self):
        total, br = losses.combined_loss(*self._terms(), LossWeights())
        assert abs(total.item() - 1.25) <= 1e-9
        assert br.combined == total.item()

    def test_baseline_is_hard_target(self):
        ht, st_, uc, dc = self._terms()
        total, br = losses.combined_loss(ht, st_, uc, dc, LossWeights(lam=0, alpha=0, beta=0))
        assert total is ht
        assert br.st is None and br.uc is None and br.dc is None

    def test_zero_weight_bit_identical_to_omission(self):
        ht, st_, uc, dc = self._terms(0.3, 0.7, 1.9, 2.3)
        w = LossWeights(alpha=0.0)
        with_term, _ = losses.combined_loss(ht, st_, uc, dc, w)
        without, _ = losses.combined_loss(ht, st_, None, dc, w)
        assert with_term.data.tobytes() == without.data.tobytes()

    @pytest.mark.parametrize("kw", [{"lam": -0.1}, {"alpha": -1}, {"beta": -1e-9}, {"tau": 0}])
    def test_invalid_weights(self, kw):
        with pytest.raises(ValueError):
            LossWeights(**kw)

    @settings(max_examples=30, deadline=None)
    @given(vals=st.lists(st.floats(0, 100), min_size=4, max_size=4),
           ws=st.lists(st.floats(0, 2), min_size=3, max_size=3))
    def test_breakdown_identity(self, vals, ws):
        w = LossWeights(tau=1.0, lam=ws[0], alpha=ws[1], beta=ws[2])
        total, br = losses.combined_loss(*self._terms(*vals), w)
        expected = vals[0] + ws[0] * vals[1] + ws[1] * vals[2] + ws[2] * vals[3]
        assert abs(total.item() - expected) <= 1e-9 * max(1.0, abs(expected))
