"""Masking, image-text matching, task heads and loss composition."""

import math

import numpy as np
import pytest

from vldistill.autograd import Tensor, grad_check
from vldistill.losses import DistillConfig
from vldistill.objectives import (
    EmptyWordSegment,
    TaskHead,
    answer_loss,
    finetune_total,
    greedy_decode,
    itm_choose,
    itm_loss,
    itm_make_pair,
    mask_tokens,
    mlm_loss,
    num_to_mask,
    pretrain_total,
)
from vldistill.rng import Rng
from vldistill.tokens import MASK, ConfigError, Limits, collate, generate_corpus
from vldistill.transformer import ForwardTrace, Transformer, TransformerConfig


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(8, seed=0)


def trace_of(hidden, pooled=None):
    h = hidden if isinstance(hidden, Tensor) else Tensor(np.asarray(hidden, dtype=np.float64))
    return ForwardTrace([h], [], pooled, np.ones(h.shape[:-1], bool))


class TestMasking:
    @pytest.mark.parametrize("n,k", [(1, 1), (6, 1), (7, 2), (13, 2), (14, 3), (20, 3), (100, 15)])
    def test_ceiling_rule(self, n, k):
        assert num_to_mask(n) == k == math.ceil(0.15 * n - 1e-12)

    def test_positions_inside_word_segment(self, corpus):
        seq = corpus[0].sequence("light", "student")
        masked, plan = mask_tokens(seq, Rng(0, "mask"))
        assert set(plan.positions) <= set(seq.word_positions)
        assert np.all(masked.ids[plan.positions] == MASK)
        np.testing.assert_array_equal(plan.original_ids, seq.ids[plan.positions])
        untouched = np.setdiff1d(np.arange(len(seq.ids)), plan.positions)
        np.testing.assert_array_equal(masked.ids[untouched], seq.ids[untouched])
        assert plan.rng_stream == "mask"

    def test_input_not_mutated(self, corpus):
        seq = corpus[1].sequence("light", "student")
        before = seq.ids.copy()
        mask_tokens(seq, Rng(0, "mask"))
        np.testing.assert_array_equal(seq.ids, before)

    def test_empty_word_segment(self, corpus):
        seq = corpus[0].sequence("light", "student", caption=[])
        with pytest.raises(EmptyWordSegment):
            mask_tokens(seq, Rng(0, "mask"))

    def test_deterministic_per_stream(self, corpus):
        seq = corpus[2].sequence("light", "student")
        a = mask_tokens(seq, Rng(3, "mask").child(1))[1].positions
        b = mask_tokens(seq, Rng(3, "mask").child(1))[1].positions
        np.testing.assert_array_equal(a, b)


class TestMlm:
    def test_uniform_logits_give_ln_v(self):
        head = TaskHead("mlm_vocab", Tensor(np.zeros((4, 11))), Tensor(np.zeros(11)))
        seq_h = np.random.default_rng(0).normal(size=(1, 6, 4))
        _, plan = None, None
        from vldistill.objectives import MaskingPlan
        plan = MaskingPlan(np.array([1, 3]), np.array([5, 9]), "mask")
        loss, logits, targets = mlm_loss(trace_of(seq_h), head, [plan])
        assert abs(float(loss.data) - math.log(11)) < 1e-12
        assert logits.shape == (2, 11) and targets.tolist() == [5, 9]

    def test_none_rows_skipped_and_empty_rejected(self):
        from vldistill.objectives import MaskingPlan
        head = TaskHead("mlm_vocab", Tensor(np.zeros((4, 5))), Tensor(np.zeros(5)))
        h = np.zeros((2, 3, 4))
        plan = MaskingPlan(np.array([2]), np.array([1]), "mask")
        _, _, targets = mlm_loss(trace_of(h), head, [None, plan])
        assert targets.tolist() == [1]
        with pytest.raises(ValueError):
            mlm_loss(trace_of(h), head, [None, None])

    def test_gradient(self):
        from vldistill.objectives import MaskingPlan
        rng = np.random.default_rng(1)
        h = Tensor(rng.normal(size=(2, 5, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 7)), requires_grad=True)
        b = Tensor(rng.normal(size=7), requires_grad=True)
        plans = [MaskingPlan(np.array([1, 2]), np.array([3, 0]), "m"),
                 MaskingPlan(np.array([4]), np.array([6]), "m")]
        f = lambda h_, w_, b_: mlm_loss(trace_of(h_), TaskHead("mlm_vocab", w_, b_), plans)[0]
        assert grad_check(f, [h, w, b]) < 1e-6


class TestItm:
    def test_mismatch_rate(self):
        labels = [itm_choose(100, Rng(0, "itm").child(i))[2] for i in range(4000)]
        assert abs(1 - np.mean(labels) - 0.5) < 0.03

    def test_swapped_caption_is_from_another_record(self):
        for i in range(500):
            idx, src, label = itm_choose(5, Rng(1, "itm").child(i), index=2)
            assert idx == 2
            assert (src == idx) == (label == 1)

    def test_needs_two_records(self):
        with pytest.raises(ValueError):
            itm_choose(1, Rng(0))

    def test_pair_sequence_uses_source_caption(self, corpus):
        for i in range(20):
            r = Rng(2, "itm").child(i)
            idx, src, label = itm_choose(len(corpus), Rng(2, "itm").child(i), index=0)
            seq, lab = itm_make_pair(corpus, r, index=0)
            assert lab == label
            n = len(corpus[src].caption[:Limits().cap_len])
            assert seq.ids[1:1 + n].tolist() == corpus[src].caption[:n]

    def test_zero_logit_is_ln2(self):
        head = TaskHead("itm_binary", Tensor(np.zeros((3, 1))), Tensor(np.zeros(1)))
        pooled = Tensor(np.ones((2, 3)))
        for label in ([0, 0], [1, 1]):
            tr = ForwardTrace([], [], pooled, None)
            assert abs(float(itm_loss(tr, head, label).data) - math.log(2)) < 1e-7


class TestAnswer:
    def test_shapes_and_value(self):
        head = TaskHead("answer_classifier", Tensor(np.zeros((3, 4))), Tensor(np.zeros(4)))
        tr = ForwardTrace([], [], Tensor(np.ones((5, 3))), None)
        loss, logits = answer_loss(tr, head, np.arange(5) % 4)
        assert logits.shape == (5, 4)
        assert abs(float(loss.data) - math.log(4)) < 1e-6


class TestComposition:
    losses = {k: Tensor(np.float64(v)) for k, v in
              dict(mlm=1.5, itm=0.5, att=0.2, hid=0.3, ce=2.0, cls=0.7).items()}

    def test_pretrain_total(self):
        got = float(pretrain_total(self.losses, DistillConfig(alpha=10, beta=10)).data)
        assert abs(got - (1.5 + 0.5 + 2.0 + 3.0)) < 1e-12

    def test_zero_weights_drop_terms(self):
        partial = {"mlm": self.losses["mlm"], "itm": self.losses["itm"]}
        got = float(pretrain_total(partial, DistillConfig.off()).data)
        assert got == 2.0

    def test_vlp_weight(self):
        got = float(pretrain_total(self.losses, DistillConfig(vlp_weight=0.0)).data)
        assert abs(got - 5.0) < 1e-12
        got = float(pretrain_total(self.losses, DistillConfig(vlp_weight=0.5, alpha=0, beta=0)).data)
        assert abs(got - 1.0) < 1e-12
        with pytest.raises(ConfigError):
            pretrain_total(self.losses, DistillConfig(vlp_weight=0.0, alpha=0, beta=0))

    def test_finetune_total(self):
        c = DistillConfig(alpha=1, beta=0, cls_weight=10)
        assert abs(float(finetune_total(self.losses, c).data) - (2.0 + 7.0 + 0.2)) < 1e-12
        assert float(finetune_total({"ce": self.losses["ce"]}, DistillConfig.off()).data) == 2.0

    def test_total_gradients(self):
        rng = np.random.default_rng(3)
        xs = [Tensor(rng.normal(size=3), requires_grad=True) for _ in range(4)]

        def f(a, b, c, d):
            parts = dict(mlm=(a * a).sum(), itm=(b * a).sum(), att=(c * c * c).sum(), hid=(d * b).sum())
            return pretrain_total(parts, DistillConfig(alpha=10, beta=3))

        assert grad_check(f, xs) < 1e-6

        def g(a, b, c, d):
            parts = dict(ce=(a * a).sum(), cls=(b * c).sum(), att=(c * c).sum(), hid=(d * d * a).sum())
            return finetune_total(parts, DistillConfig(alpha=2, beta=3, cls_weight=1))

        assert grad_check(g, xs) < 1e-6


def test_greedy_decode_respects_capacity(corpus):
    cfg = TransformerConfig.student(visual_dim=22, max_tokens=Limits().total)
    model = Transformer.init(cfg, Rng(0, "init"))
    seq = corpus[0].sequence("light", "student")
    words = greedy_decode(model, seq)
    assert len(words) <= Limits().cap_len
    assert words == greedy_decode(model, seq)
    with pytest.raises(ValueError):
        greedy_decode(model, seq, max_len=Limits().cap_len + 1)
