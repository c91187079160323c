import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from faust import losses as L
from faust.gradcheck import numeric_grad, rel_error
from faust.tensor import DimensionError

small = st.floats(-3, 3, allow_nan=False, width=64)


def _t(x):
    return torch.tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


class TestGoodnessAndDistance:
    def test_goodness(self, rng):
        assert L.goodness(np.array([3.0, 4.0])) == 25
        assert L.goodness(np.zeros(5)) == 0
        v = rng.normal(size=11)
        assert abs(L.goodness(v) - sum(x * x for x in v)) < 1e-12

    def test_sq_dist(self, rng):
        a = rng.normal(size=4)
        assert L.sq_dist(a, a) == 0
        assert L.sq_dist(np.zeros(2), np.array([3.0, 4.0])) == 25
        b = rng.normal(size=4)
        assert L.sq_dist(a, b) == L.sq_dist(b, a)
        with pytest.raises(DimensionError):
            L.sq_dist(np.zeros(2), np.zeros(3))


class TestFF:
    def test_symmetry_point(self):
        assert L.ff_loss(2.0, 2.0, 2.0).value == pytest.approx(math.log(2), abs=1e-12)

    def test_saturated_is_stable(self):
        res = L.ff_loss(52.0, -48.0, 2.0)
        assert 0 <= res.value < 1e-20
        assert all(np.isfinite(g) for g in res.grads)

    def test_matches_torch(self, rng):
        gp, gn = rng.normal(2, 2, 6), rng.normal(2, 2, 6)
        tp, tn = _t(gp), _t(gn)
        ref = (0.5 * (torch.nn.functional.softplus(2.0 - tp) + torch.nn.functional.softplus(tn - 2.0))).mean()
        ref.backward()
        res = L.ff_loss(gp, gn, 2.0)
        assert res.value == pytest.approx(ref.item(), abs=1e-12)
        np.testing.assert_allclose(res.grads[0], tp.grad.numpy(), atol=1e-14)
        np.testing.assert_allclose(res.grads[1], tn.grad.numpy(), atol=1e-14)


class TestTriplet:
    def test_equal_points_give_alpha(self, rng):
        f = rng.normal(size=5)
        assert L.triplet_loss(f, f, f, 0.2).value == pytest.approx(0.2)

    def test_inactive_hinge(self):
        f = np.zeros(2)
        res = L.triplet_loss(f, np.array([1.0, 0.0]), np.array([2.0, 0.0]), alpha=1.0)
        assert res.value == 0
        assert all(not g.any() for g in res.grads)

    def test_matches_torch(self, rng):
        a, p, n = (rng.normal(size=(6, 4)) for _ in range(3))
        ta, tp, tn = _t(a), _t(p), _t(n)
        ref = torch.clamp(((ta - tp) ** 2).sum(1) - ((ta - tn) ** 2).sum(1) + 0.2, min=0).mean()
        ref.backward()
        res = L.triplet_loss(a, p, n, 0.2)
        assert res.value == pytest.approx(ref.item(), abs=1e-12)
        for g, t in zip(res.grads, (ta, tp, tn)):
            np.testing.assert_allclose(g, t.grad.numpy(), atol=1e-12)

    def test_finite_differences_active(self, rng):
        f, fp, fn = rng.normal(size=3), rng.normal(size=3) * 0.1, rng.normal(size=3) * 0.1
        fp = f + fp  # positive close, negative close: hinge active
        fn = f + fn
        res = L.triplet_loss(f, fp, fn, 1.0)
        for g, x in zip(res.grads, (f, fp, fn)):
            assert rel_error(g, numeric_grad(lambda: L.triplet_loss(f, fp, fn, 1.0).value, x)) < 1e-4

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=small))
    def test_nonnegative_and_zero_sum_grads(self, x):
        res = L.triplet_loss(x[0], x[1], x[2])
        assert res.value >= 0
        np.testing.assert_allclose(sum(res.grads), 0.0, atol=1e-9)


class TestTuplet:
    def test_equal_distances_nine_negatives(self):
        f = np.zeros(3)
        negs = np.tile([1.0, 0.0, 0.0], (9, 1))
        assert L.tuplet_loss(f, np.array([0.0, 1.0, 0.0]), negs).value == pytest.approx(math.log(10))

    def test_equal_distances_one_negative(self):
        assert L.tuplet_loss(np.zeros(2), np.array([1.0, 0]), np.array([[0, 1.0]])).value == \
            pytest.approx(math.log(2))

    def test_large_margin_is_finite(self):
        f = np.zeros(1)
        res = L.tuplet_loss(f, np.array([10.0]), np.array([[0.0]]))  # d+ - d- = 100
        assert res.value == pytest.approx(100.0, abs=1e-9)
        assert all(np.all(np.isfinite(g)) for g in res.grads)

    def test_single_negative_is_softplus(self, rng):
        f, fp, fn = rng.normal(size=(3, 5))
        direct = math.log1p(math.exp(L.sq_dist(f, fp) - L.sq_dist(f, fn)))
        assert L.tuplet_loss(f, fp, fn[None]).value == pytest.approx(direct, rel=1e-12)

    def test_matches_torch(self, rng):
        a, p = rng.normal(size=(2, 5, 3))
        n = rng.normal(size=(5, 4, 3))
        ta, tp, tn = _t(a), _t(p), _t(n)
        z = ((ta - tp) ** 2).sum(1, keepdim=True) - ((ta[:, None] - tn) ** 2).sum(2)
        ref = torch.log1p(torch.exp(z).sum(1)).mean()
        ref.backward()
        res = L.tuplet_loss(a, p, n)
        assert res.value == pytest.approx(ref.item(), abs=1e-12)
        for g, t in zip(res.grads, (ta, tp, tn)):
            np.testing.assert_allclose(g, t.grad.numpy(), atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (5, 3), elements=small))
    def test_positive_and_bounded_below_by_hinge(self, x):
        res = L.tuplet_loss(x[0], x[1], x[2:])
        z = L.sq_dist(x[0], x[1]) - L.sq_dist(x[0], x[2:])
        assert res.value > 0
        assert res.value >= max(z.max(), 0.0) - 1e-9

    def test_needs_a_negative(self):
        with pytest.raises(ValueError):
            L.tuplet_loss(np.zeros(2), np.zeros(2), np.zeros((0, 2)))


class TestReferenceTuplet:
    def test_matches_torch(self, rng):
        f, r = rng.normal(size=(6, 4)), rng.normal(size=(3, 4))
        labels = np.array([0, 1, 2, 2, 1, 0])
        tf, tr = _t(f), _t(r)
        d = ((tf[:, None] - tr[None]) ** 2).sum(2)
        ref = torch.nn.functional.cross_entropy(-d, torch.tensor(labels))
        ref.backward()
        res = L.reference_tuplet_loss(f, labels, r)
        assert res.value == pytest.approx(ref.item(), abs=1e-12)
        np.testing.assert_allclose(res.grads[0], tf.grad.numpy(), atol=1e-12)
        np.testing.assert_allclose(res.grads[1], tr.grad.numpy(), atol=1e-12)

    def test_equals_tuplet_with_references_as_partners(self, rng):
        f, r = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
        labels = np.array([1, 4, 0, 2])
        negs = np.stack([np.delete(r, c, axis=0) for c in labels])
        ref = L.tuplet_loss(f, r[labels], negs).value
        assert L.reference_tuplet_loss(f, labels, r).value == pytest.approx(ref, rel=1e-12)

    def test_self_anchor_bound(self, rng):
        r = rng.normal(size=(10, 6))
        res = L.reference_tuplet_loss(r[3:4], [3], r)
        direct = math.log1p(np.exp(-L.sq_dist(r[3], np.delete(r, 3, axis=0))).sum())
        assert res.value == pytest.approx(direct, rel=1e-12)
        assert res.value <= math.log(10)


class TestCrossEntropy:
    def test_uniform(self):
        assert L.cross_entropy(np.zeros((3, 10)), [0, 4, 9]).value == pytest.approx(math.log(10))

    def test_saturated(self):
        z = np.full((2, 4), -50.0)
        z[[0, 1], [1, 3]] = 50.0
        assert L.cross_entropy(z, [1, 3]).value < 1e-30

    def test_matches_torch(self, rng):
        z = rng.normal(size=(5, 4)) * 3
        labels = np.array([0, 3, 1, 1, 2])
        tz = _t(z)
        ref = torch.nn.functional.cross_entropy(tz, torch.tensor(labels))
        ref.backward()
        res = L.cross_entropy(z, labels)
        assert res.value == pytest.approx(ref.item(), abs=1e-12)
        np.testing.assert_allclose(res.grads[0], tz.grad.numpy(), atol=1e-14)

    def test_bad_labels(self):
        with pytest.raises(ValueError):
            L.cross_entropy(np.zeros((2, 3)), [0, 3])


def test_grads_keep_float32(rng):
    a = rng.normal(size=(4, 3)).astype(np.float32)
    res = L.triplet_loss(a, a[::-1].copy(), a * 0.5)
    assert all(g.dtype == np.float32 for g in res.grads)
