import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from faust import tensor as T
from faust.gradcheck import numeric_grad, rel_error

finite = st.floats(-1e3, 1e3, allow_nan=False, width=64)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(np.eye(2), a), a)

    def test_hand_computed(self):
        assert T.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).tolist() == [[11.0]]

    def test_matches_triple_loop(self, rng):
        a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
        ref = np.zeros((5, 3))
        for i in range(5):
            for j in range(3):
                for k in range(4):
                    ref[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(T.matmul(a, b), ref, rtol=0, atol=1e-12)

    def test_float32_storage(self, rng):
        a = rng.normal(size=(3, 4)).astype(np.float32)
        assert T.matmul(a, a.T).dtype == np.float32

    def test_shape_mismatch(self):
        with pytest.raises(T.DimensionError):
            T.matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestRelu:
    def test_mixed(self):
        y, mask = T.relu(np.array([-1.0, 0.0, 2.0]))
        assert y.tolist() == [0, 0, 2] and mask.tolist() == [0, 0, 1]

    def test_all_positive(self):
        x = np.array([0.5, 1.0, 3.0])
        y, mask = T.relu(x)
        np.testing.assert_array_equal(y, x)
        assert mask.all()

    def test_all_negative(self):
        y, mask = T.relu(-np.ones(4))
        assert not y.any() and not mask.any()


class TestL2Normalize:
    def test_345(self):
        y, n = T.l2_normalize(np.array([3.0, 4.0]), eps=0.0)
        np.testing.assert_allclose(y, [0.6, 0.8])
        assert n == 5

    def test_zero_vector(self):
        y, n = T.l2_normalize(np.zeros(4))
        assert not y.any() and n == 0

    def test_scalar_loop_oracle(self, rng):
        x = rng.normal(size=9)
        s = 0.0
        for v in x:
            s += v * v
        ref = [v / (s ** 0.5 + 1e-8) for v in x]
        np.testing.assert_allclose(T.l2_normalize(x)[0], ref, rtol=0, atol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=finite))
    def test_rows_have_norm_at_most_one(self, x):
        y, _ = T.l2_normalize(x)
        assert np.all(np.linalg.norm(y, axis=1) <= 1 + 1e-12)


class TestL2NormalizeBackward:
    def test_matches_finite_differences(self, rng):
        for _ in range(20):
            x, g = rng.normal(size=6), rng.normal(size=6)
            num = numeric_grad(lambda: float(g @ T.l2_normalize(x)[0]), x)
            assert rel_error(T.l2_normalize_backward(g, x), num) < 1e-4

    def test_radial_direction_is_projected_out(self, rng):
        # normalization is scale invariant, so J^T applied to x itself vanishes
        x = rng.normal(size=8) * 3
        g = x.copy()
        num = numeric_grad(lambda: float(g @ T.l2_normalize(x, eps=0.0)[0]), x)
        got = T.l2_normalize_backward(g, x, eps=0.0)
        np.testing.assert_allclose(got, 0.0, atol=1e-12)
        np.testing.assert_allclose(num, 0.0, atol=1e-6)

    def test_zero_grad(self, rng):
        x = rng.normal(size=5) * 10
        assert not T.l2_normalize_backward(np.zeros(5), x).any()

    def test_matches_torch_autograd(self, rng):
        x, g = rng.normal(size=(4, 7)), rng.normal(size=(4, 7))
        xt = torch.tensor(x, requires_grad=True)
        (xt / (xt.norm(dim=1, keepdim=True) + 1e-8)).backward(torch.tensor(g))
        np.testing.assert_allclose(T.l2_normalize_backward(g, x), xt.grad.numpy(), rtol=1e-10)

    def test_zero_input_is_finite(self):
        out = T.l2_normalize_backward(np.ones(3), np.zeros(3))
        assert np.all(np.isfinite(out))


class TestLayerNorm:
    def test_matches_torch(self, rng):
        x, g = rng.normal(size=(4, 7)), rng.normal(size=(4, 7))
        xt = torch.tensor(x, requires_grad=True)
        yt = torch.nn.functional.layer_norm(xt, (7,), eps=1e-5)
        yt.backward(torch.tensor(g))
        y, std = T.layer_norm(x)
        np.testing.assert_allclose(y, yt.detach().numpy(), rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(T.layer_norm_backward(g, y, std), xt.grad.numpy(),
                                   rtol=1e-8, atol=1e-12)


class TestAdam:
    def test_first_step_moves_by_lr(self):
        w = np.ones(4)
        T.adam_step(w, np.ones(4), T.AdamState.like(w, lr=1e-3))
        np.testing.assert_allclose(1.0 - w, 1e-3, rtol=1e-6)

    def test_zero_grad_no_change(self):
        w = np.array([0.3, -2.0])
        T.adam_step(w, np.zeros(2), T.AdamState.like(w))
        assert w.tolist() == [0.3, -2.0]

    def test_quadratic_trajectory_matches_recurrence(self):
        w = np.array([1.0])
        state = T.AdamState.like(w)
        m = v = 0.0
        ref = 1.0
        prev = 1.0
        for t in range(1, 101):
            g = 2 * ref
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref -= 1e-3 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            T.adam_step(w, 2 * w, state)
            assert abs(w[0] - ref) < 1e-10
            assert w[0] < prev
            prev = w[0]

    def test_matches_torch_adam(self, rng):
        w0 = rng.normal(size=(3, 4))
        grads = rng.normal(size=(25, 3, 4))
        w = w0.copy()
        state = T.AdamState.like(w)
        wt = torch.tensor(w0, requires_grad=True)
        opt = torch.optim.Adam([wt], lr=1e-3, betas=(0.9, 0.999), eps=1e-8)
        for g in grads:
            T.adam_step(w, g, state)
            wt.grad = torch.tensor(g)
            opt.step()
        np.testing.assert_allclose(w, wt.detach().numpy(), rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        w = np.zeros(3)
        with pytest.raises(T.DimensionError):
            T.adam_step(w, np.zeros(4), T.AdamState.like(w))
