import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from blockattn import tensor as T
from oracles import conv1x1_oracle, conv3x3_oracle, mp_softmax_rows, triple_loop_matmul

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


class TestMatmul:
    def test_identity(self):
        out = T.matmul(np.eye(2), np.array([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out, [[3, 4], [5, 6]])

    def test_inner_product(self):
        assert T.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))[0, 0] == 11.0

    @pytest.mark.parametrize("seed", range(5))
    def test_bitwise_equal_to_triple_loop(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((7, 5))
        b = rng.standard_normal((5, 3))
        ref = triple_loop_matmul(a.tolist(), b.tolist())
        assert np.array_equal(T.matmul(a, b), ref)

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_rank_checked(self):
        with pytest.raises(T.ShapeError):
            T.matmul(np.ones(3), np.ones((3, 1)))

    def test_associativity(self, rng):
        for _ in range(20):
            m, k, l, n = rng.integers(1, 9, size=4)
            a, b, c = rng.standard_normal((m, k)), rng.standard_normal((k, l)), rng.standard_normal((l, n))
            left = T.matmul(T.matmul(a, b), c)
            right = T.matmul(a, T.matmul(b, c))
            np.testing.assert_allclose(left, right, rtol=1e-10, atol=1e-12)

    def test_blas_backend_close_to_exact(self, rng):
        a, b = rng.standard_normal((30, 40)), rng.standard_normal((40, 20))
        exact = T.matmul(a, b)
        with T.backend("blas"):
            fast = T.matmul(a, b)
        assert T.get_backend() == "exact"
        np.testing.assert_allclose(fast, exact, rtol=1e-12, atol=1e-12)

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            T.set_backend("gpu")

    def test_repeatable(self, rng):
        a, b = rng.standard_normal((9, 11)), rng.standard_normal((11, 4))
        assert np.array_equal(T.matmul(a, b), T.matmul(a.copy(), b.copy()))


class TestSoftmax:
    def test_uniform_row(self):
        np.testing.assert_array_equal(T.softmax_rows(np.zeros((1, 4))), [[0.25] * 4])

    def test_no_overflow(self):
        out = T.softmax_rows(np.array([[1000.0, 0.0]]))
        assert abs(out[0, 0] - 1.0) < 1e-12 and out[0, 1] < 1e-12

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_extended_precision(self, seed):
        x = np.random.default_rng(seed).standard_normal((4, 6)) * 3
        assert np.max(np.abs(T.softmax_rows(x) - mp_softmax_rows(x))) < 1e-14

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)), elements=finite))
    def test_rows_are_distributions(self, a):
        out = T.softmax_rows(a)
        assert T.is_finite(out)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(out > 0) and np.all(out <= 1)

    def test_rank_checked(self):
        with pytest.raises(T.ShapeError):
            T.softmax_rows(np.zeros(3))


class TestConv1x1:
    def test_identity(self, rng):
        x = rng.standard_normal((3, 4, 5))
        np.testing.assert_array_equal(T.conv1x1(x, np.eye(3), np.zeros(3)), x)

    def test_channel_sum(self):
        out = T.conv1x1(np.ones((2, 2, 2)), np.array([[1.0, 1.0]]), np.zeros(1))
        np.testing.assert_array_equal(out, np.full((1, 2, 2), 2.0))

    def test_matches_reshape_matmul_for_random_shapes(self, rng):
        for _ in range(100):
            c, co, h, w = (int(v) for v in rng.integers(1, 6, size=4))
            x = rng.standard_normal((c, h, w))
            wt, b = rng.standard_normal((co, c)), rng.standard_normal(co)
            ref = T.matmul(wt, x.reshape(c, h * w)).reshape(co, h, w) + b[:, None, None]
            assert np.array_equal(T.conv1x1(x, wt, b), ref)

    def test_matches_pointwise_oracle(self, rng):
        x = rng.standard_normal((3, 4, 4))
        wt, b = rng.standard_normal((2, 3)), rng.standard_normal(2)
        np.testing.assert_allclose(T.conv1x1(x, wt, b), conv1x1_oracle(x, wt, b), atol=1e-13)

    def test_shape_errors(self):
        with pytest.raises(T.ShapeError):
            T.conv1x1(np.ones((2, 3, 3)), np.ones((1, 3)), np.zeros(1))
        with pytest.raises(T.ShapeError):
            T.conv1x1(np.ones((2, 3, 3)), np.ones((1, 2)), np.zeros(2))


class TestConv3x3:
    def test_delta_kernel_is_identity(self, rng):
        x = rng.standard_normal((2, 5, 6))
        wt = np.zeros((2, 2, 3, 3))
        wt[0, 0, 1, 1] = wt[1, 1, 1, 1] = 1.0
        np.testing.assert_array_equal(T.conv3x3(x, wt, np.zeros(2)), x)

    def test_matches_direct_convolution(self, rng):
        x = rng.standard_normal((3, 5, 4))
        wt, b = rng.standard_normal((2, 3, 3, 3)), rng.standard_normal(2)
        np.testing.assert_allclose(T.conv3x3(x, wt, b), conv3x3_oracle(x, wt, b), atol=1e-12)

    def test_batched_matches_per_sample(self, rng):
        x = rng.standard_normal((3, 2, 6, 6))
        wt, b = rng.standard_normal((4, 2, 3, 3)), rng.standard_normal(4)
        batched = T.conv3x3(x, wt, b)
        for i in range(3):
            np.testing.assert_array_equal(batched[i], T.conv3x3(x[i], wt, b))

    def test_backward_matches_finite_differences(self, rng):
        from blockattn.gradcheck import finite_difference

        x = rng.standard_normal((2, 2, 4, 4))
        wt, b = rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
        g = rng.standard_normal((2, 3, 4, 4))
        _, cols = T.conv3x3(x, wt, b, return_cols=True)
        gx, gw, gb = T.conv3x3_backward(g, x.shape, wt, cols)
        np.testing.assert_allclose(gx, finite_difference(lambda v: np.sum(g * T.conv3x3(v, wt, b)), x), atol=1e-7)
        np.testing.assert_allclose(gw, finite_difference(lambda v: np.sum(g * T.conv3x3(x, v, b)), wt), atol=1e-7)
        np.testing.assert_allclose(gb, g.sum(axis=(0, 2, 3)), atol=1e-12)

    def test_weight_shape_checked(self):
        with pytest.raises(T.ShapeError):
            T.conv3x3(np.ones((2, 4, 4)), np.ones((1, 3, 3, 3)), np.zeros(1))


class TestPointwiseOps:
    def test_relu(self):
        np.testing.assert_array_equal(T.relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])

    def test_relu_backward_masks(self):
        np.testing.assert_array_equal(T.relu_backward(np.ones(3), np.array([-1.0, 0.0, 2.0])), [0, 0, 1])

    def test_maxpool(self):
        assert T.maxpool2x2(np.array([[[1.0, 2.0], [3.0, 4.0]]]))[0, 0, 0] == 4.0

    def test_maxpool_odd_rejected(self):
        with pytest.raises(T.ShapeError):
            T.maxpool2x2(np.ones((1, 3, 4)))

    def test_maxpool_backward_routes_to_argmax(self):
        x = np.array([[[1.0, 5.0], [3.0, 2.0]]])
        g = T.maxpool2x2_backward(np.array([[[7.0]]]), x)
        np.testing.assert_array_equal(g, [[[0, 7], [0, 0]]])

    def test_upsample_nearest(self):
        out = T.upsample2x(np.array([[[1.0, 2.0]]]))
        np.testing.assert_array_equal(out, [[[1, 1, 2, 2], [1, 1, 2, 2]]])

    def test_upsample_backward_is_adjoint(self, rng):
        x = rng.standard_normal((2, 3, 4))
        g = rng.standard_normal((2, 6, 8))
        assert np.isclose(np.sum(T.upsample2x(x) * g), np.sum(x * T.upsample2x_backward(g)))

    def test_finite_outputs(self, rng):
        x = rng.standard_normal((2, 3, 4, 4)) * 100
        for out in (T.relu(x), T.maxpool2x2(x), T.upsample2x(x)):
            assert T.is_finite(out)


class TestBatchNorm:
    def test_train_mode_normalises(self, rng):
        x = rng.standard_normal((4, 3, 5, 5)) * 3 + 2
        rm, rv = np.zeros(3), np.ones(3)
        out, _ = T.batchnorm2d(x, np.ones(3), np.zeros(3), rm, rv, training=True)
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-4)

    def test_running_stats_update(self, rng):
        x = rng.standard_normal((2, 2, 4, 4)) + 5
        rm, rv = np.zeros(2), np.ones(2)
        T.batchnorm2d(x, np.ones(2), np.zeros(2), rm, rv, training=True, momentum=0.1)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
        unbiased = x.var(axis=(0, 2, 3), ddof=1)
        np.testing.assert_allclose(rv, 0.9 + 0.1 * unbiased)

    def test_eval_mode_uses_running_stats(self):
        x = np.full((1, 1, 2, 2), 3.0)
        out, _ = T.batchnorm2d(x, np.array([2.0]), np.array([1.0]), np.array([1.0]), np.array([4.0]),
                               training=False, eps=0.0)
        np.testing.assert_allclose(out, 2.0 * (3.0 - 1.0) / 2.0 + 1.0)

    @pytest.mark.parametrize("training", [True, False])
    def test_backward_matches_finite_differences(self, rng, training):
        from blockattn.gradcheck import finite_difference

        x = rng.standard_normal((2, 2, 3, 3))
        gamma, beta = rng.standard_normal(2), rng.standard_normal(2)
        g = rng.standard_normal(x.shape)
        rm, rv = rng.standard_normal(2), rng.uniform(0.5, 2, 2)

        def f(v, gm=gamma):
            return np.sum(g * T.batchnorm2d(v, gm, beta, rm.copy(), rv.copy(), training=training)[0])

        _, cache = T.batchnorm2d(x, gamma, beta, rm.copy(), rv.copy(), training=training)
        gx, ggamma, gbeta = T.batchnorm2d_backward(g, cache)
        np.testing.assert_allclose(gx, finite_difference(f, x), atol=1e-7)
        np.testing.assert_allclose(ggamma, finite_difference(lambda v: f(x, v), gamma), atol=1e-7)
        np.testing.assert_allclose(gbeta, g.sum(axis=(0, 2, 3)), atol=1e-12)


class TestFeatureMap:
    def test_rejects_wrong_rank(self):
        with pytest.raises(T.ShapeError):
            T.as_feature_map(np.ones((3, 3)))

    def test_rejects_empty(self):
        with pytest.raises(T.ShapeError):
            T.as_feature_map(np.ones((0, 3, 3)))

    def test_integer_input_promoted(self):
        assert T.as_feature_map(np.ones((1, 2, 2), dtype=int)).dtype == np.float64

    def test_float32_kept(self):
        assert T.as_feature_map(np.ones((1, 2, 2), dtype=np.float32)).dtype == np.float32
