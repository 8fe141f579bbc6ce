import numpy as np
import pytest

from clickseg import tensor as T
from clickseg.tensor import Tensor, ShapeError, NumericError, make_rng

import helpers


class TestBasics:
    def test_dtype_policy(self):
        assert Tensor([1.0, 2.0]).dtype == np.float32
        assert Tensor([1, 2], dtype=np.int8).dtype == np.int8
        with pytest.raises(TypeError):
            Tensor([1, 2], dtype=np.int8, requires_grad=True)

    def test_int8_not_computable(self):
        a = Tensor([1, 2], dtype=np.int8)
        with pytest.raises(TypeError):
            T.add(a, a)

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        y = T.mul(x, 2.0)
        with pytest.raises(ShapeError):
            y.backward()

    def test_broadcast_add_grad(self):
        x = Tensor(np.ones((2, 3), np.float32), requires_grad=True)
        b = Tensor(np.zeros((3,), np.float32), requires_grad=True)
        T.tsum(T.add(x, b)).backward()
        assert b.grad.shape == (3,)
        np.testing.assert_allclose(b.grad, [2, 2, 2])

    def test_no_grad_blocks_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = T.mul(x, 3.0)
        assert not y.requires_grad
        assert T.tape_size() == 0

    def test_linear_map_gradient_is_near_exact(self):
        # d(sum(2x))/dx = 2 everywhere: central differences are exact for
        # linear maps, so the relative error is at the numerics floor.
        x = Tensor(make_rng(7).standard_normal(5), dtype=np.float64)
        err = T.grad_check(lambda t: T.mul(t, 2.0), [x])
        assert err < 1e-9


class TestConv:
    def test_all_ones_3x3(self):
        x = Tensor(np.ones((1, 1, 3, 3), np.float32))
        w = Tensor(np.ones((1, 1, 3, 3), np.float32))
        y = T.conv2d(x, w)
        assert y.shape == (1, 1, 1, 1)
        assert y.item() == 9.0

    def test_identity_1x1_kernel(self):
        rng = make_rng(0)
        x = Tensor(rng.standard_normal((2, 3, 5, 5)).astype(np.float32))
        w = np.zeros((3, 3, 1, 1), np.float32)
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        y = T.conv2d(x, Tensor(w))
        np.testing.assert_array_equal(y.numpy(), x.numpy())

    def test_stride2_shape_and_values(self):
        rng = make_rng(1)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        y = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1)
        assert y.shape == (2, 4, 4, 4)
        ref = helpers.conv2d_loops(x, w, b, stride=2, padding=1)
        np.testing.assert_allclose(y.numpy(), ref, atol=1e-4)

    def test_matches_loop_oracle_on_random_cases(self):
        rng = make_rng(2)
        for _ in range(5):
            N, C, O = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
            H = int(rng.integers(4, 9))
            k = int(rng.choice([1, 3]))
            s = int(rng.choice([1, 2]))
            p = k // 2
            x = rng.standard_normal((N, C, H, H)).astype(np.float32)
            w = rng.standard_normal((O, C, k, k)).astype(np.float32)
            y = T.conv2d(Tensor(x), Tensor(w), stride=s, padding=p)
            np.testing.assert_allclose(y.numpy(), helpers.conv2d_loops(x, w, stride=s, padding=p),
                                       atol=1e-4)

    def test_rejects_bad_shapes(self):
        x = Tensor(np.ones((1, 3, 4, 4), np.float32))
        with pytest.raises(ShapeError):
            T.conv2d(x, Tensor(np.ones((2, 4, 3, 3), np.float32)))
        with pytest.raises(ShapeError):
            T.conv2d(x, Tensor(np.ones((2, 3, 7, 7), np.float32)))


class TestConvTranspose:
    def test_single_pixel_broadcasts_kernel(self):
        x = Tensor(np.full((1, 1, 1, 1), 5.0, np.float32))
        w = Tensor(np.ones((1, 1, 2, 2), np.float32))
        y = T.conv_transpose2d(x, w, stride=2)
        assert y.shape == (1, 1, 2, 2)
        np.testing.assert_array_equal(y.numpy(), np.full((1, 1, 2, 2), 5.0, np.float32))

    def test_doubles_spatial_size(self):
        x = Tensor(np.ones((2, 6, 4, 4), np.float32))
        w = Tensor(np.ones((6, 3, 2, 2), np.float32))
        assert T.conv_transpose2d(x, w, stride=2).shape == (2, 3, 8, 8)

    def test_matches_loop_oracle(self):
        rng = make_rng(3)
        x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        w = rng.standard_normal((3, 5, 2, 2)).astype(np.float32)
        y = T.conv_transpose2d(Tensor(x), Tensor(w), stride=2)
        np.testing.assert_allclose(y.numpy(), helpers.conv_transpose2d_loops(x, w, 2), atol=1e-4)

    def test_adjoint_of_conv(self):
        # <conv(x), y> == <x, convT(y)> with shared weights makes the pair
        # exact adjoints, which is what the shared-kernel backward assumes.
        rng = make_rng(4)
        x = rng.standard_normal((1, 3, 8, 8)).astype(np.float64)
        w = rng.standard_normal((5, 3, 2, 2)).astype(np.float64)
        y = rng.standard_normal((1, 5, 4, 4)).astype(np.float64)
        # the conv weight [O,C,kh,kw] read as [C_in,C_out,kh,kw] is the
        # adjoint's weight, no transpose needed
        with T.no_grad():
            cx = T.conv2d(Tensor(x), Tensor(w), stride=2).numpy()
            cty = T.conv_transpose2d(Tensor(y), Tensor(w), stride=2).numpy()
        lhs = float((cx * y).sum())
        rhs = float((x * cty).sum())
        assert abs(lhs - rhs) < 1e-6


class TestActivationsAndSoftmax:
    def test_softmax_rows_sum_to_one(self):
        rng = make_rng(5)
        x = Tensor(rng.standard_normal((7, 11)).astype(np.float32) * 30)
        s = T.softmax(x, axis=-1).numpy()
        np.testing.assert_allclose(s.sum(axis=-1), np.ones(7), atol=1e-6)
        assert np.all(s > 0)

    def test_softmax_shift_invariance(self):
        x = make_rng(6).standard_normal((3, 4))
        a = T.softmax(Tensor(x, dtype=np.float64)).numpy()
        b = T.softmax(Tensor(x + 1000.0, dtype=np.float64)).numpy()
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_sigmoid_extremes_finite(self):
        y = T.sigmoid(Tensor(np.array([-1e4, 0.0, 1e4], np.float32))).numpy()
        assert np.all(np.isfinite(y))
        np.testing.assert_allclose(y, [0.0, 0.5, 1.0], atol=1e-6)

    def test_gelu_reference_points(self):
        # GELU(0)=0 and the tanh form stays within 1e-3 of x*Phi(x).
        xs = np.linspace(-4, 4, 41)
        got = T.gelu(Tensor(xs, dtype=np.float64)).numpy()
        from math import erf
        exact = xs * 0.5 * (1.0 + np.array([erf(v / np.sqrt(2)) for v in xs]))
        assert got[20] == 0.0
        np.testing.assert_allclose(got, exact, atol=1e-3)


class TestAttention:
    def test_single_token_is_value_plus_residual(self):
        rng = make_rng(7)
        D = 8
        tok = rng.standard_normal((1, D)).astype(np.float32)
        wq, wk, wv, wo = (rng.standard_normal((D, D)).astype(np.float32) for _ in range(4))
        out = T.attention(Tensor(tok), Tensor(wq), Tensor(wk), Tensor(wv), Tensor(wo),
                          num_heads=2).numpy()
        np.testing.assert_allclose(out, tok + (tok @ wv) @ wo, atol=1e-5)

    def test_matches_dense_reference(self):
        rng = make_rng(8)
        tok = rng.standard_normal((6, 12)).astype(np.float32)
        wq, wk, wv, wo = (rng.standard_normal((12, 12)).astype(np.float32) for _ in range(4))
        for heads in (1, 2, 3):
            out = T.attention(Tensor(tok), Tensor(wq), Tensor(wk), Tensor(wv), Tensor(wo),
                              num_heads=heads).numpy()
            ref = helpers.attention_reference(tok, wq, wk, wv, wo, heads)
            np.testing.assert_allclose(out, ref, atol=1e-4)

    def test_empty_sequence_rejected(self):
        z = Tensor(np.zeros((0, 8), np.float32))
        w = Tensor(np.eye(8, dtype=np.float32))
        with pytest.raises(ShapeError):
            T.attention(z, w, w, w, w)


class TestBatchNorm:
    def test_normalizes_batch_in_training(self):
        rng = make_rng(9)
        x = rng.standard_normal((4, 3, 8, 8)).astype(np.float32) * 3 + 2
        g = Tensor(np.ones(3, np.float32))
        b = Tensor(np.zeros(3, np.float32))
        rm, rv = np.zeros(3, np.float32), np.ones(3, np.float32)
        y = T.batchnorm2d(Tensor(x), g, b, rm, rv, training=True).numpy()
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), np.zeros(3), atol=1e-5)
        np.testing.assert_allclose(y.var(axis=(0, 2, 3)), np.ones(3), atol=1e-3)

    def test_running_stats_update(self):
        x = np.ones((2, 1, 4, 4), np.float32) * 10
        x[1] = -10
        rm, rv = np.zeros(1, np.float32), np.ones(1, np.float32)
        g = Tensor(np.ones(1, np.float32))
        b = Tensor(np.zeros(1, np.float32))
        T.batchnorm2d(Tensor(x), g, b, rm, rv, training=True, momentum=0.1)
        assert abs(rm[0]) < 1e-6  # batch mean is 0
        m = x.size
        expected_rv = 0.9 * 1.0 + 0.1 * x.var() * m / (m - 1)
        np.testing.assert_allclose(rv[0], expected_rv, rtol=1e-5)

    def test_inference_matches_scalar_formula(self):
        rng = make_rng(10)
        x = rng.standard_normal((2, 4, 5, 5)).astype(np.float32)
        gamma = rng.standard_normal(4).astype(np.float32)
        beta = rng.standard_normal(4).astype(np.float32)
        rm = rng.standard_normal(4).astype(np.float32)
        rv = rng.random(4).astype(np.float32) + 0.5
        y = T.batchnorm2d(Tensor(x), Tensor(gamma), Tensor(beta), rm.copy(), rv.copy(),
                          training=False).numpy()
        ref = helpers.batchnorm_infer_scalar(x, gamma, beta, rm, rv)
        np.testing.assert_allclose(y, ref, atol=1e-5)

    def test_constant_channel_stays_finite(self):
        x = Tensor(np.full((2, 1, 3, 3), 7.0, np.float32))
        g = Tensor(np.ones(1, np.float32))
        b = Tensor(np.zeros(1, np.float32))
        y = T.batchnorm2d(x, g, b, np.zeros(1, np.float32), np.ones(1, np.float32),
                          training=True).numpy()
        assert np.all(np.isfinite(y))
        np.testing.assert_allclose(y, np.zeros_like(y.astype(np.float64)), atol=1e-2)

    def test_single_value_batch_rejected(self):
        x = Tensor(np.ones((1, 2, 1, 1), np.float32))
        g = Tensor(np.ones(2, np.float32))
        b = Tensor(np.zeros(2, np.float32))
        with pytest.raises(NumericError):
            T.batchnorm2d(x, g, b, np.zeros(2, np.float32), np.ones(2, np.float32),
                          training=True)


class TestFocalLoss:
    def test_matches_probability_form(self):
        rng = make_rng(11)
        logits = rng.standard_normal((2, 8, 8)).astype(np.float64) * 3
        targets = (rng.random((2, 8, 8)) > 0.5).astype(np.float64)
        got = T.sigmoid_focal_loss(Tensor(logits, dtype=np.float64), targets).item()
        ref = helpers.focal_loss_reference(logits, targets)
        assert abs(got - ref) < 1e-10

    def test_extreme_logits_finite(self):
        logits = Tensor(np.array([[-80.0, 80.0]], np.float64), requires_grad=True)
        targets = np.array([[0.0, 1.0]])
        loss = T.sigmoid_focal_loss(logits, targets)
        assert np.isfinite(loss.item())
        loss.backward()
        assert np.all(np.isfinite(logits.grad))

    def test_confident_wrong_dominates_confident_right(self):
        t = np.array([[1.0]])
        right = T.sigmoid_focal_loss(Tensor(np.array([[6.0]], np.float64)), t).item()
        wrong = T.sigmoid_focal_loss(Tensor(np.array([[-6.0]], np.float64)), t).item()
        assert wrong > 100 * right


GRADCHECK_CASES = [
    ("add", lambda r: ([r.standard_normal((3, 4)), r.standard_normal((3, 4))],
                       lambda a, b: T.add(a, b))),
    ("mul", lambda r: ([r.standard_normal((3, 4)), r.standard_normal((3, 4))],
                       lambda a, b: T.mul(a, b))),
    ("div", lambda r: ([r.standard_normal((3, 4)), r.standard_normal((3, 4)) + 3.0],
                       lambda a, b: T.div(a, b))),
    ("matmul", lambda r: ([r.standard_normal((3, 5)), r.standard_normal((5, 2))],
                          lambda a, b: T.matmul(a, b))),
    ("relu_off_kink", lambda r: ([np.sign(r.standard_normal((4, 4))) * (0.5 + r.random((4, 4)))],
                                 lambda a: T.relu(a))),
    ("gelu", lambda r: ([r.standard_normal((4, 4)) * 2], lambda a: T.gelu(a))),
    ("sigmoid", lambda r: ([r.standard_normal((4, 4)) * 2], lambda a: T.sigmoid(a))),
    ("softmax", lambda r: ([r.standard_normal((4, 6))], lambda a: T.softmax(a, axis=-1))),
    ("reshape_transpose", lambda r: ([r.standard_normal((2, 3, 4))],
                                     lambda a: T.transpose(T.reshape(a, (6, 4)), (1, 0)))),
    ("concat_narrow", lambda r: ([r.standard_normal((2, 3)), r.standard_normal((2, 2))],
                                 lambda a, b: T.narrow(T.concat([a, b], axis=1), 1, 1, 3))),
    ("sum_mean", lambda r: ([r.standard_normal((3, 4))],
                            lambda a: T.add(T.tsum(a, axis=0), T.tmean(a)))),
    ("conv2d", lambda r: ([r.standard_normal((2, 2, 5, 5)), r.standard_normal((3, 2, 3, 3)),
                           r.standard_normal(3)],
                          lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1))),
    ("conv_transpose2d", lambda r: ([r.standard_normal((2, 3, 3, 3)),
                                     r.standard_normal((3, 2, 2, 2))],
                                    lambda x, w: T.conv_transpose2d(x, w, stride=2))),
    ("batchnorm_train", lambda r: ([r.standard_normal((2, 3, 4, 4)), r.standard_normal(3) + 1.5,
                                    r.standard_normal(3)],
                                   lambda x, g, b: T.batchnorm2d(
                                       x, g, b, np.zeros(3), np.ones(3), training=True))),
    ("attention", lambda r: ([r.standard_normal((5, 8)), r.standard_normal((8, 8)),
                              r.standard_normal((8, 8)), r.standard_normal((8, 8)),
                              r.standard_normal((8, 8))],
                             lambda t, q, k, v, o: T.attention(t, q, k, v, o, num_heads=2))),
    ("channel_dot", lambda r: ([r.standard_normal((2, 4, 3, 3)), r.standard_normal((2, 2, 4))],
                               lambda f, v: T.channel_dot(f, v))),
    ("focal", lambda r: ([r.standard_normal((3, 5)) * 2],
                         lambda z: T.sigmoid_focal_loss(
                             z, (make_rng(99).random((3, 5)) > 0.5).astype(np.float64)))),
]


class TestGradCheck:
    @pytest.mark.parametrize("name,case", GRADCHECK_CASES, ids=[c[0] for c in GRADCHECK_CASES])
    def test_op_gradients(self, name, case):
        worst = 0.0
        for seed in range(3):
            rng = make_rng(1000 + seed)
            arrays, fn = case(rng)
            tensors = [Tensor(a, dtype=np.float64) for a in arrays]
            worst = max(worst, T.grad_check(fn, tensors, rng=make_rng(seed)))
        assert worst < 1e-4, f"{name}: max relative error {worst:.3e}"

    def test_composite_chain(self):
        def fn(x, w):
            y = T.conv2d(x, w, stride=1, padding=1)
            return T.tmean(T.gelu(y))

        rng = make_rng(42)
        x = Tensor(rng.standard_normal((1, 2, 4, 4)), dtype=np.float64)
        w = Tensor(rng.standard_normal((2, 2, 3, 3)), dtype=np.float64)
        assert T.grad_check(fn, [x, w]) < 1e-4

    def test_grad_accumulates_across_uses(self):
        x = Tensor(np.array([3.0]), dtype=np.float64, requires_grad=True)
        y = T.add(T.mul(x, x), T.mul(x, 2.0))  # x^2 + 2x -> dy/dx = 2x + 2
        y2 = T.tsum(y)
        y2.backward()
        np.testing.assert_allclose(x.grad, [8.0])
