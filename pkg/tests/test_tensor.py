"""Autodiff engine: every op against central finite differences, plus engine semantics."""
import numpy as np
import pytest

from zskd import tensor as T
from zskd.errors import DimensionError, DomainError, NumericalError, ParameterError, StateError

from conftest import numeric_grad, rel_error

OP_TOL = 1e-4


def check_op(build, *arrays):
    """Compare backward() with finite differences of sum(w * build(...)) for a fixed random w."""
    rng = np.random.default_rng(123)
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    w = rng.standard_normal(out.shape)
    loss = T.tsum(T.mul(out, T.Tensor(w)))
    loss.backward()
    for t in tensors:
        f = lambda: float(np.sum(w * build(*[T.Tensor(u.data) for u in tensors]).data))
        num = numeric_grad(f, t.data)
        assert rel_error(t.grad, num) < OP_TOL


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class TestGradientChecks:
    def test_add_broadcast(self, rng):
        check_op(T.add, rng.standard_normal((3, 4)), rng.standard_normal(4))

    def test_mul_broadcast(self, rng):
        check_op(T.mul, rng.standard_normal((2, 3)), rng.standard_normal((1, 3)))

    def test_neg_sum_mean(self, rng):
        check_op(lambda a: T.neg(a), rng.standard_normal(5))
        check_op(lambda a: T.tsum(a), rng.standard_normal((2, 3)))
        check_op(lambda a: T.tmean(a), rng.standard_normal((2, 3)))

    def test_reshape_flatten(self, rng):
        check_op(lambda a: T.reshape(a, (6, 2)), rng.standard_normal((3, 4)))
        check_op(T.flatten, rng.standard_normal((2, 3, 3, 2)))
        check_op(T.flatten, rng.standard_normal((3, 3, 2)))

    def test_relu_away_from_kink(self, rng):
        x = rng.standard_normal((4, 5))
        x[np.abs(x) < 0.05] = 0.5
        check_op(T.relu, x)

    @pytest.mark.parametrize("stride,padding", [(1, "valid"), (1, "same"), (2, "valid"), (2, "same")])
    def test_conv2d(self, rng, stride, padding):
        x = rng.standard_normal((2, 7, 7, 2))
        k = rng.standard_normal((3, 3, 2, 3))
        b = rng.standard_normal(3)
        check_op(lambda a, kk, bb: T.conv2d(a, kk, bb, stride, padding), x, k, b)

    def test_conv2d_unbatched(self, rng):
        check_op(lambda a, kk, bb: T.conv2d(a, kk, bb), rng.standard_normal((6, 6, 1)),
                 rng.standard_normal((5, 5, 1, 2)), rng.standard_normal(2))

    def test_maxpool(self, rng):
        check_op(lambda a: T.maxpool2d(a, 2), rng.standard_normal((2, 6, 6, 3)))

    def test_maxpool_overlapping_stride(self, rng):
        check_op(lambda a: T.maxpool2d(a, 3, 2), rng.standard_normal((1, 7, 7, 2)))

    def test_dense(self, rng):
        check_op(T.dense, rng.standard_normal((4, 5)), rng.standard_normal((5, 3)), rng.standard_normal(3))
        check_op(T.dense, rng.standard_normal(5), rng.standard_normal((5, 3)), rng.standard_normal(3))

    @pytest.mark.parametrize("tau", [1.0, 20.0, 0.5])
    def test_softmax(self, rng, tau):
        check_op(lambda a: T.softmax_t(a, tau), rng.standard_normal((3, 6)) * 3)

    @pytest.mark.parametrize("reduction", ["mean", "sum"])
    def test_cross_entropy(self, rng, reduction):
        target = rng.dirichlet(np.ones(5), size=3)
        check_op(lambda z: T.cross_entropy(target, T.softmax_t(z, 2.0), reduction), rng.standard_normal((3, 5)))

    @pytest.mark.parametrize("reduction", ["mean", "sum"])
    def test_mse(self, rng, reduction):
        check_op(lambda a, b: T.mse(a, b, reduction), rng.standard_normal((3, 4)), rng.standard_normal((3, 4)))


class TestForwardValues:
    def test_conv_matches_direct_loop(self, rng):
        x = rng.standard_normal((1, 5, 5, 2))
        k = rng.standard_normal((3, 3, 2, 4))
        b = rng.standard_normal(4)
        out = T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(b)).data
        ref = np.zeros((1, 3, 3, 4))
        for i in range(3):
            for j in range(3):
                ref[0, i, j] = np.tensordot(x[0, i:i + 3, j:j + 3], k, axes=3) + b
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_same_padding_keeps_size(self, rng):
        out = T.conv2d(T.Tensor(rng.standard_normal((8, 8, 1))), T.Tensor(rng.standard_normal((5, 5, 1, 2))),
                       T.Tensor(np.zeros(2)), padding="same")
        assert out.shape == (8, 8, 2)

    def test_maxpool_tie_goes_to_first(self):
        x = T.Tensor(np.ones((1, 2, 2, 1)), requires_grad=True)
        T.tsum(T.maxpool2d(x, 2)).backward()
        np.testing.assert_array_equal(x.grad[0, :, :, 0], [[1, 0], [0, 0]])

    def test_softmax_rows_sum_to_one(self, rng):
        p = T.softmax_np(rng.standard_normal((10, 7)) * 50, 1.0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_softmax_large_logits_stable(self):
        p = T.softmax_np(np.array([1000.0, 0.0, -1000.0]))
        assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1.0)

    def test_cross_entropy_equals_entropy_at_match(self, rng):
        t = rng.dirichlet(np.ones(6))
        ce = T.cross_entropy(t, T.Tensor(t)).item()
        assert ce == pytest.approx(-np.sum(t * np.log(t + T.LOG_EPS)), abs=1e-12)


class TestEngineSemantics:
    def test_gradients_accumulate_across_backward_calls(self):
        x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        T.tsum(T.mul(x, x)).backward()
        T.tsum(T.mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, [4.0, 8.0])

    def test_reused_node_sums_paths(self):
        x = T.Tensor(np.array(3.0), requires_grad=True)
        y = T.mul(x, x)
        T.add(y, y).backward()
        assert x.grad == pytest.approx(12.0)

    def test_backward_on_leaf_rejected(self):
        with pytest.raises(StateError):
            T.Tensor(np.ones(2), requires_grad=True).backward()

    def test_non_scalar_needs_seed_gradient(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(StateError):
            T.mul(x, x).backward()
        T.mul(x, x).backward(np.ones(3))
        np.testing.assert_allclose(x.grad, 2.0)

    def test_constants_get_no_gradient(self):
        c = T.Tensor(np.ones(2))
        x = T.Tensor(np.ones(2), requires_grad=True)
        T.tsum(T.mul(c, x)).backward()
        assert c.grad is None

    def test_non_finite_forward_raises(self):
        with np.errstate(invalid="ignore"), pytest.raises(NumericalError):
            T.mul(T.Tensor(np.array([np.inf])), T.Tensor(np.array([0.0])))

    def test_bad_inputs(self):
        with pytest.raises(ParameterError):
            T.softmax_np(np.zeros(3), 0.0)
        with pytest.raises(DomainError):
            T.cross_entropy(np.array([0.7, 0.7]), T.Tensor(np.array([0.5, 0.5])))
        with pytest.raises(DimensionError):
            T.dense(T.Tensor(np.ones(4)), T.Tensor(np.ones((5, 2))), T.Tensor(np.ones(2)))


class TestAdam:
    def test_first_step_is_lr_times_normalised_gradient(self):
        """With bias correction the first update is lr * g / (|g| + eps)."""
        p = np.array([1.0, -2.0, 0.5])
        g = np.array([0.3, -4.0, 1e-3])
        st = T.AdamState.like(p)
        T.adam_step(p, g, st, 0.1)
        expected = np.array([1.0, -2.0, 0.5]) - 0.1 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p, expected, rtol=1e-12)

    def test_matches_reference_recursion(self, rng):
        p = rng.standard_normal(4)
        ref = p.copy()
        m = v = np.zeros(4)
        st = T.AdamState.like(p)
        for t in range(1, 6):
            g = rng.standard_normal(4)
            T.adam_step(p, g, st, 0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p, ref, rtol=1e-12)

    def test_minimises_quadratic(self):
        x = T.Tensor(np.array([3.0, -2.0]), requires_grad=True)
        opt = T.Adam([x], lr=0.1)
        for _ in range(500):
            opt.zero_grad()
            T.tsum(T.mul(x, x)).backward()
            opt.step()
        assert np.all(np.abs(x.data) < 1e-2)

    def test_rejects_non_positive_lr(self):
        with pytest.raises(ParameterError):
            T.adam_step(np.ones(2), np.ones(2), T.AdamState.like(np.ones(2)), 0.0)


class TestWorkedExamples:
    def test_conv_first_lenet_layer_shape(self, rng):
        out = T.conv2d(T.Tensor(rng.random((32, 32, 1))), T.Tensor(rng.standard_normal((5, 5, 1, 6))),
                       T.Tensor(np.zeros(6)))
        assert out.shape == (28, 28, 6)

    def test_conv_zero_input_gives_bias(self, rng):
        b = rng.standard_normal(4)
        out = T.conv2d(T.Tensor(np.zeros((8, 8, 2))), T.Tensor(rng.standard_normal((3, 3, 2, 4))), T.Tensor(b))
        np.testing.assert_array_equal(out.data, np.broadcast_to(b, (6, 6, 4)))

    def test_conv_channel_mismatch(self, rng):
        with pytest.raises(DimensionError):
            T.conv2d(T.Tensor(np.zeros((8, 8, 2))), T.Tensor(np.zeros((3, 3, 1, 4))), T.Tensor(np.zeros(4)))

    def test_conv_spec_gradient_case(self, rng):
        """8x8x2 input with 3x3x2x4 kernels, h=1e-5."""
        x, k, b = rng.standard_normal((8, 8, 2)), rng.standard_normal((3, 3, 2, 4)), rng.standard_normal(4)
        check_op(T.conv2d, x, k, b)

    def test_maxpool_shapes_and_constant(self):
        assert T.maxpool2d(T.Tensor(np.zeros((28, 28, 6))), 2).shape == (14, 14, 6)
        out = T.maxpool2d(T.Tensor(np.full((6, 6, 1), 0.37)), 2)
        np.testing.assert_array_equal(out.data, 0.37)
        with pytest.raises(DimensionError):
            T.maxpool2d(T.Tensor(np.zeros((1, 1, 1))), 2)

    def test_dense_shapes_identity(self, rng):
        out = T.dense(T.Tensor(rng.random(400)), T.Tensor(np.zeros((400, 120))), T.Tensor(np.zeros(120)))
        assert out.shape == (120,)
        x = rng.standard_normal(7)
        np.testing.assert_array_equal(T.dense(T.Tensor(x), T.Tensor(np.eye(7)), T.Tensor(np.zeros(7))).data, x)

    def test_relu_values(self):
        np.testing.assert_array_equal(T.relu(T.Tensor(np.array([-1.0, 0.0, 2.0]))).data, [0, 0, 2])
        np.testing.assert_array_equal(T.relu(T.Tensor(-np.ones(4))).data, 0)

    def test_relu_gradient_tight(self, rng):
        x = rng.standard_normal(20)
        x[np.abs(x) < 0.1] = 1.0
        t = T.Tensor(x, requires_grad=True)
        T.tsum(T.relu(t)).backward()
        num = numeric_grad(lambda: float(np.maximum(x, 0).sum()), x)
        assert rel_error(t.grad, num) < 1e-6

    def test_softmax_analytic_values(self):
        np.testing.assert_allclose(T.softmax_np(np.zeros(2), 3.0), [0.5, 0.5])
        e = np.e
        np.testing.assert_allclose(T.softmax_np(np.array([2.0, 0.0]), 2.0), [e / (1 + e), 1 / (1 + e)], rtol=1e-12)
        # at tau=1000 the top entry is e^0.01 / (e^0.01 + 2) = 0.33556, 2.2e-3 from 1/3; the limit needs tau=1e4
        np.testing.assert_allclose(T.softmax_np(np.array([10.0, 0.0, 0.0]), 1e4), 1 / 3, atol=1e-3)
        assert T.softmax_np(np.array([10.0, 0.0, 0.0]), 1000.0)[0] == pytest.approx(np.exp(0.01) / (np.exp(0.01) + 2))
        with pytest.raises(ParameterError):
            T.softmax_t(T.Tensor(np.zeros(3)), -1.0)

    def test_cross_entropy_analytic_values(self):
        assert T.cross_entropy(np.array([1.0, 0.0]), T.Tensor(np.array([0.5, 0.5]))).item() == pytest.approx(np.log(2))
        assert T.cross_entropy(np.array([0.0, 1.0]), T.Tensor(np.array([0.0, 1.0]))).item() == pytest.approx(0, abs=1e-11)
        with pytest.raises(DomainError):
            T.cross_entropy(np.array([1.5, -0.5]), T.Tensor(np.array([0.5, 0.5])))

    def test_backward_analytic(self):
        x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        T.tsum(x).backward()
        np.testing.assert_array_equal(x.grad, [1, 1])
        x.zero_grad()
        T.tsum(T.mul(x, x)).backward()
        np.testing.assert_array_equal(x.grad, [2, 4])

    def test_adam_zero_gradient_keeps_params(self):
        p = np.array([1.0, 2.0])
        st = T.AdamState.like(p)
        T.adam_step(p, np.zeros(2), st, 0.1)
        np.testing.assert_array_equal(p, [1.0, 2.0])
        assert st.step == 1

    def test_adam_constant_positive_gradient_decreases(self):
        p = np.array([0.0])
        st = T.AdamState.like(p)
        prev = p.copy()
        for _ in range(50):
            T.adam_step(p, np.array([0.7]), st, 0.01)
            assert p[0] < prev[0]
            prev = p.copy()

    def test_adam_quadratic_trajectory(self):
        """Ten steps on x^2 from 5 at lr 0.5 against a hand-rolled reference."""
        x = T.Tensor(np.array(5.0), requires_grad=True)
        opt = T.Adam([x], lr=0.5)
        ref, m, v, traj, ref_traj = 5.0, 0.0, 0.0, [], []
        for t in range(1, 11):
            opt.zero_grad()
            T.mul(x, x).backward()
            opt.step()
            traj.append(float(x.data))
            g = 2 * ref
            m, v = 0.9 * m + 0.1 * g, 0.999 * v + 0.001 * g * g
            ref -= 0.5 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            ref_traj.append(ref)
        np.testing.assert_allclose(traj, ref_traj, rtol=1e-12)
        assert abs(traj[-1]) < 5.0
