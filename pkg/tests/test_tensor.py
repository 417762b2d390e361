"""Autodiff engine checks against a central finite-difference oracle."""

import numpy as np
import pytest

from nndiv import tensor as T
from nndiv.tensor import ShapeError, Tensor, UsageError

FD_STEP = 1e-3
FIRST_ORDER_TOL = 1e-3
SECOND_ORDER_TOL = 1e-2


def numerical_grad(fn, values, step=FD_STEP):
    """Central finite differences of a scalar function, 64-bit quotients.

    `fn` maps a list of float32 arrays to a python float; the oracle never
    touches the autodiff engine's backward path.
    """
    grads = []
    for i, base in enumerate(values):
        g = np.zeros(base.shape, dtype=np.float64)
        it = np.nditer(base, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            plus = [v.copy() for v in values]
            minus = [v.copy() for v in values]
            plus[i][idx] += step
            minus[i][idx] -= step
            g[idx] = (fn(plus) - fn(minus)) / (2.0 * step)
        grads.append(g)
    return grads


def rel_err(analytic, numeric):
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1.0)
    return np.max(np.abs(analytic.astype(np.float64) - numeric)) / scale


def check_gradients(build, values, tol=FIRST_ORDER_TOL):
    """build(tensors) -> scalar Tensor; compares T.grad against the oracle."""
    tensors = [Tensor(v, requires_grad=True) for v in values]
    out = build(tensors)
    analytic = T.grad(out, tensors)

    def fn(arrs):
        return float(build([Tensor(a) for a in arrs]).data)

    numeric = numerical_grad(fn, values)
    for a, n in zip(analytic, numeric):
        assert rel_err(a.data, n) < tol


def rand(shape, seed, low=0.5, high=1.5):
    r = np.random.default_rng(seed)
    return (low + (high - low) * r.random(shape)).astype(np.float32)


class TestForwardValues:
    def test_degenerate_conv_is_product(self):
        x = Tensor(np.full((1, 1, 1, 1), 3.0, dtype=np.float32))
        k = Tensor(np.full((1, 1, 1, 1), 5.0, dtype=np.float32))
        assert T.conv2d(x, k, stride=1).data.reshape(()) == pytest.approx(15.0)

    def test_identity_kernel_conv(self):
        x = Tensor(rand((2, 8, 8, 1), seed=0))
        k = np.zeros((5, 5, 1, 1), dtype=np.float32)
        k[2, 2, 0, 0] = 1.0  # centered delta
        out = T.conv2d(x, Tensor(k), stride=1)
        np.testing.assert_array_equal(out.data, x.data)

    def test_conv_output_extents_ceil(self):
        x = Tensor(np.zeros((1, 7, 10, 2), dtype=np.float32))
        k = Tensor(np.zeros((3, 3, 2, 4), dtype=np.float32))
        assert T.conv2d(x, k, stride=2).data.shape == (1, 4, 5, 4)

    def test_conv_shape_errors_name_dimensions(self):
        x = Tensor(np.zeros((1, 4, 4, 3), dtype=np.float32))
        k = Tensor(np.zeros((5, 5, 2, 4), dtype=np.float32))
        with pytest.raises(ShapeError, match="channels 3"):
            T.conv2d(x, k)
        with pytest.raises(ShapeError, match="odd"):
            T.conv2d(Tensor(np.zeros((1, 4, 4, 2), dtype=np.float32)),
                     Tensor(np.zeros((4, 4, 2, 1), dtype=np.float32)))

    def test_dense_identity(self):
        x = rand((3, 4), seed=1)
        w = np.eye(4, dtype=np.float32)
        b = np.zeros(4, dtype=np.float32)
        out = T.add(T.matmul(Tensor(x), Tensor(w)), Tensor(b))
        np.testing.assert_allclose(out.data, x, rtol=1e-6)

    def test_dense_scalar_case(self):
        out = T.add(T.matmul(Tensor([[2.0]]), Tensor([[3.0]])), Tensor([1.0]))
        assert out.data.reshape(()) == pytest.approx(7.0)

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_swish_values(self):
        assert T.swish(Tensor(0.0)).data.reshape(()) == 0.0
        assert float(T.swish(Tensor(10.0)).data) == pytest.approx(9.999546, abs=1e-4)
        assert float(T.swish(Tensor(-30.0)).data) == pytest.approx(0.0, abs=1e-6)

    def test_mean_and_norm(self):
        assert float(T.mean(Tensor([1.0, 2.0, 3.0])).data) == pytest.approx(2.0)
        assert T.l2_norm_rows(Tensor([[3.0, 4.0]])).data[0] == pytest.approx(5.0)

    def test_reduction_accumulates_in_float64(self):
        # 2^24 + 1 collapses in a pure float32 accumulator
        x = np.ones(2 ** 24 + 1, dtype=np.float32)
        assert float(T.reduce_sum(Tensor(x)).data) == np.float32(2.0 ** 24 + 1.0)


class TestBackward:
    def test_square_gradient(self):
        x = Tensor(3.0, requires_grad=True)
        T.backward(T.square(x))
        assert float(x.grad.data) == pytest.approx(6.0)

    def test_double_backprop_matches_symbolic(self):
        # f = x^3 at x=2: grad 3x^2 = 12; d/dx (grad^2) = 2*(3x^2)*(6x) = 288
        x = Tensor(2.0, requires_grad=True)
        f = T.mul(T.mul(x, x), x)
        (g,) = T.grad(f, [x], create_graph=True)
        assert float(g.data) == pytest.approx(12.0)
        (g2,) = T.grad(T.square(g), [x])
        assert float(g2.data) == pytest.approx(288.0)

    def test_off_path_leaf_gets_zero(self):
        x = Tensor(3.0, requires_grad=True)
        unused = Tensor(0.0, requires_grad=True)
        gx, gu = T.grad(T.square(x), [x, unused])
        assert float(gx.data) == pytest.approx(6.0)
        assert float(gu.data) == 0.0

    def test_backward_populates_leaves(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = Tensor([3.0, 4.0], requires_grad=True)
        T.backward(T.reduce_sum(T.mul(x, y)))
        np.testing.assert_allclose(x.grad.data, [3.0, 4.0])
        np.testing.assert_allclose(y.grad.data, [1.0, 2.0])

    def test_non_scalar_backward_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(UsageError):
            T.backward(T.mul(x, x))

    def test_grad_accumulates_shared_input(self):
        x = Tensor(4.0, requires_grad=True)
        (g,) = T.grad(T.mul(x, x), [x])
        assert float(g.data) == pytest.approx(8.0)


class TestGradcheckPrimitives:
    def test_conv2d_spec_case(self):
        # random 1x8x8x2 input with a 5x5x2x3 kernel
        x = rand((1, 8, 8, 2), seed=10, low=-1.0, high=1.0)
        k = rand((5, 5, 2, 3), seed=11, low=-0.3, high=0.3)
        check_gradients(lambda t: T.mean(T.square(T.conv2d(t[0], t[1], stride=2))), [x, k])

    def test_conv2d_stride1(self):
        x = rand((2, 5, 5, 1), seed=12, low=-1.0, high=1.0)
        k = rand((3, 3, 1, 2), seed=13, low=-0.5, high=0.5)
        check_gradients(lambda t: T.mean(T.mul(T.conv2d(t[0], t[1]), T.conv2d(t[0], t[1]))),
                        [x, k])

    def test_dense_gradcheck(self):
        x = rand((3, 4), seed=14, low=-1.0, high=1.0)
        w = rand((4, 2), seed=15, low=-1.0, high=1.0)
        b = rand((2,), seed=16, low=-0.5, high=0.5)
        check_gradients(lambda t: T.mean(T.square(T.add(T.matmul(t[0], t[1]), t[2]))),
                        [x, w, b])

    def test_swish_gradcheck(self):
        x = rand((4, 4), seed=17, low=-2.0, high=2.0)
        check_gradients(lambda t: T.mean(T.swish(t[0])), [x])

    def test_norm_penalty_composition(self):
        # square(l2_norm_rows(x) - 1): the shape the gradient penalty uses
        x = rand((3, 5), seed=18, low=-1.0, high=1.0)
        check_gradients(
            lambda t: T.mean(T.square(T.sub(T.l2_norm_rows(t[0]), T.const(1.0)))), [x])

    @pytest.mark.parametrize("op", [T.sigmoid, T.exp, T.sqrt, T.log, T.square, T.neg])
    def test_unary_ops(self, op):
        x = rand((4, 3), seed=19)  # positive, safe for log/sqrt
        check_gradients(lambda t: T.mean(op(t[0])), [x])

    @pytest.mark.parametrize("op", [T.add, T.sub, T.mul, T.div])
    def test_binary_ops_with_broadcast(self, op):
        a = rand((4, 3), seed=20)
        b = rand((3,), seed=21)
        check_gradients(lambda t: T.mean(op(t[0], t[1])), [a, b])

    def test_reductions_and_reshape(self):
        x = rand((2, 6), seed=22, low=-1.0, high=1.0)
        check_gradients(lambda t: T.reduce_sum(T.square(T.reshape(t[0], (3, 4)))), [x])
        check_gradients(lambda t: T.mean(T.reduce_sum(t[0], axis=1)), [x])


def random_expression(tensors, depth, seed):
    """Compose a random scalar expression of bounded depth over the inputs."""
    r = np.random.default_rng(seed)
    unary = [lambda t: T.scale(t, 1.7), T.square, T.sigmoid, T.swish,
             lambda t: T.sqrt(T.add(T.square(t), T.const(0.1))), T.neg]
    binary = [T.add, T.sub, T.mul,
              lambda a, b: T.div(a, T.add(T.square(b), T.const(1.0)))]
    nodes = list(tensors)
    for _ in range(depth):
        if r.random() < 0.5 and len(nodes) >= 2:
            i, j = r.integers(len(nodes)), r.integers(len(nodes))
            nodes.append(binary[r.integers(len(binary))](nodes[i], nodes[j]))
        else:
            i = r.integers(len(nodes))
            nodes.append(unary[r.integers(len(unary))](nodes[i]))
    return T.mean(nodes[-1])


class TestRandomCompositions:
    @pytest.mark.parametrize("seed", range(8))
    def test_first_order(self, seed):
        values = [rand((4, 4), seed=100 + seed, low=-1.0, high=1.0),
                  rand((4, 4), seed=200 + seed, low=-1.0, high=1.0)]
        check_gradients(lambda t: random_expression(t, depth=5, seed=seed), values)

    @pytest.mark.parametrize("seed", range(4))
    def test_second_order(self, seed):
        values = [rand((3, 3), seed=300 + seed, low=-1.0, high=1.0)]
        v = rand((3, 3), seed=400 + seed, low=-1.0, high=1.0)

        def first_grad(arrs):
            x = Tensor(arrs[0], requires_grad=True)
            out = random_expression([x], depth=4, seed=seed)
            (g,) = T.grad(out, [x], create_graph=True)
            return x, g

        x, g = first_grad(values)
        s = T.reduce_sum(T.mul(g, Tensor(v)))
        (analytic,) = T.grad(s, [x])

        def fn(arrs):
            _, g = first_grad(arrs)
            return float(np.sum(g.data.astype(np.float64) * v))

        (numeric,) = numerical_grad(fn, values)
        assert rel_err(analytic.data, numeric) < SECOND_ORDER_TOL

    def test_second_order_through_conv(self):
        xv = rand((1, 6, 6, 2), seed=500, low=-1.0, high=1.0)
        kv = rand((3, 3, 2, 2), seed=501, low=-0.4, high=0.4)

        def norm_of_input_grad(karr):
            x = Tensor(xv, requires_grad=True)
            y = T.conv2d(x, Tensor(karr, requires_grad=True), stride=2)
            (gx,) = T.grad(T.reduce_sum(y), [x], create_graph=True)
            return y.node.inputs[1], T.reduce_sum(T.square(gx))

        k, s = norm_of_input_grad(kv)
        (analytic,) = T.grad(s, [k])

        def fn(arrs):
            _, s = norm_of_input_grad(arrs[0])
            return float(s.data)

        (numeric,) = numerical_grad(fn, [kv])
        assert rel_err(analytic.data, numeric) < SECOND_ORDER_TOL


class TestDeterminism:
    def test_bitwise_repeatable_forward_and_gradients(self):
        def run():
            x = Tensor(rand((2, 8, 8, 1), seed=7, low=-1.0, high=1.0), requires_grad=True)
            k = Tensor(rand((5, 5, 1, 3), seed=8, low=-0.4, high=0.4), requires_grad=True)
            out = T.mean(T.swish(T.conv2d(x, k, stride=2)))
            gx, gk = T.grad(out, [x, k])
            return out.data.copy(), gx.data.copy(), gk.data.copy()

        first = run()
        second = run()
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)
