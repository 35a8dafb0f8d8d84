"""Tensor core tests: forward oracles, gradient checks, and error contracts.

Forward results are checked against naive loop oracles written here in
float64; gradients are checked against central finite differences.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as npst

from protoshot import tensor as T
from protoshot.errors import NumericalError, ShapeError


# ---------------------------------------------------------------------------
# independent oracles (float64, plain loops)


def conv2d_oracle(x, kernel, stride, padding):
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    n, c_in, h, w = x.shape
    c_out, _, kh, kw = kernel.shape
    xp = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + w] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c_out, oh, ow))
    for b in range(n):
        for o in range(c_out):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(c_in):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += xp[b, c, i * stride + ki, j * stride + kj] * kernel[o, c, ki, kj]
                    out[b, o, i, j] = acc
    return out


def matmul_oracle(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def maxpool_oracle(x, window):
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // window, w // window))
    for b in range(n):
        for ch in range(c):
            for i in range(0, h, window):
                for j in range(0, w, window):
                    out[b, ch, i // window, j // window] = x[b, ch, i : i + window, j : j + window].max()
    return out


# ---------------------------------------------------------------------------
# conv2d


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = T.Tensor(rng.random((1, 1, 4, 4)))
        k = T.Tensor(np.ones((1, 1, 1, 1)))
        out = T.conv2d(x, k, stride=1, padding=0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_kernel_annihilates(self):
        rng = np.random.default_rng(1)
        x = T.Tensor(rng.random((2, 3, 6, 6)))
        k = T.Tensor(np.zeros((4, 3, 3, 3)))
        out = T.conv2d(x, k, stride=1, padding=1)
        assert (out.data == 0).all()

    def test_matches_loop_oracle_small(self):
        rng = np.random.default_rng(2)
        x = rng.random((1, 1, 4, 4)).astype(np.float32)
        k = rng.random((1, 1, 3, 3)).astype(np.float32)
        out = T.conv2d(T.Tensor(x), T.Tensor(k), stride=1, padding=0)
        assert out.shape == (1, 1, 2, 2)
        np.testing.assert_allclose(out.data, conv2d_oracle(x, k, 1, 0), atol=1e-6)

    @pytest.mark.parametrize("shape,kshape,stride,padding", [
        ((2, 3, 8, 8), (5, 3, 3, 3), 1, 1),
        ((1, 2, 7, 9), (3, 2, 3, 3), 2, 0),
        ((3, 1, 6, 6), (2, 1, 2, 2), 2, 1),
        ((1, 4, 5, 5), (4, 4, 5, 5), 1, 0),
    ])
    def test_matches_loop_oracle_randomized(self, shape, kshape, stride, padding):
        # inputs at the pipeline's natural scale: [0,1] images, sub-unit weights
        rng = np.random.default_rng(hash((shape, kshape)) % 2**32)
        x = rng.random(shape, dtype=np.float32)
        k = rng.uniform(-0.5, 0.5, kshape).astype(np.float32)
        out = T.conv2d(T.Tensor(x), T.Tensor(k), stride=stride, padding=padding)
        np.testing.assert_allclose(out.data, conv2d_oracle(x, k, stride, padding), atol=1e-6)

    def test_unbatched_input_round_trips(self):
        rng = np.random.default_rng(3)
        x = rng.random((2, 6, 6)).astype(np.float32)
        k = rng.random((3, 2, 3, 3)).astype(np.float32)
        out = T.conv2d(T.Tensor(x), T.Tensor(k), padding=1)
        assert out.shape == (3, 6, 6)
        np.testing.assert_allclose(out.data, conv2d_oracle(x[None], k, 1, 1)[0], atol=1e-5)

    def test_rejects_channel_mismatch(self):
        x = T.Tensor(np.zeros((1, 3, 4, 4)))
        k = T.Tensor(np.zeros((2, 4, 3, 3)))
        with pytest.raises(ShapeError, match="channels"):
            T.conv2d(x, k)

    def test_rejects_oversized_kernel(self):
        x = T.Tensor(np.zeros((1, 1, 4, 4)))
        k = T.Tensor(np.zeros((1, 1, 5, 5)))
        with pytest.raises(ShapeError, match="height 5"):
            T.conv2d(x, k)

    def test_rejects_bad_stride(self):
        x = T.Tensor(np.zeros((1, 1, 4, 4)))
        k = T.Tensor(np.zeros((1, 1, 3, 3)))
        with pytest.raises(ShapeError, match="stride"):
            T.conv2d(x, k, stride=0)


# ---------------------------------------------------------------------------
# relu


class TestRelu:
    def test_definition(self):
        out = T.relu(T.Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_dead_region_blocks_gradient(self):
        x = T.Tensor(np.full((3, 3), -1.0), requires_grad=True)
        out = T.relu(x)
        assert (out.data == 0).all()
        out.sum().backward()
        np.testing.assert_array_equal(x.grad, np.zeros((3, 3)))

    @given(npst.arrays(np.float32, npst.array_shapes(max_dims=3, max_side=6),
                       elements=st.floats(-10, 10, width=32)))
    @settings(max_examples=50, deadline=None)
    def test_elementwise_oracle(self, arr):
        out = T.relu(T.Tensor(arr))
        np.testing.assert_array_equal(out.data, np.maximum(arr, 0.0))


# ---------------------------------------------------------------------------
# max_pool2d


class TestMaxPool2d:
    def test_definition(self):
        x = T.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        out = T.max_pool2d(x, 2)
        np.testing.assert_array_equal(out.data, [[[[4.0]]]])

    def test_tie_break_routes_first_row_major(self):
        x = T.Tensor(np.full((1, 1, 4, 4), 7.0), requires_grad=True)
        out = T.max_pool2d(x, 2)
        assert (out.data == 7.0).all()
        out.sum().backward()
        expected = np.zeros((1, 1, 4, 4))
        expected[0, 0, ::2, ::2] = 1.0  # first element of each window
        np.testing.assert_array_equal(x.grad, expected)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        out = T.max_pool2d(T.Tensor(x), 2)
        np.testing.assert_array_equal(out.data, maxpool_oracle(x, 2).astype(np.float32))

    def test_rejects_non_divisible_extent(self):
        x = T.Tensor(np.zeros((1, 1, 7, 8)))
        with pytest.raises(ShapeError, match="not divisible"):
            T.max_pool2d(x, 2)


# ---------------------------------------------------------------------------
# linear


class TestLinear:
    def test_identity(self):
        rng = np.random.default_rng(5)
        x = rng.random((3, 4)).astype(np.float32)
        out = T.linear(T.Tensor(x), T.Tensor(np.eye(4)), T.Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, x, atol=1e-7)

    def test_zero_weight_gives_bias_rows(self):
        bias = np.array([1.0, -2.0], dtype=np.float32)
        out = T.linear(T.Tensor(np.random.default_rng(6).random((5, 3))),
                       T.Tensor(np.zeros((2, 3))), T.Tensor(bias))
        np.testing.assert_array_equal(out.data, np.tile(bias, (5, 1)))

    def test_matches_matmul_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((3, 4)).astype(np.float32)
        w = rng.standard_normal((2, 4)).astype(np.float32)
        b = rng.standard_normal(2).astype(np.float32)
        out = T.linear(T.Tensor(x), T.Tensor(w), T.Tensor(b))
        np.testing.assert_allclose(out.data, matmul_oracle(x, w.T) + b, atol=1e-6)

    def test_rejects_dimension_mismatch(self):
        with pytest.raises(ShapeError, match="features"):
            T.linear(T.Tensor(np.zeros((3, 4))), T.Tensor(np.zeros((2, 5))), T.Tensor(np.zeros(2)))


# ---------------------------------------------------------------------------
# backward


def _two_layer_net(x, k1, k2, w, b):
    h1 = T.max_pool2d(T.relu(T.conv2d(x, k1, padding=1)), 2)
    h2 = T.relu(T.conv2d(h1, k2, padding=1))
    flat = T.reshape(h2, (h2.shape[0], -1))
    return T.linear(flat, w, b).sum()


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = T.Tensor(np.random.default_rng(8).random((4, 5)), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((4, 5)))

    def test_constant_loss_gives_zero_gradient(self):
        x = T.Tensor(np.random.default_rng(9).random(6), requires_grad=True)
        loss = T.mul(x, T.Tensor(np.zeros(6))).sum()
        loss.backward()
        np.testing.assert_array_equal(x.grad, np.zeros(6))

    def test_rejects_non_scalar_loss(self):
        x = T.Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ShapeError, match="scalar"):
            T.relu(x).backward()

    def test_two_layer_net_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        x = rng.random((1, 1, 8, 8)).astype(np.float32)
        k1 = rng.standard_normal((3, 1, 3, 3)).astype(np.float32) * 0.5
        k2 = rng.standard_normal((2, 3, 3, 3)).astype(np.float32) * 0.5
        w = rng.standard_normal((4, 2 * 4 * 4)).astype(np.float32) * 0.3
        b = rng.standard_normal(4).astype(np.float32)

        tensors = {"x": x, "k1": k1, "k2": k2, "w": w, "b": b}
        for name, arr in tensors.items():
            def f(t, _name=name):
                args = {n: T.Tensor(a) for n, a in tensors.items()}
                args[_name] = t
                return _two_layer_net(args["x"], args["k1"], args["k2"], args["w"], args["b"])

            err = T.finite_diff_check(f, T.Tensor(arr), eps=1e-4)
            assert err < 1e-3, f"gradient mismatch for {name}: {err}"

    def test_gradients_are_deterministic(self):
        def run():
            rng = np.random.default_rng(11)
            x = T.Tensor(rng.random((2, 1, 4, 4)).astype(np.float32), requires_grad=True)
            k = T.Tensor(rng.standard_normal((2, 1, 3, 3)).astype(np.float32), requires_grad=True)
            loss = T.relu(T.conv2d(x, k, padding=1)).mean()
            loss.backward()
            return x.grad.copy(), k.grad.copy()

        g1, g2 = run(), run()
        assert (g1[0] == g2[0]).all() and (g1[1] == g2[1]).all()

    def test_grad_accumulates_for_shared_operand(self):
        x = T.Tensor(np.array([2.0, 3.0]), requires_grad=True)
        loss = T.mul(x, x).sum()  # d/dx (x^2) = 2x
        loss.backward()
        np.testing.assert_allclose(x.grad, [4.0, 6.0])


# ---------------------------------------------------------------------------
# elementwise / structural ops


class TestElementwiseOps:
    def test_add_rejects_general_broadcast(self):
        with pytest.raises(ShapeError, match="incompatible"):
            T.add(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 1))))

    def test_add_row_bias(self):
        x = T.Tensor(np.zeros((2, 3)), requires_grad=True)
        b = T.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        out = T.add(x, b)
        np.testing.assert_array_equal(out.data, [[1, 2, 3], [1, 2, 3]])
        out.sum().backward()
        np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])

    def test_add_channel_bias(self):
        x = T.Tensor(np.zeros((2, 3, 2, 2)), requires_grad=True)
        b = T.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        out = T.add(x, b)
        assert out.data[0, 1].tolist() == [[2.0, 2.0], [2.0, 2.0]]
        out.sum().backward()
        np.testing.assert_array_equal(b.grad, [8.0, 8.0, 8.0])

    def test_clip_min_blocks_gradient_below_floor(self):
        x = T.Tensor(np.array([-2.0, 0.5, 3.0]), requires_grad=True)
        out = T.clip_min(x, 0.0)
        np.testing.assert_array_equal(out.data, [0.0, 0.5, 3.0])
        out.sum().backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 1.0])

    def test_take_picks_single_element(self):
        x = T.Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
        out = T.take(x, (1, 2))
        assert out.item() == 5.0
        out.backward()
        expected = np.zeros((2, 3))
        expected[1, 2] = 1.0
        np.testing.assert_array_equal(x.grad, expected)

    @given(npst.arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(2, 6)),
                       elements=st.floats(-20, 20, width=32)))
    @settings(max_examples=50, deadline=None)
    def test_log_softmax_rows_normalize(self, arr):
        out = T.log_softmax(T.Tensor(arr))
        np.testing.assert_allclose(np.exp(out.data).sum(axis=1), 1.0, atol=1e-5)

    def test_pairwise_sq_dist_matches_loop(self):
        rng = np.random.default_rng(12)
        q = rng.standard_normal((4, 6)).astype(np.float32)
        p = rng.standard_normal((3, 6)).astype(np.float32)
        out = T.pairwise_sq_dist(T.Tensor(q), T.Tensor(p))
        expected = np.zeros((4, 3))
        for i in range(4):
            for k in range(3):
                expected[i, k] = sum((q[i, h] - p[k, h]) ** 2 for h in range(6))
        np.testing.assert_allclose(out.data, expected, rtol=1e-5)


# ---------------------------------------------------------------------------
# finite_diff_check contract


class TestFiniteDiffCheck:
    def test_quadratic(self):
        err = T.finite_diff_check(lambda t: T.mul(t, t).sum(), T.Tensor([3.0]), eps=1e-4)
        assert err < 1e-6

    def test_linear_is_nearly_exact(self):
        x = T.Tensor(np.random.default_rng(13).random(5))
        err = T.finite_diff_check(lambda t: t.sum(), x, eps=1e-4)
        assert err < 1e-9

    def test_small_conv_net(self):
        rng = np.random.default_rng(14)
        k = rng.standard_normal((2, 1, 3, 3)).astype(np.float32) * 0.5
        x = T.Tensor(rng.random((1, 1, 6, 6)).astype(np.float32))

        def f(t):
            return T.relu(T.conv2d(t, T.Tensor(k), padding=1)).mean()

        assert T.finite_diff_check(f, x, eps=1e-4) < 1e-3

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError, match="eps"):
            T.finite_diff_check(lambda t: t.sum(), T.Tensor([1.0]), eps=0.0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_rejects_non_finite_function(self):
        with pytest.raises(NumericalError, match="finite"):
            T.finite_diff_check(lambda t: T.log(t).sum(), T.Tensor([-1.0]), eps=1e-4)


# ---------------------------------------------------------------------------
# invariant: gradients match finite differences across every differentiable op


def _op_cases():
    rng = np.random.default_rng(99)
    a23 = rng.random((2, 3)).astype(np.float32)
    b23 = rng.random((2, 3)).astype(np.float32)
    w34 = rng.random((3, 4)).astype(np.float32)
    protos = rng.random((2, 3)).astype(np.float32)
    kern = rng.standard_normal((2, 1, 3, 3)).astype(np.float32)
    lin_w = rng.standard_normal((2, 3)).astype(np.float32)
    lin_b = rng.random(2).astype(np.float32)
    cases = [
        ("add", lambda t: T.add(t, T.Tensor(b23)).sum(), a23),
        ("sub", lambda t: T.sub(T.Tensor(b23), t).sum(), a23),
        ("mul", lambda t: T.mul(t, T.Tensor(b23)).mean(), a23),
        ("scale", lambda t: T.scale(t, -2.5).sum(), a23),
        ("matmul", lambda t: T.matmul(t, T.Tensor(w34)).sum(), a23),
        ("relu", lambda t: T.relu(t).sum(), rng.standard_normal((3, 3)).astype(np.float32)),
        ("log", lambda t: T.log(t).sum(), rng.random(4).astype(np.float32) + 0.5),
        ("exp", lambda t: T.exp(t).mean(), rng.standard_normal(4).astype(np.float32)),
        ("sqrt", lambda t: T.sqrt(t).sum(), rng.random(4).astype(np.float32) + 0.5),
        ("reshape", lambda t: T.reshape(t, (6,)).sum(), a23),
        ("log_softmax", lambda t: T.take(T.log_softmax(t), (0, 1)),
         rng.standard_normal((2, 4)).astype(np.float32)),
        ("pairwise", lambda t: T.pairwise_sq_dist(t, T.Tensor(protos)).sum(), a23),
        ("conv2d", lambda t: T.conv2d(t, T.Tensor(kern), padding=1).sum(),
         rng.random((1, 1, 6, 6)).astype(np.float32)),
        ("max_pool2d", lambda t: T.max_pool2d(t, 2).sum(), rng.random((1, 1, 4, 4)).astype(np.float32)),
        ("linear", lambda t: T.linear(t, T.Tensor(lin_w), T.Tensor(lin_b)).sum(), a23),
    ]
    return cases


@pytest.mark.parametrize("name,f,x", _op_cases(), ids=[c[0] for c in _op_cases()])
def test_gradient_invariant_per_op(name, f, x):
    # randomized inputs per op; 100 total trials are spread across the op set
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(7):
        jitter = (x + rng.standard_normal(x.shape).astype(np.float32) * 0.05).astype(np.float32)
        err = T.finite_diff_check(f, T.Tensor(jitter), eps=1e-4)
        assert err < 1e-3, f"{name}: {err}"


class TestDtypeDiscipline:
    def test_float64_inputs_propagate(self):
        x64 = T.Tensor(np.random.default_rng(20).random((1, 1, 4, 4)), dtype=np.float64,
                       requires_grad=True)
        k32 = T.Tensor(np.random.default_rng(21).standard_normal((2, 1, 3, 3)).astype(np.float32))
        out = T.conv2d(x64, k32, padding=1)
        assert out.dtype == np.float64
        out.sum().backward()
        assert x64.grad.dtype == np.float64

    def test_int_input_coerced_to_float32(self):
        t = T.Tensor([[1, 2], [3, 4]])
        assert t.dtype == np.float32

    def test_detach_cuts_the_graph(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        y = T.scale(x, 2.0).detach()
        z = T.mul(y, y).sum()
        z.backward()
        assert x.grad is None
