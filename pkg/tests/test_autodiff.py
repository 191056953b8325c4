import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mesocast import autodiff as ad
from gradcheck import assert_grads_close


def matmul_oracle(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


def softmax_oracle(x):
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = ad.matmul(ad.tensor(np.eye(2)), ad.tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_projector(self):
        p = np.array([[1.0, 0.0], [0.0, 0.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        out = ad.matmul(ad.tensor(p), ad.tensor(b))
        np.testing.assert_array_equal(out.data, [[5.0, 6.0], [0.0, 0.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(7)
        a = rng.uniform(-2, 2, (3, 4))
        b = rng.uniform(-2, 2, (4, 2))
        out = ad.matmul(ad.tensor(a), ad.tensor(b))
        np.testing.assert_allclose(out.data, matmul_oracle(a, b), rtol=0, atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 2\)"):
            ad.matmul(ad.tensor(np.zeros((2, 3))), ad.tensor(np.zeros((2, 2))))

    def test_batched_matches_per_slice(self):
        rng = np.random.default_rng(8)
        a = rng.uniform(-1, 1, (5, 3, 4))
        b = rng.uniform(-1, 1, (5, 4, 2))
        w = rng.uniform(-1, 1, (4, 2))
        out = ad.matmul(ad.tensor(a), ad.tensor(b))
        for i in range(5):
            np.testing.assert_allclose(out.data[i], matmul_oracle(a[i], b[i]), atol=1e-12)
        out_w = ad.matmul(ad.tensor(a), ad.tensor(w))
        for i in range(5):
            np.testing.assert_allclose(out_w.data[i], matmul_oracle(a[i], w), atol=1e-12)


class TestSoftmax:
    def test_uniform(self):
        out = ad.softmax_rows(ad.tensor([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3] * 3], atol=1e-15)

    def test_analytic_row(self):
        out = ad.softmax_rows(ad.tensor([[math.log(2.0), 0.0]]))
        np.testing.assert_allclose(out.data, [[2 / 3, 1 / 3]], atol=1e-15)

    def test_against_direct_formula(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(-2, 2, (4, 4))
        out = ad.softmax_rows(ad.tensor(x))
        np.testing.assert_allclose(out.data, softmax_oracle(x), rtol=0, atol=1e-12)

    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
    def test_rows_sum_to_one(self, x):
        out = ad.softmax_rows(ad.tensor(x)).data
        np.testing.assert_allclose(out.sum(axis=-1), np.ones(3), rtol=0, atol=1e-12)
        assert np.all(out >= 0)

    @given(
        arrays(np.float64, (2, 4), elements=st.floats(-30, 30)),
        st.floats(-100, 100),
    )
    def test_shift_invariance(self, x, c):
        a = ad.softmax_rows(ad.tensor(x)).data
        b = ad.softmax_rows(ad.tensor(x + c)).data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


class TestElementwise:
    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(ad.tensor([0.0])).data[0] == 0.5

    def test_tanh_at_zero(self):
        assert ad.tanh(ad.tensor([0.0])).data[0] == 0.0

    def test_sigmoid_derivative_at_zero(self):
        w = ad.parameter([0.0])
        out = ad.sum_all(ad.sigmoid(w))
        ad.backward(out)
        np.testing.assert_allclose(w.grad, [0.25], atol=1e-15)

    def test_sigmoid_matches_direct_formula(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(-20, 20, 64)
        np.testing.assert_allclose(
            ad.sigmoid(ad.tensor(x)).data, 1.0 / (1.0 + np.exp(-x)), rtol=0, atol=1e-12
        )

    def test_binary_shape_mismatch(self):
        for op in (ad.add, ad.sub, ad.mul):
            with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
                op(ad.tensor(np.zeros(2)), ad.tensor(np.zeros(3)))


class TestStructural:
    def test_concat(self):
        a, b = np.array([1.0, 2.0, 3.0]), np.array([4.0, 5.0])
        out = ad.concat([ad.tensor(a), ad.tensor(b)])
        assert out.shape == (5,)
        np.testing.assert_array_equal(out.data[:3], a)

    def test_pad_to_length(self):
        out = ad.pad_last(ad.tensor([1.0, 2.0, 3.0]), 0, 1, mode="zero")
        np.testing.assert_array_equal(out.data, [1.0, 2.0, 3.0, 0.0])

    def test_pad_replicate(self):
        out = ad.pad_last(ad.tensor([1.0, 2.0, 3.0]), 2, 1, mode="replicate")
        np.testing.assert_array_equal(out.data, [1.0, 1.0, 1.0, 2.0, 3.0, 3.0])

    def test_mean_of_ones(self):
        assert ad.mean_all(ad.tensor(np.ones((2, 3)))).item() == 1.0

    def test_narrow_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            ad.narrow(ad.tensor(np.zeros(4)), 0, 2, 3)

    def test_downsample_upsample_roundtrip(self):
        x = np.arange(6.0)
        down = ad.downsample2(ad.tensor(x))
        np.testing.assert_array_equal(down.data, [0.0, 2.0, 4.0])
        up = ad.upsample2(down)
        np.testing.assert_array_equal(up.data, [0.0, 0.0, 2.0, 0.0, 4.0, 0.0])

    def test_transpose_reshape(self):
        x = np.arange(6.0).reshape(2, 3)
        t = ad.transpose(ad.tensor(x))
        np.testing.assert_array_equal(t.data, x.T)
        r = ad.reshape(ad.tensor(x), (3, 2))
        np.testing.assert_array_equal(r.data, x.reshape(3, 2))


class TestBackward:
    def test_sum_of_squares(self):
        x = ad.parameter([1.0, 2.0])
        out = ad.sum_all(ad.mul(x, x))
        ad.backward(out)
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_sigmoid_chain(self):
        w = ad.parameter([[0.0]])
        out = ad.sum_all(ad.sigmoid(ad.matmul(w, ad.tensor([[1.0]]))))
        ad.backward(out)
        np.testing.assert_allclose(w.grad, [[0.25]], atol=1e-15)

    def test_non_scalar_root_rejected(self):
        x = ad.parameter(np.zeros(3))
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(x)

    def test_two_passes_bitwise_identical(self):
        rng = np.random.default_rng(5)
        w = ad.parameter(rng.uniform(-1, 1, (4, 4)))
        x = ad.tensor(rng.uniform(-1, 1, (3, 4)))

        def run():
            h = ad.tanh(ad.matmul(x, w))
            loss = ad.mean_all(ad.mul(h, h))
            ad.backward(loss)
            return w.grad.copy()

        g1, g2 = run(), run()
        assert np.array_equal(g1, g2)

    def test_shared_subgraph_accumulates(self):
        # y = x*x + x ; dy/dx = 2x + 1
        x = ad.parameter([3.0])
        out = ad.sum_all(ad.add(ad.mul(x, x), x))
        ad.backward(out)
        np.testing.assert_allclose(x.grad, [7.0], atol=1e-15)


def composite_all_primitives(leaves):
    """Exercises every primitive in one differentiable scalar."""
    x, w, b, v = leaves
    h = ad.matmul(x, w)                                  # (3, 4)
    h = ad.add(h, ad.broadcast_rows(b, 3))
    h = ad.sigmoid(h)
    att = ad.softmax_rows(ad.matmul(h, ad.transpose(h)))
    h = ad.matmul(att, h)
    h = ad.concat([h, ad.scale(h, 0.5)], axis=1)         # (3, 8)
    h = ad.narrow(h, 1, 1, 6)
    h = ad.pad_last(h, 1, 1, mode="replicate")
    h = ad.downsample2(h)
    h = ad.upsample2(h)
    h = ad.tanh(ad.reshape(h, (2, 12)))
    h = ad.mul(h, h)
    row = ad.matmul(ad.reshape(h, (2, 12)), v)           # (2, 1)
    total = ad.add(ad.sum_all(ad.abs_(row)), ad.mean_all(ad.sub(h, h)))
    return ad.scale(total, 0.25)


class TestGradientsAgainstFiniteDifferences:
    def test_composite_of_all_primitives(self):
        rng = np.random.default_rng(17)
        values = [
            rng.uniform(-2, 2, (3, 5)),
            rng.uniform(-2, 2, (5, 4)),
            rng.uniform(-2, 2, 4),
            rng.uniform(-2, 2, (12, 1)),
        ]
        assert_grads_close(composite_all_primitives, values, h=1e-6, tol=1e-6)

    @pytest.mark.parametrize("seed", range(4))
    def test_each_primitive(self, seed):
        rng = np.random.default_rng(100 + seed)
        x = rng.uniform(-2, 2, (3, 4))
        y = rng.uniform(-2, 2, (3, 4))
        w = rng.uniform(-2, 2, (4, 3))
        cases = {
            "add": (lambda l: ad.sum_all(ad.mul(ad.add(l[0], l[1]), l[0])), [x, y]),
            "sub": (lambda l: ad.sum_all(ad.mul(ad.sub(l[0], l[1]), l[1])), [x, y]),
            "mul": (lambda l: ad.mean_all(ad.mul(l[0], l[1])), [x, y]),
            "scale": (lambda l: ad.sum_all(ad.scale(l[0], -1.7)), [x]),
            "sigmoid": (lambda l: ad.mean_all(ad.sigmoid(l[0])), [x]),
            "tanh": (lambda l: ad.mean_all(ad.tanh(l[0])), [x]),
            # keep |x| away from the kink by construction
            "abs": (lambda l: ad.sum_all(ad.abs_(l[0])), [np.sign(x) * (0.05 + np.abs(x))]),
            "matmul": (lambda l: ad.sum_all(ad.matmul(l[0], l[1])), [x, w]),
            "softmax": (lambda l: ad.sum_all(ad.mul(ad.softmax_rows(l[0]), l[1])), [x, y]),
            "concat": (lambda l: ad.sum_all(ad.mul(ad.concat(l, axis=0), ad.concat(l[::-1], axis=0))), [x, y]),
            "narrow": (lambda l: ad.sum_all(ad.narrow(l[0], 1, 1, 2)), [x]),
            "transpose": (lambda l: ad.sum_all(ad.mul(ad.transpose(l[0]), l[1])), [x, x.T.copy()]),
            "reshape": (lambda l: ad.sum_all(ad.mul(ad.reshape(l[0], (2, 6)), l[1])), [x, x.reshape(2, 6).copy()]),
            "pad_zero": (lambda l: ad.sum_all(ad.mul(ad.pad_last(l[0], 1, 2, "zero"), l[1])), [x, rng.uniform(-1, 1, (3, 7))]),
            "pad_rep": (lambda l: ad.sum_all(ad.mul(ad.pad_last(l[0], 2, 1, "replicate"), l[1])), [x, rng.uniform(-1, 1, (3, 7))]),
            "broadcast": (lambda l: ad.sum_all(ad.mul(ad.broadcast_rows(l[0], 3), l[1])), [rng.uniform(-2, 2, 4), x]),
            "down": (lambda l: ad.sum_all(ad.downsample2(l[0])), [x]),
            "up": (lambda l: ad.sum_all(ad.mul(ad.upsample2(l[0]), l[1])), [x, rng.uniform(-1, 1, (3, 8))]),
            "bmm": (
                lambda l: ad.sum_all(ad.matmul(ad.reshape(l[0], (2, 2, 3)), l[1])),
                [rng.uniform(-2, 2, (2, 6)), rng.uniform(-2, 2, (3, 2))],
            ),
        }
        for name, (build, values) in cases.items():
            try:
                assert_grads_close(build, values, h=1e-6, tol=1e-6)
            except AssertionError as exc:  # pragma: no cover
                raise AssertionError(f"{name}: {exc}") from exc
