"""Tensor ops: forward oracles, tape semantics and finite-difference gradients."""

import numpy as np
import pytest

from ldprune import tensor as T
from ldprune.gradcheck import check_gradients
from ldprune.tensor import GradTape, NonFiniteError, ShapeError, Tensor, no_tape


def t64(rng, *shape, grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=grad, dtype=np.float64)


def _weighted_sum(out: Tensor, seed: int = 99) -> Tensor:
    # project onto a fixed random direction so every output element matters
    w = Tensor(np.random.default_rng(seed).standard_normal(out.shape), dtype=np.float64)
    return T.sum(T.mul(out, w))


def naive_conv(x, w, b, stride, pad):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
            out[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3])) + b
    return out


# op name -> (builder of float64 inputs, function of those inputs)
GRAD_CASES = {
    "add_broadcast": (lambda r: [t64(r, 2, 3), t64(r, 3)], lambda a, b: _weighted_sum(T.add(a, b))),
    "sub": (lambda r: [t64(r, 2, 3), t64(r, 2, 3)], lambda a, b: _weighted_sum(T.sub(a, b))),
    "mul": (lambda r: [t64(r, 2, 3), t64(r, 1, 3)], lambda a, b: _weighted_sum(T.mul(a, b))),
    "scale": (lambda r: [t64(r, 4)], lambda a: _weighted_sum(T.scale(a, -2.5))),
    "mean": (lambda r: [t64(r, 3, 4)], lambda a: T.mean(T.mul(a, a))),
    "sum": (lambda r: [t64(r, 3, 4)], lambda a: T.sum(T.mul(a, a))),
    "residual_add": (lambda r: [t64(r, 2, 3, 2, 2), t64(r, 2, 3, 2, 2)],
                     lambda a, b: _weighted_sum(T.residual_add(a, b))),
    "reshape": (lambda r: [t64(r, 2, 6)], lambda a: _weighted_sum(T.reshape(a, (3, 4)))),
    "transpose": (lambda r: [t64(r, 2, 3, 4)], lambda a: _weighted_sum(T.transpose(a, (2, 0, 1)))),
    "concat": (lambda r: [t64(r, 2, 1, 3), t64(r, 2, 2, 3)], lambda a, b: _weighted_sum(T.concat([a, b], 1))),
    "matmul": (lambda r: [t64(r, 2, 3, 4), t64(r, 4, 5)], lambda a, b: _weighted_sum(T.matmul(a, b))),
    "linear": (lambda r: [t64(r, 2, 3, 4), t64(r, 5, 4), t64(r, 5)],
               lambda x, w, b: _weighted_sum(T.linear(x, w, b))),
    "conv2d_3x3": (lambda r: [t64(r, 2, 3, 5, 5), t64(r, 4, 3, 3, 3), t64(r, 4)],
                   lambda x, w, b: _weighted_sum(T.conv2d(x, w, b, 1, 1))),
    "conv2d_stride2": (lambda r: [t64(r, 1, 2, 6, 6), t64(r, 3, 2, 3, 3), t64(r, 3)],
                       lambda x, w, b: _weighted_sum(T.conv2d(x, w, b, 2, 1))),
    "conv2d_1x1": (lambda r: [t64(r, 2, 3, 4, 4), t64(r, 2, 3, 1, 1)],
                   lambda x, w: _weighted_sum(T.conv2d(x, w))),
    "avg_pool2d": (lambda r: [t64(r, 1, 2, 4, 4)], lambda x: _weighted_sum(T.avg_pool2d(x, 2))),
    "upsample_nearest": (lambda r: [t64(r, 1, 2, 2, 3)], lambda x: _weighted_sum(T.upsample_nearest(x, 2))),
    "group_norm": (lambda r: [t64(r, 2, 4, 3, 3), t64(r, 4), t64(r, 4)],
                   lambda x, w, b: _weighted_sum(T.group_norm(x, 2, w, b))),
    "layer_norm": (lambda r: [t64(r, 2, 3, 6), t64(r, 6), t64(r, 6)],
                   lambda x, w, b: _weighted_sum(T.layer_norm(x, w, b))),
    "silu": (lambda r: [t64(r, 3, 4)], lambda x: _weighted_sum(T.silu(x))),
    "softmax": (lambda r: [t64(r, 2, 5)], lambda x: _weighted_sum(T.softmax(x, -1))),
    "attention": (lambda r: [t64(r, 2, 3, 4), t64(r, 2, 5, 4), t64(r, 2, 5, 6)],
                  lambda q, k, v: _weighted_sum(T.scaled_dot_product_attention(q, k, v))),
    "mse_loss": (lambda r: [t64(r, 3, 4), t64(r, 3, 4)], lambda a, b: T.mse_loss(a, b)),
    "embedding": (lambda r: [t64(r, 5, 3)], lambda tbl: _weighted_sum(T.embedding(tbl, [0, 3, 3, 1]))),
}


class TestFiniteDifferences:
    @pytest.mark.parametrize("name", sorted(GRAD_CASES))
    def test_op_gradient(self, name):
        build, fn = GRAD_CASES[name]
        inputs = build(np.random.default_rng(0))
        errors = check_gradients(fn, inputs)
        assert max(errors) < 1e-6, errors

    def test_composite_chain(self):
        rng = np.random.default_rng(1)
        x, w = t64(rng, 1, 4, 4, 4), t64(rng, 4, 4, 3, 3)

        def fn(x, w):
            h = T.conv2d(T.silu(T.group_norm(x, 2)), w, padding=1)
            return T.mean(T.mul(T.add(h, x), T.add(h, x)))

        assert max(check_gradients(fn, [x, w])) < 1e-6


class TestForwardOracles:
    def test_conv_matches_loop(self):
        rng = np.random.default_rng(2)
        x, w, b = rng.standard_normal((2, 3, 7, 7)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
        for stride in (1, 2):
            out = T.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64),
                           stride, 1)
            np.testing.assert_allclose(out.data, naive_conv(x, w, b, stride, 1), atol=1e-10)

    def test_group_norm_statistics(self):
        x = Tensor(np.random.default_rng(3).standard_normal((2, 4, 5, 5)) * 3 + 1, dtype=np.float64)
        y = T.group_norm(x, 2).data.reshape(2, 2, -1)
        np.testing.assert_allclose(y.mean(-1), 0, atol=1e-10)
        np.testing.assert_allclose(y.std(-1), 1, atol=1e-4)

    def test_softmax_rows_sum_to_one(self):
        p = T.softmax(Tensor(np.random.default_rng(4).standard_normal((3, 7)) * 50)).data
        np.testing.assert_allclose(p.sum(-1), 1, atol=1e-6)

    def test_pool_then_upsample_is_block_mean(self):
        x = Tensor(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4))
        y = T.upsample_nearest(T.avg_pool2d(x, 2), 2).data[0, 0]
        assert y[0, 0] == y[1, 1] == np.mean([0, 1, 4, 5])

    def test_float32_default(self):
        assert Tensor([1, 2]).data.dtype == np.float32
        assert T.add(Tensor([1.0]), Tensor([2.0])).data.dtype == np.float32


class TestTape:
    def test_fan_out_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True, dtype=np.float64)
        with GradTape() as tape:
            y = T.sum(T.add(T.mul(x, x), x))
        g = tape.backward(y)
        np.testing.assert_allclose(g[x], [7.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with GradTape() as tape:
            y = T.scale(x, 2.0)
        with pytest.raises(ShapeError):
            tape.backward(y)

    def test_no_tape_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with GradTape() as tape:
            with no_tape():
                T.scale(x, 2.0)
        assert len(tape) == 0

    def test_outside_tape_nothing_recorded(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = T.sum(x)
        with GradTape() as tape:
            pass
        with pytest.raises(ValueError):
            tape.backward(y)

    def test_non_finite_raises(self):
        with np.errstate(invalid="ignore"), pytest.raises(NonFiniteError):
            T.mul(Tensor([np.inf]), Tensor([0.0]))

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            T.mse_loss(Tensor(np.ones(3)), Tensor(np.ones(4)))
        with pytest.raises(ShapeError):
            T.scaled_dot_product_attention(Tensor(np.ones((1, 2, 3))), Tensor(np.ones((1, 2, 4))),
                                           Tensor(np.ones((1, 2, 4))))
