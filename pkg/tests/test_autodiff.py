import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import bimp.autodiff as ad
from bimp.autodiff import Segments, Tape, Tensor, backward, grad_check


def leaf(x):
    return Tensor(x, requires_grad=True)


class TestForward:
    def test_relu(self):
        np.testing.assert_array_equal(ad.relu([-1.0, 0.0, 2.0]).data, [0, 0, 2])

    def test_softmax_symmetric(self):
        np.testing.assert_allclose(ad.softmax_rows([[0.0, 0.0]]).data, [[0.5, 0.5]])

    def test_frobenius_scaled_identity(self):
        assert ad.frobenius_norm(np.eye(2) / math.sqrt(2)).data == pytest.approx(1.0, abs=1e-15)

    def test_leaky_slope(self):
        np.testing.assert_allclose(ad.leaky_relu([-2.0, 3.0]).data, [-0.02, 3.0])

    def test_elu(self):
        np.testing.assert_allclose(ad.elu([-1.0, 0.0, 1.0]).data, [math.expm1(-1), 0.0, 1.0])

    def test_concat_feature_axis(self):
        out = ad.concat([np.ones((2, 1)), np.zeros((2, 2))], axis=1)
        assert out.shape == (2, 3)

    def test_max_rows(self):
        np.testing.assert_array_equal(ad.max_rows([[1.0, 5.0], [3.0, 2.0]]).data, [3.0, 5.0])

    def test_segment_max_empty_group_is_zero(self):
        seg = Segments([0, 0, 2], 3)
        out = ad.segment_max([[1.0], [-4.0], [7.0]], seg)
        np.testing.assert_array_equal(out.data, [[1.0], [0.0], [7.0]])

    def test_segment_softmax_sums_to_one(self, rng):
        seg = Segments(rng.integers(0, 4, 30), 4)
        out = ad.segment_softmax(rng.standard_normal((30, 3)), seg)
        sums = np.asarray(seg.matrix @ out.data)
        present = seg.counts > 0
        np.testing.assert_allclose(sums[present], 1.0, atol=1e-12)

    def test_batch_norm_statistics(self, rng):
        x = rng.standard_normal((50, 4)) * 3 + 1
        out, _, _ = ad.batch_norm(x, np.ones(4), np.zeros(4), eps=0.0)
        np.testing.assert_allclose(out.data.mean(axis=0), 0.0, atol=1e-8)
        np.testing.assert_allclose(out.data.var(axis=0), 1.0, atol=1e-8)


class TestErrors:
    def test_matmul_shape_message(self):
        with pytest.raises(ad.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
            ad.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_add_shape_message(self):
        with pytest.raises(ad.ShapeError, match="add"):
            ad.add(np.ones((2, 3)), np.ones((4, 3)))

    def test_softmax_empty(self):
        with pytest.raises(ad.EmptyAxisError):
            ad.softmax_rows(np.ones((2, 0)))

    def test_norm_empty(self):
        with pytest.raises(ad.EmptyAxisError):
            ad.frobenius_norm(np.ones((0, 3)))

    def test_backward_non_scalar(self):
        with pytest.raises(ad.ShapeError):
            backward(ad.relu(leaf([1.0, 2.0])))

    def test_grad_check_step_range(self):
        with pytest.raises(ValueError):
            grad_check(lambda x: ad.sum_(x), leaf([1.0]), h=1e-2)

    def test_grad_check_non_finite(self):
        with pytest.raises(FloatingPointError):
            grad_check(lambda x: ad.sum_(ad.log(x)), leaf([1e-7]), h=1e-5)


class TestBackward:
    def test_quadratic(self):
        x = leaf([1.0, 2.0])
        backward(ad.sum_(x * x))
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_trace_ata(self):
        a = leaf(np.eye(2))
        backward(ad.trace(a.T @ a))
        np.testing.assert_allclose(a.grad, 2 * np.eye(2))

    def test_reuse_accumulates(self):
        x = leaf([1.0, -3.0, 0.5])
        backward(ad.sum_(x) + ad.sum_(x))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])

    def test_non_participating_grad_is_zero(self):
        x, y = leaf([1.0, 2.0]), leaf([[3.0]])
        backward(ad.sum_(x))
        np.testing.assert_array_equal(y.grad, [[0.0]])

    def test_linearity_of_accumulation(self, rng):
        a0 = rng.standard_normal((3, 3))

        def f1(a):
            return ad.sum_(ad.sigmoid(a @ a))

        def f2(a):
            return ad.trace(ad.exp(a * 0.1))

        a = leaf(a0)
        backward(f1(a) + f2(a))
        joint = a.grad.copy()
        a = leaf(a0)
        backward(f1(a))
        backward(f2(a))
        np.testing.assert_allclose(joint, a.grad, atol=1e-14)

    def test_tape_is_topological(self, rng):
        x = leaf(rng.standard_normal(3))
        y = ad.exp(x)
        z = ad.sum_(y * x + y)
        tape = Tape(z)
        pos = {id(n): i for i, n in enumerate(tape.nodes)}
        for node in tape.nodes:
            for p in node._parents:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(node)]
        assert len(tape) == len(pos)

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with ad.no_grad():
            y = x * 2.0
        assert not y.requires_grad


class TestGradCheck:
    def test_sigmoid_sum(self, rng):
        assert grad_check(lambda x: ad.sum_(ad.sigmoid(x)), leaf(rng.standard_normal(6)), h=1e-5) < 1e-6

    def test_linear_exact(self, rng):
        w = rng.standard_normal((4, 1))
        assert grad_check(lambda x: ad.sum_(x @ w), leaf(rng.standard_normal((3, 4))), h=1e-5) < 1e-10


def _away_from_zero(rng, shape):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < 1e-2, 0.5, x)


SEG = Segments([0, 2, 2, 1, 0, 2, 3], 5)

CATALOG = {
    "matmul": lambda x, c: ad.sum_((x @ c["m"]) * c["w34"]),
    "transpose": lambda x, c: ad.sum_(x.T * c["w43"]),
    "add": lambda x, c: ad.sum_((x + c["b"]) * c["w"]),
    "sub": lambda x, c: ad.sum_((c["b"] - x) * c["w"]),
    "mul": lambda x, c: ad.sum_(x * x * c["w"]),
    "div": lambda x, c: ad.sum_(c["w"] / (x * x + 1.0)),
    "scale": lambda x, c: ad.sum_(ad.scale(x, 2.5) * c["w"]),
    "relu": lambda x, c: ad.sum_(ad.relu(x) * c["w"]),
    "leaky_relu": lambda x, c: ad.sum_(ad.leaky_relu(x) * c["w"]),
    "elu": lambda x, c: ad.sum_(ad.elu(x) * c["w"]),
    "sigmoid": lambda x, c: ad.sum_(ad.sigmoid(x) * c["w"]),
    "exp": lambda x, c: ad.sum_(ad.exp(x) * c["w"]),
    "log": lambda x, c: ad.sum_(ad.log(x * x + 0.5) * c["w"]),
    "sqrt": lambda x, c: ad.sum_(ad.sqrt(x * x + 0.1) * c["w"]),
    "abs": lambda x, c: ad.sum_(ad.abs_(x) * c["w"]),
    "softmax_rows": lambda x, c: ad.sum_(ad.softmax_rows(x) * c["w"]),
    "log_softmax_rows": lambda x, c: ad.sum_(ad.log_softmax_rows(x) * c["w"]),
    "log_sigmoid": lambda x, c: ad.sum_(ad.log_sigmoid(x) * c["w"]),
    "concat": lambda x, c: ad.sum_(ad.concat([x, x * x], axis=1) * c["w2"]),
    "sum_rows": lambda x, c: ad.sum_(ad.sum_(x, axis=1) * c["w"][:, 0]),
    "mean": lambda x, c: ad.mean(x * x) + ad.sum_(ad.mean(x, axis=0) * c["w"][0]),
    "max_rows": lambda x, c: ad.sum_(ad.max_rows(x) * c["w"][0]),
    "trace": lambda x, c: ad.trace(x.T @ x),
    "frobenius_norm": lambda x, c: ad.frobenius_norm(x),
    "batch_norm": lambda x, c: ad.sum_(ad.batch_norm(x, c["g"], c["b"][0])[0] * c["w"]),
    "row_outer": lambda x, c: ad.sum_(ad.row_outer(x) * c["w16"]),
    "gather_rows": lambda x, c: ad.sum_(ad.gather_rows(x, c["gseg"]) * c["w7"]),
    "segment_sum": lambda x, c: ad.sum_(ad.segment_sum(ad.concat([x, x[:2]], axis=0), SEG) * c["w5"]),
    "segment_max": lambda x, c: ad.sum_(ad.segment_max(ad.concat([x, x[:2] * 0.5], axis=0), SEG) * c["w5"]),
    "segment_softmax": lambda x, c: ad.sum_(ad.segment_softmax(ad.concat([x, x[:2]], axis=0), SEG) * c["w7"]),
    "edge_aggregate": lambda x, c: ad.sum_(ad.edge_aggregate(x[:, 0], c["m43"], c["src"], c["dst"]) * c["w43"][:4, :3]),
    "logdet": lambda x, c: ad.logdet(x.T @ x + np.eye(4)),
    "index": lambda x, c: ad.sum_(x[1:, :2] * c["w"][1:, :2]),
}


def _consts(rng):
    src = Segments([0, 1, 2, 3, 0], 4)
    dst = Segments([0, 0, 1, 2, 3], 4)
    return {
        "m": rng.standard_normal((4, 3)), "w34": rng.standard_normal((5, 3)),
        "w43": rng.standard_normal((4, 5)), "b": rng.standard_normal((5, 4)),
        "w": rng.standard_normal((5, 4)), "w2": rng.standard_normal((5, 8)),
        "g": rng.uniform(0.5, 2.0, 4), "w16": rng.standard_normal((5, 16)),
        "gseg": Segments([0, 4, 4, 2, 1, 3, 0], 5), "w7": rng.standard_normal((7, 4)),
        "w5": rng.standard_normal((5, 4)), "m43": rng.standard_normal((4, 3)),
        "src": src, "dst": dst,
    }


@pytest.mark.parametrize("name", sorted(CATALOG))
def test_catalog_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    fn = CATALOG[name]
    for _ in range(20):
        consts = _consts(rng)
        x = leaf(_away_from_zero(rng, (5, 4)))
        assert grad_check(lambda t: fn(t, consts), x, h=1e-6) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=8))
def test_softmax_rows_stochastic(vals):
    out = ad.softmax_rows(np.array([vals]))
    assert out.data.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(out.data >= 0)


def test_max_rows_tie_routes_to_first():
    x = leaf([[2.0, 1.0], [2.0, 3.0]])
    backward(ad.sum_(ad.max_rows(x)))
    np.testing.assert_array_equal(x.grad, [[1.0, 0.0], [0.0, 1.0]])


def test_segment_max_tie_routes_to_first():
    x = leaf([[1.0], [1.0], [0.5]])
    backward(ad.sum_(ad.segment_max(x, Segments([0, 0, 0], 1))))
    np.testing.assert_array_equal(x.grad, [[1.0], [0.0], [0.0]])


def test_relu_derivative_at_zero():
    x = leaf([0.0])
    backward(ad.sum_(ad.relu(x)))
    assert x.grad[0] == 0.0
