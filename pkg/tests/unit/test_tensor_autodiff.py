"""
Unit tests for the reverse-mode tape.
Gradient checks compare every op family against central differences.
"""
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '../..'))

from lib.errors import ContractError, DimensionError
from lib.tensor_autodiff import (
    Tape,
    Tensor,
    add,
    backward,
    concat_last,
    elementwise,
    gather_rows,
    huber,
    matmul,
    mul,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    softplus,
    sort_desc_columns,
    square,
    sub,
    tile_rows,
)
from tests.helpers import numeric_grad, rel_error

CASES = 100


def _check(build, *arrays, tol=1e-5):
    """``build(*tensors)`` must return a scalar tensor."""
    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    grads = backward(tape, build(*leaves), leaves)
    for i, a in enumerate(arrays):
        def f(v, i=i):
            args = [Tensor(b) for b in arrays]
            args[i] = Tensor(v)
            return build(*args).item()
        assert rel_error(grads[i], numeric_grad(f, a)) < tol


def _weighted(t: Tensor, w: np.ndarray) -> Tensor:
    return reduce_sum(mul(t, Tensor(w)))


@pytest.mark.unit
class TestForward:
    """Forward values and shape handling."""

    def test_trailing_broadcast(self):
        """TEST: a [d] bias broadcasts over [B, M, d]"""
        out = add(np.ones((2, 3, 4)), np.arange(4.0))
        assert out.shape == (2, 3, 4)
        np.testing.assert_array_equal(out.data[1, 2], 1.0 + np.arange(4.0))

    def test_incompatible_shapes_raise(self):
        """TEST: non-suffix shapes are a DimensionError"""
        with pytest.raises(DimensionError):
            add(np.ones((2, 3)), np.ones(2))

    def test_matmul_batches_leading_dims(self):
        """TEST: [B, M, k] @ [k, n] keeps the leading dims"""
        assert matmul(np.ones((2, 5, 3)), np.ones((3, 4))).shape == (2, 5, 4)
        with pytest.raises(DimensionError):
            matmul(np.ones((2, 3)), np.ones((4, 2)))

    def test_huber_branches(self):
        """TEST: quadratic inside delta, linear outside"""
        out = huber(np.array([0.5, -3.0]), delta=1.0).data
        np.testing.assert_allclose(out, [0.125, 2.5])

    def test_sort_desc_is_stable_on_ties(self):
        """TEST: equal values keep their original row order"""
        z = np.array([[1.0, 0.0], [2.0, 0.0], [1.0, 0.0]])
        out, perm = sort_desc_columns(z)
        np.testing.assert_array_equal(out.data[:, 0], [2.0, 1.0, 1.0])
        np.testing.assert_array_equal(perm[:, 0], [1, 0, 2])
        np.testing.assert_array_equal(perm[:, 1], [0, 1, 2])

    def test_reduce_bad_axis(self):
        """TEST: an out-of-range axis is a DimensionError"""
        with pytest.raises(DimensionError):
            reduce_sum(np.ones((2, 3)), axis=2)

    def test_unknown_elementwise_op(self):
        """TEST: elementwise() rejects unknown names and missing operands"""
        with pytest.raises(ContractError):
            elementwise("tanh", np.ones(2))
        with pytest.raises(ContractError):
            elementwise("mul", np.ones(2))


@pytest.mark.unit
class TestBackwardContract:
    """Scalar outputs, constants and tape ownership."""

    def test_non_scalar_output_rejected(self):
        """TEST: backward() on a vector raises ContractError"""
        tape = Tape()
        x = tape.leaf(np.ones(3))
        with pytest.raises(ContractError):
            backward(tape, square(x), [x])

    def test_constant_graph_gives_zeros(self):
        """TEST: an output that does not depend on the leaf yields zero gradient"""
        tape = Tape()
        x = tape.leaf(np.ones((2, 2)))
        out = reduce_sum(Tensor(np.ones(3)))
        np.testing.assert_array_equal(backward(tape, out, [x])[0], np.zeros((2, 2)))

    def test_unused_leaf_gets_zeros(self):
        """TEST: leaves outside the output's graph get zeros of their shape"""
        tape = Tape()
        x, y = tape.leaf(np.ones(2)), tape.leaf(np.ones(3))
        gx, gy = backward(tape, reduce_sum(square(x)), [x, y])
        np.testing.assert_array_equal(gx, [2.0, 2.0])
        np.testing.assert_array_equal(gy, np.zeros(3))

    def test_mixed_tapes_rejected(self):
        """TEST: combining tensors from two tapes is a ContractError"""
        a, b = Tape().leaf(np.ones(2)), Tape().leaf(np.ones(2))
        with pytest.raises(ContractError):
            add(a, b)

    def test_fan_out_accumulates(self):
        """TEST: a leaf used twice receives the sum of both paths"""
        tape = Tape()
        x = tape.leaf(np.array([3.0]))
        (g,) = backward(tape, reduce_sum(add(mul(x, x), x)), [x])
        np.testing.assert_array_equal(g, [7.0])

    def test_check_finite(self):
        """TEST: a tape with check_finite refuses non-finite results"""
        tape = Tape(check_finite=True)
        x = tape.leaf(np.array([1e308]))
        with pytest.raises(ContractError):
            mul(x, x)


@pytest.mark.unit
class TestGradientsAgainstFiniteDifferences:
    """100 random graphs per op family."""

    def test_elementwise_family(self):
        """TEST: add/sub/mul/relu/square/huber/softplus/scale gradients"""
        rng = np.random.default_rng(1)
        for case in range(CASES):
            a, b, w = rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=(3, 4))
            delta = float(rng.uniform(0.2, 2.0))

            def build(a, b, w=w, delta=delta):
                t = add(mul(relu(a), b), huber(sub(a, b), delta))
                t = add(t, scale(softplus(square(a)), 0.5))
                return _weighted(t, w)
            _check(build, a, b)

    def test_matmul_family(self):
        """TEST: batched matmul gradients for both operands"""
        rng = np.random.default_rng(2)
        for case in range(CASES):
            a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2))
            w = rng.normal(size=(2, 3, 2))
            _check(lambda a, b, w=w: _weighted(matmul(a, b), w), a, b)

    def test_sort_family(self):
        """TEST: column sort routes gradients back through the permutation"""
        rng = np.random.default_rng(3)
        for case in range(CASES):
            z, w = rng.normal(size=(2, 5, 3)), rng.normal(size=(2, 5, 3))
            _check(lambda z, w=w: _weighted(sort_desc_columns(z)[0], w), z)

    def test_reduce_family(self):
        """TEST: sum and mean over each axis and over everything"""
        rng = np.random.default_rng(4)
        for case in range(CASES):
            t = rng.normal(size=(2, 3, 4))
            axis = [None, 0, 1, 2, -1][case % 5]
            w = rng.normal(size=np.sum(t, axis=axis).shape)

            def build(t, axis=axis, w=w):
                return add(_weighted(reduce_sum(t, axis=axis), w), reduce_sum(reduce_mean(t, axis=axis)))
            _check(build, t)

    def test_structure_family(self):
        """TEST: concat/tile/reshape/gather gradients"""
        rng = np.random.default_rng(5)
        for case in range(CASES):
            a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 4, 2))
            index = rng.integers(0, 4, size=(2, 6))
            w = rng.normal(size=(2, 6, 5))

            def build(a, b, index=index, w=w):
                joined = concat_last(tile_rows(a, 4), b)
                flat = reshape(joined, (2, 20))
                return _weighted(gather_rows(reshape(flat, (2, 4, 5)), index), w)
            _check(build, a, b)

    def test_gather_rows_scatter_adds(self):
        """TEST: repeated indices accumulate in gather_rows' backward"""
        tape = Tape()
        a = tape.leaf(np.zeros((3, 2)))
        (g,) = backward(tape, reduce_sum(gather_rows(a, np.array([0, 0, 2]))), [a])
        np.testing.assert_array_equal(g, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])
