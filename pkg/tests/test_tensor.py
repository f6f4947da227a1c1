import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from banlab.tensor import (
    DimensionError,
    EmptyGroupError,
    Tape,
    TapeError,
    Tensor,
    add,
    backward,
    broadcast_to,
    clip,
    concat,
    grad_check,
    hadamard,
    log,
    masked_fill,
    masked_softmax,
    matmul,
    mean,
    outer_broadcast,
    reduce_max,
    reduce_sum,
    relu,
    reshape,
    scale,
    sigmoid,
    sub,
    take,
    take_along,
    tanh,
    transpose,
)
from banlab.tensor.gradcheck import rel_err
from banlab.tensor.ops import kink_monitor

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


class TestTensorBasics:
    """Immutability, dtype and shape bookkeeping."""

    def test_float64_and_read_only(self):
        t = Tensor([[1, 2], [3, 4]])
        assert t.data.dtype == np.float64
        with pytest.raises(ValueError):
            t.data[0, 0] = 5.0

    def test_source_array_not_aliased(self):
        src = np.ones(3)
        t = Tensor(src)
        src[0] = 7.0
        assert t.data[0] == 1.0

    def test_wraps_tensor(self):
        t = Tensor(np.arange(3.0))
        assert np.array_equal(Tensor(t).data, t.data)

    def test_item_needs_single_element(self):
        assert Tensor(2.5).item() == 2.5
        with pytest.raises(DimensionError):
            Tensor([1.0, 2.0]).item()


class TestTape:
    """Recording order and reverse sweep."""

    def test_node_ids_are_topological(self):
        tape = Tape()
        a = tape.watch(np.ones(2))
        b = tape.watch(np.ones(2))
        c = hadamard(a, b)
        d = reduce_sum(c)
        assert a.node_id < c.node_id < d.node_id
        assert all(p < i for i, n in enumerate(tape.nodes) for p in n.parents if p >= 0)

    def test_product_rule(self):
        tape = Tape()
        x = tape.watch(np.array([2.0, -3.0]))
        y = tape.watch(np.array([5.0, 7.0]))
        backward(reduce_sum(hadamard(x, y)))
        assert np.array_equal(tape.grad(x), [5.0, 7.0])
        assert np.array_equal(tape.grad(y), [2.0, -3.0])

    def test_fan_out_accumulates(self):
        tape = Tape()
        x = tape.watch(np.array([3.0]))
        tape.backward(reduce_sum(add(hadamard(x, x), x)))
        assert tape.grad(x)[0] == 7.0  # d(x^2 + x) = 2x + 1

    def test_unused_leaf_gets_zeros(self):
        tape = Tape()
        x = tape.watch(np.ones((2, 3)))
        unused = tape.watch(np.ones(4))
        tape.backward(reduce_sum(x))
        assert np.array_equal(tape.grad(unused), np.zeros(4))

    def test_untracked_constants_are_fine(self):
        tape = Tape()
        x = tape.watch(np.array([1.0, 2.0]))
        tape.backward(reduce_sum(hadamard(x, Tensor([3.0, 4.0]))))
        assert np.array_equal(tape.grad(x), [3.0, 4.0])

    def test_errors(self):
        tape = Tape()
        x = tape.watch(np.ones(2))
        with pytest.raises(TapeError):
            tape.backward(x)  # not scalar
        with pytest.raises(TapeError):
            Tape().backward(reduce_sum(x))
        with pytest.raises(TapeError):
            backward(Tensor(1.0))
        with pytest.raises(TapeError):
            hadamard(x, Tape().watch(np.ones(2)))


class TestForwardValues:
    """Forward results against direct numpy expressions."""

    def test_matmul_batched_and_shared(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 2, 4)), rng.normal(size=(4, 5))
        assert np.allclose(matmul(a, b).data, a @ b, rtol=0, atol=1e-14)
        b3 = rng.normal(size=(3, 4, 5))
        assert np.allclose(matmul(a, b3).data, a @ b3, rtol=0, atol=1e-14)
        with pytest.raises(DimensionError):
            matmul(a, rng.normal(size=(3, 5)))

    def test_transpose_last_two_axes(self):
        a = np.arange(24.0).reshape(2, 3, 4)
        assert np.array_equal(transpose(a).data, a.swapaxes(-1, -2))
        with pytest.raises(DimensionError):
            transpose(np.ones(3))

    def test_elementwise(self):
        x = np.array([-2.0, 0.0, 1.5])
        assert np.array_equal(relu(x).data, [0.0, 0.0, 1.5])
        assert np.array_equal(clip(x, -1, 1).data, [-1.0, 0.0, 1.0])
        assert np.allclose(sigmoid(x).data, 1 / (1 + np.exp(-x)), rtol=1e-15)
        assert np.allclose(tanh(x).data, np.tanh(x), rtol=1e-15)
        assert np.array_equal(sub(x, x).data, np.zeros(3))
        assert np.array_equal(scale(x, 2.0).data, 2 * x)
        with pytest.raises(ValueError):
            log(x)
        with pytest.raises(DimensionError):
            add(np.ones(2), np.ones(3))

    def test_sigmoid_extremes_do_not_overflow(self):
        with np.errstate(over="raise"):
            s = sigmoid(np.array([-800.0, 800.0])).data
        assert s[0] == 0.0 and s[1] == 1.0

    def test_reductions(self):
        a = np.arange(6.0).reshape(2, 3)
        assert reduce_sum(a).item() == 15.0
        assert np.array_equal(reduce_sum(a, axis=0).data, [3.0, 5.0, 7.0])
        assert reduce_sum(a, axis=1, keepdims=True).shape == (2, 1)
        assert mean(a).item() == 2.5
        assert np.array_equal(reduce_max(a, axis=0).data, [3.0, 4.0, 5.0])

    def test_outer_broadcast(self):
        v = np.array([1.0, 2.0])
        assert np.array_equal(outer_broadcast(v, 3).data, [[1, 1, 1], [2, 2, 2]])
        with pytest.raises(ValueError):
            outer_broadcast(v, 0)

    def test_shape_ops(self):
        a = np.arange(6.0)
        assert reshape(a, (2, 3)).shape == (2, 3)
        assert broadcast_to(np.ones(3), (2, 3)).shape == (2, 3)
        assert concat([np.ones((2, 1)), np.zeros((2, 2))], axis=1).shape == (2, 3)
        assert np.array_equal(take(a.reshape(2, 3), [2, 0], axis=1).data, [[2, 0], [5, 3]])
        idx = np.array([[2, 0], [1, 1]])
        assert np.array_equal(take_along(a.reshape(2, 3), idx, axis=1).data, [[2, 0], [4, 4]])
        assert np.array_equal(masked_fill(a[:3], [True, False, True], -1.0).data, [0.0, -1.0, 2.0])


class TestMaskedSoftmax:
    """Exact zeros on padding, normalization and empty groups."""

    def test_matches_reference_on_kept_entries(self):
        z = np.array([[1.0, 2.0, 3.0, 50.0]])
        mask = np.array([[True, True, True, False]])
        p = masked_softmax(z, mask).data
        e = np.exp(z[0, :3] - 3.0)
        assert p[0, 3] == 0.0
        assert np.allclose(p[0, :3], e / e.sum(), rtol=0, atol=1e-16)

    def test_joint_axes(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(2, 3, 4)) * 10
        p = masked_softmax(z, axis=(-2, -1)).data
        assert np.max(np.abs(p.sum(axis=(1, 2)) - 1.0)) <= 1e-12

    def test_huge_logits_stable(self):
        p = masked_softmax(np.array([1000.0, 1000.0, -1000.0])).data
        assert np.allclose(p, [0.5, 0.5, 0.0], rtol=0, atol=1e-300)

    def test_fully_masked_group_raises(self):
        with pytest.raises(EmptyGroupError):
            masked_softmax(np.ones((2, 3)), np.array([[True, False, False], [False, False, False]]))

    def test_no_gradient_into_masked_logits(self):
        tape = Tape()
        z = tape.watch(np.array([0.3, -0.2, 0.9]))
        w = Tensor([1.0, 2.0, 3.0])
        tape.backward(reduce_sum(hadamard(masked_softmax(z, [True, True, False]), w)))
        assert tape.grad(z)[2] == 0.0

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=finite), st.lists(st.booleans(), min_size=5, max_size=5))
    def test_distribution_property(self, z, keep):
        keep[0] = True
        mask = np.broadcast_to(np.array(keep), (3, 5))
        p = masked_softmax(z, mask).data
        assert np.all(p[:, ~np.array(keep)] == 0.0)
        assert np.all(p >= 0)
        assert np.max(np.abs(p.sum(axis=-1) - 1.0)) <= 1e-12


class TestGradCheck:
    """The finite-difference harness itself, and every primitive through it."""

    def test_rel_err_floor(self):
        assert rel_err(0.0, 1e-9, 1e-3) == pytest.approx(1e-6)
        assert rel_err(2.0, 1.0, 1e-3) == 0.5

    def test_detects_wrong_gradient(self):
        from banlab.tensor import record_op

        def bad_square(t):
            return record_op("bad", t.data ** 2, (t,), lambda g: (g * 3 * t.data,))

        rep = grad_check(lambda x: reduce_sum(bad_square(x)), [np.array([1.0, 2.0])])
        assert not rep.passed
        assert "FAIL" in str(rep) or rep.max_rel_err > 1e-4

    def test_kink_coordinates_excluded(self):
        x = np.array([0.0, 1.0, -1.0, 5e-6])
        rep = grad_check(lambda t: reduce_sum(relu(t)), [x])
        assert rep.passed
        assert set(rep.inputs[0].excluded) == {(0,), (3,)}
        assert rep.inputs[0].checked == 2

    def test_kink_monitor_records_distances(self):
        with kink_monitor() as logbook:
            relu(np.array([-1.0, 2.0]))
            clip(np.array([0.5]), 0.0, 1.0)
        assert len(logbook) == 2

    @pytest.mark.parametrize(
        "name,fn,shapes",
        [
            ("matmul", lambda a, b: reduce_sum(hadamard(matmul(a, b), matmul(a, b))), [(2, 3, 4), (4, 2)]),
            ("matmul_batched", lambda a, b: reduce_sum(tanh(matmul(a, b))), [(2, 3, 4), (2, 4, 2)]),
            ("transpose", lambda a: reduce_sum(hadamard(transpose(a), transpose(a))), [(2, 3)]),
            ("reshape", lambda a: reduce_sum(hadamard(reshape(a, (3, 2)), reshape(a, (3, 2)))), [(2, 3)]),
            ("sigmoid", lambda a: reduce_sum(sigmoid(a)), [(3, 3)]),
            ("tanh", lambda a: reduce_sum(tanh(a)), [(3, 3)]),
            ("relu", lambda a: reduce_sum(hadamard(relu(a), a)), [(3, 3)]),
            ("clip", lambda a: reduce_sum(hadamard(clip(a, -0.4, 0.4), a)), [(3, 3)]),
            ("log", lambda a: reduce_sum(log(add(hadamard(a, a), Tensor(np.ones((3, 3)))))), [(3, 3)]),
            ("mean", lambda a: hadamard(mean(a), mean(a)), [(3, 4)]),
            ("reduce_sum_axis", lambda a: reduce_sum(tanh(reduce_sum(a, axis=0))), [(3, 4)]),
            ("reduce_max", lambda a: reduce_sum(hadamard(reduce_max(a, axis=-2), reduce_max(a, axis=-2))), [(3, 4)]),
            ("outer_broadcast", lambda v: reduce_sum(tanh(outer_broadcast(v, 3))), [(2, 4)]),
            ("broadcast_to", lambda v: reduce_sum(tanh(broadcast_to(v, (3, 4)))), [(4,)]),
            ("concat", lambda a, b: reduce_sum(tanh(concat([a, b], axis=-1))), [(2, 3), (2, 2)]),
            ("take", lambda a: reduce_sum(tanh(take(a, [0, 2, 0], axis=1))), [(2, 3)]),
            ("take_along", lambda a: reduce_sum(tanh(take_along(a, np.array([[1, 1], [0, 2]]), axis=1))), [(2, 3)]),
            ("masked_fill", lambda a: reduce_sum(tanh(masked_fill(a, [[True, False, True]], 0.5))), [(2, 3)]),
            ("masked_softmax", lambda a: reduce_sum(hadamard(masked_softmax(a, [[True, True, False, True]], axis=(-2, -1)),
                                                             Tensor(np.arange(8.0).reshape(2, 4)))), [(2, 4)]),
            ("sub_scale", lambda a, b: reduce_sum(tanh(scale(sub(a, b), 0.7))), [(3,), (3,)]),
        ],
    )
    def test_primitive(self, name, fn, shapes):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        rep = grad_check(fn, [rng.normal(size=s) for s in shapes])
        assert rep.passed, f"{name}: {rep}"
        assert rep.max_rel_err < 1e-4


class TestGradientOracles:
    """Closed-form gradients for a few composites."""

    def test_sigmoid_derivative(self):
        x = np.linspace(-3, 3, 7)
        tape = Tape()
        t = tape.watch(x)
        tape.backward(reduce_sum(sigmoid(t)))
        s = 1 / (1 + np.exp(-x))
        assert np.allclose(tape.grad(t), s * (1 - s), rtol=1e-14, atol=0)

    def test_softmax_jacobian(self):
        z = np.array([0.1, -0.4, 0.7])
        w = np.array([1.0, -2.0, 0.5])
        tape = Tape()
        t = tape.watch(z)
        tape.backward(reduce_sum(hadamard(masked_softmax(t), Tensor(w))))
        p = np.exp(z) / np.exp(z).sum()
        J = np.diag(p) - np.outer(p, p)
        assert np.allclose(tape.grad(t), J.T @ w, rtol=1e-13, atol=1e-16)

    def test_matmul_gradient(self):
        rng = np.random.default_rng(3)
        A, B, G = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
        tape = Tape()
        a, b = tape.watch(A), tape.watch(B)
        tape.backward(reduce_sum(hadamard(matmul(a, b), Tensor(G))))
        assert np.allclose(tape.grad(a), G @ B.T, rtol=1e-14, atol=1e-15)
        assert np.allclose(tape.grad(b), A.T @ G, rtol=1e-14, atol=1e-15)

    def test_shared_operand_unbroadcast(self):
        rng = np.random.default_rng(4)
        A, B = rng.normal(size=(5, 3, 4)), rng.normal(size=(4, 2))
        tape = Tape()
        b = tape.watch(B)
        tape.backward(reduce_sum(matmul(Tensor(A), b)))
        assert np.allclose(tape.grad(b), A.sum(axis=(0, 1))[:, None] * np.ones((1, 2)), rtol=1e-13)
