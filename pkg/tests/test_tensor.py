import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ditlab import tensor as T
from ditlab.tensor import Tape, Tensor, finite_diff_check


@pytest.fixture(autouse=True)
def f64():
    with T.precision("float64"):
        yield


def weights(shape, seed=99):
    return np.random.default_rng(seed).standard_normal(shape)


# Each case: (builder of a scalar function, list of input shapes). Non-scalar op
# outputs are contracted with a fixed random weight so every output entry matters.
def _contract(y, seed=99):
    return T.sum(T.mul(y, Tensor(weights(y.shape, seed))))


OP_CASES = {
    "add": (lambda a, b: _contract(T.add(a, b)), [(3, 4), (4,)]),
    "sub": (lambda a, b: _contract(T.sub(a, b)), [(2, 3, 4), (1, 4)]),
    "mul": (lambda a, b: _contract(T.mul(a, b)), [(3, 4), (3, 1)]),
    "scale": (lambda a: _contract(T.scale(a, -1.7)), [(5,)]),
    "gelu": (lambda a: _contract(T.gelu(a)), [(4, 5)]),
    "silu": (lambda a: _contract(T.silu(a)), [(4, 5)]),
    "matmul": (lambda a, b: _contract(T.matmul(a, b)), [(5, 7), (7, 3)]),
    "sum": (lambda a: _contract(T.sum(a, axis=1)), [(3, 4, 2)]),
    "mean": (lambda a: _contract(T.mean(a, axis=0, keepdims=True)), [(3, 4)]),
    "softmax": (lambda a: _contract(T.softmax(a, axis=-1)), [(3, 5)]),
    "rms_norm": (lambda a, g: _contract(T.rms_norm(a, g)), [(3, 6), (6,)]),
    "mse_loss": (lambda a, b: T.mse_loss(a, b), [(4, 3), (4, 3)]),
    "reshape": (lambda a: _contract(T.reshape(a, (6, 2))), [(3, 4)]),
    "transpose": (lambda a: _contract(T.transpose(a, (2, 0, 1))), [(2, 3, 4)]),
    "concat": (lambda a, b: _contract(T.concat([a, b], axis=1)), [(2, 3), (2, 2)]),
    "slice": (lambda a: _contract(T.slice(a, 1, 1, 3)), [(2, 4)]),
    "broadcast_to": (lambda a: _contract(T.broadcast_to(a, (3, 2, 4))), [(2, 1)]),
    "rotate_pairs": (
        lambda a: _contract(T.rotate_pairs(a, np.cos(weights((5, 2), 3)), np.sin(weights((5, 2), 3)))),
        [(2, 5, 4)],
    ),
}


def test_every_registered_op_has_a_gradient_case():
    assert set(OP_CASES) == set(T.DIFFERENTIABLE_OPS)


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name):
    fn, shapes = OP_CASES[name]
    rng = np.random.default_rng(0)
    for _ in range(10):
        inputs = [rng.standard_normal(s) for s in shapes]
        assert finite_diff_check(fn, inputs, h=1e-5) < 1e-4


def test_batched_matmul_gradient():
    fn = lambda a, b: _contract(T.matmul(a, b))  # noqa: E731
    rng = np.random.default_rng(1)
    assert finite_diff_check(fn, [rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))]) < 1e-4
    assert finite_diff_check(fn, [rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 5))]) < 1e-4


def test_matmul_examples():
    a = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor(np.eye(2))).data
    np.testing.assert_array_equal(out, [[1, 2], [3, 4]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_elementwise_examples():
    x = Tensor(weights((3, 2)))
    np.testing.assert_array_equal(T.add(x, 0.0).data, x.data)
    assert T.gelu(Tensor(np.zeros(1))).data[0] == 0.0
    with pytest.raises(ValueError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor(np.full((1, 4), 2.5))).data, [[0.25] * 4])
    np.testing.assert_allclose(T.softmax(Tensor([[0.0, np.log(3.0)]])).data, [[0.25, 0.75]], atol=1e-15)
    with pytest.raises(ValueError):
        T.softmax(Tensor(np.zeros((2, 2))), axis=2)


def test_softmax_is_stable_for_large_logits():
    y = T.softmax(Tensor([[1000.0, 1000.0, -1000.0]])).data
    np.testing.assert_allclose(y, [[0.5, 0.5, 0.0]])


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    y = T.softmax(Tensor(x), axis=1).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)


def test_rms_norm_examples():
    out = T.rms_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(4)), eps=0.0).data
    np.testing.assert_array_equal(out, np.ones((2, 4)))
    # exact only when every gain entry has the same magnitude
    x, g = 3.0 * weights((5, 8), 1), np.sign(weights((8,), 2))
    out = T.rms_norm(Tensor(x), Tensor(g), eps=1e-6).data
    rms = np.sqrt((out**2).mean(axis=1))
    np.testing.assert_allclose(rms, np.sqrt((g**2).mean()), atol=1e-6)


def test_concat_slice_round_trip_and_double_transpose():
    a, b = Tensor(weights((2, 3), 1)), Tensor(weights((2, 5), 2))
    c = T.concat([a, b], axis=1)
    np.testing.assert_array_equal(T.slice(c, 1, 0, 3).data, a.data)
    np.testing.assert_array_equal(T.slice(c, 1, 3, 8).data, b.data)
    x = Tensor(weights((2, 3, 4)))
    np.testing.assert_array_equal(T.transpose(T.transpose(x, (1, 2, 0)), (2, 0, 1)).data, x.data)
    with pytest.raises(ValueError):
        T.concat([a, Tensor(np.zeros((3, 3)))], axis=1)
    with pytest.raises(ValueError):
        T.slice(a, 1, 2, 9)


def test_concat_gradient_splits_by_segment():
    tape = Tape()
    a, b = tape.watch(np.zeros((2, 2))), tape.watch(np.zeros((2, 3)))
    g_out = weights((2, 5))
    loss = T.sum(T.mul(T.concat([a, b], axis=1), Tensor(g_out)))
    grads = tape.backward(loss)
    np.testing.assert_array_equal(grads[a], g_out[:, :2])
    np.testing.assert_array_equal(grads[b], g_out[:, 2:])


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (2, 3, 4), elements=st.floats(-10, 10)),
       st.permutations([0, 1, 2]))
def test_rearrangements_preserve_elements(x, axes):
    t = Tensor(x)
    for y in (T.transpose(t, axes), T.reshape(t, (4, 6))):
        np.testing.assert_array_equal(np.sort(y.data, axis=None), np.sort(x, axis=None))


def test_mse_loss_examples():
    y = weights((3, 4))
    assert T.mse_loss(Tensor(y), Tensor(y)).data == 0.0
    assert T.mse_loss(Tensor(y + 1.0), Tensor(y)).data == pytest.approx(1.0)
    tape = Tape()
    p = tape.watch(y + 0.5)
    grads = tape.backward(T.mse_loss(p, y))
    np.testing.assert_allclose(grads[p], 2 * 0.5 / y.size)
    with pytest.raises(ValueError):
        T.mse_loss(Tensor(y), Tensor(y[:2]))


def test_backward_examples():
    tape = Tape()
    x = tape.watch(weights((3, 2)))
    unused = tape.watch(weights((4,)))
    grads = tape.backward(T.sum(x))
    np.testing.assert_array_equal(grads[x], np.ones((3, 2)))
    np.testing.assert_array_equal(grads[unused], np.zeros(4))
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(T.mul(x, 2.0))


def test_unwatched_tensors_never_get_gradients():
    tape = Tape()
    x = tape.watch(weights((3,)))
    c = Tensor(weights((3,), 5))
    loss = T.sum(T.mul(x, c))
    grads = tape.backward(loss)
    assert c.node_id is None and c not in grads
    with pytest.raises(KeyError):
        grads[c]


def test_backward_is_deterministic():
    def run():
        tape = Tape()
        a, b = tape.watch(weights((4, 3), 1)), tape.watch(weights((3, 2), 2))
        loss = T.sum(T.gelu(T.matmul(a, b)))
        g = tape.backward(loss)
        return g[a], g[b]

    for x, y in zip(run(), run()):
        np.testing.assert_array_equal(x, y)


def test_tape_order_is_topological():
    tape = Tape()
    x = tape.watch(weights((2, 2)))
    y = T.silu(T.matmul(x, x))
    T.sum(T.add(y, x))
    seen = set(range(1))  # the watched leaf
    for out_id, in_ids, _ in tape.ops:
        assert all(i in seen for i in in_ids if i is not None)
        seen.add(out_id)


def test_finite_diff_check_examples():
    w = weights((6,))
    assert finite_diff_check(lambda x: T.sum(T.mul(x, Tensor(w))), [weights((6,), 4)]) < 1e-9
    # quadratic: central differences are exact up to rounding
    assert finite_diff_check(lambda x: T.sum(T.mul(x, x)), [weights((6,), 4)], h=1e-5) < 1e-7


def test_precision_modes():
    with T.precision("float32"):
        assert Tensor([1.0]).data.dtype == np.float32
    assert Tensor([1.0]).data.dtype == np.float64
    with pytest.raises(ValueError):
        T.set_precision("float16")
