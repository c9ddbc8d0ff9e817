import numpy as np
import pytest

from geomae.model import autograd as ag


def _fd_check(fn, shapes, rng, h=1e-6):
    xs = [ag.parameter(rng.normal(size=s)) for s in shapes]
    out = fn(*xs)
    w = rng.normal(size=out.shape)
    ag.backward((out * w).sum())
    for i, x in enumerate(xs):
        fd = np.zeros_like(x.value)
        for j in np.ndindex(x.shape):
            vals = [t.value.copy() for t in xs]
            vals[i][j] += h
            up = (fn(*map(ag.Tensor, vals)).value * w).sum()
            vals[i][j] -= 2 * h
            down = (fn(*map(ag.Tensor, vals)).value * w).sum()
            fd[j] = (up - down) / (2 * h)
        got = np.zeros_like(fd) if x.grad is None else x.grad
        np.testing.assert_allclose(got, fd, atol=1e-7, rtol=1e-6)


OPS = {
    "matmul": (lambda a, b: a @ b, [(2, 3, 4), (4, 5)]),
    "broadcast": (lambda a, b: a * b + a - b, [(2, 3), (3,)]),
    "gelu": (ag.gelu, [(4, 5)]),
    "relu": (ag.relu, [(4, 5)]),
    "layer_norm": (ag.layer_norm, [(3, 6)]),
    "softmax": (lambda a: ag.softmax(a, mask=np.array([True, False, True, True])), [(3, 4)]),
    "bce": (lambda a: ag.bce_with_logits(a, np.array([[0, 1, 1], [1, 0, 0]])), [(2, 3)]),
    "segment_max": (lambda a: ag.segment_max(a, np.array([1, 0, 1, 1, 2]), 3), [(5, 3)]),
    "gather": (lambda a: a[np.array([[0, 2], [2, 2]])], [(3, 4)]),
    "slice": (lambda a: a[:, 1:3], [(3, 4)]),
    "concat": (lambda a, b: ag.concat([a, b], axis=0), [(2, 3), (1, 3)]),
    "minimum": (ag.minimum, [(2, 3), (2, 3)]),
    "reshape_transpose": (lambda a: a.reshape(2, 6).transpose(1, 0), [(3, 4)]),
    "sum_axis": (lambda a: a.sum(axis=1), [(3, 4)]),
    "square": (ag.square, [(3,)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name, rng):
    fn, shapes = OPS[name]
    _fd_check(fn, shapes, rng)


def test_shared_node_accumulates():
    x = ag.parameter(np.array([2.0, 3.0]))
    y = x * x + x
    ag.backward(y.sum())
    np.testing.assert_array_equal(x.grad, 2 * x.value + 1)


def test_segment_max_ties_go_to_first_row():
    x = ag.parameter(np.array([[1.0], [1.0], [0.5]]))
    ag.backward(ag.segment_max(x, np.array([0, 0, 0]), 1).sum())
    np.testing.assert_array_equal(x.grad[:, 0], [1.0, 0.0, 0.0])


def test_masked_softmax_gives_zero_weight():
    y = ag.softmax(ag.Tensor(np.array([[1.0, 50.0, 2.0]])), mask=np.array([True, False, True]))
    assert y.value[0, 1] == 0.0
    np.testing.assert_allclose(y.value.sum(), 1.0)


def test_no_grad_graph_for_constants():
    y = ag.Tensor(np.ones(3)) * 2.0
    assert not y.requires_grad and y.backward_fn is None
