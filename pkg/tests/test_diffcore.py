import numpy as np
import pytest

from nsti import diffcore as dc
from nsti.errors import DimensionError, NumericError, UsageError

from conftest import central_diff, rel_err

rng = np.random.default_rng(0)


def check_grad(build, *arrays, tol=1e-6):
    """``build(*tensors)`` returns a scalar tensor; compare with central differences."""
    leaves = [dc.Tensor(a, requires_grad=True) for a in arrays]
    dc.backward(build(*leaves))
    for a, leaf in zip(arrays, leaves):
        def f():
            with dc.no_grad():
                return build(*[dc.Tensor(b) for b in arrays]).item()
        fd = np.array([central_diff(f, a, idx) for idx in np.ndindex(a.shape)]).reshape(a.shape)
        assert rel_err(leaf.grad, fd) <= tol, leaf


def weighted(x, w):
    return dc.sum(dc.mul(x, dc.Tensor(w)))


def test_matmul_examples():
    eye = dc.Tensor(np.eye(2))
    m = dc.Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(dc.matmul(eye, m).data, m.data)
    np.testing.assert_array_equal(dc.matmul(dc.Tensor([[1.0, 0.0]]), dc.Tensor([[0.0], [5.0]])).data, [[0.0]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        dc.matmul(dc.Tensor(np.ones((2, 3))), dc.Tensor(np.ones((2, 3))))


def test_matmul_gradient():
    check_grad(lambda a, b: dc.sum(dc.matmul(a, b)), rng.normal(size=(3, 4)), rng.normal(size=(4, 2)))


@pytest.mark.parametrize("op", [dc.add, dc.sub, dc.mul])
def test_elementwise_gradients(op):
    w = rng.normal(size=(3, 2))
    check_grad(lambda a, b: weighted(op(a, b), w), rng.normal(size=(3, 2)), rng.normal(size=(3, 2)))


def test_unary_gradients():
    w = rng.normal(size=(4, 3))
    x = rng.normal(size=(4, 3))
    x[np.abs(x) < 0.05] = 0.3  # keep away from the relu kink
    check_grad(lambda a: weighted(dc.relu(a), w), x.copy())
    check_grad(lambda a: weighted(dc.silu(a), w), x.copy())
    check_grad(lambda a: weighted(dc.scale(a, -1.7), w), x.copy())


def test_row_ops_and_linear():
    w = rng.normal(size=(4, 3))
    check_grad(lambda a, b: weighted(dc.add_row(a, b), w), rng.normal(size=(4, 3)), rng.normal(size=3))
    check_grad(lambda a, b: weighted(dc.mul_row(a, b), w), rng.normal(size=(4, 3)), rng.normal(size=3))
    w2 = rng.normal(size=(4, 2))
    check_grad(lambda x, m, b: weighted(dc.linear(x, m, b), w2),
               rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), rng.normal(size=2))


def test_conv_examples():
    x = dc.Tensor(np.zeros((7, 2)))
    assert not np.any(dc.conv1d_depthwise(x, dc.Tensor(rng.normal(size=(3, 2))), stride=2).data)
    y = rng.normal(size=(5, 3))
    np.testing.assert_array_equal(dc.conv1d_depthwise(dc.Tensor(y), dc.Tensor(np.ones((1, 3)))).data, y)


def test_conv_output_length():
    for T, K, s in [(9, 3, 2), (8, 3, 2), (16, 5, 1), (1, 3, 2)]:
        out = dc.conv1d_depthwise(dc.Tensor(np.ones((T, 1))), dc.Tensor(np.ones((K, 1))), stride=s)
        assert out.shape[0] == (T + 2 * (K // 2) - K) // s + 1 == dc.conv_out_len(T, K, s)


def test_conv_against_direct_sum():
    x = rng.normal(size=(9, 2))
    k = rng.normal(size=(3, 2))
    out = dc.conv1d_depthwise(dc.Tensor(x), dc.Tensor(k), stride=2).data
    xp = np.pad(x, ((1, 1), (0, 0)))
    ref = np.array([[sum(xp[t * 2 + j, c] * k[j, c] for j in range(3)) for c in range(2)] for t in range(5)])
    np.testing.assert_allclose(out, ref, atol=1e-14)


def test_conv_gradient():
    w = rng.normal(size=(5, 2))
    check_grad(lambda x, k: weighted(dc.conv1d_depthwise(x, k, stride=2), w),
               rng.normal(size=(9, 2)), rng.normal(size=(3, 2)))


def test_conv_kernel_too_long():
    with pytest.raises(DimensionError):
        # with pad K//2 only an empty input leaves the kernel overhanging
        dc.conv1d_depthwise(dc.Tensor(np.ones((0, 1))), dc.Tensor(np.ones((3, 1))))


def test_slice_concat_reduce_gradients():
    w = rng.normal(size=(5, 2))
    check_grad(lambda a: weighted(dc.concat_time([dc.slice_time(a, 3, 5), dc.slice_time(a, 0, 3)]), w),
               rng.normal(size=(5, 2)))
    check_grad(lambda a: dc.mean(a), rng.normal(size=(3, 2)))
    check_grad(lambda a: dc.sum(a), rng.normal(size=(3, 2)))


def test_log_softmax_examples():
    np.testing.assert_allclose(dc.log_softmax(dc.Tensor([[0.0, 0.0]])).data, [[-np.log(2)] * 2])
    out = dc.log_softmax(dc.Tensor([[1000.0, 0.0]])).data
    np.testing.assert_allclose(out, [[0.0, -1000.0]], atol=1e-12)
    x = rng.normal(size=(2, 3))
    np.testing.assert_allclose(np.exp(dc.log_softmax(dc.Tensor(x)).data).sum(axis=1), 1.0, atol=1e-12)
    w = rng.normal(size=(2, 3))
    check_grad(lambda a: weighted(dc.log_softmax(a), w), x)


def test_log_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        dc.log_softmax(dc.Tensor([[np.nan, 0.0]]))


def test_backward_root_is_leaf():
    a = dc.Tensor(np.array(3.0), requires_grad=True)
    dc.backward(a)
    assert a.grad == 1.0


def test_fan_out_accumulates():
    a = dc.Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    dc.backward(dc.sum(dc.add(a, a)))
    np.testing.assert_array_equal(a.grad, [2.0, 2.0, 2.0])


def test_two_consumers_sum_path_gradients():
    x = rng.normal(size=(3,))
    w1, w2 = rng.normal(size=3), rng.normal(size=3)
    a = dc.Tensor(x, requires_grad=True)
    dc.backward(dc.add(weighted(dc.silu(a), w1), weighted(dc.scale(a, 2.0), w2)))
    b1 = dc.Tensor(x, requires_grad=True)
    dc.backward(weighted(dc.silu(b1), w1))
    b2 = dc.Tensor(x, requires_grad=True)
    dc.backward(weighted(dc.scale(b2, 2.0), w2))
    np.testing.assert_allclose(a.grad, b1.grad + b2.grad, atol=1e-15)


def test_non_scalar_root_rejected():
    with pytest.raises(UsageError):
        dc.backward(dc.Tensor(np.ones(3), requires_grad=True))


def test_graph_is_topological_and_unique():
    a = dc.Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    h = dc.silu(a)
    root = dc.sum(dc.add(dc.mul(h, h), h))
    g = dc.build_graph(root)
    pos = {id(n): i for i, n in enumerate(g.records)}
    assert len(pos) == len(g.records)
    for n in g.records:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]


def test_repeat_backward_is_bit_identical():
    x = rng.normal(size=(4, 3))
    grads = []
    for _ in range(2):
        a = dc.Tensor(x, requires_grad=True)
        dc.backward(dc.sum(dc.log_softmax(dc.silu(a))))
        grads.append(a.grad)
    assert np.array_equal(grads[0], grads[1])


def test_no_grad_records_nothing():
    a = dc.Tensor(np.ones(2), requires_grad=True)
    with dc.no_grad():
        out = dc.add(a, a)
    assert not out.requires_grad and out.is_leaf
