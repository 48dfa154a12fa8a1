"""Tape-based autodiff: gradient checks against central differences."""

import numpy as np
import pytest

from wildsplat.errors import ContractError, DomainError, ShapeError, StateError
from wildsplat.rng import stream
from wildsplat.tensor import (
    Tensor,
    backward,
    clear_graph,
    concat,
    elementwise,
    no_grad,
    sigmoid_np,
    softmax,
    softmax_np,
)


def numeric_grad(fn, arrays, h=1e-3):
    """Central-difference gradient of scalar fn(*arrays) per input element."""
    grads = []
    for i, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        flat = g.reshape(-1)
        for j in range(base.size):
            lo = [a.copy() for a in arrays]
            hi = [a.copy() for a in arrays]
            lo[i].reshape(-1)[j] -= h
            hi[i].reshape(-1)[j] += h
            flat[j] = (fn(*hi) - fn(*lo)) / (2.0 * h)
        grads.append(g)
    return grads


def check_grads(fn, arrays, rtol=1e-2, atol=1e-4):
    """fn maps Tensors to a scalar Tensor; compares backward vs numeric."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    loss = fn(*leaves)
    backward(loss)

    def scalar(*arrs):
        with no_grad():
            return fn(*[Tensor(a) for a in arrs]).item()

    want = numeric_grad(scalar, [np.asarray(a, np.float64) for a in arrays])
    for leaf, w in zip(leaves, want):
        assert leaf.grad is not None
        np.testing.assert_allclose(leaf.grad, w, rtol=rtol, atol=atol)
    clear_graph()


def test_add_mul_broadcast_grads():
    r = stream(3, "tensor-addmul")
    a = r.uniform(-1, 1, (3, 4)).astype(np.float32)
    b = r.uniform(-1, 1, (1, 4)).astype(np.float32)
    check_grads(lambda x, y: ((x * y + x) * 0.5).sum(), [a, b])


def test_div_exp_log_sqrt_chain_grads():
    r = stream(4, "tensor-chain")
    a = r.uniform(0.5, 2.0, (2, 3)).astype(np.float32)
    b = r.uniform(0.5, 2.0, (2, 3)).astype(np.float32)
    check_grads(lambda x, y: ((x / y).log() + x.sqrt() + (y * 0.1).exp()).sum(), [a, b])


def test_pow_grads():
    r = stream(5, "tensor-pow")
    a = r.uniform(0.3, 1.5, (4,)).astype(np.float32)
    check_grads(lambda x: (x**3).sum(), [a])
    check_grads(lambda x: (x**0.5).sum(), [a])


def test_matmul_grads():
    r = stream(6, "tensor-matmul")
    a = r.uniform(-1, 1, (3, 4)).astype(np.float32)
    b = r.uniform(-1, 1, (4, 2)).astype(np.float32)
    check_grads(lambda x, y: (x @ y).sum(), [a, b])


def test_softmax_rows_sum_to_one_and_grads():
    r = stream(7, "tensor-softmax")
    a = r.uniform(-3, 3, (5, 6)).astype(np.float32)
    out = softmax(Tensor(a), axis=-1)
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)
    w = r.uniform(-1, 1, (5, 6)).astype(np.float32)
    check_grads(lambda x: (softmax(x, axis=-1) * Tensor(w)).sum(), [a])


def test_softmax_matches_plain_formula():
    r = stream(8, "tensor-softmax-np")
    x = r.uniform(-2, 2, (3, 7)).astype(np.float32)
    e = np.exp(x.astype(np.float64))
    np.testing.assert_allclose(softmax_np(x), e / e.sum(-1, keepdims=True), atol=1e-6)


def test_mean_tuple_axis_counts_elements():
    r = stream(9, "tensor-mean")
    a = r.uniform(-1, 1, (2, 3, 4)).astype(np.float32)
    t = Tensor(a, requires_grad=True)
    loss = t.mean(axis=(1, 2)).sum()
    backward(loss)
    np.testing.assert_allclose(t.grad, np.full_like(a, 1.0 / 12.0), atol=1e-7)
    clear_graph()
    check_grads(lambda x: x.mean(axis=(0, 2)).sum(), [a])


def test_sum_keepdims_grads():
    r = stream(10, "tensor-sum")
    a = r.uniform(-1, 1, (3, 5)).astype(np.float32)
    check_grads(lambda x: (x.sum(axis=1, keepdims=True) * x).sum(), [a])


def test_relu_sigmoid_abs_grads_away_from_kinks():
    r = stream(11, "tensor-kinks")
    a = r.uniform(0.2, 1.0, (8,)).astype(np.float32)
    signs = np.where(r.uniform(size=8) < 0.5, -1.0, 1.0).astype(np.float32)
    a = a * signs
    check_grads(lambda x: (x.relu() + x.sigmoid() + x.abs()).sum(), [a])


def test_unbroadcast_scalar_and_column():
    r = stream(12, "tensor-unbroadcast")
    a = r.uniform(-1, 1, (3, 4)).astype(np.float32)
    c = r.uniform(-1, 1, (3, 1)).astype(np.float32)
    s = np.float32(0.7)
    check_grads(lambda x, y: (x + y).sum(), [a, c])
    t = Tensor(a, requires_grad=True)
    loss = (t * float(s)).sum()
    backward(loss)
    np.testing.assert_allclose(t.grad, np.full_like(a, s), atol=1e-6)
    clear_graph()


def test_transpose_reshape_concat_grads():
    r = stream(13, "tensor-shapes")
    a = r.uniform(-1, 1, (2, 3, 4)).astype(np.float32)
    b = r.uniform(-1, 1, (2, 3, 4)).astype(np.float32)
    check_grads(lambda x: x.transpose(2, 0, 1).reshape(4, 6).sum(), [a])
    check_grads(lambda x, y: (concat([x, y], axis=1) ** 2).sum(), [a, b])


def test_backward_accumulates_across_passes():
    a = np.ones((3,), dtype=np.float32)
    t = Tensor(a, requires_grad=True)
    backward((t * 2.0).sum())
    first = t.grad.copy()
    backward((t * 2.0).sum())
    np.testing.assert_allclose(t.grad, 2.0 * first)
    t.zero_grad()
    assert t.grad is None
    clear_graph()


def test_backward_twice_on_same_loss_raises():
    t = Tensor(np.ones(2, np.float32), requires_grad=True)
    loss = (t * 3.0).sum()
    backward(loss)
    with pytest.raises(StateError):
        backward(loss)
    clear_graph()


def test_backward_on_cleared_tape_raises():
    t = Tensor(np.ones(2, np.float32), requires_grad=True)
    loss = (t * 3.0).sum()
    clear_graph()
    with pytest.raises(StateError):
        backward(loss)


def test_backward_rejects_nonscalar_and_nontensor():
    t = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
    with pytest.raises(ContractError):
        backward(t * 1.0)
    with pytest.raises(ContractError):
        backward(1.0)
    clear_graph()


def test_no_grad_suppresses_recording():
    t = Tensor(np.ones(3, np.float32), requires_grad=True)
    with no_grad():
        out = (t * 2.0).sum()
    assert not out.requires_grad
    assert out.is_leaf()
    clear_graph()


def test_detach_and_item():
    t = Tensor(np.arange(4, dtype=np.float32), requires_grad=True)
    d = t.detach()
    assert not d.requires_grad
    with pytest.raises(ContractError):
        t.item()
    assert Tensor(np.float32(2.5)).item() == pytest.approx(2.5)


def test_domain_errors():
    with pytest.raises(DomainError):
        Tensor(np.array([1.0, -1.0], np.float32)).log()
    with pytest.raises(DomainError):
        Tensor(np.array([-0.5], np.float32)).sqrt()
    with pytest.raises(DomainError):
        Tensor(np.array([-2.0], np.float32)) ** 1.5
    try:
        Tensor(np.array([1.0, -1.0], np.float32)).log()
    except DomainError as e:
        assert e.index == 1
    clear_graph()


def test_shape_error_on_bad_broadcast():
    a = Tensor(np.ones((3, 2), np.float32))
    b = Tensor(np.ones((4, 5), np.float32))
    with pytest.raises(ShapeError):
        _ = a + b
    with pytest.raises(ShapeError):
        softmax(a, axis=5)


def test_elementwise_dispatch_contract():
    a = np.ones(3, np.float32)
    out = elementwise("add", Tensor(a), Tensor(a))
    np.testing.assert_allclose(out.data, 2.0)
    with pytest.raises(ContractError):
        elementwise("nope", Tensor(a))
    with pytest.raises(ContractError):
        elementwise("add", Tensor(a))
    with pytest.raises(ContractError):
        elementwise("exp", Tensor(a), Tensor(a))
    clear_graph()


def test_sigmoid_np_stable_at_extremes():
    x = np.array([-120.0, 0.0, 120.0], np.float32)
    s = sigmoid_np(x)
    assert np.all(np.isfinite(s))
    np.testing.assert_allclose(s, [0.0, 0.5, 1.0], atol=1e-6)
