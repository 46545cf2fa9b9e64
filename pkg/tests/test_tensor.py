import numpy as np
import pytest

from divcontrol import tensor as T
from divcontrol.errors import ContractError, InvalidInputError
from divcontrol.tensor import Tensor, backward, cosine_similarity, no_grad, softmax


def test_softmax_uniform_on_zeros():
    y = softmax(Tensor([0.0, 0.0, 0.0, 0.0]))
    assert np.allclose(y.data, [0.25, 0.25, 0.25, 0.25], atol=1e-15)


def test_softmax_analytic_ln2():
    y = softmax(Tensor([np.log(2.0), 0.0]))
    assert abs(y.data[0] - 2.0 / 3.0) < 1e-14
    assert abs(y.data[1] - 1.0 / 3.0) < 1e-14


def test_softmax_large_logits_match_arbitrary_precision():
    # oracle: mpmath evaluation of exp(x_i - max) / sum
    import mpmath

    logits = [1000.0, 0.0]
    m = max(logits)
    exps = [mpmath.e ** (x - m) for x in logits]
    total = sum(exps)
    expected = [float(e / total) for e in exps]
    y = softmax(Tensor(logits))
    assert np.isfinite(y.data).all()
    for got, want in zip(y.data, expected):
        assert abs(got - want) < 1e-300
    assert abs(y.data.sum() - 1.0) < 1e-12


def test_softmax_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        softmax(Tensor([np.nan, 0.0]))
    with pytest.raises(InvalidInputError):
        softmax(Tensor([np.inf, 0.0]))


def test_softmax_sum_and_permutation_equivariance_property():
    rng = np.random.default_rng(11)
    for _ in range(200):
        n = int(rng.integers(1, 12))
        x = rng.standard_normal(n) * rng.uniform(0.1, 50)
        y = softmax(Tensor(x)).data
        assert abs(y.sum() - 1.0) < 1e-12
        assert (y > 0).all() and (y <= 1.0).all()
        perm = rng.permutation(n)
        yp = softmax(Tensor(x[perm])).data
        assert np.allclose(yp, y[perm], rtol=1e-14, atol=0)


def test_cosine_similarity_identity_and_antipodal():
    v = np.array([0.3, -1.2, 4.0])
    assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-12)
    assert cosine_similarity(v, -v) == pytest.approx(-1.0, abs=1e-12)


def test_cosine_similarity_analytic():
    assert cosine_similarity([1.0, 0.0], [1.0, 1.0]) == pytest.approx(1 / np.sqrt(2), abs=1e-12)


def test_cosine_similarity_degenerate_pair():
    val, flag = cosine_similarity([0.0, 0.0], [0.0, 0.0], return_degenerate=True)
    assert val == 0.0 and flag is True
    val, flag = cosine_similarity([1.0, 0.0], [1.0, 0.0], return_degenerate=True)
    assert flag is False


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * 2.0
    with pytest.raises(ContractError):
        backward(y)
    T.clear_tape()


def test_backward_sum_linear_matches_outer_product():
    # loss = sum(W @ x): grad(W)[i, j] = x[j] for every row i
    rng = np.random.default_rng(3)
    W = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    x = Tensor(rng.standard_normal(3))
    loss = T.sum_(T.matmul(W, T.reshape(x, (3, 1))))
    backward(loss)
    expected = np.tile(x.data, (4, 1))
    assert np.allclose(W.grad, expected, atol=1e-14)


def test_backward_constant_branch_gets_zero_grad():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    loss = T.sum_(a * a)  # b not used
    backward(loss)
    assert b.grad is None  # unreachable parameter: absent grad
    assert np.allclose(a.grad, 2.0)


def test_no_grad_blocks_recording():
    a = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = a * 3.0
    assert not y.requires_grad
    assert T.tape_size() == 0


def test_grad_accumulates_across_reuse():
    a = Tensor(np.array([2.0]), requires_grad=True)
    loss = T.sum_(a * a + a * 3.0)
    backward(loss)
    assert np.allclose(a.grad, [2 * 2.0 + 3.0])


def test_broadcast_unbroadcast_grads():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    loss = T.sum_(a + b)
    backward(loss)
    assert a.grad.shape == (2, 3) and np.allclose(a.grad, 1.0)
    assert b.grad.shape == (3,) and np.allclose(b.grad, 2.0)


def test_gather_rows_scatter_adds():
    table = Tensor(np.zeros((4, 2)), requires_grad=True)
    rows = T.gather_rows(table, np.array([1, 1, 3]))
    backward(T.sum_(rows))
    expected = np.array([[0, 0], [2, 2], [0, 0], [1, 1]], dtype=float)
    assert np.array_equal(table.grad, expected)


def test_tape_freed_after_backward():
    a = Tensor(np.ones(4), requires_grad=True)
    backward(T.sum_(a * a))
    assert T.tape_size() == 0
