import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from exitdistill import numerics as nx
from exitdistill.numerics import Tensor


def rand(rng, *shape, grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=grad)


# --- matmul ----------------------------------------------------------------

def test_matmul_identity_and_arithmetic():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(nx.matmul(Tensor(np.eye(2)), a).data, a.data)
    out = nx.matmul(a, Tensor([[0.0], [1.0]]))
    assert out.data.tolist() == [[2.0], [4.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(nx.DimensionError, match=r"\(3, 4\).*\(3, 2\)"):
        nx.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 2))))


def test_matmul_gradients():
    rng = np.random.default_rng(0)
    b = rand(rng, 4, 2)
    a = rand(rng, 3, 4)
    assert nx.grad_check(lambda t: (nx.matmul(t, b) * nx.matmul(t, b)).sum(), a) <= 1e-4
    assert nx.grad_check(lambda t: nx.matmul(a, t).tanh().sum(), b) <= 1e-4


# --- softmax ---------------------------------------------------------------

def test_softmax_examples():
    assert np.allclose(nx.softmax(Tensor([0.3] * 4), 2.5).data, 0.25, atol=1e-15)
    assert np.allclose(nx.softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-15)
    big = nx.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0) and big[1] < 1e-300


@pytest.mark.parametrize("t", [0.0, -1.0])
def test_softmax_rejects_bad_temperature(t):
    with pytest.raises(nx.ParameterError):
        nx.softmax(Tensor([1.0, 2.0]), t)


def test_softmax_needs_two_classes():
    with pytest.raises(nx.DimensionError):
        nx.softmax(Tensor([1.0]))


finite = st.floats(-30, 30, allow_nan=False)


@given(arrays(np.float64, st.integers(2, 12), elements=finite), st.floats(-50, 50), st.floats(0.1, 5))
def test_softmax_sums_to_one_and_is_shift_invariant(x, c, t):
    p = nx.softmax(Tensor(x), t).data
    assert abs(p.sum() - 1.0) <= 1e-9
    assert np.all((p >= 0) & (p <= 1))
    assert np.allclose(nx.softmax(Tensor(x + c), t).data, p, atol=1e-12, rtol=0)


# --- cross-entropy ---------------------------------------------------------

def test_cross_entropy_examples():
    assert nx.cross_entropy(Tensor([0.0, 1.0, 0.0]), 1).item() == 0.0
    assert nx.cross_entropy(Tensor(np.full(5, 0.2)), 3).item() == pytest.approx(math.log(5), abs=1e-12)
    # floored, not infinite
    assert nx.cross_entropy(Tensor([1.0, 0.0]), 1).item() == pytest.approx(-math.log(1e-12))


def test_cross_entropy_gold_out_of_range():
    with pytest.raises(IndexError):
        nx.cross_entropy(Tensor([0.5, 0.5]), 2)
    with pytest.raises(IndexError):
        nx.cross_entropy(Tensor([[0.5, 0.5]]), [-1])


def test_cross_entropy_softmax_gradient_is_probs_minus_onehot():
    rng = np.random.default_rng(1)
    z = rand(rng, 5)
    nx.cross_entropy(nx.softmax(z), 2).backward()
    p = nx.softmax(Tensor(z.data)).data
    assert np.allclose(z.grad, p - np.eye(5)[2], atol=1e-12)


# --- KL --------------------------------------------------------------------

def kl_oracle(p, q):
    total = 0.0
    for pi, qi in zip(p, q):
        pi, qi = max(pi, 1e-12), max(qi, 1e-12)
        total += pi * math.log(pi / qi)
    return total


def test_kl_examples():
    p = Tensor([0.2, 0.3, 0.5])
    assert nx.kl_divergence(p, p.data).item() == pytest.approx(0.0, abs=1e-15)
    assert nx.kl_divergence(Tensor([1.0, 0.0]), [0.5, 0.5]).item() == pytest.approx(math.log(2), abs=1e-12)


def test_kl_matches_summation_oracle():
    rng = np.random.default_rng(2)
    for _ in range(50):
        p, q = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
        assert nx.kl_divergence(Tensor(p), q).item() == pytest.approx(kl_oracle(p, q), abs=1e-12)


def test_kl_class_mismatch():
    with pytest.raises(nx.DimensionError):
        nx.kl_divergence(Tensor([0.5, 0.5]), [0.2, 0.3, 0.5])


def test_kl_target_gets_no_gradient():
    q = Tensor([0.1, 0.9], requires_grad=True)
    z = Tensor([0.3, -0.2], requires_grad=True)
    nx.kl_divergence(nx.softmax(z), q).backward()
    assert np.any(z.grad != 0) and not np.any(q.grad)


@given(arrays(np.float64, 6, elements=st.floats(0.01, 1)), arrays(np.float64, 6, elements=st.floats(0.01, 1)))
def test_kl_nonnegative(a, b):
    p, q = a / a.sum(), b / b.sum()
    assert nx.kl_divergence(Tensor(p), q).item() >= -1e-15


# --- cosine ----------------------------------------------------------------

def test_cosine_examples():
    a = np.array([1.0, 2.0, 3.0])
    assert nx.cosine_similarity(a, a) == pytest.approx(1.0, abs=1e-15)
    assert nx.cosine_similarity([1.0, 0.0], [0.0, 2.0]) == 0.0
    assert nx.cosine_similarity(a, -a) == pytest.approx(-1.0, abs=1e-15)


def test_cosine_zero_norm():
    with pytest.raises(nx.DegenerateInputError):
        nx.cosine_similarity([0.0, 0.0], [1.0, 1.0])


@given(arrays(np.float64, 5, elements=st.floats(-10, 10)), arrays(np.float64, 5, elements=st.floats(-10, 10)),
       st.floats(0.01, 100), st.floats(0.01, 100))
def test_cosine_scale_invariant(a, b, alpha, beta):
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    c = nx.cosine_similarity(a, b)
    assert -1.0 <= c <= 1.0
    assert nx.cosine_similarity(alpha * a, beta * b) == pytest.approx(c, abs=1e-12)


# --- autodiff --------------------------------------------------------------

UNARY = {
    "tanh": lambda t: t.tanh(),
    "relu": lambda t: (t + 0.05).relu(),
    "exp": lambda t: t.exp(),
    "log": lambda t: (t * t + 0.5).log(),
    "sqrt": lambda t: (t * t + 0.5).sqrt(),
    "neg": lambda t: -t,
    "div": lambda t: 1.0 / (t * t + 1.0),
    "getitem": lambda t: t[1:3] * t[0:2],
    "mean": lambda t: t.mean(axis=0, keepdims=True) * t,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_elementwise_gradients(name):
    rng = np.random.default_rng(3)
    f = UNARY[name]
    for _ in range(5):
        x = rand(rng, 4, 3)
        assert nx.grad_check(lambda t: (f(t) * f(t)).sum(), x) <= 1e-4


def test_broadcast_add_mul_gradients():
    rng = np.random.default_rng(4)
    x, b = rand(rng, 4, 3), rand(rng, 3)
    assert nx.grad_check(lambda t: ((x + t) * (x * t)).sum(), b) <= 1e-4
    assert nx.grad_check(lambda t: ((t - b) * (t / (b * b + 1))).sum(), x) <= 1e-4


def test_layer_norm_gradients():
    rng = np.random.default_rng(5)
    x, g, b = rand(rng, 3, 6), rand(rng, 6), rand(rng, 6)
    w = rng.standard_normal((3, 6))
    assert nx.grad_check(lambda t: (nx.layer_norm(t, g, b) * w).sum(), x) <= 1e-4
    assert nx.grad_check(lambda t: (nx.layer_norm(x, t, b) * w).sum(), g) <= 1e-4


def test_gradient_accumulates_over_reuse():
    x = Tensor([2.0, 3.0], requires_grad=True)
    (x * x + x).sum().backward()
    assert x.grad.tolist() == [5.0, 7.0]


def test_no_grad_builds_no_graph():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with nx.no_grad():
        y = (x * x).sum()
    assert not y.requires_grad


def test_grad_check_contract():
    x = Tensor([1.0, 2.0], requires_grad=True)
    assert nx.grad_check(lambda t: t.sum(), x) <= 1e-9
    with pytest.raises(nx.ContractError):
        nx.grad_check(lambda t: t * 2.0, x)
    with pytest.raises(nx.ParameterError):
        nx.grad_check(lambda t: t.sum(), x, eps=1e-2)


def test_distribution_validation():
    assert nx.Distribution(np.array([0.25, 0.75])).argmax() == 1
    with pytest.raises(ValueError):
        nx.Distribution(np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        nx.Distribution(np.array([1.0]))


def test_parameters_checksum_changes_with_values():
    a = [Tensor([1.0, 2.0])]
    b = [Tensor([1.0, 2.0 + 1e-15])]
    assert nx.parameters_checksum(a) == nx.parameters_checksum([Tensor([1.0, 2.0])])
    assert nx.parameters_checksum(a) != nx.parameters_checksum(b)


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1))
def test_forward_values_stay_finite(seed):
    rng = np.random.default_rng(seed)
    z = Tensor(rng.standard_normal((4, 5)) * 50, requires_grad=True)
    loss = nx.cross_entropy(nx.softmax(z), rng.integers(0, 5, 4))
    loss.backward()
    assert np.isfinite(loss.item()) and np.all(np.isfinite(z.grad))
