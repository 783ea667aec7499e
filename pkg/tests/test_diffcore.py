import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcvae.diffcore import (
    AdamState,
    MlpParams,
    NoiseStream,
    NondeterministicLoss,
    Tensor,
    adam_step,
    bernoulli_log_pmf,
    elu,
    gaussian_kl_to_standard,
    gaussian_log_pdf,
    gaussian_sample_reparam,
    grad_check,
    init_mlp,
    mlp_forward,
    mul,
    sigmoid,
    tsum,
)

finite = st.floats(-50, 50, allow_nan=False)


def test_elu_examples():
    assert elu(0.0) == 0.0
    assert elu(2.0) == 2.0
    assert elu(-1.0) == pytest.approx(math.exp(-1) - 1, abs=1e-15)
    assert elu(-1.0) == pytest.approx(-0.63212, abs=1e-5)


def test_sigmoid_examples():
    assert sigmoid(0.0) == 0.5
    assert sigmoid(1000.0) == 1.0
    assert sigmoid(-1000.0) == 0.0
    assert sigmoid(math.log(3)) == pytest.approx(0.75, abs=1e-15)


@given(finite)
def test_sigmoid_strictly_inside_after_floor(x):
    assert math.isfinite(bernoulli_log_pmf(1, sigmoid(x)))
    assert math.isfinite(bernoulli_log_pmf(0, sigmoid(x)))


def _net(sizes, seed=0):
    return init_mlp(sizes, NoiseStream(seed, "net"))


def test_mlp_zero_weights_give_zero():
    p = init_mlp([3, 4, 2], NoiseStream(0), zero=True)
    assert np.all(mlp_forward(p, np.random.default_rng(0).normal(size=(5, 3))) == 0)


def test_mlp_identity_layer():
    w = Tensor(np.eye(3), requires_grad=True)
    b = Tensor(np.zeros((1, 3)), requires_grad=True)
    x = np.random.default_rng(1).normal(size=(4, 3))
    np.testing.assert_array_equal(mlp_forward(MlpParams((3, 3), [w], [b]), x), x)


def test_mlp_matches_straight_line_oracle():
    p = _net([3, 4, 2], seed=5)
    for b in p.biases:
        b.data = np.random.default_rng(2).normal(size=b.shape)
    x = np.array([0.3, -1.2, 2.0])
    w1, b1 = p.weights[0].data, p.biases[0].data[0]
    w2, b2 = p.weights[1].data, p.biases[1].data[0]
    hidden = []
    for j in range(4):
        s = b1[j] + sum(x[i] * w1[i, j] for i in range(3))
        hidden.append(s if s >= 0 else math.exp(s) - 1)
    expected = [b2[k] + sum(hidden[j] * w2[j, k] for j in range(4)) for k in range(2)]
    np.testing.assert_allclose(mlp_forward(p, x)[0], expected, rtol=1e-13)


def test_mlp_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        mlp_forward(_net([3, 4, 2]), np.zeros((2, 5)))


def test_mlp_param_count():
    p = _net([3, 4, 2])
    assert p.n_params == (3 + 1) * 4 + (4 + 1) * 2
    with pytest.raises(ValueError):
        MlpParams((3, 4), [Tensor(np.zeros((3, 5)))], [Tensor(np.zeros((1, 5)))])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(0, 1000))
def test_mlp_rows_separately_equal_batch(n, seed):
    p = _net([4, 7, 3], seed=seed)
    x = np.random.default_rng(seed).normal(size=(n, 4))
    batch = mlp_forward(p, x)
    for i in range(n):
        np.testing.assert_allclose(mlp_forward(p, x[i:i + 1])[0], batch[i], rtol=1e-13, atol=1e-15)


def test_reparam_degenerate_scale():
    mean = np.array([1.5, -2.0, 0.25])
    out = gaussian_sample_reparam(mean, np.full(3, -40.0), NoiseStream(3, "s"))
    np.testing.assert_allclose(out, mean, rtol=0, atol=1e-15)


def test_reparam_moments_monte_carlo():
    draws = gaussian_sample_reparam(np.zeros(100_000), np.zeros(100_000), NoiseStream(7, "mc"))
    assert abs(draws.mean()) < 0.02
    assert abs(draws.var() - 1.0) < 0.05


def test_reparam_deterministic_per_coordinate():
    s = NoiseStream(11, "posterior", 4)
    a = gaussian_sample_reparam(np.zeros(8), np.zeros(8), s)
    b = gaussian_sample_reparam(np.zeros(8), np.zeros(8), NoiseStream(11, "posterior", 4))
    np.testing.assert_array_equal(a, b)
    c = gaussian_sample_reparam(np.zeros(8), np.zeros(8), s.at(5))
    assert not np.array_equal(a, c)


def test_noise_labels_independent():
    a = NoiseStream(0, "datagen").normal(50_000)
    b = NoiseStream(0, "init").normal(50_000)
    # 4 standard errors of a correlation estimate
    assert abs(np.corrcoef(a, b)[0, 1]) < 4 / math.sqrt(50_000)


def test_reparam_differentiable():
    mean = Tensor(np.array([0.5, -1.0]), requires_grad=True)
    log_std = Tensor(np.array([0.1, -0.3]), requires_grad=True)
    u = np.array([1.3, -0.4])
    tsum(gaussian_sample_reparam(mean, log_std, u)).backward()
    np.testing.assert_allclose(mean.grad, [1, 1])
    np.testing.assert_allclose(log_std.grad, np.exp(log_std.data) * u)


def test_gaussian_log_pdf_closed_forms():
    assert gaussian_log_pdf(0.7, 0.7, 0.0) == pytest.approx(-0.918939, abs=1e-6)
    ls = 0.4
    assert gaussian_log_pdf(0.7 + math.exp(ls), 0.7, ls) == pytest.approx(-0.918939 - ls - 0.5, abs=1e-6)


def test_gaussian_density_normalises_by_quadrature():
    rng = np.random.default_rng(4)
    mean, log_std = rng.normal(size=5), rng.normal(scale=0.3, size=5)
    # the density factorises over dimensions, so check each 1-D marginal on a fine grid
    # and the joint via the product of marginal integrals
    total = 1.0
    for j in range(5):
        sd = math.exp(log_std[j])
        grid = np.linspace(mean[j] - 10 * sd, mean[j] + 10 * sd, 20001)
        dens = np.exp([gaussian_log_pdf(g, mean[j], log_std[j]) for g in grid])
        total *= np.trapezoid(dens, grid)
    assert abs(total - 1.0) < 1e-3
    x = rng.normal(size=5)
    per_dim = sum(gaussian_log_pdf(x[j], mean[j], log_std[j]) for j in range(5))
    assert gaussian_log_pdf(x, mean, log_std) == pytest.approx(per_dim, rel=1e-14)


def test_bernoulli_examples():
    assert bernoulli_log_pmf(1, 0.5) == pytest.approx(-0.693147, abs=1e-6)
    assert bernoulli_log_pmf(0, 0.5) == pytest.approx(-0.693147, abs=1e-6)
    assert bernoulli_log_pmf(1, 0.75) == pytest.approx(-0.287682, abs=1e-6)
    assert bernoulli_log_pmf(1, 0.0) == pytest.approx(math.log(1e-6))


def test_kl_examples():
    assert gaussian_kl_to_standard(np.zeros(4), np.zeros(4)) == 0.0
    assert gaussian_kl_to_standard(np.array([1.0]), np.array([0.0])) == pytest.approx(0.5)


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(9)
    mean, log_std = rng.normal(size=10), rng.normal(scale=0.5, size=10)
    z = mean + np.exp(log_std) * NoiseStream(1, "kl").normal((200_000, 10))
    lq = -0.5 * (((z - mean) / np.exp(log_std)) ** 2).sum(1) - log_std.sum() - 5 * math.log(2 * math.pi)
    lp = -0.5 * (z ** 2).sum(1) - 5 * math.log(2 * math.pi)
    diff = lq - lp
    se = diff.std() / math.sqrt(len(diff))
    assert abs(diff.mean() - gaussian_kl_to_standard(mean, log_std)) < 3 * se


@given(st.lists(st.tuples(finite, st.floats(-5, 5)), min_size=1, max_size=6))
def test_kl_nonnegative(pairs):
    mean = np.array([p[0] for p in pairs])
    log_std = np.array([p[1] for p in pairs])
    kl = gaussian_kl_to_standard(mean, log_std)
    assert kl >= 0
    if np.all(mean == 0) and np.all(log_std == 0):
        assert kl == 0


def test_adam_zero_grad_keeps_params():
    p = [np.array([[1.0, -2.0]]), np.array([3.0])]
    state = AdamState.for_params(p)
    new, state = adam_step(p, [np.zeros_like(x) for x in p], state)
    for a, b in zip(p, new):
        np.testing.assert_array_equal(a, b)
    assert state.step == 1


def test_adam_first_step():
    new, _ = adam_step([np.array([0.0])], [np.array([1.0])], AdamState.for_params([np.array([0.0])]))
    assert new[0][0] == pytest.approx(-0.001, rel=1e-6)


def test_adam_descends_quadratic():
    w = [np.array([1.0])]
    state = AdamState.for_params(w, lr=0.01)
    trace = []
    for _ in range(100):
        w, state = adam_step(w, [2 * w[0]], state)
        trace.append(abs(w[0][0]))
    assert all(b < a for a, b in zip(trace[5:], trace[6:]))


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step([np.zeros(2)], [np.zeros(3)], AdamState.for_params([np.zeros(2)]))


def test_grad_check_linear_exact():
    x = np.array([[0.3], [-1.1], [2.0]])
    err = grad_check(lambda leaves: tsum(leaves[0] @ Tensor(x)), [np.array([[0.5, 1.5, -0.2]])])
    assert err < 1e-10


def test_grad_check_mlp_gaussian_loglik():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
    net = _net([3, 5, 4], seed=2)

    def loss(leaves):
        p = MlpParams(net.sizes, leaves[0::2], leaves[1::2])
        out = mlp_forward(p, Tensor(x))
        mu = out @ Tensor(np.vstack([np.eye(2), np.zeros((2, 2))]))
        ls = out @ Tensor(np.vstack([np.zeros((2, 2)), np.eye(2)]))
        return mul(tsum(gaussian_log_pdf(y, mu, ls)), -1.0)

    assert grad_check(loss, [t.data for t in net.tensors()]) < 1e-4


def test_grad_check_rejects_nondeterministic_loss():
    counter = iter(range(100))

    def loss(leaves):
        u = NoiseStream(0, "leak", next(counter)).normal(1)
        return tsum(mul(leaves[0], u))

    with pytest.raises(NondeterministicLoss):
        grad_check(loss, [np.ones(1)])


def test_child_streams_depend_on_parent_counter():
    a = NoiseStream(1, "x", 0).child("y").normal(3)
    b = NoiseStream(1, "x", 1).child("y").normal(3)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, NoiseStream(1, "x/y").normal(3))
