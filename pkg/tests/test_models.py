import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcvae.diffcore import NoiseStream, Tensor, gaussian_log_pdf, grad_check, no_grad, sigmoid
from fcvae.models import (
    BASELINE_KINDS,
    MODEL_KINDS,
    VARIATIONAL_KINDS,
    Architecture,
    baseline_predict,
    baseline_treat,
    build_model,
    cfmlp_predict,
    decode_t,
    decode_x,
    decode_y,
    elbo,
    infer_posterior,
    load_checkpoint,
    save_checkpoint,
    training_loss,
)

D = 25


def _batch(n=4, d=D, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    a = np.array([0, 1] * (n // 2) + [0] * (n % 2), dtype=float)
    t = np.array([0, 0, 1, 1] * (n // 4) + [0] * (n % 4), dtype=float)
    y = rng.normal(size=n) * 3 + 5
    return x, a, t, y


def _model(kind, seed=1, **kw):
    x, a, t, y = _batch()
    return build_model(kind, D, NoiseStream(seed, "init"), a=a, y=y, **kw)


def _randomize(params, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    params.set_parameters([rng.normal(scale=scale, size=p.shape) for p in params.copy_arrays()])
    return params


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        build_model("TARNet", 3, NoiseStream(0))


def test_architecture_sizes():
    p = _model("FCVAE-1")
    assert p.nets["enc_mu"].sizes == (D + 1, 20, 10)
    assert p.nets["y_trunk"].sizes == (10, 100, 20)
    assert p.nets["y_head_t1a0"].sizes == (20, 100, 2)
    assert _model("FCVAE-2").nets["enc_sigma"].sizes == (D, 20, 10)
    assert p.pi_a == 0.5


def test_zero_encoder_is_prior():
    p = _model("FCVAE-1", zero=True)
    x, a, _, _ = _batch()
    mean, log_std = infer_posterior(p, x, a)
    assert np.all(mean.data == 0) and np.all(log_std.data == 0)


def test_zero_decoders():
    p = _model("FCVAE-2", zero=True)
    z = np.random.default_rng(0).normal(size=(3, 10))
    mean, ls = decode_x(p, z)
    assert np.all(mean.data == 0)
    assert gaussian_log_pdf(np.zeros(D), mean.data[0], ls) == pytest.approx(-0.5 * D * math.log(2 * math.pi), rel=1e-12)
    assert np.all(decode_t(p, z, [0, 1, 0]).data == 0.5)
    mu, log_std = decode_y(build_model("FCVAE-2", D, NoiseStream(0), zero=True), z, 1, 1)
    assert np.all(mu.data == 0) and np.all(log_std.data == 0)
    pb = build_model("FCVAE-2", D, NoiseStream(0), Architecture(y_kind="binary"), zero=True)
    pi, none = decode_y(pb, z, 0, 1)
    assert none is None and np.all(pi.data == 0.5)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        infer_posterior(_model("FCVAE-2"), np.zeros((2, D + 1)), [0, 1])
    with pytest.raises(TypeError):
        infer_posterior(_model("CFMLP"), np.zeros((2, D)), [0, 1])


def test_fcvae2_encoder_and_decoder_ignore_a():
    p = _randomize(_model("FCVAE-2"), 3)
    x = _batch()[0]
    m0, s0 = infer_posterior(p, x, np.zeros(4))
    m1, s1 = infer_posterior(p, x, np.ones(4))
    np.testing.assert_array_equal(m0.data, m1.data)
    np.testing.assert_array_equal(s0.data, s1.data)
    z = np.random.default_rng(1).normal(size=(4, 10))
    np.testing.assert_array_equal(decode_x(p, z, np.zeros(4))[0].data, decode_x(p, z, np.ones(4))[0].data)


@pytest.mark.parametrize("kind", ["FCVAE-1", "CVAE-A"])
def test_encoder_with_a_depends_on_a(kind):
    p = _randomize(_model(kind), 4)
    x = _batch()[0]
    assert not np.allclose(infer_posterior(p, x, np.zeros(4))[0].data, infer_posterior(p, x, np.ones(4))[0].data)


def test_t_heads_differ_by_a():
    p = _randomize(_model("FCVAE-2"), 5)
    z = np.random.default_rng(2).normal(size=(6, 10))
    assert not np.allclose(decode_t(p, z, 0).data, decode_t(p, z, 1).data)


def _perturbed(p, names, seed=9):
    rng = np.random.default_rng(seed)
    for name in names:
        for w in p.nets[name].weights + p.nets[name].biases:
            w.data = w.data + rng.normal(size=w.shape)
    return p


def test_t_gating_exact():
    p = _randomize(_model("FCVAE-1"), 6)
    z = np.random.default_rng(3).normal(size=(5, 10))
    before = decode_t(p, z, 0).data.copy()
    np.testing.assert_array_equal(decode_t(_perturbed(p, ["t_head_a1"]), z, 0).data, before)


@pytest.mark.parametrize("t,a", [(0, 0), (0, 1), (1, 0), (1, 1)])
def test_y_gating_exact(t, a):
    p = _randomize(_model("FCVAE-2"), 7)
    z = np.random.default_rng(4).normal(size=(5, 10))
    mu, ls = decode_y(p, z, a, t)
    others = [f"y_head_t{tt}a{aa}" for tt in (0, 1) for aa in (0, 1) if (tt, aa) != (t, a)]
    mu2, ls2 = decode_y(_perturbed(p, others), z, a, t)
    np.testing.assert_array_equal(mu.data, mu2.data)
    np.testing.assert_array_equal(ls.data, ls2.data)


def test_unselected_heads_get_zero_gradient():
    p = _randomize(_model("FCVAE-1"), 8)
    x, _, _, y = _batch()
    a = np.zeros(4)
    t = np.zeros(4)
    for q in p.parameters():
        q.grad = None
    training_loss(p, x, a, t, y, 3, NoiseStream(0)).backward()
    for name in ("t_head_a1", "y_head_t1a0", "y_head_t0a1", "y_head_t1a1"):
        for q in p.nets[name].tensors():
            assert q.grad is None or not np.any(q.grad)
    assert np.any(p.nets["y_head_t0a0"].weights[0].grad)


def test_batch_vs_row_decode():
    p = _randomize(_model("FCVAE-1"), 9)
    z = np.random.default_rng(5).normal(size=(6, 10))
    a = np.array([0, 1, 1, 0, 1, 0])
    batch = decode_x(p, z, a)[0].data
    for i in range(6):
        np.testing.assert_allclose(decode_x(p, z[i:i + 1], a[i:i + 1])[0].data[0], batch[i], rtol=1e-13, atol=1e-15)


@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_full_objective_gradient_check(kind):
    x, a, t, y = _batch()
    p = _model(kind)
    u = np.random.default_rng(11).normal(size=(10 * 4, 10))

    def loss(leaves):
        p.bind(leaves)
        return training_loss(p, x, a, t, y, 10, u)

    assert grad_check(loss, p.copy_arrays(), max_entries=10, seed=2) < 1e-4


def test_elbo_terms_sum_and_prior_encoder():
    x, a, t, y = _batch(6)
    p = build_model("FCVAE-2", D, NoiseStream(2), a=a, y=y)
    for name in ("enc_mu", "enc_sigma"):
        for w in p.nets[name].tensors():
            w.data = np.zeros_like(w.data)
    terms = elbo(p, x, a, t, y, 10, NoiseStream(5))
    np.testing.assert_allclose(terms.total, terms.log_px + terms.log_pt + terms.log_py + terms.log_pz
                               + terms.neg_log_q, rtol=1e-12)
    # q equals the prior, so log p(z) - log q(z) vanishes sample by sample
    np.testing.assert_allclose(terms.log_pz + terms.neg_log_q, 0, atol=1e-12)
    np.testing.assert_allclose(terms.total, terms.log_px + terms.log_pt + terms.log_py, rtol=1e-12)


def _toy(kind, seed):
    arch = Architecture(d_z=1)
    p = build_model(kind, 3, NoiseStream(seed, "toy"), arch, a=[0, 1], y=[0.0, 1.0])
    rng = np.random.default_rng(seed)
    # jitter the Glorot draw so biases are non-zero and settings differ beyond the init
    p.set_parameters([w + rng.normal(scale=0.1, size=w.shape) for w in p.copy_arrays()])
    return p


def quadrature_log_marginal(p, x, a, t, y, grid=np.linspace(-12, 12, 6001)):
    """log of the integral over z of p(z) p(x,t,y | z, a), by the trapezoid rule on a fine grid."""
    m = len(grid)
    z = grid.reshape(-1, 1)
    aa, tt = np.full(m, a), np.full(m, t)
    with no_grad():
        xm, xls = decode_x(p, z, aa)
        xm = xm.data
        if p.kind == "CVAE-A":
            lx = gaussian_log_pdf(np.tile(x, (m, 1)), xm[:, :p.d_x], xls)
            pa = np.clip(sigmoid(xm[:, p.d_x]), 1e-6, 1 - 1e-6)
            lx = lx + np.log(pa if a else 1 - pa)
        else:
            lx = gaussian_log_pdf(np.tile(x, (m, 1)), xm, xls)
        pt = np.clip(decode_t(p, z, aa).data[:, 0], 1e-6, 1 - 1e-6)
        lt = np.log(pt if t else 1 - pt)
        ym, yls = decode_y(p, z, aa, tt)
        ly = gaussian_log_pdf(np.full((m, 1), y), ym.data, yls.data)
    log_joint = lx + lt + ly - 0.5 * grid ** 2 - 0.5 * math.log(2 * math.pi)
    top = log_joint.max()
    return top + math.log(np.trapezoid(np.exp(log_joint - top), grid))


@pytest.mark.parametrize("kind", VARIATIONAL_KINDS)
def test_elbo_below_quadrature_marginal(kind):
    rng = np.random.default_rng(0)
    violations, iw_gaps = [], []
    for setting in range(20):
        p = _toy(kind, setting)
        x = rng.normal(size=3)
        a, t, y = setting % 2, (setting // 2) % 2, float(rng.normal())
        # one posterior draw per tiled copy of the row gives per-sample ELBO values
        m = 4000
        per_sample = elbo(p, np.tile(x, (m, 1)), np.full(m, a), np.full(m, t), np.full(m, y), 1,
                          NoiseStream(setting, "toy-mc").normal((m, 1))).total
        estimate, se = per_sample.mean(), per_sample.std(ddof=1) / math.sqrt(m)
        bound = quadrature_log_marginal(p, x, a, t, y)
        if estimate > bound + 3 * se:
            violations.append((setting, estimate, bound, se))
        # the importance-weighted estimate from the same draws should land on the quadrature value
        top = per_sample.max()
        iw_gaps.append(top + math.log(np.mean(np.exp(per_sample - top))) - bound)
    assert not violations
    assert np.median(np.abs(iw_gaps)) < 0.05


def test_elbo_sample_count_agrees_in_expectation():
    x, a, t, y = _batch(2)
    p = _randomize(_model("FCVAE-1"), 12, scale=0.2)
    one = np.array([elbo(p, x, a, t, y, 1, NoiseStream(0, "s1", i)).total.mean() for i in range(1000)])
    ten = np.array([elbo(p, x, a, t, y, 10, NoiseStream(0, "s10", i)).total.mean() for i in range(1000)])
    se = math.sqrt(one.var(ddof=1) / 1000 + ten.var(ddof=1) / 1000)
    assert abs(one.mean() - ten.mean()) < 3 * se


def test_elbo_requires_samples():
    x, a, t, y = _batch()
    with pytest.raises(ValueError):
        elbo(_model("FCVAE-2"), x, a, t, y, 0)


@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_checkpoint_round_trip(kind, tmp_path):
    p = _randomize(_model(kind), 13)
    path = tmp_path / "ck.json"
    save_checkpoint(p, path)
    q = load_checkpoint(path)
    for u, v in zip(p.copy_arrays(), q.copy_arrays()):
        np.testing.assert_array_equal(u, v)
    assert (q.kind, q.d_x, q.y_loc, q.y_scale, vars(q.arch)) == (p.kind, p.d_x, p.y_loc, p.y_scale, vars(p.arch))


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.json"
    path.write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_cfmlp_flip_changes_one_input():
    p = _randomize(_model("CFMLP"), 14)
    x = _batch()[0]
    w = p.nets["y_net"].weights[0].data
    # zero the T input row: predictions then ignore t entirely
    w[D + 1] = 0.0
    np.testing.assert_array_equal(cfmlp_predict(p, x, 0, 0).data, cfmlp_predict(p, x, 0, 1).data)


def test_cfmlp_forward_oracle():
    p = _randomize(_model("CFMLP"), 15)
    x = _batch()[0][:1]
    h = np.concatenate([x[0], [1.0, 0.0]])
    net = p.nets["y_net"]
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.data + b.data[0]
        if k < len(net.weights) - 1:
            h = np.where(h > 0, h, np.expm1(h))
    expected = h[0] * p.y_scale + p.y_loc
    assert cfmlp_predict(p, x, 1, 0).data[0, 0] == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("kind", BASELINE_KINDS)
def test_zero_baseline_constant(kind):
    x, a, t, y = _batch()
    p = build_model(kind, D, NoiseStream(0), zero=True)
    for aa in (0, 1):
        for tt in (0, 1):
            assert np.all(baseline_predict(p, x, aa, tt).data == 0)
        assert np.all(baseline_treat(p, x, aa).data == 0.5)


def test_cf4mlp_routing_table():
    p = _randomize(_model("CF4MLP"), 16)
    x = _batch()[0]
    for t in (0, 1):
        for a in (0, 1):
            net = p.nets[f"y_net_t{t}a{a}"]
            h = x
            for k, (w, b) in enumerate(zip(net.weights, net.biases)):
                h = h @ w.data + b.data
                if k < len(net.weights) - 1:
                    h = np.where(h > 0, h, np.expm1(h))
            np.testing.assert_allclose(baseline_predict(p, x, a, t).data, h * p.y_scale + p.y_loc, rtol=1e-12)
    before = baseline_predict(p, x, 0, 0).data.copy()
    np.testing.assert_array_equal(baseline_predict(_perturbed(p, ["y_net_t1a1"]), x, 0, 0).data, before)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=8), st.integers(0, 99))
def test_mixed_batch_routes_like_single_rows(codes, seed):
    p = _randomize(_model("FCVAE-2"), seed)
    z = np.random.default_rng(seed).normal(size=(len(codes), 10))
    t = np.array([c[0] for c in codes])
    a = np.array([c[1] for c in codes])
    batch = decode_y(p, z, a, t)[0].data
    for i in range(len(codes)):
        np.testing.assert_allclose(decode_y(p, z[i:i + 1], a[i], t[i])[0].data[0], batch[i], rtol=1e-12)


def test_tensor_leaves_bind_round_trip():
    p = _model("CVAE-A")
    leaves = [Tensor(a, requires_grad=True) for a in p.copy_arrays()]
    p.bind(leaves)
    assert all(x is y for x, y in zip(p.parameters(), leaves))
    with pytest.raises(ValueError):
        p.bind(leaves + [leaves[0]])
