"""Individual-level interventional estimates from a fitted model, and an exact discrete oracle.

For the latent models the posterior over ``Z`` is inferred from the factual
``(x, a)`` (abduction), then the relevant heads are queried under the
intervention and averaged over posterior samples. CVAE-A has no A-gated
heads, so interventions on ``A`` re-encode with the flipped value instead.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datagen import DatasetBundle
from .diffcore import NoiseStream, no_grad
from .models import (
    CvaeAParams,
    FcvaeParams,
    baseline_predict,
    baseline_treat,
    decode_t,
    decode_y,
    infer_posterior,
)


class ModelStateError(ValueError):
    pass


def check_finite(params) -> None:
    for t in params.parameters():
        if not np.all(np.isfinite(t.data)):
            raise ModelStateError(f"{params.kind} has non-finite parameters")


def posterior_samples(params, x, a_enc, n_samples, noise: NoiseStream) -> np.ndarray:
    """``(n_samples * n, d_z)`` draws from q(Z | x, a_enc), sample-major."""
    with no_grad():
        mean, log_std = infer_posterior(params, x, a_enc)
    u = noise.normal((n_samples * mean.shape[0], mean.shape[1]))
    return np.tile(mean.data, (n_samples, 1)) + np.tile(np.exp(log_std.data), (n_samples, 1)) * u


def _avg(v, n_samples):
    return np.asarray(v).reshape(n_samples, -1).mean(axis=0)


def _head(params, z, query):
    with no_grad():
        if query[0] == "t":
            return decode_t(params, z, query[1]).data.ravel()
        return decode_y(params, z, query[1], query[2])[0].data.ravel()


def posterior_mean_prediction(params, x, a, query, n_samples=10, noise=None, encode_a=None):
    """Average of one head over posterior samples.

    ``query`` is ``("t", a')`` for pi_T or ``("y", a', t')`` for mu_Y. The
    encoder sees the factual ``a`` unless ``encode_a`` overrides it. Baselines
    have no posterior and return their direct prediction.
    """
    check_finite(params)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    a = np.broadcast_to(np.asarray(a).reshape(-1), (n,))
    if not params.variational:
        with no_grad():
            if query[0] == "t":
                return baseline_treat(params, x, query[1]).data.ravel()
            return baseline_predict(params, x, query[1], query[2]).data.ravel()
    noise = noise or NoiseStream(0, "posterior")
    enc = a if encode_a is None else np.broadcast_to(np.asarray(encode_a).reshape(-1), (n,))
    z = posterior_samples(params, x, enc, n_samples, noise)
    return _avg(_head(params, z, query), n_samples)


@dataclass
class EffectEstimates:
    ie_at_hat: np.ndarray
    ie_ay_hat: np.ndarray
    ie_ty_hat: np.ndarray
    ie_at_true: np.ndarray
    ie_ay_true: np.ndarray
    ie_ty_true: np.ndarray
    y_hat: np.ndarray  # (n, 2) predicted outcome under do(T=t) at factual a
    n_posterior_samples: int = 10

    @property
    def n(self) -> int:
        return len(self.ie_at_hat)


def true_effects(bundle: DatasetBundle):
    """Per-row ground truth ``(ie_at, ie_ay, ie_ty)`` from the sampled counterfactuals."""
    rows = np.arange(bundle.n)
    ie_at = (bundle.t_cf[:, 1] - bundle.t_cf[:, 0]).astype(np.float64)
    ie_ay = bundle.y_cf[rows, bundle.t_cf[:, 1], 1] - bundle.y_cf[rows, bundle.t_cf[:, 0], 0]
    ie_ty = bundle.y_cf[rows, 1, bundle.a] - bundle.y_cf[rows, 0, bundle.a]
    return ie_at, ie_ay, ie_ty


def _sensitive_side(params, x, a, n_samples, noise, reencode, ay_mode):
    """pi_T and the A->Y mixture value under do(A=0) and do(A=1); each ``(n, 2)``."""
    n = x.shape[0]
    pt = np.empty((n, 2))
    ya = np.empty((n, 2))
    if not params.variational:
        with no_grad():
            for a_ in (0, 1):
                p = baseline_treat(params, x, a_).data.ravel()
                m1 = baseline_predict(params, x, a_, 1).data.ravel()
                m0 = baseline_predict(params, x, a_, 0).data.ravel()
                pt[:, a_] = p
                ya[:, a_] = p * m1 + (1 - p) * m0
        return pt, ya
    flip_input = isinstance(params, CvaeAParams) or reencode
    z_fact = None if flip_input else posterior_samples(params, x, a, n_samples, noise.child("factual"))
    for a_ in (0, 1):
        z = posterior_samples(params, x, np.full(n, a_), n_samples, noise.child(f"do_a{a_}")) \
            if flip_input else z_fact
        p = _head(params, z, ("t", a_))
        m1 = _head(params, z, ("y", a_, 1))
        m0 = _head(params, z, ("y", a_, 0))
        pt[:, a_] = _avg(p, n_samples)
        if ay_mode == "plugin":
            tbar = pt[:, a_]
            ya[:, a_] = tbar * _avg(m1, n_samples) + (1 - tbar) * _avg(m0, n_samples)
        else:
            ya[:, a_] = _avg(p * m1 + (1 - p) * m0, n_samples)
    return pt, ya


def predict_outcomes(params, x, a, n_samples=10, noise=None) -> np.ndarray:
    """Posterior-mean mu_Y under do(T=0) and do(T=1) at the factual ``a``; ``(n, 2)``."""
    check_finite(params)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    a = np.asarray(a).reshape(-1)
    out = np.empty((x.shape[0], 2))
    if not params.variational:
        with no_grad():
            for t_ in (0, 1):
                out[:, t_] = baseline_predict(params, x, a, t_).data.ravel()
        return out
    noise = noise or NoiseStream(0, "posterior")
    z = posterior_samples(params, x, a, n_samples, noise.child("factual"))
    a_rep = np.tile(a, n_samples)
    for t_ in (0, 1):
        out[:, t_] = _avg(_head(params, z, ("y", a_rep, t_)), n_samples)
    return out


def estimate_effects(params, bundle: DatasetBundle, n_samples=10, noise=None,
                     reencode=False, ay_mode="mixture") -> EffectEstimates:
    """All three individual effects plus the outcome predictions used for policies."""
    if ay_mode not in ("mixture", "plugin"):
        raise ValueError("ay_mode must be 'mixture' or 'plugin'")
    check_finite(params)
    noise = noise or NoiseStream(0, "effects")
    x, a = bundle.x, bundle.a
    y_hat = predict_outcomes(params, x, a, n_samples, noise)
    pt, ya = _sensitive_side(params, x, a, n_samples, noise, reencode, ay_mode)
    at, ay, ty = true_effects(bundle)
    return EffectEstimates(
        ie_at_hat=pt[:, 1] - pt[:, 0], ie_ay_hat=ya[:, 1] - ya[:, 0],
        ie_ty_hat=y_hat[:, 1] - y_hat[:, 0], ie_at_true=at, ie_ay_true=ay, ie_ty_true=ty,
        y_hat=y_hat, n_posterior_samples=n_samples,
    )


def estimate_ie_ty(params, bundle, n_samples=10, noise=None) -> np.ndarray:
    y = predict_outcomes(params, bundle.x, bundle.a, n_samples, noise)
    return y[:, 1] - y[:, 0]


def estimate_ie_at(params, bundle, n_samples=10, noise=None, reencode=False) -> np.ndarray:
    check_finite(params)
    pt, _ = _sensitive_side(params, bundle.x, bundle.a, n_samples,
                            noise or NoiseStream(0, "effects"), reencode, "mixture")
    return pt[:, 1] - pt[:, 0]


def estimate_ie_ay(params, bundle, n_samples=10, noise=None, reencode=False,
                   ay_mode="mixture") -> np.ndarray:
    check_finite(params)
    _, ya = _sensitive_side(params, bundle.x, bundle.a, n_samples,
                            noise or NoiseStream(0, "effects"), reencode, ay_mode)
    return ya[:, 1] - ya[:, 0]


EFFECT_COLUMNS = ("row_id", "ie_at_hat", "ie_ay_hat", "ie_ty_hat", "ie_at_true", "ie_ay_true", "ie_ty_true")


def write_effects_csv(est: EffectEstimates, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EFFECT_COLUMNS)
        for i in range(est.n):
            w.writerow([i] + [format(float(v), ".17g") for v in (
                est.ie_at_hat[i], est.ie_ay_hat[i], est.ie_ty_hat[i],
                est.ie_at_true[i], est.ie_ay_true[i], est.ie_ty_true[i])])


def read_effects_csv(path) -> EffectEstimates:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    col = {k: np.array([float(r[k]) for r in rows]) for k in EFFECT_COLUMNS[1:]}
    return EffectEstimates(**col, y_hat=np.full((len(rows), 2), np.nan))


# ---------------------------------------------------------------- discrete oracle

class ZeroProbabilityEvent(ValueError):
    pass


@dataclass
class DiscreteScm:
    """Finite SCM with the Z, A -> X, T; Z, A, T -> Y factorisation.

    Tables: ``p_z[z]``, ``p_a[a]``, ``p_x[z, a, x]``, ``p_t[z, a, t]``,
    ``p_y[z, a, t, k]`` over outcome values ``y_values[k]``.
    """

    p_z: np.ndarray
    p_a: np.ndarray
    p_x: np.ndarray
    p_t: np.ndarray
    p_y: np.ndarray
    y_values: np.ndarray

    def __post_init__(self):
        for name in ("p_z", "p_a", "p_x", "p_t", "p_y"):
            table = np.asarray(getattr(self, name), dtype=np.float64)
            setattr(self, name, table)
            if np.any(table < 0) or not np.allclose(table.sum(axis=-1), 1.0, atol=1e-12):
                raise ValueError(f"{name} rows must be probability vectors")
        self.y_values = np.asarray(self.y_values, dtype=np.float64)

    @classmethod
    def random(cls, rng, n_z=4, n_x=2, n_y=3):
        def cpt(*shape):
            w = rng.gamma(1.0, size=shape)
            return w / w.sum(axis=-1, keepdims=True)

        return cls(cpt(n_z), cpt(2), cpt(n_z, 2, n_x), cpt(n_z, 2, 2), cpt(n_z, 2, 2, n_y),
                   rng.normal(size=n_y) * 3)


def discrete_do_oracle(scm: DiscreteScm, intervention, x, a=None) -> float:
    """E[Y | do(.)] by adjusting over the posterior of Z.

    ``("T", t)`` with ``(x, a)``: sum_z E[Y | T=t, x, a, z] P(z | x, a).
    ``("A", a')`` with ``x``: sum_z P(z | do(A=a'), x) sum_t P(t | z, a') E[Y | z, a', t].
    """
    var, val = intervention
    ey = scm.p_y @ scm.y_values  # [z, a, t]
    if var == "T":
        if a is None:
            raise ValueError("do(T) needs the conditioning value of A")
        w = scm.p_z * scm.p_a[a] * scm.p_x[:, a, x]
        if w.sum() <= 0:
            raise ZeroProbabilityEvent(f"P(X={x}, A={a}) = 0")
        post = w / w.sum()
        return float(post @ ey[:, a, val])
    if var == "A":
        w = scm.p_z * scm.p_x[:, val, x]
        if w.sum() <= 0:
            raise ZeroProbabilityEvent(f"P(X={x} | do(A={val})) = 0")
        post = w / w.sum()
        return float(post @ (scm.p_t[:, val, :] * ey[:, val, :]).sum(axis=1))
    raise ValueError(f"unknown intervention variable {var!r}")


def truncated_enumeration(scm: DiscreteScm, intervention, x, a=None) -> float:
    """Same quantity by brute force over the mutilated graph's full joint."""
    var, val = intervention
    num = den = 0.0
    n_z, n_x, n_y = len(scm.p_z), scm.p_x.shape[2], len(scm.y_values)
    for z, a_, x_, t, k in itertools.product(range(n_z), (0, 1), range(n_x), (0, 1), range(n_y)):
        if var == "T":
            p = scm.p_z[z] * scm.p_a[a_] * scm.p_x[z, a_, x_] * (t == val) * scm.p_y[z, a_, t, k]
            keep = x_ == x and a_ == a
        else:
            p = scm.p_z[z] * (a_ == val) * scm.p_x[z, a_, x_] * scm.p_t[z, a_, t] * scm.p_y[z, a_, t, k]
            keep = x_ == x
        if keep:
            num += p * scm.y_values[k]
            den += p
    if den <= 0:
        raise ZeroProbabilityEvent("conditioning event has probability 0")
    return num / den


def observational_expectation(scm: DiscreteScm, t, x, a) -> float:
    """E[Y | T=t, X=x, A=a] without intervening."""
    w = scm.p_z * scm.p_a[a] * scm.p_x[:, a, x] * scm.p_t[:, a, t]
    if w.sum() <= 0:
        raise ZeroProbabilityEvent("conditioning event has probability 0")
    return float((w / w.sum()) @ (scm.p_y[:, a, t, :] @ scm.y_values))
