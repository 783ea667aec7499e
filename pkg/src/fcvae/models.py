"""Generative/inference networks for FCVAE and CVAE-A, plus the two MLP baselines.

Every parameter container holds a dict of named :class:`MlpParams` so that
optimisation and checkpointing can treat the models uniformly. Row-wise
arguments ``a`` and ``t`` are 0/1 vectors; gated heads are evaluated only on
the rows routed to them, so unselected heads get exactly zero gradient.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import (
    MlpParams,
    NoiseStream,
    Tensor,
    add,
    as_tensor,
    bernoulli_log_pmf,
    concat,
    elu,
    gaussian_log_pdf,
    gaussian_sample_reparam,
    init_mlp,
    mlp_forward,
    mul,
    scatter_rows,
    sigmoid,
    take_cols,
    take_rows,
    tile_rows,
)

VARIATIONAL_KINDS = ("CVAE-A", "FCVAE-1", "FCVAE-2")
BASELINE_KINDS = ("CFMLP", "CF4MLP")
MODEL_KINDS = BASELINE_KINDS + VARIATIONAL_KINDS
CHECKPOINT_FORMAT = "fcvae-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Architecture:
    d_z: int = 10
    xz_hidden: int = 20
    tar_hidden: int = 100
    tar_rep: int = 20
    y_kind: str = "continuous"
    heteroscedastic: bool = True
    # log sigma_X; 0 means unit variance, 1 is the literal g_X^sigma = 1 reading
    x_log_std: float = 0.0

    def mlp_hidden(self):
        return (self.tar_hidden, self.tar_rep, self.tar_hidden)


@dataclass
class _Params:
    kind: str
    d_x: int
    arch: Architecture
    nets: dict
    y_loc: float = 0.0
    y_scale: float = 1.0

    def parameters(self) -> list:
        out = []
        for name in sorted(self.nets):
            out += self.nets[name].tensors()
        return out

    def set_parameters(self, arrays):
        for t, arr in zip(self.parameters(), arrays):
            t.data = arr

    def bind(self, leaves) -> None:
        """Swap in new leaf Tensors, in :meth:`parameters` order (used by gradient checks)."""
        leaves = list(leaves)
        for name in sorted(self.nets):
            net = self.nets[name]
            for k in range(len(net.weights)):
                net.weights[k], net.biases[k] = leaves.pop(0), leaves.pop(0)
        if leaves:
            raise ValueError(f"{len(leaves)} leaves left over after binding")

    def copy_arrays(self) -> list:
        return [t.data.copy() for t in self.parameters()]

    @property
    def variational(self) -> bool:
        return self.kind in VARIATIONAL_KINDS

    @property
    def n_y_out(self) -> int:
        return 2 if self.arch.y_kind == "continuous" and self.arch.heteroscedastic else 1


@dataclass
class FcvaeParams(_Params):
    pi_a: float = 0.5

    @property
    def encoder_uses_a(self) -> bool:
        return self.kind == "FCVAE-1"


@dataclass
class CvaeAParams(_Params):
    pi_a: float = 0.5


@dataclass
class MlpBaselineParams(_Params):
    pass


def _col(v, n=None):
    v = np.asarray(v, dtype=np.float64).reshape(-1, 1)
    if n is not None and v.shape[0] == 1 and n > 1:
        v = np.repeat(v, n, axis=0)
    return v


def _codes(*bits):
    code = np.zeros(np.asarray(bits[0]).reshape(-1).shape[0], dtype=np.intp)
    for k, b in enumerate(bits):
        code += (np.asarray(b).reshape(-1).astype(np.intp)) << k
    return code


def route(nets: dict, inputs, codes) -> Tensor:
    """Evaluate ``nets[code]`` on the rows carrying that code and reassemble."""
    inputs = as_tensor(inputs)
    codes = np.asarray(codes, dtype=np.intp)
    n = inputs.shape[0]
    present = np.unique(codes)
    if present.size == 1:
        return mlp_forward(nets[int(present[0])], inputs)
    parts, idxs = [], []
    for c in present:
        idx = np.flatnonzero(codes == c)
        parts.append(mlp_forward(nets[int(c)], take_rows(inputs, idx, unique=True)))
        idxs.append(idx)
    return scatter_rows(parts, idxs, n)


def _rep(trunk: MlpParams, z) -> Tensor:
    return elu(mlp_forward(trunk, as_tensor(z)))


# ---------------------------------------------------------------- construction

def build_model(kind: str, d_x: int, noise: NoiseStream, arch: Architecture | None = None,
                a=None, y=None, zero=False) -> _Params:
    """Initialise parameters for ``kind``; ``a``/``y`` fix pi_A and the outcome scale."""
    arch = arch or Architecture()
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    y_loc, y_scale = 0.0, 1.0
    if y is not None and arch.y_kind == "continuous":
        y = np.asarray(y, dtype=np.float64)
        y_loc, y_scale = float(y.mean()), float(y.std()) or 1.0
    pi_a = float(np.mean(a)) if a is not None else 0.5
    dz, hx, th, tr = arch.d_z, arch.xz_hidden, arch.tar_hidden, arch.tar_rep
    k_y = 2 if arch.y_kind == "continuous" and arch.heteroscedastic else 1
    specs = {}
    if kind in ("FCVAE-1", "FCVAE-2"):
        enc_in = d_x + (1 if kind == "FCVAE-1" else 0)
        specs["enc_mu"] = [enc_in, hx, dz]
        specs["enc_sigma"] = [enc_in, hx, dz]
        specs["dec_x"] = [dz + (1 if kind == "FCVAE-1" else 0), hx, d_x]
        specs["t_trunk"] = [dz, th, tr]
        for a_ in (0, 1):
            specs[f"t_head_a{a_}"] = [tr, th, 1]
        specs["y_trunk"] = [dz, th, tr]
        for t_ in (0, 1):
            for a_ in (0, 1):
                specs[f"y_head_t{t_}a{a_}"] = [tr, th, k_y]
    elif kind == "CVAE-A":
        specs["enc_mu"] = [d_x + 1, hx, dz]
        specs["enc_sigma"] = [d_x + 1, hx, dz]
        specs["dec_x"] = [dz, hx, d_x + 1]
        specs["t_net"] = [dz, *arch.mlp_hidden(), 1]
        specs["y_trunk"] = [dz, th, tr]
        for t_ in (0, 1):
            specs[f"y_head_t{t_}"] = [tr, th, k_y]
    elif kind == "CFMLP":
        specs["y_net"] = [d_x + 2, *arch.mlp_hidden(), 1]
        specs["t_net"] = [d_x + 1, *arch.mlp_hidden(), 1]
    else:
        for t_ in (0, 1):
            for a_ in (0, 1):
                specs[f"y_net_t{t_}a{a_}"] = [d_x, *arch.mlp_hidden(), 1]
        for a_ in (0, 1):
            specs[f"t_net_a{a_}"] = [d_x, *arch.mlp_hidden(), 1]
    nets = {name: init_mlp(sizes, noise.child(name), zero=zero) for name, sizes in specs.items()}
    common = dict(kind=kind, d_x=d_x, arch=arch, nets=nets, y_loc=y_loc, y_scale=y_scale)
    if kind in ("FCVAE-1", "FCVAE-2"):
        return FcvaeParams(**common, pi_a=pi_a)
    if kind == "CVAE-A":
        return CvaeAParams(**common, pi_a=pi_a)
    return MlpBaselineParams(**common)


def _y_nets(params, prefix):
    return {
        int(_codes([t_], [a_])[0]): params.nets[f"{prefix}_t{t_}a{a_}"]
        for t_ in (0, 1) for a_ in (0, 1)
    }


# ---------------------------------------------------------------- variational parts

def infer_posterior(params, x, a):
    """Return ``(mean, log_std)`` of q(Z | x[, a]) as Tensors, one row per example."""
    x = as_tensor(np.atleast_2d(x) if not isinstance(x, Tensor) else x)
    if x.shape[1] != params.d_x:
        raise ValueError(f"x has {x.shape[1]} columns, model expects {params.d_x}")
    if isinstance(params, CvaeAParams) or (isinstance(params, FcvaeParams) and params.encoder_uses_a):
        inp = concat([x, _col(a, x.shape[0])])
    elif isinstance(params, FcvaeParams):
        inp = x
    else:
        raise TypeError(f"{params.kind} has no encoder")
    return mlp_forward(params.nets["enc_mu"], inp), mlp_forward(params.nets["enc_sigma"], inp)


def decode_x(params, z, a=None):
    """Mean of p(X | z[, a]) and its log-std (a constant). CVAE-A's last column is the logit of A."""
    z = as_tensor(z)
    if isinstance(params, FcvaeParams) and params.encoder_uses_a:
        z = concat([z, _col(a, z.shape[0])])
    return mlp_forward(params.nets["dec_x"], z), params.arch.x_log_std


def decode_t(params, z, a) -> Tensor:
    """pi_T as an ``(m, 1)`` Tensor; FCVAE selects the head by ``a``, CVAE-A ignores it."""
    z = as_tensor(z)
    if isinstance(params, CvaeAParams):
        return sigmoid(mlp_forward(params.nets["t_net"], z))
    a = np.asarray(a).reshape(-1)
    if a.size == 1 and z.shape[0] > 1:
        a = np.repeat(a, z.shape[0])
    rep = _rep(params.nets["t_trunk"], z)
    heads = {0: params.nets["t_head_a0"], 1: params.nets["t_head_a1"]}
    return sigmoid(route(heads, rep, a.astype(np.intp)))


def decode_y(params, z, a, t):
    """Outcome distribution at (z, a, t): ``(mean, log_std)``; log_std is None for binary Y.

    For binary Y the mean is pi_Y. CVAE-A gates on t only.
    """
    z = as_tensor(z)
    m = z.shape[0]
    t = np.asarray(t).reshape(-1)
    if t.size == 1 and m > 1:
        t = np.repeat(t, m)
    rep = _rep(params.nets["y_trunk"], z)
    if isinstance(params, CvaeAParams):
        heads = {0: params.nets["y_head_t0"], 1: params.nets["y_head_t1"]}
        raw = route(heads, rep, t.astype(np.intp))
    else:
        a = np.asarray(a).reshape(-1)
        if a.size == 1 and m > 1:
            a = np.repeat(a, m)
        raw = route(_y_nets(params, "y_head"), rep, _codes(t, a))
    return _y_link(params, raw)


def _y_link(params, raw):
    if params.arch.y_kind == "binary":
        return sigmoid(raw), None
    if raw.shape[1] == 2:
        mu = take_cols(raw, 0, 1)
        log_std = add(take_cols(raw, 1, 2), math.log(params.y_scale))
    else:
        mu, log_std = raw, math.log(params.y_scale)
    return add(mul(mu, params.y_scale), params.y_loc), log_std


# ---------------------------------------------------------------- ELBO

@dataclass
class ElboTerms:
    """Per-example ELBO pieces, each averaged over posterior samples."""

    log_px: np.ndarray
    log_pt: np.ndarray
    log_py: np.ndarray
    log_pz: np.ndarray
    neg_log_q: np.ndarray
    total: np.ndarray
    objective: Tensor = field(repr=False)


def elbo(params, x, a, t, y, n_samples=10, noise=None) -> ElboTerms:
    """Monte-Carlo ELBO with reparameterised posterior samples.

    ``noise`` is a NoiseStream or a frozen ``(n_samples * n, d_z)`` array of
    standard normals. ``objective`` is the mean per-example ELBO as a
    differentiable scalar.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    mean, log_std = infer_posterior(params, x, a)
    S = n_samples
    rep_idx = np.tile(np.arange(n), S)
    mean_s, log_std_s = tile_rows(mean, S), tile_rows(log_std, S)
    if noise is None:
        noise = NoiseStream(0, "elbo")
    u = noise.normal((S * n, params.arch.d_z)) if isinstance(noise, NoiseStream) else np.asarray(noise)
    z = gaussian_sample_reparam(mean_s, log_std_s, u)
    xs, as_, ts, ys = x[rep_idx], a[rep_idx], t[rep_idx], y[rep_idx]

    x_mean, x_log_std = decode_x(params, z, as_)
    if isinstance(params, CvaeAParams):
        lp_x = gaussian_log_pdf(xs, take_cols(x_mean, 0, params.d_x), x_log_std)
        a_logit = take_cols(x_mean, params.d_x, params.d_x + 1)
        lp_x = add(lp_x, bernoulli_log_pmf(_col(as_), sigmoid(a_logit)))
    else:
        lp_x = gaussian_log_pdf(xs, x_mean, x_log_std)
    lp_t = bernoulli_log_pmf(_col(ts), decode_t(params, z, as_))
    y_mean, y_log_std = decode_y(params, z, as_, ts)
    if params.arch.y_kind == "binary":
        lp_y = bernoulli_log_pmf(_col(ys), y_mean)
    else:
        lp_y = gaussian_log_pdf(_col(ys), y_mean, y_log_std)
    lp_z = gaussian_log_pdf(z, 0.0, 0.0)
    lq = gaussian_log_pdf(z, mean_s, log_std_s)
    total = add(add(add(lp_x, lp_t), add(lp_y, lp_z)), mul(lq, -1.0))

    def per_example(v):
        return v.data.reshape(S, n).mean(axis=0)

    return ElboTerms(
        log_px=per_example(lp_x), log_pt=per_example(lp_t), log_py=per_example(lp_y),
        log_pz=per_example(lp_z), neg_log_q=-per_example(lq), total=per_example(total),
        objective=mul(total.sum(), 1.0 / (S * n)),
    )


# ---------------------------------------------------------------- baselines

def cfmlp_predict(params: MlpBaselineParams, x, a, t) -> Tensor:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    inp = np.hstack([x, _col(a, n), _col(t, n)])
    raw = mlp_forward(params.nets["y_net"], Tensor(inp))
    return _baseline_link(params, raw)


def cfmlp_treat(params: MlpBaselineParams, x, a) -> Tensor:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    inp = np.hstack([x, _col(a, x.shape[0])])
    return sigmoid(mlp_forward(params.nets["t_net"], Tensor(inp)))


def cf4mlp_predict(params: MlpBaselineParams, x, a, t) -> Tensor:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    a = np.broadcast_to(np.asarray(a).reshape(-1), (n,))
    t = np.broadcast_to(np.asarray(t).reshape(-1), (n,))
    raw = route(_y_nets(params, "y_net"), Tensor(x), _codes(t, a))
    return _baseline_link(params, raw)


def cf4mlp_treat(params: MlpBaselineParams, x, a) -> Tensor:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    a = np.broadcast_to(np.asarray(a).reshape(-1), (n,)).astype(np.intp)
    heads = {0: params.nets["t_net_a0"], 1: params.nets["t_net_a1"]}
    return sigmoid(route(heads, Tensor(x), a))


def _baseline_link(params, raw):
    if params.arch.y_kind == "binary":
        return sigmoid(raw)
    return add(mul(raw, params.y_scale), params.y_loc)


def baseline_predict(params, x, a, t) -> Tensor:
    fn = cfmlp_predict if params.kind == "CFMLP" else cf4mlp_predict
    return fn(params, x, a, t)


def baseline_treat(params, x, a) -> Tensor:
    fn = cfmlp_treat if params.kind == "CFMLP" else cf4mlp_treat
    return fn(params, x, a)


def baseline_loss(params, x, a, t, y) -> Tensor:
    """Scaled squared error on factual outcomes plus treatment log-loss (mean per row)."""
    n = np.atleast_2d(x).shape[0]
    y_hat = baseline_predict(params, x, a, t)
    if params.arch.y_kind == "binary":
        y_term = mul(bernoulli_log_pmf(_col(y), y_hat), -1.0)
    else:
        resid = mul(add(y_hat, -_col(y)), 1.0 / params.y_scale)
        y_term = mul(resid, resid)
    t_term = mul(bernoulli_log_pmf(_col(t), baseline_treat(params, x, a)), -1.0)
    return mul(add(y_term, t_term).sum(), 1.0 / n)


def training_loss(params, x, a, t, y, n_samples=10, noise=None) -> Tensor:
    """Scalar to minimise: negative mean ELBO, or the baseline loss."""
    if params.variational:
        return mul(elbo(params, x, a, t, y, n_samples, noise).objective, -1.0)
    return baseline_loss(params, x, a, t, y)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(params: _Params, path) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": params.kind,
        "d_x": params.d_x,
        "architecture": vars(params.arch),
        "constants": {"y_loc": params.y_loc, "y_scale": params.y_scale,
                      "pi_a": getattr(params, "pi_a", None)},
        "networks": {
            name: {
                "sizes": list(net.sizes),
                "weights": [w.data.ravel().tolist() for w in net.weights],
                "biases": [b.data.ravel().tolist() for b in net.biases],
            }
            for name, net in sorted(params.nets.items())
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> _Params:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a model checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    nets = {}
    for name, spec in doc["networks"].items():
        sizes = spec["sizes"]
        ws = [Tensor(np.array(w, dtype=np.float64).reshape(i, o), requires_grad=True)
              for w, i, o in zip(spec["weights"], sizes[:-1], sizes[1:])]
        bs = [Tensor(np.array(b, dtype=np.float64).reshape(1, o), requires_grad=True)
              for b, o in zip(spec["biases"], sizes[1:])]
        nets[name] = MlpParams(tuple(sizes), ws, bs)
    kind = doc["kind"]
    const = doc["constants"]
    common = dict(kind=kind, d_x=doc["d_x"], arch=Architecture(**doc["architecture"]), nets=nets,
                  y_loc=const["y_loc"], y_scale=const["y_scale"])
    if kind in ("FCVAE-1", "FCVAE-2"):
        return FcvaeParams(**common, pi_a=const["pi_a"])
    if kind == "CVAE-A":
        return CvaeAParams(**common, pi_a=const["pi_a"])
    return MlpBaselineParams(**common)
