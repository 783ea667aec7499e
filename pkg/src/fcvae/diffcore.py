"""Small reverse-mode autodiff over numpy arrays.

Everything here is float64 and 2-D at most. A :class:`Tensor` records the
operation that produced it; :meth:`Tensor.backward` walks the graph in reverse
topological order. Only the handful of operations the models need are
provided.
"""
from __future__ import annotations

import contextlib
import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)
PROB_FLOOR = 1e-6
_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        data = np.asarray(data)
        self.data = data if data.dtype.kind == "f" else data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward):
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T if a.requires_grad else None,
                            a.data.T @ g if b.requires_grad else None))


def linear(x, w, b) -> Tensor:
    """``x @ w + b`` with ``b`` a ``(1, out)`` row."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    out = x.data @ w.data
    out += b.data

    def back(g):
        return (g @ w.data.T if x.requires_grad else None,
                x.data.T @ g if w.requires_grad else None,
                g.sum(axis=0, keepdims=True) if b.requires_grad else None)

    return _node(out, (x, w, b), back)


def texp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def tlog(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=axis is not None)

    def back(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out if axis is not None else np.asarray(out), (a,), back)


def tmean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def clamp(a, lo, hi) -> Tensor:
    """Clamp with zero gradient outside ``[lo, hi]``."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def concat(parts: Sequence, axis=1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def back(g):
        if axis == 1:
            return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _node(out, parts, back)


def take_rows(a, idx, unique=False) -> Tensor:
    """Row gather; ``unique=True`` promises no repeated indices (faster backward)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)

    def back(g):
        full = np.zeros_like(a.data)
        if unique:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _node(a.data[idx], (a,), back)


def take_cols(a, lo, hi) -> Tensor:
    a = as_tensor(a)

    def back(g):
        full = np.zeros_like(a.data)
        full[:, lo:hi] = g
        return (full,)

    return _node(a.data[:, lo:hi], (a,), back)


def tile_rows(a, reps: int) -> Tensor:
    """Stack ``reps`` copies of ``a`` vertically."""
    a = as_tensor(a)
    n = a.shape[0]
    return _node(np.tile(a.data, (reps, 1)), (a,),
                 lambda g: (g.reshape(reps, n, -1).sum(axis=0),))


def scatter_rows(parts: Sequence, indices: Sequence, n_rows: int) -> Tensor:
    """Assemble row-blocks into an ``n_rows`` matrix; rows of ``parts[k]`` land at ``indices[k]``.

    Row sets must be disjoint and cover all rows. A part for an empty index set
    contributes nothing and receives no gradient.
    """
    parts = [as_tensor(p) for p in parts]
    idxs = [np.asarray(i, dtype=np.intp) for i in indices]
    cols = parts[0].shape[1]
    out = np.empty((n_rows, cols), dtype=np.result_type(*[p.data for p in parts]))
    for p, i in zip(parts, idxs):
        out[i] = p.data
    return _node(out, parts, lambda g: tuple(g[i] for i in idxs))


def elu(x):
    """ELU with unit alpha: ``x`` for ``x >= 0``, else ``exp(x) - 1``."""
    if not isinstance(x, Tensor):
        v = np.asarray(x, dtype=np.float64)
        out = np.where(v >= 0, v, np.expm1(np.minimum(v, 0.0)))
        return float(out) if out.ndim == 0 else out
    # expm1(x) > x for x < 0, so the max picks the right branch everywhere
    out = np.minimum(x.data, 0.0)
    np.expm1(out, out=out)
    np.maximum(x.data, out, out=out)

    def back(g):
        d = np.minimum(out, 0.0)
        d += 1.0
        d *= g
        return (d,)

    return _node(out, (x,), back)


def _stable_sigmoid(v):
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    if not isinstance(x, Tensor):
        out = _stable_sigmoid(np.asarray(x, dtype=np.float64))
        return float(out) if out.ndim == 0 else out
    s = _stable_sigmoid(x.data)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),))


# ---------------------------------------------------------------- densities

def gaussian_log_pdf(x, mean, log_std):
    """Diagonal Gaussian log density, summed over the last axis."""
    plain = not any(isinstance(v, Tensor) for v in (x, mean, log_std))
    z = mul(sub(x, mean), texp(mul(log_std, -1.0)))
    terms = sub(mul(square(z), -0.5), add(log_std, 0.5 * LOG_2PI))
    out = terms if terms.data.ndim == 0 else tsum(terms, axis=terms.data.ndim - 1)
    if plain:
        return float(out.data.sum()) if terms.data.ndim <= 1 else out.data.ravel()
    return out


def bernoulli_log_pmf(value, p):
    """``value*log p + (1-value)*log(1-p)`` with ``p`` floored to ``[1e-6, 1-1e-6]``."""
    plain = not isinstance(p, Tensor)
    value = np.asarray(value.data if isinstance(value, Tensor) else value, dtype=np.float64)
    pc = clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    out = add(mul(tlog(pc), value), mul(tlog(sub(1.0, pc)), 1.0 - value))
    if plain:
        return float(out.data) if out.data.ndim == 0 else out.data
    return out


def gaussian_kl_to_standard(mean, log_std):
    """Closed-form KL(N(mean, exp(log_std)^2) || N(0, I)), summed over the last axis."""
    mean = np.asarray(mean, dtype=np.float64)
    log_std = np.asarray(log_std, dtype=np.float64)
    terms = 0.5 * (mean ** 2 + np.expm1(2.0 * log_std)) - log_std
    # each term is >= 0 analytically; drop round-off below zero
    terms = np.maximum(terms, 0.0)
    out = terms.sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------- noise

@dataclass(frozen=True)
class NoiseStream:
    """Counter-based random stream: ``(seed, label, counter)`` fixes every draw.

    Each coordinate hashes to its own Philox key, so streams with different
    labels or counters never share state.
    """

    seed: int
    label: str = "root"
    counter: int = 0

    def child(self, label: str) -> "NoiseStream":
        # the parent's counter is folded into the path so siblings at different counters differ
        base = self.label if self.counter == 0 else f"{self.label}#{self.counter}"
        return NoiseStream(self.seed, f"{base}/{label}", 0)

    def at(self, counter: int) -> "NoiseStream":
        return replace(self, counter=int(counter))

    def generator(self) -> np.random.Generator:
        digest = hashlib.sha256(f"{self.seed}|{self.label}|{self.counter}".encode()).digest()
        key = np.frombuffer(digest[:16], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def normal(self, shape) -> np.ndarray:
        return self.generator().standard_normal(shape)

    def uniform(self, shape) -> np.ndarray:
        return self.generator().random(shape)


def gaussian_sample_reparam(mean, log_std, noise):
    """Draw ``mean + exp(log_std) * u`` with ``u ~ N(0, I)``.

    ``noise`` is a :class:`NoiseStream` or a pre-drawn array of standard
    normals (frozen noise, e.g. for gradient checks).
    """
    shape = mean.shape if isinstance(mean, Tensor) else np.shape(mean)
    u = noise.normal(shape) if isinstance(noise, NoiseStream) else np.asarray(noise)
    if isinstance(mean, Tensor) or isinstance(log_std, Tensor):
        return add(mean, mul(texp(log_std), u))
    return np.asarray(mean) + np.exp(np.asarray(log_std)) * u


# ---------------------------------------------------------------- networks

@dataclass
class MlpParams:
    sizes: tuple
    weights: list
    biases: list

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("layer count does not match sizes")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[k], self.sizes[k + 1]) or b.shape != (1, self.sizes[k + 1]):
                raise ValueError(f"layer {k} has shape {w.shape}/{b.shape}, expected "
                                 f"({self.sizes[k]}, {self.sizes[k + 1]})")

    @property
    def n_params(self) -> int:
        return sum((i + 1) * o for i, o in zip(self.sizes[:-1], self.sizes[1:]))

    def tensors(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def init_mlp(sizes, noise: NoiseStream, zero=False) -> MlpParams:
    """Zero biases, weights uniform in +-sqrt(6/(fan_in+fan_out))."""
    weights, biases = [], []
    for k, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
        if zero:
            w = np.zeros((fi, fo))
        else:
            lim = math.sqrt(6.0 / (fi + fo))
            w = noise.at(k).generator().uniform(-lim, lim, size=(fi, fo))
        weights.append(Tensor(w, requires_grad=True))
        biases.append(Tensor(np.zeros((1, fo)), requires_grad=True))
    return MlpParams(tuple(sizes), weights, biases)


def mlp_forward(params: MlpParams, x):
    """Affine + ELU on hidden layers, plain affine output."""
    plain = not isinstance(x, Tensor)
    h = as_tensor(np.atleast_2d(x) if plain else x)
    if h.shape[1] != params.sizes[0]:
        raise ValueError(f"input has {h.shape[1]} columns, network expects {params.sizes[0]}")
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = linear(h, w, b)
        if k < last:
            h = elu(h)
    return h.data if plain else h


# ---------------------------------------------------------------- optimization

@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **kw) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **kw)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter, gradient and state lists differ in length")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = [], [], []
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, replace(state, step=t, m=new_m, v=new_v)


class NondeterministicLoss(ValueError):
    pass


def grad_check(loss_fn: Callable, params, tolerance=1e-4, step=1e-5, max_entries=None,
               seed=0, fd_dtype=np.longdouble) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``loss_fn`` maps a list of leaf Tensors to a scalar Tensor and must be
    deterministic. Analytic gradients are taken in float64; the finite
    differences are evaluated in ``fd_dtype`` (extended precision by default)
    so their round-off stays well below ``tolerance`` for small gradients.
    ``max_entries`` limits the coordinates probed per array, chosen by ``seed``.
    """
    base = [np.array(p, dtype=np.float64) for p in params]

    def evaluate(arrays, track=False):
        leaves = [Tensor(a.copy(), requires_grad=track) for a in arrays]
        return loss_fn(leaves), leaves

    out, leaves = evaluate(base, track=True)
    again, _ = evaluate(base)
    if float(out.data) != float(again.data):
        raise NondeterministicLoss("loss differs between identical evaluations; freeze the noise")
    out.backward()
    analytic = [lf.grad if lf.grad is not None else np.zeros_like(lf.data) for lf in leaves]

    probe = [a.astype(fd_dtype) for a in base]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, arr in enumerate(probe):
        flat_idx = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            flat_idx = rng.choice(arr.size, size=max_entries, replace=False)
        for j in flat_idx:
            pos = np.unravel_index(j, arr.shape)
            old = arr[pos]
            arr[pos] = old + step
            fp = evaluate(probe)[0].data
            arr[pos] = old - step
            fm = evaluate(probe)[0].data
            arr[pos] = old
            numeric = float((fp - fm) / (2 * step))
            a = analytic[k][pos]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
