"""A small reverse-mode autodiff engine over float64 numpy arrays, plus the layers
the generator, actor and critic are built from."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Optional, Sequence

import numpy as np

from .exceptions import InputError

_node_counter = 0


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("value", "parents", "backward_fn", "grad", "requires_grad", "order", "name")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False, name=None):
        global _node_counter
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.backward_fn = backward_fn
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        _node_counter += 1
        self.order = _node_counter
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}{', grad' if self.requires_grad else ''})"

    @property
    def shape(self):
        return self.value.shape

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        other = as_tensor(other)
        return mul(self, power(other, -1.0))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        n = self.value.size if axis is None else self.value.shape[axis]
        return tsum(self, axis) * (1.0 / n)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents, backward_fn):
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(value)
    return Tensor(value, parents, backward_fn)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.value + b.value, (a, b), bw)


def neg(a) -> Tensor:
    return _make(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _make(a.value * b.value, (a, b), bw)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.value**exponent, (a,), lambda g: (g * exponent * a.value ** (exponent - 1),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = g @ np.swapaxes(b.value, -1, -2) if b.value.ndim > 1 else np.outer(g, b.value)
        if a.value.ndim > 1:
            gb = np.swapaxes(a.value, -1, -2) @ g
        else:
            gb = np.outer(a.value, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.value @ b.value, (a, b), bw)


def tanh(a) -> Tensor:
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out**2),))


def sigmoid(a) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a) -> Tensor:
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def log(a, floor: float = -30.0) -> Tensor:
    """Natural log, clipped below at ``floor`` (gradient zero in the clipped region)."""
    with np.errstate(divide="ignore"):
        raw = np.log(a.value)
    clipped = raw < floor
    out = np.where(clipped, floor, raw)
    return _make(out, (a,), lambda g: (np.where(clipped, 0.0, g / np.where(clipped, 1.0, a.value)),))


def tsum(a, axis=None) -> Tensor:
    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(a.value.sum(axis=axis), (a,), bw)


def index(a, idx) -> Tensor:
    def bw(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.value[idx], (a,), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.value for t in tensors], axis=axis), tensors, bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.value <= b.value

    def bw(g):
        return _unbroadcast(np.where(pick_a, g, 0.0), a.shape), _unbroadcast(np.where(pick_a, 0.0, g), b.shape)

    return _make(np.minimum(a.value, b.value), (a, b), bw)


def clip(a, lo: float, hi: float) -> Tensor:
    inside = (a.value >= lo) & (a.value <= hi)
    return _make(np.clip(a.value, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),))


def log_softmax(logits, axis: int = -1) -> Tensor:
    x = logits.value
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _make(out, (logits,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def softmax(logits, axis: int = -1) -> Tensor:
    return exp(log_softmax(logits, axis))


def smooth_l1(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    small = np.abs(v) <= 1.0
    out = np.where(small, 0.5 * v * v, np.abs(v) - 0.5)
    return _make(out, (x,), lambda g: (g * np.where(small, v, np.sign(v)),))


def smooth_l1_value(x: float) -> float:
    return float(smooth_l1(Tensor(x)).value)


@dataclass
class BackwardStats:
    visits: int = 0


last_backward = BackwardStats()


def backward(loss: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> Dict[int, np.ndarray]:
    """Reverse-mode pass from a scalar ``loss``.

    Gradients are accumulated on every node's ``.grad``; the return value maps
    ``id(leaf)`` to its gradient for the requested leaves (all leaves if None).
    """
    if loss.value.size != 1:
        raise InputError("backward needs a scalar root")
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    for node in topo:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    visits = 0
    for node in reversed(topo):
        visits += 1
        if node.backward_fn is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.backward_fn(node.grad)):
            if not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
    last_backward.visits = visits
    leaves = wrt if wrt is not None else [n for n in topo if n.backward_fn is None]
    return {id(l): (np.zeros_like(l.value) if l.grad is None else l.grad) for l in leaves}


# ---------------------------------------------------------------------------
# parameters


class ParamSet:
    """Ordered mapping from names to float64 arrays."""

    def __init__(self, arrays: Optional[Dict[str, np.ndarray]] = None):
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in (arrays or {}).items()}

    def __getitem__(self, key):
        return self.arrays[key]

    def __setitem__(self, key, value):
        self.arrays[key] = np.asarray(value, dtype=np.float64)

    def __contains__(self, key):
        return key in self.arrays

    def keys(self):
        return self.arrays.keys()

    def items(self):
        return self.arrays.items()

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.arrays.items()})

    def leaves(self) -> Dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in self.arrays.items()}

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()]) if self.arrays else np.zeros(0)

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))

    def to_checkpoint(self) -> str:
        manifest, values, offset = [], [], 0
        for k, v in self.arrays.items():
            manifest.append({"name": k, "shape": list(v.shape), "offset": offset})
            values.extend(v.ravel().tolist())
            offset += v.size
        return json.dumps({"manifest": manifest, "values": values})

    @classmethod
    def from_checkpoint(cls, text: str) -> "ParamSet":
        doc = json.loads(text)
        flat = np.asarray(doc["values"], dtype=np.float64)
        out = {}
        for entry in doc["manifest"]:
            size = int(np.prod(entry["shape"])) if entry["shape"] else 1
            out[entry["name"]] = flat[entry["offset"] : entry["offset"] + size].reshape(entry["shape"])
        return cls(out)


def grads_by_name(leaves: Dict[str, Tensor], grads: Dict[int, np.ndarray]) -> Dict[str, np.ndarray]:
    return {k: grads.get(id(t), np.zeros_like(t.value)) for k, t in leaves.items()}


def value_and_grad(fn: Callable[[Dict[str, Tensor]], Tensor], params: ParamSet):
    leaves = params.leaves()
    loss = fn(leaves)
    grads = backward(loss, leaves.values())
    return float(loss.value), grads_by_name(leaves, grads)


def _glorot(rng, n_in, n_out):
    lim = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-lim, lim, size=(n_in, n_out))


def init_linear(rng, n_in: int, n_out: int, prefix: str, scale: float = 1.0) -> Dict[str, np.ndarray]:
    return {f"{prefix}.W": scale * _glorot(rng, n_in, n_out), f"{prefix}.b": np.zeros(n_out)}


def linear(p: Dict[str, Tensor], prefix: str, x) -> Tensor:
    return matmul(x, p[f"{prefix}.W"]) + p[f"{prefix}.b"]


def init_mlp(rng, sizes: Sequence[int], prefix: str, out_scale: float = 1.0) -> Dict[str, np.ndarray]:
    out = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        scale = out_scale if i == len(sizes) - 2 else 1.0
        out.update(init_linear(rng, a, b, f"{prefix}.{i}", scale))
    return out


def mlp(p: Dict[str, Tensor], prefix: str, x, n_layers: int) -> Tensor:
    """tanh hidden activations, linear output."""
    h = as_tensor(x)
    for i in range(n_layers):
        h = linear(p, f"{prefix}.{i}", h)
        if i < n_layers - 1:
            h = tanh(h)
    return h


# ---------------------------------------------------------------------------
# GRU


def init_gru(rng, input_dim: int, hidden_dim: int, prefix: str = "gru") -> Dict[str, np.ndarray]:
    out = {}
    for gate in ("u", "r", "c"):
        out[f"{prefix}.W{gate}"] = _glorot(rng, input_dim, hidden_dim)
        out[f"{prefix}.U{gate}"] = _glorot(rng, hidden_dim, hidden_dim)
        out[f"{prefix}.b{gate}"] = np.zeros(hidden_dim)
    return out


GRU_KEYS = ("Wu", "Uu", "bu", "Wr", "Ur", "br", "Wc", "Uc", "bc")


def _gru_forward(w, z, x):
    def sig(v):
        return 0.5 * (1.0 + np.tanh(0.5 * v))

    u = sig(x @ w["Wu"] + z @ w["Uu"] + w["bu"])
    r = sig(x @ w["Wr"] + z @ w["Ur"] + w["br"])
    c = np.tanh(x @ w["Wc"] + (r * z) @ w["Uc"] + w["bc"])
    return z + u * (c - z), (u, r, c)


def gru_step(p: Dict[str, Tensor], z_prev, x, prefix: str = "gru") -> Tensor:
    """Cho-style cell: ``z' = (1 - u) * z + u * c`` with update gate ``u``,
    reset gate ``r`` and candidate ``c = tanh(W_c x + U_c (r * z) + b_c)``.

    One tape node per step; the backward pass is written out by hand."""
    z_prev, x = as_tensor(z_prev), as_tensor(x)
    ws = [as_tensor(p[f"{prefix}.{k}"]) for k in GRU_KEYS]
    w = {k: t.value for k, t in zip(GRU_KEYS, ws)}
    z, xv = z_prev.value, x.value
    out, (u, r, c) = _gru_forward(w, z, xv)

    def bw(g):
        z2 = np.atleast_2d(z)
        x2 = np.atleast_2d(xv)
        g2, u2, r2, c2 = (np.atleast_2d(v) for v in (g, u, r, c))
        da_c = g2 * u2 * (1.0 - c2 * c2)
        da_u = g2 * (c2 - z2) * u2 * (1.0 - u2)
        d_rz = da_c @ w["Uc"].T
        da_r = d_rz * z2 * r2 * (1.0 - r2)
        dz = g2 * (1.0 - u2) + d_rz * r2 + da_u @ w["Uu"].T + da_r @ w["Ur"].T
        dx = da_u @ w["Wu"].T + da_r @ w["Wr"].T + da_c @ w["Wc"].T
        grads = {
            "Wu": x2.T @ da_u, "Uu": z2.T @ da_u, "bu": da_u.sum(axis=0),
            "Wr": x2.T @ da_r, "Ur": z2.T @ da_r, "br": da_r.sum(axis=0),
            "Wc": x2.T @ da_c, "Uc": (r2 * z2).T @ da_c, "bc": da_c.sum(axis=0),
        }
        return (_unbroadcast(dz, z.shape), _unbroadcast(dx, xv.shape)) + tuple(grads[k] for k in GRU_KEYS)

    return _make(out, (z_prev, x, *ws), bw)


def gru_step_np(p: Dict[str, np.ndarray], z_prev: np.ndarray, x: np.ndarray, prefix: str = "gru") -> np.ndarray:
    """Forward-only GRU step on raw arrays, bit-identical to :func:`gru_step`."""
    return _gru_forward({k: p[f"{prefix}.{k}"] for k in GRU_KEYS}, z_prev, x)[0]


# ---------------------------------------------------------------------------
# heads


def softmax_head(p: Dict[str, Tensor], prefix: str, features, action_onehot) -> Tensor:
    """Log-probabilities of the next state given (feature, action)."""
    return log_softmax(linear(p, prefix, concat([as_tensor(features), as_tensor(action_onehot)])))


def gaussian_head(p: Dict[str, Tensor], prefix: str, features, action_onehot, log_std: float = 0.0):
    return linear(p, prefix, concat([as_tensor(features), as_tensor(action_onehot)])), log_std


def gaussian_log_prob(mean: Tensor, log_std, x) -> Tensor:
    """Diagonal Gaussian log density summed over the last axis."""
    log_std = as_tensor(log_std)
    var = exp(log_std * 2.0)
    diff = as_tensor(x) - mean
    per = (diff * diff) / var * -0.5 - log_std - 0.5 * math.log(2 * math.pi)
    return tsum(per, axis=-1) if mean.value.ndim > 1 else tsum(per)


def one_hot(idx, n: int) -> np.ndarray:
    return np.eye(n)[np.asarray(idx, dtype=int)]


# ---------------------------------------------------------------------------
# optimizers


class NonFiniteGradient(ValueError):
    pass


def _check_finite(grads: Dict[str, np.ndarray]) -> None:
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {k}")


class Sgd:
    def step(self, params: ParamSet, grads: Dict[str, np.ndarray], step_size: float) -> ParamSet:
        _check_finite(grads)
        out = params.copy()
        for k, g in grads.items():
            out[k] = out[k] - step_size * g
        return out


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: ParamSet, grads: Dict[str, np.ndarray], step_size: float) -> ParamSet:
        _check_finite(grads)
        self.t += 1
        out = params.copy()
        for k, g in grads.items():
            m = self.beta1 * self.m.get(k, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(k, 0.0) + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            m_hat = m / (1 - self.beta1**self.t)
            v_hat = v / (1 - self.beta2**self.t)
            out[k] = out[k] - step_size * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


def make_optimizer(kind: str):
    if kind == "sgd":
        return Sgd()
    if kind == "adam":
        return Adam()
    raise InputError(f"unknown optimizer {kind!r}")


def optimizer_step(kind: str, params: ParamSet, grads, step_size: float, state=None) -> ParamSet:
    """One descent step. ``state`` is an optimizer instance carried between calls (Adam moments)."""
    opt = state if state is not None else make_optimizer(kind)
    return opt.step(params, grads, step_size)


# ---------------------------------------------------------------------------
# finite-difference checks


def numeric_grad(fn: Callable[[Dict[str, Tensor]], Tensor], params: ParamSet, h: float = 1e-6) -> Dict[str, np.ndarray]:
    """Central differences of ``fn`` with respect to every parameter entry."""
    out = {}
    for k in params.keys():
        a = params[k]
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + h
            fp = float(fn(params.leaves()).value)
            a[idx] = old - h
            fm = float(fn(params.leaves()).value)
            a[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        out[k] = g
    return out


def grad_rel_error(fn: Callable[[Dict[str, Tensor]], Tensor], params: ParamSet, h: float = 1e-6) -> float:
    """``|g - g_fd| / max(|g|, |g_fd|)`` over the flattened gradient vector."""
    _, g = value_and_grad(fn, params)
    n = numeric_grad(fn, params, h)
    a = np.concatenate([g[k].ravel() for k in params.keys()])
    b = np.concatenate([n[k].ravel() for k in params.keys()])
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)
