"""Minimal tape-based reverse-mode differentiation over float64 numpy arrays.

Every differentiable op builds a node holding its parents and a closure that
maps the output gradient to per-parent gradients. ``Tensor.backward`` walks the
graph in reverse topological order. Parameters are leaf tensors with
``requires_grad=True`` and keep a persistent ``grad`` accumulator.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        order = _topo_order(self)
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)
        pending = {id(self): seed}
        for node in order:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- arithmetic --------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_CONSTANT = Tensor(0.0)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        # decided at record time: a parameter frozen now stays a constant for this graph
        out._parents = tuple(p if p.requires_grad else _CONSTANT for p in parents)
        out._backward = backward
    return out


# -- elementwise ops -------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def power(a: Tensor, p: float) -> Tensor:
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    pos = a.data > 0
    scale = np.where(pos, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: (g * scale,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    return _make(np.where(take_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)))


# -- linear algebra & shape ops ---------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        ga = gb = None
        if b.ndim == 2 and a.ndim > 2:
            if need_a:
                ga = g @ b.data.T
            if need_b:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        if need_a:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if need_b:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def backward(g):
        z = np.zeros_like(a.data)
        if basic:
            z[idx] += g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _make(a.data[idx], (a,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    sizes = [t.shape[ax] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, backward)


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),))


def softmax(scores, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax; entries where ``mask`` is false get probability 0.

    Every slice along ``axis`` must keep at least one unmasked entry.
    """
    scores = as_tensor(scores)
    x = scores.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (scores,), backward)


def reparameterize(mu: Tensor, sigma: Tensor, noise: np.ndarray) -> Tensor:
    """z = mu + sigma * noise; noise is a constant so no gradient reaches it."""
    if np.any(sigma.data <= 0):
        raise ValueError("reparameterize: sigma must be strictly positive")
    return mu + sigma * np.asarray(noise, dtype=np.float64)


# -- modules -----------------------------------------------------------------
class Module:
    """Container whose Tensor/Module attributes are discovered in definition order."""

    def named_parameters(self, prefix: str = "") -> list:
        out = []
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((name, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out.append((f"{name}.{i}", item))
        return out

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) ^ set(state))
            raise KeyError(f"state dict keys do not match module parameters: {missing[:5]}")
        for n, p in params.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {n}: {arr.shape} vs {p.shape}")
            p.data[...] = arr

    def copy_from(self, other: "Module") -> None:
        for (_, p), (_, q) in zip(self.named_parameters(), other.named_parameters()):
            p.data[...] = q.data


def param(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, scale: float = 1.0):
        bound = scale / np.sqrt(n_in)
        self.weight = param(rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.bias = param(rng.uniform(-bound, bound, size=(n_out,)))

    def __call__(self, x) -> Tensor:
        return matmul(x, self.weight) + self.bias


ACTIVATIONS = ("leaky_relu", "relu", "tanh", "identity")


def activate(x: Tensor, kind: str) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x, 0.01)
    if kind == "relu":
        return relu(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "identity":
        return x
    raise ValueError(f"unknown activation {kind!r}")


@dataclass(frozen=True)
class MlpSpec:
    """Layer sizes ``(n_in, h1, ..., n_out)`` and one activation per affine layer."""

    sizes: tuple
    activations: tuple

    def __post_init__(self):
        if len(self.sizes) < 2 or any(int(s) <= 0 for s in self.sizes):
            raise ValueError(f"MlpSpec needs >= 1 layer with positive widths, got {self.sizes}")
        if len(self.activations) != len(self.sizes) - 1:
            raise ValueError("one activation per layer required")
        bad = [a for a in self.activations if a not in ACTIVATIONS]
        if bad:
            raise ValueError(f"unknown activations {bad}")

    @classmethod
    def simple(cls, n_in: int, hidden: Sequence[int], n_out: int,
               act: str = "leaky_relu", out_act: str = "identity") -> "MlpSpec":
        sizes = (n_in, *hidden, n_out)
        return cls(tuple(sizes), tuple([act] * len(hidden) + [out_act]))


def forward_mlp(spec: MlpSpec, params: Sequence[tuple], x) -> Tensor:
    """Affine + activation stack; ``params`` is a list of (weight, bias) pairs."""
    h = as_tensor(x)
    if h.shape[-1] != spec.sizes[0]:
        raise ValueError(f"input width {h.shape[-1]} does not match spec {spec.sizes[0]}")
    for (w, b), act in zip(params, spec.activations):
        h = activate(matmul(h, w) + b, act)
    return h


class Mlp(Module):
    def __init__(self, spec: MlpSpec, rng: np.random.Generator, last_scale: float = 1.0):
        self.spec = spec
        n = len(spec.sizes) - 1
        self.layers = [Linear(spec.sizes[i], spec.sizes[i + 1], rng,
                              scale=last_scale if i == n - 1 else 1.0) for i in range(n)]

    def __call__(self, x) -> Tensor:
        return forward_mlp(self.spec, [(l.weight, l.bias) for l in self.layers], x)


@contextlib.contextmanager
def frozen(*modules: Module):
    """Treat the modules' parameters as constants: no gradient is recorded for them."""
    params = [p for m in modules for p in m.parameters()]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p in params:
            p.requires_grad = True


# -- optimisation ------------------------------------------------------------
class NonFiniteGradientError(FloatingPointError):
    pass


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(f"non-finite gradient in parameter {p.name or p.shape}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad[...] = 0.0

    def state_dict(self, prefix: str = "") -> dict:
        out = {f"{prefix}t": np.array([float(self.t)])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}m.{i}"] = m.copy()
            out[f"{prefix}v.{i}"] = v.copy()
        return out

    def load_state_dict(self, state: dict, prefix: str = "") -> None:
        self.t = int(state[f"{prefix}t"][0])
        for i in range(len(self.params)):
            self.m[i][...] = state[f"{prefix}m.{i}"]
            self.v[i][...] = state[f"{prefix}v.{i}"]


def adam_step(opt: Adam) -> None:
    opt.step()


def soft_update(target: Module, online: Module, tau: float) -> None:
    """target <- tau * online + (1 - tau) * target, elementwise."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    tp, op = target.parameters(), online.parameters()
    if len(tp) != len(op) or any(a.shape != b.shape for a, b in zip(tp, op)):
        raise ValueError("soft_update: parameter shapes do not match")
    for t, o in zip(tp, op):
        t.data[...] = tau * o.data + (1.0 - tau) * t.data


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], n_probes: int = 32,
                      h: float = 1e-5, rng: np.random.Generator | None = None,
                      floor: float = 1e-8) -> float:
    """Max relative error between tape gradients and central differences.

    Probes cycle over ``params`` (shuffled) so small tensors are not starved.
    ``loss_fn`` must be deterministic.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()
    order = rng.permutation(len(params))
    worst = 0.0
    with no_grad():
        for k in range(n_probes):
            i = order[k % len(params)]
            p = params[i]
            flat = int(rng.integers(p.data.size))
            idx = np.unravel_index(flat, p.shape)
            orig = p.data[idx]
            p.data[idx] = orig + h
            up = loss_fn().item()
            p.data[idx] = orig - h
            down = loss_fn().item()
            p.data[idx] = orig
            num = (up - down) / (2 * h)
            ana = analytic[i][idx]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    return worst
