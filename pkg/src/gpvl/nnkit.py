"""Minimal reverse-mode autodiff on float64 numpy arrays.

Only what the scene encoder, alignment module and planner need: dense
tensors with a recorded graph, a handful of fused ops (softmax, layer norm,
cross-entropy) with hand-written backward passes, transformer layers, AdamW
and a finite-difference gradient checker.
"""
from __future__ import annotations

import base64
import contextlib
import json
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

_GRAD_ENABLED = True

# Additive mask value: large enough that exp(masked - max) underflows to exactly 0.
MASK_VALUE = -1e30


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._prev: tuple = ()
        self._backward = None
        self._op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph traversal --------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in seen:
                    stack.append((parent, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._prev, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._prev = parents if needs else ()
    out._backward = backward if needs else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return _make(ad ** exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU; smooth, so finite differences behave everywhere."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make(out, (a,), backward, "gelu")


def where(mask, a, b) -> Tensor:
    """Elementwise select; ``mask`` is a constant boolean array."""
    a, b = _as_tensor(a), _as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    return _make(np.where(mask, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape),
                            _unbroadcast(np.where(mask, 0.0, g), b.shape)), "where")


def masked_fill(a: Tensor, mask, value: float) -> Tensor:
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return _make(np.where(mask, value, a.data), (a,), lambda g: (np.where(mask, 0.0, g),), "masked_fill")


# -- reductions & shape ---------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def tmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max along ``axis``; ties route the gradient to the lowest index (np.argmax order)."""
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(np.squeeze(out, axis=axis), (a,), backward, "max")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.moveaxis(g, axis, 0)), "stack")


# -- linear algebra -------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape),
                _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape))

    return _make(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x W + b with W stored as (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear shape mismatch: x {x.shape} vs W {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"linear bias shape {bias.shape} does not match W {weight.shape}")
    y = matmul(x, weight)
    return y if bias is None else y + bias


# -- fused normalisation / probability ops --------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    n = xd.shape[-1]

    def backward(g):
        gx = g * gd
        dx = inv / n * (n * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True))
        red = tuple(range(xd.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(xhat * gd + beta.data, (x, gamma, beta), backward, "layer_norm")


def cross_entropy(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean of -log softmax(logits)[target] over rows whose target != ignore_index."""
    targets = np.asarray(targets, dtype=np.int64)
    ld = logits.data
    vocab = ld.shape[-1]
    flat = ld.reshape(-1, vocab)
    tflat = targets.reshape(-1)
    if tflat.shape[0] != flat.shape[0]:
        raise ValueError(f"cross_entropy: {flat.shape[0]} logit rows vs {tflat.shape[0]} targets")
    if np.any(tflat >= vocab) or np.any(tflat < 0):
        bad = int(tflat[(tflat >= vocab) | (tflat < 0)][0])
        raise ValueError(f"cross_entropy: target id {bad} out of range for vocabulary size {vocab}")
    keep = np.ones(tflat.shape, dtype=bool) if ignore_index is None else tflat != ignore_index
    n = int(keep.sum())
    if n == 0:
        raise ValueError("cross_entropy: every target is ignored")
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(flat.shape[0])
    nll = lse - z[rows, tflat]
    loss = float(nll[keep].sum() / n)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, tflat] -= 1.0
        p[~keep] = 0.0
        return ((g / n) * p.reshape(ld.shape),)

    return _make(np.array(loss), (logits,), backward, "cross_entropy")


def mse(pred: Tensor, target) -> Tensor:
    diff = pred - _as_tensor(target)
    return (diff * diff).mean()


# -- attention ------------------------------------------------------------
def causal_mask(t: int) -> np.ndarray:
    """Boolean (t, t) mask, True where query i may attend key j (j <= i)."""
    return np.tril(np.ones((t, t), dtype=bool))


def key_padding_mask(valid: np.ndarray) -> np.ndarray:
    """(B, Tk) validity flags -> (B, 1, 1, Tk) attention mask."""
    valid = np.asarray(valid, dtype=bool)
    return valid[:, None, None, :]


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, mask=None) -> Tensor:
    """Scaled dot-product attention on already-projected (B, T, D) inputs.

    ``mask`` is a boolean array broadcastable to (B, heads, Tq, Tk); False
    entries receive no attention weight.
    """
    b, tq, d = q.shape
    tk = k.shape[1]
    if d % heads:
        raise ValueError(f"model dim {d} not divisible by {heads} heads")
    dh = d // heads
    qh = q.reshape(b, tq, heads, dh).transpose(0, 2, 1, 3)
    kh = k.reshape(b, tk, heads, dh).transpose(0, 2, 3, 1)
    vh = v.reshape(b, tk, heads, dh).transpose(0, 2, 1, 3)
    scores = matmul(qh, kh) * (1.0 / math.sqrt(dh))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            np.broadcast_shapes(mask.shape, scores.shape)
        except ValueError:
            raise ValueError(f"attention mask shape {mask.shape} incompatible with scores {scores.shape}") from None
        scores = masked_fill(scores, ~mask, MASK_VALUE)
    weights = softmax(scores, axis=-1)
    out = matmul(weights, vh)
    return out.transpose(0, 2, 1, 3).reshape(b, tq, d)


# -- modules --------------------------------------------------------------
class Module:
    """Parameter container; walks attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in self.__dict__.items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item
            elif isinstance(val, dict):
                for k2, item in val.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k2}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{k2}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter(_uniform(rng, n_in, (n_in, n_out)))
        self.bias = parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator):
        self.weight = parameter(_uniform(rng, dim, (n, dim)))

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.weight.shape[0]):
            raise IndexError(f"embedding id out of range [0, {self.weight.shape[0]})")
        return getitem(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng, bias=False)   # a key bias shifts every score equally: no effect
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)

    def __call__(self, x: Tensor, context: Tensor | None = None, mask=None) -> Tensor:
        src = x if context is None else context
        out = attention(self.q(x), self.k(src), self.v(src), self.heads, mask)
        return self.o(out)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, mask=None,
                         module: MultiHeadAttention | None = None) -> Tensor:
    """Functional entry point: project with ``module`` if given, else attend on raw inputs."""
    if module is None:
        return attention(q, k, v, heads, mask)
    return module.o(attention(module.q(q), module.k(k), module.v(v), heads, mask))


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class TransformerLayer(Module):
    """Pre-norm residual layer: self-attention, optional cross-attention, feed-forward."""

    def __init__(self, dim: int, heads: int, hidden: int, rng: np.random.Generator, cross: bool = False):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        if cross:
            self.ln_cross = LayerNorm(dim)
            self.cross = MultiHeadAttention(dim, heads, rng)
        else:
            self.cross = None
        self.ln2 = LayerNorm(dim)
        self.ff = FeedForward(dim, hidden, rng)

    def __call__(self, x: Tensor, mask=None, context: Tensor | None = None, context_mask=None) -> Tensor:
        x = x + self.attn(self.ln1(x), mask=mask)
        if self.cross is not None:
            x = x + self.cross(self.ln_cross(x), context, mask=context_mask)
        return x + self.ff(self.ln2(x))


class TransformerStack(Module):
    def __init__(self, layers: int, dim: int, heads: int, hidden: int, rng: np.random.Generator,
                 cross: bool = False):
        self.layers = [TransformerLayer(dim, heads, hidden, rng, cross=cross) for _ in range(layers)]
        self.ln_f = LayerNorm(dim)

    def __call__(self, x: Tensor, mask=None, context: Tensor | None = None, context_mask=None) -> Tensor:
        for layer in self.layers:
            x = layer(x, mask=mask, context=context, context_mask=context_mask)
        return self.ln_f(x)


# -- optimisation ---------------------------------------------------------
@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError(f"betas must lie in [0, 1), got {self.betas}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


class ParamStore:
    """Named parameters plus per-parameter AdamW moments and step counts."""

    def __init__(self, named: Iterable[tuple[str, Tensor]] = ()):
        self.params: dict[str, Tensor] = {}
        self.state: dict[str, dict] = {}
        for name, p in named:
            self.add(name, p)

    def add(self, name: str, p: Tensor) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.params[name] = p

    def __len__(self) -> int:
        return len(self.params)

    def __iter__(self):
        return iter(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def reset_state(self, names: Iterable[str] | None = None) -> None:
        for name in list(self.state if names is None else names):
            self.state.pop(name, None)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}


def adamw_step(store: ParamStore, cfg: OptimConfig, names: Iterable[str] | None = None) -> None:
    """One AdamW update over ``names`` (default: every registered parameter)."""
    b1, b2 = cfg.betas
    lr, wd, eps = cfg.learning_rate, cfg.weight_decay, cfg.epsilon
    for name in (store.params if names is None else names):
        p = store.params[name]
        if p.grad is None:
            raise RuntimeError(f"parameter {name!r} has no gradient")
        st = store.state.setdefault(name, {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "step": 0})
        g = p.grad
        if wd:
            p.data *= 1.0 - lr * wd
        st["m"] = b1 * st["m"] + (1.0 - b1) * g
        st["v"] = b2 * st["v"] + (1.0 - b2) * g * g
        st["step"] += 1
        t = st["step"]
        mhat = st["m"] / (1.0 - b1 ** t)
        vhat = st["v"] / (1.0 - b2 ** t)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


def clip_grad_norm(store: ParamStore, max_norm: float, names: Iterable[str] | None = None) -> float:
    """Rescale gradients so their joint L2 norm is at most ``max_norm``; returns the norm before clipping."""
    params = [store.params[n] for n in (store.params if names is None else names)]
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None))
    if total > max_norm > 0:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale     # not in place: gradient buffers may alias
    return total


# -- verification ---------------------------------------------------------
def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
               max_coords: int = 200, seed: int = 0, coords: dict | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Tensors larger than ``max_coords`` entries are checked on a seeded random
    subset of ``max_coords`` coordinates; smaller ones exhaustively.
    ``coords`` maps a position in ``params`` to explicit flat coordinates to
    check instead (e.g. the rows of an embedding table a batch actually uses).
    """
    for p in params:
        p.grad = None
    out = f()
    if not np.isfinite(out.data).all():
        raise FloatingPointError("grad_check: f is not finite")
    out.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for pi, p in enumerate(params):
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            if coords and pi in coords:
                coords_p = coords[pi]
            elif flat.size > max_coords:
                coords_p = rng.choice(flat.size, size=max_coords, replace=False)
            else:
                coords_p = range(flat.size)
            for c in coords_p:
                orig = flat[c]
                flat[c] = orig + step
                fp = f().item()
                flat[c] = orig - step
                fm = f().item()
                flat[c] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise FloatingPointError("grad_check: f is not finite at a perturbed point")
                num = (fp - fm) / (2 * step)
                ana = analytic.reshape(-1)[c]
                worst = max(worst, abs(ana - num) / max(1e-8, abs(ana) + abs(num)))
    return worst


# -- checkpoints ----------------------------------------------------------
CHECKPOINT_FORMAT = "gpvl-checkpoint"
CHECKPOINT_VERSION = 1


def checkpoint_dict(named: Iterable[tuple[str, Tensor]]) -> dict:
    params = {}
    for name, p in named:
        payload = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        params[name] = {"shape": list(p.shape), "data": base64.b64encode(payload).decode("ascii")}
    return {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "dtype": "<f8", "params": params}


def save_checkpoint(path, named: Iterable[tuple[str, Tensor]]) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, json.dumps(checkpoint_dict(named), sort_keys=True))


def load_checkpoint(path, named: Iterable[tuple[str, Tensor]], strict: bool = True) -> None:
    """Copy stored values into ``named`` parameters in place; shapes must agree by name."""
    with open(path, encoding="utf-8") as fh:
        blob = json.load(fh)
    apply_checkpoint(blob, named, strict=strict)


def apply_checkpoint(blob: dict, named: Iterable[tuple[str, Tensor]], strict: bool = True) -> None:
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError("not a gpvl checkpoint (format/version mismatch)")
    stored = blob["params"]
    targets = dict(named)
    if strict:
        missing = sorted(set(targets) - set(stored))
        extra = sorted(set(stored) - set(targets))
        if missing or extra:
            raise ValueError(f"checkpoint/model mismatch: missing={missing[:5]} unexpected={extra[:5]}")
    for name, p in targets.items():
        if name not in stored:
            continue
        entry = stored[name]
        if tuple(entry["shape"]) != p.shape:
            raise ValueError(f"shape mismatch for {name!r}: checkpoint {tuple(entry['shape'])} vs model {p.shape}")
        arr = np.frombuffer(base64.b64decode(entry["data"]), dtype="<f8").reshape(p.shape)
        p.data[...] = arr
