"""Small reverse-mode autodiff engine over float64 numpy arrays.

Only the operations needed by the denoiser MLP, the diffusion losses and the
per-cluster VAEs are provided. Graph nodes are recorded on the innermost
active :class:`GradTape` in creation order, which is already a topological
order, so the backward pass is a single reverse sweep over that list.

Usage::

    params = ParamStore()
    init_mlp(params, "net", [4, 8, 2], rng)
    with GradTape() as tape:
        w = tape.watch(params)
        out = mlp_forward(w, "net", x)
        loss = mean(sum_rows(square(out)))
    grads = tape.gradient(loss, w)
    params.adam_step(grads, lr=1e-3)
"""

from __future__ import annotations

import threading
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericalError, UsageError

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Records one forward evaluation so gradients can be pulled from it."""

    def __init__(self):
        self.nodes: List[Tensor] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def watch(self, params: "ParamStore") -> Dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}

    def gradient(self, loss: Tensor, wrt: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
        return backward(self, loss, wrt)


def _record(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(out_data)
    stack = _tape_stack()
    if stack and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        stack[-1].nodes.append(out)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(tape: GradTape, loss: Tensor, wrt: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    """Reverse sweep over ``tape``; returns d(loss)/d(leaf) for every leaf in ``wrt``.

    Leaves the loss does not depend on get exact zeros.
    """
    if not tape.nodes:
        raise UsageError("backward called on an empty tape")
    if loss.data.size != 1:
        raise UsageError(f"loss must be scalar, got shape {loss.data.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericalError(f"non-finite loss {float(loss.data)}")
    for leaf in wrt.values():
        leaf.grad = None
    for node in tape.nodes:
        node.grad = None
    if loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
        for node in reversed(tape.nodes):
            if node.grad is not None:
                node._backward(node.grad)
    grads = {}
    for k, leaf in wrt.items():
        grads[k] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    return grads


# ---------------------------------------------------------------- operations

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _record(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _record(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _record(a.data * b.data, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _record(a.data @ b.data, (a, b), bw)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - y * y))

    return _record(y, (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)

    def bw(g):
        _accum(a, g * y)

    return _record(y, (a,), bw)


def square(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accum(a, 2.0 * a.data * g)

    return _record(a.data * a.data, (a,), bw)


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        _accum(a, g * inside)

    return _record(np.clip(a.data, lo, hi), (a,), bw)


def sum_rows(a) -> Tensor:
    """Sum over the last axis: (B, n) -> (B,)."""
    a = as_tensor(a)

    def bw(g):
        _accum(a, np.broadcast_to(g[..., None], a.data.shape))

    return _record(a.data.sum(axis=-1), (a,), bw)


def total(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _record(np.asarray(a.data.sum()), (a,), bw)


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size

    def bw(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape))

    return _record(np.asarray(a.data.mean()), (a,), bw)


def concat(parts: Sequence, axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(p, g[tuple(idx)])

    return _record(np.concatenate([p.data for p in parts], axis=axis), parts, bw)


def take_cols(a, cols) -> Tensor:
    """Column gather ``a[:, cols]`` (cols may be a slice or an index array)."""
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        if isinstance(cols, slice):
            full[:, cols] = g
        else:
            np.add.at(full, (slice(None), cols), g)
        _accum(a, full)

    return _record(a.data[:, cols], (a,), bw)


def log_softmax(a) -> Tensor:
    """Row-wise log-softmax over the last axis."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    sm = np.exp(y)

    def bw(g):
        _accum(a, g - sm * g.sum(axis=-1, keepdims=True))

    return _record(y, (a,), bw)


def check_finite(t: Tensor, what: str) -> Tensor:
    if not np.isfinite(t.data).all():
        raise NumericalError(f"non-finite values in {what}")
    return t


# -------------------------------------------------------------- parameters

class ParamStore(dict):
    """Named float64 arrays plus Adam state (first/second moments, step count)."""

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.step = 0

    def n_params(self, prefix: str = "") -> int:
        return int(sum(v.size for k, v in self.items() if k.startswith(prefix)))

    def copy(self) -> "ParamStore":
        out = ParamStore({k: v.copy() for k, v in self.items()})
        out.m = {k: v.copy() for k, v in self.m.items()}
        out.v = {k: v.copy() for k, v in self.v.items()}
        out.step = self.step
        return out

    def adam_step(self, grads: Dict[str, np.ndarray], lr: float,
                  betas=(0.9, 0.999), eps: float = 1e-8) -> None:
        """One bias-corrected Adam update, in place. Aborts before touching
        any state if a gradient is non-finite or mis-shaped."""
        bad = []
        for k, g in grads.items():
            if k not in self:
                raise ConfigError(f"gradient for unknown parameter {k!r}")
            if g.shape != self[k].shape:
                raise ConfigError(f"gradient shape {g.shape} != parameter shape {self[k].shape} for {k!r}")
            if not np.isfinite(g).all():
                bad.append(f"{k}: {int((~np.isfinite(g)).sum())} non-finite of {g.size}")
        if bad:
            raise NumericalError("Adam step aborted, non-finite gradients: " + "; ".join(bad))
        b1, b2 = betas
        self.step += 1
        c1 = 1.0 - b1 ** self.step
        c2 = 1.0 - b2 ** self.step
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(self[k])
                self.v[k] = np.zeros_like(self[k])
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            self[k] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def xavier_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_mlp(params: ParamStore, prefix: str, dims: Sequence[int],
             rng: np.random.Generator) -> None:
    """Adds ``{prefix}.W{i}`` (in, out) and ``{prefix}.b{i}`` (out,) for each layer."""
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ConfigError(f"invalid layer dims {list(dims)}")
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        params[f"{prefix}.W{i}"] = xavier_uniform(a, b, rng)
        params[f"{prefix}.b{i}"] = np.zeros(b)


def mlp_layers(params, prefix: str) -> int:
    n = 0
    while f"{prefix}.W{n}" in params:
        n += 1
    return n


def mlp_dims(params, prefix: str) -> List[int]:
    n = mlp_layers(params, prefix)
    dims = [params[f"{prefix}.W0"].shape[0]]
    for i in range(n):
        dims.append(params[f"{prefix}.W{i}"].shape[1])
    return dims


def dropout(x, p: float, train_mode: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity unless ``train_mode``."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not train_mode or p == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return mul(x, keep)


def mlp_forward(params, prefix: str, x, activation: str = "tanh",
                dropout_p: float = 0.0, train_mode: bool = False,
                rng: Optional[np.random.Generator] = None,
                activate_output: bool = False) -> Tensor:
    """Dense layers with ``activation`` after every layer but the last.

    ``params`` may hold raw arrays or watched Tensors. Dropout, when
    enabled, is applied to the network input only.
    """
    if activation != "tanh":
        raise ConfigError(f"unsupported activation {activation!r}")
    n = mlp_layers(params, prefix)
    if n == 0:
        raise ConfigError(f"no layers under prefix {prefix!r}")
    x = as_tensor(x)
    w0 = params[f"{prefix}.W0"]
    in_dim = (w0.data if isinstance(w0, Tensor) else w0).shape[0]
    if x.data.ndim != 2 or x.data.shape[1] != in_dim:
        raise ConfigError(f"input shape {x.data.shape} does not match first layer width {in_dim}")
    h = dropout(x, dropout_p, train_mode, rng)
    for i in range(n):
        h = add(matmul(h, params[f"{prefix}.W{i}"]), params[f"{prefix}.b{i}"])
        if i < n - 1 or activate_output:
            h = tanh(h)
    return check_finite(h, f"{prefix} output")


def mlp_param_count(dims: Sequence[int]) -> int:
    return int(sum(a * b + b for a, b in zip(dims[:-1], dims[1:])))


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Interleaved sinusoidal embedding.

    Element ``2k`` is ``sin(t / 10000**(2k/dim))`` and element ``2k+1`` the
    matching cosine. ``t`` may be a scalar (returns ``(dim,)``) or an array
    of steps (returns ``(len(t), dim)``).
    """
    if dim <= 0 or dim % 2:
        raise ConfigError(f"embedding dim must be a positive even number, got {dim}")
    t_arr = np.asarray(t, dtype=np.float64)
    k = np.arange(dim // 2, dtype=np.float64)
    freq = 1.0 / 10000.0 ** (2.0 * k / dim)
    ang = t_arr[..., None] * freq
    out = np.empty(t_arr.shape + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def iter_batches(n: int, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterable[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]
