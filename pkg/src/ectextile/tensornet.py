"""Small float64 tensor library with tape-based reverse-mode differentiation.

Usage::

    tape = Tape()
    with tape:
        loss = mse(mlp(x), y)
    tape.backward(loss)          # fills .grad on every parameter
    adam_step(mlp.parameters(), [p.grad for p in mlp.parameters()], state)

Operations executed inside a ``with tape:`` block are recorded in execution
order, which is already a topological order, so the backward pass is a
single reverse sweep.
"""

from __future__ import annotations

import json
import math
import threading
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.sparse as sp

LN_EPS = 1.0e-5
CHECKPOINT_VERSION = 1

_local = threading.local()  # per-thread stack of recording tapes


def _active() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("_backward", "_parents", "grad", "name", "requires_grad", "value")

    def __init__(self, value, requires_grad: bool = False, name: str = ""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records operations for one forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        self.nodes = []
        _active().append(self)
        return self

    def __exit__(self, *exc):
        _active().pop()
        return False

    def backward(self, loss: Tensor, into: dict | None = None) -> None:
        """Reverse sweep from `loss`.

        Leaf gradients accumulate into ``leaf.grad``, or into ``into[id(leaf)]``
        when a dict is given (used when several tapes share parameters).
        """
        if not self.nodes:
            raise TapeError("backward called before any forward pass was recorded")
        if loss.value.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        if loss._backward is None and not loss.requires_grad:
            raise TapeError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                if parent._backward is None:
                    if into is not None:
                        key = id(parent)
                        into[key] = pg.copy() if key not in into else into[key] + pg
                    else:
                        parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg
        self.nodes = []


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _record(value: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(value)
    stack = _active()
    if stack and any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
        stack[-1].nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.value * b.value, (a, b),
                   lambda g: (_unbroadcast(g * b.value, a.shape),
                              _unbroadcast(g * a.value, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.value * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0.0          # relu'(0) = 0
    return _record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def square(a: Tensor) -> Tensor:
    return _record(a.value * a.value, (a,), lambda g: (2.0 * a.value * g,))


# ---------------------------------------------------------------- reductions

def sum_all(a: Tensor) -> Tensor:
    return _record(np.array(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape),))


def mean_all(a: Tensor) -> Tensor:
    n = a.value.size
    return _record(np.array(a.value.mean()), (a,),
                   lambda g: (np.broadcast_to(g / n, a.shape),))


def mean_rows(a: Tensor) -> Tensor:
    """Mean over the leading axis."""
    n = a.shape[0]
    return _record(a.value.mean(axis=0), (a,),
                   lambda g: (np.broadcast_to(g / n, a.shape),))


def mse(pred: Tensor, target) -> Tensor:
    target = np.asarray(target.value if isinstance(target, Tensor) else target)
    diff = pred.value - target
    n = diff.size
    return _record(np.array(np.mean(diff * diff)), (pred,),
                   lambda g: (g * (2.0 / n) * diff,))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.value @ b.value, (a, b),
                   lambda g: (g @ b.value.T, a.value.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight of shape (out, in)."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input shape {x.shape} does not match weight shape "
                         f"{weight.shape}")
    y = x.value @ weight.value.T
    if bias is not None:
        y += bias.value

    def back(g):
        gx = g @ weight.value if _needs_grad(x) else None
        gw = g.reshape(-1, g.shape[-1]).T @ x.value.reshape(-1, x.shape[-1])
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _record(y, parents, back)


@numba.njit(cache=True, fastmath=True, nogil=True)
def _ln_forward(x, gain, bias, eps, rectify=False):
    n, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    inv = np.empty(n)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        r = 1.0 / np.sqrt(var / d + eps)  # >= 1/sqrt(var + eps) > 0
        inv[i] = r
        for j in range(d):
            xh = (x[i, j] - mu) * r
            xhat[i, j] = xh
            v = xh * gain[j] + bias[j]
            y[i, j] = v if (v > 0.0 or not rectify) else 0.0
    return y, xhat, inv


@numba.njit(cache=True, fastmath=True, nogil=True)
def _ln_backward(g, xhat, inv, gain, y, rectify=False):
    # with rectify, y is the forward output and relu'(0) = 0
    n, d = g.shape
    gx = np.empty_like(g)
    ggain = np.zeros(d)
    gbias = np.zeros(d)
    gy = np.empty(d)
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            gy[j] = g[i, j] if (not rectify or y[i, j] > 0.0) else 0.0
            gg = gy[j] * gain[j]
            m1 += gg
            m2 += gg * xhat[i, j]
            ggain[j] += gy[j] * xhat[i, j]
            gbias[j] += gy[j]
        m1 /= d
        m2 /= d
        for j in range(d):
            gx[i, j] = inv[i] * (gy[j] * gain[j] - m1 - xhat[i, j] * m2)
    return gx, ggain, gbias


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = LN_EPS, rectify: bool = False) -> Tensor:
    """Normalise over the last axis, then apply ``gain * xhat + bias``.

    ``rectify=True`` fuses a trailing ReLU into the same operation.
    """
    x = as_tensor(x)
    shape = x.shape
    d = shape[-1]
    x2 = np.ascontiguousarray(x.value.reshape(-1, d))
    gv = gain.value if gain is not None else np.ones(d)
    bv = bias.value if bias is not None else np.zeros(d)
    y, xhat, inv = _ln_forward(x2, gv, bv, eps, rectify)

    parents = [x]
    if gain is not None:
        parents.append(gain)
    if bias is not None:
        parents.append(bias)

    def back(g):
        gx, ggain, gbias = _ln_backward(np.ascontiguousarray(g.reshape(-1, d)), xhat, inv,
                                         gv, y, rectify)
        out = [gx.reshape(shape)]
        if gain is not None:
            out.append(ggain)
        if bias is not None:
            out.append(gbias)
        return tuple(out)

    return _record(y.reshape(shape), parents, back)


# ---------------------------------------------------------------- shape / graph ops

def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record(np.concatenate([p.value for p in parts], axis=axis), parts, back)


def gather_rows(x: Tensor, index: np.ndarray, scatter: sp.csr_matrix | None = None) -> Tensor:
    """``x[index]``; `scatter` (optional) is the transpose incidence used in backward."""
    n = x.shape[0]

    def back(g):
        if scatter is not None:
            return (scatter @ g,)
        out = np.zeros((n,) + g.shape[1:])
        np.add.at(out, index, g)
        return (out,)

    return _record(x.value[index], (x,), back)


def segment_sum(x: Tensor, matrix: sp.csr_matrix,
                transpose: sp.csr_matrix | None = None) -> Tensor:
    """Row-sum of `x` into segments given by a sparse (n_segments, n_rows) matrix.

    `transpose` may carry a precomputed ``matrix.T`` in CSR form.
    """
    mt = matrix.T.tocsr() if transpose is None else transpose
    return _record(matrix @ x.value, (x,), lambda g: (mt @ g,))


def incidence(segment_ids: np.ndarray, n_segments: int) -> sp.csr_matrix:
    """Sparse matrix S with S[s, k] = 1 when row k belongs to segment s."""
    k = np.arange(segment_ids.size)
    return sp.csr_matrix((np.ones(k.size), (segment_ids, k)), shape=(n_segments, k.size))


# ---------------------------------------------------------------- layers

def init_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    s = math.sqrt(2.0 / fan_in)
    return rng.uniform(-s, s, size=(fan_out, fan_in))


class Mlp:
    """Linear layers with layer norm + ReLU between them; the last layer is plain."""

    def __init__(self, dims: Sequence[int], rng: np.random.Generator | None = None,
                 layer_norm: bool = True, name: str = "mlp"):
        if len(dims) < 2:
            raise ValueError("an MLP needs at least input and output dims")
        rng = np.random.default_rng(0) if rng is None else rng
        self.dims = tuple(int(d) for d in dims)
        self.name = name
        self.weights, self.biases, self.ln_gains, self.ln_biases = [], [], [], []
        self.use_ln = []
        for k, (din, dout) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            self.weights.append(Tensor(init_uniform(rng, dout, din), True, f"{name}.W{k}"))
            # non-zero biases keep layer norm of a low-dimensional input sensitive to its scale
            bound = 1.0 / math.sqrt(din)
            self.biases.append(Tensor(rng.uniform(-bound, bound, dout), True, f"{name}.b{k}"))
            hidden = k < len(self.dims) - 2
            ln = hidden and layer_norm
            self.use_ln.append(ln)
            self.ln_gains.append(Tensor(np.ones(dout), True, f"{name}.g{k}") if ln else None)
            self.ln_biases.append(Tensor(np.zeros(dout), True, f"{name}.beta{k}") if ln else None)

    def __call__(self, x) -> Tensor:
        return self.forward(x)

    def forward(self, x) -> Tensor:
        h = as_tensor(x)
        if h.shape[-1] != self.dims[0]:
            raise ValueError(f"{self.name}: input shape {h.shape} does not match first layer "
                             f"weight shape {self.weights[0].shape}")
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = linear(h, w, b)
            if k < last:
                if self.use_ln[k]:
                    h = layer_norm(h, self.ln_gains[k], self.ln_biases[k], rectify=True)
                else:
                    h = relu(h)
        return h

    def parameters(self) -> list[Tensor]:
        out = []
        for k in range(len(self.weights)):
            out += [self.weights[k], self.biases[k]]
            if self.use_ln[k]:
                out += [self.ln_gains[k], self.ln_biases[k]]
        return out


def forward(mlp: Mlp, x) -> Tensor:
    return mlp.forward(x)


# ---------------------------------------------------------------- optimiser

class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 3.0e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1.0e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None],
              state: AdamState) -> AdamState:
    """Bias-corrected Adam update, applied in place to ``params``."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    grads = [np.zeros_like(p.value) if g is None else np.asarray(g) for p, g in zip(params, grads)]
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {p.name or 'parameter'}; "
                                    "update skipped")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.value) for p in params]
        state.second_moment = [np.zeros_like(p.value) for p in params]
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.value -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# ---------------------------------------------------------------- checkpoints

def state_dict(params: Sequence[Tensor], adam: AdamState | None = None, seed: int | None = None,
               extra: dict | None = None) -> dict:
    d = {"version": CHECKPOINT_VERSION,
         "params": [{"name": p.name, "shape": list(p.shape), "values": p.value.ravel().tolist()}
                    for p in params],
         "seed": seed}
    if adam is not None:
        d["adam"] = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps,
                     "step_count": adam.step_count,
                     "first_moment": [m.ravel().tolist() for m in adam.first_moment],
                     "second_moment": [v.ravel().tolist() for v in adam.second_moment]}
    if extra:
        d.update(extra)
    return d


def load_state_dict(params: Sequence[Tensor], d: dict) -> AdamState | None:
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')}")
    if len(d["params"]) != len(params):
        raise ValueError("checkpoint parameter count does not match the model")
    for p, rec in zip(params, d["params"]):
        if tuple(rec["shape"]) != p.shape:
            raise ValueError(f"shape mismatch for {rec['name']}: {rec['shape']} vs {p.shape}")
        p.value = np.asarray(rec["values"], dtype=np.float64).reshape(p.shape)
    a = d.get("adam")
    if a is None:
        return None
    return AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"],
                     step_count=a["step_count"],
                     first_moment=[np.asarray(m).reshape(p.shape) for m, p in
                                   zip(a["first_moment"], params)],
                     second_moment=[np.asarray(v).reshape(p.shape) for v, p in
                                    zip(a["second_moment"], params)])


def save_checkpoint(path, params, adam=None, seed=None, extra=None) -> None:
    with open(path, "w") as fh:
        json.dump(state_dict(params, adam, seed, extra), fh)


def read_checkpoint(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
