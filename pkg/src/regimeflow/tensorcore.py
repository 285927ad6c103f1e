"""Dense float64 tensors with reverse-mode differentiation.

A deliberately small kernel: the primitive set is closed (affine maps,
pointwise nonlinearities, concatenation, reductions, log/exp, gather and
scatter, cumulative sums, layer normalization, straight-through) and the
graph is rebuilt dynamically on every evaluation.  Everything runs in
64-bit floats so finite-difference checks are meaningful.

No broadcasting beyond numpy's right-aligned rules; no GPU; no sparsity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError

# When True every primitive validates its output for NaN/Inf.  Off by
# default: the check roughly doubles memory traffic on the hot path.
CHECK_FINITE = False


class Tensor:
    """A numpy array plus the bookkeeping for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "op")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"

    # operator sugar; all arithmetic funnels through the module primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return take(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, rng=None) -> Tensor:
    """A leaf tensor that accumulates gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _make(data, parents, vjp, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    out._vjp = vjp if out.requires_grad else None
    out.op = op
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by op {op!r}")
    return out


def backward(loss: Tensor):
    """Populate .grad on every reachable parameter of a scalar loss."""
    if loss.data.size != 1:
        raise ConfigError(f"backward() needs a scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data):
        raise NumericError("backward() called on a non-finite loss")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._vjp is None:
            continue
        grads = node._vjp(node.grad)
        for p, g in zip(node._parents, grads):
            if g is None or not p.requires_grad:
                continue
            if g.shape != p.data.shape:
                raise NumericError(f"gradient shape mismatch in op {node.op!r}")
            if CHECK_FINITE and not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient from op {node.op!r}")
            # out-of-place accumulation: vjps may hand the same array to
            # several parents, so in-place += would cross-contaminate
            p.grad = g if p.grad is None else p.grad + g


def zero_grads(params):
    for p in params:
        p.grad = None


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic primitives


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), vjp, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), vjp, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), vjp, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), vjp, "div")


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float):
    a = as_tensor(a)
    out = a.data ** exponent

    def vjp(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(out, (a,), vjp, "power")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ConfigError("matmul operands must be at least 2-D")
    out = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), vjp, "matmul")


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sin(a):
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: (g * (a.data > 0.0),), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a):
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)

    def vjp(g):
        return (g * _sigmoid(a.data),)

    return _make(out, (a,), vjp, "softplus")


def clip(a, lo: float, hi: float):
    """Clamp values; gradient passes through only inside [lo, hi]."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(out, (a,), lambda g: (g * mask,), "clip")


# ---------------------------------------------------------------------------
# reductions and normalizations


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make(np.asarray(out), (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def logsumexp(a, axis=-1, keepdims=False):
    a = as_tensor(a)
    hi = np.max(a.data, axis=axis, keepdims=True)
    ex = np.exp(a.data - hi)
    s = ex.sum(axis=axis, keepdims=True)
    out = np.log(s) + hi
    soft = ex / s
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (gg * soft,)

    return _make(out, (a,), vjp, "logsumexp")


def softmax(a, axis=-1):
    a = as_tensor(a)
    hi = np.max(a.data, axis=axis, keepdims=True)
    ex = np.exp(a.data - hi)
    out = ex / ex.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), vjp, "softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5):
    """Normalize the last axis, then apply a per-feature affine map."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gain.data * xhat + bias.data

    def vjp(g):
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (dxhat - m1 - xhat * m2)
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), vjp, "layer_norm")


# ---------------------------------------------------------------------------
# shape and indexing primitives


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def swapaxes(a, ax1, ax2):
    a = as_tensor(a)
    out = a.data.swapaxes(ax1, ax2)
    return _make(out, (a,), lambda g: (g.swapaxes(ax1, ax2),), "swapaxes")


def broadcast_to(a, shape):
    a = as_tensor(a)
    out = np.broadcast_to(a.data, shape)

    def vjp(g):
        return (_unbroadcast(g, a.shape),)

    return _make(out, (a,), vjp, "broadcast_to")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), vjp, "concat")


def take(a, key):
    """Static indexing/slicing; scatter-add on the way back."""
    a = as_tensor(a)
    out = a.data[key]

    def vjp(g):
        full = np.zeros_like(a.data)
        if isinstance(key, tuple) and any(isinstance(k, np.ndarray) for k in key):
            np.add.at(full, key, g)
        elif isinstance(key, np.ndarray):
            np.add.at(full, key, g)
        else:
            full[key] += g
        return (full,)

    return _make(np.asarray(out), (a,), vjp, "take")


def take_rows(a, idx: np.ndarray):
    """Select rows along the first axis."""
    a = as_tensor(a)
    out = a.data[idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), vjp, "take_rows")


def scatter_rows(a, idx: np.ndarray, n_rows: int):
    """Place rows of `a` at positions `idx` in a zero array of n_rows."""
    a = as_tensor(a)
    out = np.zeros((n_rows,) + a.shape[1:], dtype=np.float64)
    out[idx] = a.data
    return _make(out, (a,), lambda g: (g[idx],), "scatter_rows")


def gather_last(a, idx: np.ndarray):
    """Per-row gather on a 2-D tensor: out[n] = a[n, idx[n]]."""
    a = as_tensor(a)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise ConfigError("gather_last expects a 2-D tensor and one index per row")
    rows = np.arange(a.shape[0])
    out = a.data[rows, idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g  # one target per row: no collisions
        return (full,)

    return _make(out, (a,), vjp, "gather_last")


def cumsum_last(a):
    a = as_tensor(a)
    out = np.cumsum(a.data, axis=-1)

    def vjp(g):
        rev = np.cumsum(g[..., ::-1], axis=-1)[..., ::-1]
        return (rev,)

    return _make(out, (a,), vjp, "cumsum")


def straight_through(hard: np.ndarray, soft: Tensor):
    """Forward the hard values; route gradients to the soft relaxation."""
    soft = as_tensor(soft)
    if hard.shape != soft.shape:
        raise ConfigError("straight_through shapes must match")
    return _make(np.asarray(hard, dtype=np.float64), (soft,), lambda g: (g,), "straight_through")


# ---------------------------------------------------------------------------
# MLP blocks


_ACTIVATIONS = {"tanh": tanh, "relu": relu, "identity": lambda t: t, "sin": sin}


@dataclass
class MlpParams:
    """Weights for a fixed-depth fully connected network.

    `residual` adds the input to the final output (through `res_proj`
    when widths differ); `layer_norm` normalizes every hidden
    pre-activation.
    """

    weights: list
    biases: list
    activation: str = "tanh"
    residual: bool = False
    layer_norm: bool = False
    ln_gains: list = field(default_factory=list)
    ln_biases: list = field(default_factory=list)
    res_proj: Tensor | None = None

    def parameters(self) -> list:
        out = list(self.weights) + list(self.biases)
        out += list(self.ln_gains) + list(self.ln_biases)
        if self.res_proj is not None:
            out.append(self.res_proj)
        return out

    @property
    def in_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_width(self) -> int:
        return self.weights[-1].shape[1]


def init_mlp(dims, rng, activation="tanh", residual=False, layer_norm=False,
             out_scale=1.0) -> MlpParams:
    """Initialize an MLP with N(0, 1/fan_in) weights and zero biases."""
    if len(dims) < 2:
        raise ConfigError("an MLP needs at least one layer")
    if activation not in _ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}")
    weights, biases, ln_gains, ln_biases = [], [], [], []
    for k in range(len(dims) - 1):
        scale = 1.0 / np.sqrt(dims[k])
        if k == len(dims) - 2:
            scale *= out_scale
        weights.append(parameter(rng.normal(0.0, scale, size=(dims[k], dims[k + 1]))))
        biases.append(parameter(np.zeros(dims[k + 1])))
        if layer_norm and k < len(dims) - 2:
            ln_gains.append(parameter(np.ones(dims[k + 1])))
            ln_biases.append(parameter(np.zeros(dims[k + 1])))
    res_proj = None
    if residual and dims[0] != dims[-1]:
        res_proj = parameter(rng.normal(0.0, 1.0 / np.sqrt(dims[0]), size=(dims[0], dims[-1])))
    return MlpParams(weights, biases, activation, residual, layer_norm,
                     ln_gains, ln_biases, res_proj)


def mlp_forward(params: MlpParams, x) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != params.in_width:
        raise ConfigError(
            f"input width {x.shape[-1]} != first layer width {params.in_width}")
    act = _ACTIVATIONS[params.activation]
    h = x
    n_layers = len(params.weights)
    for k in range(n_layers):
        h = add(matmul(h, params.weights[k]), params.biases[k])
        if k < n_layers - 1:
            if params.layer_norm:
                h = layer_norm(h, params.ln_gains[k], params.ln_biases[k])
            h = act(h)
    if params.residual:
        h = add(h, matmul(x, params.res_proj) if params.res_proj is not None else x)
    return h


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators and step counter."""

    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, params, grads=None):
    """One Adam update with bias correction; mutates params in place."""
    if state.lr <= 0:
        raise ConfigError("learning rate must be positive")
    params = list(params)
    if grads is None:
        grads = [p.grad for p in params]
    grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(params, grads)]
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ConfigError("params/gradients/state lengths disagree")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ConfigError("gradient shape does not match parameter shape")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradCheckEntry:
    index: int
    max_rel_err: float
    max_abs_err: float
    flagged: bool


@dataclass
class GradCheckReport:
    entries: list
    tolerance: float

    @property
    def ok(self) -> bool:
        return not any(e.flagged for e in self.entries)

    @property
    def worst(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)


def grad_check(fn, params, step: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare backward() against central finite differences.

    `fn` is a zero-argument callable returning a scalar Tensor; it must
    re-read the current parameter values on every call.
    """
    params = list(params)
    zero_grads(params)
    loss = fn()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    entries = []
    for k, p in enumerate(params):
        numeric = np.zeros_like(p.data)
        flat = p.data.ravel()
        num_flat = numeric.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = float(fn().data)
            flat[j] = orig - step
            lo = float(fn().data)
            flat[j] = orig
            num_flat[j] = (hi - lo) / (2.0 * step)
        diff = np.abs(analytic[k] - numeric)
        denom = np.maximum(np.abs(analytic[k]) + np.abs(numeric), 1e-8)
        rel = diff / denom
        entries.append(GradCheckEntry(
            index=k,
            max_rel_err=float(rel.max()) if rel.size else 0.0,
            max_abs_err=float(diff.max()) if diff.size else 0.0,
            flagged=bool((rel > tolerance).any()),
        ))
    return GradCheckReport(entries=entries, tolerance=tolerance)
