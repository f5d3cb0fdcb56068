"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every value is a `Variable` wrapping a row-major numpy float64 buffer. Ops
build an implicit computation record (the DAG of parent links); calling
`backward()` on a scalar loss walks that record once in reverse topological
order and accumulates gradients additively into every reachable Variable.

Conventions, fixed deliberately:
  - convolutions compute cross-correlation (no kernel flip), stride 1,
    zero padding only
  - kernels are laid out C_in x C_out x K_x x K_y
  - convolutions carry no bias term
  - everything is float64; every primitive checks its output for NaN/Inf
  - gradients accumulate across uses; call zero_grad() between passes
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, InputError, NumericError

__all__ = [
    "Variable",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "exp",
    "log",
    "softplus",
    "reduce_sum",
    "reshape",
    "relu",
    "conv2d",
    "depthwise_conv2d",
    "depthwise_separable_conv",
    "global_avg_pool",
    "dense",
    "softmax_cross_entropy",
    "ri_contract",
    "finite_difference_check",
]


def _check_finite(arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError("primitive produced a non-finite value")


class Variable:
    """A node in the computation record: a float64 array plus its gradient."""

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward_fn")

    def __init__(self, value, requires_grad=False, name=None, _parents=(), _backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        _check_finite(self.value)
        self.grad = np.zeros_like(self.value)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = tuple(_parents)
        self._backward_fn = _backward

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def zero_grad(self):
        self.grad[...] = 0.0

    def backward(self):
        """Propagate d(self)/d(node) into .grad of every node in the record.

        Requires a scalar value. Gradients add onto whatever is already in
        .grad, so repeated calls accumulate.
        """
        if self.value.size != 1:
            raise ContractError("backward() requires a scalar loss, got shape %r" % (self.shape,))
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = self.grad + np.ones_like(self.value)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __repr__(self):
        return "Variable(shape=%r, requires_grad=%r, name=%r)" % (
            self.shape, self.requires_grad, self.name)


def _as_variable(x) -> Variable:
    if isinstance(x, Variable):
        return x
    return Variable(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _node(value, parents, backward_fn) -> Variable:
    return Variable(value, _parents=parents, _backward=backward_fn)


# ---------------------------------------------------------------------------
# elementwise / broadcasting primitives


def add(a, b):
    a, b = _as_variable(a), _as_variable(b)
    out_value = a.value + b.value

    def backward_fn(g):
        a.grad += _unbroadcast(g, a.shape)
        b.grad += _unbroadcast(g, b.shape)

    return _node(out_value, (a, b), backward_fn)


def sub(a, b):
    a, b = _as_variable(a), _as_variable(b)
    out_value = a.value - b.value

    def backward_fn(g):
        a.grad += _unbroadcast(g, a.shape)
        b.grad -= _unbroadcast(g, b.shape)

    return _node(out_value, (a, b), backward_fn)


def mul(a, b):
    a, b = _as_variable(a), _as_variable(b)
    out_value = a.value * b.value

    def backward_fn(g):
        a.grad += _unbroadcast(g * b.value, a.shape)
        b.grad += _unbroadcast(g * a.value, b.shape)

    return _node(out_value, (a, b), backward_fn)


def div(a, b):
    a, b = _as_variable(a), _as_variable(b)
    out_value = a.value / b.value

    def backward_fn(g):
        a.grad += _unbroadcast(g / b.value, a.shape)
        b.grad += _unbroadcast(-g * a.value / (b.value * b.value), b.shape)

    return _node(out_value, (a, b), backward_fn)


def neg(a):
    a = _as_variable(a)

    def backward_fn(g):
        a.grad -= g

    return _node(-a.value, (a,), backward_fn)


def power(a, exponent):
    """Elementwise a ** exponent for a constant scalar exponent."""
    a = _as_variable(a)
    p = float(exponent)
    out_value = a.value ** p

    def backward_fn(g):
        a.grad += g * p * a.value ** (p - 1.0)

    return _node(out_value, (a,), backward_fn)


def exp(a):
    a = _as_variable(a)
    out_value = np.exp(a.value)

    def backward_fn(g):
        a.grad += g * out_value

    return _node(out_value, (a,), backward_fn)


def log(a):
    a = _as_variable(a)

    def backward_fn(g):
        a.grad += g / a.value

    return _node(np.log(a.value), (a,), backward_fn)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a):
    """ln(1 + exp(a)), overflow-safe (exactly a for large positive a)."""
    a = _as_variable(a)
    out_value = np.logaddexp(0.0, a.value)

    def backward_fn(g):
        a.grad += g * _sigmoid(a.value)

    return _node(out_value, (a,), backward_fn)


def reduce_sum(a, axis=None, keepdims=False):
    a = _as_variable(a)
    out_value = a.value.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            a.grad += g * np.ones_like(a.value)
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a.grad += np.broadcast_to(g, a.shape)

    return _node(out_value, (a,), backward_fn)


def reshape(a, shape):
    a = _as_variable(a)

    def backward_fn(g):
        a.grad += g.reshape(a.shape)

    return _node(a.value.reshape(shape), (a,), backward_fn)


def relu(a):
    a = _as_variable(a)
    out_value = np.maximum(a.value, 0.0)

    def backward_fn(g):
        a.grad += g * (a.value > 0.0)

    return _node(out_value, (a,), backward_fn)


# ---------------------------------------------------------------------------
# convolution primitives


def _windows(padded: np.ndarray, kx: int, ky: int) -> np.ndarray:
    """Sliding KxK views: N x C x H' x W' x K_x x K_y."""
    return np.lib.stride_tricks.sliding_window_view(padded, (kx, ky), axis=(2, 3))


def _check_conv_input(x: Variable, kx: int, ky: int, padding: int) -> None:
    if x.value.ndim != 4:
        raise DimensionError("conv input must be N x C x H x W, got shape %r" % (x.shape,))
    if kx % 2 == 0 or ky % 2 == 0:
        raise DimensionError("kernel sizes must be odd, got %dx%d" % (kx, ky))
    if padding < 0:
        raise DimensionError("padding must be non-negative")
    if x.shape[2] + 2 * padding < kx or x.shape[3] + 2 * padding < ky:
        raise DimensionError("spatial input %rx%r too small for %dx%d kernel"
                             % (x.shape[2], x.shape[3], kx, ky))


def conv2d(x, kernels, padding=0):
    """2D cross-correlation, stride 1.

    x: N x C_in x H x W, kernels: C_in x C_out x K_x x K_y,
    output: N x C_out x (H + 2*padding - K_x + 1) x (W + 2*padding - K_y + 1).
    """
    x, kernels = _as_variable(x), _as_variable(kernels)
    if kernels.value.ndim != 4:
        raise DimensionError("kernels must be C_in x C_out x K_x x K_y, got %r" % (kernels.shape,))
    c_in, c_out, kx, ky = kernels.shape
    padding = int(padding)
    _check_conv_input(x, kx, ky, padding)
    if x.shape[1] != c_in:
        raise DimensionError("input has %d channels, kernels expect %d" % (x.shape[1], c_in))
    n, _, h, w = x.shape
    if padding:
        padded = np.pad(x.value, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        padded = x.value
    win = _windows(padded, kx, ky)
    out_value = np.einsum("nchwxy,coxy->nohw", win, kernels.value, optimize=True)

    def backward_fn(g):
        kernels.grad += np.einsum("nchwxy,nohw->coxy", win, g, optimize=True)
        gx = np.zeros_like(padded)
        out_h, out_w = g.shape[2], g.shape[3]
        for i in range(kx):
            for j in range(ky):
                gx[:, :, i:i + out_h, j:j + out_w] += np.einsum(
                    "nohw,co->nchw", g, kernels.value[:, :, i, j], optimize=True)
        x.grad += gx[:, :, padding:padding + h, padding:padding + w]

    return _node(out_value, (x, kernels), backward_fn)


def depthwise_conv2d(x, w_spatial, padding=0):
    """Per-channel spatial cross-correlation.

    x: N x C x H x W, w_spatial: C x 1 x K_x x K_y, output keeps C channels.
    """
    x, w_spatial = _as_variable(x), _as_variable(w_spatial)
    if w_spatial.value.ndim != 4 or w_spatial.shape[1] != 1:
        raise DimensionError("w_spatial must be C x 1 x K_x x K_y, got %r" % (w_spatial.shape,))
    c, _, kx, ky = w_spatial.shape
    padding = int(padding)
    _check_conv_input(x, kx, ky, padding)
    if x.shape[1] != c:
        raise DimensionError("input has %d channels, w_spatial expects %d" % (x.shape[1], c))
    n, _, h, w = x.shape
    if padding:
        padded = np.pad(x.value, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        padded = x.value
    win = _windows(padded, kx, ky)
    spatial = w_spatial.value[:, 0]
    out_value = np.einsum("nchwxy,cxy->nchw", win, spatial, optimize=True)

    def backward_fn(g):
        w_spatial.grad[:, 0] += np.einsum("nchwxy,nchw->cxy", win, g, optimize=True)
        gx = np.zeros_like(padded)
        out_h, out_w = g.shape[2], g.shape[3]
        for i in range(kx):
            for j in range(ky):
                gx[:, :, i:i + out_h, j:j + out_w] += g * spatial[:, i, j][None, :, None, None]
        x.grad += gx[:, :, padding:padding + h, padding:padding + w]

    return _node(out_value, (x, w_spatial), backward_fn)


def depthwise_separable_conv(x, w_spatial, w_depth, padding=0):
    """Per-channel spatial convolution followed by 1x1 channel mixing.

    w_spatial: C_in x 1 x K_x x K_y, w_depth: C_in x C_out x 1 x 1.
    """
    w_depth = _as_variable(w_depth)
    if w_depth.value.ndim != 4 or w_depth.shape[2:] != (1, 1):
        raise DimensionError("w_depth must be C_in x C_out x 1 x 1, got %r" % (w_depth.shape,))
    return conv2d(depthwise_conv2d(x, w_spatial, padding), w_depth, 0)


def global_avg_pool(x):
    """Spatial mean per feature channel: N x C x H x W -> N x C."""
    x = _as_variable(x)
    if x.value.ndim != 4:
        raise DimensionError("global_avg_pool expects N x C x H x W, got %r" % (x.shape,))
    n, c, h, w = x.shape
    out_value = x.value.mean(axis=(2, 3))

    def backward_fn(g):
        x.grad += g[:, :, None, None] / float(h * w)

    return _node(out_value, (x,), backward_fn)


def dense(x, weights, bias):
    """Affine map: (N x F) @ (F x O) + (O,)."""
    x, weights, bias = _as_variable(x), _as_variable(weights), _as_variable(bias)
    if x.value.ndim != 2 or weights.value.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise DimensionError("dense shapes mismatch: x %r, weights %r" % (x.shape, weights.shape))
    if bias.shape != (weights.shape[1],):
        raise DimensionError("bias shape %r does not match output width %d"
                             % (bias.shape, weights.shape[1]))
    out_value = x.value @ weights.value + bias.value

    def backward_fn(g):
        x.grad += g @ weights.value.T
        weights.grad += x.value.T @ g
        bias.grad += g.sum(axis=0)

    return _node(out_value, (x, weights, bias), backward_fn)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of softmax(logits) against integer labels.

    logits: N x O, labels: length-N integer array with values in [0, O).
    """
    logits = _as_variable(logits)
    labels = np.asarray(labels)
    if logits.value.ndim != 2:
        raise DimensionError("logits must be N x O, got %r" % (logits.shape,))
    n, o = logits.shape
    if labels.shape != (n,):
        raise DimensionError("labels must have shape (%d,), got %r" % (n, labels.shape))
    if not np.issubdtype(labels.dtype, np.integer):
        raise InputError("labels must be integers")
    if labels.min() < 0 or labels.max() >= o:
        raise InputError("label out of range [0, %d)" % o)
    shifted = logits.value - logits.value.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_z[:, None]
    out_value = -log_probs[np.arange(n), labels].mean()
    probs = np.exp(log_probs)

    def backward_fn(g):
        delta = probs.copy()
        delta[np.arange(n), labels] -= 1.0
        logits.grad += float(g) * delta / n

    return _node(out_value, (logits,), backward_fn)


def ri_contract(ri, prototypes):
    """Contract a C_in x G weighting matrix with G x C_out x K_x x K_y prototypes.

    out[c, o, x, y] = sum_g ri[c, g] * prototypes[g, o, x, y]
    """
    ri, prototypes = _as_variable(ri), _as_variable(prototypes)
    if ri.value.ndim != 2 or prototypes.value.ndim != 4:
        raise DimensionError("ri_contract expects (C_in x G, G x C_out x K_x x K_y), got %r / %r"
                             % (ri.shape, prototypes.shape))
    if ri.shape[1] != prototypes.shape[0]:
        raise DimensionError("ri has %d columns, prototypes have %d rows"
                             % (ri.shape[1], prototypes.shape[0]))
    out_value = np.einsum("cg,goxy->coxy", ri.value, prototypes.value, optimize=True)

    def backward_fn(g):
        ri.grad += np.einsum("coxy,goxy->cg", g, prototypes.value, optimize=True)
        prototypes.grad += np.einsum("cg,coxy->goxy", ri.value, g, optimize=True)

    return _node(out_value, (ri, prototypes), backward_fn)


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(build_loss, variables, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    `build_loss` must rebuild the scalar loss from the current .value of each
    Variable in `variables`. Relative error per entry is
    |analytic - fd| / (|analytic| + |fd| + 1e-8).
    """
    for v in variables:
        v.zero_grad()
    loss = build_loss()
    loss.backward()
    analytic = [v.grad.copy() for v in variables]
    worst = 0.0
    for v, a in zip(variables, analytic):
        flat = v.value.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = float(build_loss().value)
            flat[idx] = orig - eps
            down = float(build_loss().value)
            flat[idx] = orig
            fd = (up - down) / (2.0 * eps)
            an = a.reshape(-1)[idx]
            rel = abs(an - fd) / (abs(an) + abs(fd) + 1e-8)
            worst = max(worst, rel)
    return worst
