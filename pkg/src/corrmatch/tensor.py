"""Dense float tensors with reverse-mode automatic differentiation.

The array payload is a numpy ndarray (float32 by default, float64 for
gradient verification). Every operation builds the result eagerly and, when
any input participates in gradient tracking, records a backward closure, so
the chain of closures hanging off a scalar loss *is* the tape. Tensors are
never mutated in place once created; the backward pass only writes to the
separate ``.grad`` buffers.

The primitive set is closed: add, subtract, multiply, matmul, conv2d
(stride 1/2, zero padding), relu, softmax (last axis), layernorm (last
axis), sin, cos, amax, concat, slice, reshape, transpose, mean, sum and the
squared-L2 reduction. Each primitive has exactly one backward rule and a
finite-difference check in the gradcheck suite; adding a primitive without
both is a bug.

Two matmul code paths exist on purpose. The default goes through BLAS,
which is fast but whose per-row bit patterns change with the number of rows
(gemv vs gemm kernels). ``row_stable=True`` routes through ``np.einsum``,
whose per-element accumulation order is independent of the leading
dimension, so slicing rows out of a batched product is bit-identical to
computing them alone. Query-conditioned model paths use the stable route;
everything whose leading extent never varies uses BLAS.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "no_grad",
    "add",
    "subtract",
    "multiply",
    "matmul",
    "conv2d",
    "relu",
    "softmax",
    "layernorm",
    "sin",
    "cos",
    "amax",
    "concat",
    "slice_",
    "reshape",
    "transpose",
    "mean",
    "tsum",
    "sqnorm",
    "backward_accumulate",
    "finite_difference_gradient",
    "check_gradient",
    "check_gradient_sampled",
    "AdamState",
    "adam_update",
    "gradcheck_cases",
    "run_gradcheck",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested primitive."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or infinity from finite inputs."""


class TapeError(RuntimeError):
    """Backward was requested on a tensor that cannot support it."""


class _GradMode(threading.local):
    def __init__(self):
        self.enabled = True


_grad_mode = _GradMode()


class no_grad:
    """Context manager that suppresses tape recording (thread-local)."""

    def __enter__(self):
        self._prev = _grad_mode.enabled
        _grad_mode.enabled = False
        return self

    def __exit__(self, *exc):
        _grad_mode.enabled = self._prev
        return False


def _as_array(value, dtype):
    if dtype is not None:
        return np.asarray(value, dtype=dtype)
    if isinstance(value, (np.ndarray, np.generic)) and value.dtype in _FLOAT_DTYPES:
        return np.asarray(value)
    return np.asarray(value, dtype=np.float32)


class Tensor:
    """N-dimensional float array, optionally tracked for backprop."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None,
                 _parents=(), _backward=None, op="leaf"):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad) and _grad_mode.enabled
        self.grad = None
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self.op = op

    # -- introspection ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype):
        """Leaf-level precision change; never valid mid-graph."""
        if self._parents:
            raise TapeError("astype on a non-leaf tensor would break the tape")
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, op={self.op})"

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return multiply(self, -1.0)

    def __getitem__(self, key):
        return slice_(self, key)

    # -- backward --------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep seeding d(self)/d(self) = 1; self must be scalar."""
        if self.data.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise TapeError("backward() on a tensor with no tape")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def accumulate_grad(self, g):
        # backward rules always hand over fresh arrays or views of fresh
        # arrays, and nothing mutates gradient buffers in place, so the
        # first accumulation can alias g safely
        if self.grad is None:
            self.grad = np.asarray(g)
        else:
            self.grad = self.grad + g


def _topo_order(root):
    """Deterministic post-order over the tape (iterative; graphs get deep)."""
    order = []
    seen = set()
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


# -- helpers --------------------------------------------------------------


def _coerce(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _check_dtypes(op, *tensors):
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(d.name for d in dtypes)}")


def _check_finite(op, arr):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _make(data, op, parents, backward):
    track = _grad_mode.enabled and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, op=op)
    out = Tensor(data, op=op)
    out.requires_grad = True
    out._parents = tuple(parents)
    out._backward = backward
    return out


# -- elementwise primitives -------------------------------------------------


def add(a, b):
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=np.float32))
    b = _coerce(b, a)
    a = _coerce(a, b)
    _check_dtypes("add", a, b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape}: {e}") from None

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(data, "add", (a, b), backward)


def subtract(a, b):
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=np.float32))
    b = _coerce(b, a)
    a = _coerce(a, b)
    _check_dtypes("subtract", a, b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"subtract: shapes {a.shape} and {b.shape}: {e}") from None

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _make(data, "subtract", (a, b), backward)


def multiply(a, b):
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=np.float32))
    b = _coerce(b, a)
    a = _coerce(a, b)
    _check_dtypes("multiply", a, b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"multiply: shapes {a.shape} and {b.shape}: {e}") from None

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make(data, "multiply", (a, b), backward)


def relu(x):
    data = np.maximum(x.data, 0)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * (x.data > 0))

    return _make(data, "relu", (x,), backward)


def sin(x):
    data = np.sin(x.data)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * np.cos(x.data))

    return _make(data, "sin", (x,), backward)


def cos(x):
    data = np.cos(x.data)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * (-np.sin(x.data)))

    return _make(data, "cos", (x,), backward)


# -- matmul -----------------------------------------------------------------


def _einsum_matmul(a, b):
    """Leading-dimension bit-stable product; see module docstring."""
    if a.ndim == 2 and b.ndim == 2:
        return np.einsum("ij,jk->ik", a, b)
    if b.ndim == 2:
        flat = a.reshape(-1, a.shape[-1])
        out = np.einsum("ij,jk->ik", flat, b)
        return out.reshape(a.shape[:-1] + (b.shape[-1],))
    af = a.reshape((-1,) + a.shape[-2:])
    bf = b.reshape((-1,) + b.shape[-2:])
    out = np.einsum("bij,bjk->bik", af, bf)
    return out.reshape(a.shape[:-1] + (b.shape[-1],))


def matmul(a, b, row_stable=False):
    """Matrix product; operands (..., M, K) @ (..., K, N) or (K, N).

    Batch dims, when present on both operands, must match exactly.
    ``row_stable`` selects the einsum route whose rows are bit-identical
    across any slicing of the leading (row/batch) dimensions.
    """
    _check_dtypes("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    flat_rhs = b.ndim == 2 and a.ndim > 2  # one big gemm beats stacked small ones
    if row_stable:
        data = _einsum_matmul(a.data, b.data)
    elif flat_rhs:
        data = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(
            a.shape[:-1] + (b.shape[-1],))
    else:
        data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            if flat_rhs:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(ga)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = np.matmul(a.data.reshape(-1, a.shape[-1]).T,
                               g.reshape(-1, g.shape[-1]))
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate_grad(gb)

    return _make(data, "matmul", (a, b), backward)


# -- convolution --------------------------------------------------------------


def _im2col(xp, kh, kw, stride, out_h, out_w):
    b, _, _, c = xp.shape
    sb, sh, sw, sc = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, out_h, out_w, kh, kw, c),
        strides=(sb, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    return np.ascontiguousarray(view)


def conv2d(x, w, stride=1, pad=0):
    """2-D correlation, NHWC layout; weights (kh, kw, c_in, c_out).

    Zero padding; stride 1 or 2 only (the full model needs nothing else).
    """
    _check_dtypes("conv2d", x, w)
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need x (B,H,W,C) and w (kh,kw,Cin,Cout), "
                         f"got {x.shape} and {w.shape}")
    bsz, h, wdt, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: channel mismatch {x.shape} vs {w.shape}")
    out_h = (h + 2 * pad - kh) // stride + 1
    out_w = (wdt + 2 * pad - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} too large for input {x.shape}")

    if pad:
        xp = np.zeros((bsz, h + 2 * pad, wdt + 2 * pad, cin), dtype=x.data.dtype)
        xp[:, pad:pad + h, pad:pad + wdt, :] = x.data
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, out_h, out_w)
    cols2d = cols.reshape(bsz * out_h * out_w, kh * kw * cin)
    w2d = w.data.reshape(kh * kw * cin, cout)
    data = (cols2d @ w2d).reshape(bsz, out_h, out_w, cout)

    def backward(g):
        g2d = g.reshape(bsz * out_h * out_w, cout)
        if w.requires_grad:
            w.accumulate_grad((cols2d.T @ g2d).reshape(w.shape))
        if x.requires_grad:
            dcols = (g2d @ w2d.T).reshape(bsz, out_h, out_w, kh, kw, cin)
            dxp = np.zeros((bsz, h + 2 * pad, wdt + 2 * pad, cin), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + stride * out_h:stride,
                        j:j + stride * out_w:stride, :] += dcols[:, :, :, i, j, :]
            if pad:
                dxp = dxp[:, pad:pad + h, pad:pad + wdt, :]
            x.accumulate_grad(dxp)

    return _make(data, "conv2d", (x, w), backward)


# -- normalizations -----------------------------------------------------------


def softmax(x):
    """Softmax along the last axis, max-shifted for stability."""
    data = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(data, out=data)
    data /= data.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * data).sum(axis=-1, keepdims=True)
            x.accumulate_grad(data * (g - dot))

    return _make(data, "softmax", (x,), backward)


def layernorm(x, eps=1e-5):
    """Normalize the last axis to zero mean, unit variance (no affine part).

    Scale/shift, when wanted, are separate multiply/add with parameter
    tensors so this primitive keeps a single backward rule.
    """
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    data = xc * inv

    def backward(g):
        if x.requires_grad:
            gm = g.mean(axis=-1, keepdims=True)
            gym = (g * data).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (g - gm - data * gym))

    return _make(data, "layernorm", (x,), backward)


def amax(x, axis=None, keepdims=False):
    """Max reduction; gradient splits evenly across tied maxima."""
    data = x.data.max(axis=axis, keepdims=keepdims)

    def backward(g):
        if x.requires_grad:
            full = x.data.max(axis=axis, keepdims=True)
            mask = (x.data == full).astype(x.data.dtype)
            count = mask.sum(axis=axis, keepdims=True)
            gk = g if keepdims or axis is None else np.expand_dims(g, axis)
            if axis is None:
                gk = np.asarray(g).reshape((1,) * x.data.ndim)
            x.accumulate_grad(mask / count * gk)

    return _make(data, "amax", (x,), backward)


# -- shape primitives ---------------------------------------------------------


def concat(tensors, axis):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty input list")
    _check_dtypes("concat", *tensors)
    ref = list(tensors[0].shape)
    ax = axis % len(ref)
    for t in tensors[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or s[:ax] != ref[:ax] or s[ax + 1:] != ref[ax + 1:]:
            raise ShapeError(f"concat: shape {t.shape} incompatible with "
                             f"{tensors[0].shape} along axis {axis}")
    data = np.concatenate([t.data for t in tensors], axis=ax)
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        parts = np.split(g, splits, axis=ax)
        for t, p in zip(tensors, parts):
            if t.requires_grad:
                t.accumulate_grad(p)

    return _make(data, "concat", tuple(tensors), backward)


def slice_(x, key):
    """Basic slicing only (slices/ellipsis, no integer rank reduction)."""
    data = x.data[key]

    def backward(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            buf[key] = g
            x.accumulate_grad(buf)

    return _make(data, "slice", (x,), backward)


def reshape(x, shape):
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: {x.shape} -> {shape}") from None

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.shape))

    return _make(data, "reshape", (x,), backward)


def transpose(x, axes):
    axes = tuple(axes)
    data = x.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g.transpose(inverse))

    return _make(data, "transpose", (x,), backward)


# -- reductions ----------------------------------------------------------------


def _reduce_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims=False):
    data = x.data.sum(axis=axis, keepdims=keepdims)
    axes = _reduce_axes(axis, x.ndim)

    def backward(g):
        if x.requires_grad:
            gk = g
            if not keepdims:
                for a in sorted(axes):
                    gk = np.expand_dims(gk, a)
            x.accumulate_grad(np.broadcast_to(gk, x.shape).astype(x.data.dtype, copy=False))

    return _make(data, "sum", (x,), backward)


def mean(x, axis=None, keepdims=False):
    data = x.data.mean(axis=axis, keepdims=keepdims)
    axes = _reduce_axes(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]

    def backward(g):
        if x.requires_grad:
            gk = g
            if not keepdims:
                for a in sorted(axes):
                    gk = np.expand_dims(gk, a)
            gk = np.broadcast_to(gk, x.shape).astype(x.data.dtype, copy=False)
            x.accumulate_grad(gk / count)

    return _make(data, "mean", (x,), backward)


def sqnorm(x):
    """Squared L2 norm of all elements, reduced to a scalar."""
    data = np.asarray((x.data * x.data).sum(), dtype=x.data.dtype)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(2.0 * x.data * g)

    return _make(data, "sqnorm", (x,), backward)


# -- gradients ----------------------------------------------------------------


def backward_accumulate(loss, params):
    """Backprop from a scalar loss; return {name: gradient array}.

    Parameters never reached by the loss get exact-zero gradients of
    matching shape, so the optimizer can treat the result uniformly.
    """
    if not isinstance(loss, Tensor):
        raise TapeError("loss must be a Tensor")
    for t in params.values():
        t.grad = None
    loss.backward()
    out = {}
    for name, t in params.items():
        out[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return out


def finite_difference_gradient(loss_fn, x, h=1e-4):
    """Central-difference gradient of a scalar function, element by element.

    The independent oracle for every backward rule. Evaluate in float64:
    with h=1e-4 the truncation and rounding errors both sit far below the
    1e-4 relative tolerance the backward rules are held to.
    """
    if x.data.dtype != np.float64:
        raise ShapeError("finite differences need a float64 input tensor")
    if h <= 0:
        raise ShapeError("finite differences need h > 0")
    base = x.data
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        bumped = base.copy().reshape(-1)
        bumped[i] += h
        hi = loss_fn(Tensor(bumped.reshape(base.shape), dtype=np.float64)).item()
        bumped[i] -= 2 * h
        lo = loss_fn(Tensor(bumped.reshape(base.shape), dtype=np.float64)).item()
        flat[i] = (hi - lo) / (2 * h)
    return Tensor(grad)


# -- Adam ---------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment estimates, keyed like the parameter dict."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params):
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_update(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8,
                step=1, skip=()):
    """One Adam step with bias correction; pure, returns new dicts.

    ``params``/``grads`` map names to numpy arrays. Names in ``skip`` are
    passed through untouched (frozen), moments included.
    """
    if step < 1:
        raise ValueError("adam step counter starts at 1")
    new_params, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ShapeError(f"adam: shape mismatch for {name!r}")
        if name in skip:
            new_params[name] = p
            new_m[name] = state.m[name]
            new_v[name] = state.v[name]
            continue
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(m=new_m, v=new_v)


# -- gradcheck suite -----------------------------------------------------------


def _relative_error(got, want):
    err = np.abs(got - want).max() if got.size else 0.0
    scale = max(np.abs(want).max() if want.size else 0.0, 1e-6)
    return err / scale


def check_gradient_sampled(loss_of_params, params, n_samples=5, seed=0, h=1e-4):
    """Spot-check d(loss)/d(params) against central differences.

    ``loss_of_params`` maps a {name: Tensor} dict to a scalar Tensor;
    ``params`` must be float64 leaves. Samples ``n_samples`` scalar
    parameter elements (uniformly over all tensors), perturbs each in
    isolation, and returns the worst relative error, scaled by the largest
    sampled oracle magnitude. Sampling keeps the oracle honest on piecewise
    -smooth models: a full sweep of a large tensor will eventually straddle
    some relu kink where central differences stop being a derivative.
    """
    names = sorted(params)
    sizes = np.array([params[k].data.size for k in names])
    if any(params[k].data.dtype != np.float64 for k in names):
        raise ShapeError("sampled gradcheck needs float64 parameters")
    rng = np.random.default_rng(seed)
    flat_ids = rng.choice(int(sizes.sum()), size=min(n_samples, int(sizes.sum())),
                          replace=False)
    bounds = np.cumsum(sizes)

    leaves = {k: Tensor(params[k].data, requires_grad=True) for k in names}
    loss = loss_of_params(leaves)
    for t in leaves.values():
        t.grad = None
    loss.backward()

    picked = []
    for fid in sorted(int(i) for i in flat_ids):
        ti = int(np.searchsorted(bounds, fid, side="right"))
        off = fid - (bounds[ti - 1] if ti else 0)
        name = names[ti]
        base = params[name].data
        bumped = base.reshape(-1).copy()
        with no_grad():
            bumped[off] += h
            hi_p = dict(leaves)
            hi_p[name] = Tensor(bumped.reshape(base.shape))
            hi = loss_of_params(hi_p).item()
            bumped[off] -= 2 * h
            lo_p = dict(leaves)
            lo_p[name] = Tensor(bumped.reshape(base.shape))
            lo = loss_of_params(lo_p).item()
        fd = (hi - lo) / (2 * h)
        g = leaves[name].grad
        ad = float(g.reshape(-1)[off]) if g is not None else 0.0
        picked.append((f"{name}[{off}]", ad, fd))

    scale = max(max(abs(fd) for _, _, fd in picked), 1e-6)
    worst = max(abs(ad - fd) for _, ad, fd in picked) / scale
    return worst, picked


def check_gradient(fn, x, h=1e-4, tol=1e-4):
    """Compare reverse-mode and central-difference gradients of fn at x.

    fn maps one tensor to a scalar tensor; x must be float64. Returns the
    relative error (max-norm, scaled by the oracle's max magnitude).
    """
    leaf = Tensor(x.data.astype(np.float64), requires_grad=True)
    loss = fn(leaf)
    leaf.grad = None
    loss.backward()
    got = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    want = finite_difference_gradient(fn, Tensor(x.data.astype(np.float64)), h=h).data
    return _relative_error(got, want)


def gradcheck_cases(rng=None, shapes_per_op=10):
    """Yield (name, fn, point) triples covering every primitive.

    Inputs stay away from relu/amax kinks so the finite-difference oracle
    is well defined at the evaluation point.
    """
    rng = rng or np.random.default_rng(20240401)

    def rand(*shape, away_from_zero=False):
        a = rng.standard_normal(shape)
        if away_from_zero:
            a = np.where(np.abs(a) < 0.1, a + 0.25 * np.sign(a + 1e-12), a)
        return Tensor(a, dtype=np.float64)

    cases = []
    for i in range(shapes_per_op):
        n = 2 + (i % 4)
        m = 2 + ((i + 1) % 3)
        k = 1 + (i % 5)
        other = Tensor(rng.standard_normal((n, m)), dtype=np.float64)
        cases.append((f"add[{i}]", lambda t, o=other: sqnorm(add(t, o)), rand(n, m)))
        cases.append((f"subtract[{i}]", lambda t, o=other: sqnorm(subtract(o, t)), rand(n, m)))
        cases.append((f"multiply[{i}]", lambda t, o=other: sqnorm(multiply(t, o)), rand(n, m)))
        rhs = Tensor(rng.standard_normal((m, k)), dtype=np.float64)
        cases.append((f"matmul[{i}]", lambda t, r=rhs: sqnorm(matmul(t, r)), rand(n, m)))
        rhs_b = Tensor(rng.standard_normal((2, m, k)), dtype=np.float64)
        cases.append((f"matmul_batched[{i}]",
                      lambda t, r=rhs_b, st=bool(i % 2): sqnorm(matmul(t, r, row_stable=st)),
                      rand(2, n, m)))
        cases.append((f"relu[{i}]", lambda t: sqnorm(relu(t)), rand(n, m, away_from_zero=True)))
        cases.append((f"sin[{i}]", lambda t: sqnorm(sin(t)), rand(n, m)))
        cases.append((f"cos[{i}]", lambda t: sqnorm(cos(t)), rand(n, m)))
        cases.append((f"softmax[{i}]",
                      lambda t, o=other: sqnorm(multiply(softmax(t), o)), rand(n, m)))
        cases.append((f"layernorm[{i}]",
                      lambda t, o=other: sqnorm(multiply(layernorm(t), o)), rand(n, m)))
        cases.append((f"amax[{i}]",
                      lambda t: sqnorm(amax(t, axis=-1)), rand(n, m)))
        cases.append((f"concat[{i}]",
                      lambda t, o=other: sqnorm(concat([t, o], axis=0)), rand(n, m)))
        cases.append((f"slice[{i}]",
                      lambda t, key=(slice(0, max(1, n - 1)), slice(1, m)): sqnorm(slice_(t, key)),
                      rand(n, m)))
        cases.append((f"reshape[{i}]",
                      lambda t, s=(m, n): sqnorm(reshape(t, s)), rand(n, m)))
        rhs_t = Tensor(rng.standard_normal((n, k)), dtype=np.float64)
        cases.append((f"transpose[{i}]",
                      lambda t, r=rhs_t: sqnorm(matmul(transpose(t, (1, 0)), r)),
                      rand(n, m)))
        axis = i % 2 - 1  # alternate axis 0 / -1
        cases.append((f"mean[{i}]", lambda t, a=axis: sqnorm(mean(t, axis=a)), rand(n, m)))
        cases.append((f"sum[{i}]", lambda t, a=axis: sqnorm(tsum(t, axis=a)), rand(n, m)))
        cases.append((f"sqnorm[{i}]", lambda t: sqnorm(t), rand(n, m)))
        stride = 1 + (i % 2)
        img = rand(2, 6, 6, 2)
        kern = Tensor(rng.standard_normal((3, 3, 2, 3)), dtype=np.float64)
        cases.append((f"conv2d_s{stride}[{i}]",
                      lambda t, w=kern, s=stride: sqnorm(conv2d(t, w, stride=s, pad=1)),
                      img))
        cases.append((f"conv2d_w_s{stride}[{i}]",
                      lambda t, im=img, s=stride: sqnorm(conv2d(im, t, stride=s, pad=1)),
                      Tensor(rng.standard_normal((3, 3, 2, 3)), dtype=np.float64)))
    return cases


def run_gradcheck(tol=1e-4, shapes_per_op=10, report=None):
    """Run the whole per-primitive suite; returns (n_pass, n_fail).

    ``report`` is an optional callable taking one preformatted line per
    primitive group (PASS/FAIL plus worst relative error).
    """
    worst = {}
    for name, fn, x in gradcheck_cases(shapes_per_op=shapes_per_op):
        group = name.split("[")[0]
        err = check_gradient(fn, x, tol=tol)
        worst[group] = max(worst.get(group, 0.0), err)
    n_pass = n_fail = 0
    for group in sorted(worst):
        ok = worst[group] <= tol
        n_pass += ok
        n_fail += not ok
        if report:
            report(f"{'PASS' if ok else 'FAIL'} {group}: max relative error {worst[group]:.3e}")
    return n_pass, n_fail
