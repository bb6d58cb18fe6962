"""Dense tensor math with reverse-mode gradients.

A small numpy-backed engine: each op records a TapeNode holding its parents
and a backward closure. ``backward()`` materializes the recorded graph as a
GradTape (topologically ordered by construction) and walks it in reverse.

Two precisions are supported: float64 for verification and gradient checks,
float32 for tracking runtime. Binary ops require equal dtypes and either
equal shapes or a tensor/python-scalar pair; any other broadcasting must go
through the explicit :func:`broadcast_to`.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes or dims violate an op's contract."""


class NumericError(ValueError):
    """Raised on domain violations (e.g. log1p below -1)."""


_grad_enabled = True

# Fault injection hook for the selftest harness (--break-grad): when set,
# matmul's backward is deliberately corrupted so gradient suites must fail.
_break_grad = False


def set_break_grad(flag: bool) -> None:
    global _break_grad
    _break_grad = bool(flag)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class TapeNode:
    """One recorded op: parent tensors plus a closure computing their grads."""

    __slots__ = ("parents", "backward_fn")

    def __init__(self, parents, backward_fn):
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """Row-major float array with optional gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_const(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_const(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    # -- method aliases ------------------------------------------------------

    def sum(self, axes=None):
        return reduce_sum(self, axes)

    def mean(self, axes=None):
        return reduce_mean(self, axes)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return absval(self)

    def relu(self):
        return relu(self)

    def softplus(self):
        return softplus(self)

    def sqrt(self):
        return sqrt(self)

    def backward(self):
        backward(self)


def _scalar_err(t):
    raise ShapeError(f"item() requires a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def _as_const(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _check_finite_result(arr):
    # Ops promise finite outputs on finite in-domain inputs; the invariant
    # suite exercises this, so no per-op runtime scan here.
    return arr


def make_op(out_data, parents, backward_fn) -> Tensor:
    """Wrap ``out_data`` in a Tensor, recording the op if grads are on.

    ``backward_fn(grad_out) -> tuple`` must return one numpy gradient (or
    None) per parent. This is the extension point other modules use for
    custom kernels (cross-correlation, bilinear crops).
    """
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=req)
    if req:
        out.node = TapeNode(tuple(parents), backward_fn)
    return out


class GradTape:
    """Topologically ordered list of recorded ops reachable from an output.

    The order is a correctness invariant: every op's parents appear before
    the op itself. ``from_output`` rebuilds it by iterative DFS so graphs
    thousands of steps deep (scan recurrences) do not hit recursion limits.
    """

    __slots__ = ("ops",)

    def __init__(self, ops):
        self.ops = ops

    @staticmethod
    def from_output(out: Tensor) -> "GradTape":
        order = []
        seen = set()
        stack = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or t.node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t.node.parents:
                if p.node is not None and id(p) not in seen:
                    stack.append((p, False))
        return GradTape(order)


def backward(out: Tensor) -> None:
    """Populate ``grad`` on every tensor reachable from a scalar output."""
    if out.size != 1:
        raise ShapeError(f"backward requires a scalar output, got shape {out.shape}")
    tape = GradTape.from_output(out)
    grads = {id(out): np.ones_like(out.data)}
    if out.node is None:
        out.grad = grads[id(out)]
        return
    for t in reversed(tape.ops):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        t.grad = g
        parent_grads = t.node.backward_fn(g)
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=p.data.dtype)
            if pg.shape != p.data.shape:
                pg = pg.reshape(p.data.shape)
            if p.node is None:
                p.grad = pg if p.grad is None else p.grad + pg
            else:
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg


# -- binary elementwise ----------------------------------------------------


def _binary_operands(a, b, opname):
    a_t = isinstance(a, Tensor)
    b_t = isinstance(b, Tensor)
    if a_t and b_t:
        if a.dtype != b.dtype:
            raise ShapeError(f"{opname}: dtype mismatch {a.dtype} vs {b.dtype}")
        if a.shape != b.shape and a.size != 1 and b.size != 1:
            raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} (only equal or scalar allowed)")
        return a, b
    if a_t:
        return a, _as_const(b, a.dtype)
    if b_t:
        return _as_const(a, b.dtype), b
    raise TypeError(f"{opname}: at least one Tensor operand required")


def _unbroadcast_scalar(g, shape):
    # Gradient of a scalar operand broadcast against a full tensor.
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    out = a.data + b.data
    return make_op(out, (a, b), lambda g: (_unbroadcast_scalar(g, a.shape), _unbroadcast_scalar(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    out = a.data - b.data
    return make_op(out, (a, b), lambda g: (_unbroadcast_scalar(g, a.shape), _unbroadcast_scalar(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    out = a.data * b.data
    ad, bd = a.data, b.data
    return make_op(
        out, (a, b),
        lambda g: (_unbroadcast_scalar(g * bd, a.shape), _unbroadcast_scalar(g * ad, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    out = a.data / b.data
    ad, bd = a.data, b.data
    return make_op(
        out, (a, b),
        lambda g: (
            _unbroadcast_scalar(g / bd, a.shape),
            _unbroadcast_scalar(-g * ad / (bd * bd), b.shape),
        ),
    )


def maximum(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "maximum")
    out = np.maximum(a.data, b.data)
    mask = (a.data >= b.data).astype(a.dtype)
    return make_op(
        out, (a, b),
        lambda g: (_unbroadcast_scalar(g * mask, a.shape), _unbroadcast_scalar(g * (1 - mask), b.shape)),
    )


def minimum(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "minimum")
    out = np.minimum(a.data, b.data)
    mask = (a.data <= b.data).astype(a.dtype)
    return make_op(
        out, (a, b),
        lambda g: (_unbroadcast_scalar(g * mask, a.shape), _unbroadcast_scalar(g * (1 - mask), b.shape)),
    )


# -- unary elementwise -------------------------------------------------------


def absval(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    return make_op(np.abs(x.data), (x,), lambda g: (g * s,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log: argument must be positive")
    xd = x.data
    return make_op(np.log(xd), (x,), lambda g: (g / xd,))


def log1p(x: Tensor) -> Tensor:
    if np.any(x.data <= -1):
        raise NumericError("log1p: argument must exceed -1")
    xd = x.data
    return make_op(np.log1p(xd), (x,), lambda g: (g / (1.0 + xd),))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data)
    sig = _sigmoid(x.data)
    return make_op(out, (x,), lambda g: (g * sig,))


def relu(x: Tensor) -> Tensor:
    mask = (x.data > 0).astype(x.dtype)
    return make_op(x.data * mask, (x,), lambda g: (g * mask,))


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise NumericError("sqrt: argument must be non-negative")
    out = np.sqrt(x.data)
    return make_op(out, (x,), lambda g: (g * 0.5 / np.maximum(out, np.finfo(x.dtype).tiny),))


_ELEMENTWISE_BINARY = {"add": add, "mul": mul, "sub": sub}
_ELEMENTWISE_UNARY = {"abs": absval, "exp": exp, "log1p": log1p, "softplus": softplus, "relu": relu}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatching surface for the pointwise op family."""
    if op in _ELEMENTWISE_BINARY:
        if b is None:
            raise ShapeError(f"elementwise {op!r} needs two operands")
        return _ELEMENTWISE_BINARY[op](a, b)
    if op in _ELEMENTWISE_UNARY:
        if b is not None:
            raise ShapeError(f"elementwise {op!r} is unary")
        return _ELEMENTWISE_UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# -- reductions ---------------------------------------------------------------


def _norm_axes(axes, ndim):
    if axes is None:
        return None
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(a) % ndim if -ndim <= int(a) < ndim else _axis_err(a, ndim) for a in axes)
    return axes


def _axis_err(a, ndim):
    raise ShapeError(f"axis {a} out of range for ndim {ndim}")


def _expand_reduced(g, shape, axes):
    if axes is None:
        return np.broadcast_to(g, shape).copy()
    g_exp = g
    for ax in sorted(axes):
        g_exp = np.expand_dims(g_exp, ax)
    return np.broadcast_to(g_exp, shape).copy()


def reduce_sum(x: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes, x.ndim)
    out = np.sum(x.data, axis=axes)
    shape = x.shape
    return make_op(out, (x,), lambda g: (_expand_reduced(g, shape, axes),))


def reduce_mean(x: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes, x.ndim)
    out = np.mean(x.data, axis=axes)
    shape = x.shape
    n = x.size if axes is None else int(np.prod([shape[a] for a in axes]))
    return make_op(out, (x,), lambda g: (_expand_reduced(g, shape, axes) / n,))


def l1_norm(x: Tensor, axes=None) -> Tensor:
    return reduce_sum(absval(x), axes)


def l2_norm_sq(x: Tensor, axes=None) -> Tensor:
    return reduce_sum(mul(x, x), axes)


_REDUCE = {"sum": reduce_sum, "mean": reduce_mean, "l1_norm": l1_norm, "l2_norm_sq": l2_norm_sq}


def reduce(op: str, x: Tensor, axes=None) -> Tensor:
    if op not in _REDUCE:
        raise ValueError(f"unknown reduce op {op!r}")
    return _REDUCE[op](x, axes)


# -- structural ops -----------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    out = x.data.reshape(shape)
    return make_op(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return make_op(out, (x,), lambda g: (np.transpose(g, inv),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicit broadcast; gradient sums over the expanded axes."""
    shape = tuple(shape)
    out = np.broadcast_to(x.data, shape)
    in_shape = x.shape

    def bwd(g):
        extra = len(shape) - len(in_shape)
        red = tuple(range(extra)) + tuple(
            i + extra for i, d in enumerate(in_shape) if d == 1 and shape[i + extra] != 1
        )
        gg = np.sum(g, axis=red, keepdims=False) if red else g
        return (gg.reshape(in_shape),)

    return make_op(out.copy(), (x,), bwd)


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op(out, tuple(tensors), bwd)


def stack(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(np.squeeze(p, axis=axis) for p in parts)

    return make_op(out, tuple(tensors), bwd)


def flip(x: Tensor, axis: int) -> Tensor:
    out = np.flip(x.data, axis=axis).copy()
    return make_op(out, (x,), lambda g: (np.flip(g, axis=axis),))


def getitem(x: Tensor, key) -> Tensor:
    out = x.data[key]
    shape = x.shape

    def bwd(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[key] = g
        return (gx,)

    return make_op(out.copy() if isinstance(out, np.ndarray) else np.asarray(out), (x,), bwd)


def take(x: Tensor, flat_indices) -> Tensor:
    """Gather from the flattened tensor; backward scatter-adds."""
    idx = np.asarray(flat_indices, dtype=np.int64)
    out = x.data.reshape(-1)[idx]
    shape = x.shape

    def bwd(g):
        gx = np.zeros(int(np.prod(shape)), dtype=g.dtype)
        np.add.at(gx, idx, g.reshape(-1))
        return (gx.reshape(shape),)

    return make_op(out, (x,), bwd)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul dtype mismatch {a.dtype} vs {b.dtype}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bwd(g):
        ga = g @ bd.T
        gb = ad.T @ g
        if _break_grad:
            ga = ga * 1.01
        return (ga, gb)

    return make_op(out, (a, b), bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul [B,m,k] x [B,k,n] -> [B,m,n]."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm expects [B,m,k] x [B,k,n], got {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bwd(g):
        return (g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g)

    return make_op(out, (a, b), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = axis % x.ndim if -x.ndim <= axis < x.ndim else _axis_err(axis, x.ndim)
    if x.shape[ax] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = x.data - np.max(x.data, axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=ax, keepdims=True)

    def bwd(g):
        dot = np.sum(g * out, axis=ax, keepdims=True)
        return (out * (g - dot),)

    return make_op(out, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log(softmax); gradients stay alive when saturated."""
    ax = axis % x.ndim if -x.ndim <= axis < x.ndim else _axis_err(axis, x.ndim)
    if x.shape[ax] == 0:
        raise ShapeError("log_softmax over an empty axis")
    shifted = x.data - np.max(x.data, axis=ax, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=ax, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bwd(g):
        return (g - sm * np.sum(g, axis=ax, keepdims=True),)

    return make_op(out, (x,), bwd)


# -- convolution --------------------------------------------------------------


def _conv_geometry(h, w, kh, kw, stride, pad):
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if kh > h + 2 * pad or kw > w + 2 * pad or ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit padded input {h}x{w} (pad {pad})")
    return ho, wo


def _im2col(xp, kh, kw, stride, ho, wo):
    b, c = xp.shape[0], xp.shape[1]
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride]
    return cols.reshape(b, c * kh * kw, ho * wo)


def _col2im(gcols, xp_shape, kh, kw, stride, ho, wo):
    b, c, hp, wp = xp_shape
    g = gcols.reshape(b, c, kh, kw, ho, wo)
    gx = np.zeros(xp_shape, dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += g[:, :, i, j]
    return gx


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation of ``x`` ([C,H,W] or batched [B,C,H,W]) with kernel [Co,Ci,kh,kw]."""
    squeeze = x.ndim == 3
    if x.ndim not in (3, 4) or kernel.ndim != 4:
        raise ShapeError(f"conv2d: bad ranks {x.shape}, {kernel.shape}")
    xd = x.data[None] if squeeze else x.data
    co, ci, kh, kw = kernel.shape
    if xd.shape[1] != ci:
        raise ShapeError(f"conv2d: input channels {xd.shape[1]} != kernel in-channels {ci}")
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d: stride must be >=1 and pad >=0")
    b, _, h, w = xd.shape
    ho, wo = _conv_geometry(h, w, kh, kw, stride, pad)
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = kernel.data.reshape(co, ci * kh * kw)
    out = (wmat[None] @ cols).reshape(b, co, ho, wo)
    if bias is not None:
        if bias.shape != (co,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({co},)")
        out = out + bias.data.reshape(1, co, 1, 1)
    out_ret = out[0] if squeeze else out
    xp_shape = xp.shape

    def bwd(g):
        gb4 = g[None] if squeeze else g
        gflat = gb4.reshape(b, co, ho * wo)
        gw = np.einsum("bol,bkl->ok", gflat, cols).reshape(kernel.shape)
        gcols = wmat.T[None] @ gflat
        gxp = _col2im(gcols, xp_shape, kh, kw, stride, ho, wo)
        gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        gx = gx[0] if squeeze else gx
        grads = [gx, gw]
        if bias is not None:
            grads.append(gb4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_op(out_ret, parents, bwd)


# -- gradient checking --------------------------------------------------------


def finite_diff_grad(f, x: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``x``.

    Independent of the tape: ``f`` is evaluated with autograd off, so this
    is a valid oracle for ``backward``.
    """
    base = x.data.astype(np.float64).copy()
    g = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Tensor(base.copy(), dtype=np.float64)).item()
            flat[i] = orig - eps
            fm = f(Tensor(base.copy(), dtype=np.float64)).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def grad_check(f, xs, eps: float = 1e-6) -> float:
    """Max relative error between analytic and finite-difference gradients.

    ``xs`` are float64 leaf tensors fed to ``f``; the relative error per
    coordinate uses denominator max(|fd|, 1e-2) so near-zero gradients are
    compared absolutely at the same 'rel err' scale.
    """
    for t in xs:
        if t.dtype != np.float64:
            raise NumericError("grad_check requires float64 inputs")
        t.grad = None
        t.requires_grad = True
    out = f(*xs)
    backward(out)
    worst = 0.0
    for k, t in enumerate(xs):
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad

        def f_single(v, _k=k):
            args = [v if j == _k else Tensor(xs[j].data, dtype=np.float64) for j in range(len(xs))]
            return f(*args)

        fd = finite_diff_grad(f_single, t, eps)
        rel = np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-2)
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
    return worst


def assert_all_finite(t: Tensor, what: str = "tensor") -> None:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"{what} contains NaN or Inf")
