"""Reverse-mode automatic differentiation on numpy-backed tensors.

A ``Tensor`` wraps a C-contiguous single-precision array (float64 is allowed
for double-checked gradient tests).  Operations executed while a ``Tape`` is
active are recorded in execution order, which is already a topological order,
so ``backward`` is a single reverse sweep with sum-accumulation of adjoints.

Outside a tape, the same operations run as plain array math with nothing
recorded, which is the inference path.
"""

import numpy as np

from pim._convkernels import POOL, pack_patches

DEFAULT_DTYPE = np.float32

# When set, every op validates that its output is finite.  Off by default:
# the documented error surfaces (conv2d inputs, loss values, training steps)
# check explicitly.
CHECK_FINITE = False

_TAPE_STACK = []


class TapeError(RuntimeError):
    pass


class Tape:
    """Records ops for one forward pass; one backward sweep per tape."""

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            # float arrays keep their precision; everything else becomes f32
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            # ascontiguousarray would promote 0-d arrays to shape (1,)
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

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

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; every overload routes through the module-level ops
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

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return take(self, idx)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _coerce_pair(a, b):
    """Lift plain values to tensors, casting python scalars to the partner's
    dtype.  Mixing float32 and float64 tensors is an error, not a promotion,
    to keep numerics predictable."""
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    if not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a, b


def _check_broadcast(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


def _record(out, inputs, vjp):
    tape = _active_tape()
    if tape is None:
        return out
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._nodes.append((out, inputs, vjp))
    return out


def _make_out(data):
    data = np.asarray(data)  # normalize numpy scalars to 0-d arrays
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by an op")
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = False
    t.grad = None
    return t


def unbroadcast(g, shape):
    """Sum gradient g down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b):
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b)
    out = _make_out(a.data + b.data)
    return _record(out, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b)
    out = _make_out(a.data - b.data)
    return _record(out, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b)
    out = _make_out(a.data * b.data)

    def vjp(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), vjp)


def div(a, b):
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b)
    out = _make_out(a.data / b.data)

    def vjp(g):
        return (unbroadcast(g / b.data, a.shape),
                unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _record(out, (a, b), vjp)


def affine(x, scale, shift):
    """Elementwise x*scale + shift with broadcasting; one fused node."""
    x = as_tensor(x)
    scale, shift = as_tensor(scale, dtype=x.dtype), as_tensor(shift, dtype=x.dtype)
    out = _make_out(x.data * scale.data + shift.data)

    def vjp(g):
        return (unbroadcast(g * scale.data, x.shape),
                unbroadcast(g * x.data, scale.shape),
                unbroadcast(g, shift.shape))

    return _record(out, (x, scale, shift), vjp)


def relu(x):
    x = as_tensor(x)
    out = _make_out(np.maximum(x.data, 0))
    # subgradient at 0 is 0: strict inequality
    return _record(out, (x,), lambda g: (g * (x.data > 0),))


def exp(x):
    x = as_tensor(x)
    e = np.exp(x.data)
    out = _make_out(e)
    return _record(out, (x,), lambda g: (g * e,))


def log(x):
    x = as_tensor(x)
    out = _make_out(np.log(x.data))
    return _record(out, (x,), lambda g: (g / x.data,))


def square(x):
    x = as_tensor(x)
    out = _make_out(x.data * x.data)
    return _record(out, (x,), lambda g: (2.0 * g * x.data,))


# ---------------------------------------------------------------------------
# reductions


def _restore_axes(g, x_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, x_shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % len(x_shape) for a in axes)
        shape = list(x_shape)
        for a in axes:
            shape[a] = 1
        g = g.reshape(shape)
    return np.broadcast_to(g, x_shape)


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = _make_out(x.data.sum(axis=axis, keepdims=keepdims, dtype=x.dtype))

    def vjp(g):
        return (_restore_axes(g, x.shape, axis, keepdims).astype(x.dtype, copy=False),)

    return _record(out, (x,), vjp)


def tmean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for a in axes:
            count *= x.shape[a]
    out = _make_out(x.data.mean(axis=axis, keepdims=keepdims, dtype=x.dtype))

    def vjp(g):
        gg = _restore_axes(g, x.shape, axis, keepdims) / x.dtype.type(count)
        return (gg.astype(x.dtype, copy=False),)

    return _record(out, (x,), vjp)


def softmax(x, axis):
    """Overflow-safe softmax; rows along ``axis`` sum to one."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _make_out(s)

    def vjp(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _record(out, (x,), vjp)


def logsumexp(x, axis, keepdims=False):
    """log(sum(exp(x))) along ``axis`` in max-subtraction form."""
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    se = e.sum(axis=axis, keepdims=True)
    val = m + np.log(se)
    out = _make_out(val if keepdims else np.squeeze(val, axis=axis))

    def vjp(g):
        soft = e / se
        return (_restore_axes(g, x.shape, axis, keepdims) * soft,)

    return _record(out, (x,), vjp)


# ---------------------------------------------------------------------------
# structural ops


def reshape(x, shape):
    x = as_tensor(x)
    out = _make_out(x.data.reshape(shape))
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def take(x, idx):
    """Basic slicing (slices / ints / ellipsis); gradient scatters back."""
    x = as_tensor(x)
    out = _make_out(np.ascontiguousarray(x.data[idx]))

    def vjp(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        gx[idx] = g.reshape(gx[idx].shape)
        return (gx,)

    return _record(out, (x,), vjp)


# ---------------------------------------------------------------------------
# conv2d


def _pad_same(h, w, kh, kw):
    ph, pw = kh // 2, kw // 2
    return ph, pw


def conv2d(x, kernel, stride=1, padding="valid"):
    """2-D cross-correlation over [N, C, H, W] with kernel [O, C, kh, kw].

    ``padding`` is "valid" or "same" (zeros); ``stride`` applies to both
    spatial axes.  Differentiable w.r.t. both input and kernel.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.dtype != kernel.dtype:
        raise TypeError(f"dtype mismatch: {x.dtype} vs {kernel.dtype}")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if not isinstance(stride, int) or stride < 1:
        raise ValueError(f"stride must be a positive int, got {stride!r}")
    if padding not in ("valid", "same"):
        raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")
    n, c, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if ck != c:
        raise ValueError(f"kernel expects {ck} input channels, input has {c}")
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError("conv2d input contains non-finite values")
    if not np.all(np.isfinite(kernel.data)):
        raise FloatingPointError("conv2d kernel contains non-finite values")

    ph, pw = (0, 0) if padding == "valid" else _pad_same(h, w, kh, kw)
    hp, wp = h + 2 * ph, w + 2 * pw
    if kh > hp or kw > wp:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")

    # channel-last padded buffer
    xp = np.zeros((n, hp, wp, c), dtype=x.dtype) if (ph or pw) else None
    xt = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    if xp is None:
        xp = xt
    else:
        xp[:, ph:ph + h, pw:pw + w, :] = xt

    recording = _active_tape() is not None and (x.requires_grad or kernel.requires_grad)
    pooled = recording and (kh, kw) != (1, 1)
    if stride == 1:
        col = POOL.take((n * (hp - kh + 1) * (wp - kw + 1), kh * kw * c), x.dtype) \
            if pooled else None
        colm, oh_n, ow_n = pack_patches(xp, kh, kw, out=col)
        kmat = kernel.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)
        y = colm @ np.ascontiguousarray(kmat)
        out_nhwc = y.reshape(n, oh_n, ow_n, o)
    else:
        colm_full, oh_full, ow_full = pack_patches(xp, kh, kw)
        oh_n = (hp - kh) // stride + 1
        ow_n = (wp - kw) // stride + 1
        col4 = colm_full.reshape(n, oh_full, ow_full, kh * kw * c)
        colm = np.ascontiguousarray(col4[:, ::stride, ::stride, :]).reshape(-1, kh * kw * c)
        kmat = kernel.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)
        y = colm @ np.ascontiguousarray(kmat)
        out_nhwc = y.reshape(n, oh_n, ow_n, o)

    out = _make_out(np.ascontiguousarray(out_nhwc.transpose(0, 3, 1, 2)))

    if not recording:
        return out

    def vjp(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1))  # [N, OH, OW, O]
        g2 = gt.reshape(-1, o)
        dk = None
        dx = None
        if kernel.requires_grad:
            if stride == 1:
                dk_mat = colm.T @ g2  # [kh*kw*C, O]
            else:
                dk_mat = colm.T @ g2
            dk = dk_mat.reshape(kh, kw, c, o).transpose(3, 2, 0, 1)
            dk = np.ascontiguousarray(dk)
        if x.requires_grad:
            # full correlation of the (dilated) output gradient with the
            # 180-degree-rotated kernel, then un-pad
            if stride == 1:
                gd = gt
            else:
                gd = np.zeros((n, (oh_n - 1) * stride + 1, (ow_n - 1) * stride + 1, o),
                              dtype=g.dtype)
                gd[:, ::stride, ::stride, :] = gt
            gp = np.zeros((n, gd.shape[1] + 2 * (kh - 1), gd.shape[2] + 2 * (kw - 1), o),
                          dtype=g.dtype)
            gp[:, kh - 1:kh - 1 + gd.shape[1], kw - 1:kw - 1 + gd.shape[2], :] = gd
            gh_n = gp.shape[1] - kh + 1
            gw_n = gp.shape[2] - kw + 1
            gbuf = POOL.take((n * gh_n * gw_n, kh * kw * o), g.dtype) \
                if (kh, kw) != (1, 1) else None
            gcol, gh, gw = pack_patches(gp, kh, kw, out=gbuf)
            krot = kernel.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(kh * kw * o, c)
            dxp = (gcol @ np.ascontiguousarray(krot)).reshape(n, gh, gw, c)
            if gbuf is not None:
                POOL.give(gcol)
            if gh != hp or gw != wp:
                # strided windows may not reach the last rows/columns
                full = np.zeros((n, hp, wp, c), dtype=g.dtype)
                full[:, :gh, :gw, :] = dxp
                dxp = full
            dxp = dxp[:, ph:ph + h, pw:pw + w, :]
            dx = np.ascontiguousarray(dxp.transpose(0, 3, 1, 2))
        if pooled and stride == 1:
            POOL.give(colm)
        return dx, dk

    return _record(out, (x, kernel), vjp)


# ---------------------------------------------------------------------------
# backward sweep


def backward(tape, loss):
    """Run the reverse sweep of ``tape`` from scalar ``loss``.

    Populates ``grad`` on every requires_grad leaf (tensors not produced by a
    recorded op), accumulating if a grad buffer is already present.
    """
    if not isinstance(tape, Tape):
        raise TypeError("backward expects a Tape")
    if tape._consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ValueError("loss must be a scalar Tensor")
    tape._consumed = True

    produced = {id(out) for out, _, _ in tape._nodes}
    if id(loss) not in produced:
        raise ValueError("loss is not an output recorded on this tape")
    adjoints = {id(loss): np.ones_like(loss.data)}
    leaves = {}

    for out, inputs, vjp in reversed(tape._nodes):
        g = adjoints.pop(id(out), None)
        if g is None:
            continue
        grads = vjp(g)
        for t, gi in zip(inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=t.dtype).reshape(t.shape)
            if id(t) in produced:
                acc = adjoints.get(id(t))
                adjoints[id(t)] = gi if acc is None else acc + gi
            else:
                if id(t) in leaves:
                    leaves[id(t)][1] += gi
                else:
                    # copy: vjp outputs may alias the incoming adjoint
                    leaves[id(t)] = [t, np.array(gi)]

    for t, g in leaves.values():
        t.grad = g if t.grad is None else t.grad + g
