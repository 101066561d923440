"""JIT-compiled inner loops for the conv2d hot path.

The kernels operate on channel-last buffers so the innermost copies run over
contiguous kw*C-sized rows.  Everything here is plain data movement; the
arithmetic lives in BLAS matmuls on the packed matrices.  Falls back to a
numpy implementation when numba is unavailable.
"""

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


@njit(cache=True)
def _pack_patches_jit(x2, col, kh, kw_c, c, oh_n, ow_n):
    # explicit element loop: numba vectorizes this where a slice assignment
    # falls back to a generic (4x slower) copy routine
    n_img = x2.shape[0]
    for n in range(n_img):
        for oh in range(oh_n):
            for ow in range(ow_n):
                off = ow * c
                for u in range(kh):
                    src = x2[n, oh + u]
                    dst = col[n, oh, ow, u]
                    for j in range(kw_c):
                        dst[j] = src[off + j]


def _pack_patches_numpy(x2, col, kh, kw_c, c, oh_n, ow_n):
    # windows over the flattened (W*C) axis, one strided copy per kernel row
    win = np.lib.stride_tricks.sliding_window_view(x2, kw_c, axis=2)[:, :, ::c, :]
    for u in range(kh):
        col[:, :, :, u, :] = win[:, u:u + oh_n, :ow_n]


def pack_patches(xp, kh, kw, out=None):
    """im2col for stride-1 cross-correlation.

    xp: [N, Hp, Wp, C] channel-last, C-contiguous.
    Returns col [N*OH*OW, kh*kw*C] with (u, v, c) inner order.
    """
    n, hp, wp, c = xp.shape
    oh_n, ow_n = hp - kh + 1, wp - kw + 1
    if kh == 1 and kw == 1:
        # pointwise convolution: the NHWC buffer already is the col matrix
        return xp.reshape(n * hp * wp, c), oh_n, ow_n
    if out is None:
        out = np.empty((n, oh_n, ow_n, kh, kw * c), dtype=xp.dtype)
    else:
        out = out.reshape(n, oh_n, ow_n, kh, kw * c)
    x2 = xp.reshape(n, hp, wp * c)
    if _HAVE_NUMBA and xp.dtype == np.float32:
        _pack_patches_jit(x2, out, kh, kw * c, c, oh_n, ow_n)
    else:
        _pack_patches_numpy(x2, out, kh, kw * c, c, oh_n, ow_n)
    return out.reshape(n * oh_n * ow_n, kh * kw * c), oh_n, ow_n


class BufferPool:
    """Recycles large scratch arrays so steady-state training does not churn
    the allocator (glibc munmaps big blocks on free, which costs page faults
    on every reallocation)."""

    def __init__(self, max_per_key=6):
        self._free = {}
        self.max_per_key = max_per_key

    def take(self, shape, dtype):
        key = (shape, np.dtype(dtype).str)
        stack = self._free.get(key)
        if stack:
            return stack.pop()
        return np.empty(shape, dtype=dtype)

    def give(self, arr):
        key = (arr.shape, arr.dtype.str)
        stack = self._free.setdefault(key, [])
        if len(stack) < self.max_per_key:
            stack.append(arr)

    def clear(self):
        self._free.clear()


POOL = BufferPool()
