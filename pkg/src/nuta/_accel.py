"""Hot inner kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``NUTA_DISABLE_NUMBA`` is unset (or "0").  Both paths accumulate in
the same order, so results are bit-identical between them.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("NUTA_DISABLE_NUMBA", "0") in ("", "0")


# ---------------------------------------------------------------------------
# numpy reference kernels
# ---------------------------------------------------------------------------

def vol2col_numpy(xp, ksize, stride, out_size):
    kt, kh, kw = ksize
    st, sh, sw = stride
    to, ho, wo = out_size
    win = sliding_window_view(xp, (kt, kh, kw), axis=(2, 3, 4))
    win = win[:, :, : (to - 1) * st + 1 : st, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
    # [N, C, To, Ho, Wo, kt, kh, kw] -> [N, C, kt, kh, kw, To, Ho, Wo]
    return np.ascontiguousarray(win.transpose(0, 1, 5, 6, 7, 2, 3, 4))


def col2vol_numpy(cols, padded_shape, stride):
    n, c, kt, kh, kw, to, ho, wo = cols.shape
    st, sh, sw = stride
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for a in range(kt):
        for b in range(kh):
            for d in range(kw):
                out[:, :, a : a + (to - 1) * st + 1 : st,
                    b : b + (ho - 1) * sh + 1 : sh,
                    d : d + (wo - 1) * sw + 1 : sw] += cols[:, :, a, b, d]
    return out


def tmax2_forward_numpy(x):
    n, c, t, h, w = x.shape
    pairs = x.reshape(n, c, t // 2, 2, h, w)
    first, second = pairs[:, :, :, 0], pairs[:, :, :, 1]
    # ties go to the earlier frame
    pick_second = second > first
    out = np.where(pick_second, second, first)
    return out, pick_second.astype(np.int8)


def tmax2_backward_numpy(grad, pick):
    n, c, th, h, w = grad.shape
    out = np.zeros((n, c, th, 2, h, w), dtype=grad.dtype)
    out[:, :, :, 0] = np.where(pick == 0, grad, 0)
    out[:, :, :, 1] = np.where(pick == 1, grad, 0)
    return out.reshape(n, c, th * 2, h, w)


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _col2vol_nb(cols, out, st, sh, sw):
        n, c, kt, kh, kw, to, ho, wo = cols.shape
        for i in range(n):
            for ch in range(c):
                for a in range(kt):
                    for b in range(kh):
                        for d in range(kw):
                            for t in range(to):
                                ti = t * st + a
                                for y in range(ho):
                                    yi = y * sh + b
                                    for x in range(wo):
                                        out[i, ch, ti, yi, x * sw + d] += cols[i, ch, a, b, d, t, y, x]
        return out

    @njit(cache=True)
    def _tmax2_forward_nb(x):
        n, c, t, h, w = x.shape
        out = np.empty((n, c, t // 2, h, w), dtype=x.dtype)
        pick = np.empty((n, c, t // 2, h, w), dtype=np.int8)
        for i in range(n):
            for ch in range(c):
                for s in range(t // 2):
                    for y in range(h):
                        for z in range(w):
                            u = x[i, ch, 2 * s, y, z]
                            v = x[i, ch, 2 * s + 1, y, z]
                            if v > u:
                                out[i, ch, s, y, z] = v
                                pick[i, ch, s, y, z] = 1
                            else:
                                out[i, ch, s, y, z] = u
                                pick[i, ch, s, y, z] = 0
        return out, pick

    @njit(cache=True)
    def _tmax2_backward_nb(grad, pick):
        n, c, th, h, w = grad.shape
        out = np.zeros((n, c, 2 * th, h, w), dtype=grad.dtype)
        for i in range(n):
            for ch in range(c):
                for s in range(th):
                    for y in range(h):
                        for z in range(w):
                            out[i, ch, 2 * s + pick[i, ch, s, y, z], y, z] = grad[i, ch, s, y, z]
        return out

    # The numpy gather is one strided copy and already memory-bound; compiled
    # loops measured about 2x slower, so both backends share it.
    vol2col_numba = vol2col_numpy

    def col2vol_numba(cols, padded_shape, stride):
        out = np.zeros(padded_shape, dtype=cols.dtype)
        return _col2vol_nb(np.ascontiguousarray(cols), out, *stride)

    def tmax2_forward_numba(x):
        return _tmax2_forward_nb(np.ascontiguousarray(x))

    def tmax2_backward_numba(grad, pick):
        return _tmax2_backward_nb(np.ascontiguousarray(grad), np.ascontiguousarray(pick))


def backend():
    return "numba" if USE_NUMBA else "numpy"


def _pick(name):
    impl = globals()[f"{name}_numba" if USE_NUMBA else f"{name}_numpy"]
    return impl


vol2col = _pick("vol2col")
col2vol = _pick("col2vol")
tmax2_forward = _pick("tmax2_forward")
tmax2_backward = _pick("tmax2_backward")
