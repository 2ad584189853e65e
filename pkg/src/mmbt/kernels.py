"""2-D convolution kernels: numba-jitted hot loops with a pure-numpy fallback.

The backend is chosen once at import time from the ``MMBT_KERNELS``
environment variable:

* ``numba`` (default) - fused ``@njit`` loops, parallelised over
  independent output slices so results are bit-identical regardless of
  thread count.
* ``numpy`` - vectorised im2col + BLAS matmul fallback. Used when numba
  is unavailable and as the reference implementation in tests and in
  ``benchmarks/bench_kernels.py``.

All kernels accept float32 or float64 arrays and implement
cross-correlation (no kernel flip) with zero padding.
"""

import os

import numpy as np

_VALID_BACKENDS = ("numba", "numpy")


def _requested_backend() -> str:
    value = os.environ.get("MMBT_KERNELS", "").strip().lower()
    if value and value not in _VALID_BACKENDS:
        raise ValueError(
            f"MMBT_KERNELS must be one of {_VALID_BACKENDS}, got {value!r}"
        )
    return value


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    """Output edge length; raises if the stride does not divide evenly."""
    span = size + 2 * pad - kernel
    if span < 0:
        raise ValueError(
            f"kernel {kernel} larger than padded input {size + 2 * pad}"
        )
    if span % stride != 0:
        raise ValueError(
            f"non-integral conv output: (({size} + 2*{pad} - {kernel}) / {stride}) "
            "must divide evenly"
        )
    return span // stride + 1


# ---------------------------------------------------------------------------
# numpy fallback: im2col views + BLAS contractions
# ---------------------------------------------------------------------------

def _pad_input(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _window_view(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (n, ci, ho, wo, kh, kw) strided view over the padded input
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return windows[:, :, ::stride, ::stride]


def conv2d_forward_numpy(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = _pad_input(x, pad)
    windows = _window_view(xp, kh, kw, stride)
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward_kernel_numpy(
    g: np.ndarray, x: np.ndarray, stride: int, pad: int, kh: int, kw: int
) -> np.ndarray:
    xp = _pad_input(x, pad)
    windows = _window_view(xp, kh, kw, stride)
    # (co, ci, kh, kw) <- sum over batch and output positions
    return np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))


def conv2d_backward_input_numpy(
    g: np.ndarray, w: np.ndarray, stride: int, pad: int, h: int, wd: int
) -> np.ndarray:
    n, co, ho, wo = g.shape
    _, ci, kh, kw = w.shape
    dxp = np.zeros((n, ci, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
    for ky in range(kh):
        for kx in range(kw):
            # contribution of tap (ky, kx): distinct output cells map to
            # distinct input pixels, so a strided += cannot collide
            contrib = np.tensordot(g, w[:, :, ky, kx], axes=([1], [0]))
            dxp[:, :, ky:ky + ho * stride:stride, kx:kx + wo * stride:stride] += (
                contrib.transpose(0, 3, 1, 2)
            )
    if pad == 0:
        return dxp
    return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + wd])


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

try:
    import numba
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

if HAVE_NUMBA:
    # Strategy: jitted patch gather/scatter (the memory-bound part numpy does
    # poorly through fancy indexing) around a BLAS np.dot contraction.

    @njit(parallel=True, cache=True)
    def _im2col_jit(x, kh, kw, stride, pad, ho, wo):  # pragma: no cover - jitted
        n, ci, h, wd = x.shape
        col = np.zeros((n * ho * wo, ci * kh * kw), dtype=x.dtype)
        for r in prange(n * ho * wo):
            b = r // (ho * wo)
            rem = r % (ho * wo)
            iy0 = (rem // wo) * stride - pad
            ix0 = (rem % wo) * stride - pad
            c = 0
            for ic in range(ci):
                for ky in range(kh):
                    iy = iy0 + ky
                    if 0 <= iy < h:
                        for kx in range(kw):
                            ix = ix0 + kx
                            if 0 <= ix < wd:
                                col[r, c] = x[b, ic, iy, ix]
                            c += 1
                    else:
                        c += kw
        return col

    @njit(parallel=True, cache=True)
    def _rows_to_nchw_jit(rows, n, co, ho, wo):  # pragma: no cover - jitted
        out = np.empty((n, co, ho, wo), dtype=rows.dtype)
        for r in prange(n * ho * wo):
            b = r // (ho * wo)
            rem = r % (ho * wo)
            oy = rem // wo
            ox = rem % wo
            for oc in range(co):
                out[b, oc, oy, ox] = rows[r, oc]
        return out

    @njit(parallel=True, cache=True)
    def _nchw_to_rows_jit(g):  # pragma: no cover - jitted
        n, co, ho, wo = g.shape
        rows = np.empty((n * ho * wo, co), dtype=g.dtype)
        for r in prange(n * ho * wo):
            b = r // (ho * wo)
            rem = r % (ho * wo)
            oy = rem // wo
            ox = rem % wo
            for oc in range(co):
                rows[r, oc] = g[b, oc, oy, ox]
        return rows

    @njit(parallel=True, cache=True)
    def _col2im_jit(dcol, n, ci, h, wd, kh, kw, stride, pad, ho, wo):  # pragma: no cover
        dx = np.zeros((n, ci, h, wd), dtype=dcol.dtype)
        # parallel over batch only: scatter-adds within one image collide
        for b in prange(n):
            for oy in range(ho):
                for ox in range(wo):
                    r = b * ho * wo + oy * wo + ox
                    iy0 = oy * stride - pad
                    ix0 = ox * stride - pad
                    c = 0
                    for ic in range(ci):
                        for ky in range(kh):
                            iy = iy0 + ky
                            if 0 <= iy < h:
                                for kx in range(kw):
                                    ix = ix0 + kx
                                    if 0 <= ix < wd:
                                        dx[b, ic, iy, ix] += dcol[r, c]
                                    c += 1
                            else:
                                c += kw
        return dx

    @njit(cache=True)
    def _conv2d_forward_jit(x, w, stride, pad):  # pragma: no cover - jitted
        n, ci, h, wd = x.shape
        co, _, kh, kw = w.shape
        ho = (h + 2 * pad - kh) // stride + 1
        wo = (wd + 2 * pad - kw) // stride + 1
        col = _im2col_jit(x, kh, kw, stride, pad, ho, wo)
        wmat = np.ascontiguousarray(w.reshape(co, ci * kh * kw).T)
        rows = np.dot(col, wmat)
        return _rows_to_nchw_jit(rows, n, co, ho, wo)

    @njit(cache=True)
    def _conv2d_backward_kernel_jit(g, x, stride, pad, kh, kw):  # pragma: no cover
        n, co, ho, wo = g.shape
        ci = x.shape[1]
        col = _im2col_jit(x, kh, kw, stride, pad, ho, wo)
        rows = _nchw_to_rows_jit(g)
        dwmat = np.dot(np.ascontiguousarray(col.T), rows)  # (ci*kh*kw, co)
        dw = np.ascontiguousarray(dwmat.T).reshape(co, ci, kh, kw)
        return dw

    @njit(cache=True)
    def _conv2d_backward_input_jit(g, w, stride, pad, h, wd):  # pragma: no cover
        n, co, ho, wo = g.shape
        ci, kh, kw = w.shape[1], w.shape[2], w.shape[3]
        rows = _nchw_to_rows_jit(g)
        wmat = np.ascontiguousarray(w.reshape(co, ci * kh * kw))
        dcol = np.dot(rows, wmat)  # (n*ho*wo, ci*kh*kw)
        return _col2im_jit(dcol, n, ci, h, wd, kh, kw, stride, pad, ho, wo)

    def conv2d_forward_numba(x, w, stride, pad):
        return _conv2d_forward_jit(
            np.ascontiguousarray(x), np.ascontiguousarray(w), stride, pad
        )

    def conv2d_backward_kernel_numba(g, x, stride, pad, kh, kw):
        return _conv2d_backward_kernel_jit(
            np.ascontiguousarray(g), np.ascontiguousarray(x), stride, pad, kh, kw
        )

    def conv2d_backward_input_numba(g, w, stride, pad, h, wd):
        return _conv2d_backward_input_jit(
            np.ascontiguousarray(g), np.ascontiguousarray(w), stride, pad, h, wd
        )


def _select_backend() -> str:
    requested = _requested_backend()
    if requested == "numpy":
        return "numpy"
    if requested == "numba" and not HAVE_NUMBA:
        raise ImportError("MMBT_KERNELS=numba but numba is not importable")
    return "numba" if HAVE_NUMBA else "numpy"


ACTIVE_BACKEND = _select_backend()

if ACTIVE_BACKEND == "numba":
    conv2d_forward = conv2d_forward_numba
    conv2d_backward_kernel = conv2d_backward_kernel_numba
    conv2d_backward_input = conv2d_backward_input_numba
else:
    conv2d_forward = conv2d_forward_numpy
    conv2d_backward_kernel = conv2d_backward_kernel_numpy
    conv2d_backward_input = conv2d_backward_input_numpy


def set_num_threads(n: int) -> None:
    """Cap kernel worker threads (no-op on the numpy backend)."""
    if HAVE_NUMBA:
        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
