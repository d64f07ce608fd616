"""Hot numeric kernels for conv2d.

Two implementations are provided: numba ``@njit`` loops and a pure-numpy
path built from per-offset slicing.  Selection order:

- ``SMARTFREEZE_NUMBA=0`` (or numba missing) -> numpy path
- otherwise -> numba path

Each path is deterministic on its own (fixed summation order), which is
what reproducibility requires; across paths results agree to float64
rounding.  ``benchmarks/bench_kernels.py`` compares the two.
"""

from __future__ import annotations

import os

import numpy as np

_env = os.environ.get("SMARTFREEZE_NUMBA", "1").strip().lower()
_want_numba = _env not in ("0", "false", "no", "off")

try:
    if _want_numba:
        from numba import njit

        HAS_NUMBA = True
    else:
        HAS_NUMBA = False
except ImportError:  # pragma: no cover - exercised via env flag instead
    HAS_NUMBA = False


# ---------------------------------------------------------------- numpy path


def _conv2d_forward_np(xp, w, b, stride, h_out, w_out):
    n, _, _, _ = xp.shape
    c_out, c_in, k, _ = w.shape
    y = np.empty((n, c_out, h_out, w_out), dtype=np.float64)
    y[:] = b.reshape(1, c_out, 1, 1)
    for di in range(k):
        for dj in range(k):
            xs = xp[:, :, di : di + stride * h_out : stride, dj : dj + stride * w_out : stride]
            y += np.einsum("nchw,oc->nohw", xs, w[:, :, di, dj], optimize=True)
    return y


def _conv2d_backward_np(xp, w, dy, stride):
    n, c_out, h_out, w_out = dy.shape
    _, c_in, k, _ = w.shape
    dw = np.zeros_like(w)
    db = dy.sum(axis=(0, 2, 3))
    dxp = np.zeros_like(xp)
    for di in range(k):
        for dj in range(k):
            xs = xp[:, :, di : di + stride * h_out : stride, dj : dj + stride * w_out : stride]
            dw[:, :, di, dj] = np.einsum("nohw,nchw->oc", dy, xs, optimize=True)
            dxp[:, :, di : di + stride * h_out : stride, dj : dj + stride * w_out : stride] += (
                np.einsum("nohw,oc->nchw", dy, w[:, :, di, dj], optimize=True)
            )
    return dw, db, dxp


# ---------------------------------------------------------------- numba path

if HAS_NUMBA:

    @njit(cache=True)
    def _conv2d_forward_nb(xp, w, b, stride, h_out, w_out):  # pragma: no cover - jitted
        n = xp.shape[0]
        c_out = w.shape[0]
        c_in = w.shape[1]
        k = w.shape[2]
        y = np.empty((n, c_out, h_out, w_out), dtype=np.float64)
        for s in range(n):
            for co in range(c_out):
                for i in range(h_out):
                    for j in range(w_out):
                        acc = b[co]
                        for di in range(k):
                            for dj in range(k):
                                for ci in range(c_in):
                                    acc += (
                                        w[co, ci, di, dj]
                                        * xp[s, ci, i * stride + di, j * stride + dj]
                                    )
                        y[s, co, i, j] = acc
        return y

    @njit(cache=True)
    def _conv2d_backward_nb(xp, w, dy, stride):  # pragma: no cover - jitted
        n = dy.shape[0]
        c_out = dy.shape[1]
        h_out = dy.shape[2]
        w_out = dy.shape[3]
        c_in = w.shape[1]
        k = w.shape[2]
        dw = np.zeros_like(w)
        db = np.zeros(c_out, dtype=np.float64)
        dxp = np.zeros_like(xp)
        for s in range(n):
            for co in range(c_out):
                for i in range(h_out):
                    for j in range(w_out):
                        g = dy[s, co, i, j]
                        db[co] += g
                        for di in range(k):
                            for dj in range(k):
                                for ci in range(c_in):
                                    dw[co, ci, di, dj] += g * xp[s, ci, i * stride + di, j * stride + dj]
                                    dxp[s, ci, i * stride + di, j * stride + dj] += g * w[co, ci, di, dj]
        return dw, db, dxp


# ---------------------------------------------------------------- dispatch


def conv2d_forward(x, w, b, stride, pad):
    """``x`` (N,Cin,H,W), ``w`` (Cout,Cin,k,k) -> (N,Cout,Ho,Wo)."""
    n, c_in, h, wd = x.shape
    k = w.shape[2]
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    if HAS_NUMBA:
        y = _conv2d_forward_nb(xp, w, b, stride, h_out, w_out)
    else:
        y = _conv2d_forward_np(xp, w, b, stride, h_out, w_out)
    return y, xp


def conv2d_backward(xp, w, dy, stride, pad):
    """Gradients for conv2d; ``xp`` is the padded input kept from forward.

    Returns (dw, db, dx) with padding stripped from dx.
    """
    if HAS_NUMBA:
        dw, db, dxp = _conv2d_backward_nb(xp, w, dy, stride)
    else:
        dw, db, dxp = _conv2d_backward_np(xp, w, dy, stride)
    if pad:
        dx = dxp[:, :, pad:-pad, pad:-pad]
    else:
        dx = dxp
    return dw, db, dx
