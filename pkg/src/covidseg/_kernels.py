"""Compiled numeric kernels.

Convolution accumulates each output element over kernel taps in the fixed
order (in_channel, tap_row, tap_col), skipping taps that fall outside the
input. That documented order is the reproducibility contract:
``conv2d_forward`` is bitwise-identical to the pure-Python
``conv2d_reference``, regardless of thread count, because every output
element is produced by one thread with the same sequence of IEEE-754
multiply/add operations. Two layout variants exist per pass - one
vectorized along output columns, one along channels - chosen by shape;
both walk taps in the same per-element order, so the choice never changes
a single bit. Loops are written so LLVM vectorizes them without
reassociation or FMA contraction (either would change results).

Pooling, upsampling, and ReLU kernels are single-pass with fixed
traversal order.
"""

import ctypes
import os
import sys

# The portable built-in threading layer avoids a TBB version probe warning;
# kernels are bitwise-reproducible under any layer and thread count.
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

import numpy as np
from numba import njit, prange


def _keep_heap_pages() -> None:
    # Training allocates and frees the same activation buffers every step;
    # with glibc defaults those go through mmap/munmap and every step pays
    # page faults for hundreds of MB. Routing large allocations through the
    # arena and disabling trim lets freed pages be reused already mapped.
    if not sys.platform.startswith("linux"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-4, 0)  # M_MMAP_MAX = 0
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD = 1 GiB
    except (OSError, AttributeError):
        pass


_keep_heap_pages()

__all__ = [
    "conv2d_forward",
    "conv2d_backward_input",
    "conv2d_backward_weight",
    "conv2d_reference",
    "relu_forward",
    "relu_backward",
    "max_pool2_forward",
    "pool2_backward_max",
    "avg_pool2_forward",
    "avg_pool2_backward",
    "mixed_pool2_forward",
    "mixed_pool2_backward",
    "upsample2_forward",
    "upsample2_backward",
]


def _tap_bounds(off: int, stride: int, extent: int, out_extent: int):
    jlo = 0
    if off < 0:
        jlo = (-off + stride - 1) // stride
    jhi = out_extent
    top = (extent - 1 - off) // stride + 1
    if top < jhi:
        jhi = top
    return jlo, jhi


# ---------------------------------------------------------------------------
# convolution, rows variant: inner loops run along output columns.


@njit(cache=True, parallel=True)
def _conv_fwd_rows(x, w, b, stride, padding, dilation, apply_relu, out):
    n_batch, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    oh, ow = out.shape[2], out.shape[3]
    for idx in prange(n_batch * c_out):
        n = idx // c_out
        co = idx % c_out
        acc = np.empty(ow, dtype=x.dtype)
        for i in range(oh):
            bias = b[co]
            for j in range(ow):
                acc[j] = bias
            for ci in range(c_in):
                for p in range(kh):
                    ih = i * stride + p * dilation - padding
                    if ih < 0 or ih >= h:
                        continue
                    xrow = x[n, ci, ih]
                    for q in range(kw):
                        wt = w[co, ci, p, q]
                        off = q * dilation - padding
                        jlo = 0
                        if off < 0:
                            jlo = (-off + stride - 1) // stride
                        jhi = ow
                        top = (wd - 1 - off) // stride + 1
                        if top < jhi:
                            jhi = top
                        m = jhi - jlo
                        if m <= 0:
                            continue
                        sub = acc[jlo:]
                        if stride == 1:
                            xc = xrow[jlo + off:]
                            for t in range(m):
                                sub[t] += xc[t] * wt
                        else:
                            xc = xrow[jlo * stride + off::stride]
                            for t in range(m):
                                sub[t] += xc[t] * wt
            orow = out[n, co, i]
            if apply_relu:
                for j in range(ow):
                    v = acc[j]
                    orow[j] = v if v > 0.0 else 0.0
            else:
                for j in range(ow):
                    orow[j] = acc[j]


@njit(cache=True, parallel=True)
def _conv_bwd_input_rows(g, w, stride, padding, dilation, dx):
    n_batch, c_out, oh, ow = g.shape
    _, c_in, kh, kw = w.shape
    h, wd = dx.shape[2], dx.shape[3]
    for idx in prange(n_batch * c_in):
        n = idx // c_in
        ci = idx % c_in
        dxm = dx[n, ci]
        for ih in range(h):
            drow = dxm[ih]
            for iw in range(wd):
                drow[iw] = 0.0
        for co in range(c_out):
            gm = g[n, co]
            for i in range(oh):
                grow = gm[i]
                for p in range(kh):
                    ih = i * stride + p * dilation - padding
                    if ih < 0 or ih >= h:
                        continue
                    drow = dxm[ih]
                    for q in range(kw):
                        wt = w[co, ci, p, q]
                        off = q * dilation - padding
                        jlo = 0
                        if off < 0:
                            jlo = (-off + stride - 1) // stride
                        jhi = ow
                        top = (wd - 1 - off) // stride + 1
                        if top < jhi:
                            jhi = top
                        m = jhi - jlo
                        if m <= 0:
                            continue
                        gsub = grow[jlo:]
                        if stride == 1:
                            dsub = drow[jlo + off:]
                            for t in range(m):
                                dsub[t] += gsub[t] * wt
                        else:
                            dsub = drow[jlo * stride + off::stride]
                            for t in range(m):
                                dsub[t] += gsub[t] * wt


# ---------------------------------------------------------------------------
# convolution, channels variant: inner loops run along channels; better for
# deep layers whose feature maps are spatially tiny. Same per-element tap
# order as the rows variant.


@njit(cache=True, parallel=True)
def _conv_fwd_channels(x, w_t, b, stride, padding, dilation, apply_relu, out):
    # w_t layout: (c_in, kh, kw, c_out)
    n_batch, c_in, h, wd = x.shape
    kh, kw, c_out = w_t.shape[1], w_t.shape[2], w_t.shape[3]
    oh, ow = out.shape[2], out.shape[3]
    for n in prange(n_batch):
        acc = np.empty((ow, c_out), dtype=x.dtype)
        for i in range(oh):
            for j in range(ow):
                arow = acc[j]
                for co in range(c_out):
                    arow[co] = b[co]
            for ci in range(c_in):
                for p in range(kh):
                    ih = i * stride + p * dilation - padding
                    if ih < 0 or ih >= h:
                        continue
                    xrow = x[n, ci, ih]
                    for q in range(kw):
                        off = q * dilation - padding
                        jlo = 0
                        if off < 0:
                            jlo = (-off + stride - 1) // stride
                        jhi = ow
                        top = (wd - 1 - off) // stride + 1
                        if top < jhi:
                            jhi = top
                        wrow = w_t[ci, p, q]
                        for j in range(jlo, jhi):
                            xv = xrow[j * stride + off]
                            arow = acc[j]
                            for co in range(c_out):
                                arow[co] += xv * wrow[co]
            if apply_relu:
                for j in range(ow):
                    arow = acc[j]
                    for co in range(c_out):
                        v = arow[co]
                        out[n, co, i, j] = v if v > 0.0 else 0.0
            else:
                for j in range(ow):
                    arow = acc[j]
                    for co in range(c_out):
                        out[n, co, i, j] = arow[co]


@njit(cache=True, parallel=True)
def _conv_bwd_input_channels(g, w_t, stride, padding, dilation, dx):
    # w_t layout: (c_out, kh, kw, c_in)
    n_batch, c_out, oh, ow = g.shape
    kh, kw, c_in = w_t.shape[1], w_t.shape[2], w_t.shape[3]
    h, wd = dx.shape[2], dx.shape[3]
    for n in prange(n_batch):
        acc = np.zeros((h, wd, c_in), dtype=g.dtype)
        for co in range(c_out):
            gm = g[n, co]
            for i in range(oh):
                grow = gm[i]
                for p in range(kh):
                    ih = i * stride + p * dilation - padding
                    if ih < 0 or ih >= h:
                        continue
                    am = acc[ih]
                    for q in range(kw):
                        off = q * dilation - padding
                        jlo = 0
                        if off < 0:
                            jlo = (-off + stride - 1) // stride
                        jhi = ow
                        top = (wd - 1 - off) // stride + 1
                        if top < jhi:
                            jhi = top
                        wrow = w_t[co, p, q]
                        for j in range(jlo, jhi):
                            gv = grow[j]
                            arow = am[j * stride + off]
                            for ci in range(c_in):
                                arow[ci] += gv * wrow[ci]
        dxm = dx[n]
        for ih in range(h):
            am = acc[ih]
            for iw in range(wd):
                arow = am[iw]
                for ci in range(c_in):
                    dxm[ci, ih, iw] = arow[ci]


@njit(cache=True, parallel=True)
def _conv_bwd_weight_channels(x, g_t, stride, padding, dilation, dw_t):
    # g_t layout: (n, oh, ow, c_out); dw_t layout: (c_in, kh, kw, c_out)
    n_batch, c_in, h, wd = x.shape
    oh, ow, c_out = g_t.shape[1], g_t.shape[2], g_t.shape[3]
    kh, kw = dw_t.shape[1], dw_t.shape[2]
    for ci in prange(c_in):
        for p in range(kh):
            for q in range(kw):
                off = q * dilation - padding
                jlo = 0
                if off < 0:
                    jlo = (-off + stride - 1) // stride
                jhi = ow
                top = (wd - 1 - off) // stride + 1
                if top < jhi:
                    jhi = top
                arow = dw_t[ci, p, q]
                for co in range(c_out):
                    arow[co] = 0.0
                for n in range(n_batch):
                    xm = x[n, ci]
                    gm = g_t[n]
                    for i in range(oh):
                        ih = i * stride + p * dilation - padding
                        if ih < 0 or ih >= h:
                            continue
                        xrow = xm[ih]
                        gr = gm[i]
                        for j in range(jlo, jhi):
                            xv = xrow[j * stride + off]
                            grow = gr[j]
                            for co in range(c_out):
                                arow[co] += xv * grow[co]


# ---------------------------------------------------------------------------
# dispatch wrappers


# Variant choices below follow shape benchmarks on the target CPU class:
# channel-vectorized kernels win except when the vector lane count is
# small (< 16 channels) on large feature maps, where the column loops
# have enough length to vectorize instead.


def conv2d_forward(x, w, b, stride, padding, dilation, out,
                   apply_relu=False):
    c_out = w.shape[0]
    ow = out.shape[3]
    if c_out >= 16 or ow <= 24:
        w_t = np.ascontiguousarray(w.transpose(1, 2, 3, 0))
        _conv_fwd_channels(x, w_t, b, stride, padding, dilation, apply_relu,
                           out)
    else:
        _conv_fwd_rows(x, w, b, stride, padding, dilation, apply_relu, out)
    return out


def conv2d_backward_input(g, w, stride, padding, dilation, dx):
    c_in = w.shape[1]
    wd = dx.shape[3]
    if c_in >= 16 and wd <= 48 or wd <= 24:
        w_t = np.ascontiguousarray(w.transpose(0, 2, 3, 1))
        _conv_bwd_input_channels(g, w_t, stride, padding, dilation, dx)
    else:
        _conv_bwd_input_rows(g, w, stride, padding, dilation, dx)
    return dx


def conv2d_backward_weight(x, g, stride, padding, dilation, dw):
    c_out = g.shape[1]
    g_t = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
    dw_t = np.empty((dw.shape[1], dw.shape[2], dw.shape[3], c_out),
                    dtype=dw.dtype)
    _conv_bwd_weight_channels(x, g_t, stride, padding, dilation, dw_t)
    dw[...] = dw_t.transpose(3, 0, 1, 2)
    return dw


def conv2d_reference(x, w, b, stride=1, padding=0, dilation=1):
    """Naive loop convolution, the verification twin of ``conv2d_forward``.

    Accumulates in pure Python floats over the same (in_channel, tap_row,
    tap_col) order with the same out-of-range skip rule, so the result is
    bitwise-identical to the compiled kernels. Intended for tests.
    """
    n_batch, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    oh = (h + 2 * padding - ((kh - 1) * dilation + 1)) // stride + 1
    ow = (wd + 2 * padding - ((kw - 1) * dilation + 1)) // stride + 1
    out = np.empty((n_batch, c_out, oh, ow), dtype=x.dtype)
    for n in range(n_batch):
        for co in range(c_out):
            for i in range(oh):
                for j in range(ow):
                    acc = float(b[co])
                    for ci in range(c_in):
                        for p in range(kh):
                            ih = i * stride + p * dilation - padding
                            if ih < 0 or ih >= h:
                                continue
                            for q in range(kw):
                                iw = j * stride + q * dilation - padding
                                if iw < 0 or iw >= wd:
                                    continue
                                acc = acc + float(x[n, ci, ih, iw]) * float(w[co, ci, p, q])
                    out[n, co, i, j] = acc
    return out


# ---------------------------------------------------------------------------
# elementwise and pooling kernels


@njit(cache=True)
def relu_forward(x_flat, out_flat):
    for t in range(x_flat.shape[0]):
        v = x_flat[t]
        out_flat[t] = v if v > 0.0 else 0.0


@njit(cache=True)
def relu_backward(x_flat, g_flat, dx_flat):
    for t in range(x_flat.shape[0]):
        dx_flat[t] = g_flat[t] if x_flat[t] > 0.0 else 0.0


@njit(cache=True, parallel=True)
def max_pool2_forward(x, out, code):
    # code records the first row-major argmax of each 2x2 window (0..3)
    planes, oh, ow = out.shape
    for pl in prange(planes):
        xm = x[pl]
        om = out[pl]
        cm = code[pl]
        for i in range(oh):
            r0 = xm[2 * i]
            r1 = xm[2 * i + 1]
            for j in range(ow):
                a = r0[2 * j]
                b = r0[2 * j + 1]
                c = r1[2 * j]
                d = r1[2 * j + 1]
                best = a
                k = 0
                if b > best:
                    best = b
                    k = 1
                if c > best:
                    best = c
                    k = 2
                if d > best:
                    best = d
                    k = 3
                om[i, j] = best
                cm[i, j] = k


@njit(cache=True, parallel=True)
def pool2_backward_max(g, code, dx):
    planes, oh, ow = g.shape
    for pl in prange(planes):
        gm = g[pl]
        cm = code[pl]
        dm = dx[pl]
        for i in range(oh):
            d0 = dm[2 * i]
            d1 = dm[2 * i + 1]
            for j in range(ow):
                d0[2 * j] = 0.0
                d0[2 * j + 1] = 0.0
                d1[2 * j] = 0.0
                d1[2 * j + 1] = 0.0
                k = cm[i, j]
                gv = gm[i, j]
                if k == 0:
                    d0[2 * j] = gv
                elif k == 1:
                    d0[2 * j + 1] = gv
                elif k == 2:
                    d1[2 * j] = gv
                else:
                    d1[2 * j + 1] = gv


@njit(cache=True, parallel=True)
def avg_pool2_forward(x, out):
    planes, oh, ow = out.shape
    for pl in prange(planes):
        xm = x[pl]
        om = out[pl]
        for i in range(oh):
            r0 = xm[2 * i]
            r1 = xm[2 * i + 1]
            for j in range(ow):
                om[i, j] = (((r0[2 * j] + r0[2 * j + 1]) + r1[2 * j])
                            + r1[2 * j + 1]) * 0.25


@njit(cache=True, parallel=True)
def avg_pool2_backward(g, dx):
    planes, oh, ow = g.shape
    for pl in prange(planes):
        gm = g[pl]
        dm = dx[pl]
        for i in range(oh):
            d0 = dm[2 * i]
            d1 = dm[2 * i + 1]
            for j in range(ow):
                q = gm[i, j] * 0.25
                d0[2 * j] = q
                d0[2 * j + 1] = q
                d1[2 * j] = q
                d1[2 * j + 1] = q


@njit(cache=True, parallel=True)
def mixed_pool2_forward(x, alpha, out, mx, av, code):
    # out = alpha*max + (1-alpha)*avg per window; avg uses the same
    # ((a+b)+c)+d order as avg_pool2_forward so alpha=0 matches it bitwise.
    planes, oh, ow = out.shape
    beta = 1.0 - alpha
    for pl in prange(planes):
        xm = x[pl]
        om = out[pl]
        mm = mx[pl]
        am = av[pl]
        cm = code[pl]
        for i in range(oh):
            r0 = xm[2 * i]
            r1 = xm[2 * i + 1]
            for j in range(ow):
                a = r0[2 * j]
                b = r0[2 * j + 1]
                c = r1[2 * j]
                d = r1[2 * j + 1]
                best = a
                k = 0
                if b > best:
                    best = b
                    k = 1
                if c > best:
                    best = c
                    k = 2
                if d > best:
                    best = d
                    k = 3
                mean = (((a + b) + c) + d) * 0.25
                mm[i, j] = best
                am[i, j] = mean
                cm[i, j] = k
                om[i, j] = alpha * best + beta * mean


@njit(cache=True, parallel=True)
def mixed_pool2_backward(g, alpha, mx, av, code, dx, dalpha_parts):
    # dx = g*alpha routed to the argmax + g*(1-alpha)/4 to all four;
    # dalpha accumulates g*(max-avg) per plane, summed by the caller in
    # plane order (fixed reduction order).
    planes, oh, ow = g.shape
    beta4 = (1.0 - alpha) * 0.25
    for pl in prange(planes):
        gm = g[pl]
        mm = mx[pl]
        am = av[pl]
        cm = code[pl]
        dm = dx[pl]
        part = 0.0
        for i in range(oh):
            d0 = dm[2 * i]
            d1 = dm[2 * i + 1]
            for j in range(ow):
                gv = gm[i, j]
                q = gv * beta4
                d0[2 * j] = q
                d0[2 * j + 1] = q
                d1[2 * j] = q
                d1[2 * j + 1] = q
                k = cm[i, j]
                ga = gv * alpha
                if k == 0:
                    d0[2 * j] += ga
                elif k == 1:
                    d0[2 * j + 1] += ga
                elif k == 2:
                    d1[2 * j] += ga
                else:
                    d1[2 * j + 1] += ga
                part += gv * (mm[i, j] - am[i, j])
        dalpha_parts[pl] = part


@njit(cache=True, parallel=True)
def upsample2_forward(x, out):
    planes, h, w = x.shape
    for pl in prange(planes):
        xm = x[pl]
        om = out[pl]
        for i in range(h):
            src = xm[i]
            d0 = om[2 * i]
            d1 = om[2 * i + 1]
            for j in range(w):
                v = src[j]
                d0[2 * j] = v
                d0[2 * j + 1] = v
                d1[2 * j] = v
                d1[2 * j + 1] = v


@njit(cache=True, parallel=True)
def upsample2_backward(g, dx):
    planes, h, w = dx.shape
    for pl in prange(planes):
        gm = g[pl]
        dm = dx[pl]
        for i in range(h):
            g0 = gm[2 * i]
            g1 = gm[2 * i + 1]
            dst = dm[i]
            for j in range(w):
                dst[j] = ((g0[2 * j] + g0[2 * j + 1]) + g1[2 * j]) + g1[2 * j + 1]
