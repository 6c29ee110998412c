"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time from ``EVRECON_BACKEND``
(``numba`` or ``numpy``; default ``numba`` when importable). Both
implementations are always reachable through :data:`NUMPY` and
:data:`NUMBA` so tests can compare them directly.

All kernels take already-padded inputs and never allocate anything larger
than their outputs.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba
    from numba import njit, prange

    # skip the TBB layer probe (warns on older TBB builds)
    if "NUMBA_THREADING_LAYER" not in os.environ:
        numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


# --------------------------------------------------------------------------
# numpy implementations


def _np_im2col(xpad, k, stride, ho, wo):
    n, c = xpad.shape[:2]
    win = sliding_window_view(xpad, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (n, c, ho, wo, k, k) -> (n, c, k, k, ho, wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, ho * wo)


def _np_col2im(cols, c, hp, wp, k, stride, ho, wo):
    n = cols.shape[0]
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(n, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return out


def _np_pixel_filter(xpad, atoms, l):
    n, c = xpad.shape[:2]
    _, a, _, h, w = atoms.shape
    z = np.zeros((n, c, a, h, w), dtype=xpad.dtype)
    for d in range(l * l):
        di, dj = divmod(d, l)
        xs = xpad[:, :, di : di + h, dj : dj + w]
        z += xs[:, :, None] * atoms[:, None, :, d]
    return z


def _np_pixel_filter_grad(xpad, atoms, gz, l):
    _, a, _, h, w = atoms.shape
    gx = np.zeros_like(xpad)
    ga = np.empty_like(atoms)
    for d in range(l * l):
        di, dj = divmod(d, l)
        xs = xpad[:, :, di : di + h, dj : dj + w]
        ga[:, :, d] = np.einsum("ncahw,nchw->nahw", gz, xs)
        gx[:, :, di : di + h, dj : dj + w] += np.einsum("ncahw,nahw->nchw", gz, atoms[:, :, d])
    return gx, ga


def _bilinear_setup(sx, sy, h, w):
    sx = np.clip(sx, 0.0, w - 1)
    sy = np.clip(sy, 0.0, h - 1)
    x0 = np.minimum(np.floor(sx).astype(np.int64), w - 1)
    y0 = np.minimum(np.floor(sy).astype(np.int64), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0
    return x0, x1, y0, y1, fx, fy


def _np_bilinear_sample(img, sx, sy):
    n, c, h, w = img.shape
    x0, x1, y0, y1, fx, fy = _bilinear_setup(sx, sy, h, w)
    nn = np.arange(n)[:, None, None]
    out = np.empty_like(img)
    for ch in range(c):
        im = img[:, ch]
        out[:, ch] = (
            (1 - fy) * ((1 - fx) * im[nn, y0, x0] + fx * im[nn, y0, x1])
            + fy * ((1 - fx) * im[nn, y1, x0] + fx * im[nn, y1, x1])
        )
    return out


def _np_bilinear_sample_grad(g, sx, sy):
    n, c, h, w = g.shape
    x0, x1, y0, y1, fx, fy = _bilinear_setup(sx, sy, h, w)
    base = (np.arange(n) * h * w)[:, None, None]
    out = np.zeros((c, n * h * w), dtype=g.dtype)
    for ch in range(c):
        gc = g[:, ch]
        for yy, xx, wt in (
            (y0, x0, (1 - fy) * (1 - fx)),
            (y0, x1, (1 - fy) * fx),
            (y1, x0, fy * (1 - fx)),
            (y1, x1, fy * fx),
        ):
            idx = (base + yy * w + xx).ravel()
            out[ch] += np.bincount(idx, weights=(gc * wt).ravel(), minlength=n * h * w)
    return out.reshape(c, n, h, w).transpose(1, 0, 2, 3).astype(g.dtype, copy=False)


def _np_voxel_accumulate(x, y, tn, p, bins, h, w):
    grid = np.zeros(bins * h * w, dtype=np.float64)
    if len(x) == 0:
        return grid.reshape(bins, h, w)
    t0 = np.floor(tn).astype(np.int64)
    frac = tn - t0
    pix = y.astype(np.int64) * w + x.astype(np.int64)
    for tb, wt in ((t0, 1.0 - frac), (t0 + 1, frac)):
        ok = (tb >= 0) & (tb < bins)
        np.add.at(grid, tb[ok] * h * w + pix[ok], p[ok] * wt[ok])
    return grid.reshape(bins, h, w)


NUMPY = SimpleNamespace(
    name="numpy",
    im2col=_np_im2col,
    col2im=_np_col2im,
    pixel_filter=_np_pixel_filter,
    pixel_filter_grad=_np_pixel_filter_grad,
    bilinear_sample=_np_bilinear_sample,
    bilinear_sample_grad=_np_bilinear_sample_grad,
    voxel_accumulate=_np_voxel_accumulate,
)


# --------------------------------------------------------------------------
# numba implementations

if HAVE_NUMBA:

    @njit(cache=True, parallel=True)
    def _nb_im2col_kernel(xpad, k, stride, ho, wo, out):
        n, c = xpad.shape[0], xpad.shape[1]
        for nc in prange(n * c):
            b = nc // c
            ch = nc % c
            for i in range(k):
                for j in range(k):
                    row = (ch * k + i) * k + j
                    for y in range(ho):
                        yy = y * stride + i
                        base = y * wo
                        for x in range(wo):
                            out[b, row, base + x] = xpad[b, ch, yy, x * stride + j]

    def _nb_im2col(xpad, k, stride, ho, wo):
        n, c = xpad.shape[:2]
        out = np.empty((n, c * k * k, ho * wo), dtype=xpad.dtype)
        _nb_im2col_kernel(np.ascontiguousarray(xpad), k, stride, ho, wo, out)
        return out

    @njit(cache=True, parallel=True)
    def _nb_col2im_kernel(cols, c, k, stride, ho, wo, out):
        n = cols.shape[0]
        # each (batch, channel) plane is written by exactly one thread
        for nc in prange(n * c):
            b = nc // c
            ch = nc % c
            for i in range(k):
                for j in range(k):
                    row = (ch * k + i) * k + j
                    for y in range(ho):
                        yy = y * stride + i
                        base = y * wo
                        for x in range(wo):
                            out[b, ch, yy, x * stride + j] += cols[b, row, base + x]

    def _nb_col2im(cols, c, hp, wp, k, stride, ho, wo):
        out = np.zeros((cols.shape[0], c, hp, wp), dtype=cols.dtype)
        _nb_col2im_kernel(np.ascontiguousarray(cols), c, k, stride, ho, wo, out)
        return out

    @njit(cache=True, parallel=True)
    def _nb_pixel_filter_kernel(xpad, atoms, l, z):
        n, c = xpad.shape[0], xpad.shape[1]
        a, h, w = atoms.shape[1], atoms.shape[3], atoms.shape[4]
        for nc in prange(n * c):
            b = nc // c
            ch = nc % c
            for d in range(l * l):
                di = d // l
                dj = d % l
                for q in range(a):
                    for y in range(h):
                        for x in range(w):
                            z[b, ch, q, y, x] += atoms[b, q, d, y, x] * xpad[b, ch, y + di, x + dj]

    def _nb_pixel_filter(xpad, atoms, l):
        n, c = xpad.shape[:2]
        _, a, _, h, w = atoms.shape
        z = np.zeros((n, c, a, h, w), dtype=xpad.dtype)
        _nb_pixel_filter_kernel(np.ascontiguousarray(xpad), np.ascontiguousarray(atoms), l, z)
        return z

    @njit(cache=True, parallel=True)
    def _nb_pixel_filter_gx_kernel(atoms, gz, l, gx):
        n, c = gz.shape[0], gz.shape[1]
        a, h, w = atoms.shape[1], atoms.shape[3], atoms.shape[4]
        for nc in prange(n * c):
            b = nc // c
            ch = nc % c
            for d in range(l * l):
                di = d // l
                dj = d % l
                for q in range(a):
                    for y in range(h):
                        for x in range(w):
                            gx[b, ch, y + di, x + dj] += gz[b, ch, q, y, x] * atoms[b, q, d, y, x]

    @njit(cache=True, parallel=True)
    def _nb_pixel_filter_ga_kernel(xpad, gz, l, ga):
        n, c = gz.shape[0], gz.shape[1]
        a, h, w = ga.shape[1], ga.shape[3], ga.shape[4]
        # parallel over (batch, atom, offset); the channel sum stays sequential
        for job in prange(n * a * l * l):
            b = job // (a * l * l)
            rem = job % (a * l * l)
            q = rem // (l * l)
            d = rem % (l * l)
            di = d // l
            dj = d % l
            for ch in range(c):
                for y in range(h):
                    for x in range(w):
                        ga[b, q, d, y, x] += gz[b, ch, q, y, x] * xpad[b, ch, y + di, x + dj]

    def _nb_pixel_filter_grad(xpad, atoms, gz, l):
        xpad = np.ascontiguousarray(xpad)
        atoms = np.ascontiguousarray(atoms)
        gz = np.ascontiguousarray(gz)
        gx = np.zeros_like(xpad)
        ga = np.zeros_like(atoms)
        _nb_pixel_filter_gx_kernel(atoms, gz, l, gx)
        _nb_pixel_filter_ga_kernel(xpad, gz, l, ga)
        return gx, ga

    @njit(cache=True)
    def _nb_bilinear_sample_kernel(img, sx, sy, out):
        n, c, h, w = img.shape
        for b in range(n):
            for y in range(h):
                for x in range(w):
                    px = min(max(sx[b, y, x], 0.0), w - 1.0)
                    py = min(max(sy[b, y, x], 0.0), h - 1.0)
                    x0 = min(int(np.floor(px)), w - 1)
                    y0 = min(int(np.floor(py)), h - 1)
                    x1 = min(x0 + 1, w - 1)
                    y1 = min(y0 + 1, h - 1)
                    fx = px - x0
                    fy = py - y0
                    for ch in range(c):
                        out[b, ch, y, x] = (1 - fy) * ((1 - fx) * img[b, ch, y0, x0] + fx * img[b, ch, y0, x1]) + fy * (
                            (1 - fx) * img[b, ch, y1, x0] + fx * img[b, ch, y1, x1]
                        )

    def _nb_bilinear_sample(img, sx, sy):
        out = np.empty_like(img)
        _nb_bilinear_sample_kernel(np.ascontiguousarray(img), sx, sy, out)
        return out

    @njit(cache=True)
    def _nb_bilinear_sample_grad_kernel(g, sx, sy, out):
        n, c, h, w = g.shape
        for b in range(n):
            for y in range(h):
                for x in range(w):
                    px = min(max(sx[b, y, x], 0.0), w - 1.0)
                    py = min(max(sy[b, y, x], 0.0), h - 1.0)
                    x0 = min(int(np.floor(px)), w - 1)
                    y0 = min(int(np.floor(py)), h - 1)
                    x1 = min(x0 + 1, w - 1)
                    y1 = min(y0 + 1, h - 1)
                    fx = px - x0
                    fy = py - y0
                    for ch in range(c):
                        gv = g[b, ch, y, x]
                        out[b, ch, y0, x0] += (1 - fy) * (1 - fx) * gv
                        out[b, ch, y0, x1] += (1 - fy) * fx * gv
                        out[b, ch, y1, x0] += fy * (1 - fx) * gv
                        out[b, ch, y1, x1] += fy * fx * gv

    def _nb_bilinear_sample_grad(g, sx, sy):
        out = np.zeros_like(g)
        _nb_bilinear_sample_grad_kernel(np.ascontiguousarray(g), sx, sy, out)
        return out

    @njit(cache=True)
    def _nb_voxel_accumulate_kernel(x, y, tn, p, bins, h, w, grid):
        for i in range(x.shape[0]):
            t0 = int(np.floor(tn[i]))
            frac = tn[i] - t0
            if 0 <= t0 < bins:
                grid[t0, y[i], x[i]] += p[i] * (1.0 - frac)
            if 0 <= t0 + 1 < bins:
                grid[t0 + 1, y[i], x[i]] += p[i] * frac

    def _nb_voxel_accumulate(x, y, tn, p, bins, h, w):
        grid = np.zeros((bins, h, w), dtype=np.float64)
        _nb_voxel_accumulate_kernel(
            x.astype(np.int64), y.astype(np.int64), tn.astype(np.float64), p.astype(np.float64), bins, h, w, grid
        )
        return grid

    NUMBA = SimpleNamespace(
        name="numba",
        im2col=_nb_im2col,
        col2im=_nb_col2im,
        pixel_filter=_nb_pixel_filter,
        pixel_filter_grad=_nb_pixel_filter_grad,
        bilinear_sample=_nb_bilinear_sample,
        bilinear_sample_grad=_nb_bilinear_sample_grad,
        voxel_accumulate=_nb_voxel_accumulate,
    )
else:  # pragma: no cover
    NUMBA = None


def _select():
    choice = os.environ.get("EVRECON_BACKEND", "numba").strip().lower()
    if choice not in ("numba", "numpy"):
        raise ValueError(f"EVRECON_BACKEND must be 'numba' or 'numpy', got {choice!r}")
    if choice == "numba" and HAVE_NUMBA:
        threads = os.environ.get("EVRECON_THREADS")
        if threads:
            numba.set_num_threads(max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS)))
        return NUMBA
    return NUMPY


#: the active backend; modules call ``kernels.active.<kernel>``
active = _select()


def use(name):
    """Switch the active backend at runtime (``"numba"`` or ``"numpy"``)."""
    global active
    if name == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba is not installed")
        active = NUMBA
    elif name == "numpy":
        active = NUMPY
    else:
        raise ValueError(f"unknown backend {name!r}")
    return active
