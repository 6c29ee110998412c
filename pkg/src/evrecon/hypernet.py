"""Context fusion, dynamic filter generation and the context-guided dynamic decoder.

Per-pixel kernels are never formed. A dynamic convolution is evaluated in
two stages: each input channel is filtered with the ``a`` per-pixel atoms
(atoms are shared across channels), then a static ``(C_in*a) -> C_out``
channel mix is applied. Memory stays ``O(H*W*(C_in*a + a*l*l))``.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from . import tensor as T
from .errors import ContractError
from .fbbank import build_fb_bank
from .layers import BatchNorm2d, Conv2d, Module
from .tensor import Tensor

N_ATOMS = 6
KERNEL = 5
CONTEXT_CHANNELS = 32
HIDDEN = 64


class ContextFusion(Module):
    """Concatenate voxel grid and previous image, pool ×4, 3×3 conv, ReLU."""

    def __init__(self, bins=5, cout=CONTEXT_CHANNELS, rng=None, dtype=np.float32):
        self.conv = Conv2d(bins + 1, cout, 3, rng=rng, dtype=dtype)

    def __call__(self, voxel, image):
        if voxel.shape[0] != image.shape[0] or voxel.shape[2:] != image.shape[2:] or image.shape[1] != 1:
            raise ContractError(f"context fusion: voxel {voxel.shape} and image {image.shape} do not align")
        x = T.concat([voxel, image], axis=1)
        x = T.avg_pool2(T.avg_pool2(x))
        return T.relu(self.conv(x))


def compose_atoms(coef, bank):
    """Per-pixel atoms from basis coefficients.

    ``coef`` is ``(N, a*s*b, H, W)`` with channel index ``(a*s + s_i)*b + b_i``;
    ``bank`` is ``(s, b, l, l)``. Returns ``(N, a, l*l, H, W)``.
    """
    n, ch, h, w = coef.shape
    s, b, l, _ = bank.shape
    if ch % (s * b):
        raise ContractError(f"compose_atoms: {ch} coefficient channels is not a multiple of {s * b}")
    a = ch // (s * b)
    basis = np.asarray(bank, dtype=coef.dtype).reshape(s * b, l * l)
    c = coef.data.reshape(n, a, s * b, h, w)
    out = np.einsum("najhw,jd->nadhw", c, basis, optimize=True)

    def back(g):
        return (np.einsum("nadhw,jd->najhw", g, basis, optimize=True).reshape(coef.shape),)

    return T.make(out, (coef,), back)


class DynamicFilterGenerator(Module):
    """Two conv(k=3)+BN+tanh layers emitting ``a*b*s`` coefficients per pixel."""

    def __init__(self, cin=CONTEXT_CHANNELS, hidden=HIDDEN, n_atoms=N_ATOMS, bank=None, rng=None, dtype=np.float32):
        self._bank = build_fb_bank() if bank is None else np.asarray(bank)
        s, b = self._bank.shape[:2]
        self.n_atoms = n_atoms
        self.cnn0 = Conv2d(cin, hidden, 3, rng=rng, dtype=dtype)
        self.bn0 = BatchNorm2d(hidden, dtype=dtype)
        self.cnn1 = Conv2d(hidden, n_atoms * s * b, 3, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(n_atoms * s * b, dtype=dtype)

    @property
    def bank(self):
        return self._bank

    def coefficients(self, context):
        x = T.tanh(self.bn0(self.cnn0(context)))
        return T.tanh(self.bn1(self.cnn1(x)))

    def __call__(self, context):
        return compose_atoms(self.coefficients(context), self._bank)


def dynamic_conv(x, atoms, K):
    """Spatially varying convolution with per-pixel atoms and static mixing.

    ``x``: ``(N, C, H, W)``; ``atoms``: ``(N, a, l*l, H, W)``; ``K``: ``(C, a, O)``.
    Equivalent to applying, at each pixel ``p``, the kernel
    ``theta[p][c, o] = sum_a K[c, a, o] * atoms[p, a]`` (same padding).
    """
    n, c, h, w = x.shape
    na, a, ll, ha, wa = atoms.shape
    l = int(round(ll**0.5))
    if l * l != ll or (na, ha, wa) != (n, h, w):
        raise ContractError(f"dynamic_conv: atoms {atoms.shape} do not match input {x.shape}")
    if K.shape[:2] != (c, a):
        raise ContractError(f"dynamic_conv: K {K.shape} does not match {c} channels and {a} atoms")
    o = K.shape[2]
    p0 = (l - 1) // 2
    p1 = l - 1 - p0
    xpad = np.pad(x.data, ((0, 0), (0, 0), (p0, p1), (p0, p1)))
    at = np.ascontiguousarray(atoms.data)
    z = kernels.active.pixel_filter(xpad, at, l)
    kmat = K.data.reshape(c * a, o)
    y = np.matmul(kmat.T, z.reshape(n, c * a, h * w)).reshape(n, o, h, w)

    def back(g):
        g = g.reshape(n, o, h * w)
        zf = z.reshape(n, c * a, h * w)
        gk = None
        if K.requires_grad:
            gk = np.zeros_like(kmat)
            for i in range(n):
                gk += zf[i] @ g[i].T
            gk = gk.reshape(K.shape)
        gx = ga = None
        if x.requires_grad or atoms.requires_grad:
            gz = np.matmul(kmat, g).reshape(n, c, a, h, w)
            gxpad, ga = kernels.active.pixel_filter_grad(xpad, at, gz, l)
            gx = gxpad[:, :, p0 : p0 + h, p0 : p0 + w]
        return gx, ga, gk

    return T.make(y, (x, atoms, K), back)


def materialize_kernels(atoms, K, out=None):
    """Full per-pixel kernel field ``(N, H, W, C, O, l*l)`` (reference only).

    ``out`` may be a preallocated (e.g. disk-backed) array; it is filled one
    image row at a time.
    """
    atoms = np.asarray(atoms)
    K = np.asarray(K)
    n, a, ll, h, w = atoms.shape
    c, _, o = K.shape
    if out is None:
        out = np.empty((n, h, w, c, o, ll), dtype=atoms.dtype)
    for b in range(n):
        for y in range(h):
            # (w, a, ll) x (c, a, o) -> (w, c, o, ll)
            out[b, y] = np.einsum("xad,cao->xcod", atoms[b, :, :, y, :].transpose(2, 0, 1), K, optimize=True)
    return out


def apply_materialized(x, theta):
    """Apply a materialized kernel field ``(N, H, W, C, O, l*l)`` to ``x``."""
    x = np.asarray(x)
    n, c, h, w = x.shape
    ll = theta.shape[-1]
    l = int(round(ll**0.5))
    p0 = (l - 1) // 2
    xpad = np.pad(x, ((0, 0), (0, 0), (p0, l - 1 - p0), (p0, l - 1 - p0)))
    o = theta.shape[4]
    y = np.empty((n, o, h, w), dtype=x.dtype)
    for b in range(n):
        for row in range(h):
            # patches for the row: (w, c, ll)
            patch = np.stack(
                [xpad[b, :, row + d // l, d % l : d % l + w] for d in range(ll)], axis=-1
            ).transpose(1, 0, 2)
            y[b, :, row, :] = np.einsum("xcod,xcd->ox", theta[b, row], patch, optimize=True)
    return y


class DynamicDecoder(Module):
    """Bilinear ×2 upsample, dynamic 5×5 conv halving channels, ReLU."""

    def __init__(self, cin, n_atoms=N_ATOMS, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        cout = cin // 2
        # He init on the equivalent fan-in of the materialized kernel
        std = np.sqrt(2.0 / (cin * n_atoms))
        self.K = Tensor((rng.standard_normal((cin, n_atoms, cout)) * std).astype(dtype), requires_grad=True)

    def __call__(self, x, atoms):
        x = T.upsample2x(x)
        return T.relu(dynamic_conv(x, atoms, self.K))
