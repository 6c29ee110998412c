"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

import numpy as np

from . import tensor as T


def _as_loss(out, weights):
    if out.size == 1:
        return out.reshape(())
    return (out * weights).sum()


def _central(fn, weights, flat, i, h):
    orig = flat[i]
    flat[i] = orig + h
    with T.no_grad():
        up = _as_loss(fn(), weights).item()
    flat[i] = orig - h
    with T.no_grad():
        down = _as_loss(fn(), weights).item()
    flat[i] = orig
    return (up - down) / (2 * h)


def gradcheck(fn, inputs, h=1e-5, max_coords=24, rng=None):
    """Compare analytic and numerical gradients of ``fn()`` w.r.t. ``inputs``.

    ``fn`` takes no arguments and reads the (float64) ``inputs`` tensors.
    A non-scalar output is reduced with fixed random weights. At most
    ``max_coords`` coordinates per input are perturbed. Returns the worst
    relative error ``|g_a - g_n| / max(|g_a|, |g_n|)`` (vector 2-norms).

    Each coordinate is also differenced with a 100x smaller step; if the two
    estimates disagree the wide step crossed a kink and the narrow one is used.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradcheck needs float64 inputs")
        t.grad = None
    out = fn()
    weights = T.Tensor(rng.standard_normal(out.shape))
    loss = _as_loss(out, weights)
    T.backward(loss)
    worst = 0.0
    for t in inputs:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size) if flat.size <= max_coords else rng.choice(flat.size, max_coords, replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            wide = _central(fn, weights, flat, i, h)
            narrow = _central(fn, weights, flat, i, h * 1e-2)
            # the two steps disagree only when the wider one straddles a kink (ReLU, clamp)
            kinked = abs(wide - narrow) > 1e-4 * max(abs(wide), abs(narrow), 1e-6)
            num[j] = narrow if kinked else wide
        ana = analytic.reshape(-1)[idx]
        scale = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-10)
        worst = max(worst, float(np.linalg.norm(ana - num) / scale))
    return worst
