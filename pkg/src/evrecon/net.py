"""The full recurrent reconstruction network and sequence runner."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError
from .hypernet import ContextFusion, DynamicDecoder, DynamicFilterGenerator
from .layers import ConvLSTMState, Decoder, Encoder, Head, Module, Predict, Residual
from .tensor import Tensor

ARCH = "hypere2vid"
EXPECTED_PARAMETERS = 10_149_753


@dataclass
class RecurrentState:
    enc_states: list = field(default_factory=lambda: [None, None, None])
    prev_image: Tensor | None = None

    def detach(self):
        return RecurrentState(
            [None if s is None else s.detach() for s in self.enc_states],
            None if self.prev_image is None else T.detach(self.prev_image),
        )


class HyperE2VID(Module):
    """Recurrent U-Net whose first decoder uses per-pixel dynamic filters.

    ``base`` scales every channel count (32 reproduces the reference
    dimensioning); the hypernetwork widths stay fixed.
    """

    def __init__(self, bins=5, base=32, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.bins = bins
        self.base = base
        self.head = Head(bins, base, rng=rng, dtype=dtype)
        self.enc1 = Encoder(base, rng=rng, dtype=dtype)
        self.enc2 = Encoder(2 * base, rng=rng, dtype=dtype)
        self.enc3 = Encoder(4 * base, rng=rng, dtype=dtype)
        self.res1 = Residual(8 * base, rng=rng, dtype=dtype)
        self.res2 = Residual(8 * base, rng=rng, dtype=dtype)
        self.cf = ContextFusion(bins, rng=rng, dtype=dtype)
        self.dfg = DynamicFilterGenerator(rng=rng, dtype=dtype)
        self.cgdd = DynamicDecoder(8 * base, n_atoms=self.dfg.n_atoms, rng=rng, dtype=dtype)
        self.dec2 = Decoder(4 * base, rng=rng, dtype=dtype)
        self.dec3 = Decoder(2 * base, rng=rng, dtype=dtype)
        self.pred = Predict(base, rng=rng, dtype=dtype)
        self.dtype = np.dtype(dtype)
        # every skip sum must be channel-compatible
        assert self.cgdd.K.shape[2] == self.enc2.lstm.channels
        assert self.dec2.conv.w.shape[0] == self.enc1.lstm.channels
        assert self.dec3.conv.w.shape[0] == self.head.w.shape[0]

    def initial_state(self, n, h, w):
        return RecurrentState(prev_image=Tensor(np.zeros((n, 1, h, w), dtype=self.dtype)))

    def forward_step(self, voxel, state=None, context_image=None):
        """One step: returns ``(image, new_state)``.

        ``image`` is the unclamped prediction ``(N, 1, H, W)``. The context
        fusion block sees ``context_image`` when given (curriculum training),
        otherwise ``state.prev_image``.
        """
        if not isinstance(voxel, Tensor):
            voxel = Tensor(np.asarray(voxel, dtype=self.dtype))
        if voxel.ndim == 3:
            voxel = voxel.reshape((1,) + voxel.shape)
        n, b, h, w = voxel.shape
        if b != self.bins:
            raise ContractError(f"forward_step: voxel has {b} bins, model expects {self.bins}")
        if h % 8 or w % 8:
            raise ContractError(f"forward_step: H and W must be divisible by 8, got {h}x{w}")
        if state is None:
            state = self.initial_state(n, h, w)
        prev = state.prev_image if context_image is None else context_image
        if prev is None:
            prev = Tensor(np.zeros((n, 1, h, w), dtype=self.dtype))
        c = self.base
        s = state.enc_states

        x_head = self.head(voxel)
        _check(x_head, (n, c, h, w), "head")
        x1, s1 = self.enc1(x_head, s[0])
        _check(x1, (n, 2 * c, h // 2, w // 2), "enc1")
        x2, s2 = self.enc2(x1, s[1])
        _check(x2, (n, 4 * c, h // 4, w // 4), "enc2")
        x3, s3 = self.enc3(x2, s[2])
        _check(x3, (n, 8 * c, h // 8, w // 8), "enc3")
        r = self.res2(self.res1(x3))
        _check(r, (n, 8 * c, h // 8, w // 8), "res")

        atoms = self.dfg(self.cf(voxel, prev))
        y = self.cgdd(r + x3, atoms)
        _check(y, (n, 4 * c, h // 4, w // 4), "cgdd")
        y = self.dec2(y + x2)
        _check(y, (n, 2 * c, h // 2, w // 2), "dec2")
        y = self.dec3(y + x1)
        _check(y, (n, c, h, w), "dec3")
        image = self.pred(y + x_head)
        _check(image, (n, 1, h, w), "pred")

        new_state = RecurrentState([s1, s2, s3], T.clamp(image, 0.0, 1.0))
        return image, new_state

    def run_sequence(self, voxels, state=None):
        """Causal inference over a sequence of voxel grids; returns clamped images."""
        outputs = []
        with T.no_grad():
            for v in voxels:
                _, state = self.forward_step(v, state)
                outputs.append(state.prev_image.data.copy())
        return outputs

    def state_dict(self):
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def load_state_dict(self, tensors, strict=True):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = [k for k in list(params) + list(buffers) if k not in tensors]
        if strict and missing:
            raise ContractError(f"checkpoint is missing {missing[:5]}{'...' if len(missing) > 5 else ''}")
        for name, value in tensors.items():
            target = params[name].data if name in params else buffers.get(name)
            if target is None:
                if strict:
                    raise ContractError(f"unexpected checkpoint entry {name!r}")
                continue
            if target.shape != value.shape:
                raise ContractError(f"{name}: checkpoint shape {value.shape} != model shape {target.shape}")
            target[...] = value


def _check(t, shape, where):
    if t.shape != shape:
        raise ContractError(f"{where}: expected shape {shape}, got {t.shape}")
