"""Backbone building blocks: head, recurrent encoder, residual, decoder, prediction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor


class Module:
    """Parameter container; names follow attribute paths (``enc1.conv.w``)."""

    training = True

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")

    def named_buffers(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Module):
                yield from val.named_buffers(name + ".")
            elif isinstance(val, np.ndarray) and not key.startswith("_"):
                yield name, val

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))


def he_normal(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride=1, bias=True, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.w = Tensor(he_normal(rng, (cout, cin, k, k), dtype), requires_grad=True)
        if bias:
            self.b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        else:
            self.b = None

    def __call__(self, x):
        return T.conv2d(x, self.w, self.b, self.stride)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x):
        return T.batchnorm2d(x, self.gamma, self.beta, self.mean, self.var, self.training, self.momentum, self.eps)


@dataclass
class ConvLSTMState:
    hidden: Tensor
    cell: Tensor

    def __post_init__(self):
        if self.hidden.shape != self.cell.shape:
            raise ContractError(f"ConvLSTM hidden {self.hidden.shape} and cell {self.cell.shape} differ")

    def detach(self):
        return ConvLSTMState(T.detach(self.hidden), T.detach(self.cell))


class ConvLSTM(Module):
    """Peephole-free ConvLSTM; one convolution over ``[x, h]`` yields the
    input, forget, output and candidate gates (in that channel order)."""

    def __init__(self, channels, k=3, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.w = Tensor(he_normal(rng, (4 * channels, 2 * channels, k, k), dtype), requires_grad=True)
        self.b = Tensor(np.zeros(4 * channels, dtype=dtype), requires_grad=True)

    def zero_state(self, n, h, w, dtype):
        z = np.zeros((n, self.channels, h, w), dtype=dtype)
        return ConvLSTMState(Tensor(z), Tensor(z.copy()))

    def __call__(self, x, state):
        if state is None:
            state = self.zero_state(x.shape[0], x.shape[2], x.shape[3], x.dtype)
        if state.hidden.shape != x.shape:
            raise ContractError(f"ConvLSTM: state {state.hidden.shape} does not match input {x.shape}")
        gates = T.conv2d(T.concat([x, state.hidden], axis=1), self.w, self.b)
        c = self.channels
        i = T.sigmoid(gates[:, 0:c])
        f = T.sigmoid(gates[:, c : 2 * c])
        o = T.sigmoid(gates[:, 2 * c : 3 * c])
        g = T.tanh(gates[:, 3 * c : 4 * c])
        cell = f * state.cell + i * g
        hidden = o * T.tanh(cell)
        return hidden, ConvLSTMState(hidden, cell)


class Head(Conv2d):
    def __init__(self, bins=5, cout=32, rng=None, dtype=np.float32):
        super().__init__(bins, cout, 5, rng=rng, dtype=dtype)
        self.bins = bins

    def __call__(self, x):
        if x.ndim != 4 or x.shape[1] != self.bins:
            raise ContractError(f"head: expected (N, {self.bins}, H, W), got {x.shape}")
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise ContractError(f"head: H and W must be divisible by 8, got {x.shape[2:]}")
        return T.relu(super().__call__(x))


class Encoder(Module):
    """Stride-2 conv (k=5) doubling channels, then a k=3 ConvLSTM."""

    def __init__(self, cin, rng=None, dtype=np.float32):
        self.conv = Conv2d(cin, 2 * cin, 5, stride=2, rng=rng, dtype=dtype)
        self.lstm = ConvLSTM(2 * cin, 3, rng=rng, dtype=dtype)

    def __call__(self, x, state):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ContractError(f"encoder: spatial size must be even, got {x.shape}")
        y = T.relu(self.conv(x))
        return self.lstm(y, state)


class Residual(Module):
    def __init__(self, channels, rng=None, dtype=np.float32):
        self.conv1 = Conv2d(channels, channels, 3, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(channels, channels, 3, rng=rng, dtype=dtype)

    def __call__(self, x):
        y = self.conv2(T.relu(self.conv1(x)))
        return T.relu(y + x)


class Decoder(Module):
    """Bilinear ×2 upsample then a k=5 conv halving channels, ReLU."""

    def __init__(self, cin, rng=None, dtype=np.float32):
        self.conv = Conv2d(cin, cin // 2, 5, rng=rng, dtype=dtype)

    def __call__(self, x):
        return T.relu(self.conv(T.upsample2x(x)))


class Predict(Conv2d):
    """1×1 conv to a single channel, no activation."""

    def __init__(self, cin=32, rng=None, dtype=np.float32):
        super().__init__(cin, 1, 1, rng=rng, dtype=dtype)
