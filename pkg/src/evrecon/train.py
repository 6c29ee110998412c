"""Losses, curriculum, augmentation and truncated-BPTT training."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import save_model
from .errors import ContractError
from .metrics import gaussian_window
from .net import HyperE2VID
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    seq_len: int = 40
    loss_every: int = 10  # T_S
    truncation: int = 5  # T_T
    batch: int = 2
    lr: float = 1e-3
    epochs: int = 30
    curriculum_epochs: float = 7.5  # 100 of 400 epochs, scaled to the desk run
    crop: int | None = 48
    flip_p: float = 0.5
    alpha: float = 50.0
    ssim_weight: float = 0.0
    checkpoint_every: int = 0
    base: int = 32
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.truncation <= self.loss_every <= self.seq_len:
            raise ContractError(
                f"need 1 <= T_T ({self.truncation}) <= T_S ({self.loss_every}) <= seq_len ({self.seq_len})"
            )
        if self.crop is not None and self.crop % 8:
            raise ContractError(f"crop must be a multiple of 8, got {self.crop}")

    @classmethod
    def full(cls, **overrides):
        """The full-scale schedule (400 epochs, batch 10, 112 crops)."""
        base = dict(batch=10, epochs=400, curriculum_epochs=100, crop=112)
        base.update(overrides)
        return cls(**base)


# ---------------------------------------------------------------------------
# warping and losses


def warp(image, flow):
    """Backward-warp ``image`` (N,1,H,W) with flow (N,2,H,W) in pixels.

    Output pixel ``q`` samples ``image`` at ``q + flow(q)`` bilinearly,
    clamped to the border.
    """
    if not isinstance(image, Tensor):
        image = Tensor(image)
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim == 3:
        flow = flow[None]
    n, _, h, w = image.shape
    if flow.shape != (n, 2, h, w):
        raise ContractError(f"warp: flow {flow.shape} does not match image {image.shape}")
    qy, qx = np.mgrid[0:h, 0:w].astype(np.float64)
    return T.bilinear_sample(image, qx[None] + flow[:, 0], qy[None] + flow[:, 1])


def occlusion_mask(frame, prev_frame, flow, alpha=50.0):
    """``exp(-alpha * (I_k - W(I_{k-1}, F))^2)`` per pixel, as a numpy array."""
    frame = np.asarray(frame, dtype=np.float64)
    prev_frame = np.asarray(prev_frame, dtype=np.float64)
    shape4 = frame.shape if frame.ndim == 4 else (1, 1) + frame.shape[-2:]
    with T.no_grad():
        warped = warp(Tensor(prev_frame.reshape(shape4)), np.asarray(flow).reshape(shape4[0], 2, *shape4[2:])).data
    err = frame.reshape(shape4) - warped
    return np.exp(-alpha * err * err).reshape(frame.shape)


def temporal_loss(pred, prev_pred, flow, mask):
    """Masked L1 between a prediction and the warped previous prediction."""
    if not isinstance(pred, Tensor):
        pred = Tensor(pred)
    if not isinstance(prev_pred, Tensor):
        prev_pred = Tensor(prev_pred)
    m = Tensor(np.asarray(mask, dtype=pred.dtype).reshape(pred.shape))
    return (m * T.abs(pred - warp(prev_pred, flow))).mean()


def reconstruction_loss(pred, target, ssim_weight=0.0):
    """Mean absolute error, plus ``ssim_weight * (1 - SSIM)`` when enabled."""
    if not isinstance(pred, Tensor):
        pred = Tensor(pred)
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target, dtype=pred.dtype))
    loss = T.abs(pred - target).mean()
    if ssim_weight:
        loss = loss + ssim_weight * (1.0 - ssim_tensor(pred, target))
    return loss


def ssim_tensor(a, b, win=11, sigma=1.5, k1=0.01, k2=0.03):
    """Differentiable Gaussian-window SSIM over valid positions (dynamic range 1)."""
    g = gaussian_window(win, sigma)
    kern = Tensor(np.outer(g, g)[None, None].astype(a.dtype))
    r = win // 2

    def filt(x):
        n, c, h, w = x.shape
        y = T.conv2d(x.reshape((n * c, 1, h, w)), kern)
        return y[:, :, r : h - r, r : w - r]

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a * mu_a
    sbb = filt(b * b) - mu_b * mu_b
    sab = filt(a * b) - mu_a * mu_b
    c1, c2 = k1 * k1, k2 * k2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return (num / den).mean()


def curriculum_beta(epoch, curriculum_epochs=100):
    return min(1.0, epoch / curriculum_epochs)


def curriculum_context_image(pred_prev, gt_prev, epoch, curriculum_epochs=100):
    """Blend of previous reconstruction and previous ground truth."""
    beta = curriculum_beta(epoch, curriculum_epochs)
    if beta >= 1.0:
        return pred_prev
    if beta <= 0.0:
        return gt_prev if isinstance(gt_prev, Tensor) else Tensor(gt_prev)
    return pred_prev * beta + gt_prev * (1.0 - beta)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class Sample:
    voxels: np.ndarray  # (K, B, H, W)
    frames: np.ndarray  # (K, H, W)
    flows: np.ndarray  # (K, 2, H, W)


def hflip(sample):
    flows = sample.flows[..., ::-1].copy()
    flows[:, 0] *= -1
    return Sample(sample.voxels[..., ::-1].copy(), sample.frames[..., ::-1].copy(), flows)


def vflip(sample):
    flows = sample.flows[..., ::-1, :].copy()
    flows[:, 1] *= -1
    return Sample(sample.voxels[..., ::-1, :].copy(), sample.frames[..., ::-1, :].copy(), flows)


def augment(sample, config, rng):
    """One crop window and one flip decision for the whole sequence."""
    h, w = sample.frames.shape[-2:]
    if config.crop is not None and (config.crop < h or config.crop < w):
        cs = config.crop
        if cs > h or cs > w:
            raise ContractError(f"crop {cs} larger than frames {h}x{w}")
        y0 = int(rng.integers(0, h - cs + 1))
        x0 = int(rng.integers(0, w - cs + 1))
        win = (slice(y0, y0 + cs), slice(x0, x0 + cs))
        sample = Sample(
            sample.voxels[..., win[0], win[1]].copy(),
            sample.frames[..., win[0], win[1]].copy(),
            sample.flows[..., win[0], win[1]].copy(),
        )
    if rng.random() < config.flip_p:
        sample = hflip(sample)
    if rng.random() < config.flip_p:
        sample = vflip(sample)
    return sample


# ---------------------------------------------------------------------------
# optimizer


class AMSGrad:
    """Adam with the running maximum of the second moment."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.vmax = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        bc1 = 1 - self.b1**self.t
        bc2 = 1 - self.b2**self.t
        for p, m, v, vmax in zip(self.params, self.m, self.v, self.vmax):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            np.maximum(vmax, v, out=vmax)
            denom = np.sqrt(vmax) / math.sqrt(bc2) + self.eps
            p.data -= (self.lr / bc1) * m / denom

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: HyperE2VID
    epoch_losses: list = field(default_factory=list)
    rows: list = field(default_factory=list)  # (epoch, step, recon, temporal, total)
    max_graph_depth: int = 0


class NonFiniteLoss(FloatingPointError):
    pass


def make_samples(sequences, seq_len):
    """Non-overlapping windows of ``seq_len`` frames from each sequence."""
    out = []
    for seq in sequences:
        k = len(seq.frames)
        for start in range(0, k - seq_len + 1, seq_len):
            sl = slice(start, start + seq_len)
            flows = seq.flows[sl].copy()
            flows[0] = 0.0  # the first step has no previous frame inside the window
            out.append(Sample(seq.voxels[sl], seq.frames[sl], flows))
    if not out:
        raise ContractError(f"no sequence has at least {seq_len} frames")
    return out


def _batch(samples, dtype):
    vox = np.stack([s.voxels for s in samples]).astype(dtype)  # (N, K, B, H, W)
    frames = np.stack([s.frames for s in samples]).astype(dtype)[:, :, None]  # (N, K, 1, H, W)
    flows = np.stack([s.flows for s in samples])  # (N, K, 2, H, W)
    return vox, frames, flows


def step_losses(pred, prev_pred, frames, flows, k, config):
    """Reconstruction and temporal-consistency losses at step ``k``."""
    gt = frames[:, k]
    recon = reconstruction_loss(pred, gt, config.ssim_weight)
    if prev_pred is not None and k > 0:
        mask = occlusion_mask(gt, frames[:, k - 1], flows[:, k], config.alpha)
        tc = temporal_loss(pred, prev_pred, flows[:, k], mask)
    else:
        tc = Tensor(np.zeros((), dtype=pred.dtype))
    return recon, tc


def train_sequence(model, opt, vox, frames, flows, config, epoch, result, step_offset=0):
    """Run one batch of sequences with truncated BPTT; returns per-loss-point rows."""
    n, k_len = vox.shape[:2]
    h, w = vox.shape[-2:]
    dtype = model.dtype
    ts, tt = config.loss_every, config.truncation
    state = model.initial_state(n, h, w)
    prev_gt = Tensor(np.zeros((n, 1, h, w), dtype=dtype))
    prev_pred = None
    rows = []
    for i in range(1, k_len + 1):
        k = i - 1
        in_window = (i - 1) % ts >= ts - tt
        if in_window and (i - 1) % ts == ts - tt:
            # window start: cut the graph so backward reaches at most T_T steps
            state = state.detach()
            prev_pred = None if prev_pred is None else T.detach(prev_pred)
        ctx = curriculum_context_image(state.prev_image, prev_gt, epoch, config.curriculum_epochs)
        if in_window:
            with T.tag(i):
                pred, state = model.forward_step(Tensor(vox[:, k]), state, context_image=ctx)
        else:
            with T.no_grad():
                pred, state = model.forward_step(Tensor(vox[:, k]), state, context_image=ctx)
        if i % ts == 0:
            recon, tc = step_losses(pred, prev_pred, frames, flows, k, config)
            total = recon + tc
            value = float(total.item())
            if not math.isfinite(value):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, step {i}: recon={recon.item()} tc={tc.item()}")
            result.max_graph_depth = max(result.max_graph_depth, len(T.graph_tags(total)))
            opt.zero_grad()
            T.backward(total)
            opt.step()
            rows.append((epoch, step_offset + i, float(recon.item()), float(tc.item()), value))
        prev_pred = pred
        prev_gt = Tensor(frames[:, k])
    return rows


def tbptt_train(sequences, config, model=None, out_dir=None, log_path=None, on_epoch=None):
    """Train ``model`` (fresh if ``None``) on ``sequences``; returns a :class:`TrainResult`."""
    rng = np.random.default_rng(config.seed)
    model = model if model is not None else HyperE2VID(base=config.base, seed=config.seed)
    model.train()
    opt = AMSGrad(model.parameters(), lr=config.lr)
    samples = make_samples(sequences, config.seq_len)
    result = TrainResult(model)
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "recon_loss", "temporal_loss", "total"])
    try:
        for epoch in range(config.epochs):
            order = rng.permutation(len(samples))
            if len(order) < config.batch:
                # fewer windows than the batch: fill with independently augmented repeats
                order = np.concatenate([order, rng.integers(0, len(samples), config.batch - len(order))])
            epoch_rows = []
            for bstart in range(0, len(order), config.batch):
                batch = [augment(samples[j], config, rng) for j in order[bstart : bstart + config.batch]]
                vox, frames, flows = _batch(batch, model.dtype)
                try:
                    rows = train_sequence(model, opt, vox, frames, flows, config, epoch, result, bstart * config.seq_len)
                except NonFiniteLoss:
                    if out_dir is not None:
                        save_model(Path(out_dir) / "diverged.he2v", model)
                    raise
                epoch_rows.extend(rows)
                if writer is not None:
                    writer.writerows(rows)
                    fh.flush()
            mean = float(np.mean([r[4] for r in epoch_rows]))
            result.epoch_losses.append(mean)
            result.rows.extend(epoch_rows)
            log.info("epoch %d mean loss %.5f", epoch, mean)
            if on_epoch is not None:
                on_epoch(epoch, mean)
            if out_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_model(Path(out_dir) / f"epoch{epoch + 1:04d}.he2v", model)
    finally:
        if fh is not None:
            fh.close()
    if out_dir is not None:
        save_model(Path(out_dir) / "model.he2v", model)
    return result


def config_dict(config):
    return asdict(config)
