import csv

import numpy as np
import pytest
import torch

from evrecon import tensor as T
from evrecon.errors import ContractError
from evrecon.gradcheck import gradcheck
from evrecon.net import HyperE2VID
from evrecon.sim import Sequence
from evrecon.tensor import Tensor
from evrecon.train import (
    AMSGrad,
    NonFiniteLoss,
    Sample,
    TrainConfig,
    augment,
    curriculum_beta,
    curriculum_context_image,
    hflip,
    make_samples,
    occlusion_mask,
    reconstruction_loss,
    ssim_tensor,
    step_losses,
    tbptt_train,
    temporal_loss,
    vflip,
    warp,
)
from evrecon.metrics import ssim


def tiny_sequence(rng, k=12, h=16, w=16):
    frames = rng.random((k, h, w))
    flows = rng.uniform(-1.5, 1.5, (k, 2, h, w))
    flows[0] = 0
    vox = rng.standard_normal((k, 5, h, w)).astype(np.float32) * 0.5
    return Sequence(vox, frames, flows, np.arange(k) / 25.0)


# -- warping and losses ---------------------------------------------------------


def test_warp_zero_flow_identity(rng):
    img = rng.random((2, 1, 5, 6))
    np.testing.assert_array_equal(warp(Tensor(img), np.zeros((2, 2, 5, 6))).data, img)


def test_warp_integer_shift(rng):
    img = rng.random((1, 1, 8, 9))
    flow = np.zeros((1, 2, 8, 9))
    flow[:, 0], flow[:, 1] = 2.0, -1.0
    out = warp(Tensor(img), flow).data
    np.testing.assert_array_equal(out[0, 0, 1:, :-2], img[0, 0, :-1, 2:])


def test_warp_clamps_to_border():
    img = np.arange(4.0).reshape(1, 1, 1, 4)
    flow = np.zeros((1, 2, 1, 4))
    flow[:, 0] = 10.0
    np.testing.assert_array_equal(warp(Tensor(img), flow).data, 3.0)


def test_warp_gradient(rng, backend):
    for _ in range(20):
        img = Tensor(rng.random((1, 1, 7, 7)), requires_grad=True, dtype=np.float64)
        flow = rng.uniform(-3, 3, (1, 2, 7, 7))
        assert gradcheck(lambda: warp(img, flow), [img], rng=rng) < 1e-3


def test_occlusion_mask_values(rng):
    prev = rng.random((6, 6))
    flow = np.zeros((2, 6, 6))
    np.testing.assert_array_equal(occlusion_mask(prev, prev, flow), 1.0)
    m = occlusion_mask(prev + 0.1, prev, flow)
    np.testing.assert_allclose(m, np.exp(-0.5), atol=1e-6)
    m = occlusion_mask(rng.random((6, 6)) * 100, prev, flow)
    assert np.all((m > 0) | (m == 0)) and np.all(m <= 1)


def test_temporal_loss_zero_cases(rng):
    prev = Tensor(rng.random((1, 1, 6, 6)))
    flow = rng.uniform(-1, 1, (1, 2, 6, 6))
    cur = warp(prev, flow)
    assert temporal_loss(cur, prev, flow, np.ones((6, 6))).item() < 1e-7
    other = Tensor(rng.random((1, 1, 6, 6)))
    assert temporal_loss(other, prev, flow, np.zeros((6, 6))).item() == 0.0


def test_temporal_loss_matches_reference_loop(rng):
    h, w = 5, 7
    cur, prev = rng.random((h, w)), rng.random((h, w))
    flow = rng.uniform(-2, 2, (2, h, w))
    mask = rng.random((h, w))
    total = 0.0
    for y in range(h):
        for x in range(w):
            sx = min(max(x + flow[0, y, x], 0), w - 1)
            sy = min(max(y + flow[1, y, x], 0), h - 1)
            x0, y0 = int(np.floor(sx)), int(np.floor(sy))
            x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
            fx, fy = sx - x0, sy - y0
            v = (
                prev[y0, x0] * (1 - fx) * (1 - fy)
                + prev[y0, x1] * fx * (1 - fy)
                + prev[y1, x0] * (1 - fx) * fy
                + prev[y1, x1] * fx * fy
            )
            total += mask[y, x] * abs(cur[y, x] - v)
    got = temporal_loss(cur[None, None], prev[None, None], flow[None], mask).item()
    assert abs(got - total / (h * w)) < 1e-6


def test_reconstruction_loss(rng):
    a = rng.random((1, 1, 12, 12))
    assert reconstruction_loss(a, a).item() == 0.0
    assert reconstruction_loss(a + 0.1, a).item() == pytest.approx(0.1)
    b = rng.random((1, 1, 12, 12))
    assert reconstruction_loss(a, b).item() == reconstruction_loss(b, a).item()
    # the optional term adds 0.5 * (1 - SSIM)
    with_ssim = reconstruction_loss(a, b, ssim_weight=0.5).item()
    assert with_ssim == pytest.approx(np.abs(a - b).mean() + 0.5 * (1 - ssim(a[0, 0], b[0, 0])), abs=1e-9)


def test_ssim_tensor_gradient(rng):
    for _ in range(20):
        a = Tensor(rng.random((1, 1, 14, 14)), requires_grad=True, dtype=np.float64)
        b = rng.random((1, 1, 14, 14))
        assert gradcheck(lambda: ssim_tensor(a, Tensor(b)), [a], rng=rng) < 1e-3


def test_total_step_loss_gradient(rng):
    for _ in range(20):
        pred = Tensor(rng.random((1, 1, 16, 16)), requires_grad=True, dtype=np.float64)
        prev = Tensor(rng.random((1, 1, 16, 16)), requires_grad=True, dtype=np.float64)
        frames = rng.random((1, 2, 1, 16, 16))
        flows = rng.uniform(-2, 2, (1, 2, 2, 16, 16))
        cfg = TrainConfig(seq_len=2, loss_every=2, truncation=2, ssim_weight=0.5)

        def fn():
            r, t = step_losses(pred, prev, frames, flows, 1, cfg)
            return r + t

        assert gradcheck(fn, [pred, prev], rng=rng) < 1e-3


def test_total_loss_gradient_through_model(rng):
    """Two recurrent steps at 16x16, 64-bit: total loss vs a random parameter slice."""
    m = HyperE2VID(base=4, seed=5, dtype=np.float64).eval()
    params = m.parameters()
    cfg = TrainConfig(seq_len=2, loss_every=2, truncation=2)
    for _ in range(20):
        seq = tiny_sequence(rng, k=2)
        frames = seq.frames[None, :, None]
        flows = seq.flows[None]
        picks = [params[i] for i in rng.choice(len(params), 3, replace=False)]

        def fn():
            p1, st = m.forward_step(Tensor(seq.voxels[None, 0].astype(np.float64)))
            ctx = curriculum_context_image(st.prev_image, Tensor(frames[:, 0]), 3, 7.5)
            p2, _ = m.forward_step(Tensor(seq.voxels[None, 1].astype(np.float64)), st, context_image=ctx)
            r, t = step_losses(p2, p1, frames, flows, 1, cfg)
            return r + t

        assert gradcheck(fn, picks, rng=rng, max_coords=6) < 1e-3


# -- curriculum ---------------------------------------------------------------


def test_curriculum_schedule():
    assert [curriculum_beta(e) for e in (0, 50, 100, 400)] == [0.0, 0.5, 1.0, 1.0]


def test_curriculum_blend(rng):
    pred, gt = Tensor(rng.random((1, 1, 4, 4))), Tensor(rng.random((1, 1, 4, 4)))
    np.testing.assert_array_equal(curriculum_context_image(pred, gt, 0).data, gt.data)
    assert curriculum_context_image(pred, gt, 100) is pred
    np.testing.assert_allclose(curriculum_context_image(pred, gt, 50).data, 0.5 * (pred.data + gt.data))


# -- augmentation ---------------------------------------------------------------


def _sample(rng):
    return Sample(rng.random((3, 5, 8, 10)), rng.random((3, 8, 10)), rng.standard_normal((3, 2, 8, 10)))


def test_flip_twice_identity(rng):
    s = _sample(rng)
    for f in (hflip, vflip):
        back = f(f(s))
        for a, b in zip((back.voxels, back.frames, back.flows), (s.voxels, s.frames, s.flows)):
            np.testing.assert_array_equal(a, b)


def test_hflip_negates_u(rng):
    s = _sample(rng)
    f = hflip(s)
    np.testing.assert_array_equal(f.flows[:, 0], -s.flows[:, 0, :, ::-1])
    np.testing.assert_array_equal(f.flows[:, 1], s.flows[:, 1, :, ::-1])
    v = vflip(s)
    np.testing.assert_array_equal(v.flows[:, 1], -s.flows[:, 1, ::-1])


def test_flipped_flow_still_warps(rng):
    """Flipping keeps frame k-1 = W(frame k)-consistency for a pure shift."""
    img = rng.random((10, 12))
    flow = np.zeros((2, 10, 12))
    flow[0] = 1.0
    prev = warp(Tensor(img[None, None]), flow[None]).data[0, 0]
    s = Sample(np.zeros((2, 5, 10, 12)), np.stack([prev, img]), np.stack([np.zeros_like(flow), flow]))
    f = hflip(s)
    again = warp(Tensor(f.frames[1][None, None]), f.flows[1][None]).data[0, 0]
    np.testing.assert_allclose(again[:, 1:-1], f.frames[0][:, 1:-1])


def test_crop_is_shared(rng):
    s = _sample(rng)
    s.voxels[:, 0] = s.frames  # tie voxel content to the frame
    cfg = TrainConfig(crop=8, flip_p=0.5)
    for seed in range(10):
        a = augment(s, cfg, np.random.default_rng(seed))
        assert a.frames.shape == (3, 8, 8) and a.flows.shape == (3, 2, 8, 8)
        np.testing.assert_array_equal(a.voxels[:, 0], a.frames)


def test_config_contracts():
    with pytest.raises(ContractError):
        TrainConfig(truncation=11)
    with pytest.raises(ContractError):
        TrainConfig(crop=50)
    p = TrainConfig.full()
    assert (p.batch, p.epochs, p.curriculum_epochs, p.crop, p.lr) == (10, 400, 100, 112, 1e-3)
    d = TrainConfig()
    assert (d.batch, d.epochs, d.crop) == (2, 30, 48)
    # the desk run keeps the curriculum ratio of the full schedule
    assert d.curriculum_epochs / d.epochs == p.curriculum_epochs / p.epochs


def test_make_samples_windows(rng):
    seq = tiny_sequence(rng, k=25)
    samples = make_samples([seq], 10)
    assert len(samples) == 2
    assert not samples[1].flows[0].any()
    with pytest.raises(ContractError):
        make_samples([seq], 30)


# -- optimizer -------------------------------------------------------------------


def test_amsgrad_matches_torch(rng):
    w0 = rng.standard_normal((3, 4))
    mine = Tensor(w0.copy(), requires_grad=True, dtype=np.float64)
    ref = torch.tensor(w0.copy(), requires_grad=True)
    opt = AMSGrad([mine], lr=0.01)
    topt = torch.optim.Adam([ref], lr=0.01, amsgrad=True)
    for step in range(25):
        g = rng.standard_normal((3, 4)) * (0.1 if step % 3 else 3.0)
        mine.grad = g.copy()
        ref.grad = torch.tensor(g.copy())
        opt.step()
        topt.step()
        np.testing.assert_allclose(mine.data, ref.detach().numpy(), rtol=1e-10, atol=1e-12)


# -- training loop ---------------------------------------------------------------


def test_graph_depth_bounded(rng):
    seq = tiny_sequence(rng, k=20)
    cfg = TrainConfig(seq_len=20, loss_every=10, truncation=5, epochs=1, batch=1, crop=None, base=4)
    res = tbptt_train([seq], cfg)
    assert res.max_graph_depth == 5
    cfg3 = TrainConfig(seq_len=20, loss_every=5, truncation=3, epochs=1, batch=1, crop=None, base=4)
    assert tbptt_train([seq], cfg3).max_graph_depth == 3


def test_lr_zero_leaves_parameters(rng):
    seq = tiny_sequence(rng, k=10)
    cfg = TrainConfig(seq_len=10, loss_every=5, truncation=2, epochs=1, batch=1, lr=0.0, crop=None, base=4)
    model = HyperE2VID(base=4, seed=0)
    before = {k: v.copy() for k, v in model.named_parameters() for v in [v.data]}
    tbptt_train([seq], cfg, model=model)
    for k, p in model.named_parameters():
        np.testing.assert_array_equal(p.data, before[k])


def test_log_and_checkpoint(tmp_path, rng):
    seq = tiny_sequence(rng, k=10)
    cfg = TrainConfig(seq_len=10, loss_every=5, truncation=2, epochs=2, batch=1, crop=8, base=4, checkpoint_every=1)
    res = tbptt_train([seq], cfg, out_dir=tmp_path, log_path=tmp_path / "loss.csv")
    rows = list(csv.reader(open(tmp_path / "loss.csv")))
    assert rows[0] == ["epoch", "step", "recon_loss", "temporal_loss", "total"]
    assert len(rows) == 1 + 2 * 2
    assert len(res.epoch_losses) == 2
    assert (tmp_path / "model.he2v").exists() and (tmp_path / "epoch0002.he2v").exists()


def test_training_is_deterministic(rng):
    seq = tiny_sequence(rng, k=10)
    cfg = TrainConfig(seq_len=10, loss_every=5, truncation=2, epochs=2, batch=1, crop=8, base=4, seed=3)
    a, b = tbptt_train([seq], cfg), tbptt_train([seq], cfg)
    assert a.epoch_losses == b.epoch_losses


def test_non_finite_loss_aborts(tmp_path, rng):
    seq = tiny_sequence(rng, k=10)
    seq.frames[4] = np.nan
    cfg = TrainConfig(seq_len=10, loss_every=5, truncation=2, epochs=1, batch=1, crop=None, base=4)
    with pytest.raises(NonFiniteLoss, match="step 5"):
        tbptt_train([seq], cfg, out_dir=tmp_path)
    assert (tmp_path / "diverged.he2v").exists()
