"""Command-line entry points: simulate, train, reconstruct, eval, bench.

Exit codes: 0 success, 1 usage error, 2 data or contract error.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, eventio, kernels
from .errors import ContractError, ParseError

log = logging.getLogger("evrecon")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; usage errors are 1 here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    outputs: list
    versions: dict = field(default_factory=dict)

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str) + "\n")
        return path


def versions():
    import numba

    return {
        "evrecon": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "numba": numba.__version__,
        "backend": kernels.active.name,
    }


def _manifest(args, seed, outputs, path):
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    return RunManifest(args.command, cfg, seed, [str(o) for o in outputs], versions()).write(path)


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args):
    from .sim import SceneSpec, render, spec_dict, write_dataset

    spec = SceneSpec(
        width=args.width,
        height=args.height,
        duration=args.duration,
        frame_rate=args.fps,
        n_objects=args.objects,
        contrast_threshold=args.threshold,
        seed=args.seed,
        oversample=args.oversample,
        threshold_jitter=args.jitter,
        smooth=args.smooth,
    )
    out = Path(args.out)
    _manifest(args, args.seed, [out], out / "manifest.json")
    bundle = render(spec)
    write_dataset(out, bundle)
    info = dict(spec_dict(spec), contrast_threshold=bundle.contrast_threshold, n_events=len(bundle.events))
    (out / "scene.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(bundle.frames)} frames, {len(bundle.events)} events (C={bundle.contrast_threshold:.3f}) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args):
    from .sim import load_sequence
    from .train import TrainConfig, config_dict, tbptt_train

    cfg = TrainConfig(
        seq_len=args.seq_len,
        loss_every=args.loss_every,
        truncation=args.truncation,
        batch=args.batch,
        lr=args.lr,
        epochs=args.epochs,
        curriculum_epochs=args.curriculum_epochs,
        crop=None if args.crop == 0 else args.crop,
        ssim_weight=args.ssim_weight,
        checkpoint_every=args.checkpoint_every,
        base=args.base,
        seed=args.seed,
    )
    out = Path(args.out)
    ckpt, loss_log = out / "model.he2v", out / "loss.csv"
    _manifest(args, args.seed, [ckpt, loss_log], out / "manifest.json")
    (out / "config.json").write_text(json.dumps(config_dict(cfg), indent=2, sort_keys=True) + "\n")
    sequences = [load_sequence(d, bins=args.bins) for d in args.data]
    for d, s in zip(args.data, sequences):
        h, w = s.frames.shape[1:]
        if cfg.crop is None and (h % 8 or w % 8):
            raise ContractError(f"{d}: uncropped training frames must be divisible by 8, got {h}x{w}")
        if cfg.crop is not None and cfg.crop > min(h, w):
            raise ContractError(f"{d}: crop {cfg.crop} exceeds frame size {h}x{w}")
    t0 = time.perf_counter()
    res = tbptt_train(sequences, cfg, out_dir=out, log_path=loss_log)
    print(
        f"trained {cfg.epochs} epochs in {time.perf_counter() - t0:.1f} s; "
        f"epoch loss {res.epoch_losses[0]:.4f} -> {res.epoch_losses[-1]:.4f}; checkpoint {ckpt}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# reconstruct


def pad_to_multiple(vox, m=8):
    """Reflect-pad the trailing two axes up to a multiple of ``m``."""
    h, w = vox.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if not ph and not pw:
        return vox
    mode = "reflect" if ph < h and pw < w else "symmetric"
    pad = [(0, 0)] * (vox.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(vox, pad, mode=mode)


def frame_name(t):
    return f"{t:016.6f}.pgm"


def cmd_reconstruct(args):
    from .checkpoint import load_model, read_manifest
    from .formats import write_pgm

    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise ContractError(f"checkpoint {ckpt} not found")
    fields = read_manifest(ckpt)
    if int(fields.get("bins", -1)) != args.bins:
        raise ContractError(f"checkpoint was trained with bins={fields.get('bins')}, --bins is {args.bins}")
    if args.binary:
        events = eventio.read_events_bin(args.events, args.polarity)
    else:
        events = eventio.parse_events(args.events, args.polarity)
    events.validate(args.width, args.height)
    times = eventio.read_timestamps(args.timestamps)
    out = Path(args.out)
    _manifest(args, None, [out], out / "manifest.json")
    model = load_model(ckpt)
    voxels = eventio.voxelize_stream(events, times, args.width, args.height, args.bins)
    padded = pad_to_multiple(voxels)
    state = None
    from . import tensor as T

    with T.no_grad():
        for t, v in zip(times, padded):
            _, state = model.forward_step(v[None], state)
            img = state.prev_image.data[0, 0, : args.height, : args.width]
            write_pgm(out / frame_name(t), img)
    print(f"wrote {len(times)} frames to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _pgms(d):
    files = sorted(Path(d).glob("*.pgm"))
    if not files:
        raise ContractError(f"no .pgm files in {d}")
    return files


def cmd_eval(args):
    from .formats import read_pgm
    from .metrics import evaluate

    preds, gts = _pgms(args.pred), _pgms(args.gt)
    if len(preds) != len(gts):
        raise ContractError(f"{len(preds)} predicted frames but {len(gts)} ground-truth frames")
    skip = args.skip
    pi = [read_pgm(p) for p in preds[skip:]]
    gi = [read_pgm(g) for g in gts[skip:]]
    for p, g, name in zip(pi, gi, preds[skip:]):
        if p.shape != g.shape:
            raise ContractError(f"{name.name}: shape {p.shape} does not match ground truth {g.shape}")
    out = Path(args.out)
    _manifest(args, None, [out], out.with_suffix(".manifest.json"))
    rep = evaluate(pi, gi)
    rep.write_csv(out)
    print(f"{len(pi)} frames: mean MSE {rep.mean_mse:.5f}, mean SSIM {rep.mean_ssim:.4f} -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def bench_dynamic_conv(width, height, reps=3, scratch=None, seed=0):
    """Decomposed dynamic conv vs the materialized per-pixel kernel oracle.

    Shapes match the dynamic decoder at ``width``x``height``: 256 input
    channels at quarter resolution, 128 outputs, 6 atoms of 5x5. The oracle's
    kernel field does not fit in memory at this size, so it is written to a
    disk-backed memmap; its peak is the traced heap plus the field size.
    """
    import tempfile
    import tracemalloc

    from . import tensor as T
    from .hypernet import apply_materialized, dynamic_conv, materialize_kernels
    from .tensor import Tensor

    rng = np.random.default_rng(seed)
    h, w = height // 4, width // 4
    x = rng.standard_normal((1, 256, h, w)).astype(np.float32)
    atoms = rng.standard_normal((1, 6, 25, h, w)).astype(np.float32)
    K = (rng.standard_normal((256, 6, 128)) * 0.05).astype(np.float32)

    with T.no_grad():
        dynamic_conv(Tensor(x), Tensor(atoms), Tensor(K))  # warm-up (numba compile)
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            y = dynamic_conv(Tensor(x), Tensor(atoms), Tensor(K)).data
            times.append(time.perf_counter() - t0)
        tracemalloc.start()
        dynamic_conv(Tensor(x), Tensor(atoms), Tensor(K))
        dec_peak = tracemalloc.get_traced_memory()[1]
        tracemalloc.stop()

    field_shape = (1, h, w, 256, 128, 25)
    field_bytes = int(np.prod(field_shape)) * 4
    with tempfile.TemporaryDirectory(dir=scratch) as tmp:
        tracemalloc.start()
        t0 = time.perf_counter()
        theta = np.lib.format.open_memmap(Path(tmp) / "theta.npy", mode="w+", dtype=np.float32, shape=field_shape)
        materialize_kernels(atoms, K, out=theta)
        y_ref = apply_materialized(x, theta)
        oracle_time = time.perf_counter() - t0
        oracle_peak = tracemalloc.get_traced_memory()[1] + field_bytes
        tracemalloc.stop()
        del theta
    return {
        "shape": [1, 256, h, w],
        "decomposed_ms": 1e3 * float(np.median(times)),
        "decomposed_peak_bytes": int(dec_peak),
        "oracle_ms": 1e3 * oracle_time,
        "oracle_peak_bytes": int(oracle_peak),
        "oracle_field_bytes": field_bytes,
        "max_abs_diff": float(np.abs(y - y_ref).max()),
    }


def bench_forward(width, height, iters, seed=0):
    from .net import HyperE2VID

    model = HyperE2VID(seed=seed).eval()
    rng = np.random.default_rng(seed)
    vox = (rng.standard_normal((1, 5, height, width)) * 0.2).astype(np.float32)
    from . import tensor as T

    with T.no_grad():
        _, state = model.forward_step(vox)  # warm-up
        times = []
        for _ in range(iters):
            t0 = time.perf_counter()
            _, state = model.forward_step(vox, state)
            times.append(time.perf_counter() - t0)
    ms = 1e3 * np.asarray(times)
    return {"parameters": model.num_parameters(), "mean_ms": float(ms.mean()), "std_ms": float(ms.std()), "iters": iters}


def cmd_bench(args):
    if args.width % 8 or args.height % 8:
        raise UsageError(f"--width/--height must be multiples of 8 (pad 240x180 to 240x184), got {args.width}x{args.height}")
    report = {"width": args.width, "height": args.height, "backend": kernels.active.name}
    if args.out:
        _manifest(args, args.seed, [args.out], Path(args.out).with_suffix(".manifest.json"))
    fwd = bench_forward(args.width, args.height, args.iters, args.seed)
    report["forward"] = fwd
    print(f"parameters: {fwd['parameters']:,}")
    print(f"forward step {args.width}x{args.height} [{report['backend']}]: {fwd['mean_ms']:.1f} +/- {fwd['std_ms']:.1f} ms over {args.iters} iters")
    if not args.skip_oracle:
        dc = bench_dynamic_conv(args.width, args.height, scratch=args.scratch, seed=args.seed)
        report["dynamic_conv"] = dc
        print(
            f"dynamic conv: decomposed {dc['decomposed_ms']:.1f} ms / {dc['decomposed_peak_bytes'] / 2**20:.1f} MiB, "
            f"materialized {dc['oracle_ms']:.0f} ms / {dc['oracle_peak_bytes'] / 2**20:.0f} MiB "
            f"(speedup {dc['oracle_ms'] / dc['decomposed_ms']:.0f}x, memory ratio "
            f"{dc['decomposed_peak_bytes'] / dc['oracle_peak_bytes']:.4f}, max diff {dc['max_abs_diff']:.2e})"
        )
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="evrecon", description="Event-based video reconstruction with a hypernetwork-driven decoder.")
    p.add_argument("--version", action="version", version=f"evrecon {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="render a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--duration", type=float, default=2.0)
    s.add_argument("--fps", type=float, default=25.0)
    s.add_argument("--objects", type=int, default=6)
    s.add_argument("--threshold", type=float, default=None, help="contrast threshold (default: uniform in [0.1, 1.5])")
    s.add_argument("--oversample", type=int, default=8)
    s.add_argument("--jitter", action="store_true", help="per-pixel threshold noise, sigma 0.03*C")
    s.add_argument("--smooth", action="store_true", help="smooth textures only")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train with truncated BPTT")
    t.add_argument("--data", required=True, nargs="+")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch", type=int, default=2)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--seq-len", type=int, default=40)
    t.add_argument("--loss-every", type=int, default=10)
    t.add_argument("--truncation", type=int, default=5)
    t.add_argument("--crop", type=int, default=48, help="random crop size; 0 disables cropping")
    t.add_argument("--curriculum-epochs", type=float, default=7.5)
    t.add_argument("--ssim-weight", type=float, default=0.0, help="weight of the optional (1 - SSIM) term")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--bins", type=int, default=5)
    t.add_argument("--base", type=int, default=32)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("reconstruct", help="reconstruct frames from events")
    r.add_argument("--events", required=True)
    r.add_argument("--timestamps", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--bins", type=int, default=5)
    r.add_argument("--width", type=int, required=True)
    r.add_argument("--height", type=int, required=True)
    r.add_argument("--polarity", choices=("signed", "zero_one"), default="signed")
    r.add_argument("--binary", action="store_true", help="events file holds packed binary records")
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("eval", help="MSE and SSIM of predicted frames")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--skip", type=int, default=0, help="ignore the first N frame pairs")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="wall-clock inference and dynamic-conv benchmark")
    b.add_argument("--width", type=int, default=240)
    b.add_argument("--height", type=int, default=184)
    b.add_argument("--iters", type=int, default=10)
    b.add_argument("--skip-oracle", action="store_true", help="skip the materialized-kernel comparison")
    b.add_argument("--scratch", default=None, help="directory for the oracle's disk-backed kernel field")
    b.add_argument("--out", default=None, help="write the report as JSON")
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"evrecon {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractError, ParseError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"evrecon {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
