"""Full-reference image metrics on ``[0, 1]`` float images."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d


def mse(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"mse: shapes {a.shape} and {b.shape} differ")
    d = a - b
    return float(np.mean(d * d))


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    r = len(g) // 2
    out = correlate1d(img, g, axis=0, mode="constant")
    out = correlate1d(out, g, axis=1, mode="constant")
    return out[r:-r, r:-r]


def ssim(a, b, win=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Gaussian-weighted SSIM averaged over positions where the window fits.

    Population (not sample) covariances are used, as in the original
    Gaussian-window formulation.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"ssim: expected two equal 2D images, got {a.shape} and {b.shape}")
    if min(a.shape) < win:
        raise ValueError(f"ssim: images must be at least {win}x{win}")
    g = gaussian_window(win, sigma)
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a * mu_a
    sbb = _filter_valid(b * b, g) - mu_b * mu_b
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    mse: list = field(default_factory=list)
    ssim: list = field(default_factory=list)

    def add(self, pred, gt):
        self.mse.append(mse(pred, gt))
        self.ssim.append(ssim(pred, gt))

    @property
    def mean_mse(self):
        return float(np.mean(self.mse)) if self.mse else float("nan")

    @property
    def mean_ssim(self):
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "mse", "ssim"])
            for i, (m, s) in enumerate(zip(self.mse, self.ssim)):
                w.writerow([i, f"{m:.8f}", f"{s:.8f}"])
            w.writerow(["mean", f"{self.mean_mse:.8f}", f"{self.mean_ssim:.8f}"])


def evaluate(preds, gts):
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth frames")
    report = MetricReport()
    for p, g in zip(preds, gts):
        report.add(p, g)
    return report
