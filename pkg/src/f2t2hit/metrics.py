"""PSNR and SSIM for [0, 1] images, plus dataset-level evaluation reports."""

import csv
import json
import math
from dataclasses import dataclass, field
from typing import List

import torch
import torch.nn.functional as F

from .errors import DatasetError, ShapeError

PSNR_CAP_DB = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(prediction, target):
    """Peak signal-to-noise ratio in dB against a unit dynamic range.

    Computed in float64 and capped at 100 dB (identical inputs hit the cap).
    """
    if prediction.shape != target.shape:
        raise ShapeError(
            f"psnr shapes differ: {tuple(prediction.shape)} vs {tuple(target.shape)}")
    diff = prediction.double() - target.double()
    mse = float(diff.pow(2).mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def _ssim_window(dtype, device):
    half = (SSIM_WINDOW - 1) / 2
    xs = torch.arange(SSIM_WINDOW, dtype=dtype, device=device) - half
    g = torch.exp(-(xs ** 2) / (2 * SSIM_SIGMA ** 2))
    g = g / g.sum()
    window = torch.outer(g, g)
    return window.view(1, 1, SSIM_WINDOW, SSIM_WINDOW)


def ssim_value(prediction, target):
    """Differentiable mean SSIM over valid 11x11 Gaussian windows.

    Channels are treated independently and averaged. Keeps the input dtype,
    so it can serve as a training loss term.
    """
    if prediction.shape != target.shape:
        raise ShapeError(
            f"ssim shapes differ: {tuple(prediction.shape)} vs {tuple(target.shape)}")
    x = prediction if prediction.dim() == 4 else prediction.unsqueeze(0)
    y = target if target.dim() == 4 else target.unsqueeze(0)
    channels = x.shape[1]
    window = _ssim_window(x.dtype, x.device).expand(channels, 1, -1, -1)

    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2

    mu_x = F.conv2d(x, window, groups=channels)
    mu_y = F.conv2d(y, window, groups=channels)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    sigma_xx = F.conv2d(x * x, window, groups=channels) - mu_xx
    sigma_yy = F.conv2d(y * y, window, groups=channels) - mu_yy
    sigma_xy = F.conv2d(x * y, window, groups=channels) - mu_xy

    ssim_map = ((2 * mu_xy + c1) * (2 * sigma_xy + c2)) / (
        (mu_xx + mu_yy + c1) * (sigma_xx + sigma_yy + c2))
    return ssim_map.mean()


def ssim(prediction, target):
    """Mean SSIM as a float, computed in float64."""
    h, w = prediction.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(
            f"ssim needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")
    return float(ssim_value(prediction.double(), target.double()))


@dataclass
class ImageRecord:
    name: str
    psnr: float
    ssim: float


@dataclass
class MetricReport:
    dataset: str
    count: int
    mean_psnr: float
    mean_ssim: float
    records: List[ImageRecord] = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["name", "psnr", "ssim"])
            for record in self.records:
                writer.writerow([record.name, f"{record.psnr:.6f}", f"{record.ssim:.6f}"])
            writer.writerow(["mean", f"{self.mean_psnr:.6f}", f"{self.mean_ssim:.6f}"])

    def write_json(self, path):
        payload = {
            "dataset": self.dataset,
            "count": self.count,
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "images": [
                {"name": r.name, "psnr": r.psnr, "ssim": r.ssim}
                for r in self.records
            ],
        }
        with open(path, "w") as handle:
            json.dump(payload, handle, indent=2)
            handle.write("\n")


def evaluate_dataset(model, pairs, dataset_name="eval"):
    """Run the model over (blended, truth) pairs and average PSNR/SSIM."""
    if len(pairs) == 0:
        raise DatasetError("cannot evaluate an empty dataset")
    names = getattr(pairs, "names", None)
    records = []
    model.eval()
    with torch.no_grad():
        for index in range(len(pairs)):
            blended, truth = pairs[index]
            restored = model(blended.unsqueeze(0)).squeeze(0)
            name = names[index] if names is not None else str(index)
            records.append(ImageRecord(name, psnr(restored, truth), ssim(restored, truth)))
    mean_psnr = sum(r.psnr for r in records) / len(records)
    mean_ssim = sum(r.ssim for r in records) / len(records)
    return MetricReport(dataset_name, len(records), mean_psnr, mean_ssim, records)
