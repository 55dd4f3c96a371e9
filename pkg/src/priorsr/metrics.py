"""PSNR / SSIM on the BT.601 luma plane and the bicubic baseline."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .attention import ShapeMismatch
from .core import from_unit_range, to_unit_range, upsample_bicubic

PSNR_CAP = 99.0
LUMA = (0.299, 0.587, 0.114)


class TooSmall(ValueError):
    pass


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """UNIT-range RGB (HxWx3) -> luma plane (HxW), float64."""
    x = np.asarray(img, dtype=np.float64)
    return LUMA[0] * x[..., 0] + LUMA[1] * x[..., 1] + LUMA[2] * x[..., 2]


def _as_y(img) -> np.ndarray:
    if img.dtype == np.uint8:
        img = to_unit_range(img)
    return rgb_to_y(img) if img.ndim == 3 else np.asarray(img, dtype=np.float64)


def psnr_y(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR on the Y plane with peak 1.0; zero error returns ``PSNR_CAP``.

    Accepts uint8 RGB, UNIT-range float RGB, or precomputed Y planes.
    """
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    ya, yb = _as_y(a), _as_y(b)
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    patches = sliding_window_view(x, win.shape)
    return np.einsum("ijkl,kl->ij", patches, win)


def ssim_y(a: np.ndarray, b: np.ndarray, win_size: int = 11, sigma: float = 1.5,
           k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all fully-contained gaussian windows of the Y plane."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    ya, yb = _as_y(a), _as_y(b)
    if min(ya.shape) < win_size:
        raise TooSmall(f"image {ya.shape} smaller than the {win_size}x{win_size} window")
    win = gaussian_window(win_size, sigma)
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2
    mu_a, mu_b = _filter_valid(ya, win), _filter_valid(yb, win)
    var_a = _filter_valid(ya * ya, win) - mu_a * mu_a
    var_b = _filter_valid(yb * yb, win) - mu_b * mu_b
    cov = _filter_valid(ya * yb, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def bicubic_baseline(lr: np.ndarray, factor: int = 4) -> np.ndarray:
    return from_unit_range(upsample_bicubic(to_unit_range(lr), factor))


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)     # dicts: image, psnr_y, ssim_y, capped

    def add(self, image_id: str, sr: np.ndarray, hr: np.ndarray) -> dict:
        p = psnr_y(sr, hr)
        row = {"image": image_id, "psnr_y": p, "ssim_y": ssim_y(sr, hr), "capped": p == PSNR_CAP}
        self.rows.append(row)
        return row

    def aggregate(self) -> dict:
        n = len(self.rows)
        if not n:
            return {"n": 0, "psnr_y": None, "ssim_y": None}
        return {"n": n,
                "psnr_y": float(np.mean([r["psnr_y"] for r in self.rows])),
                "ssim_y": float(np.mean([r["ssim_y"] for r in self.rows])),
                "capped": sum(bool(r["capped"]) for r in self.rows)}
