"""Diffusion loss, Degradation-Free Constraint, and their weighted sum."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .attention import ShapeMismatch

DEFAULT_LAMBDA = 0.05


@dataclass
class LossReport:
    l_d: float
    l_dfc: float
    l_dfc_pixel: float
    l_dfc_latent: float
    total: float


def diffusion_loss(eps: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    if eps.shape != eps_pred.shape:
        raise ShapeMismatch(f"{tuple(eps.shape)} vs {tuple(eps_pred.shape)}")
    return ((eps - eps_pred) ** 2).mean()


def pyramid_targets(x: torch.Tensor, levels: int = 3) -> list[torch.Tensor]:
    """Block-averaged copies of (B, C, H, W) ``x`` at 1/2, 1/4, ... resolution."""
    f = 2 ** levels
    if x.shape[-1] % f or x.shape[-2] % f:
        raise ShapeMismatch(f"spatial dims {tuple(x.shape[-2:])} not divisible by {f}")
    return [F.avg_pool2d(x, 2 ** i) for i in range(1, levels + 1)]


def _l1_terms(heads, targets) -> torch.Tensor:
    if len(heads) != len(targets):
        raise ShapeMismatch(f"expected {len(targets)} heads, got {len(heads)}")
    total = None
    for head, target in zip(heads, targets):
        if head.shape != target.shape:
            raise ShapeMismatch(f"head {tuple(head.shape)} vs target {tuple(target.shape)}")
        term = (head - target).abs().mean()
        total = term if total is None else total + term
    return total


def dfc_loss(pixel_heads, hr_img, latent_heads, hr_latent, use_pixel=True, use_latent=True):
    """Mean-reduced L1 between each head and the block-averaged HR target.

    Returns ``(l_dfc, pixel_part, latent_part)``.  A disabled part is still
    computed (for logging) but excluded from ``l_dfc``.
    """
    pixel = _l1_terms(pixel_heads, pyramid_targets(hr_img, len(pixel_heads)))
    latent = _l1_terms(latent_heads, pyramid_targets(hr_latent, len(latent_heads)))
    l_dfc = pixel.new_zeros(())
    if use_pixel:
        l_dfc = l_dfc + pixel
    if use_latent:
        l_dfc = l_dfc + latent
    return l_dfc, pixel, latent


def dfc_flags(mode: str) -> tuple[bool, bool]:
    return {"none": (False, False), "pixel": (True, False),
            "latent": (False, True), "both": (True, True)}[mode]


def total_loss(l_d, l_dfc, lam: float = DEFAULT_LAMBDA):
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return l_d + lam * l_dfc


class LossLog:
    """Append-only CSV of per-step loss reports."""

    FIELDS = ("step", "l_d", "l_dfc_pixel", "l_dfc_latent", "total")

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(self.FIELDS)

    def append(self, step: int, report: LossReport) -> None:
        row = asdict(report)
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow([step] + [repr(row[k]) for k in self.FIELDS[1:]])

    def truncate_after(self, step: int) -> None:
        """Drop rows past ``step`` (used when resuming)."""
        rows = self.read()
        with self.path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.FIELDS)
            for r in rows:
                if r["step"] <= step:
                    w.writerow([r["step"]] + [repr(r[k]) for k in self.FIELDS[1:]])

    def read(self) -> list[dict]:
        with self.path.open() as fh:
            return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
                    for row in csv.DictReader(fh)]
