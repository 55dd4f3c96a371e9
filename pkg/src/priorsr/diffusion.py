"""Noise schedule, forward noising, guided DDPM sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .attention import ShapeMismatch
from .core import from_model_range, to_model_range, upsample_bicubic
from .networks import TimestepOutOfRange, image_to_tensor, tensor_to_image


class MissingCheckpoint(FileNotFoundError):
    pass


class NoiseSchedule:
    """Scaled-linear beta schedule indexed 1..T, with alpha_bar[0] == 1."""

    def __init__(self, num_timesteps: int = 1000, beta_start: float = 8.5e-4, beta_end: float = 1.2e-2):
        self.T = num_timesteps
        betas = np.linspace(beta_start ** 0.5, beta_end ** 0.5, num_timesteps, dtype=np.float64) ** 2
        self.betas = np.concatenate([[0.0], betas])
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def check(self, t) -> None:
        arr = np.asarray(t)
        if np.any(arr < 0) or np.any(arr > self.T):
            raise TimestepOutOfRange(f"t must lie in [0, {self.T}], got {t}")

    def alpha_bar(self, t) -> np.ndarray:
        self.check(t)
        return self.alpha_bars[np.asarray(t)]

    def timesteps(self, steps: int) -> list[int]:
        """``steps`` descending timesteps with uniform stride T/steps, starting at T."""
        if not 1 <= steps <= self.T:
            raise ValueError(f"steps must lie in [1, {self.T}]")
        stride = self.T // steps
        return [self.T - k * stride for k in range(steps)]


def _bcast(values, like: torch.Tensor) -> torch.Tensor:
    v = torch.as_tensor(np.atleast_1d(values), dtype=like.dtype, device=like.device)
    return v.reshape(-1, *([1] * (like.dim() - 1)))


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, with t a scalar or a per-batch array."""
    if z0.shape != eps.shape:
        raise ShapeMismatch("z0 and eps must have the same shape")
    t = t.cpu().numpy() if isinstance(t, torch.Tensor) else t
    abar = schedule.alpha_bar(t)
    return _bcast(np.sqrt(abar), z0) * z0 + _bcast(np.sqrt(1.0 - abar), z0) * eps


def cfg_combine(eps_pos: torch.Tensor, eps_neg: torch.Tensor, scale: float) -> torch.Tensor:
    """eps + scale * (eps - eps_neg)."""
    if eps_pos.shape != eps_neg.shape:
        raise ShapeMismatch(f"{tuple(eps_pos.shape)} vs {tuple(eps_neg.shape)}")
    return eps_pos + scale * (eps_pos - eps_neg)


def ddpm_step(z_t: torch.Tensor, eps: torch.Tensor, t: int, noise: torch.Tensor | None,
              schedule: NoiseSchedule, prev_t: int | None = None) -> torch.Tensor:
    """Ancestral update from ``t`` to ``prev_t`` (default ``t - 1``).

    Uses the respaced step beta = 1 - abar_t / abar_prev and the posterior
    variance beta * (1 - abar_prev) / (1 - abar_t).  No noise is added when
    stepping to 0.
    """
    if prev_t is None:
        prev_t = t - 1
    if not 1 <= t <= schedule.T or not 0 <= prev_t < t:
        raise TimestepOutOfRange(f"invalid step {t} -> {prev_t}")
    abar_t = schedule.alpha_bars[t]
    abar_prev = schedule.alpha_bars[prev_t]
    alpha = abar_t / abar_prev
    beta = 1.0 - alpha
    mean = (z_t - (beta / np.sqrt(1.0 - abar_t)) * eps) / np.sqrt(alpha)
    if prev_t == 0 or noise is None:
        return mean
    var = beta * (1.0 - abar_prev) / (1.0 - abar_t)
    return mean + np.sqrt(var) * noise


@dataclass
class SamplerConfig:
    steps: int = 20
    guidance: float = 5.5
    seed: int = 0
    use_negative: bool = True
    init_from_lr: bool = False


def lr_to_model_input(lr: np.ndarray, sr_factor: int) -> torch.Tensor:
    """uint8 LR -> MODEL-range bicubic-upsampled (1, 3, H, W) tensor."""
    up = upsample_bicubic(to_model_range(lr), sr_factor)
    return image_to_tensor(up.astype(np.float32))


@torch.no_grad()
def sample(lr: np.ndarray, prompts, model, cfg: SamplerConfig, schedule: NoiseSchedule | None = None,
           trace: list | None = None) -> np.ndarray:
    """Restore one uint8 LR image.

    ``prompts`` is a :class:`PromptBundle`; ``model`` a trained
    :class:`Restorer`.  Each step evaluates the denoiser once with ``c_h`` and,
    when the negative branch is on, once more with ``c_neg`` substituted for
    ``c_h``; ``c_l`` is kept in both.
    """
    if model is None:
        raise MissingCheckpoint("no trained model supplied")
    mcfg = model.cfg
    schedule = schedule or NoiseSchedule(mcfg.num_timesteps)
    model.eval()
    lr_up = lr_to_model_input(lr, mcfg.sr_factor)
    gen = torch.Generator().manual_seed(int(cfg.seed))
    h, w = lr_up.shape[-2] // mcfg.latent_factor, lr_up.shape[-1] // mcfg.latent_factor
    shape = (1, mcfg.latent_channels, h, w)
    z = torch.randn(shape, generator=gen)
    steps = schedule.timesteps(cfg.steps)
    if cfg.init_from_lr:
        z = q_sample(model.autoencoder.encode(lr_up), steps[0], z, schedule)
    c_h, c_l, c_neg = (p[None] if p.dim() == 2 else p for p in (prompts.c_h, prompts.c_l, prompts.c_neg))
    for i, t in enumerate(steps):
        prev_t = steps[i + 1] if i + 1 < len(steps) else 0
        tt = torch.full((1,), t, dtype=torch.long)
        eps = model.eps(z, tt, c_h, c_l, lr_up)
        if cfg.use_negative:
            eps_neg = model.eps(z, tt, c_neg, c_l, lr_up)
            eps = cfg_combine(eps, eps_neg, cfg.guidance)
        noise = torch.randn(shape, generator=gen)
        z = ddpm_step(z, eps, t, noise, schedule, prev_t)
        if trace is not None:
            trace.append(t)
    img = tensor_to_image(model.autoencoder.decode(z))
    return from_model_range(img)
