"""Toy latent autoencoder, text-conditioned UNet denoiser and the control branch."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attention import ConditionalAttention, CrossAttention, SFABlock, ShapeMismatch, from_tokens, to_tokens
from .core import RunConfig, ShapeError, to_model_range
from .prompts import TextEncoder


class TimestepOutOfRange(ValueError):
    pass


def _groups(ch: int) -> int:
    return math.gcd(ch, 8)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int | None = None):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time = nn.Linear(time_dim, cout) if time_dim else None
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.time is not None:
            h = h + self.time(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


def zero_conv(ch_in: int, ch_out: int | None = None) -> nn.Conv2d:
    conv = nn.Conv2d(ch_in, ch_out or ch_in, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


def _attend(block, h: torch.Tensor, *ctx) -> torch.Tensor:
    b, c, hh, ww = h.shape
    return from_tokens(block(to_tokens(h), *ctx), hh, ww)


# ---------------------------------------------------------------------------
# autoencoder


class Autoencoder(nn.Module):
    """Deterministic conv autoencoder, image (B,3,H,W) <-> latent (B,4,H/f,W/f).

    ``latent_scale`` is fitted after pretraining so encoded latents have roughly
    unit variance.
    """

    def __init__(self, latent_channels: int = 4, latent_factor: int = 8, channels=(32, 64, 64)):
        super().__init__()
        n_down = int(round(math.log2(latent_factor)))
        chs = [channels[min(i, len(channels) - 1)] for i in range(n_down + 1)]
        self.latent_factor = latent_factor
        enc = [nn.Conv2d(3, chs[0], 3, padding=1)]
        for i in range(n_down):
            enc += [nn.Conv2d(chs[i], chs[i + 1], 3, stride=2, padding=1), ResBlock(chs[i + 1], chs[i + 1])]
        enc += [nn.GroupNorm(_groups(chs[-1]), chs[-1]), nn.SiLU(), nn.Conv2d(chs[-1], latent_channels, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)
        dec = [nn.Conv2d(latent_channels, chs[-1], 3, padding=1), ResBlock(chs[-1], chs[-1])]
        for i in reversed(range(n_down)):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(chs[i + 1], chs[i], 3, padding=1),
                    ResBlock(chs[i], chs[i])]
        dec += [nn.GroupNorm(_groups(chs[0]), chs[0]), nn.SiLU(), nn.Conv2d(chs[0], 3, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)
        self.register_buffer("latent_scale", torch.ones(()))

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % self.latent_factor or x.shape[-2] % self.latent_factor:
            raise ShapeError(f"image {tuple(x.shape[-2:])} not divisible by {self.latent_factor}")
        return self.encoder(x) * self.latent_scale

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z / self.latent_scale)

    def forward(self, x):
        return self.decode(self.encode(x))


def image_to_tensor(img: np.ndarray) -> torch.Tensor:
    """HWC float/uint8 array -> (1, C, H, W) float32 tensor (uint8 goes to MODEL range)."""
    if img.dtype == np.uint8:
        img = to_model_range(img)
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float()[None]


def tensor_to_image(x: torch.Tensor) -> np.ndarray:
    return x.detach().cpu().numpy()[0].transpose(1, 2, 0)


def encode_latent(img, ae: Autoencoder) -> torch.Tensor:
    """MODEL-range image (HWC array or BCHW tensor) -> latent tensor."""
    if isinstance(img, np.ndarray):
        img = image_to_tensor(img)
    return ae.encode(img)


# ---------------------------------------------------------------------------
# denoiser


class EncoderLevel(nn.Module):
    def __init__(self, cin, cout, time_dim, attn):
        super().__init__()
        self.res = ResBlock(cin, cout, time_dim)
        self.attn = attn
        self.down = nn.Conv2d(cout, cout, 3, stride=2, padding=1)


class MidBlock(nn.Module):
    def __init__(self, ch, time_dim, attn):
        super().__init__()
        self.res1 = ResBlock(ch, ch, time_dim)
        self.attn = attn
        self.res2 = ResBlock(ch, ch, time_dim)


class DecoderLevel(nn.Module):
    def __init__(self, cin, cskip, cout, time_dim, attn):
        super().__init__()
        self.res = ResBlock(cin + cskip, cout, time_dim)
        self.attn = attn


class TimeEmbed(nn.Module):
    def __init__(self, base: int, dim: int):
        super().__init__()
        self.base = base
        self.mlp = nn.Sequential(nn.Linear(base, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t):
        emb = timestep_embedding(t, self.base).to(self.mlp[0].weight.dtype)
        return self.mlp(emb)


def _check_t(t: torch.Tensor, num_timesteps: int) -> None:
    if torch.any(t < 1) or torch.any(t > num_timesteps):
        raise TimestepOutOfRange(f"timesteps must lie in [1, {num_timesteps}], got {t.tolist()}")


class DenoisingUNet(nn.Module):
    """epsilon-prediction UNet over latent scales s, s/2, s/4 with a mid block at s/8.

    Only the high-level prompt is attended here; low-level information reaches
    the denoiser through the control branch.
    """

    def __init__(self, latent_channels=4, channels=(64, 128, 128), text_dim=64, heads=4,
                 num_timesteps=1000):
        super().__init__()
        self.channels = tuple(channels)
        self.num_timesteps = num_timesteps
        time_dim = channels[0] * 4
        self.time_embed = TimeEmbed(channels[0], time_dim)
        self.conv_in = nn.Conv2d(latent_channels, channels[0], 3, padding=1)
        self.levels = nn.ModuleList()
        prev = channels[0]
        for ch in channels:
            self.levels.append(EncoderLevel(prev, ch, time_dim, CrossAttention(ch, text_dim, heads)))
            prev = ch
        self.mid = MidBlock(prev, time_dim, CrossAttention(prev, text_dim, heads))
        self.up = nn.ModuleList()
        for ch in reversed(channels):
            self.up.append(DecoderLevel(prev, ch, ch, time_dim, CrossAttention(ch, text_dim, heads)))
            prev = ch
        self.norm_out = nn.GroupNorm(_groups(prev), prev)
        self.conv_out = nn.Conv2d(prev, latent_channels, 3, padding=1)

    def tap_channels(self) -> list[int]:
        return list(self.channels) + [self.channels[-1]]

    def forward(self, z, t, c_h, control=None, cond_attn=None):
        _check_t(t, self.num_timesteps)
        if z.shape[-1] % 8 or z.shape[-2] % 8:
            raise ShapeMismatch(f"latent {tuple(z.shape[-2:])} must be divisible by 8")
        if control is not None and cond_attn is None:
            raise ValueError("control outputs given without conditional attention blocks")
        emb = self.time_embed(t)
        h = self.conv_in(z)
        skips = []
        for k, lvl in enumerate(self.levels):
            h = lvl.res(h, emb)
            h = _attend(lvl.attn, h, c_h)
            if control is not None:
                h = _attend(cond_attn[k], h, to_tokens(control.features[k]))
            skips.append(h if control is None else h + control.residuals[k])
            h = lvl.down(h)
        h = self.mid.res1(h, emb)
        h = _attend(self.mid.attn, h, c_h)
        if control is not None:
            h = _attend(cond_attn[-1], h, to_tokens(control.features[-1]))
        h = self.mid.res2(h, emb)
        if control is not None:
            h = h + control.residuals[-1]
        for lvl, skip in zip(self.up, reversed(skips)):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = lvl.res(torch.cat([h, skip], dim=1), emb)
            h = _attend(lvl.attn, h, c_h)
        return self.conv_out(F.silu(self.norm_out(h)))


class CondAttentionSet(nn.ModuleList):
    """One Conditional Attention block per encoder level plus one for the mid block."""

    def __init__(self, unet_channels, heads=4):
        chs = list(unet_channels) + [unet_channels[-1]]
        super().__init__([ConditionalAttention(c, c, heads) for c in chs])


# ---------------------------------------------------------------------------
# control branch


@dataclass
class ControlOutputs:
    residuals: list        # zero-conv outputs per tap (3 levels + mid)
    features: list         # pre-zero-conv control features, consumed by Conditional Attention
    pixel_heads: list      # x_hat_1..3 at hr/2, hr/4, hr/8
    latent_heads: list     # z_hat_1..3 at lat/2, lat/4, lat/8


class ControlBranch(nn.Module):
    """Pyramid image encoder + trainable encoder clone with prompt fusion + DFC heads."""

    def __init__(self, latent_channels=4, channels=(64, 128, 128), text_dim=64, heads=4,
                 image_channels=(16, 32, 64), fusion_mode="parallel", num_timesteps=1000):
        super().__init__()
        self.channels = tuple(channels)
        self.num_timesteps = num_timesteps
        layers, heads_px, prev = [], [], 3
        for ch in image_channels:
            layers.append(nn.Sequential(nn.Conv2d(prev, ch, 3, padding=1), nn.SiLU(),
                                        nn.Conv2d(ch, ch, 3, stride=2, padding=1), nn.SiLU()))
            heads_px.append(nn.Conv2d(ch, 3, 3, padding=1))
            prev = ch
        self.image_encoder = nn.ModuleList(layers)
        self.pixel_heads = nn.ModuleList(heads_px)
        self.hint_zero = zero_conv(prev, channels[0])

        time_dim = channels[0] * 4
        self.time_embed = TimeEmbed(channels[0], time_dim)
        self.conv_in = nn.Conv2d(latent_channels, channels[0], 3, padding=1)
        self.levels = nn.ModuleList()
        prev = channels[0]
        for ch in channels:
            self.levels.append(EncoderLevel(prev, ch, time_dim, SFABlock(ch, text_dim, heads, mode=fusion_mode)))
            prev = ch
        self.mid = MidBlock(prev, time_dim, SFABlock(prev, text_dim, heads, mode=fusion_mode))
        taps = list(channels) + [channels[-1]]
        self.zero_convs = nn.ModuleList(zero_conv(c) for c in taps)
        # features at lat/2, lat/4, lat/8 -> latent channels
        self.latent_heads = nn.ModuleList(nn.Conv2d(c, latent_channels, 1) for c in taps[1:])

    @property
    def fusion_mode(self) -> str:
        return self.mid.attn.mode

    def set_fusion_mode(self, mode: str) -> None:
        for m in self.modules():
            if isinstance(m, SFABlock):
                m.mode = mode

    @torch.no_grad()
    def init_from_unet(self, unet: DenoisingUNet) -> None:
        """Copy the denoiser encoder weights (high-prompt attention goes to ca_high)."""
        self.time_embed.load_state_dict(unet.time_embed.state_dict())
        self.conv_in.load_state_dict(unet.conv_in.state_dict())
        for mine, theirs in zip(list(self.levels) + [self.mid], list(unet.levels) + [unet.mid]):
            for name, child in theirs.named_children():
                if name == "attn":
                    mine.attn.ca_high.load_state_dict(child.state_dict())
                else:
                    getattr(mine, name).load_state_dict(child.state_dict())

    def forward(self, lr_up, z_t, t, c_h, c_l) -> ControlOutputs:
        _check_t(t, self.num_timesteps)
        factor = lr_up.shape[-1] // z_t.shape[-1]
        if (lr_up.shape[-2] != z_t.shape[-2] * factor or lr_up.shape[-1] != z_t.shape[-1] * factor
                or factor != 2 ** len(self.image_encoder)):
            raise ShapeMismatch(f"lr_up {tuple(lr_up.shape)} incompatible with latent {tuple(z_t.shape)}")
        pixel = []
        x = lr_up
        for layer, head in zip(self.image_encoder, self.pixel_heads):
            x = layer(x)
            pixel.append(head(x))
        emb = self.time_embed(t)
        h = self.conv_in(z_t) + self.hint_zero(x)
        feats = []
        for lvl in self.levels:
            h = lvl.res(h, emb)
            h = _attend(lvl.attn, h, c_h, c_l)
            feats.append(h)
            h = lvl.down(h)
        h = self.mid.res1(h, emb)
        h = _attend(self.mid.attn, h, c_h, c_l)
        h = self.mid.res2(h, emb)
        feats.append(h)
        residuals = [zc(f) for zc, f in zip(self.zero_convs, feats)]
        latent = [head(f) for head, f in zip(self.latent_heads, feats[1:])]
        return ControlOutputs(residuals, feats, pixel, latent)


# ---------------------------------------------------------------------------
# model bundle


BASE_MODULES = ("autoencoder", "text_encoder", "unet")
CONTROL_MODULES = ("control", "cond_attn")


class Restorer(nn.Module):
    """All five trainable modules under fixed names."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        self.autoencoder = Autoencoder(cfg.latent_channels, cfg.latent_factor, cfg.ae_channels)
        self.text_encoder = TextEncoder(cfg.vocab_size, cfg.text_dim, cfg.context_len, cfg.text_layers, cfg.heads)
        self.unet = DenoisingUNet(cfg.latent_channels, cfg.unet_channels, cfg.text_dim, cfg.heads, cfg.num_timesteps)
        self.control = ControlBranch(cfg.latent_channels, cfg.unet_channels, cfg.text_dim, cfg.heads,
                                     cfg.image_encoder_channels, cfg.fusion_mode, cfg.num_timesteps)
        self.cond_attn = CondAttentionSet(cfg.unet_channels, cfg.heads)

    def module_dict(self) -> dict[str, nn.Module]:
        return {name: getattr(self, name) for name in BASE_MODULES + CONTROL_MODULES}

    def control_forward(self, lr_up, z_t, t, c_h, c_l) -> ControlOutputs:
        return self.control(lr_up, z_t, t, c_h, c_l)

    def unet_forward(self, z_t, t, c_h, control: ControlOutputs | None = None):
        return self.unet(z_t, t, c_h, control, self.cond_attn if control is not None else None)

    def eps(self, z_t, t, c_h, c_l=None, lr_up=None):
        """Full denoiser: control branch (when LR given) feeding the UNet."""
        control = None
        if lr_up is not None:
            control = self.control_forward(lr_up, z_t, t, c_h, c_l)
        return self.unet_forward(z_t, t, c_h, control)


def control_forward(model: Restorer, lr_up, z_t, t, c_h, c_l) -> ControlOutputs:
    return model.control_forward(lr_up, z_t, t, c_h, c_l)


def unet_forward(model: Restorer, z_t, t, c_h, control=None):
    return model.unet_forward(z_t, t, c_h, control)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
