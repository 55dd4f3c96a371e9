"""Cross-attention, serial/parallel prompt fusion, and Conditional Attention."""
from __future__ import annotations

import math

import torch
from torch import nn


class ShapeMismatch(ValueError):
    pass


class CrossAttention(nn.Module):
    """Multi-head scaled dot-product attention with queries from ``x``.

    Shapes: ``x`` (B, N, d_model), ``ctx`` (B, L, d_ctx) -> (B, N, d_model).
    """

    def __init__(self, d_model: int, d_ctx: int, heads: int = 4, dim: int | None = None,
                 residual: bool = True, zero_out: bool = False):
        super().__init__()
        dim = dim or d_model
        if dim % heads:
            raise ValueError(f"attention dim {dim} not divisible by {heads} heads")
        self.d_model, self.d_ctx, self.heads, self.dim = d_model, d_ctx, heads, dim
        self.residual = residual
        self.to_q = nn.Linear(d_model, dim)
        self.to_k = nn.Linear(d_ctx, dim)
        self.to_v = nn.Linear(d_ctx, dim)
        self.to_out = nn.Linear(dim, d_model)
        if zero_out:
            nn.init.zeros_(self.to_out.weight)
            nn.init.zeros_(self.to_out.bias)

    def _split(self, t: torch.Tensor) -> torch.Tensor:
        b, n, _ = t.shape
        return t.view(b, n, self.heads, self.dim // self.heads).transpose(1, 2)

    def attention_weights(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        q, k = self._split(self.to_q(x)), self._split(self.to_k(ctx))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.dim // self.heads)
        return logits.softmax(dim=-1)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3 or x.shape[-1] != self.d_model:
            raise ShapeMismatch(f"query features {tuple(x.shape)} do not match d_model={self.d_model}")
        if ctx.dim() != 3 or ctx.shape[-1] != self.d_ctx or ctx.shape[0] != x.shape[0]:
            raise ShapeMismatch(f"context {tuple(ctx.shape)} does not match d_ctx={self.d_ctx}, batch={x.shape[0]}")
        attn = self.attention_weights(x, ctx)
        v = self._split(self.to_v(ctx))
        out = (attn @ v).transpose(1, 2).reshape(x.shape[0], x.shape[1], self.dim)
        out = self.to_out(out)
        return x + out if self.residual else out


def cross_attention(x: torch.Tensor, ctx: torch.Tensor, block: CrossAttention) -> torch.Tensor:
    return block(x, ctx)


class SFABlock(nn.Module):
    """High/low prompt branches plus the fusion attention.

    ``mode`` selects the wiring used for the fusion-type ablation:
    ``high`` / ``low`` run a single branch, ``serial`` chains high then low,
    ``parallel`` runs both branches on ``x`` and fuses them with queries from
    the high branch and keys/values from the low branch.
    """

    def __init__(self, d_model: int, d_ctx: int, heads: int = 4, residual: bool = True,
                 mode: str = "parallel"):
        super().__init__()
        self.mode = mode
        self.ca_high = CrossAttention(d_model, d_ctx, heads, residual=residual)
        self.ca_low = CrossAttention(d_model, d_ctx, heads, residual=residual)
        self.ca_fuse = CrossAttention(d_model, d_model, heads, residual=residual)

    def forward(self, x, c_h, c_l):
        if self.mode == "parallel":
            return sfa(x, c_h, c_l, self)
        if self.mode == "serial":
            return serial_fusion(x, c_h, c_l, (self.ca_high, self.ca_low))
        if self.mode == "high":
            return self.ca_high(x, c_h)
        if self.mode == "low":
            return self.ca_low(x, c_l)
        raise ValueError(f"unknown fusion mode {self.mode!r}")


def sfa(x, c_h, c_l, block: SFABlock):
    """Parallel fusion: fuse(high(x, c_h) as query, low(x, c_l) as context)."""
    high = block.ca_high(x, c_h)
    low = block.ca_low(x, c_l)
    return block.ca_fuse(high, low)


def serial_fusion(x, c_h, c_l, blocks):
    ca_high, ca_low = blocks
    return ca_low(ca_high(x, c_h), c_l)


class ConditionalAttention(CrossAttention):
    """Denoiser features attend to control-branch features; starts as identity."""

    def __init__(self, d_model: int, d_ctrl: int, heads: int = 4):
        super().__init__(d_model, d_ctrl, heads, residual=True, zero_out=True)


def conditional_attention(unet_feat, control_feat, block: ConditionalAttention):
    return block(unet_feat, control_feat)


def to_tokens(h: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, H*W, C)."""
    return h.flatten(2).transpose(1, 2)


def from_tokens(t: torch.Tensor, height: int, width: int) -> torch.Tensor:
    return t.transpose(1, 2).reshape(t.shape[0], t.shape[2], height, width)
