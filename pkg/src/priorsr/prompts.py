"""High/low-level prompt acquisition and the toy text encoder."""
from __future__ import annotations

import base64
import json
import os
import re
import zlib
from dataclasses import dataclass
from pathlib import Path

import requests
import torch
from torch import nn

from .degrade import DegradationRecord

HIGH_INSTRUCTION = "Please provide a descriptive summary of the content of this image"
LOW_INSTRUCTION = ("Please describe the quality of this image and evaluate it based on factors "
                   "such as clarity, color, noise, and lighting")
NEGATIVE_PROMPT = "blurry, dotted, noise, unclear, low-res, over-smoothed"

MLLM_URL_ENV = "PRIORSR_MLLM_URL"


class MLLMError(RuntimeError):
    pass


class MLLMTimeout(MLLMError):
    pass


class MLLMHttpError(MLLMError):
    pass


class EmptyResponse(MLLMError):
    pass


@dataclass
class PromptPair:
    high_text: str
    low_text: str
    provenance: str = "stub"

    def to_json(self) -> str:
        return json.dumps({"high_text": self.high_text, "low_text": self.low_text,
                           "provenance": self.provenance}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PromptPair":
        d = json.loads(text)
        return cls(d["high_text"], d["low_text"], d.get("provenance", "cache"))


@dataclass
class PromptBundle:
    """Prompt texts plus their (77, d) embeddings."""
    pair: PromptPair
    negative_text: str
    c_h: torch.Tensor
    c_l: torch.Tensor
    c_neg: torch.Tensor


def negative_prompt() -> str:
    return NEGATIVE_PROMPT


# ---------------------------------------------------------------------------
# stub provider

# words the stub may emit for each degradation family
DISTORTION_WORDS = {
    "blur": ("blurry", "blur", "soft"),
    "noise": ("noise", "noisy", "grainy"),
    "jpeg": ("compression", "blocky", "jpeg"),
    "sinc": ("ringing",),
}


def _bucket(value: float, edges: tuple, names: tuple) -> str:
    for edge, name in zip(edges, names):
        if value < edge:
            return name
    return names[-1]


def active_degradations(record: DegradationRecord) -> dict[str, float]:
    """Strongest setting per degradation family present in the record."""
    active: dict[str, float] = {}
    for st in record.stages():
        if st.blur.kernel_kind != "none":
            active["blur"] = max(active.get("blur", 0.0), max(st.blur.sigma))
        if st.noise.kind == "gaussian":
            active["noise"] = max(active.get("noise", 0.0), st.noise.sigma_or_scale * 255)
        elif st.noise.kind == "poisson":
            # map poisson scale onto a comparable gaussian-level figure
            active["noise"] = max(active.get("noise", 0.0), st.noise.sigma_or_scale * 8)
        if st.jpeg is not None:
            active["jpeg"] = min(active.get("jpeg", 100.0), float(st.jpeg))
    if record.final_sinc.applied:
        active["sinc"] = record.final_sinc.cutoff
    return active


def stub_describe(record: DegradationRecord, scene_tags=()) -> PromptPair:
    """Deterministic prompt pair templated from scene tags and the record."""
    tags = [t.strip() for t in scene_tags if t and t.strip()]
    high = "a picture of " + (", ".join(tags) if tags else "an everyday scene")
    active = active_degradations(record)
    parts = []
    if "blur" in active:
        parts.append(_bucket(active["blur"], (1.0, 2.0), ("slightly soft", "blurry", "very blurry")) + " details")
    if "noise" in active:
        parts.append(_bucket(active["noise"], (8.0, 16.0), ("faint noise", "visible noise", "heavy noise")))
    if "jpeg" in active:
        parts.append(_bucket(-active["jpeg"], (-70.0, -50.0),
                             ("mild compression", "blocky compression", "severe jpeg compression")))
    if "sinc" in active:
        parts.append("ringing around edges")
    if parts:
        low = "a low quality image with " + ", ".join(parts)
    else:
        low = "a clear, sharp and clean image with natural color and good lighting"
    return PromptPair(high, low, "stub")


# ---------------------------------------------------------------------------
# MLLM client


def mllm_describe(image_path, level: str, endpoint: str | None = None, timeout: float = 30.0,
                  max_tokens: int = 256, instruction: str | None = None) -> str:
    """Ask a LLaVA-style endpoint to describe an image at the given level.

    The request is ``POST {image, instruction, max_tokens}`` and the reply is
    ``{text}``.  Transport failures surface as :class:`MLLMTimeout` or
    :class:`MLLMHttpError`; a blank reply raises :class:`EmptyResponse`.
    """
    if level not in ("high", "low"):
        raise ValueError(f"level must be 'high' or 'low', got {level!r}")
    endpoint = endpoint or os.environ.get(MLLM_URL_ENV)
    if not endpoint:
        raise MLLMError(f"no MLLM endpoint configured (set {MLLM_URL_ENV})")
    if instruction is None:
        instruction = HIGH_INSTRUCTION if level == "high" else LOW_INSTRUCTION
    payload = {
        "image": base64.b64encode(Path(image_path).read_bytes()).decode("ascii"),
        "instruction": instruction,
        "max_tokens": int(max_tokens),
    }
    try:
        resp = requests.post(endpoint, json=payload, timeout=timeout)
    except requests.Timeout as exc:
        raise MLLMTimeout(f"MLLM request to {endpoint} timed out after {timeout}s") from exc
    except requests.ConnectionError as exc:
        raise MLLMTimeout(f"MLLM endpoint {endpoint} unreachable") from exc
    if resp.status_code != 200:
        raise MLLMHttpError(f"MLLM endpoint returned HTTP {resp.status_code}")
    try:
        text = resp.json().get("text", "")
    except ValueError as exc:
        raise MLLMHttpError("MLLM endpoint returned non-JSON body") from exc
    if not isinstance(text, str) or not text.strip():
        raise EmptyResponse("MLLM endpoint returned an empty description")
    return text.strip()


def mllm_pair(image_path, endpoint: str | None = None, timeout: float = 30.0) -> PromptPair:
    return PromptPair(mllm_describe(image_path, "high", endpoint, timeout),
                      mllm_describe(image_path, "low", endpoint, timeout), "mllm")


def cache_path(image_path) -> Path:
    p = Path(image_path)
    return p.with_name(p.stem + ".prompts.json")


def read_cache(image_path) -> PromptPair | None:
    p = cache_path(image_path)
    return PromptPair.from_json(p.read_text()) if p.exists() else None


def write_cache(image_path, pair: PromptPair) -> Path:
    p = cache_path(image_path)
    p.write_text(pair.to_json())
    return p


# ---------------------------------------------------------------------------
# tokenizer + text encoder

PAD_ID = 0
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str, vocab_size: int = 4096, length: int = 77) -> list[int]:
    """Lowercase, split on whitespace/punctuation, hash each word into the vocab.

    Id 0 is reserved for padding.  Output is padded/truncated to ``length``.
    """
    words = _TOKEN_RE.findall(text.lower())[:length]
    ids = [zlib.crc32(w.encode("utf-8")) % (vocab_size - 1) + 1 for w in words]
    return ids + [PAD_ID] * (length - len(ids))


class TextEncoder(nn.Module):
    """Hashed-vocabulary transformer producing (L, d) embedding sequences."""

    def __init__(self, vocab_size=4096, dim=64, length=77, layers=2, heads=4):
        super().__init__()
        self.vocab_size = vocab_size
        self.length = length
        self.token_emb = nn.Embedding(vocab_size, dim)
        self.pos_emb = nn.Parameter(torch.randn(length, dim) * 0.02)
        layer = nn.TransformerEncoderLayer(dim, heads, dim_feedforward=dim * 2, dropout=0.0,
                                           batch_first=True, norm_first=True)
        self.blocks = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(dim)
        nn.init.normal_(self.token_emb.weight, std=0.02)

    def token_ids(self, texts) -> torch.Tensor:
        if isinstance(texts, str):
            texts = [texts]
        ids = [tokenize(t, self.vocab_size, self.length) for t in texts]
        return torch.tensor(ids, dtype=torch.long, device=self.pos_emb.device)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        x = self.token_emb(ids) + self.pos_emb
        return self.norm(self.blocks(x))

    def encode(self, texts) -> torch.Tensor:
        """Texts -> (B, L, d)."""
        return self(self.token_ids(texts))


def encode_text(text: str, encoder: TextEncoder) -> torch.Tensor:
    """Single text -> (L, d) sequence."""
    return encoder.encode([text])[0]
