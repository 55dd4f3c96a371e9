"""Shared image conventions, resampling primitives and run configuration.

Images live as numpy arrays in HWC layout.  ``uint8`` arrays are the on-disk
form; float arrays carry either the UNIT range ``[0, 1]`` (metrics, file I/O)
or the MODEL range ``[-1, 1]`` (what the networks see).
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


class ShapeError(ValueError):
    pass


class NonDivisibleShape(ShapeError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# value ranges


def check_u8(img: np.ndarray) -> np.ndarray:
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected HxWx3 uint8 image, got {img.dtype} {img.shape}")
    return img


def to_model_range(img: np.ndarray) -> np.ndarray:
    check_u8(img)
    return (img.astype(np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def from_model_range(img: np.ndarray) -> np.ndarray:
    """Clamp to [-1, 1] and quantize back to uint8."""
    x = (np.clip(img, -1.0, 1.0).astype(np.float64) + 1.0) * 127.5
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def to_unit_range(img: np.ndarray) -> np.ndarray:
    check_u8(img)
    return img.astype(np.float32) / np.float32(255.0)


def from_unit_range(img: np.ndarray) -> np.ndarray:
    x = np.clip(img, 0.0, 1.0).astype(np.float64) * 255.0
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# resampling


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def downsample_avg(img: np.ndarray, factor: int) -> np.ndarray:
    """Block-average an HxWxC (or HxW) array by an integer power-of-2 factor."""
    if not _is_pow2(int(factor)):
        raise ValueError(f"factor must be a power of 2, got {factor}")
    h, w = img.shape[:2]
    if h % factor or w % factor:
        raise NonDivisibleShape(f"{h}x{w} not divisible by {factor}")
    if factor == 1:
        return img.copy()
    rest = img.shape[2:]
    blocks = img.reshape(h // factor, factor, w // factor, factor, *rest)
    return blocks.mean(axis=(1, 3), dtype=np.float64).astype(img.dtype)


def cubic_weight(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel; a=-0.5 is Catmull-Rom."""
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _cubic_matrix(n_in: int, factor: int) -> np.ndarray:
    n_out = n_in * factor
    # pixel-centre alignment, taps clamped at the borders
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    base = np.floor(src).astype(int)
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for k in range(-1, 3):
        idx = base + k
        wts = cubic_weight(src - idx)
        np.add.at(mat, (rows, np.clip(idx, 0, n_in - 1)), wts)
    return mat


def upsample_bicubic(img: np.ndarray, factor: int) -> np.ndarray:
    """Separable Catmull-Rom upsampling with edge clamping.

    No output clamping is applied, so overshoot near edges is preserved; callers
    that need a valid range clamp afterwards.
    """
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return img.copy()
    h, w = img.shape[:2]
    my = _cubic_matrix(h, factor)
    mx = _cubic_matrix(w, factor)
    x = img.astype(np.float64)
    out = np.einsum("ph,hw...->pw...", my, x)
    out = np.einsum("qw,pw...->pq...", mx, out)
    return out.astype(img.dtype if img.dtype.kind == "f" else np.float32)


# ---------------------------------------------------------------------------
# PNG I/O


def read_png(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_png(path: str | os.PathLike, img: np.ndarray) -> None:
    check_u8(img)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img, mode="RGB").save(path, format="PNG")


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h < size or w < size:
        raise ShapeError(f"image {h}x{w} smaller than crop {size}")
    top, left = (h - size) // 2, (w - size) // 2
    return img[top:top + size, left:left + size]


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    # geometry
    hr_size: int = 128
    sr_factor: int = 4
    latent_factor: int = 8
    latent_channels: int = 4
    # diffusion
    num_timesteps: int = 1000
    sampler_steps: int = 20
    guidance: float = 5.5
    init_from_lr: bool = False
    # losses
    lambda_dfc: float = 0.05
    dfc_mode: str = "both"
    # optimisation (control stage uses lr/weight_decay/batch)
    lr: float = 5e-5
    weight_decay: float = 1e-2
    batch: int = 32
    ae_lr: float = 1e-3
    base_lr: float = 1e-4
    ae_steps: int = 2000
    base_steps: int = 2000
    control_steps: int = 2000
    prompt_dropout: float = 0.1
    log_every: int = 1
    ckpt_every: int = 0
    # architecture
    unet_channels: tuple = (64, 128, 128)
    ae_channels: tuple = (16, 32, 64)
    image_encoder_channels: tuple = (16, 32, 64)
    heads: int = 4
    text_dim: int = 64
    vocab_size: int = 4096
    context_len: int = 77
    text_layers: int = 2
    fusion_mode: str = "parallel"
    # data
    n_pairs: int = 8
    final_sinc: bool = False
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not _is_pow2(self.sr_factor):
            raise ConfigError(f"sr_factor must be a power of 2, got {self.sr_factor}")
        if not _is_pow2(self.latent_factor):
            raise ConfigError(f"latent_factor must be a power of 2, got {self.latent_factor}")
        if self.hr_size % (self.latent_factor * 8):
            raise ConfigError(
                f"hr_size {self.hr_size} must be divisible by latent_factor*8 = {self.latent_factor * 8}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion_mode {self.fusion_mode!r}")
        if self.dfc_mode not in DFC_MODES:
            raise ConfigError(f"unknown dfc_mode {self.dfc_mode!r}")
        if self.sampler_steps > self.num_timesteps or self.sampler_steps < 1:
            raise ConfigError("sampler_steps must lie in [1, num_timesteps]")
        if self.lambda_dfc < 0:
            raise ConfigError("lambda_dfc must be >= 0")

    @property
    def lr_size(self) -> int:
        return self.hr_size // self.sr_factor

    @property
    def latent_size(self) -> int:
        return self.hr_size // self.latent_factor

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    # flat ``key = value`` text form
    def dumps(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | os.PathLike) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str, overrides: list[str] | dict | None = None) -> "RunConfig":
        values = parse_kv(text.splitlines())
        if isinstance(overrides, dict):
            values.update({k: str(v) for k, v in overrides.items()})
        elif overrides:
            values.update(parse_kv(overrides))
        return cls.from_strings(values)

    @classmethod
    def load(cls, path: str | os.PathLike | None, overrides=None) -> "RunConfig":
        text = Path(path).read_text() if path else ""
        return cls.loads(text, overrides)

    @classmethod
    def from_strings(cls, values: dict[str, str]) -> "RunConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for key, raw in values.items():
            default = known[key].default
            kwargs[key] = _coerce(key, raw, default)
        return cls(**kwargs)


FUSION_MODES = ("high", "low", "serial", "parallel")
DFC_MODES = ("none", "pixel", "latent", "both")


def parse_kv(lines) -> dict[str, str]:
    out = {}
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"malformed config line: {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _coerce(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
