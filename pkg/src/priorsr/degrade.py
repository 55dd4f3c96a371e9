"""Two-stage synthetic degradation with fully recorded parameters.

Every random choice is drawn up front into a :class:`DegradationRecord`;
:func:`apply` is then a deterministic function of ``(hr, record)``.  The noise
realisation is regenerated from ``record.seed`` so the LR image can be replayed
byte-for-byte without storing it.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import cv2
import numpy as np
from scipy import special

from .core import (ShapeError, center_crop, downsample_avg, from_unit_range, read_png,
                   to_unit_range, write_png)


class EmptySourceDir(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# records


@dataclass
class BlurParams:
    kernel_kind: str = "none"          # iso-gaussian | aniso-gaussian | none
    sigma: tuple = (0.0, 0.0)          # (sigma_x, sigma_y); equal for iso
    rotation: float = 0.0
    kernel_size: int = 0


@dataclass
class ResizeParams:
    mode: str = "area"                 # bicubic | bilinear | area
    scale: str = "1"                   # exact rational, e.g. "1/4"


@dataclass
class NoiseParams:
    kind: str = "none"                 # gaussian | poisson | none
    sigma_or_scale: float = 0.0
    approximated: bool = False         # poisson drawn as signal-scaled gaussian


@dataclass
class StageParams:
    blur: BlurParams = field(default_factory=BlurParams)
    resize: ResizeParams = field(default_factory=ResizeParams)
    noise: NoiseParams = field(default_factory=NoiseParams)
    jpeg: int | None = None


@dataclass
class SincParams:
    applied: bool = False
    cutoff: float = 0.0
    kernel_size: int = 0


@dataclass
class DegradationRecord:
    stage1: StageParams
    stage2: StageParams | None
    final_sinc: SincParams
    seed: int

    def scale_product(self) -> Fraction:
        s = Fraction(self.stage1.resize.scale)
        if self.stage2 is not None:
            s *= Fraction(self.stage2.resize.scale)
        return s

    def stages(self) -> list[StageParams]:
        return [self.stage1] if self.stage2 is None else [self.stage1, self.stage2]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationRecord":
        def stage(s):
            if s is None:
                return None
            blur = dict(s["blur"])
            blur["sigma"] = tuple(blur["sigma"])
            return StageParams(BlurParams(**blur), ResizeParams(**s["resize"]),
                               NoiseParams(**s["noise"]), s["jpeg"])
        return cls(stage(d["stage1"]), stage(d["stage2"]), SincParams(**d["final_sinc"]), int(d["seed"]))

    @classmethod
    def from_json(cls, text: str) -> "DegradationRecord":
        return cls.from_dict(json.loads(text))


def identity_record(sr_factor: int = 4, seed: int = 0) -> DegradationRecord:
    return DegradationRecord(
        stage1=StageParams(resize=ResizeParams("area", f"1/{sr_factor}")),
        stage2=None,
        final_sinc=SincParams(),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# ranges


@dataclass
class StageRanges:
    kernel_probs: dict = field(default_factory=lambda: {"iso-gaussian": 0.7, "aniso-gaussian": 0.3})
    sigma: tuple = (0.2, 3.0)
    kernel_sizes: tuple = (7, 9, 11, 13, 15, 17, 19, 21)
    resize_modes: tuple = ("bicubic", "bilinear", "area")
    noise_probs: dict = field(default_factory=lambda: {"gaussian": 0.5, "poisson": 0.5})
    gaussian_sigma: tuple = (1 / 255, 25 / 255)
    poisson_scale: tuple = (0.05, 2.5)
    jpeg_prob: float = 1.0
    jpeg_quality: tuple = (30, 95)


@dataclass
class DegradationRanges:
    """Sampling table.  Scale chains are exact rationals whose product is 1/sr."""
    stage1: StageRanges = field(default_factory=StageRanges)
    stage2: StageRanges = field(default_factory=lambda: StageRanges(
        kernel_probs={"none": 0.2, "iso-gaussian": 0.56, "aniso-gaussian": 0.24},
        sigma=(0.2, 1.5), kernel_sizes=(7, 9, 11)))
    second_stage_prob: float = 0.8
    single_chains: tuple = (("1/4",),)
    double_chains: tuple = (("1/2", "1/2"), ("1", "1/4"), ("1/4", "1"), ("2", "1/8"))
    sinc_enabled: bool = False
    sinc_prob: float = 0.8
    sinc_cutoff: tuple = (math.pi / 3, math.pi)

    @classmethod
    def identity(cls, sr_factor: int = 4) -> "DegradationRanges":
        none_stage = StageRanges(kernel_probs={"none": 1.0}, noise_probs={"none": 1.0}, jpeg_prob=0.0)
        return cls(stage1=none_stage, stage2=none_stage, second_stage_prob=0.0,
                   single_chains=((f"1/{sr_factor}",),), double_chains=())

    @classmethod
    def for_sr_factor(cls, sr_factor: int, sinc: bool = False) -> "DegradationRanges":
        r = cls(sinc_enabled=sinc)
        if sr_factor != 4:
            f = Fraction(1, sr_factor)
            r.single_chains = ((str(f),),)
            r.double_chains = (("1", str(f)), (str(f), "1"))
        return r


def _choose(rng: np.random.Generator, probs: dict) -> str:
    keys = list(probs)
    p = np.array([probs[k] for k in keys], dtype=float)
    return keys[int(rng.choice(len(keys), p=p / p.sum()))]


def _sample_stage(rng: np.random.Generator, r: StageRanges, scale: str) -> StageParams:
    kind = _choose(rng, r.kernel_probs)
    if kind == "none":
        blur = BlurParams()
    else:
        ksize = int(rng.choice(r.kernel_sizes))
        if kind == "iso-gaussian":
            s = float(rng.uniform(*r.sigma))
            blur = BlurParams(kind, (s, s), 0.0, ksize)
        else:
            sx, sy = (float(v) for v in rng.uniform(*r.sigma, size=2))
            blur = BlurParams(kind, (sx, sy), float(rng.uniform(-math.pi, math.pi)), ksize)
    resize = ResizeParams(str(rng.choice(r.resize_modes)), scale)
    nkind = _choose(rng, r.noise_probs)
    if nkind == "gaussian":
        noise = NoiseParams("gaussian", float(rng.uniform(*r.gaussian_sigma)))
    elif nkind == "poisson":
        noise = NoiseParams("poisson", float(rng.uniform(*r.poisson_scale)), approximated=True)
    else:
        noise = NoiseParams()
    jpeg = None
    if rng.random() < r.jpeg_prob:
        jpeg = int(rng.integers(r.jpeg_quality[0], r.jpeg_quality[1] + 1))
    return StageParams(blur, resize, noise, jpeg)


def sample_record(ranges: DegradationRanges, seed: int) -> DegradationRecord:
    """Draw one record.  Deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    two = bool(ranges.double_chains) and rng.random() < ranges.second_stage_prob
    chains = ranges.double_chains if two else ranges.single_chains
    chain = chains[int(rng.integers(len(chains)))]
    stage1 = _sample_stage(rng, ranges.stage1, chain[0])
    stage2 = _sample_stage(rng, ranges.stage2, chain[1]) if two else None
    sinc = SincParams()
    if ranges.sinc_enabled and rng.random() < ranges.sinc_prob:
        sinc = SincParams(True, float(rng.uniform(*ranges.sinc_cutoff)), int(rng.choice((7, 9, 11, 13))))
    return DegradationRecord(stage1, stage2, sinc, int(rng.integers(0, 2**31 - 1)))


# ---------------------------------------------------------------------------
# kernels


def gaussian_kernel(size: int, sigma: tuple, rotation: float = 0.0) -> np.ndarray:
    sx, sy = sigma
    c, s = math.cos(rotation), math.sin(rotation)
    rot = np.array([[c, -s], [s, c]])
    cov = rot @ np.diag([sx * sx, sy * sy]) @ rot.T
    inv = np.linalg.inv(cov)
    ax = np.arange(size) - (size - 1) / 2
    xx, yy = np.meshgrid(ax, ax)
    grid = np.stack([xx, yy], axis=-1)
    k = np.exp(-0.5 * np.einsum("...i,ij,...j->...", grid, inv, grid))
    return k / k.sum()


def sinc_kernel(cutoff: float, size: int) -> np.ndarray:
    """Circular low-pass (2-D jinc) kernel."""
    ax = np.arange(size) - (size - 1) / 2
    xx, yy = np.meshgrid(ax, ax)
    r = np.hypot(xx, yy)
    with np.errstate(divide="ignore", invalid="ignore"):
        k = cutoff * special.j1(cutoff * r) / (2 * np.pi * r)
    k[r == 0] = cutoff ** 2 / (4 * np.pi)
    return k / k.sum()


# ---------------------------------------------------------------------------
# pipeline

_CV_INTERP = {"bicubic": cv2.INTER_CUBIC, "bilinear": cv2.INTER_LINEAR, "area": cv2.INTER_AREA}


def _filter(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return cv2.filter2D(img, -1, kernel.astype(np.float32), borderType=cv2.BORDER_REFLECT_101)


def _resize(img: np.ndarray, p: ResizeParams) -> np.ndarray:
    scale = Fraction(p.scale)
    if scale == 1:
        return img
    h, w = img.shape[:2]
    nh, nw = h * scale, w * scale
    if nh.denominator != 1 or nw.denominator != 1:
        raise ShapeError(f"{h}x{w} cannot be resized exactly by {p.scale}")
    nh, nw = int(nh), int(nw)
    inv = 1 / scale
    if p.mode == "area" and inv.denominator == 1 and (int(inv) & (int(inv) - 1)) == 0:
        return downsample_avg(img, int(inv))
    return cv2.resize(img, (nw, nh), interpolation=_CV_INTERP[p.mode])


def _noise(img: np.ndarray, p: NoiseParams, rng: np.random.Generator) -> np.ndarray:
    if p.kind == "none":
        return img
    eps = rng.standard_normal(img.shape).astype(np.float32)
    if p.kind == "gaussian":
        out = img + np.float32(p.sigma_or_scale) * eps
    else:
        # signal-dependent gaussian standing in for shot noise
        std = np.sqrt(np.clip(img, 0.0, 1.0) / 255.0) * np.float32(p.sigma_or_scale)
        out = img + std.astype(np.float32) * eps
    return np.clip(out, 0.0, 1.0)


def _jpeg(img: np.ndarray, quality: int) -> np.ndarray:
    u8 = from_unit_range(img)
    ok, buf = cv2.imencode(".jpg", u8[..., ::-1], [int(cv2.IMWRITE_JPEG_QUALITY), int(quality)])
    if not ok:
        raise RuntimeError("jpeg encode failed")
    dec = cv2.imdecode(buf, cv2.IMREAD_COLOR)[..., ::-1]
    return to_unit_range(np.ascontiguousarray(dec))


def apply(hr: np.ndarray, record: DegradationRecord, sr_factor: int | None = None) -> np.ndarray:
    """Degrade a uint8 HR image into its uint8 LR counterpart."""
    scale = record.scale_product()
    if sr_factor is not None and scale != Fraction(1, sr_factor):
        raise ShapeError(f"record scale {scale} does not match sr_factor {sr_factor}")
    h, w = hr.shape[:2]
    if (h * scale).denominator != 1 or (w * scale).denominator != 1:
        raise ShapeError(f"hr {h}x{w} not divisible by 1/{scale}")
    rng = np.random.default_rng(record.seed)
    img = to_unit_range(hr)
    stages = record.stages()
    for i, st in enumerate(stages):
        if st.blur.kernel_kind != "none":
            img = _filter(img, gaussian_kernel(st.blur.kernel_size, st.blur.sigma, st.blur.rotation))
        img = np.clip(_resize(img, st.resize), 0.0, 1.0)
        img = _noise(img, st.noise, rng)
        last = i == len(stages) - 1
        if last and record.final_sinc.applied:
            img = np.clip(_filter(img, sinc_kernel(record.final_sinc.cutoff, record.final_sinc.kernel_size)), 0, 1)
        if st.jpeg is not None:
            img = _jpeg(img, st.jpeg)
    return from_unit_range(img)


# ---------------------------------------------------------------------------
# procedural sources and dataset building

_PALETTE = {
    "red": (220, 40, 40), "green": (40, 170, 60), "blue": (40, 70, 210), "yellow": (230, 210, 40),
    "white": (240, 240, 240), "black": (20, 20, 20), "orange": (240, 140, 30), "purple": (140, 50, 170),
}
_SHAPES = ("circle", "square", "stripes", "checkerboard", "triangle", "ring")


def make_toy_source(size: int, seed: int) -> tuple[np.ndarray, list[str]]:
    """Procedural RGB scene with a couple of textured shapes on a gradient."""
    rng = np.random.default_rng(seed)
    names = list(_PALETTE)
    bg1, bg2 = rng.choice(len(names), size=2, replace=False)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    t = (xx * rng.uniform(0.2, 1.0) + yy * rng.uniform(0.2, 1.0))[..., None]
    t = t / t.max()
    img = (1 - t) * np.array(_PALETTE[names[bg1]], np.float32) + t * np.array(_PALETTE[names[bg2]], np.float32)
    tags = [f"{names[bg1]} and {names[bg2]} gradient background"]
    for _ in range(int(rng.integers(2, 4))):
        shape = _SHAPES[int(rng.integers(len(_SHAPES)))]
        color = names[int(rng.integers(len(names)))]
        cx, cy = rng.uniform(0.2, 0.8, size=2)
        rad = rng.uniform(0.1, 0.25)
        if shape == "circle":
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 < rad ** 2
        elif shape == "ring":
            d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
            mask = (d < rad) & (d > rad * 0.6)
        elif shape == "square":
            mask = (np.abs(xx - cx) < rad) & (np.abs(yy - cy) < rad)
        elif shape == "triangle":
            mask = (yy - cy < rad) & (yy - cy > -rad + 2 * np.abs(xx - cx))
        else:
            box = (np.abs(xx - cx) < rad * 1.2) & (np.abs(yy - cy) < rad * 1.2)
            period = rng.uniform(0.03, 0.07)
            if shape == "stripes":
                mask = box & (np.floor((xx + yy) / period) % 2 == 0)
            else:
                mask = box & ((np.floor(xx / period) + np.floor(yy / period)) % 2 == 0)
        img[mask] = _PALETTE[color]
        tags.append(f"{color} {shape}")
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), tags


def make_toy_sources(out_dir: str | os.PathLike, n: int, size: int, seed: int) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).spawn(n)
    paths = []
    for i, ss in enumerate(seeds):
        img, tags = make_toy_source(size, int(ss.generate_state(1)[0]))
        p = out_dir / f"src_{i:04d}.png"
        write_png(p, img)
        p.with_suffix(".tags.json").write_text(json.dumps(tags))
        paths.append(p)
    return paths


@dataclass
class ImagePair:
    hr: np.ndarray
    lr: np.ndarray
    record: DegradationRecord
    scene_tags: list = field(default_factory=list)


def pair_seeds(seed: int, n: int) -> list[int]:
    """Independent per-pair seeds split from one master seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def build_dataset(hr_dir, out_dir, n: int, ranges: DegradationRanges, seed: int,
                  hr_size: int = 128, sr_factor: int = 4) -> dict:
    """Synthesize ``n`` pairs from the PNGs in ``hr_dir`` and write a manifest."""
    out_dir = Path(out_dir)
    manifest = {"seed": seed, "hr_size": hr_size, "sr_factor": sr_factor, "pairs": []}
    if n == 0:
        return manifest
    sources = sorted(Path(hr_dir).glob("*.png"))
    if not sources:
        raise EmptySourceDir(f"no PNG files in {hr_dir}")
    for i, pseed in enumerate(pair_seeds(seed, n)):
        src = sources[i % len(sources)]
        hr = center_crop(read_png(src), hr_size)
        record = sample_record(ranges, pseed)
        lr = apply(hr, record, sr_factor)
        tags_file = src.with_suffix(".tags.json")
        tags = json.loads(tags_file.read_text()) if tags_file.exists() else []
        stem = f"pair_{i:04d}"
        write_png(out_dir / "hr" / f"{stem}.png", hr)
        write_png(out_dir / "lr" / f"{stem}.png", lr)
        rec_path = out_dir / "records" / f"{stem}.json"
        rec_path.parent.mkdir(parents=True, exist_ok=True)
        rec_path.write_text(record.to_json())
        manifest["pairs"].append({
            "hr_path": f"hr/{stem}.png",
            "lr_path": f"lr/{stem}.png",
            "record_path": f"records/{stem}.json",
            "scene_tags": tags,
            "seed": pseed,
        })
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def load_dataset(root) -> list[ImagePair]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    pairs = []
    for entry in manifest["pairs"]:
        rec = DegradationRecord.from_json((root / entry["record_path"]).read_text())
        pairs.append(ImagePair(read_png(root / entry["hr_path"]), read_png(root / entry["lr_path"]),
                               rec, list(entry.get("scene_tags", []))))
    return pairs
