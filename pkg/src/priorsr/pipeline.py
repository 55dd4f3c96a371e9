"""End-to-end helpers shared by the CLI: prompt sourcing, restoration, evaluation, ablations."""
from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np
import torch

from .core import FUSION_MODES, DFC_MODES, RunConfig, read_png, write_png
from .degrade import DegradationRecord, load_dataset
from .diffusion import SamplerConfig, sample
from .metrics import MetricReport
from .networks import Restorer
from .prompts import (MLLMError, PromptBundle, PromptPair, mllm_pair, negative_prompt, read_cache,
                      stub_describe)
from .training import read_manifest, train_control

log = logging.getLogger(__name__)


class PromptSourceUnavailable(RuntimeError):
    pass


class PairMismatch(FileNotFoundError):
    pass


GENERIC_PROMPTS = PromptPair("a picture of an everyday scene", "an image of unknown quality", "stub")


def dataset_context(lr_path) -> tuple[DegradationRecord, list] | None:
    """Find the record and scene tags for an LR file inside a built dataset."""
    lr_path = Path(lr_path)
    root = lr_path.parent.parent
    rec = root / "records" / f"{lr_path.stem}.json"
    if not rec.exists():
        return None
    tags = []
    manifest = root / "manifest.json"
    if manifest.exists():
        for entry in json.loads(manifest.read_text())["pairs"]:
            if Path(entry["lr_path"]).name == lr_path.name:
                tags = entry.get("scene_tags", [])
    return DegradationRecord.from_json(rec.read_text()), tags


def acquire_prompts(lr_path, source: str = "stub", endpoint: str | None = None,
                    timeout: float = 30.0) -> PromptPair:
    """Sidecar cache wins; then the live MLLM when requested; then the stub."""
    cached = read_cache(lr_path)
    if cached is not None:
        cached.provenance = f"cache:{cached.provenance}"
        return cached
    if source == "cache":
        raise PromptSourceUnavailable(f"no prompt cache next to {lr_path}")
    if source == "mllm":
        try:
            return mllm_pair(lr_path, endpoint, timeout)
        except MLLMError as exc:
            raise PromptSourceUnavailable(str(exc)) from exc
    ctx = dataset_context(lr_path)
    if ctx is None:
        return GENERIC_PROMPTS
    return stub_describe(*ctx)


@torch.no_grad()
def make_bundle(model: Restorer, pair: PromptPair) -> PromptBundle:
    te = model.text_encoder.eval()
    neg = negative_prompt()
    emb = te.encode([pair.high_text, pair.low_text, neg])
    return PromptBundle(pair, neg, emb[0], emb[1], emb[2])


def sampler_from(cfg: RunConfig, seed=None, steps=None, guidance=None, use_negative=True,
                 init_from_lr=None) -> SamplerConfig:
    return SamplerConfig(steps=steps or cfg.sampler_steps,
                         guidance=cfg.guidance if guidance is None else guidance,
                         seed=cfg.seed if seed is None else seed,
                         use_negative=use_negative,
                         init_from_lr=cfg.init_from_lr if init_from_lr is None else init_from_lr)


def list_images(path) -> list[Path]:
    path = Path(path)
    if path.is_dir():
        return sorted(p for p in path.glob("*.png"))
    return [path]


def checkpoint_ids(ckpt_dir) -> dict:
    manifest = read_manifest(ckpt_dir)
    return {name: {"version": meta["version"], "digest": meta["digest"]}
            for name, meta in manifest["modules"].items()}


def restore_paths(model: Restorer, lr_paths, out_dir, scfg: SamplerConfig, prompt_source="stub",
                  endpoint=None, ckpt_ids=None) -> list[Path]:
    out_dir = Path(out_dir)
    written = []
    for lr_path in lr_paths:
        pair = acquire_prompts(lr_path, prompt_source, endpoint)
        sr = sample(read_png(lr_path), make_bundle(model, pair), model, scfg)
        out = out_dir / Path(lr_path).name
        write_png(out, sr)
        sidecar = {
            "prompts": {"high_text": pair.high_text, "low_text": pair.low_text,
                        "negative": negative_prompt() if scfg.use_negative else None,
                        "provenance": pair.provenance},
            "seed": scfg.seed, "guidance": scfg.guidance, "steps": scfg.steps,
            "use_negative": scfg.use_negative,
            "init": "lr" if scfg.init_from_lr else "noise",
            "checkpoint": ckpt_ids or {},
        }
        out.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
        written.append(out)
    return written


def evaluate_dirs(sr_dir, hr_dir, out_dir=None) -> MetricReport:
    sr_dir, hr_dir = Path(sr_dir), Path(hr_dir)
    hr_files = sorted(hr_dir.glob("*.png"))
    report = MetricReport()
    for hr_path in hr_files:
        sr_path = sr_dir / hr_path.name
        if not sr_path.exists():
            raise PairMismatch(f"missing SR image for {hr_path.name}")
        report.add(hr_path.stem, read_png(sr_path), read_png(hr_path))
    extra = sorted({p.name for p in sr_dir.glob("*.png")} - {p.name for p in hr_files})
    if extra:
        raise PairMismatch(f"missing HR image for {extra[0]}")
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def write_report(report: MetricReport, out_dir, name: str = "metrics") -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / f"{name}.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "psnr_y", "ssim_y"])
        for r in report.rows:
            w.writerow([r["image"], repr(r["psnr_y"]), repr(r["ssim_y"])])
    (out_dir / f"{name}.json").write_text(json.dumps(report.aggregate(), indent=2))


def _ablate(key: str, values, data_dir, base_ckpt, cfg: RunConfig, out_dir, scfg: SamplerConfig) -> list[dict]:
    data_dir, out_dir = Path(data_dir), Path(out_dir)
    pairs = load_dataset(data_dir)
    lr_paths = sorted((data_dir / "lr").glob("*.png"))
    rows = []
    for value in values:
        vcfg = cfg.replace(**{key: value})
        vdir = out_dir / value
        model, _, _ = train_control(pairs, base_ckpt, vcfg, vdir, lr_paths=lr_paths)
        model.eval()
        sr_paths = restore_paths(model, lr_paths, vdir / "sr", scfg)
        for sr_path, pair in zip(sr_paths, pairs):
            rep = MetricReport()
            row = rep.add(sr_path.stem, read_png(sr_path), pair.hr)
            rows.append({"image": sr_path.stem, key: value, "psnr_y": row["psnr_y"], "ssim_y": row["ssim_y"],
                         "sr_path": str(sr_path.relative_to(out_dir))})
    rows.sort(key=lambda r: r["image"])
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "report.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["image", key, "psnr_y", "ssim_y", "sr_path"])
        w.writeheader()
        w.writerows(rows)
    summary = {v: {"psnr_y": float(np.mean([r["psnr_y"] for r in rows if r[key] == v])),
                   "ssim_y": float(np.mean([r["ssim_y"] for r in rows if r[key] == v]))} for v in values}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return rows


def ablate_fusion(data_dir, base_ckpt, cfg: RunConfig, out_dir, scfg: SamplerConfig) -> list[dict]:
    """Train and evaluate one control branch per fusion wiring (high, low, serial, parallel)."""
    return _ablate("fusion_mode", FUSION_MODES, data_dir, base_ckpt, cfg, out_dir, scfg)


def ablate_dfc(data_dir, base_ckpt, cfg: RunConfig, out_dir, scfg: SamplerConfig) -> list[dict]:
    """Train and evaluate with the DFC disabled, pixel-only, latent-only and both."""
    return _ablate("dfc_mode", DFC_MODES, data_dir, base_ckpt, cfg, out_dir, scfg)
