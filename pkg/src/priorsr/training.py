"""Staged training with a hard freeze protocol and digest-verified checkpoints.

Stages:
  * ``autoencoder`` - reconstruction pretraining of the latent autoencoder
  * ``base``        - text encoder + denoiser on (HR latent, high prompt)
  * ``control``     - control branch + Conditional Attention, everything else frozen
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .core import RunConfig, to_model_range
from .degrade import ImagePair
from .diffusion import NoiseSchedule, lr_to_model_input, q_sample
from .losses import LossLog, LossReport, dfc_flags, dfc_loss, diffusion_loss, total_loss
from .networks import BASE_MODULES, CONTROL_MODULES, Restorer, image_to_tensor
from .prompts import PromptPair, read_cache, stub_describe

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
RUN_DIR_ENV = "PRIORSR_RUN_DIR"


class EmptyDataset(ValueError):
    pass


class FrozenViolation(RuntimeError):
    pass


class DigestMismatch(RuntimeError):
    pass


class CheckpointShapeMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# checkpoints


def tensor_digest(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


def module_digests(module: torch.nn.Module) -> dict[str, str]:
    return {k: tensor_digest(v) for k, v in module.state_dict().items()}


def _blob(state: dict[str, torch.Tensor]):
    entries, chunks, offset = [], [], 0
    for name in sorted(state):
        arr = state[name].detach().cpu().contiguous().numpy()
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return entries, b"".join(chunks)


def save_checkpoint(path, modules: dict, cfg: RunConfig, stage: str, step: int,
                    frozen=(), train_state: dict | None = None) -> dict:
    """Write ``{module}.bin`` blobs plus ``manifest.json`` atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    version = f"{stage}-{step}"
    manifest = {"format": FORMAT_VERSION, "stage": stage, "step": step, "version": version,
                "frozen": sorted(frozen), "config": cfg.dumps(), "modules": {}}
    for name, module in modules.items():
        entries, data = _blob(module.state_dict())
        (tmp / f"{name}.bin").write_bytes(data)
        manifest["modules"][name] = {"version": version, "digest": hashlib.sha256(data).hexdigest(),
                                     "tensors": entries}
    if train_state is not None:
        torch.save(train_state, tmp / "train_state.pt")
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    return manifest


def read_manifest(path) -> dict:
    mpath = Path(path) / "manifest.json"
    if not mpath.exists():
        from .diffusion import MissingCheckpoint
        raise MissingCheckpoint(f"no checkpoint at {path}")
    return json.loads(mpath.read_text())


def load_state_dicts(path, names=None) -> tuple[dict, dict[str, dict[str, torch.Tensor]]]:
    """Read and digest-verify module blobs; returns (manifest, {module: state_dict})."""
    path = Path(path)
    manifest = read_manifest(path)
    out = {}
    for name, meta in manifest["modules"].items():
        if names is not None and name not in names:
            continue
        data = (path / f"{name}.bin").read_bytes()
        if hashlib.sha256(data).hexdigest() != meta["digest"]:
            raise DigestMismatch(f"{name}.bin in {path} does not match its recorded digest")
        state = {}
        for e in meta["tensors"]:
            arr = np.frombuffer(data, dtype=np.dtype(e["dtype"]).newbyteorder("<"),
                                count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
            state[e["name"]] = torch.from_numpy(arr.astype(e["dtype"]).reshape(e["shape"]).copy())
        out[name] = state
    return manifest, out


def apply_state(module: torch.nn.Module, name: str, state: dict) -> None:
    own = module.state_dict()
    if set(own) != set(state):
        raise CheckpointShapeMismatch(f"{name}: tensor names differ from the constructed model")
    for k, v in state.items():
        if tuple(own[k].shape) != tuple(v.shape):
            raise CheckpointShapeMismatch(f"{name}.{k}: checkpoint {tuple(v.shape)} vs model {tuple(own[k].shape)}")
    module.load_state_dict(state)


def load_checkpoint(path, model: Restorer, names=None) -> dict:
    manifest, states = load_state_dicts(path, names)
    mods = model.module_dict()
    for name, state in states.items():
        apply_state(mods[name], name, state)
    return manifest


def load_model(path, cfg: RunConfig | None = None, require_control: bool = True) -> Restorer:
    manifest = read_manifest(path)
    if cfg is None:
        cfg = RunConfig.loads(manifest["config"])
    missing = [m for m in (BASE_MODULES + (CONTROL_MODULES if require_control else ()))
               if m not in manifest["modules"]]
    if missing:
        from .diffusion import MissingCheckpoint
        raise MissingCheckpoint(f"checkpoint {path} lacks modules: {', '.join(missing)}")
    torch.manual_seed(cfg.seed)
    model = Restorer(cfg)
    load_checkpoint(path, model)
    model.eval()
    return model


def latest_checkpoint(run_dir, stage: str) -> Path | None:
    ckpts = sorted(Path(run_dir, "checkpoints").glob(f"{stage}-*"),
                   key=lambda p: int(p.name.rsplit("-", 1)[1]))
    return ckpts[-1] if ckpts else None


# ---------------------------------------------------------------------------
# data


@dataclass
class TrainData:
    hr: torch.Tensor               # (N, 3, H, W) MODEL range
    lr_up: torch.Tensor            # (N, 3, H, W) bicubic-upsampled LR, MODEL range
    high_texts: list
    low_texts: list
    latents: torch.Tensor | None = None
    emb: dict = field(default_factory=dict)

    def __len__(self):
        return self.hr.shape[0]


def prompts_for(pair: ImagePair, lr_path=None) -> PromptPair:
    cached = read_cache(lr_path) if lr_path is not None else None
    return cached or stub_describe(pair.record, pair.scene_tags)


def prepare_data(pairs: list[ImagePair], cfg: RunConfig, lr_paths=None) -> TrainData:
    if not pairs:
        raise EmptyDataset("no training pairs")
    prompts = [prompts_for(p, lr_paths[i] if lr_paths else None) for i, p in enumerate(pairs)]
    hr = torch.cat([image_to_tensor(to_model_range(p.hr)) for p in pairs])
    lr_up = torch.cat([lr_to_model_input(p.lr, cfg.sr_factor) for p in pairs])
    return TrainData(hr, lr_up, [p.high_text for p in prompts], [p.low_text for p in prompts])


@torch.no_grad()
def cache_latents(data: TrainData, model: Restorer) -> None:
    model.autoencoder.eval()
    data.latents = torch.cat([model.autoencoder.encode(data.hr[i:i + 1]) for i in range(len(data))])


@torch.no_grad()
def cache_embeddings(data: TrainData, model: Restorer) -> None:
    te = model.text_encoder.eval()
    data.emb = {"high": te.encode(data.high_texts), "low": te.encode(data.low_texts),
                "empty": te.encode([""])}


# ---------------------------------------------------------------------------
# trainers


def set_requires_grad(module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


class Trainer:
    """Owns one stage's optimizer and RNG; :meth:`step` runs one update."""

    stage = ""

    def __init__(self, model: Restorer, data: TrainData, cfg: RunConfig, lr: float, batch: int):
        self.model, self.data, self.cfg = model, data, cfg
        self.batch = batch
        self.schedule = NoiseSchedule(cfg.num_timesteps)
        self.gen = torch.Generator().manual_seed(cfg.seed + _stage_offset(self.stage))
        self.step_count = 0
        self.params = [p for m in self.trainable() for p in m.parameters()]
        self.opt = torch.optim.AdamW(self.params, lr=lr, betas=(0.9, 0.999), eps=1e-8,
                                     weight_decay=cfg.weight_decay)

    def trainable(self) -> list[torch.nn.Module]:
        raise NotImplementedError

    def frozen(self) -> list[torch.nn.Module]:
        return []

    def prepare(self):
        mods = self.model.module_dict()
        for m in mods.values():
            set_requires_grad(m, False)
        for m in self.trainable():
            set_requires_grad(m, True)
            m.train()
        for m in self.frozen():
            m.eval()

    def compute(self) -> tuple[torch.Tensor, LossReport]:
        raise NotImplementedError

    def check_frozen(self) -> None:
        for m in self.frozen():
            for name, p in m.named_parameters():
                if p.grad is not None:
                    raise FrozenViolation(f"gradient written to frozen tensor {name}")

    def step(self) -> LossReport:
        self.prepare()
        self.opt.zero_grad(set_to_none=True)
        loss, report = self.compute()
        loss.backward()
        self.check_frozen()
        self.opt.step()
        self.step_count += 1
        return report

    def sample_indices(self):
        g = self.gen
        idx = torch.randint(len(self.data), (self.batch,), generator=g)
        return idx

    def state_dict(self) -> dict:
        return {"stage": self.stage, "step": self.step_count, "optimizer": self.opt.state_dict(),
                "rng": self.gen.get_state()}

    def load_state_dict(self, state: dict) -> None:
        if state["stage"] != self.stage:
            raise ValueError(f"train state is for stage {state['stage']}, not {self.stage}")
        self.step_count = int(state["step"])
        self.opt.load_state_dict(state["optimizer"])
        self.gen.set_state(state["rng"])


def _stage_offset(stage: str) -> int:
    return {"autoencoder": 11, "base": 23, "control": 37}.get(stage, 0)


class AutoencoderTrainer(Trainer):
    stage = "autoencoder"

    def __init__(self, model, data, cfg):
        super().__init__(model, data, cfg, cfg.ae_lr, min(cfg.batch, 8))

    def trainable(self):
        return [self.model.autoencoder]

    def compute(self):
        idx = self.sample_indices()
        x = self.data.hr[idx]
        # random flips keep the decoder from memorising absolute positions
        flip = torch.rand(2, generator=self.gen)
        if flip[0] < 0.5:
            x = x.flip(-1)
        if flip[1] < 0.5:
            x = x.flip(-2)
        ae = self.model.autoencoder
        recon = ae.decoder(ae.encoder(x))
        loss = F.l1_loss(recon, x) + F.mse_loss(recon, x)
        v = loss.item()
        return loss, LossReport(v, 0.0, 0.0, 0.0, v)


class BaseTrainer(Trainer):
    stage = "base"

    def __init__(self, model, data, cfg):
        super().__init__(model, data, cfg, cfg.base_lr, cfg.batch)
        if data.latents is None:
            cache_latents(data, model)

    def trainable(self):
        return [self.model.text_encoder, self.model.unet]

    def frozen(self):
        return [self.model.autoencoder]

    def compute(self):
        g = self.gen
        idx = self.sample_indices()
        z0 = self.data.latents[idx]
        t = torch.randint(1, self.cfg.num_timesteps + 1, (self.batch,), generator=g)
        eps = torch.randn(z0.shape, generator=g)
        drop = torch.rand(self.batch, generator=g) < self.cfg.prompt_dropout
        texts = ["" if d else self.data.high_texts[i] for d, i in zip(drop.tolist(), idx.tolist())]
        c_h = self.model.text_encoder.encode(texts)
        z_t = q_sample(z0, t, eps, self.schedule)
        l_d = diffusion_loss(eps, self.model.unet(z_t, t, c_h))
        v = l_d.item()
        return l_d, LossReport(v, 0.0, 0.0, 0.0, v)


class ControlTrainer(Trainer):
    stage = "control"

    def __init__(self, model, data, cfg):
        super().__init__(model, data, cfg, cfg.lr, cfg.batch)
        if data.latents is None:
            cache_latents(data, model)
        cache_embeddings(data, model)
        self.use_pixel, self.use_latent = dfc_flags(cfg.dfc_mode)

    def trainable(self):
        return [self.model.control, self.model.cond_attn]

    def frozen(self):
        return [self.model.autoencoder, self.model.text_encoder, self.model.unet]

    def frozen_digests(self) -> dict[str, str]:
        return {f"{name}.{k}": v for name in BASE_MODULES
                for k, v in module_digests(getattr(self.model, name)).items()}

    def batch_inputs(self):
        g = self.gen
        idx = self.sample_indices()
        z0 = self.data.latents[idx]
        t = torch.randint(1, self.cfg.num_timesteps + 1, (self.batch,), generator=g)
        eps = torch.randn(z0.shape, generator=g)
        drop = torch.rand(self.batch, generator=g) < self.cfg.prompt_dropout
        emb = self.data.emb
        c_h = torch.where(drop[:, None, None], emb["empty"].expand(self.batch, -1, -1), emb["high"][idx])
        return idx, z0, t, eps, c_h, emb["low"][idx]

    def compute(self):
        idx, z0, t, eps, c_h, c_l = self.batch_inputs()
        z_t = q_sample(z0, t, eps, self.schedule)
        ctrl = self.model.control_forward(self.data.lr_up[idx], z_t, t, c_h, c_l)
        pred = self.model.unet_forward(z_t, t, c_h, ctrl)
        l_d = diffusion_loss(eps, pred)
        l_dfc, px, lat = dfc_loss(ctrl.pixel_heads, self.data.hr[idx], ctrl.latent_heads, z0,
                                  self.use_pixel, self.use_latent)
        loss = total_loss(l_d, l_dfc, self.cfg.lambda_dfc)
        return loss, LossReport(l_d.item(), l_dfc.item(), px.item(), lat.item(), loss.item())


# ---------------------------------------------------------------------------
# drivers


def run_dir_from_env(default) -> Path:
    return Path(os.environ.get(RUN_DIR_ENV) or default)


def _loop(trainer: Trainer, n_steps: int, log_path: Path, ckpt_fn=None) -> list[LossReport]:
    loss_log = LossLog(log_path)
    reports = []
    cfg = trainer.cfg
    while trainer.step_count < n_steps:
        rep = trainer.step()
        reports.append(rep)
        if cfg.log_every and trainer.step_count % cfg.log_every == 0:
            loss_log.append(trainer.step_count, rep)
        if ckpt_fn is not None and cfg.ckpt_every and trainer.step_count % cfg.ckpt_every == 0 \
                and trainer.step_count < n_steps:
            ckpt_fn(trainer)
        if trainer.step_count % 100 == 0:
            log.info("%s step %d total %.5f", trainer.stage, trainer.step_count, rep.total)
    # leave no stale gradients behind for a later stage that freezes these tensors
    trainer.opt.zero_grad(set_to_none=True)
    return reports


@torch.no_grad()
def fit_latent_scale(model: Restorer, data: TrainData) -> float:
    ae = model.autoencoder.eval()
    ae.latent_scale.fill_(1.0)
    z = torch.cat([ae.encode(data.hr[i:i + 1]) for i in range(len(data))])
    scale = float(1.0 / z.std())
    ae.latent_scale.fill_(scale)
    return scale


def train_autoencoder(model: Restorer, data: TrainData, cfg: RunConfig, run_dir) -> list[LossReport]:
    run_dir = Path(run_dir)
    trainer = AutoencoderTrainer(model, data, cfg)
    reports = _loop(trainer, cfg.ae_steps, run_dir / "loss_autoencoder.csv")
    fit_latent_scale(model, data)
    save_checkpoint(run_dir / "checkpoints" / f"autoencoder-{cfg.ae_steps}", {"autoencoder": model.autoencoder},
                    cfg, "autoencoder", cfg.ae_steps)
    return reports


def _base_ckpt_fn(run_dir, cfg):
    def save(trainer):
        mods = {k: getattr(trainer.model, k) for k in BASE_MODULES}
        save_checkpoint(Path(run_dir) / "checkpoints" / f"base-{trainer.step_count}", mods, cfg, "base",
                        trainer.step_count, train_state=trainer.state_dict())
    return save


def train_base(pairs: list[ImagePair], cfg: RunConfig, run_dir, lr_paths=None,
               resume_from=None) -> tuple[Restorer, dict]:
    """Stage 0: autoencoder pretraining then base diffusion on (HR latent, c_h)."""
    run_dir = Path(run_dir)
    data = prepare_data(pairs, cfg, lr_paths)
    cfg.save(run_dir / "config.cfg")
    torch.manual_seed(cfg.seed)
    model = Restorer(cfg)
    reports = {}
    if resume_from is None:
        reports["autoencoder"] = train_autoencoder(model, data, cfg, run_dir)
        trainer = BaseTrainer(model, data, cfg)
    else:
        load_checkpoint(resume_from, model, BASE_MODULES)
        trainer = BaseTrainer(model, data, cfg)
        trainer.load_state_dict(torch.load(Path(resume_from) / "train_state.pt", weights_only=False))
        LossLog(run_dir / "loss_base.csv").truncate_after(trainer.step_count)
    save = _base_ckpt_fn(run_dir, cfg)
    reports["base"] = _loop(trainer, cfg.base_steps, run_dir / "loss_base.csv", save)
    save(trainer)
    return model, reports


def load_base_into(model: Restorer, base_ckpt) -> None:
    load_checkpoint(base_ckpt, model, BASE_MODULES)
    model.control.init_from_unet(model.unet)


def train_control(pairs: list[ImagePair], base_ckpt, cfg: RunConfig, run_dir, lr_paths=None,
                  resume_from=None, tag: str = "control") -> tuple[Restorer, list[LossReport], ControlTrainer]:
    """Stage 1: only the control branch and Conditional Attention are optimised."""
    run_dir = Path(run_dir)
    data = prepare_data(pairs, cfg, lr_paths)
    cfg.save(run_dir / "config.cfg")
    torch.manual_seed(cfg.seed + 1)
    model = Restorer(cfg)
    load_base_into(model, base_ckpt)
    trainer = ControlTrainer(model, data, cfg)
    if resume_from is not None:
        load_checkpoint(resume_from, model, CONTROL_MODULES)
        trainer.load_state_dict(torch.load(Path(resume_from) / "train_state.pt", weights_only=False))
        LossLog(run_dir / f"loss_{tag}.csv").truncate_after(trainer.step_count)
    before = trainer.frozen_digests()

    def save(tr):
        if tr.frozen_digests() != before:
            raise FrozenViolation("a frozen tensor changed during control training")
        save_checkpoint(run_dir / "checkpoints" / f"{tag}-{tr.step_count}", model.module_dict(), cfg,
                        "control", tr.step_count, frozen=BASE_MODULES, train_state=tr.state_dict())

    reports = _loop(trainer, cfg.control_steps, run_dir / f"loss_{tag}.csv", save)
    save(trainer)
    return model, reports, trainer


def trailing_mean(values, n: int = 100) -> float:
    values = list(values)
    return float(np.mean(values[-n:]))
