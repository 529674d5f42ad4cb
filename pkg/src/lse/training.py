"""Dual-context diffusion training.

Every batch mixes items whose target is the clean speech (instruction A)
with items whose target is the scaled background noise (instruction B),
drawn 3:1 by default. The VAE is frozen throughout; its parameter hash is
recorded at the start of training and asserted at the end. Latents are
scaled so the target distribution has roughly unit variance; the scale is
measured once at startup and stored in every checkpoint.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import (
    arrays_to_state_dict,
    load_checkpoint,
    save_checkpoint,
    state_dict_to_arrays,
)
from .data import Manifest, TargetKind, TrainingPair, derive_seed, sample_training_item
from .denoiser import Denoiser, DenoiserConfig, denoiser_from_meta, denoiser_meta
from .diffusion import (
    DiffusionSchedule,
    LossWeights,
    diffusion_loss,
    forward_sample,
    make_schedule,
    schedule_from_dict,
    serialize_schedule,
)
from .errors import ConfigError, InputError, NumericError
from .frontend import FrameConfig, MelConfig, load_wav, mel_spectrogram
from .vae import MelVAE, param_fingerprint


@dataclass
class TrainConfig:
    total_steps: int = 2000
    batch_size: int = 8
    lr: float = 2e-4
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    ema_decay: float = 0.999
    speech_fraction: float = 0.75
    segment_s: float = 1.91  # latent frame count must divide the U-Net stride
    checkpoint_interval: int = 1000
    eval_interval: int = 250
    log_interval: int = 10
    seed: int = 0
    out_dir: str = "runs/cldm"
    stop_loss: float | None = None  # early stop when smoothed train loss drops below
    unsquared_loss: bool = False  # ablation: per-element RMS instead of MSE

    def __post_init__(self):
        if self.total_steps < 1 or self.batch_size < 1:
            raise ConfigError("total_steps and batch_size must be >= 1")
        if not 0.0 < self.speech_fraction < 1.0:
            raise ConfigError("speech_fraction must be in (0, 1)")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must be in [0, 1)")
        if self.segment_s <= 0:
            raise ConfigError("segment_s must be positive")


class EMA:
    """Exponential moving average of a module's parameters."""

    def __init__(self, module: torch.nn.Module, decay: float):
        self.decay = decay
        self.shadow = {
            k: v.detach().clone() for k, v in module.state_dict().items()
            if v.dtype.is_floating_point
        }

    @torch.no_grad()
    def update(self, module: torch.nn.Module):
        d = self.decay
        for k, v in module.state_dict().items():
            if k in self.shadow:
                self.shadow[k].mul_(d).add_(v.detach(), alpha=1.0 - d)

    def copy_to(self, module: torch.nn.Module):
        sd = module.state_dict()
        for k, v in self.shadow.items():
            sd[k].copy_(v)

    def state_dict(self):
        return dict(self.shadow)

    def load_state_dict(self, sd):
        for k in self.shadow:
            self.shadow[k].copy_(sd[k])


@dataclass
class Batch:
    z0: torch.Tensor  # (B, C, L', F') scaled target latents
    z_cond: torch.Tensor  # (B, C, L', F') scaled noisy latents
    instruction_idx: torch.Tensor  # (B,)
    t: torch.Tensor  # (B,) 1-based timesteps
    eps: torch.Tensor  # (B, C, L', F')
    z_t: torch.Tensor  # forward-corrupted z0


class _ItemStore:
    """Per-pair mel features with lazily cached latents.

    When an item's mel is exactly segment_frames long its (conditioning,
    target) latents are encoded once and reused; longer items are cropped
    at a random offset each draw and encoded on the fly.
    """

    def __init__(self, manifest: Manifest, corpus_dir, frame: FrameConfig,
                 mel_base: MelConfig, segment_frames: int):
        self.segment_frames = segment_frames
        mel_cfg = manifest.mel_config(mel_base)
        self.mels: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for p in manifest.pairs:
            noisy = mel_spectrogram(load_wav(Path(corpus_dir) / p.noisy_path), frame, mel_cfg)
            target = mel_spectrogram(load_wav(Path(corpus_dir) / p.target_path), frame, mel_cfg)
            self.mels[p.id] = (
                noisy.values.astype(np.float32),
                target.values.astype(np.float32),
            )
        self._latent_cache: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}

    def segments(self, pair: TrainingPair, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        noisy, target = self.mels[pair.id]
        L = noisy.shape[0]
        seg = self.segment_frames
        if L < seg:
            raise InputError(
                f"item {pair.id} has {L} mel frames, shorter than the "
                f"{seg}-frame training segment"
            )
        if L == seg:
            return noisy, target
        off = int(rng.integers(0, L - seg + 1))
        return noisy[off : off + seg], target[off : off + seg]

    def cached_latents(self, pair: TrainingPair, vae: MelVAE):
        if pair.id not in self._latent_cache:
            noisy, target = self.mels[pair.id]
            x = torch.from_numpy(np.stack([noisy, target]))[:, None]
            with torch.no_grad():
                mean, _ = vae.encode_dist(x)
            self._latent_cache[pair.id] = (mean[0], mean[1])
        return self._latent_cache[pair.id]


def _encode_mean_batch(vae: MelVAE, mels: np.ndarray) -> torch.Tensor:
    x = torch.from_numpy(mels)[:, None]
    with torch.no_grad():
        mean, _ = vae.encode_dist(x)
    return mean


def prepare_batch(store: _ItemStore, manifest: Manifest, vae: MelVAE,
                  schedule: DiffusionSchedule, latent_scale: float,
                  cfg: TrainConfig, rng: np.random.Generator,
                  torch_gen: torch.Generator) -> Batch:
    """Assemble one training batch: draw pairs, encode segment latents
    (posterior means), pick per-item timesteps, corrupt targets."""
    pairs = [sample_training_item(manifest, rng, cfg.speech_fraction)
             for _ in range(cfg.batch_size)]

    zy_list, z0_list = [], []
    to_encode, encode_slots = [], []
    for i, p in enumerate(pairs):
        L = store.mels[p.id][0].shape[0]
        if L == store.segment_frames:
            zy, z0 = store.cached_latents(p, vae)
            zy_list.append(zy)
            z0_list.append(z0)
        else:
            noisy_seg, target_seg = store.segments(p, rng)
            to_encode.append((noisy_seg, target_seg))
            encode_slots.append(i)
            zy_list.append(None)
            z0_list.append(None)
    if to_encode:
        flat = np.stack([m for pairseg in to_encode for m in pairseg])
        enc = _encode_mean_batch(vae, flat)
        for j, i in enumerate(encode_slots):
            zy_list[i] = enc[2 * j]
            z0_list[i] = enc[2 * j + 1]

    z_cond = torch.stack(zy_list) * latent_scale
    z0 = torch.stack(z0_list) * latent_scale
    instruction_idx = torch.tensor([p.instruction.index for p in pairs], dtype=torch.long)
    for p in pairs:  # the context label is the target kind, never a separate input
        assert p.instruction is p.target_kind.instruction

    t = torch.from_numpy(rng.integers(1, schedule.n_steps + 1, size=cfg.batch_size))
    eps = torch.randn(z0.shape, generator=torch_gen, dtype=z0.dtype)
    z_t = torch.stack([
        forward_sample(z0[i], int(t[i]), eps[i], schedule)
        for i in range(cfg.batch_size)
    ])
    return Batch(z0=z0, z_cond=z_cond, instruction_idx=instruction_idx,
                 t=t, eps=eps, z_t=z_t)


def batch_loss(model: Denoiser, batch: Batch, weights: LossWeights,
               squared: bool) -> torch.Tensor:
    eps_hat = model(batch.z_t, batch.z_cond, batch.instruction_idx, batch.t)
    per_item = [
        diffusion_loss(batch.eps[i], eps_hat[i], int(batch.t[i]), weights, squared=squared)
        for i in range(batch.eps.shape[0])
    ]
    return torch.stack(per_item).mean()


@dataclass
class TrainState:
    model: Denoiser
    ema: EMA
    opt: torch.optim.Optimizer
    step: int
    rng: np.random.Generator
    torch_gen: torch.Generator


def train_step(state: TrainState, batch: Batch, cfg: TrainConfig,
               weights: LossWeights = LossWeights()) -> dict:
    """One optimization step; returns scalars for logging."""
    lr = cfg.lr * max(0.0, 1.0 - state.step / cfg.total_steps)
    for g in state.opt.param_groups:
        g["lr"] = lr
    loss = batch_loss(state.model, batch, weights, squared=not cfg.unsquared_loss)
    val = float(loss.detach())
    if not math.isfinite(val):
        raise NumericError(f"training loss became non-finite at step {state.step + 1}")
    state.opt.zero_grad(set_to_none=True)
    loss.backward()
    grad_norm = float(torch.nn.utils.clip_grad_norm_(state.model.parameters(), cfg.grad_clip))
    state.opt.step()
    state.ema.update(state.model)
    state.step += 1
    return {"loss": val, "lr": lr, "grad_norm": grad_norm}


# ---------------------------------------------------------------------------
# checkpointing


def measure_latent_scale(store: _ItemStore, manifest: Manifest, vae: MelVAE,
                         max_items: int = 32) -> float:
    """1 / std of target latents over a fixed sample of training items."""
    vals = []
    rng = np.random.default_rng(0)
    for p in manifest.pairs[:max_items]:
        _, target_seg = store.segments(p, rng)
        z = _encode_mean_batch(vae, target_seg[None])
        vals.append(z.numpy().ravel())
    std = float(np.concatenate(vals).std())
    if std < 1e-8:
        raise NumericError("target latents have near-zero variance")
    return 1.0 / std


def save_cldm(path, model: Denoiser, ema: EMA, opt, step: int,
              schedule: DiffusionSchedule, latent_scale: float,
              vae_fingerprint: str, frame: FrameConfig, mel_cfg: MelConfig,
              sample_rate: int, config_fingerprint: str = "",
              dev_loss: float | None = None) -> None:
    arrays = {}
    for k, v in state_dict_to_arrays(model.state_dict()).items():
        arrays[f"model.{k}"] = v
    for k, v in ema.state_dict().items():
        arrays[f"ema.{k}"] = v.detach().cpu().numpy()
    opt_state = opt.state_dict()
    for pi, pstate in opt_state["state"].items():
        for name, v in pstate.items():
            if isinstance(v, torch.Tensor):
                arrays[f"opt.{pi}.{name}"] = v.detach().cpu().numpy()
            else:
                arrays[f"opt.{pi}.{name}"] = np.asarray(v)
    meta = {
        "denoiser_config": denoiser_meta(model.cfg),
        "schedule": serialize_schedule(schedule),
        "latent_scale": latent_scale,
        "vae_param_fingerprint": vae_fingerprint,
        "frame_config": asdict(frame),
        "mel_config": asdict(mel_cfg),
        "sample_rate": sample_rate,
        "step": step,
        "dev_loss": dev_loss,
        "ema_decay": ema.decay,
        "config_fingerprint": config_fingerprint,
        "opt_param_groups": opt_state["param_groups"],
    }
    save_checkpoint(path, "cldm", meta, arrays)


def load_cldm(path, expected_fingerprint: str | None = None, force: bool = False):
    """Returns (meta, model, ema_state_dict, opt_arrays)."""
    meta, arrays = load_checkpoint(path, expected_kind="cldm",
                                   expected_fingerprint=expected_fingerprint, force=force)
    cfg = denoiser_from_meta(meta["denoiser_config"])
    model = Denoiser(cfg)
    model_sd = {k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")}
    model.load_state_dict(arrays_to_state_dict(model_sd))
    model.eval()
    ema_sd = arrays_to_state_dict(
        {k[len("ema."):]: v for k, v in arrays.items() if k.startswith("ema.")})
    opt_arrays = {k[len("opt."):]: v for k, v in arrays.items() if k.startswith("opt.")}
    return meta, model, ema_sd, opt_arrays


# ---------------------------------------------------------------------------
# the loop


def run_training(train_manifest: Manifest, dev_manifest: Manifest, corpus_dir,
                 vae: MelVAE, cfg: TrainConfig,
                 denoiser_cfg: DenoiserConfig = DenoiserConfig(),
                 schedule: DiffusionSchedule | None = None,
                 frame: FrameConfig = FrameConfig(), mel_base: MelConfig = MelConfig(),
                 weights: LossWeights = LossWeights(),
                 config_fingerprint: str = "") -> Path:
    """Full training run; returns the path of the best checkpoint.

    Writes cldm_step{N}.ckpt files, a best.ckpt pointer (JSON, selected on
    dev loss), and train_log.jsonl under cfg.out_dir.
    """
    if schedule is None:
        schedule = make_schedule()
    if not train_manifest.pairs:
        raise InputError("train manifest is empty")
    if not dev_manifest.pairs:
        raise InputError("dev manifest is empty")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    segment_frames = 1 + int(cfg.segment_s * train_manifest.sample_rate) // frame.hop_size
    r = vae.cfg.compression
    lat_frames = (segment_frames + r - 1) // r
    div = denoiser_cfg.spatial_divisor
    if lat_frames % div:
        raise ConfigError(
            f"segment_s {cfg.segment_s} gives {lat_frames} latent frames, not "
            f"divisible by the denoiser stride {div}; adjust segment_s"
        )

    torch.manual_seed(cfg.seed)
    vae.eval()
    vae_fp_start = param_fingerprint(vae)
    mel_cfg = train_manifest.mel_config(mel_base)

    store = _ItemStore(train_manifest, corpus_dir, frame, mel_base, segment_frames)
    dev_store = _ItemStore(dev_manifest, corpus_dir, frame, mel_base, segment_frames)
    latent_scale = measure_latent_scale(store, train_manifest, vae)

    model = Denoiser(denoiser_cfg)
    model.train()
    ema = EMA(model, cfg.ema_decay)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    state = TrainState(model=model, ema=ema, opt=opt, step=0,
                       rng=np.random.default_rng(cfg.seed),
                       torch_gen=torch.Generator().manual_seed(cfg.seed))

    # fixed dev batches per context so dev losses are comparable across evals
    def dev_batches(kind: TargetKind):
        sub = [p for p in dev_manifest.pairs if p.target_kind is kind]
        if not sub:
            return None
        rng = np.random.default_rng(derive_seed(cfg.seed, "dev", kind.value))
        gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "devg", kind.value))
        sub_man = Manifest(split=dev_manifest.split, pairs=sub,
                           corpus_seed=dev_manifest.corpus_seed,
                           mel_log_mean=dev_manifest.mel_log_mean,
                           mel_log_std=dev_manifest.mel_log_std,
                           sample_rate=dev_manifest.sample_rate)
        zs, zcs, ts, epss = [], [], [], []
        for p in sub:
            noisy_seg, target_seg = dev_store.segments(p, rng)
            enc = _encode_mean_batch(vae, np.stack([noisy_seg, target_seg]))
            zcs.append(enc[0] * latent_scale)
            zs.append(enc[1] * latent_scale)
            ts.append(int(rng.integers(1, schedule.n_steps + 1)))
            epss.append(torch.randn(enc[1].shape, generator=gen))
        z0 = torch.stack(zs)
        z_t = torch.stack([forward_sample(z0[i], ts[i], epss[i], schedule)
                           for i in range(len(sub))])
        return Batch(z0=z0, z_cond=torch.stack(zcs),
                     instruction_idx=torch.tensor([p.instruction.index for p in sub]),
                     t=torch.tensor(ts), eps=torch.stack(epss), z_t=z_t)

    dev_speech = dev_batches(TargetKind.SPEECH)
    dev_noise = dev_batches(TargetKind.NOISE)

    def eval_dev() -> dict[str, float]:
        model.eval()
        out_losses = {}
        with torch.no_grad():
            for name, b in (("speech", dev_speech), ("noise", dev_noise)):
                if b is not None:
                    out_losses[name] = float(
                        batch_loss(model, b, weights, squared=not cfg.unsquared_loss))
        model.train()
        return out_losses

    log_path = out / "train_log.jsonl"
    best = (float("inf"), None)
    t0 = time.time()
    smoothed = None

    def write_ckpt(name: str, dev_loss: float | None):
        save_cldm(out / name, model, ema, opt, state.step, schedule, latent_scale,
                  vae_fp_start, frame, mel_cfg, train_manifest.sample_rate,
                  config_fingerprint, dev_loss)

    with open(log_path, "w") as log:
        for _ in range(cfg.total_steps):
            batch = prepare_batch(store, train_manifest, vae, schedule,
                                  latent_scale, cfg, state.rng, state.torch_gen)
            scalars = train_step(state, batch, cfg, weights)
            smoothed = scalars["loss"] if smoothed is None else \
                0.98 * smoothed + 0.02 * scalars["loss"]

            if state.step % cfg.log_interval == 0 or state.step == 1:
                log.write(json.dumps({
                    "step": state.step, "loss": scalars["loss"], "context": "mixed",
                    "lr": scalars["lr"], "grad_norm": scalars["grad_norm"],
                    "wall_time": round(time.time() - t0, 3),
                }, sort_keys=True) + "\n")
                log.flush()

            if state.step % cfg.eval_interval == 0 or state.step == cfg.total_steps:
                dl = eval_dev()
                for ctx, v in dl.items():
                    log.write(json.dumps({
                        "step": state.step, "loss": v, "context": ctx,
                        "lr": scalars["lr"], "grad_norm": scalars["grad_norm"],
                        "wall_time": round(time.time() - t0, 3), "phase": "dev",
                    }, sort_keys=True) + "\n")
                log.flush()
                mean_dev = sum(dl.values()) / max(len(dl), 1)
                if mean_dev < best[0]:
                    name = f"cldm_step{state.step}.ckpt"
                    write_ckpt(name, mean_dev)
                    best = (mean_dev, name)
                    (out / "best.ckpt").write_text(json.dumps(
                        {"best": name, "dev_loss": mean_dev, "step": state.step},
                        sort_keys=True) + "\n")
            # periodic checkpoints fire regardless of dev-eval cadence; the
            # exists() guard keeps a dev-best write at the same step intact
            if state.step % cfg.checkpoint_interval == 0 \
                    and not (out / f"cldm_step{state.step}.ckpt").exists():
                write_ckpt(f"cldm_step{state.step}.ckpt", None)

            if cfg.stop_loss is not None and smoothed is not None \
                    and smoothed < cfg.stop_loss and state.step >= cfg.eval_interval:
                break

    if param_fingerprint(vae) != vae_fp_start:
        raise NumericError("VAE parameters changed during diffusion training")

    if best[1] is None:
        name = f"cldm_step{state.step}.ckpt"
        dl = eval_dev()
        mean_dev = sum(dl.values()) / max(len(dl), 1)
        write_ckpt(name, mean_dev)
        (out / "best.ckpt").write_text(json.dumps(
            {"best": name, "dev_loss": mean_dev, "step": state.step},
            sort_keys=True) + "\n")
        best = (mean_dev, name)

    # final-step checkpoint always exists for resume/inspection
    final_name = f"cldm_step{state.step}.ckpt"
    if not (out / final_name).exists():
        write_ckpt(final_name, best[0] if best[1] == final_name else None)
    return out / best[1]


def resolve_best(run_dir) -> Path:
    """Follow the best.ckpt pointer file inside a run directory."""
    run_dir = Path(run_dir)
    ptr = run_dir / "best.ckpt"
    if not ptr.exists():
        raise InputError(f"no best.ckpt pointer in {run_dir}")
    name = json.loads(ptr.read_text())["best"]
    return run_dir / name
