"""Convolutional VAE over normalized log-mel spectrograms.

The encoder halves (frames, mels) twice for a 4x per-axis compression and
doubles the channel depth; the decoder mirrors it. A 100x64 mel becomes
an 8x25x16 latent. Inputs whose frame count is not a multiple of the
compression factor are padded by repeating the last frame, and decode
crops back.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import (
    arrays_to_state_dict,
    fingerprint_of,
    load_checkpoint,
    save_checkpoint,
    state_dict_to_arrays,
)
from .data import Manifest
from .errors import ConfigError, InputError, NumericError
from .frontend import FrameConfig, MelConfig, MelSpectrogram, Waveform, load_wav, mel_spectrogram


@dataclass(frozen=True)
class VAEConfig:
    latent_channels: int = 8
    compression: int = 4  # per-axis downsampling factor, a power of two
    block_channels: tuple = (32, 64, 128, 128)
    kl_weight: float = 1e-4
    norm_groups: int = 8

    def __post_init__(self):
        c = self.compression
        if c < 1 or (c & (c - 1)) != 0:
            raise ConfigError(f"compression must be a power of two, got {c}")
        if int(math.log2(c)) > len(self.block_channels):
            raise ConfigError("compression exceeds what the block stack can provide")
        if self.latent_channels <= 0:
            raise ConfigError("latent_channels must be positive")

    @property
    def n_strided(self) -> int:
        return int(math.log2(self.compression))

    @staticmethod
    def full_size() -> "VAEConfig":
        return VAEConfig(block_channels=(128, 256, 512, 512))


@dataclass
class LatentTensor:
    """A latent code (channels, frames', mels') plus bookkeeping for decode."""

    values: torch.Tensor
    orig_frames: int

    def __post_init__(self):
        if self.values.ndim != 3:
            raise InputError(f"latent must be 3-D (C, L', F'), got {tuple(self.values.shape)}")

    @property
    def shape(self) -> tuple:
        return tuple(self.values.shape)


def latent_shape(cfg: VAEConfig, n_frames: int, n_mels: int) -> tuple[int, int, int]:
    r = cfg.compression
    if n_mels % r != 0:
        raise ConfigError(f"n_mels {n_mels} not divisible by compression {r}")
    return (cfg.latent_channels, (n_frames + r - 1) // r, n_mels // r)


class _Block(nn.Module):
    """GroupNorm -> SiLU -> Conv, twice, with a residual connection."""

    def __init__(self, cin, cout, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class MelVAE(nn.Module):
    def __init__(self, cfg: VAEConfig = VAEConfig()):
        super().__init__()
        self.cfg = cfg
        chs = cfg.block_channels
        g = cfg.norm_groups

        enc = [nn.Conv2d(1, chs[0], 3, padding=1)]
        prev = chs[0]
        for i, ch in enumerate(chs):
            enc.append(_Block(prev, ch, g))
            if i < cfg.n_strided:
                enc.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
            prev = ch
        enc += [nn.GroupNorm(g, prev), nn.SiLU(),
                nn.Conv2d(prev, 2 * cfg.latent_channels, 1)]
        self.encoder = nn.Sequential(*enc)

        dec = [nn.Conv2d(cfg.latent_channels, chs[-1], 3, padding=1)]
        prev = chs[-1]
        rev = list(reversed(chs))
        for i, ch in enumerate(rev):
            dec.append(_Block(prev, ch, g))
            if i >= len(rev) - cfg.n_strided:
                dec += [nn.Upsample(scale_factor=2, mode="nearest"),
                        nn.Conv2d(ch, ch, 3, padding=1)]
            prev = ch
        dec += [nn.GroupNorm(min(g, prev), prev), nn.SiLU(), nn.Conv2d(prev, 1, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)

        # frontend settings travel with the model once trained
        self.frame_config = FrameConfig()
        self.mel_config = MelConfig()
        self.sample_rate = 16000

    def attach_frontend(self, frame: FrameConfig, mel: MelConfig, sample_rate: int):
        self.frame_config = frame
        self.mel_config = mel
        self.sample_rate = sample_rate

    def encode_dist(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, 1, L, F) -> posterior (mean, logvar), each (B, C, L', F')."""
        h = self.encoder(x)
        mean, logvar = torch.chunk(h, 2, dim=1)
        return mean, torch.clamp(logvar, -30.0, 20.0)

    def decode_latent(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)


def _pad_frames(x: torch.Tensor, r: int) -> torch.Tensor:
    """Pad the frame axis of (B, 1, L, F) to a multiple of r by repeating
    the last frame."""
    L = x.shape[2]
    rem = (-L) % r
    if rem == 0:
        return x
    last = x[:, :, -1:, :].expand(-1, -1, rem, -1)
    return torch.cat([x, last], dim=2)


def encode(vae: MelVAE, mel: MelSpectrogram, mode: str = "mean",
           rng: torch.Generator | None = None) -> LatentTensor:
    """Encode a mel spectrogram to a latent.

    mode "mean" returns the posterior mean (deterministic); "sample" draws
    from the posterior using ``rng``.
    """
    if mode not in ("mean", "sample"):
        raise ConfigError(f"encode mode must be 'mean' or 'sample', got {mode!r}")
    v = torch.from_numpy(np.ascontiguousarray(mel.values)).float()[None, None]
    v = _pad_frames(v, vae.cfg.compression)
    with torch.no_grad():
        mean, logvar = vae.encode_dist(v)
        if mode == "mean":
            z = mean
        else:
            if rng is None:
                raise ConfigError("encode mode 'sample' requires an rng")
            noise = torch.randn(mean.shape, generator=rng, dtype=mean.dtype)
            z = mean + torch.exp(0.5 * logvar) * noise
    return LatentTensor(z[0], orig_frames=mel.n_frames)


def decode(vae: MelVAE, latent: LatentTensor) -> MelSpectrogram:
    """Decode a latent back to a mel spectrogram, cropping frame padding."""
    with torch.no_grad():
        out = vae.decode_latent(latent.values[None])
    vals = out[0, 0].double().numpy()
    if latent.orig_frames > vals.shape[0]:
        raise InputError(
            f"latent decodes to {vals.shape[0]} frames, fewer than original "
            f"{latent.orig_frames}"
        )
    vals = vals[: latent.orig_frames]
    return MelSpectrogram(vals, vae.frame_config, vae.mel_config, vae.sample_rate)


def vae_loss(x: torch.Tensor, recon: torch.Tensor, mean: torch.Tensor,
             logvar: torch.Tensor, kl_weight: float):
    """L1 reconstruction plus KL to the unit Gaussian (mean per element)."""
    rec = (recon - x).abs().mean()
    kl = 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).mean()
    total = rec + kl_weight * kl
    return total, {"recon_l1": float(rec.detach()), "kl": float(kl.detach()),
                   "total": float(total.detach())}


# ---------------------------------------------------------------------------
# training


@dataclass
class VAETrainConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-5
    grad_clip: float = 1.0
    segment_frames: int = 96
    checkpoint_interval: int = 1000
    eval_interval: int = 250
    seed: int = 0
    out_dir: str = "runs/vae"

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")
        if self.segment_frames < 8:
            raise ConfigError("segment_frames must be >= 8")


def _load_split_mels(manifest: Manifest, corpus_dir, frame: FrameConfig,
                     mel_base: MelConfig) -> list[np.ndarray]:
    """All mels the VAE trains on: every noisy mixture and every target."""
    mel_cfg = manifest.mel_config(mel_base)
    out = []
    seen = set()
    for p in manifest.pairs:
        for rel in (p.noisy_path, p.target_path):
            if rel in seen:
                continue
            seen.add(rel)
            w = load_wav(Path(corpus_dir) / rel)
            out.append(mel_spectrogram(w, frame, mel_cfg).values.astype(np.float32))
    return out


def _crop_segment(m: np.ndarray, frames: int, rng: np.random.Generator) -> np.ndarray:
    if m.shape[0] < frames:
        reps = -(-frames // m.shape[0])
        m = np.concatenate([m] * reps, axis=0)
    start = int(rng.integers(0, m.shape[0] - frames + 1))
    return m[start : start + frames]


def vae_checkpoint_meta(vae: MelVAE, step: int, dev_loss: float | None,
                        config_fingerprint: str = "") -> dict:
    return {
        "config": asdict(vae.cfg),
        "frame_config": asdict(vae.frame_config),
        "mel_config": asdict(vae.mel_config),
        "sample_rate": vae.sample_rate,
        "step": step,
        "dev_loss": dev_loss,
        "config_fingerprint": config_fingerprint,
        "param_fingerprint": "",
    }


def save_vae(path, vae: MelVAE, step: int, dev_loss: float | None,
             config_fingerprint: str = "") -> None:
    arrays = state_dict_to_arrays(vae.state_dict())
    meta = vae_checkpoint_meta(vae, step, dev_loss, config_fingerprint)
    meta["param_fingerprint"] = param_fingerprint(vae)
    save_checkpoint(path, "vae", meta, arrays)


def load_vae(path, expected_fingerprint: str | None = None, force: bool = False) -> MelVAE:
    meta, arrays = load_checkpoint(path, expected_kind="vae",
                                   expected_fingerprint=expected_fingerprint, force=force)
    cfg = VAEConfig(**{**meta["config"], "block_channels": tuple(meta["config"]["block_channels"])})
    vae = MelVAE(cfg)
    vae.load_state_dict(arrays_to_state_dict(arrays))
    vae.attach_frontend(FrameConfig(**meta["frame_config"]),
                        MelConfig(**meta["mel_config"]), meta["sample_rate"])
    vae.eval()
    return vae


def param_fingerprint(module: nn.Module) -> str:
    """Stable hash over all parameters, used to assert the VAE stays
    frozen throughout diffusion training."""
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.detach().cpu().numpy()).tobytes())
    return h.hexdigest()


def train_vae(train_manifest: Manifest, dev_manifest: Manifest, corpus_dir,
              cfg: VAETrainConfig, vae_cfg: VAEConfig = VAEConfig(),
              frame: FrameConfig = FrameConfig(), mel_base: MelConfig = MelConfig(),
              config_fingerprint: str = "", log_fn=None) -> tuple[MelVAE, Path]:
    """Train the codec on a corpus; returns (model, best checkpoint path).

    Dev L1 is evaluated periodically; the best checkpoint is tracked in a
    ``vae_best.json`` pointer. A NaN loss aborts with the last good
    checkpoint kept on disk.
    """
    if not train_manifest.pairs or not dev_manifest.pairs:
        raise InputError("train and dev manifests must be non-empty")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)

    mel_cfg = train_manifest.mel_config(mel_base)
    train_mels = _load_split_mels(train_manifest, corpus_dir, frame, mel_base)
    dev_mels = _load_split_mels(dev_manifest, corpus_dir, frame, mel_base)
    rng = np.random.default_rng(cfg.seed)

    vae = MelVAE(vae_cfg)
    vae.attach_frontend(frame, mel_cfg, train_manifest.sample_rate)
    vae.train()
    opt = torch.optim.AdamW(vae.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    dev_batch = np.stack([
        _crop_segment(m, cfg.segment_frames, np.random.default_rng(1234 + i))
        for i, m in enumerate(dev_mels)
    ])
    dev_x = torch.from_numpy(dev_batch).float()[:, None]

    def dev_loss_now() -> float:
        vae.eval()
        with torch.no_grad():
            mean, logvar = vae.encode_dist(dev_x)
            recon = vae.decode_latent(mean)
            _, parts = vae_loss(dev_x, recon, mean, logvar, vae_cfg.kl_weight)
        vae.train()
        return parts["recon_l1"]

    best = (float("inf"), None)
    last_good = None
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(train_mels), size=cfg.batch_size)
        batch = np.stack([_crop_segment(train_mels[i], cfg.segment_frames, rng) for i in idx])
        x = torch.from_numpy(batch).float()[:, None]
        mean, logvar = vae.encode_dist(x)
        noise = torch.randn_like(mean)
        z = mean + torch.exp(0.5 * logvar) * noise
        recon = vae.decode_latent(z)
        loss, parts = vae_loss(x, recon, mean, logvar, vae_cfg.kl_weight)
        if not math.isfinite(parts["total"]):
            raise NumericError(
                f"VAE loss became non-finite at step {step}; last good checkpoint: {last_good}"
            )
        opt.zero_grad(set_to_none=True)
        loss.backward()
        nn.utils.clip_grad_norm_(vae.parameters(), cfg.grad_clip)
        opt.step()

        if log_fn is not None and (step % 50 == 0 or step == 1):
            log_fn({"step": step, **parts})
        if step % cfg.eval_interval == 0 or step == cfg.steps:
            d = dev_loss_now()
            if d < best[0]:
                name = f"vae_step{step}.ckpt"
                save_vae(out / name, vae, step, d, config_fingerprint)
                best = (d, name)
                (out / "vae_best.json").write_text(
                    json.dumps({"best": name, "dev_recon_l1": d}, sort_keys=True) + "\n"
                )
                last_good = out / name
        # periodic checkpoints fire even when the step also ran a dev eval;
        # a dev-best file written at the same step is kept as-is
        if step % cfg.checkpoint_interval == 0 \
                and not (out / f"vae_step{step}.ckpt").exists():
            name = f"vae_step{step}.ckpt"
            save_vae(out / name, vae, step, None, config_fingerprint)
            last_good = out / name

    if best[1] is None:
        name = f"vae_step{cfg.steps}.ckpt"
        save_vae(out / name, vae, cfg.steps, dev_loss_now(), config_fingerprint)
        best = (0.0, name)
    # hand back the state that matches the best checkpoint on disk
    vae = load_vae(out / best[1])
    return vae, out / best[1]
