"""Inference: conditional latent diffusion enhancement and noise
estimation, plus real-time-factor measurement.

The noisy recording conditions every denoising step through the frozen
VAE's posterior mean. Sampling starts from a seeded standard normal
latent and walks a respaced reverse trajectory; the decoded mel is
rendered back to audio with the noisy signal's phase as the Griffin-Lim
starting point. Long inputs are processed in overlapping chunks that are
crossfaded back together.
"""

from __future__ import annotations

import json
import platform
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .data import Instruction, derive_seed
from .denoiser import Denoiser, predict_noise_padded
from .diffusion import DiffusionSchedule, respace, reverse_step, schedule_from_dict
from .errors import ConfigError, DomainError, InputError
from .frontend import (
    FrameConfig,
    MelConfig,
    MelSpectrogram,
    Waveform,
    mel_spectrogram,
    mel_to_waveform,
    stft,
)
from .training import load_cldm
from .vae import LatentTensor, MelVAE, decode, encode, load_vae, param_fingerprint


@dataclass(frozen=True)
class EnhanceConfig:
    reverse_steps: int = 50
    seed: int = 0
    use_ema: bool = True
    gl_iters: int = 16
    chunk_s: float = 10.0
    overlap_s: float = 0.5

    def __post_init__(self):
        if self.reverse_steps < 1:
            raise DomainError("reverse_steps must be >= 1")
        if self.chunk_s <= 2 * self.overlap_s:
            raise ConfigError("chunk_s must exceed twice overlap_s")
        if self.gl_iters < 0:
            raise ConfigError("gl_iters must be >= 0")


class Enhancer:
    """A loaded model pair (VAE + denoiser) ready for inference."""

    def __init__(self, model: Denoiser, ema_model: Denoiser | None, vae: MelVAE,
                 schedule: DiffusionSchedule, latent_scale: float,
                 frame: FrameConfig, mel_cfg: MelConfig, sample_rate: int,
                 meta: dict | None = None):
        self.model = model.eval()
        self.ema_model = ema_model.eval() if ema_model is not None else None
        self.vae = vae.eval()
        self.schedule = schedule
        self.latent_scale = latent_scale
        self.frame = frame
        self.mel_cfg = mel_cfg
        self.sample_rate = sample_rate
        self.meta = meta or {}

    @staticmethod
    def load(cldm_ckpt, vae_ckpt, expected_fingerprint: str | None = None,
             force: bool = False) -> "Enhancer":
        meta, model, ema_sd, _ = load_cldm(cldm_ckpt, expected_fingerprint, force)
        vae = load_vae(vae_ckpt)
        want = meta.get("vae_param_fingerprint", "")
        have = param_fingerprint(vae)
        if want and want != have and not force:
            raise ConfigError(
                "VAE checkpoint does not match the one this diffusion model was "
                f"trained against ({have[:12]} vs {want[:12]}); use force to override"
            )
        ema_model = None
        if ema_sd:
            ema_model = Denoiser(model.cfg)
            sd = ema_model.state_dict()
            for k, v in ema_sd.items():
                sd[k].copy_(v)
        frame = FrameConfig(**meta["frame_config"])
        mel_cfg = MelConfig(**meta["mel_config"])
        vae.attach_frontend(frame, mel_cfg, meta["sample_rate"])
        return Enhancer(model, ema_model, vae,
                        schedule_from_dict(meta["schedule"]),
                        float(meta["latent_scale"]), frame, mel_cfg,
                        int(meta["sample_rate"]), meta)

    def _net(self, cfg: EnhanceConfig) -> Denoiser:
        if cfg.use_ema and self.ema_model is not None:
            return self.ema_model
        return self.model

    def enhance(self, wave: Waveform, cfg: EnhanceConfig = EnhanceConfig()) -> Waveform:
        return self._run(wave, cfg, Instruction.INSTRUCT_A)

    def estimate_noise(self, wave: Waveform, cfg: EnhanceConfig = EnhanceConfig()) -> Waveform:
        return self._run(wave, cfg, Instruction.INSTRUCT_B)

    # -- internals ---------------------------------------------------------

    def _run(self, wave: Waveform, cfg: EnhanceConfig, instruction: Instruction) -> Waveform:
        if wave.sample_rate != self.sample_rate:
            raise InputError(
                f"input sample rate {wave.sample_rate} != model rate {self.sample_rate}"
            )
        if cfg.reverse_steps > self.schedule.n_steps:
            raise DomainError(
                f"reverse_steps {cfg.reverse_steps} exceeds schedule length "
                f"{self.schedule.n_steps}"
            )
        chunk_n = int(cfg.chunk_s * self.sample_rate)
        if wave.samples.size <= chunk_n:
            return self._process_chunk(wave, cfg, instruction, chunk_index=0)

        overlap = int(cfg.overlap_s * self.sample_rate)
        hop = chunk_n - overlap
        n = wave.samples.size
        out = np.zeros(n)
        weight = np.zeros(n)
        idx = 0
        start = 0
        while start < n:
            end = min(start + chunk_n, n)
            if end - start < 2 * self.frame.hop_size:  # tail too short: fold into previous
                break
            piece = Waveform(wave.samples[start:end], self.sample_rate)
            done = self._process_chunk(piece, cfg, instruction, chunk_index=idx)
            w = np.ones(end - start)
            if start > 0:
                w[:overlap] = np.linspace(0.0, 1.0, overlap)
            if end < n:
                w[-overlap:] = np.linspace(1.0, 0.0, overlap)
            out[start:end] += done.samples * w
            weight[start:end] += w
            if end == n:
                break
            start += hop
            idx += 1
        covered = weight > 0
        out[covered] /= weight[covered]
        return Waveform(out, self.sample_rate)

    def _process_chunk(self, chunk: Waveform, cfg: EnhanceConfig,
                       instruction: Instruction, chunk_index: int) -> Waveform:
        mel = mel_spectrogram(chunk, self.frame, self.mel_cfg)
        z_cond = encode(self.vae, mel, "mean").values * self.latent_scale
        z0 = self._sample_latent(z_cond, cfg, instruction,
                                 derive_seed(cfg.seed, "chunk", chunk_index))
        mel_hat = decode(self.vae, LatentTensor(z0 / self.latent_scale,
                                                orig_frames=mel.n_frames))
        phase0 = np.angle(stft(chunk, self.frame))
        return mel_to_waveform(mel_hat, n_samples=chunk.samples.size,
                               gl_iters=cfg.gl_iters, init_phase=phase0)

    def _sample_latent(self, z_cond: torch.Tensor, cfg: EnhanceConfig,
                       instruction: Instruction, seed: int) -> torch.Tensor:
        resp = respace(self.schedule, cfg.reverse_steps)
        net = self._net(cfg)
        gen = torch.Generator().manual_seed(seed)
        z = torch.randn(z_cond.shape, generator=gen, dtype=z_cond.dtype)
        for k in range(resp.n_steps, 0, -1):
            t_model = resp.model_timestep(k)
            eps_hat = predict_noise_padded(net, z, z_cond, instruction.index,
                                           t_model, self.schedule.n_steps)
            z = reverse_step(z, eps_hat, k, resp, gen)
        return z

    def enhance_to_mel(self, wave: Waveform, cfg: EnhanceConfig,
                       instruction: Instruction = Instruction.INSTRUCT_A) -> MelSpectrogram:
        """Single-chunk path that stops at the decoded mel (diagnostics)."""
        if wave.sample_rate != self.sample_rate:
            raise InputError("sample rate mismatch")
        mel = mel_spectrogram(wave, self.frame, self.mel_cfg)
        z_cond = encode(self.vae, mel, "mean").values * self.latent_scale
        z0 = self._sample_latent(z_cond, cfg, instruction,
                                 derive_seed(cfg.seed, "chunk", 0))
        return decode(self.vae, LatentTensor(z0 / self.latent_scale,
                                             orig_frames=mel.n_frames))


def enhance_sidecar(cfg: EnhanceConfig, instruction: Instruction,
                    enhancer: Enhancer, in_path, out_path,
                    config_fingerprint: str = "") -> dict:
    """Deterministic metadata written next to an output file."""
    return {
        "input": str(in_path),
        "output": str(out_path),
        "instruction": instruction.name.lower(),
        "instruction_text": instruction.text,
        "reverse_steps": cfg.reverse_steps,
        "seed": cfg.seed,
        "use_ema": cfg.use_ema,
        "gl_iters": cfg.gl_iters,
        "model_step": enhancer.meta.get("step"),
        "config_fingerprint": config_fingerprint or enhancer.meta.get("config_fingerprint", ""),
    }


# ---------------------------------------------------------------------------
# real-time factor


def measure_rtf(enhancer: Enhancer, wave: Waveform, steps_list: list[int],
                cfg: EnhanceConfig = EnhanceConfig(), repeats: int = 3) -> dict:
    """Wall-time per audio-second across reverse step counts.

    One warmup run is discarded; each row reports the median of
    ``repeats`` timed runs.
    """
    if repeats < 3:
        raise ConfigError("repeats must be >= 3 for a stable median")
    rows = []
    audio_s = wave.duration_s
    enhancer.enhance(wave, replace(cfg, reverse_steps=min(steps_list)))  # warmup
    for k in sorted(steps_list):
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            enhancer.enhance(wave, replace(cfg, reverse_steps=k))
            times.append(time.perf_counter() - t0)
        med = float(np.median(times))
        rows.append({
            "reverse_steps": k,
            "audio_s": round(audio_s, 6),
            "wall_s_median": round(med, 6),
            "rtf": round(med / audio_s, 6),
            "runs": repeats,
        })
    return {
        "kind": "rtf_report",
        "hardware": f"{platform.machine()} {platform.processor() or 'cpu'} single-thread",
        "torch_threads": torch.get_num_threads(),
        "rows": rows,
    }


def write_rtf_report(report: dict, path) -> None:
    path = Path(path)
    header = {k: v for k, v in report.items() if k != "rows"}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(r, sort_keys=True) for r in report["rows"]]
    path.write_text("\n".join(lines) + "\n")
