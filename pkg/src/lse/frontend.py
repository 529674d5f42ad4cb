"""Waveform <-> normalized log-mel conversion, and mel inversion.

All audio is 16 kHz mono. The STFT is centered (reflect padding), uses a
periodic Hann window, and produces exactly ``1 + len(x) // hop`` frames
regardless of window size. Mel filters are triangular on the
2595*log10(1 + f/700) scale, unnormalized, spanning 0 Hz to Nyquist.
Inversion goes mel power -> linear magnitude (non-negative least squares)
-> waveform (Griffin-Lim with a mel-consistency projection interleaved
into every iteration, optionally seeded with a known phase).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.io.wavfile

from .errors import InputError

DEFAULT_SAMPLE_RATE = 16000


# ---------------------------------------------------------------------------
# value types


@dataclass(frozen=True)
class Waveform:
    """Mono float waveform in [-1, 1] (not enforced; clipped on save)."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise InputError(f"waveform must be 1-D mono, got shape {s.shape}")
        if s.size == 0:
            raise InputError("waveform is empty")
        if not np.all(np.isfinite(s)):
            raise InputError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise InputError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", s)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate

    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.samples**2)))


@dataclass(frozen=True)
class FrameConfig:
    """STFT framing: window length and hop in samples. Window is periodic Hann."""

    window_size: int = 1024
    hop_size: int = 160

    def __post_init__(self):
        if self.window_size <= 0 or self.hop_size <= 0:
            raise InputError("window_size and hop_size must be positive")
        if self.hop_size > self.window_size:
            raise InputError("hop_size must not exceed window_size")

    @property
    def n_bins(self) -> int:
        return self.window_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        # centered framing: count depends only on hop, not window size
        return 1 + n_samples // self.hop_size


@dataclass(frozen=True)
class MelConfig:
    """Mel filterbank and log compression settings.

    ``norm_scale`` / ``norm_shift`` map raw log-power to the normalized
    range the models train on: value = norm_scale * (log_power + norm_shift).
    Defaults are identity; corpus builds fill in measured statistics.
    """

    n_mels: int = 64
    f_min: float = 0.0
    f_max: float | None = None  # None -> Nyquist
    log_floor: float = 1e-5
    norm_scale: float = 1.0
    norm_shift: float = 0.0

    def __post_init__(self):
        if self.n_mels <= 0:
            raise InputError("n_mels must be positive")
        if self.log_floor <= 0:
            raise InputError("log_floor must be positive")
        if self.norm_scale <= 0:
            raise InputError("norm_scale must be positive")


@dataclass
class MelSpectrogram:
    """Normalized log-mel features, shape (n_frames, n_mels)."""

    values: np.ndarray
    frame_config: FrameConfig = field(default_factory=FrameConfig)
    mel_config: MelConfig = field(default_factory=MelConfig)
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise InputError(f"mel values must be 2-D (frames, mels), got {v.shape}")
        if v.shape[1] != self.mel_config.n_mels:
            raise InputError(
                f"mel axis {v.shape[1]} != configured n_mels {self.mel_config.n_mels}"
            )
        if not np.all(np.isfinite(v)):
            raise InputError("mel values contain non-finite entries")
        self.values = v

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_mels(self) -> int:
        return self.values.shape[1]

    def log_power(self) -> np.ndarray:
        """Undo the affine normalization, returning natural-log mel power."""
        c = self.mel_config
        return self.values / c.norm_scale - c.norm_shift


# ---------------------------------------------------------------------------
# STFT


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window of length n."""
    k = np.arange(n)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)


def stft(wave: Waveform, cfg: FrameConfig = FrameConfig()) -> np.ndarray:
    """Complex STFT, shape (n_frames, window_size//2 + 1).

    The signal is reflect-padded by window_size//2 on both ends so frames
    are centered on multiples of the hop.
    """
    x = wave.samples
    win = hann_window(cfg.window_size)
    half = cfg.window_size // 2
    if x.size < 2:
        # reflect padding needs at least 2 samples; extend by edge value
        x = np.concatenate([x, x])
    padded = np.pad(x, (half, half), mode="reflect")
    n_frames = cfg.n_frames(wave.samples.size)
    idx = np.arange(cfg.window_size)[None, :] + cfg.hop_size * np.arange(n_frames)[:, None]
    frames = padded[idx] * win[None, :]
    return np.fft.rfft(frames, axis=1)


def istft(spec: np.ndarray, cfg: FrameConfig, n_samples: int) -> np.ndarray:
    """Inverse STFT by windowed overlap-add, trimmed to n_samples."""
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[1] != cfg.n_bins:
        raise InputError(f"spectrogram shape {spec.shape} does not match config")
    win = hann_window(cfg.window_size)
    frames = np.fft.irfft(spec, n=cfg.window_size, axis=1) * win[None, :]
    half = cfg.window_size // 2
    total = (spec.shape[0] - 1) * cfg.hop_size + cfg.window_size
    out = np.zeros(total)
    wsum = np.zeros(total)
    for i in range(spec.shape[0]):
        s = i * cfg.hop_size
        out[s : s + cfg.window_size] += frames[i]
        wsum[s : s + cfg.window_size] += win**2
    out = out / np.maximum(wsum, 1e-12)
    return out[half : half + n_samples]


# ---------------------------------------------------------------------------
# mel filterbank


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    frame: FrameConfig, mel: MelConfig, sample_rate: int = DEFAULT_SAMPLE_RATE
) -> np.ndarray:
    """Triangular mel filterbank, shape (n_mels, n_bins). Unnormalized:
    every triangle peaks at 1."""
    f_max = mel.f_max if mel.f_max is not None else sample_rate / 2.0
    if not 0.0 <= mel.f_min < f_max <= sample_rate / 2.0 + 1e-9:
        raise InputError(f"invalid mel band edges [{mel.f_min}, {f_max}]")
    pts = _mel_to_hz(np.linspace(_hz_to_mel(mel.f_min), _hz_to_mel(f_max), mel.n_mels + 2))
    freqs = np.fft.rfftfreq(frame.window_size, d=1.0 / sample_rate)
    fb = np.zeros((mel.n_mels, freqs.size))
    for i in range(mel.n_mels):
        lo, mid, hi = pts[i], pts[i + 1], pts[i + 2]
        rising = (freqs - lo) / max(mid - lo, 1e-12)
        falling = (hi - freqs) / max(hi - mid, 1e-12)
        fb[i] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def mel_spectrogram(
    wave: Waveform,
    frame: FrameConfig = FrameConfig(),
    mel: MelConfig = MelConfig(),
) -> MelSpectrogram:
    """Normalized log-mel features of a waveform."""
    spec = stft(wave, frame)
    power = np.abs(spec) ** 2
    fb = mel_filterbank(frame, mel, wave.sample_rate)
    mel_power = power @ fb.T
    logm = np.log(np.maximum(mel_power, mel.log_floor))
    values = mel.norm_scale * (logm + mel.norm_shift)
    return MelSpectrogram(values, frame, mel, wave.sample_rate)


# ---------------------------------------------------------------------------
# inversion


def _nnls_multiplicative(
    mel_power: np.ndarray, fb: np.ndarray, n_iter: int = 40
) -> np.ndarray:
    """Batched non-negative least squares: find S >= 0 with S @ fb.T ~= mel_power.

    Multiplicative updates (the classic nonnegative matrix factorization
    rule with the basis fixed), warm-started from a per-bin rescaling of
    the transpose mapping. mel_power is (frames, n_mels), fb is
    (n_mels, n_bins); the result is linear power per STFT bin.
    """
    m = np.maximum(mel_power, 0.0)
    denom0 = np.maximum((fb * fb).sum(axis=0), 1e-12)
    s = (m @ fb) / denom0[None, :]
    for _ in range(n_iter):
        num = m @ fb
        den = np.maximum((s @ fb.T) @ fb, 1e-12)
        s *= num / den
    return np.maximum(s, 0.0)


def mel_to_waveform(
    mel: MelSpectrogram,
    n_samples: int | None = None,
    gl_iters: int = 32,
    init_phase: np.ndarray | None = None,
    nnls_iters: int = 40,
    mel_project_iters: int = 4,
) -> Waveform:
    """Reconstruct a waveform from normalized log-mel features.

    Pipeline: de-normalize to mel power, solve for linear STFT power with
    NNLS, then run Griffin-Lim phase recovery. Each Griffin-Lim iteration
    re-projects the magnitude onto the set consistent with the target mel
    power (``mel_project_iters`` multiplicative corrections), which keeps
    the estimate from drifting away from the mel evidence.

    ``init_phase`` (same shape as the underlying STFT) seeds the phase;
    when enhancing, passing the noisy signal's phase is markedly better
    than a cold start. Default output length is (n_frames - 1) * hop.
    """
    frame, cfg = mel.frame_config, mel.mel_config
    if n_samples is None:
        n_samples = (mel.n_frames - 1) * frame.hop_size
    if mel.n_frames != frame.n_frames(n_samples):
        raise InputError(
            f"n_samples {n_samples} implies {frame.n_frames(n_samples)} frames, "
            f"mel has {mel.n_frames}"
        )
    fb = mel_filterbank(frame, cfg, mel.sample_rate)
    mel_power = np.exp(mel.log_power())
    # entries at the log floor are silence; zero them so NNLS does not
    # hallucinate broadband energy there
    mel_power[mel_power <= cfg.log_floor * (1.0 + 1e-3)] = 0.0
    power = _nnls_multiplicative(mel_power, fb, n_iter=nnls_iters)
    mag = np.sqrt(power)

    if init_phase is not None:
        init_phase = np.asarray(init_phase)
        if init_phase.shape != mag.shape:
            raise InputError(
                f"init_phase shape {init_phase.shape} != spectrogram shape {mag.shape}"
            )
        phase = init_phase.astype(np.float64)
    else:
        phase = np.zeros_like(mag)

    spec = mag * np.exp(1j * phase)
    for _ in range(gl_iters):
        x = istft(spec, frame, n_samples)
        resynth = stft(Waveform(x, mel.sample_rate), frame)
        p2 = np.abs(resynth) ** 2
        for _ in range(mel_project_iters):
            cur = p2 @ fb.T
            scale = (mel_power @ fb) / np.maximum(cur @ fb, 1e-12)
            p2 *= scale
        spec = np.sqrt(p2) * np.exp(1j * np.angle(resynth))
    x = istft(spec, frame, n_samples)
    return Waveform(x, mel.sample_rate)


# ---------------------------------------------------------------------------
# WAV I/O (RIFF PCM, 16-bit signed little-endian, mono)


def save_wav(path, wave: Waveform) -> None:
    x = np.clip(np.round(wave.samples * 32767.0), -32768, 32767).astype("<i2")
    scipy.io.wavfile.write(str(path), wave.sample_rate, x)


def load_wav(path) -> Waveform:
    sr, data = scipy.io.wavfile.read(str(path))
    if data.ndim != 1:
        raise InputError(f"expected mono WAV, got shape {data.shape} in {path}")
    if data.dtype != np.int16:
        raise InputError(f"expected 16-bit PCM WAV, got dtype {data.dtype} in {path}")
    return Waveform(data.astype(np.float64) / 32767.0, int(sr))


def resample(wave: Waveform, target_rate: int) -> Waveform:
    """Polyphase resampling (used by the ingestion path)."""
    if wave.sample_rate == target_rate:
        return wave
    import math

    import scipy.signal

    g = math.gcd(wave.sample_rate, target_rate)
    up, down = target_rate // g, wave.sample_rate // g
    y = scipy.signal.resample_poly(wave.samples, up, down)
    return Waveform(y, target_rate)


def normalization_from_stats(mean_log: float, std_log: float) -> tuple[float, float]:
    """Affine normalization constants from corpus log-mel statistics.

    Maps mean to 0 and +-4 standard deviations to +-1, which puts typical
    speech log-mels approximately in [-1, 1].
    """
    std = max(float(std_log), 1e-6)
    return 1.0 / (4.0 * std), -float(mean_log)


def with_normalization(mel: MelConfig, norm_scale: float, norm_shift: float) -> MelConfig:
    return replace(mel, norm_scale=norm_scale, norm_shift=norm_shift)
