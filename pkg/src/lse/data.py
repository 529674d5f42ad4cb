"""Synthetic training corpus: speech surrogates, five noise families,
SNR-controlled mixing, and JSONL manifests.

Everything is derived from integer seeds through SHA-256 so a corpus is
bit-reproducible across runs and platforms. Each manifest row pairs a
noisy mixture with one target (the clean speech or the scaled noise) and
the instruction that selects that target during training.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError
from .frontend import (
    DEFAULT_SAMPLE_RATE,
    FrameConfig,
    MelConfig,
    Waveform,
    load_wav,
    mel_spectrogram,
    normalization_from_stats,
    resample,
    save_wav,
    with_normalization,
)

MANIFEST_SCHEMA_VERSION = 1
_TARGET_RMS = 0.1


class Instruction(Enum):
    """The two task instructions the denoiser is conditioned on."""

    INSTRUCT_A = "Speech enhancement"
    INSTRUCT_B = "Background noise estimation"

    @property
    def text(self) -> str:
        return self.value

    @property
    def index(self) -> int:
        return 0 if self is Instruction.INSTRUCT_A else 1


class TargetKind(Enum):
    SPEECH = "speech"
    NOISE = "noise"

    @property
    def instruction(self) -> Instruction:
        return Instruction.INSTRUCT_A if self is TargetKind.SPEECH else Instruction.INSTRUCT_B


class NoiseKind(Enum):
    WHITE = "white"
    PINK = "pink"
    BABBLE_SURROGATE = "babble_surrogate"
    IMPULSIVE = "impulsive"
    HUM = "hum"


SEEN_NOISE_KINDS = (NoiseKind.WHITE, NoiseKind.PINK, NoiseKind.BABBLE_SURROGATE)
UNSEEN_NOISE_KINDS = (NoiseKind.IMPULSIVE, NoiseKind.HUM)


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of parts (ints/strings)."""
    h = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") & 0x7FFFFFFFFFFFFFFF


# ---------------------------------------------------------------------------
# signal synthesis


def synthesize_speech(seed: int, duration_s: float, sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Speech surrogate: a pitch-contoured harmonic source shaped by three
    random formant-like resonances, with slow amplitude modulation.

    Not intelligible speech, but it shares the statistics the models care
    about: harmonic structure, a low spectral centroid, and syllable-rate
    energy fluctuation.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    if n <= 0:
        raise InputError("duration must be positive")
    t = np.arange(n) / sample_rate

    f0_lo = rng.uniform(90.0, 140.0)
    f0_hi = f0_lo * rng.uniform(1.2, 2.1)
    vib = rng.uniform(3.0, 5.5)
    f0 = f0_lo + (f0_hi - f0_lo) * 0.5 * (1 + np.sin(2 * np.pi * vib * t / 4 + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate

    centers = np.array([rng.uniform(300, 800), rng.uniform(900, 2500), rng.uniform(2500, 3500)])
    widths = np.array([150.0, 250.0, 350.0])
    gains = rng.uniform(0.5, 1.0, size=3)

    x = np.zeros(n)
    for k in range(1, 31):
        fk = k * f0
        amp = np.zeros(n)
        for c, wdt, g in zip(centers, widths, gains):
            amp += g * np.exp(-0.5 * ((fk - c) / wdt) ** 2)
        amp += 0.02 / k  # weak harmonic floor
        amp[fk >= 7000.0] = 0.0
        x += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))

    mod_rate = rng.uniform(2.0, 6.0)
    x *= 0.55 + 0.45 * np.sin(2 * np.pi * mod_rate * t + rng.uniform(0, 2 * np.pi))
    return _normalize_rms(x, sample_rate)


def _normalize_rms(x: np.ndarray, sample_rate: int) -> Waveform:
    r = np.sqrt(np.mean(x**2))
    if r < 1e-12:
        raise InputError("synthesized signal is silent")
    return Waveform(x * (_TARGET_RMS / r), sample_rate)


def synthesize_noise(
    kind: NoiseKind, seed: int, duration_s: float, sample_rate: int = DEFAULT_SAMPLE_RATE
) -> Waveform:
    """One of five noise families, RMS-normalized to 0.1."""
    rng = np.random.default_rng(derive_seed("noise", kind.value, seed))
    n = int(round(duration_s * sample_rate))
    if n <= 0:
        raise InputError("duration must be positive")
    t = np.arange(n) / sample_rate

    if kind is NoiseKind.WHITE:
        x = rng.normal(0.0, 1.0, n)
    elif kind is NoiseKind.PINK:
        white = rng.normal(0.0, 1.0, n)
        spec = np.fft.rfft(white)
        f = np.fft.rfftfreq(n, d=1.0 / sample_rate)
        shape = np.zeros_like(f)
        shape[1:] = 1.0 / np.sqrt(f[1:])  # power ~ 1/f -> -3 dB/octave
        x = np.fft.irfft(spec * shape, n=n)
    elif kind is NoiseKind.BABBLE_SURROGATE:
        x = np.zeros(n)
        for v in range(8):
            voice = synthesize_speech(derive_seed("babble", seed, v), duration_s, sample_rate)
            x += voice.samples
    elif kind is NoiseKind.IMPULSIVE:
        x = np.zeros(n)
        rate_hz = rng.uniform(5.0, 12.0)
        n_events = max(1, rng.poisson(rate_hz * duration_s))
        starts = rng.integers(0, n, size=n_events)
        for s in starts:
            dur = int(rng.uniform(0.002, 0.01) * sample_rate)
            amp = rng.uniform(0.5, 1.0) * rng.choice([-1.0, 1.0])
            tail = np.exp(-np.arange(dur) / (0.2 * dur + 1)) * rng.normal(0, 1, dur)
            seg = min(dur, n - s)
            x[s : s + seg] += amp * tail[:seg]
        x += rng.normal(0.0, 1e-3, n)  # tiny floor so RMS is never zero
    elif kind is NoiseKind.HUM:
        f0 = rng.uniform(49.5, 60.5)
        x = np.zeros(n)
        for h, a in [(1, 1.0), (3, 0.4), (5, 0.2), (7, 0.1)]:
            drift = 1.0 + 0.001 * np.sin(2 * np.pi * 0.3 * t + rng.uniform(0, 2 * np.pi))
            x += a * np.sin(2 * np.pi * h * f0 * t * drift + rng.uniform(0, 2 * np.pi))
        x += rng.normal(0.0, 0.01, n)  # -40 dB broadband floor
    else:  # pragma: no cover
        raise ConfigError(f"unknown noise kind {kind}")
    return _normalize_rms(x, sample_rate)


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> tuple[Waveform, Waveform]:
    """Scale ``noise`` so the mixture hits the requested SNR and add it.

    Returns (noisy, scaled_noise). The scaled noise is what a noise-target
    training pair points at: it is exactly the additive component.
    """
    if clean.sample_rate != noise.sample_rate:
        raise InputError("sample rates differ")
    if clean.samples.size != noise.samples.size:
        raise InputError("lengths differ")
    pc = float(np.mean(clean.samples**2))
    pn = float(np.mean(noise.samples**2))
    if pc < 1e-20:
        raise InputError("clean signal is silent")
    if pn < 1e-20:
        raise InputError("noise signal is silent")
    gain = np.sqrt(pc / pn) * 10.0 ** (-snr_db / 20.0)
    scaled = Waveform(noise.samples * gain, noise.sample_rate)
    return Waveform(clean.samples + scaled.samples, clean.sample_rate), scaled


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class TrainingPair:
    """One manifest row: a noisy mixture and a single target."""

    id: str
    noisy_path: str
    target_path: str
    target_kind: TargetKind
    instruction: Instruction
    snr_db: float
    seed: int

    def __post_init__(self):
        if self.target_kind.instruction is not self.instruction:
            raise ConfigError(
                f"pair {self.id}: instruction {self.instruction.name} does not "
                f"match target kind {self.target_kind.value}"
            )

    @property
    def noise_kind(self) -> NoiseKind | None:
        """Noise family, recovered from the id naming convention."""
        for k in NoiseKind:
            if f"_{k.value}_" in self.id:
                return k
        return None

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "noisy_path": self.noisy_path,
            "target_path": self.target_path,
            "target_kind": self.target_kind.value,
            "instruction": self.instruction.name.lower(),
            "snr_db": self.snr_db,
            "seed": self.seed,
        }

    @staticmethod
    def from_record(rec: dict) -> "TrainingPair":
        return TrainingPair(
            id=rec["id"],
            noisy_path=rec["noisy_path"],
            target_path=rec["target_path"],
            target_kind=TargetKind(rec["target_kind"]),
            instruction=Instruction[rec["instruction"].upper()],
            snr_db=float(rec["snr_db"]),
            seed=int(rec["seed"]),
        )


def canonical_json(obj) -> str:
    """Deterministic JSON used for every serialized artifact line."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


@dataclass
class Manifest:
    """A split's pair list plus the corpus-level statistics models need."""

    split: str
    pairs: list[TrainingPair]
    corpus_seed: int
    mel_log_mean: float
    mel_log_std: float
    sample_rate: int = DEFAULT_SAMPLE_RATE
    config_fingerprint: str = ""
    schema_version: int = MANIFEST_SCHEMA_VERSION

    @property
    def n_speech(self) -> int:
        return sum(1 for p in self.pairs if p.target_kind is TargetKind.SPEECH)

    @property
    def n_noise(self) -> int:
        return sum(1 for p in self.pairs if p.target_kind is TargetKind.NOISE)

    def norm(self) -> tuple[float, float]:
        return normalization_from_stats(self.mel_log_mean, self.mel_log_std)

    def mel_config(self, base: MelConfig = MelConfig()) -> MelConfig:
        scale, shift = self.norm()
        return with_normalization(base, scale, shift)

    def save(self, path) -> None:
        header = {
            "kind": "manifest",
            "schema_version": self.schema_version,
            "split": self.split,
            "corpus_seed": self.corpus_seed,
            "sample_rate": self.sample_rate,
            "n_pairs": len(self.pairs),
            "n_speech": self.n_speech,
            "n_noise": self.n_noise,
            "mel_log_mean": self.mel_log_mean,
            "mel_log_std": self.mel_log_std,
            "config_fingerprint": self.config_fingerprint,
        }
        lines = [canonical_json(header)]
        lines += [canonical_json(p.to_record()) for p in self.pairs]
        Path(path).write_text("\n".join(lines) + "\n")

    @staticmethod
    def load(path) -> "Manifest":
        lines = Path(path).read_text().strip().split("\n")
        header = json.loads(lines[0])
        if header.get("kind") != "manifest":
            raise InputError(f"{path} is not a manifest file")
        if header["schema_version"] != MANIFEST_SCHEMA_VERSION:
            raise ConfigError(
                f"manifest schema {header['schema_version']} unsupported "
                f"(expected {MANIFEST_SCHEMA_VERSION})"
            )
        pairs = [TrainingPair.from_record(json.loads(ln)) for ln in lines[1:]]
        return Manifest(
            split=header["split"],
            pairs=pairs,
            corpus_seed=header["corpus_seed"],
            mel_log_mean=header["mel_log_mean"],
            mel_log_std=header["mel_log_std"],
            sample_rate=header["sample_rate"],
            config_fingerprint=header.get("config_fingerprint", ""),
            schema_version=header["schema_version"],
        )


# ---------------------------------------------------------------------------
# corpus construction


@dataclass
class CorpusConfig:
    out_dir: str = "corpus"
    seed: int = 0
    duration_s: float = 2.0
    snr_min_db: float = -5.0
    snr_max_db: float = 15.0
    train_speech: int = 24
    train_noise: int = 12
    dev_speech: int = 4
    dev_noise: int = 4
    test_seen: int = 6
    test_unseen: int = 6
    # optional real-data ingestion: directories of WAV files to draw
    # clean/noise material from instead of synthesizing
    clean_wav_dir: str | None = None
    noise_wav_dir: str | None = None
    config_fingerprint: str = ""

    def __post_init__(self):
        if self.snr_min_db > self.snr_max_db:
            raise ConfigError("snr_min_db must not exceed snr_max_db")
        if self.duration_s <= 0:
            raise ConfigError("duration_s must be positive")
        for name in ("train_speech", "train_noise", "dev_speech", "dev_noise",
                     "test_seen", "test_unseen"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


def _ingest_pool(wav_dir: str) -> list[Path]:
    paths = sorted(Path(wav_dir).glob("*.wav"))
    if not paths:
        raise InputError(f"no .wav files in {wav_dir}")
    return paths


def _clean_source(cfg: CorpusConfig, seed: int) -> Waveform:
    if cfg.clean_wav_dir is None:
        return synthesize_speech(seed, cfg.duration_s)
    return _draw_from_pool(_ingest_pool(cfg.clean_wav_dir), seed, cfg.duration_s)


def _noise_source(cfg: CorpusConfig, kind: NoiseKind, seed: int) -> Waveform:
    if cfg.noise_wav_dir is None:
        return synthesize_noise(kind, seed, cfg.duration_s)
    return _draw_from_pool(_ingest_pool(cfg.noise_wav_dir), seed, cfg.duration_s)


def _draw_from_pool(pool: list[Path], seed: int, duration_s: float) -> Waveform:
    """Ingestion: pick a file, mono-downmix, resample to 16 kHz, crop/tile."""
    rng = np.random.default_rng(seed)
    path = pool[int(rng.integers(0, len(pool)))]
    import scipy.io.wavfile

    sr, data = scipy.io.wavfile.read(str(path))
    data = np.asarray(data, dtype=np.float64)
    if data.dtype.kind in "iu" or np.max(np.abs(data)) > 4.0:
        data = data / 32768.0
    if data.ndim == 2:
        data = data.mean(axis=1)
    w = resample(Waveform(data, int(sr)), DEFAULT_SAMPLE_RATE)
    n = int(round(duration_s * DEFAULT_SAMPLE_RATE))
    x = w.samples
    while x.size < n:
        x = np.concatenate([x, x])
    start = int(rng.integers(0, max(1, x.size - n + 1)))
    return _normalize_rms(x[start : start + n], DEFAULT_SAMPLE_RATE)


def _make_pairs(cfg: CorpusConfig, split: str, n_speech: int, n_noise: int,
                kinds: tuple[NoiseKind, ...], out: Path) -> list[TrainingPair]:
    """Generate n_speech + n_noise pairs over fresh mixtures.

    Every mixture is new (speech- and noise-target pairs never share a
    mixture), and all three component files are written so evaluation can
    reach both references later.
    """
    pairs = []
    total = n_speech + n_noise
    for i in range(total):
        kind = kinds[i % len(kinds)]
        target_kind = TargetKind.SPEECH if i < n_speech else TargetKind.NOISE
        item_seed = derive_seed(cfg.seed, split, target_kind.value, i)
        rng = np.random.default_rng(item_seed)
        snr = float(rng.uniform(cfg.snr_min_db, cfg.snr_max_db))
        clean = _clean_source(cfg, derive_seed(item_seed, "clean"))
        noise = _noise_source(cfg, kind, derive_seed(item_seed, "noise"))
        noisy, scaled = mix_at_snr(clean, noise, snr)

        pid = f"{split}_{target_kind.value}_{kind.value}_{i:04d}"
        base = out / split
        base.mkdir(parents=True, exist_ok=True)
        save_wav(base / f"{pid}.clean.wav", clean)
        save_wav(base / f"{pid}.noise.wav", scaled)
        save_wav(base / f"{pid}.noisy.wav", noisy)

        target_rel = f"{split}/{pid}.clean.wav" if target_kind is TargetKind.SPEECH \
            else f"{split}/{pid}.noise.wav"
        pairs.append(TrainingPair(
            id=pid,
            noisy_path=f"{split}/{pid}.noisy.wav",
            target_path=target_rel,
            target_kind=target_kind,
            instruction=target_kind.instruction,
            snr_db=snr,
            seed=item_seed,
        ))
    return pairs


def build_corpus(cfg: CorpusConfig,
                 frame: FrameConfig = FrameConfig(),
                 mel: MelConfig = MelConfig()) -> dict[str, Manifest]:
    """Build all four splits under cfg.out_dir and write their manifests.

    Noise-kind exposure: train/dev/test_seen use the seen kinds only;
    test_unseen uses the held-out kinds only. Normalization statistics are
    measured on the train split (all three component signals) and copied
    into every manifest.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split_pairs = {
        "train": _make_pairs(cfg, "train", cfg.train_speech, cfg.train_noise,
                             SEEN_NOISE_KINDS, out),
        "dev": _make_pairs(cfg, "dev", cfg.dev_speech, cfg.dev_noise,
                           SEEN_NOISE_KINDS, out),
        "test_seen": _make_pairs(cfg, "test_seen", cfg.test_seen, 0,
                                 SEEN_NOISE_KINDS, out),
        "test_unseen": _make_pairs(cfg, "test_unseen", cfg.test_unseen, 0,
                                   UNSEEN_NOISE_KINDS, out),
    }

    # corpus statistics from the train split: log-mel values of clean,
    # scaled noise, and noisy signals with identity normalization
    acc = []
    for p in split_pairs["train"]:
        for rel in (p.noisy_path, p.target_path):
            w = load_wav(out / rel)
            m = mel_spectrogram(w, frame, mel)
            acc.append(m.values.ravel())
    if acc:
        flat = np.concatenate(acc)
        mean, std = float(flat.mean()), float(flat.std())
    else:
        mean, std = 0.0, 1.0

    manifests = {}
    for split, pairs in split_pairs.items():
        man = Manifest(
            split=split,
            pairs=pairs,
            corpus_seed=cfg.seed,
            mel_log_mean=mean,
            mel_log_std=std,
            config_fingerprint=cfg.config_fingerprint,
        )
        man.save(out / f"manifest_{split}.jsonl")
        manifests[split] = man
    return manifests


def sample_training_item(manifest: Manifest, rng: np.random.Generator,
                         speech_fraction: float = 0.75) -> TrainingPair:
    """Draw one pair: speech-target with probability speech_fraction,
    uniform within the chosen kind."""
    if not 0.0 < speech_fraction < 1.0:
        raise ConfigError(f"speech_fraction must be in (0, 1), got {speech_fraction}")
    speech = [p for p in manifest.pairs if p.target_kind is TargetKind.SPEECH]
    noise = [p for p in manifest.pairs if p.target_kind is TargetKind.NOISE]
    if not speech or not noise:
        raise InputError("manifest must contain both speech- and noise-target pairs")
    pool = speech if rng.random() < speech_fraction else noise
    return pool[int(rng.integers(0, len(pool)))]


def remix_pair(manifest_dir, pair: TrainingPair, cfg_duration_s: float) -> Waveform:
    """Regenerate the noisy mixture of a synthetic pair from its stored
    seed and snr_db, without reading any WAV file."""
    clean = synthesize_speech(derive_seed(pair.seed, "clean"), cfg_duration_s)
    kind = pair.noise_kind
    if kind is None:
        raise InputError(f"cannot infer noise kind from id {pair.id}")
    noise = synthesize_noise(kind, derive_seed(pair.seed, "noise"), cfg_duration_s)
    noisy, _ = mix_at_snr(clean, noise, pair.snr_db)
    return noisy
