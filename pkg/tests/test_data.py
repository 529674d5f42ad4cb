"""Data pipeline tests: synthesis statistics, SNR mixing closed forms,
manifest round trips, corpus determinism."""

import json

import numpy as np
import pytest
import scipy.signal

from lse.data import (
    SEEN_NOISE_KINDS,
    UNSEEN_NOISE_KINDS,
    CorpusConfig,
    Instruction,
    Manifest,
    NoiseKind,
    TargetKind,
    TrainingPair,
    build_corpus,
    canonical_json,
    derive_seed,
    mix_at_snr,
    remix_pair,
    sample_training_item,
    synthesize_noise,
    synthesize_speech,
)
from lse.errors import ConfigError, InputError
from lse.frontend import Waveform, load_wav


def psd(w: Waveform, nperseg=1024):
    f, p = scipy.signal.welch(w.samples, fs=w.sample_rate, nperseg=nperseg)
    return f, p


def centroid(w: Waveform) -> float:
    f, p = psd(w)
    return float((f * p).sum() / p.sum())


class TestDeriveSeed:
    def test_deterministic(self):
        assert derive_seed(1, "a", 2) == derive_seed(1, "a", 2)

    def test_order_sensitive(self):
        assert derive_seed("a", "b") != derive_seed("b", "a")

    def test_part_sensitive(self):
        seen = {derive_seed(0, "x", i) for i in range(100)}
        assert len(seen) == 100

    def test_range_63_bit(self):
        for i in range(50):
            s = derive_seed("r", i)
            assert 0 <= s < 2**63


class TestSpeechSynthesis:
    def test_deterministic(self):
        a = synthesize_speech(7, 0.5)
        b = synthesize_speech(7, 0.5)
        assert np.array_equal(a.samples, b.samples)
        c = synthesize_speech(8, 0.5)
        assert not np.array_equal(a.samples, c.samples)

    def test_rms_normalized(self):
        for seed in range(3):
            w = synthesize_speech(seed, 1.0)
            assert w.rms() == pytest.approx(0.1, abs=1e-9)

    def test_duration(self):
        assert synthesize_speech(0, 0.25).samples.size == 4000

    def test_low_centroid(self):
        # formant shaping concentrates energy well below Nyquist
        for seed in range(3):
            assert centroid(synthesize_speech(seed, 1.0)) < 3000.0

    def test_band_limited_below_7k(self):
        w = synthesize_speech(3, 1.0)
        f, p = psd(w)
        hi = p[f >= 7200].sum()
        assert hi / p.sum() < 0.01

    def test_rejects_zero_duration(self):
        with pytest.raises(InputError):
            synthesize_speech(0, 0.0)

    def test_amplitude_modulation_present(self):
        # syllable-rate envelope: smoothed energy must swing widely
        w = synthesize_speech(5, 2.0)
        env = scipy.signal.convolve(w.samples**2, np.ones(800) / 800, mode="valid")
        assert env.max() > 4.0 * max(env.min(), 1e-12)


class TestNoiseSynthesis:
    @pytest.mark.parametrize("kind", list(NoiseKind))
    def test_deterministic_and_normalized(self, kind):
        a = synthesize_noise(kind, 3, 0.5)
        b = synthesize_noise(kind, 3, 0.5)
        assert np.array_equal(a.samples, b.samples)
        assert a.rms() == pytest.approx(0.1, abs=1e-9)
        c = synthesize_noise(kind, 4, 0.5)
        assert not np.array_equal(a.samples, c.samples)

    def test_kinds_differ_from_each_other(self):
        sigs = [synthesize_noise(k, 0, 0.5).samples for k in NoiseKind]
        for i in range(len(sigs)):
            for j in range(i + 1, len(sigs)):
                assert not np.array_equal(sigs[i], sigs[j])

    def test_white_is_spectrally_flat(self):
        # frozen envelope: over 8 seeds the worst deviation of the 1024-pt
        # Welch PSD from its median was ~2.1 dB; 3 dB bounds it
        for seed in range(4):
            w = synthesize_noise(NoiseKind.WHITE, seed, 2.0)
            f, p = psd(w)
            keep = (f > 100) & (f < 7900)
            db = 10 * np.log10(p[keep])
            assert np.max(np.abs(db - np.median(db))) < 3.0

    def test_pink_slope_minus_3db_per_octave(self):
        # log-log fit of PSD: 1/f power means slope -1 in log10 space,
        # i.e. -3.01 dB per octave (frozen measurement: -3.02)
        w = synthesize_noise(NoiseKind.PINK, 0, 4.0)
        f, p = psd(w, nperseg=2048)
        keep = (f > 50) & (f < 6000)
        slope = np.polyfit(np.log10(f[keep]), np.log10(p[keep]), 1)[0]
        db_per_octave = 10 * slope * np.log10(2.0)
        assert db_per_octave == pytest.approx(-3.0, abs=0.5)

    def test_impulsive_heavy_tailed(self):
        # sparse bursts: sample kurtosis far above the Gaussian value 3
        w = synthesize_noise(NoiseKind.IMPULSIVE, 0, 2.0)
        x = w.samples
        k = np.mean((x - x.mean()) ** 4) / np.mean((x - x.mean()) ** 2) ** 2
        assert k > 20.0
        white = synthesize_noise(NoiseKind.WHITE, 0, 2.0).samples
        kw = np.mean(white**4) / np.mean(white**2) ** 2
        assert abs(kw - 3.0) < 0.5

    def test_hum_is_narrowband_low_frequency(self):
        w = synthesize_noise(NoiseKind.HUM, 1, 2.0)
        f, p = psd(w, nperseg=4096)
        below_500 = p[f < 500].sum() / p.sum()
        assert below_500 > 0.95
        peak = f[np.argmax(p)]
        assert 40.0 < peak < 70.0

    def test_babble_resembles_speech_spectrally(self):
        b = centroid(synthesize_noise(NoiseKind.BABBLE_SURROGATE, 0, 1.0))
        wh = centroid(synthesize_noise(NoiseKind.WHITE, 0, 1.0))
        assert b < 3000.0 < wh

    def test_seen_unseen_partition(self):
        assert set(SEEN_NOISE_KINDS) | set(UNSEEN_NOISE_KINDS) == set(NoiseKind)
        assert not set(SEEN_NOISE_KINDS) & set(UNSEEN_NOISE_KINDS)


class TestMixing:
    def test_snr_achieved_exactly(self):
        clean = synthesize_speech(0, 0.5)
        noise = synthesize_noise(NoiseKind.PINK, 0, 0.5)
        for snr in (-5.0, 0.0, 7.3, 15.0):
            _, scaled = mix_at_snr(clean, noise, snr)
            pc = np.mean(clean.samples**2)
            pn = np.mean(scaled.samples**2)
            assert 10 * np.log10(pc / pn) == pytest.approx(snr, abs=1e-9)

    def test_mixture_is_exact_sum(self):
        clean = synthesize_speech(1, 0.5)
        noise = synthesize_noise(NoiseKind.WHITE, 1, 0.5)
        noisy, scaled = mix_at_snr(clean, noise, 5.0)
        np.testing.assert_array_equal(noisy.samples, clean.samples + scaled.samples)

    def test_errors(self):
        clean = synthesize_speech(0, 0.5)
        with pytest.raises(InputError):
            mix_at_snr(clean, Waveform(np.zeros(clean.samples.size)), 0.0)
        with pytest.raises(InputError):
            mix_at_snr(clean, synthesize_noise(NoiseKind.WHITE, 0, 0.25), 0.0)


class TestTrainingPair:
    def _pair(self, **kw):
        base = dict(
            id="train_speech_white_0000",
            noisy_path="train/x.noisy.wav",
            target_path="train/x.clean.wav",
            target_kind=TargetKind.SPEECH,
            instruction=Instruction.INSTRUCT_A,
            snr_db=5.0,
            seed=123,
        )
        base.update(kw)
        return TrainingPair(**base)

    def test_instruction_must_match_target(self):
        with pytest.raises(ConfigError):
            self._pair(instruction=Instruction.INSTRUCT_B)
        # the valid noise pairing
        p = self._pair(id="train_noise_pink_0001",
                       target_path="train/x.noise.wav",
                       target_kind=TargetKind.NOISE,
                       instruction=Instruction.INSTRUCT_B)
        assert p.noise_kind is NoiseKind.PINK

    def test_instruction_texts(self):
        assert Instruction.INSTRUCT_A.text == "Speech enhancement"
        assert Instruction.INSTRUCT_B.text == "Background noise estimation"
        assert Instruction.INSTRUCT_A.index == 0
        assert Instruction.INSTRUCT_B.index == 1

    def test_record_round_trip(self):
        p = self._pair()
        assert TrainingPair.from_record(p.to_record()) == p

    def test_noise_kind_from_id(self):
        assert self._pair().noise_kind is NoiseKind.WHITE
        q = self._pair(id="dev_speech_babble_surrogate_0002")
        assert q.noise_kind is NoiseKind.BABBLE_SURROGATE


class TestCanonicalJson:
    def test_sorted_compact(self):
        assert canonical_json({"b": 1, "a": [1, 2]}) == '{"a":[1,2],"b":1}'

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            canonical_json({"x": float("nan")})

    def test_stable(self):
        d = {"z": 1, "a": {"c": 2, "b": 3}}
        assert canonical_json(d) == canonical_json(json.loads(canonical_json(d)))


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    cfg = CorpusConfig(
        out_dir=str(root), seed=11, duration_s=0.5,
        train_speech=3, train_noise=3, dev_speech=1, dev_noise=1,
        test_seen=2, test_unseen=2,
    )
    return cfg, build_corpus(cfg)


class TestCorpus:
    def test_split_counts(self, tiny_corpus):
        _, mans = tiny_corpus
        assert set(mans) == {"train", "dev", "test_seen", "test_unseen"}
        assert mans["train"].n_speech == 3 and mans["train"].n_noise == 3
        assert mans["dev"].n_speech == 1 and mans["dev"].n_noise == 1
        assert len(mans["test_seen"].pairs) == 2
        assert len(mans["test_unseen"].pairs) == 2

    def test_noise_kind_exposure(self, tiny_corpus):
        _, mans = tiny_corpus
        for split in ("train", "dev", "test_seen"):
            for p in mans[split].pairs:
                assert p.noise_kind in SEEN_NOISE_KINDS
        for p in mans["test_unseen"].pairs:
            assert p.noise_kind in UNSEEN_NOISE_KINDS

    def test_all_files_exist_and_load(self, tiny_corpus):
        from pathlib import Path

        cfg, mans = tiny_corpus
        root = Path(cfg.out_dir)
        for man in mans.values():
            for p in man.pairs:
                noisy = load_wav(root / p.noisy_path)
                target = load_wav(root / p.target_path)
                assert noisy.samples.size == 8000
                assert target.samples.size == 8000

    def test_mixture_decomposes_into_components(self, tiny_corpus):
        # noisy = clean + scaled_noise up to PCM16 quantization of each
        from pathlib import Path

        cfg, mans = tiny_corpus
        root = Path(cfg.out_dir)
        p = mans["train"].pairs[0]
        noisy = load_wav(root / p.noisy_path).samples
        clean = load_wav(root / f"train/{p.id}.clean.wav").samples
        noise = load_wav(root / f"train/{p.id}.noise.wav").samples
        np.testing.assert_allclose(noisy, clean + noise, atol=3.0 / 32767)

    def test_manifest_round_trip(self, tiny_corpus, tmp_path):
        _, mans = tiny_corpus
        man = mans["train"]
        path = tmp_path / "m.jsonl"
        man.save(path)
        back = Manifest.load(path)
        assert back == man

    def test_manifest_norm_stats(self, tiny_corpus):
        _, mans = tiny_corpus
        man = mans["train"]
        assert man.mel_log_std > 0
        scale, shift = man.norm()
        assert scale == pytest.approx(1.0 / (4.0 * man.mel_log_std))
        assert shift == pytest.approx(-man.mel_log_mean)
        # all splits carry the train-split statistics
        for other in mans.values():
            assert other.mel_log_mean == man.mel_log_mean
            assert other.mel_log_std == man.mel_log_std

    def test_normalized_train_mels_are_standardized(self, tiny_corpus):
        # applying the manifest normalization to the training material
        # must give mean ~0 and std ~0.25 (the 4-sigma convention)
        from pathlib import Path

        from lse.frontend import mel_spectrogram

        cfg, mans = tiny_corpus
        root = Path(cfg.out_dir)
        man = mans["train"]
        mc = man.mel_config()
        vals = []
        for p in man.pairs:
            for rel in (p.noisy_path, p.target_path):
                vals.append(mel_spectrogram(load_wav(root / rel), mel=mc).values.ravel())
        flat = np.concatenate(vals)
        assert abs(flat.mean()) < 1e-6
        assert flat.std() == pytest.approx(0.25, abs=1e-6)

    def test_remix_matches_stored_mixture(self, tiny_corpus):
        from pathlib import Path

        cfg, mans = tiny_corpus
        root = Path(cfg.out_dir)
        p = mans["dev"].pairs[0]
        remixed = remix_pair(root, p, cfg.duration_s)
        stored = load_wav(root / p.noisy_path)
        np.testing.assert_allclose(remixed.samples, stored.samples, atol=2.0 / 32767)

    def test_rebuild_is_byte_identical(self, tmp_path):
        outs = []
        for sub in ("a", "b"):
            cfg = CorpusConfig(out_dir=str(tmp_path / sub), seed=5, duration_s=0.3,
                               train_speech=1, train_noise=1, dev_speech=1,
                               dev_noise=1, test_seen=1, test_unseen=1)
            build_corpus(cfg)
            outs.append(tmp_path / sub)
        a_files = sorted(f.relative_to(outs[0]) for f in outs[0].rglob("*") if f.is_file())
        b_files = sorted(f.relative_to(outs[1]) for f in outs[1].rglob("*") if f.is_file())
        assert a_files == b_files
        for rel in a_files:
            assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes(), rel

    def test_snr_in_configured_range(self, tiny_corpus):
        cfg, mans = tiny_corpus
        for man in mans.values():
            for p in man.pairs:
                assert cfg.snr_min_db <= p.snr_db <= cfg.snr_max_db

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            CorpusConfig(snr_min_db=10, snr_max_db=0)
        with pytest.raises(ConfigError):
            CorpusConfig(duration_s=0)
        with pytest.raises(ConfigError):
            CorpusConfig(train_speech=-1)


class TestSampling:
    def _manifest(self):
        pairs = []
        for i in range(4):
            pairs.append(TrainingPair(
                id=f"train_speech_white_{i:04d}", noisy_path="n", target_path="t",
                target_kind=TargetKind.SPEECH, instruction=Instruction.INSTRUCT_A,
                snr_db=0.0, seed=i))
        for i in range(4):
            pairs.append(TrainingPair(
                id=f"train_noise_pink_{i:04d}", noisy_path="n", target_path="t",
                target_kind=TargetKind.NOISE, instruction=Instruction.INSTRUCT_B,
                snr_db=0.0, seed=i))
        return Manifest("train", pairs, 0, 0.0, 1.0)

    def test_speech_fraction_statistics(self):
        man = self._manifest()
        rng = np.random.default_rng(0)
        n = 20_000
        k = sum(
            sample_training_item(man, rng).target_kind is TargetKind.SPEECH
            for _ in range(n)
        )
        # binomial(20000, 0.75) has sigma ~0.003; allow 4 sigma
        assert k / n == pytest.approx(0.75, abs=0.013)

    def test_requires_both_kinds(self):
        man = self._manifest()
        only_speech = Manifest("train", [p for p in man.pairs
                                         if p.target_kind is TargetKind.SPEECH],
                               0, 0.0, 1.0)
        with pytest.raises(InputError):
            sample_training_item(only_speech, np.random.default_rng(0))

    def test_fraction_domain(self):
        man = self._manifest()
        with pytest.raises(ConfigError):
            sample_training_item(man, np.random.default_rng(0), speech_fraction=1.0)

    def test_uniform_within_kind(self):
        man = self._manifest()
        rng = np.random.default_rng(1)
        counts = {}
        for _ in range(8000):
            p = sample_training_item(man, rng, speech_fraction=0.5)
            counts[p.id] = counts.get(p.id, 0) + 1
        # each of 8 ids should get ~1000 draws
        assert min(counts.values()) > 800
        assert max(counts.values()) < 1200
