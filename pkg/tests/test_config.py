"""Run configuration tests: YAML loading, env overrides, strict key
validation, fingerprint stability."""

import pytest

from lse.config import AppConfig, load_config
from lse.errors import ConfigError


class TestDefaults:
    def test_empty_config_is_valid(self, tmp_path):
        p = tmp_path / "empty.yaml"
        p.write_text("")
        cfg = load_config(p, env={})
        assert cfg == AppConfig()

    def test_no_file_gives_defaults(self):
        assert load_config(env={}) == AppConfig()

    def test_default_values_documented_shape(self):
        cfg = AppConfig()
        assert cfg.frame.window_size == 1024
        assert cfg.frame.hop_size == 160
        assert cfg.mel.n_mels == 64
        assert cfg.vae.latent_channels == 8
        assert cfg.vae.compression == 4
        assert cfg.schedule.n_steps == 1000
        assert cfg.schedule.beta_start == 1e-4
        assert cfg.schedule.beta_end == 0.02
        assert cfg.denoiser.block_channels == (64, 128, 256, 256)
        assert cfg.train.speech_fraction == 0.75
        assert cfg.train.ema_decay == 0.999
        assert cfg.enhance.reverse_steps == 50


class TestYamlLoading:
    def test_partial_override(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("train:\n  lr: 0.001\n  total_steps: 50\nmel:\n  n_mels: 32\n")
        cfg = load_config(p, env={})
        assert cfg.train.lr == 0.001
        assert cfg.train.total_steps == 50
        assert cfg.mel.n_mels == 32
        # untouched sections keep defaults
        assert cfg.frame.window_size == 1024

    def test_tuple_field_from_list(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("denoiser:\n  block_channels: [32, 64]\n  attention_levels: [1]\n")
        cfg = load_config(p, env={})
        assert cfg.denoiser.block_channels == (32, 64)
        assert cfg.denoiser.attention_levels == (1,)

    def test_unknown_section_rejected(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("optimizer:\n  lr: 1\n")
        with pytest.raises(ConfigError) as exc:
            load_config(p, env={})
        assert "optimizer" in str(exc.value)

    def test_unknown_key_rejected_with_valid_list(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("train:\n  learning_rate: 0.1\n")
        with pytest.raises(ConfigError) as exc:
            load_config(p, env={})
        msg = str(exc.value)
        assert "learning_rate" in msg
        assert "lr" in msg  # the valid key is named

    def test_non_mapping_root_rejected(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("- a\n- b\n")
        with pytest.raises(ConfigError):
            load_config(p, env={})

    def test_non_mapping_section_rejected(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("train: 5\n")
        with pytest.raises(ConfigError):
            load_config(p, env={})

    def test_section_field_validation_still_applies(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("corpus:\n  snr_min_db: 10\n  snr_max_db: 0\n")
        with pytest.raises(ConfigError):
            load_config(p, env={})


class TestEnvOverrides:
    def test_env_overrides_file(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("train:\n  lr: 0.001\n")
        cfg = load_config(p, env={"LSE_TRAIN_LR": "2e-4"})
        assert cfg.train.lr == 2e-4

    def test_env_without_file(self):
        cfg = load_config(env={"LSE_MEL_N_MELS": "32", "LSE_TRAIN_TOTAL_STEPS": "7"})
        assert cfg.mel.n_mels == 32
        assert cfg.train.total_steps == 7

    def test_env_bool_parsing(self):
        cfg = load_config(env={"LSE_ENHANCE_USE_EMA": "false"})
        assert cfg.enhance.use_ema is False
        cfg = load_config(env={"LSE_ENHANCE_USE_EMA": "yes"})
        assert cfg.enhance.use_ema is True
        with pytest.raises(ConfigError):
            load_config(env={"LSE_ENHANCE_USE_EMA": "maybe"})

    def test_env_tuple_parsing(self):
        cfg = load_config(env={"LSE_DENOISER_BLOCK_CHANNELS": "32,64",
                               "LSE_DENOISER_ATTENTION_LEVELS": "1"})
        assert cfg.denoiser.block_channels == (32, 64)
        assert cfg.denoiser.attention_levels == (1,)

    def test_env_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            load_config(env={"LSE_TRAIN_LEARNING_RATE": "1"})

    def test_env_unknown_section_rejected(self):
        with pytest.raises(ConfigError):
            load_config(env={"LSE_OPTIMIZER_LR": "1"})

    def test_non_lse_env_ignored(self):
        cfg = load_config(env={"PATH": "/usr/bin", "HOME": "/root"})
        assert cfg == AppConfig()

    def test_optional_field_cleared_by_none(self):
        cfg = load_config(env={"LSE_TRAIN_STOP_LOSS": "0.05"})
        assert cfg.train.stop_loss == 0.05
        cfg = load_config(env={"LSE_TRAIN_STOP_LOSS": "none"})
        assert cfg.train.stop_loss is None

    def test_multi_word_section_prefix(self):
        # vae_train must not be swallowed by the vae section
        cfg = load_config(env={"LSE_VAE_TRAIN_LR": "0.01"})
        assert cfg.vae_train.lr == 0.01
        assert cfg.vae == AppConfig().vae


class TestFingerprint:
    def test_stable_across_identical_configs(self):
        assert AppConfig().fingerprint() == AppConfig().fingerprint()

    def test_sensitive_to_any_field(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("train:\n  lr: 0.123\n")
        a = load_config(p, env={})
        assert a.fingerprint() != AppConfig().fingerprint()

    def test_file_and_env_agree_when_equivalent(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("train:\n  lr: 0.0005\n")
        via_file = load_config(p, env={})
        via_env = load_config(env={"LSE_TRAIN_LR": "0.0005"})
        assert via_file.fingerprint() == via_env.fingerprint()
