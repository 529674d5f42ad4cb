"""Shared fixtures: a tiny corpus and a matching trained artifact pair
small enough that inference-path tests stay fast."""

import pytest
import torch

from lse.data import CorpusConfig, build_corpus
from lse.denoiser import DenoiserConfig
from lse.diffusion import make_schedule
from lse.frontend import FrameConfig, MelConfig
from lse.training import TrainConfig, run_training
from lse.vae import MelVAE, VAEConfig, save_vae

MICRO_VAE = dict(latent_channels=4, block_channels=(8, 8, 16, 16), norm_groups=4)
MICRO_DENOISER = dict(in_channels=8, out_channels=4, block_channels=(8, 16),
                      attention_levels=(1,), attention_heads=2, embed_dim=8,
                      timestep_embed_dim=16, norm_groups=4,
                      res_blocks_per_level=1)
MICRO_SEG_S = 0.47  # 48 mel frames, matching the 0.475 s corpus items
MICRO_STEPS = 12


@pytest.fixture(scope="session")
def micro_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("micro_corpus")
    cfg = CorpusConfig(out_dir=str(root), seed=3, duration_s=0.475,
                       train_speech=3, train_noise=3, dev_speech=1, dev_noise=1,
                       test_seen=1, test_unseen=1)
    return root, build_corpus(cfg)


@pytest.fixture(scope="session")
def micro_ckpts(micro_corpus, tmp_path_factory):
    """VAE + diffusion checkpoints from a 2-step run on the micro corpus."""
    root, manifests = micro_corpus
    out = tmp_path_factory.mktemp("micro_run")
    torch.manual_seed(0)
    vae = MelVAE(VAEConfig(**MICRO_VAE)).eval()
    vae.attach_frontend(FrameConfig(), manifests["train"].mel_config(MelConfig()),
                        manifests["train"].sample_rate)
    vae_path = out / "vae.ckpt"
    save_vae(vae_path, vae, step=0, dev_loss=None)
    cfg = TrainConfig(total_steps=2, batch_size=2, segment_s=MICRO_SEG_S,
                      eval_interval=10, log_interval=1, checkpoint_interval=10,
                      out_dir=str(out / "cldm"), seed=0)
    best = run_training(manifests["train"], manifests["dev"], root, vae, cfg,
                        DenoiserConfig(**MICRO_DENOISER),
                        make_schedule(n_steps=MICRO_STEPS))
    return vae_path, best, root, manifests
