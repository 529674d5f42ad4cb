"""Conditional U-Net noise predictor over latent space.

Input is the diffusion state concatenated with the conditioning latent
along channels (so the first conv sees 2C channels). Task selection is a
learned two-row instruction embedding injected through cross-attention
(a single context token) at the deeper resolution levels and the
bottleneck. Timesteps enter via a sinusoidal embedding projected into
every residual block.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DomainError, InputError


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 16
    out_channels: int = 8
    block_channels: tuple = (64, 128, 256, 256)
    res_blocks_per_level: int = 2
    attention_levels: tuple = (1, 2, 3)  # 0-based level indices with cross-attention
    attention_heads: int = 4
    embed_dim: int = 128  # instruction embedding width (= cross-attention context dim)
    timestep_embed_dim: int = 256
    norm_groups: int = 8
    n_instructions: int = 2

    def __post_init__(self):
        if self.in_channels != 2 * self.out_channels:
            raise ConfigError(
                f"in_channels ({self.in_channels}) must be twice out_channels "
                f"({self.out_channels}): state and conditioning are concatenated"
            )
        if len(self.block_channels) < 1:
            raise ConfigError("block_channels must be non-empty")
        for lv in self.attention_levels:
            if not 0 <= lv < len(self.block_channels):
                raise ConfigError(f"attention level {lv} out of range")
        if self.embed_dim % self.attention_heads != 0:
            raise ConfigError("embed_dim must be divisible by attention_heads")

    @property
    def n_levels(self) -> int:
        return len(self.block_channels)

    @property
    def spatial_divisor(self) -> int:
        """Both latent axes must be divisible by this (one stride-2 stage
        between consecutive levels)."""
        return 2 ** (self.n_levels - 1)

    @staticmethod
    def full_size() -> "DenoiserConfig":
        return DenoiserConfig(block_channels=(320, 640, 1280, 1280),
                              attention_heads=8, embed_dim=768,
                              timestep_embed_dim=1280)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class InstructionEmbedding(nn.Module):
    """Two learned instruction vectors; rows start near unit norm
    (Gaussian entries scaled by 1/sqrt(dim))."""

    def __init__(self, n_instructions: int, dim: int):
        super().__init__()
        self.table = nn.Embedding(n_instructions, dim)
        with torch.no_grad():
            self.table.weight.normal_(0.0, 1.0).mul_(1.0 / math.sqrt(dim))

    def forward(self, idx: torch.Tensor) -> torch.Tensor:
        return self.table(idx)


class _ResBlock(nn.Module):
    def __init__(self, cin, cout, temb_dim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time_proj = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class _CrossAttention(nn.Module):
    """Spatial positions attend to the context tokens (here: one
    instruction token per item)."""

    def __init__(self, channels, ctx_dim, heads, groups):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(groups, channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(ctx_dim, channels)
        self.to_v = nn.Linear(ctx_dim, channels)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x, ctx):
        b, c, h, w = x.shape
        q = self.norm(x).reshape(b, c, h * w).transpose(1, 2)  # (B, HW, C)
        q = self.to_q(q)
        k = self.to_k(ctx)
        v = self.to_v(ctx)

        def split(t):
            return t.reshape(b, t.shape[1], self.heads, c // self.heads).transpose(1, 2)

        out = F.scaled_dot_product_attention(split(q), split(k), split(v))
        out = out.transpose(1, 2).reshape(b, h * w, c)
        out = self.to_out(out)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class _Level(nn.Module):
    """A stack of res blocks, followed by cross-attention where enabled."""

    def __init__(self, cin, cout, n_res, temb_dim, groups, attn, ctx_dim, heads):
        super().__init__()
        self.blocks = nn.ModuleList(
            _ResBlock(cin if i == 0 else cout, cout, temb_dim, groups)
            for i in range(n_res)
        )
        self.attn = _CrossAttention(cout, ctx_dim, heads, groups) if attn else None

    def forward(self, x, temb, ctx):
        for blk in self.blocks:
            x = blk(x, temb)
        if self.attn is not None:
            x = self.attn(x, ctx)
        return x


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        chs = cfg.block_channels
        tdim = cfg.timestep_embed_dim
        g = cfg.norm_groups

        self.instruction = InstructionEmbedding(cfg.n_instructions, cfg.embed_dim)
        self.time_mlp = nn.Sequential(
            nn.Linear(tdim, tdim), nn.SiLU(), nn.Linear(tdim, tdim)
        )
        self.conv_in = nn.Conv2d(cfg.in_channels, chs[0], 3, padding=1)

        self.down_levels = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for i, ch in enumerate(chs):
            cin = chs[max(i - 1, 0)]
            self.down_levels.append(_Level(
                cin, ch, cfg.res_blocks_per_level, tdim, g,
                i in cfg.attention_levels, cfg.embed_dim, cfg.attention_heads))
            self.downsamples.append(
                nn.Conv2d(ch, ch, 3, stride=2, padding=1) if i < len(chs) - 1 else nn.Identity()
            )

        mid = chs[-1]
        self.mid_block1 = _ResBlock(mid, mid, tdim, g)
        self.mid_attn = _CrossAttention(mid, cfg.embed_dim, cfg.attention_heads, g)
        self.mid_block2 = _ResBlock(mid, mid, tdim, g)

        self.up_levels = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        rev = list(reversed(range(len(chs))))
        for j, i in enumerate(rev):
            ch = chs[i]
            cin = (mid if j == 0 else chs[rev[j - 1]]) + ch  # skip carries ch channels
            self.up_levels.append(_Level(
                cin, ch, cfg.res_blocks_per_level, tdim, g,
                i in cfg.attention_levels, cfg.embed_dim, cfg.attention_heads))
            self.upsamples.append(
                nn.Upsample(scale_factor=2, mode="nearest") if i > 0 else nn.Identity()
            )

        self.norm_out = nn.GroupNorm(g, chs[0])
        self.conv_out = nn.Conv2d(chs[0], cfg.out_channels, 3, padding=1)
        # shrink the output layer: a fresh model predicts near-zero noise
        # (initial loss ~1) but gradients still reach every parameter
        with torch.no_grad():
            self.conv_out.weight.mul_(0.1)
            nn.init.zeros_(self.conv_out.bias)

    def forward(self, z_t: torch.Tensor, z_cond: torch.Tensor,
                instruction_idx: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """(B,C,L,F) state + (B,C,L,F) conditioning -> (B,C,L,F) noise estimate."""
        if z_t.shape != z_cond.shape:
            raise InputError(
                f"state shape {tuple(z_t.shape)} != conditioning shape {tuple(z_cond.shape)}"
            )
        if z_t.ndim != 4:
            raise InputError("expected 4-D (B, C, L', F') tensors")
        if z_t.shape[1] * 2 != self.cfg.in_channels:
            raise InputError(
                f"got {z_t.shape[1]} channels; model expects {self.cfg.in_channels // 2}"
            )
        div = self.cfg.spatial_divisor
        L, Fr = z_t.shape[2], z_t.shape[3]
        if L % div or Fr % div:
            need_l = (-L) % div
            need_f = (-Fr) % div
            raise ConfigError(
                f"latent dims ({L}, {Fr}) must be divisible by {div}; "
                f"pad frames by {need_l} and mel bands by {need_f}"
            )

        dtype = self.conv_in.weight.dtype
        temb = self.time_mlp(timestep_embedding(t, self.cfg.timestep_embed_dim).to(dtype))
        ctx = self.instruction(instruction_idx)[:, None, :]  # (B, 1, D)

        x = self.conv_in(torch.cat([z_t, z_cond], dim=1))
        skips = []
        for level, down in zip(self.down_levels, self.downsamples):
            x = level(x, temb, ctx)
            skips.append(x)
            x = down(x)

        x = self.mid_block1(x, temb)
        x = self.mid_attn(x, ctx)
        x = self.mid_block2(x, temb)

        for level, up in zip(self.up_levels, self.upsamples):
            x = level(torch.cat([x, skips.pop()], dim=1), temb, ctx)
            x = up(x)

        return self.conv_out(F.silu(self.norm_out(x)))


def predict_noise(model: Denoiser, z_t: torch.Tensor, z_cond: torch.Tensor,
                  instruction_idx: int, t: int, n_steps: int | None = None) -> torch.Tensor:
    """Single-item noise prediction: (C, L', F') tensors in, same out.

    Validates the timestep against ``n_steps`` when given. Use
    :func:`predict_noise_padded` for latents whose dims are not divisible
    by the model's downsampling factor.
    """
    if n_steps is not None and not 1 <= t <= n_steps:
        raise DomainError(f"timestep {t} outside [1, {n_steps}]")
    if t < 1:
        raise DomainError(f"timestep {t} must be >= 1")
    with torch.no_grad():
        out = model(
            z_t[None], z_cond[None],
            torch.tensor([instruction_idx], dtype=torch.long),
            torch.tensor([t], dtype=torch.long),
        )
    return out[0]


def predict_noise_padded(model: Denoiser, z_t: torch.Tensor, z_cond: torch.Tensor,
                         instruction_idx: int, t: int, n_steps: int | None = None) -> torch.Tensor:
    """Like :func:`predict_noise`, but reflect-pads both spatial axes up to
    the model's divisor and crops the prediction back."""
    div = model.cfg.spatial_divisor
    L, Fr = z_t.shape[1], z_t.shape[2]
    pl, pf = (-L) % div, (-Fr) % div
    if pl == 0 and pf == 0:
        return predict_noise(model, z_t, z_cond, instruction_idx, t, n_steps)
    pad = (0, pf, 0, pl)  # (left, right, top, bottom) on the last two dims
    zt = F.pad(z_t[None], pad, mode="reflect")[0]
    zc = F.pad(z_cond[None], pad, mode="reflect")[0]
    out = predict_noise(model, zt, zc, instruction_idx, t, n_steps)
    return out[:, :L, :Fr]


def count_params(cfg: DenoiserConfig) -> int:
    """Exact trainable parameter count for a config (by construction)."""
    model = Denoiser(cfg)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def denoiser_meta(cfg: DenoiserConfig) -> dict:
    d = asdict(cfg)
    d["block_channels"] = list(cfg.block_channels)
    d["attention_levels"] = list(cfg.attention_levels)
    return d


def denoiser_from_meta(meta: dict) -> DenoiserConfig:
    m = dict(meta)
    m["block_channels"] = tuple(m["block_channels"])
    m["attention_levels"] = tuple(m["attention_levels"])
    return DenoiserConfig(**m)
