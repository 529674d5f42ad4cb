"""Figure rendering for training logs, evaluation reports, and RTF
sweeps. Every figure is written next to the delimited data it was drawn
from; the data files are the contract, the images a convenience."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import InputError

_KIND_COLORS = {
    "white": "#777777",
    "pink": "#d66a9f",
    "babble_surrogate": "#4c72b0",
    "impulsive": "#dd8452",
    "hum": "#55a868",
}


def _read_jsonl(path) -> list[dict]:
    lines = Path(path).read_text().strip().split("\n")
    return [json.loads(ln) for ln in lines if ln.strip()]


def plot_training_log(log_path, out_png) -> Path:
    """Loss vs step (train curve plus per-context dev points) and the
    learning-rate ramp."""
    recs = _read_jsonl(log_path)
    train = [r for r in recs if r.get("context") == "mixed"]
    if not train:
        raise InputError(f"no training records in {log_path}")
    dev = [r for r in recs if r.get("phase") == "dev"]

    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True,
                                   gridspec_kw={"height_ratios": [3, 1]})
    steps = [r["step"] for r in train]
    losses = [r["loss"] for r in train]
    ax1.plot(steps, losses, lw=0.7, alpha=0.4, color="#4c72b0", label="train loss")
    if len(losses) >= 5:
        k = max(1, len(losses) // 40)
        kernel = np.ones(k) / k
        smooth = np.convolve(losses, kernel, mode="valid")
        ax1.plot(steps[k - 1:], smooth, lw=1.8, color="#4c72b0", label="smoothed")
    for ctx, color in (("speech", "#55a868"), ("noise", "#dd8452")):
        pts = [(r["step"], r["loss"]) for r in dev if r["context"] == ctx]
        if pts:
            xs, ys = zip(*pts)
            ax1.plot(xs, ys, "o-", ms=4, lw=1.0, color=color, label=f"dev ({ctx})")
    ax1.set_yscale("log")
    ax1.set_ylabel("noise prediction loss")
    ax1.legend(fontsize=8)
    ax1.grid(alpha=0.3)

    ax2.plot(steps, [r["lr"] for r in train], lw=1.2, color="#8172b3")
    ax2.set_xlabel("step")
    ax2.set_ylabel("lr")
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def plot_eval_report(report_path, out_png) -> Path:
    """SI-SDR improvement per noise family plus an SNR scatter."""
    recs = _read_jsonl(report_path)
    header, rows = recs[0], [r for r in recs[1:] if not r.get("error")]
    if not rows:
        raise InputError(f"no complete rows in {report_path}")

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    by_kind: dict[str, list[float]] = {}
    for r in rows:
        by_kind.setdefault(r["noise_kind"], []).append(r["si_sdr_improvement"])
    kinds = sorted(by_kind)
    means = [np.mean(by_kind[k]) for k in kinds]
    colors = [_KIND_COLORS.get(k, "#333333") for k in kinds]
    ax1.bar(range(len(kinds)), means, color=colors)
    ax1.set_xticks(range(len(kinds)))
    ax1.set_xticklabels(kinds, rotation=20, ha="right", fontsize=8)
    ax1.axhline(0, color="k", lw=0.8)
    ax1.set_ylabel("SI-SDR improvement (dB)")
    ax1.set_title(f"split: {header['split']}")
    ax1.grid(alpha=0.3, axis="y")

    for k in kinds:
        sub = [r for r in rows if r["noise_kind"] == k]
        ax2.scatter([r["snr_db"] for r in sub],
                    [r["si_sdr_improvement"] for r in sub],
                    s=18, label=k, color=_KIND_COLORS.get(k, "#333333"), alpha=0.8)
    ax2.axhline(0, color="k", lw=0.8)
    ax2.set_xlabel("input SNR (dB)")
    ax2.set_ylabel("SI-SDR improvement (dB)")
    ax2.legend(fontsize=7)
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def plot_rtf_report(report_path, out_png) -> Path:
    """RTF vs reverse step count."""
    recs = _read_jsonl(report_path)
    rows = [r for r in recs if "reverse_steps" in r]
    if not rows:
        raise InputError(f"no RTF rows in {report_path}")
    rows.sort(key=lambda r: r["reverse_steps"])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([r["reverse_steps"] for r in rows], [r["rtf"] for r in rows],
            "o-", color="#4c72b0")
    ax.axhline(1.0, color="#c44e52", lw=1.0, ls="--", label="real time")
    ax.set_xlabel("reverse steps")
    ax.set_ylabel("real-time factor")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def plot_mel_pair(mel_noisy, mel_out, out_png, titles=("noisy", "output")) -> Path:
    """Two mel spectrograms side by side (enhance --plot path)."""
    fig, axes = plt.subplots(1, 2, figsize=(11, 4), sharey=True)
    for ax, m, title in zip(axes, (mel_noisy, mel_out), titles):
        im = ax.imshow(m.values.T, origin="lower", aspect="auto",
                       interpolation="nearest", cmap="magma")
        ax.set_title(title, fontsize=9)
        ax.set_xlabel("frame")
    axes[0].set_ylabel("mel band")
    fig.colorbar(im, ax=axes, shrink=0.85, label="normalized log power")
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)
