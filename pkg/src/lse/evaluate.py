"""Batch evaluation: run enhancement over a manifest split and report
SI-SDR / LSD per item, with aggregates overall and per noise family.

Reports are JSONL (header line with aggregates, then one row per item)
written with canonical JSON so a rerun with the same seed produces
byte-identical files. Per-item failures are recorded in their row and do
not abort the run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import Manifest, TargetKind, canonical_json, derive_seed
from .enhance import EnhanceConfig, Enhancer
from .errors import InputError
from .frontend import FrameConfig, MelConfig, load_wav, mel_spectrogram, save_wav
from .metrics import lsd, si_sdr


@dataclass
class EvalReport:
    split: str
    rows: list[dict]
    aggregates: dict
    config_fingerprint: str = ""

    def save(self, path) -> None:
        header = {
            "kind": "eval_report",
            "split": self.split,
            "aggregates": self.aggregates,
            "n_rows": len(self.rows),
            "config_fingerprint": self.config_fingerprint,
        }
        lines = [canonical_json(header)]
        lines += [canonical_json(r) for r in self.rows]
        Path(path).write_text("\n".join(lines) + "\n")

    @staticmethod
    def load(path) -> "EvalReport":
        lines = Path(path).read_text().strip().split("\n")
        header = json.loads(lines[0])
        if header.get("kind") != "eval_report":
            raise InputError(f"{path} is not an eval report")
        return EvalReport(split=header["split"],
                          rows=[json.loads(ln) for ln in lines[1:]],
                          aggregates=header["aggregates"],
                          config_fingerprint=header.get("config_fingerprint", ""))


def compute_aggregates(rows: list[dict]) -> dict:
    """Aggregate statistics over complete rows; recomputable from rows."""
    ok = [r for r in rows if not r.get("error")]
    agg = {
        "n_items": len(rows),
        "n_incomplete": len(rows) - len(ok),
    }
    if ok:
        for key in ("si_sdr_noisy", "si_sdr_enhanced", "si_sdr_improvement", "lsd_enhanced"):
            vals = np.array([r[key] for r in ok])
            agg[f"{key}_mean"] = round(float(vals.mean()), 6)
            agg[f"{key}_median"] = round(float(np.median(vals)), 6)
        by_kind: dict[str, list] = {}
        for r in ok:
            by_kind.setdefault(r["noise_kind"], []).append(r["si_sdr_improvement"])
        agg["si_sdr_improvement_by_kind"] = {
            k: round(float(np.mean(v)), 6) for k, v in sorted(by_kind.items())
        }
    return agg


def _clean_sibling(target_path: str) -> str:
    if target_path.endswith(".clean.wav"):
        return target_path
    return target_path.replace(".noise.wav", ".clean.wav")


def evaluate_split(enhancer: Enhancer, manifest: Manifest, corpus_dir,
                   cfg: EnhanceConfig = EnhanceConfig(),
                   out_dir=None, save_audio: bool = False,
                   config_fingerprint: str = "") -> EvalReport:
    """Enhance every pair in a split and measure against the clean
    reference. Per-item seeds derive from (cfg.seed, pair id) so the whole
    report is reproducible."""
    corpus_dir = Path(corpus_dir)
    frame, mel_cfg = enhancer.frame, enhancer.mel_cfg
    rows = []
    for p in manifest.pairs:
        row = {
            "id": p.id,
            "noise_kind": p.noise_kind.value if p.noise_kind else "unknown",
            "snr_db": round(p.snr_db, 6),
            "error": "",
        }
        try:
            noisy = load_wav(corpus_dir / p.noisy_path)
            clean = load_wav(corpus_dir / _clean_sibling(p.target_path))
            item_cfg = replace(cfg, seed=derive_seed(cfg.seed, p.id))
            enhanced = enhancer.enhance(noisy, item_cfg)
            mel_e = mel_spectrogram(enhanced, frame, mel_cfg)
            mel_c = mel_spectrogram(clean, frame, mel_cfg)
            row["si_sdr_noisy"] = round(si_sdr(noisy, clean), 6)
            row["si_sdr_enhanced"] = round(si_sdr(enhanced, clean), 6)
            row["si_sdr_improvement"] = round(
                row["si_sdr_enhanced"] - row["si_sdr_noisy"], 6)
            row["lsd_enhanced"] = round(lsd(mel_e, mel_c), 6)
            if save_audio and out_dir is not None:
                audio_dir = Path(out_dir) / "audio"
                audio_dir.mkdir(parents=True, exist_ok=True)
                save_wav(audio_dir / f"{p.id}.enhanced.wav", enhanced)
        except Exception as e:  # record the failure, keep evaluating
            row["error"] = f"{type(e).__name__}: {e}"
        rows.append(row)

    report = EvalReport(split=manifest.split, rows=rows,
                        aggregates=compute_aggregates(rows),
                        config_fingerprint=config_fingerprint)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.save(out_dir / f"report_{manifest.split}.jsonl")
    return report
