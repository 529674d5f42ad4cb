"""Command line interface.

Subcommands cover the whole life cycle: corpus synthesis, VAE and
diffusion training, enhancement / noise estimation, batch evaluation,
real-time-factor measurement, and figure rendering. Exit codes: 0 on
success, 1 on usage or configuration errors, 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import AppConfig, load_config
from .data import Instruction, Manifest, NoiseKind, build_corpus, mix_at_snr, \
    synthesize_noise, synthesize_speech
from .errors import ConfigError, LseError
from .frontend import load_wav, mel_spectrogram, save_wav


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _add_common(p: _Parser):
    p.add_argument("--config", default=None, help="YAML config file")


def _add_model_args(p: _Parser):
    p.add_argument("--ckpt", required=True, help="diffusion model checkpoint (or run dir with best.ckpt)")
    p.add_argument("--vae", required=True, help="VAE checkpoint")
    p.add_argument("--force", action="store_true",
                   help="load despite config fingerprint mismatches")


def build_parser() -> _Parser:
    p = _Parser(prog="lse", description=__doc__)
    p.add_argument("--version", action="version", version=f"lse {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("make-data", parents=[], help="synthesize a corpus + manifests")
    _add_common(d)
    d.add_argument("--out", default=None, help="corpus directory")
    d.add_argument("--seed", type=int, default=None)

    tv = sub.add_parser("train-vae", help="train the mel VAE codec")
    _add_common(tv)
    tv.add_argument("--corpus", required=True, help="corpus directory with manifests")
    tv.add_argument("--out", default=None, help="run directory")
    tv.add_argument("--steps", type=int, default=None)
    tv.add_argument("--seed", type=int, default=None)
    tv.add_argument("--full-size", action="store_true", help="use the full-size channel widths")

    tc = sub.add_parser("train-cldm", help="train the conditional diffusion model")
    _add_common(tc)
    tc.add_argument("--corpus", required=True)
    tc.add_argument("--vae", required=True, help="trained VAE checkpoint")
    tc.add_argument("--out", default=None)
    tc.add_argument("--steps", type=int, default=None)
    tc.add_argument("--seed", type=int, default=None)
    tc.add_argument("--full-size", action="store_true")

    for name, help_text in (("enhance", "enhance a noisy recording"),
                            ("estimate-noise", "estimate the background noise instead")):
        e = sub.add_parser(name, help=help_text)
        _add_common(e)
        _add_model_args(e)
        e.add_argument("--in", dest="in_path", required=True, help="input WAV (16 kHz mono)")
        e.add_argument("--out", required=True, help="output WAV path")
        e.add_argument("--steps", type=int, default=None, help="reverse diffusion steps")
        e.add_argument("--seed", type=int, default=None)
        e.add_argument("--no-ema", action="store_true", help="use raw weights, not EMA")
        e.add_argument("--plot", action="store_true", help="also render input/output mels")

    ev = sub.add_parser("evaluate", help="run metrics over manifest splits")
    _add_common(ev)
    _add_model_args(ev)
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--split", default="test_seen",
                    help="comma-separated split names (default test_seen)")
    ev.add_argument("--out", required=True, help="report directory")
    ev.add_argument("--steps", type=int, default=None)
    ev.add_argument("--seed", type=int, default=None)
    ev.add_argument("--save-audio", action="store_true")
    ev.add_argument("--no-figures", action="store_true")

    r = sub.add_parser("rtf", help="measure real-time factor vs reverse steps")
    _add_common(r)
    _add_model_args(r)
    r.add_argument("--steps", default="10,20,30,40,50",
                   help="comma-separated reverse step counts")
    r.add_argument("--out", required=True, help="report directory")
    r.add_argument("--duration", type=float, default=4.0, help="test signal seconds")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--repeats", type=int, default=3)
    r.add_argument("--no-figures", action="store_true")

    pl = sub.add_parser("plot", help="render figures from a log or report file")
    _add_common(pl)
    pl.add_argument("--in", dest="in_path", required=True,
                    help="train_log.jsonl, eval report, or rtf report")
    pl.add_argument("--out", required=True, help="output PNG path")

    return p


def _resolve_ckpt(path_str: str) -> Path:
    """Accept either a checkpoint file or a run directory with a
    best.ckpt pointer."""
    path = Path(path_str)
    if path.is_dir():
        from .training import resolve_best

        return resolve_best(path)
    return path


def _load_enhancer(args, cfg: AppConfig):
    from .enhance import Enhancer

    return Enhancer.load(_resolve_ckpt(args.ckpt), args.vae,
                         expected_fingerprint=None, force=args.force)


def _enhance_cfg(args, cfg: AppConfig):
    ec = cfg.enhance
    if getattr(args, "steps", None) is not None:
        ec = replace(ec, reverse_steps=args.steps)
    if getattr(args, "seed", None) is not None:
        ec = replace(ec, seed=args.seed)
    if getattr(args, "no_ema", False):
        ec = replace(ec, use_ema=False)
    return ec


def _cmd_make_data(args, cfg: AppConfig) -> int:
    ccfg = cfg.corpus
    if args.out is not None:
        ccfg = replace(ccfg, out_dir=args.out)
    if args.seed is not None:
        ccfg = replace(ccfg, seed=args.seed)
    ccfg = replace(ccfg, config_fingerprint=cfg.fingerprint())
    manifests = build_corpus(ccfg, cfg.frame, cfg.mel)
    for split, man in manifests.items():
        print(f"{split}: {len(man.pairs)} pairs "
              f"({man.n_speech} speech / {man.n_noise} noise targets)")
    print(f"corpus written to {ccfg.out_dir}")
    return 0


def _cmd_train_vae(args, cfg: AppConfig) -> int:
    from .vae import VAEConfig, train_vae

    tcfg = cfg.vae_train
    if args.out is not None:
        tcfg = replace(tcfg, out_dir=args.out)
    if args.steps is not None:
        tcfg = replace(tcfg, steps=args.steps)
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    vae_cfg = VAEConfig.full_size() if args.full_size else cfg.vae
    train_man = Manifest.load(Path(args.corpus) / "manifest_train.jsonl")
    dev_man = Manifest.load(Path(args.corpus) / "manifest_dev.jsonl")

    def log_fn(rec):
        print(f"step {rec['step']}: recon_l1 {rec['recon_l1']:.4f} kl {rec['kl']:.4f}")

    _, best = train_vae(train_man, dev_man, args.corpus, tcfg, vae_cfg,
                        cfg.frame, cfg.mel, config_fingerprint=cfg.fingerprint(),
                        log_fn=log_fn)
    print(f"best VAE checkpoint: {best}")
    return 0


def _cmd_train_cldm(args, cfg: AppConfig) -> int:
    from .denoiser import DenoiserConfig
    from .diffusion import make_schedule
    from .training import run_training
    from .vae import load_vae

    tcfg = cfg.train
    if args.out is not None:
        tcfg = replace(tcfg, out_dir=args.out)
    if args.steps is not None:
        tcfg = replace(tcfg, total_steps=args.steps)
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    dcfg = DenoiserConfig.full_size() if args.full_size else cfg.denoiser
    schedule = make_schedule(cfg.schedule.kind, cfg.schedule.n_steps,
                             cfg.schedule.beta_start, cfg.schedule.beta_end)
    vae = load_vae(args.vae)
    train_man = Manifest.load(Path(args.corpus) / "manifest_train.jsonl")
    dev_man = Manifest.load(Path(args.corpus) / "manifest_dev.jsonl")
    best = run_training(train_man, dev_man, args.corpus, vae, tcfg, dcfg,
                        schedule, cfg.frame, cfg.mel,
                        config_fingerprint=cfg.fingerprint())
    print(f"best checkpoint: {best}")
    return 0


def _cmd_enhance(args, cfg: AppConfig, instruction: Instruction) -> int:
    from .enhance import enhance_sidecar

    enhancer = _load_enhancer(args, cfg)
    ec = _enhance_cfg(args, cfg)
    wave = load_wav(args.in_path)
    if instruction is Instruction.INSTRUCT_A:
        out_wave = enhancer.enhance(wave, ec)
    else:
        out_wave = enhancer.estimate_noise(wave, ec)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_wav(out_path, out_wave)
    sidecar = enhance_sidecar(ec, instruction, enhancer, args.in_path, args.out,
                              cfg.fingerprint())
    sidecar_path = out_path.with_suffix(out_path.suffix + ".json")
    sidecar_path.write_text(json.dumps(sidecar, sort_keys=True, indent=1) + "\n")
    if args.plot:
        from .plots import plot_mel_pair

        mel_in = mel_spectrogram(wave, enhancer.frame, enhancer.mel_cfg)
        mel_out = mel_spectrogram(out_wave, enhancer.frame, enhancer.mel_cfg)
        png = out_path.with_suffix(".png")
        plot_mel_pair(mel_in, mel_out, png,
                      titles=("input", instruction.text.lower()))
        print(f"figure: {png}")
    print(f"wrote {out_path} ({out_wave.duration_s:.2f}s) and {sidecar_path.name}")
    return 0


def _cmd_evaluate(args, cfg: AppConfig) -> int:
    from .evaluate import evaluate_split
    from .plots import plot_eval_report

    enhancer = _load_enhancer(args, cfg)
    ec = _enhance_cfg(args, cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = [s.strip() for s in args.split.split(",") if s.strip()]
    for split in splits:
        man = Manifest.load(Path(args.corpus) / f"manifest_{split}.jsonl")
        report = evaluate_split(enhancer, man, args.corpus, ec, out_dir,
                                save_audio=args.save_audio,
                                config_fingerprint=cfg.fingerprint())
        agg = report.aggregates
        print(f"[{split}] n={agg['n_items']} incomplete={agg['n_incomplete']}")
        if "si_sdr_improvement_mean" in agg:
            print(f"  si-sdr improvement mean {agg['si_sdr_improvement_mean']:+.2f} dB, "
                  f"lsd mean {agg['lsd_enhanced_mean']:.2f} dB")
        if not args.no_figures:
            png = out_dir / f"report_{split}.png"
            plot_eval_report(out_dir / f"report_{split}.jsonl", png)
            print(f"  figure: {png}")
    return 0


def _cmd_rtf(args, cfg: AppConfig) -> int:
    from .enhance import measure_rtf, write_rtf_report
    from .plots import plot_rtf_report

    enhancer = _load_enhancer(args, cfg)
    try:
        steps = [int(s) for s in args.steps.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--steps must be comma-separated integers, got {args.steps!r}")
    if not steps:
        raise ConfigError("--steps is empty")

    # deterministic test signal: speech surrogate plus white noise at 5 dB
    clean = synthesize_speech(args.seed, args.duration)
    noise = synthesize_noise(NoiseKind.WHITE, args.seed, args.duration)
    noisy, _ = mix_at_snr(clean, noise, 5.0)

    report = measure_rtf(enhancer, noisy, steps, cfg.enhance, repeats=args.repeats)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "rtf.jsonl"
    write_rtf_report(report, path)
    for row in report["rows"]:
        print(f"K={row['reverse_steps']:>4}  rtf {row['rtf']:.3f}  "
              f"({row['wall_s_median']:.2f}s for {row['audio_s']:.1f}s audio)")
    print(f"report: {path}")
    if not args.no_figures:
        png = out_dir / "rtf.png"
        plot_rtf_report(path, png)
        print(f"figure: {png}")
    return 0


def _cmd_plot(args, cfg: AppConfig) -> int:
    from .plots import plot_eval_report, plot_rtf_report, plot_training_log

    first = json.loads(Path(args.in_path).read_text().split("\n", 1)[0])
    kind = first.get("kind")
    if kind == "eval_report":
        plot_eval_report(args.in_path, args.out)
    elif kind == "rtf_report":
        plot_rtf_report(args.in_path, args.out)
    else:
        plot_training_log(args.in_path, args.out)
    print(f"figure: {args.out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "make-data":
            return _cmd_make_data(args, cfg)
        if args.command == "train-vae":
            return _cmd_train_vae(args, cfg)
        if args.command == "train-cldm":
            return _cmd_train_cldm(args, cfg)
        if args.command == "enhance":
            return _cmd_enhance(args, cfg, Instruction.INSTRUCT_A)
        if args.command == "estimate-noise":
            return _cmd_enhance(args, cfg, Instruction.INSTRUCT_B)
        if args.command == "evaluate":
            return _cmd_evaluate(args, cfg)
        if args.command == "rtf":
            return _cmd_rtf(args, cfg)
        if args.command == "plot":
            return _cmd_plot(args, cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"lse: config error: {e}", file=sys.stderr)
        return 1
    except LseError as e:
        print(f"lse: error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"lse: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
