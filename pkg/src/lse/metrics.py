"""Evaluation metrics: scale-invariant SDR on waveforms and log-spectral
distance on mel features."""

from __future__ import annotations

import math

import numpy as np

from .errors import InputError
from .frontend import MelSpectrogram, Waveform

SI_SDR_MAX_DB = 60.0
_REL_GUARD = 1e-12


def si_sdr(estimate: Waveform, reference: Waveform) -> float:
    """Scale-invariant signal-to-distortion ratio in dB.

    The reference is scaled by the projection coefficient of the estimate
    onto it; the ratio of projected power to residual power is reported in
    dB, capped at +60. A relative guard term keeps the perfect-match case
    finite instead of dividing by zero.
    """
    if estimate.samples.size != reference.samples.size:
        raise InputError(
            f"length mismatch: estimate {estimate.samples.size}, "
            f"reference {reference.samples.size}"
        )
    e = estimate.samples.astype(np.float64)
    r = reference.samples.astype(np.float64)
    ref_energy = float(np.dot(r, r))
    if ref_energy <= 0.0:
        raise InputError("reference signal has zero energy")
    alpha = float(np.dot(e, r)) / ref_energy
    target = alpha * r
    target_energy = float(np.dot(target, target))
    if target_energy <= 0.0:
        # estimate orthogonal to reference: nothing projects, worst case
        return -SI_SDR_MAX_DB
    residual = e - target
    resid_energy = float(np.dot(residual, residual)) + _REL_GUARD * target_energy
    val = 10.0 * math.log10(target_energy / resid_energy)
    return float(min(val, SI_SDR_MAX_DB))


def lsd(estimate: MelSpectrogram, reference: MelSpectrogram) -> float:
    """Log-spectral distance in dB between two mel spectrograms.

    Works on de-normalized log power (base-10, scaled by 10 so a uniform
    power ratio of 10x reads as exactly 10 dB): RMS over bands, then mean
    over frames. Symmetric by construction.
    """
    if estimate.values.shape != reference.values.shape:
        raise InputError(
            f"shape mismatch: {estimate.values.shape} vs {reference.values.shape}"
        )
    d = (10.0 / math.log(10.0)) * (estimate.log_power() - reference.log_power())
    per_frame = np.sqrt(np.mean(d * d, axis=1))
    return float(np.mean(per_frame))
