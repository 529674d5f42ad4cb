"""Latent diffusion speech enhancement, desk scale.

A small end-to-end system: 16 kHz mono waveforms are mapped to log-mel
spectrograms, compressed by a convolutional VAE, and enhanced by a
conditional diffusion model whose denoiser is steered between two tasks
(speech enhancement, background noise estimation) by a learned
instruction embedding. Everything runs on a single CPU core.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DomainError, InputError, LseError, NumericError

__all__ = [
    "LseError",
    "InputError",
    "ConfigError",
    "DomainError",
    "NumericError",
    "__version__",
]
