"""Bounded uniform noise on token embeddings during edit-time training.

For an [L,d] embedding matrix the noise is drawn elementwise from
U(-b, b) with b = alpha / (sqrt(L) * d), added on top of the clean
embeddings so gradients still reach the embedding table. alpha = 0 makes
the whole module an exact identity; noise is never applied at evaluation
or generation time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError


@dataclass
class NoiseConfig:
    alpha: float = 1.0
    rng_seed: int = 0
    resample_each_step: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"noise alpha must be non-negative, got {self.alpha}")


def noise_bound(seq_len: int, dim: int, alpha: float) -> float:
    """Half-width of the uniform noise interval: alpha / (sqrt(L) * d)."""
    if seq_len < 1 or dim < 1:
        raise ConfigError(f"noise_bound needs positive dimensions, got L={seq_len} d={dim}")
    if alpha < 0:
        raise ConfigError(f"noise alpha must be non-negative, got {alpha}")
    return alpha / (math.sqrt(seq_len) * dim)


def sample_noise(seq_len: int, dim: int, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Fresh elementwise-independent noise matrix within the closed bound."""
    bound = noise_bound(seq_len, dim, alpha)
    if bound == 0.0:
        return np.zeros((seq_len, dim), dtype=np.float64)
    return rng.uniform(-bound, bound, size=(seq_len, dim))


def perturb_embeddings(embeddings: Tensor, cfg: NoiseConfig, rng: np.random.Generator) -> Tensor:
    """Return embeddings + noise as a new tensor (never aliasing the input).

    The noise term is a constant on the tape, so backward treats the
    perturbed matrix exactly like the clean one.
    """
    seq_len, dim = embeddings.data.shape
    noise = sample_noise(seq_len, dim, cfg.alpha, rng)
    return ad.add(embeddings, ad.constant(noise))
