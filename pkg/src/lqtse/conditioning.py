"""Condition embeddings for every training and test strategy.

``noise_var`` is a variance: noise is drawn with standard deviation
``sqrt(noise_var)``. Noise is added after retrieval and the result is not
renormalised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cache import EmbeddingCache, retrieve_batch
from .encoders import AudioEncoder, TextEncoder
from .errors import ConfigError, InvalidCaptionError
from .signal import Waveform
from .synth import LABEL_PREFIX

SUPERVISED = "supervised-text"
WEAK_LABEL = "weak-label"
VANILLA = "vanilla-audio"
RETRIEVAL = "retrieval"

# CLI strategy names -> (provenance, uses noise)
STRATEGIES = {
    "supervised": (SUPERVISED, False),
    "weak": (WEAK_LABEL, False),
    "vanilla": (VANILLA, False),
    "vanilla-ni": (VANILLA, True),
    "retrieval": (RETRIEVAL, False),
    "retrieval-ni": (RETRIEVAL, True),
}

DEFAULT_NOISE_VAR = 1e-2


@dataclass(frozen=True)
class ConditionEmbedding:
    values: np.ndarray
    provenance: str
    noise_variance_applied: float = 0.0
    retrieved_index: int | None = None


@dataclass(frozen=True)
class StrategyConfig:
    """Which strategy builds the condition, with its noise variance and cache.

    ``noise_var`` plays the role of the vanilla variance for ``vanilla-ni``
    and of the retrieval variance for ``retrieval-ni``; plain ``vanilla`` and
    ``retrieval`` ignore it and inject nothing.
    """

    strategy: str
    noise_var: float = DEFAULT_NOISE_VAR
    cache: EmbeddingCache | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {sorted(STRATEGIES)}")
        if self.noise_var < 0:
            raise ConfigError(f"noise variance must be >= 0, got {self.noise_var}")
        if (self.cache is not None) != self.is_retrieval:
            raise ConfigError("an embedding cache is required for, and only for, retrieval strategies")

    @property
    def provenance(self) -> str:
        return STRATEGIES[self.strategy][0]

    @property
    def is_retrieval(self) -> bool:
        return self.provenance == RETRIEVAL

    @property
    def effective_noise_var(self) -> float:
        return self.noise_var if STRATEGIES[self.strategy][1] else 0.0


def gaussian_noise(dim: int, variance: float, rng: np.random.Generator) -> np.ndarray:
    if variance == 0:
        return np.zeros(dim)
    return np.sqrt(variance) * rng.standard_normal(dim)


def condition_supervised(caption: str, text_encoder: TextEncoder) -> ConditionEmbedding:
    """Encode a caption; the test-time query path uses this too."""
    if not caption:
        raise InvalidCaptionError("caption must be non-empty")
    return ConditionEmbedding(np.asarray(text_encoder.encode_text(caption), dtype=np.float64), SUPERVISED)


def weak_label_caption(label: str) -> str:
    """Prefix a bare label once; strings that already carry the prefix pass through."""
    if not label:
        raise InvalidCaptionError("label must be non-empty")
    return label if label.startswith(LABEL_PREFIX) else LABEL_PREFIX + label


def condition_weak_label(label: str, text_encoder: TextEncoder) -> ConditionEmbedding:
    c = condition_supervised(weak_label_caption(label), text_encoder)
    return ConditionEmbedding(c.values, WEAK_LABEL)


def _add_noise(base: np.ndarray, noise_var: float, rng: np.random.Generator | None) -> np.ndarray:
    if noise_var < 0:
        raise ConfigError(f"noise variance must be >= 0, got {noise_var}")
    if noise_var == 0:
        return base
    if rng is None:
        raise ConfigError("a random generator is required when noise_var > 0")
    return base + gaussian_noise(base.shape[-1], noise_var, rng)


def condition_vanilla(
    target: Waveform, audio_encoder: AudioEncoder, noise_var: float, rng: np.random.Generator | None = None
) -> ConditionEmbedding:
    """Target audio embedding plus N(0, noise_var I) noise."""
    base = np.asarray(audio_encoder.encode_audio(target), dtype=np.float64)
    return ConditionEmbedding(_add_noise(base, noise_var, rng), VANILLA, float(noise_var))


def condition_retrieval(
    target: Waveform,
    audio_encoder: AudioEncoder,
    cache: EmbeddingCache,
    noise_var: float,
    rng: np.random.Generator | None = None,
) -> ConditionEmbedding:
    """Most similar cached text embedding to the (noise-free) audio query, plus noise."""
    query = np.asarray(audio_encoder.encode_audio(target), dtype=np.float64)
    idx, _ = retrieve_batch(cache, query[None, :])
    base = cache.matrix[int(idx[0])].astype(np.float64)
    return ConditionEmbedding(_add_noise(base, noise_var, rng), RETRIEVAL, float(noise_var), int(idx[0]))


def condition_batch(
    config: StrategyConfig,
    audio_embeddings: np.ndarray,
    rngs: list[np.random.Generator],
    captions: list[str] | None = None,
    text_encoder: TextEncoder | None = None,
) -> tuple[np.ndarray, list[int | None]]:
    """Vectorised training-time conditioning from precomputed audio embeddings.

    Returns the (B, D) condition matrix and, for retrieval, the retrieved row
    per example. ``rngs[i]`` feeds the noise of example ``i`` only, so the
    result does not depend on how a batch is split.
    """
    b = audio_embeddings.shape[0]
    var = config.effective_noise_var
    if config.provenance == VANILLA:
        base, picked = np.asarray(audio_embeddings, dtype=np.float64), [None] * b
    elif config.is_retrieval:
        idx, _ = retrieve_batch(config.cache, audio_embeddings)
        base, picked = config.cache.matrix[idx].astype(np.float64), [int(i) for i in idx]
    else:
        if captions is None or text_encoder is None:
            raise ConfigError(f"strategy {config.strategy!r} needs captions and a text encoder")
        make = condition_weak_label if config.provenance == WEAK_LABEL else condition_supervised
        base, picked = np.stack([make(c, text_encoder).values for c in captions]), [None] * b
    if var > 0:
        base = base + np.stack([gaussian_noise(base.shape[1], var, rngs[i]) for i in range(b)])
    return base, picked
