"""Language-queried target sound extraction trained without parallel data.

A numpy/scipy toolkit: STFT masking separator with hand-written gradients,
SDR metrics, dual-encoder contract with deterministic reference encoders,
an exact-search text-embedding cache, the conditioning strategies (text,
audio, audio with noise, retrieval), a seeded training loop and the
experiment harnesses.
"""

from .cache import EmbeddingCache, build_cache, load_cache, retrieve_batch, retrieve_top1, save_cache
from .conditioning import StrategyConfig, condition_retrieval, condition_supervised, condition_vanilla, condition_weak_label
from .encoders import GapModel, ReferenceAudioEncoder, ReferenceTextEncoder
from .metrics import MetricReport, compute_metrics, loss_and_grad, sdr, si_sdr
from .separator import SeparatorParams, backward, forward, init_params
from .signal import ComplexSpectrogram, Waveform, istft, mix, shuffle_mix, stft
from .trainer import TrainConfig, evaluate, lr_schedule, train

__version__ = "0.1.0"

__all__ = [
    "ComplexSpectrogram", "EmbeddingCache", "GapModel", "MetricReport", "ReferenceAudioEncoder",
    "ReferenceTextEncoder", "SeparatorParams", "StrategyConfig", "TrainConfig", "Waveform",
    "backward", "build_cache", "compute_metrics", "condition_retrieval", "condition_supervised",
    "condition_vanilla", "condition_weak_label", "evaluate", "forward", "init_params", "istft",
    "load_cache", "loss_and_grad", "lr_schedule", "mix", "retrieve_batch", "retrieve_top1",
    "save_cache", "sdr", "shuffle_mix", "si_sdr", "stft", "train",
]
