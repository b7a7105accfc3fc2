"""Waveforms, mixing and the fixed STFT front end.

The STFT uses a 512-sample periodic Hann window with hop 128 and a one-sided
spectrum. Signals are zero padded by ``WIN - HOP`` samples on both sides so
every input sample is covered by four frames, which makes :func:`istft` an
exact inverse of :func:`stft` after window-power normalisation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sp_fft

from .errors import DimensionError, InvalidBatchError, TooShortError

WIN = 512
HOP = 128
N_BINS = WIN // 2 + 1
PAD = WIN - HOP

DEFAULT_SAMPLE_RATE = 8000


def hann_window(n: int = WIN) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


_WINDOW = hann_window()


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise DimensionError(f"waveform must be a non-empty 1-D array, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class MixturePair:
    target: Waveform
    interference: Waveform
    mixture: Waveform


@dataclass(frozen=True)
class ComplexSpectrogram:
    bins: np.ndarray  # (F, T) complex
    sample_rate: int = DEFAULT_SAMPLE_RATE
    win_length: int = field(default=WIN)
    hop_length: int = field(default=HOP)

    @property
    def n_frames(self) -> int:
        return self.bins.shape[-1]


def _check_compatible(a: Waveform, b: Waveform) -> None:
    if len(a) != len(b):
        raise DimensionError(f"length mismatch: {len(a)} vs {len(b)}")
    if a.sample_rate != b.sample_rate:
        raise DimensionError(f"sample rate mismatch: {a.sample_rate} vs {b.sample_rate}")


def mix(target: Waveform, interference: Waveform) -> MixturePair:
    """Sum target and interference sample by sample, with no scaling or clipping."""
    _check_compatible(target, interference)
    mixture = Waveform(target.samples + interference.samples, target.sample_rate)
    return MixturePair(target=target, interference=interference, mixture=mixture)


def random_derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed permutation of ``range(n)`` without fixed points.

    Rejection sampling over uniform permutations; the acceptance rate tends
    to 1/e so the expected number of draws is below three.
    """
    if n < 2:
        raise InvalidBatchError(f"a derangement needs at least 2 elements, got {n}")
    idx = np.arange(n)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == idx):
            return perm


def shuffle_mix(batch: list[Waveform], rng: np.random.Generator) -> list[MixturePair]:
    """Pair every clip with another clip of the same batch as interference."""
    if len(batch) < 2:
        raise InvalidBatchError(f"shuffle_mix needs a batch of at least 2 clips, got {len(batch)}")
    for w in batch[1:]:
        _check_compatible(batch[0], w)
    perm = random_derangement(len(batch), rng)
    return [mix(batch[i], batch[j]) for i, j in enumerate(perm)]


def n_frames_for(length: int) -> int:
    padded = length + 2 * PAD
    return 1 + -(-(padded - WIN) // HOP)


def _padded_length(n_frames: int) -> int:
    return WIN + (n_frames - 1) * HOP


def _frame(padded: np.ndarray, n_frames: int) -> np.ndarray:
    """View (..., L) as (..., n_frames, WIN) with hop HOP."""
    view = np.lib.stride_tricks.sliding_window_view(padded, WIN, axis=-1)
    return view[..., ::HOP, :][..., :n_frames, :]


def _overlap_add(frames: np.ndarray) -> np.ndarray:
    """Inverse of :func:`_frame` with summation: (..., T, WIN) -> (..., L)."""
    n_frames = frames.shape[-2]
    out = np.zeros(frames.shape[:-2] + (_padded_length(n_frames),), dtype=frames.dtype)
    # four disjoint strided blocks per hop phase keeps this vectorised
    for start in range(0, WIN, HOP):
        chunk = frames[..., start:start + HOP]
        region = out[..., start:start + n_frames * HOP].view()
        region.shape = region.shape[:-1] + (n_frames, HOP)
        region += chunk
    return out


def _window_power(n_frames: int) -> np.ndarray:
    frames = np.broadcast_to(_WINDOW**2, (n_frames, WIN))
    return _overlap_add(np.ascontiguousarray(frames))


def analysis(x: np.ndarray) -> np.ndarray:
    """Array STFT: (..., N) real -> (..., F, T) complex."""
    x = np.asarray(x)
    length = x.shape[-1]
    if length < WIN:
        raise TooShortError(f"signal of length {length} is shorter than one window ({WIN})")
    n_frames = n_frames_for(length)
    total = _padded_length(n_frames)
    pad_width = [(0, 0)] * (x.ndim - 1) + [(PAD, total - length - PAD)]
    padded = np.pad(x, pad_width)
    frames = _frame(padded, n_frames) * _WINDOW.astype(x.dtype, copy=False)
    return np.swapaxes(sp_fft.rfft(frames, axis=-1), -1, -2)


def synthesis(spec: np.ndarray, length: int) -> np.ndarray:
    """Array inverse STFT: (..., F, T) complex -> (..., length) real."""
    spec = np.asarray(spec)
    if spec.shape[-2] != N_BINS:
        raise DimensionError(f"expected {N_BINS} frequency bins, got {spec.shape[-2]}")
    n_frames = spec.shape[-1]
    if n_frames != n_frames_for(length):
        raise DimensionError(f"{n_frames} frames cannot reconstruct a signal of length {length}")
    frames = sp_fft.irfft(np.swapaxes(spec, -1, -2), n=WIN, axis=-1)
    frames = frames * _WINDOW.astype(frames.dtype, copy=False)
    out = _overlap_add(frames)
    norm = _window_power(n_frames).astype(out.dtype, copy=False)
    return out[..., PAD:PAD + length] / norm[PAD:PAD + length]


# irfft counts interior bins twice and DC/Nyquist once
_IRFFT_WEIGHT = np.full(N_BINS, 2.0 / WIN)
_IRFFT_WEIGHT[0] = _IRFFT_WEIGHT[-1] = 1.0 / WIN


def synthesis_adjoint(grad: np.ndarray, n_frames: int) -> np.ndarray:
    """Adjoint of :func:`synthesis` in the real-mask sense.

    For ``y = synthesis(m * X, N)`` with real ``m`` and a real upstream
    gradient ``grad = dL/dy``, returns complex ``A`` with
    ``dL/dm = Re(X * conj(A))``.  This is the analysis transform of the
    normalised gradient taken with the synthesis window.
    """
    grad = np.asarray(grad)
    length = grad.shape[-1]
    total = _padded_length(n_frames)
    norm = _window_power(n_frames)[PAD:PAD + length].astype(grad.dtype, copy=False)
    pad_width = [(0, 0)] * (grad.ndim - 1) + [(PAD, total - length - PAD)]
    padded = np.pad(grad / norm, pad_width)
    frames = _frame(padded, n_frames) * _WINDOW.astype(grad.dtype, copy=False)
    spec = sp_fft.rfft(frames, axis=-1) * _IRFFT_WEIGHT.astype(grad.dtype, copy=False)
    return np.swapaxes(spec, -1, -2)


def stft(w: Waveform) -> ComplexSpectrogram:
    return ComplexSpectrogram(bins=analysis(w.samples), sample_rate=w.sample_rate)


def istft(s: ComplexSpectrogram, length: int) -> Waveform:
    return Waveform(synthesis(s.bins, length), s.sample_rate)
