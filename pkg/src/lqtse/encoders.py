"""Dual-encoder contract plus deterministic reference encoders.

Any object with ``dim`` and ``encode_audio(Waveform)`` / ``encode_text(str)``
returning unit-norm float64 vectors satisfies the contract. The reference
pair stands in for a pretrained contrastive audio/text model:

* :class:`ReferenceAudioEncoder` projects mel log-energy statistics through a
  seeded random matrix.
* :class:`ReferenceTextEncoder` resolves a caption to its class by exact
  string lookup (no language processing at all) and returns the class audio
  centroid displaced by a configurable :class:`GapModel`.

Real embeddings can be plugged in through the ``EMB1`` exchange file, see
:func:`write_embeddings` and :class:`PrecomputedEncoder`.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import numpy as np

from .errors import ConfigError, CorruptCacheError, DimensionError, InvalidCaptionError
from .signal import DEFAULT_SAMPLE_RATE, N_BINS, WIN, Waveform, analysis, hann_window
from .synth import DEFAULT_CLIP_LEN, SynthClassSpec, synth_dataset

EMBED_DIM = 64
N_MELS = 32
LOG_FLOOR = 1e-8


class AudioEncoder(Protocol):
    dim: int

    def encode_audio(self, w: Waveform) -> np.ndarray: ...


class TextEncoder(Protocol):
    dim: int

    def encode_text(self, caption: str) -> np.ndarray: ...


def key_hash(data: bytes | str) -> int:
    """Stable 64-bit key used by the embedding exchange format."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def audio_key(w: Waveform) -> bytes:
    return np.ascontiguousarray(w.samples, dtype="<f8").tobytes()


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def cone_map(v: np.ndarray, cone: float, axis: np.ndarray) -> np.ndarray:
    """unit(v + cone * axis) for unit rows ``v``."""
    w = v + cone * axis
    return w / np.linalg.norm(w, axis=-1, keepdims=True)


def cone_unmap(w: np.ndarray, cone: float, axis: np.ndarray) -> np.ndarray:
    """Inverse of :func:`cone_map` on its image: the unit ``v`` with ``cone_map(v) == w``."""
    c = w @ axis
    lam = cone * c + np.sqrt(np.maximum(cone**2 * c**2 - cone**2 + 1.0, 0.0))
    v = lam[..., None] * w - cone * axis if np.ndim(w) > 1 else lam * w - cone * axis
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def _mel_inv(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, sample_rate: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """Triangular (n_mels, N_BINS) filterbank spanning 0 Hz to Nyquist."""
    edges = _mel_inv(np.linspace(0.0, _mel(sample_rate / 2), n_mels + 2))
    freqs = np.arange(N_BINS) * sample_rate / WIN
    fb = np.zeros((n_mels, N_BINS))
    for i in range(n_mels):
        lo, mid, hi = edges[i:i + 3]
        rise = (freqs - lo) / (mid - lo)
        fall = (hi - freqs) / (hi - mid)
        fb[i] = np.clip(np.minimum(rise, fall), 0.0, None)
    return fb


class ReferenceAudioEncoder:
    """Mel log-energy (mean, std) features -> seeded projection -> unit vector.

    ``cone > 0`` then maps the vector to ``unit(v + cone * axis)`` for a
    seeded shared axis, narrowing the space the way contrastive encoders
    tend to. The text encoder applies the same map after its gap, so only
    externally injected noise grows relative to the class structure.
    """

    def __init__(self, dim: int = EMBED_DIM, seed: int = 0, sample_rate: int = DEFAULT_SAMPLE_RATE, cone: float = 0.0):
        if cone < 0:
            raise ConfigError(f"cone must be >= 0, got {cone}")
        self.dim = dim
        self.seed = seed
        self.sample_rate = sample_rate
        self.cone = cone
        self.filterbank = mel_filterbank(N_MELS, sample_rate)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA0D10]))
        self.projection = rng.standard_normal((dim, 2 * N_MELS)) / np.sqrt(2 * N_MELS)
        # shared direction added before the final normalisation; a larger cone
        # packs all embeddings into a narrower cap, as contrastive spaces tend to
        self.cone_axis = _unit(np.random.default_rng(np.random.SeedSequence([seed, 0xC0E])).standard_normal(dim))
        # features are referenced just below the silence level so that bands a
        # clip does not occupy contribute almost nothing to the direction
        self.center = np.concatenate([np.full(N_MELS, np.log(LOG_FLOOR) - 1.0), np.full(N_MELS, 1.5)])
        self._power_norm = np.sum(hann_window() ** 2)

    def features(self, w: Waveform | np.ndarray) -> np.ndarray:
        """64 features per clip: per-band mean and std of log mel energies over frames."""
        x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
        power = np.abs(analysis(x)) ** 2 / self._power_norm
        logmel = np.log(np.einsum("mf,...ft->...mt", self.filterbank, power) + LOG_FLOOR)
        return np.concatenate([logmel.mean(axis=-1), logmel.std(axis=-1)], axis=-1)

    def encode_features(self, feats: np.ndarray) -> np.ndarray:
        v = (feats - self.center) @ self.projection.T
        v = v / np.linalg.norm(v, axis=-1, keepdims=True)
        return cone_map(v, self.cone, self.cone_axis) if self.cone else v

    def encode_audio(self, w: Waveform) -> np.ndarray:
        return self.encode_features(self.features(w))

    def encode_batch(self, audio: np.ndarray) -> np.ndarray:
        """Row-wise embeddings of an (n, N) array of clips."""
        return np.stack([self.encode_features(self.features(a)) for a in audio])


@dataclass(frozen=True)
class GapModel:
    """Systematic audio-to-text offset plus isotropic per-caption jitter."""

    offset: np.ndarray
    jitter_var: float = 0.0

    def __post_init__(self):
        if self.jitter_var < 0:
            raise ConfigError(f"jitter_var must be >= 0, got {self.jitter_var}")
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=np.float64))

    @classmethod
    def random(cls, dim: int = EMBED_DIM, norm: float = 0.5, jitter_var: float = 2e-3, seed: int = 0) -> "GapModel":
        """Offset of the given norm along a seeded random direction."""
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6A9]))
        return cls(norm * _unit(rng.standard_normal(dim)), jitter_var)

    @classmethod
    def none(cls, dim: int = EMBED_DIM) -> "GapModel":
        return cls(np.zeros(dim), 0.0)


class ReferenceTextEncoder:
    """Caption -> unit vector near the audio centroid of the caption's class.

    Captions are matched verbatim against each class's caption templates.
    Unknown captions get a hash-seeded random unit vector.
    """

    def __init__(
        self,
        specs: Sequence[SynthClassSpec],
        audio_encoder: ReferenceAudioEncoder,
        gap: GapModel | None = None,
        seed: int = 0,
        centroid_clips: int = 16,
        clip_len: int = DEFAULT_CLIP_LEN,
    ):
        self.dim = audio_encoder.dim
        self.gap = gap if gap is not None else GapModel.random(self.dim, seed=seed)
        if self.gap.offset.shape != (self.dim,):
            raise DimensionError(f"gap offset has shape {self.gap.offset.shape}, expected ({self.dim},)")
        self.seed = seed
        self._audio = audio_encoder
        self.class_ids = [s.class_id for s in specs]
        self._class_of: dict[str, int] = {}
        for k, spec in enumerate(specs):
            for caption in spec.captions:
                self._class_of.setdefault(caption, k)
        ds = synth_dataset(specs, centroid_clips, clip_len, seed=seed + 7919, sample_rate=audio_encoder.sample_rate)
        emb = audio_encoder.encode_batch(ds.audio)
        self.centroids = np.stack([_unit(emb[ds.labels == k].mean(axis=0)) for k in range(len(specs))])

    def class_of(self, caption: str) -> int | None:
        return self._class_of.get(caption)

    def encode_text(self, caption: str) -> np.ndarray:
        if not isinstance(caption, str) or not caption:
            raise InvalidCaptionError("caption must be a non-empty string")
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, key_hash(caption)]))
        k = self._class_of.get(caption)
        if k is None:
            return _unit(rng.standard_normal(self.dim))
        # gap and jitter act before the cone, so the cone compresses them
        # exactly as it compresses the differences between audio classes
        cone = getattr(self._audio, "cone", 0.0)
        v = cone_unmap(self.centroids[k], cone, self._audio.cone_axis) if cone else self.centroids[k]
        v = v + self.gap.offset
        if self.gap.jitter_var > 0:
            v = v + np.sqrt(self.gap.jitter_var) * rng.standard_normal(self.dim)
        return cone_map(_unit(v), cone, self._audio.cone_axis) if cone else _unit(v)


# ---------------------------------------------------------------------------
# EMB1 exchange format
#   header: b"EMB1", u32 D, u64 count      (little endian)
#   records: u64 key hash, D x f32
# ---------------------------------------------------------------------------

_EMB_HEADER = struct.Struct("<4sIQ")


def write_embeddings(path: str | os.PathLike, embeddings: Mapping[int, np.ndarray]) -> None:
    items = list(embeddings.items())
    dim = len(items[0][1]) if items else 0
    rec = np.dtype([("key", "<u8"), ("vec", "<f4", (dim,))])
    arr = np.empty(len(items), dtype=rec)
    for i, (key, vec) in enumerate(items):
        if len(vec) != dim:
            raise DimensionError(f"embedding {i} has length {len(vec)}, expected {dim}")
        arr[i] = (key, vec)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_EMB_HEADER.pack(b"EMB1", dim, len(items)))
        fh.write(arr.tobytes())
    os.replace(tmp, path)


def read_embeddings(path: str | os.PathLike) -> dict[int, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _EMB_HEADER.size:
        raise CorruptCacheError("truncated EMB1 header", len(blob))
    magic, dim, count = _EMB_HEADER.unpack_from(blob)
    if magic != b"EMB1":
        raise CorruptCacheError(f"bad magic {magic!r}", 0)
    rec = np.dtype([("key", "<u8"), ("vec", "<f4", (dim,))])
    need = _EMB_HEADER.size + count * rec.itemsize
    if len(blob) < need:
        raise CorruptCacheError(f"expected {count} records of {rec.itemsize} bytes", len(blob))
    arr = np.frombuffer(blob, dtype=rec, count=count, offset=_EMB_HEADER.size)
    return {int(k): v.astype(np.float64) for k, v in zip(arr["key"], arr["vec"])}


class PrecomputedEncoder:
    """Serves embeddings produced elsewhere (e.g. by a real pretrained model).

    Text is looked up by ``key_hash(caption)``, audio by
    ``key_hash(audio_key(waveform))``. Vectors are L2-normalised on load.
    """

    def __init__(self, path: str | os.PathLike):
        table = read_embeddings(path)
        if not table:
            raise ConfigError(f"{path}: no embeddings")
        self._table = {k: _unit(v) for k, v in table.items()}
        self.dim = len(next(iter(self._table.values())))

    def _lookup(self, key: int, what: str) -> np.ndarray:
        try:
            return self._table[key]
        except KeyError:
            raise ConfigError(f"no precomputed embedding for {what}") from None

    def encode_text(self, caption: str) -> np.ndarray:
        if not isinstance(caption, str) or not caption:
            raise InvalidCaptionError("caption must be a non-empty string")
        return self._lookup(key_hash(caption), f"caption {caption!r}")

    def encode_audio(self, w: Waveform) -> np.ndarray:
        return self._lookup(key_hash(audio_key(w)), "waveform")
