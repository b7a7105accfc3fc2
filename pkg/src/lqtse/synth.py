"""Seeded synthetic sound classes, caption corpora and datasets.

Each class owns a frequency band and (optionally) a harmonic series. A clip
realises its class by placing band-limited noise and harmonic partials in a
randomly chosen sub-band, applying an amplitude envelope and normalising to a
random peak level. The sub-band and level are per-clip detail that an audio
embedding sees but a caption does not.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.io import wavfile

from .errors import ConfigError
from .signal import DEFAULT_SAMPLE_RATE, Waveform

LABEL_PREFIX = "The sound of "

DEFAULT_CLIP_LEN = 2 * DEFAULT_SAMPLE_RATE


@dataclass(frozen=True)
class SynthClassSpec:
    class_id: str
    captions: tuple[str, ...]
    band: tuple[float, float]
    harmonics: tuple[int, ...] = ()
    f0_range: tuple[float, float] | None = None
    noise_weight: float = 0.5
    sub_band_fraction: float = 0.6
    am_rate: tuple[float, float] = (0.5, 4.0)
    am_depth: tuple[float, float] = (0.2, 0.8)
    skirt_gain: float = 0.0
    skirt_width: float = 200.0

    def validate(self, sample_rate: int) -> None:
        lo, hi = self.band
        if not self.captions:
            raise ConfigError(f"class {self.class_id!r} has no caption templates")
        if not 0 <= lo < hi < sample_rate / 2:
            raise ConfigError(f"class {self.class_id!r}: band {self.band} must lie below Nyquist ({sample_rate / 2})")
        if self.harmonics and self.f0_range is None:
            raise ConfigError(f"class {self.class_id!r}: harmonics need an f0_range")

    @property
    def label(self) -> str:
        return self.class_id

    @property
    def label_caption(self) -> str:
        return LABEL_PREFIX + self.class_id


# ---------------------------------------------------------------------------
# caption corpus
# ---------------------------------------------------------------------------

_TEMPLATES = (
    "A recording of {x}",
    "{X} can be heard clearly",
    "{X} in the background",
    "Somebody captured {x} outdoors",
    "There is {x} nearby",
    "We hear {x} for a while",
    "{X} goes on and on",
    "A short clip of {x}",
    "Loud {x} close to the microphone",
    "Faint {x} far away",
    "{X} inside a small room",
    "An audio sample featuring {x}",
    "{X} with some echo",
    "Listening to {x}",
)

# label -> natural-language paraphrases of that label
_SYNONYMS: dict[str, tuple[str, ...]] = {
    "engine rumble": ("an engine rumbling", "a low motor hum", "a rumbling diesel engine"),
    "cello drone": ("a bowed cello", "a deep string drone", "a sustained cello note"),
    "crowd murmur": ("people murmuring", "a chattering crowd", "voices in a busy hall"),
    "flute melody": ("a flute playing", "a breathy wind instrument", "someone playing a flute"),
    "bird chirps": ("birds chirping", "a small bird singing", "songbirds calling"),
    "steam hiss": ("steam hissing", "a hissing valve", "escaping steam"),
    "kettle whistle": ("a whistling kettle", "a kettle boiling", "a high pitched whistle"),
    "bass hum": ("an electrical hum", "a buzzing transformer", "a deep mains hum"),
}


def caption_corpus(label: str, seed: int, n_cache: int = 24, n_test: int = 12) -> tuple[list[str], list[str]]:
    """Split the paraphrases of ``label`` into a cache set and a disjoint query set.

    Stand-in for LLM-produced captions: every template is combined with every
    synonym, shuffled with ``seed`` and split.
    """
    synonyms = _SYNONYMS.get(label, (label, f"the {label}", f"some {label}"))
    pool = []
    for template in _TEMPLATES:
        for syn in synonyms:
            pool.append(template.format(x=syn, X=syn[0].upper() + syn[1:]))
    if n_cache + n_test > len(pool):
        raise ConfigError(f"only {len(pool)} paraphrases available for {label!r}, asked for {n_cache + n_test}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, _stable_int(label)]))
    order = rng.permutation(len(pool))
    shuffled = [pool[i] for i in order]
    return shuffled[:n_cache], shuffled[n_cache:n_cache + n_test]


def _stable_int(text: str) -> int:
    import hashlib

    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


# ---------------------------------------------------------------------------
# worlds
# ---------------------------------------------------------------------------

_WORLD_LABELS = ("engine rumble", "cello drone", "crowd murmur", "flute melody", "bird chirps", "steam hiss")

WORLDS = ("disjoint", "adjacent", "harmonic")


@dataclass(frozen=True)
class World:
    """A set of class specs plus which captions belong to which split."""

    name: str
    specs: tuple[SynthClassSpec, ...]
    cache_captions: dict[str, tuple[str, ...]] = field(default_factory=dict)
    query_captions: dict[str, tuple[str, ...]] = field(default_factory=dict)

    @property
    def class_ids(self) -> list[str]:
        return [s.class_id for s in self.specs]

    def label_captions(self) -> list[str]:
        return [s.label_caption for s in self.specs]

    def enriched_captions(self) -> list[str]:
        """Label captions followed by every cache paraphrase, class by class."""
        out = self.label_captions()
        for spec in self.specs:
            out.extend(self.cache_captions[spec.class_id])
        return out


def make_world(
    name: str, seed: int = 0, n_cache: int = 24, n_test: int = 12, skirt_gain: float = 0.0, skirt_width: float = 200.0,
    sub_band_fraction: float | None = None,
) -> World:
    """Build one of the three desk-scale worlds.

    ``disjoint`` separates class bands by guard gaps, ``adjacent`` tiles the
    spectrum with touching bands, and ``harmonic`` uses overlapping bands told
    apart by their harmonic series.
    """
    if name == "disjoint":
        bands = [(80, 200), (300, 500), (700, 1000), (1350, 1800), (2250, 2800), (3250, 3900)]
        harmonics = [(1, 2, 3)] * 6
    elif name == "adjacent":
        edges = [80, 220, 420, 720, 1200, 2000, 3900]
        bands = list(zip(edges[:-1], edges[1:]))
        harmonics = [(1, 2, 3)] * 6
    elif name == "harmonic":
        bands = [(80, 1600), (150, 2400), (300, 3200), (80, 3900), (600, 3900), (1000, 3900)]
        harmonics = [(1, 2, 3, 4), (1, 3, 5, 7), (1, 2, 4, 8), (1, 5, 9), (1, 2), (1, 3, 6)]
    else:
        raise ConfigError(f"unknown world {name!r}; choose from {WORLDS}")

    specs = []
    cache_caps: dict[str, tuple[str, ...]] = {}
    query_caps: dict[str, tuple[str, ...]] = {}
    for label, band, harm in zip(_WORLD_LABELS, bands, harmonics):
        cache, query = caption_corpus(label, seed, n_cache, n_test)
        lo, hi = band
        if name == "harmonic":
            f0_range = (lo, max(lo * 1.5, hi / max(harm)))
            noise_weight, sub_frac = 0.2, 1.0
        else:
            f0_range = (lo, hi)
            # adjacent-band sources are narrowband and wander inside their class band
            noise_weight, sub_frac = 0.5, (0.3 if name == "adjacent" else 0.6)
        if sub_band_fraction is not None:
            sub_frac = sub_band_fraction
        specs.append(
            SynthClassSpec(
                class_id=label,
                captions=(LABEL_PREFIX + label, *cache, *query),
                band=(float(lo), float(hi)),
                harmonics=harm,
                f0_range=(float(f0_range[0]), float(f0_range[1])),
                noise_weight=noise_weight,
                sub_band_fraction=sub_frac,
                skirt_gain=skirt_gain,
                skirt_width=skirt_width,
            )
        )
        cache_caps[label] = tuple(cache)
        query_caps[label] = tuple(query)
    return World(name=name, specs=tuple(specs), cache_captions=cache_caps, query_captions=query_caps)


# ---------------------------------------------------------------------------
# clip generation
# ---------------------------------------------------------------------------


def _band_noise(
    rng: np.random.Generator, n: int, lo: float, hi: float, sr: int, skirt_gain: float = 0.0, skirt_width: float = 1.0
) -> np.ndarray:
    """White noise shaped to [lo, hi] with an optional Lorentzian skirt outside it."""
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    dist = np.maximum(lo - freqs, 0.0) + np.maximum(freqs - hi, 0.0)
    gain = np.where(dist > 0, skirt_gain / (1.0 + (dist / skirt_width) ** 2), 1.0)
    return np.fft.irfft(spec * gain, n=n)


def render_clip(spec: SynthClassSpec, rng: np.random.Generator, n: int, sr: int) -> np.ndarray:
    """Draw one clip of ``spec``: float64 samples with peak amplitude in [0.3, 1]."""
    lo, hi = spec.band
    width = (hi - lo) * spec.sub_band_fraction
    sub_lo = rng.uniform(lo, hi - width)
    sub_hi = sub_lo + width
    t = np.arange(n) / sr

    noise = _band_noise(rng, n, sub_lo, sub_hi, sr, spec.skirt_gain, spec.skirt_width)
    noise /= np.std(noise) + 1e-12

    tone = np.zeros(n)
    if spec.harmonics:
        f_lo, f_hi = spec.f0_range
        if spec.sub_band_fraction < 1.0:
            f_lo, f_hi = max(f_lo, sub_lo), min(f_hi, sub_hi)
        f0 = rng.uniform(f_lo, max(f_lo, f_hi))
        for h in spec.harmonics:
            f = f0 * h
            if lo <= f <= hi:
                tone += rng.uniform(0.3, 1.0) / h * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        if np.any(tone):
            tone /= np.std(tone)

    sig = spec.noise_weight * noise + (1.0 - spec.noise_weight) * tone
    rate = rng.uniform(*spec.am_rate)
    depth = rng.uniform(*spec.am_depth)
    env = 1.0 - depth * (0.5 + 0.5 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
    sig = sig * env
    peak = np.max(np.abs(sig))
    return sig * (rng.uniform(0.3, 1.0) / peak)


class SynthDataset:
    """Clips stacked as an (n_clips, clip_len) array with integer labels."""

    def __init__(self, audio: np.ndarray, labels: np.ndarray, class_ids: Sequence[str], sample_rate: int):
        self.audio = audio
        self.labels = labels
        self.class_ids = list(class_ids)
        self.sample_rate = sample_rate

    def __len__(self) -> int:
        return self.audio.shape[0]

    def __getitem__(self, i: int) -> tuple[Waveform, str]:
        return Waveform(self.audio[i], self.sample_rate), self.class_ids[self.labels[i]]

    def __iter__(self) -> Iterator[tuple[Waveform, str]]:
        for i in range(len(self)):
            yield self[i]

    @property
    def clip_len(self) -> int:
        return self.audio.shape[1]

    def subset(self, idx) -> "SynthDataset":
        idx = np.asarray(idx)
        return SynthDataset(self.audio[idx], self.labels[idx], self.class_ids, self.sample_rate)


def synth_dataset(
    specs: Sequence[SynthClassSpec],
    clips_per_class: int,
    clip_len: int = DEFAULT_CLIP_LEN,
    seed: int = 0,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
) -> SynthDataset:
    """Generate ``clips_per_class`` clips for every class, class-major order.

    Clip ``j`` of class ``k`` is drawn from its own stream seeded by
    ``(seed, k, j)``, so any subset can be regenerated independently.
    """
    if not specs:
        raise ConfigError("synth_dataset needs at least one class spec")
    if len(specs) < 2:
        raise ConfigError("synth_dataset needs at least two classes")
    for s in specs:
        s.validate(sample_rate)
    audio = np.empty((len(specs) * clips_per_class, clip_len))
    labels = np.repeat(np.arange(len(specs)), clips_per_class)
    for k, spec in enumerate(specs):
        for j in range(clips_per_class):
            rng = np.random.default_rng(np.random.SeedSequence([seed, k, j]))
            audio[k * clips_per_class + j] = render_clip(spec, rng, clip_len, sample_rate)
    return SynthDataset(audio, labels, [s.class_id for s in specs], sample_rate)


def band_mask(spec: SynthClassSpec, sample_rate: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """Binary STFT-bin mask passing the class band (oracle separator)."""
    from .signal import N_BINS, WIN

    freqs = np.arange(N_BINS) * sample_rate / WIN
    lo, hi = spec.band
    return ((freqs >= lo) & (freqs <= hi)).astype(np.float64)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def write_wav(path: str | os.PathLike, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    wavfile.write(path, w.sample_rate, pcm)


def read_wav(path: str | os.PathLike) -> Waveform:
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ConfigError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32767.0
    else:
        samples = data.astype(np.float64)
    return Waveform(samples, int(rate))


def write_dataset(ds: SynthDataset, out_dir: str | os.PathLike, manifest_name: str = "manifest.jsonl") -> Path:
    """Store clips as 16-bit PCM WAVs plus a line-delimited JSON manifest."""
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (w, class_id) in enumerate(ds):
        rel = f"audio/clip_{i:05d}.wav"
        write_wav(out / rel, w)
        lines.append(json.dumps({"path": rel, "class_id": class_id, "duration": w.duration}))
    manifest = out / manifest_name
    tmp = manifest.with_suffix(".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, manifest)
    return manifest


def read_manifest(path: str | os.PathLike) -> SynthDataset:
    path = Path(path)
    records = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not records:
        raise ConfigError(f"{path}: empty manifest")
    waves = [read_wav(path.parent / r["path"]) for r in records]
    lengths = {len(w) for w in waves}
    rates = {w.sample_rate for w in waves}
    if len(lengths) != 1 or len(rates) != 1:
        raise ConfigError(f"{path}: clips must share one length and sample rate")
    class_ids = list(dict.fromkeys(r["class_id"] for r in records))
    labels = np.array([class_ids.index(r["class_id"]) for r in records])
    return SynthDataset(np.stack([w.samples for w in waves]), labels, class_ids, rates.pop())
