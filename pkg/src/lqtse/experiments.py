"""Experiment harnesses: strategy comparison, noise sweep and cache ablation.

All three share one :class:`Setup` (world, frozen encoders, data splits,
caches) and one pool of trained arms. An arm is identified by its strategy,
noise variance and cache digest; asking for the same arm twice trains it
once, and when an output directory is given the trained parameters are also
kept on disk so a later command can reuse them.

Result rows always carry the provenance tuple (strategy, noise variance,
cache hash, seed, step budget) and never contain timings, so reruns produce
identical CSV bytes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .cache import EmbeddingCache, build_cache, load_cache
from .conditioning import DEFAULT_NOISE_VAR, STRATEGIES
from .encoders import GapModel, ReferenceAudioEncoder, ReferenceTextEncoder
from .errors import ConfigError
from .separator import SeparatorParams, load_checkpoint, save_checkpoint
from .synth import DEFAULT_CLIP_LEN, World, make_world, synth_dataset
from .trainer import EvalReport, EvalSet, TrainConfig, TrainData, evaluate, train

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "LQTSE_OUTPUT_ROOT"

RESULT_FIELDS = (
    "experiment", "world", "strategy", "noise_var", "cache", "cache_hash", "seed", "steps",
    "split", "n_examples", "sdri", "si_sdri", "status",
)


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write ``text`` to a sibling temp file, then rename it over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


@dataclass(frozen=True)
class ExperimentSpec:
    """What to run, on which world, with which shared training recipe."""

    world: str = "adjacent"
    seed: int = 0
    gap_norm: float = 0.5
    jitter_var: float = 0.01
    cone: float = 0.6  # narrows the reference embedding space, see ReferenceAudioEncoder
    clips_per_class: int = 60
    test_clips_per_class: int = 15
    val_fraction: float = 0.1
    pairings: int = 5
    clip_len: int = DEFAULT_CLIP_LEN
    base: TrainConfig = field(default_factory=lambda: TrainConfig(val_every=0))
    strategies: tuple[str, ...] = ("supervised", "weak", "vanilla", "vanilla-ni", "retrieval", "retrieval-ni")
    noise_var: float = DEFAULT_NOISE_VAR
    noise_grid: tuple[float, ...] = (0.0, 1e-3, 1e-2, 1e-1)
    sweep_strategies: tuple[str, ...] = ("vanilla", "retrieval")
    out_dir: str | None = None

    def __post_init__(self):
        if not self.strategies or not self.noise_grid or not self.sweep_strategies:
            raise ConfigError("experiment grids must be non-empty")
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad:
            raise ConfigError(f"unknown strategies {bad}; choose from {sorted(STRATEGIES)}")
        if any(s not in ("vanilla", "retrieval") for s in self.sweep_strategies):
            raise ConfigError("the noise sweep covers the vanilla and retrieval strategies only")
        if any(not 0 <= e <= 0.1 for e in self.noise_grid):
            raise ConfigError(f"noise grid must lie within [0, 0.1], got {self.noise_grid}")
        if self.cone < 0:
            raise ConfigError(f"cone must be >= 0, got {self.cone}")
        if not 0 < self.val_fraction < 1:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.pairings < 1 or self.clips_per_class < 2 or self.test_clips_per_class < 1:
            raise ConfigError("pairings, clips_per_class and test_clips_per_class must be positive")

    def setup_key(self) -> str:
        """Digest of every field that changes the data, encoders or training recipe."""
        fields = {k: v for k, v in asdict(self).items() if k not in ("strategies", "noise_grid", "sweep_strategies", "out_dir", "noise_var")}
        return hashlib.sha256(json.dumps(fields, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Arm:
    strategy: str
    noise_var: float = 0.0
    cache: str | None = None  # "label" or "enriched" for retrieval arms

    @property
    def effective_noise_var(self) -> float:
        return self.noise_var if STRATEGIES[self.strategy][1] else 0.0


@dataclass
class Setup:
    spec: ExperimentSpec
    world: World
    audio_encoder: ReferenceAudioEncoder
    text_encoder: ReferenceTextEncoder
    train_audio: np.ndarray
    train_labels: np.ndarray
    train_captions: list[str]
    val: EvalSet
    test: EvalSet
    caches: dict[str, EmbeddingCache]
    embeddings: np.ndarray
    trained: dict[tuple, SeparatorParams] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)


def make_eval_set(
    audio: np.ndarray, labels: np.ndarray, world: World, pairings: int, rng: np.random.Generator, prefix: str
) -> EvalSet:
    """Every clip as a target ``pairings`` times, each with a different-class interferer and a paraphrase query."""
    mixtures, targets, captions, ids = [], [], [], []
    for i in range(len(audio)):
        others = np.flatnonzero(labels != labels[i])
        queries = world.query_captions[world.specs[labels[i]].class_id]
        for p in range(pairings):
            j = int(rng.choice(others))
            mixtures.append(audio[i] + audio[j])
            targets.append(audio[i])
            captions.append(str(queries[int(rng.integers(len(queries)))]))
            ids.append(f"{prefix}{i:04d}-{p}")
    return EvalSet(np.array(mixtures), np.array(targets), captions, ids)


def build_setup(spec: ExperimentSpec) -> Setup:
    world = make_world(spec.world, seed=spec.seed)
    ae = ReferenceAudioEncoder(seed=spec.seed, cone=spec.cone)
    gap = GapModel.random(ae.dim, norm=spec.gap_norm, jitter_var=spec.jitter_var, seed=spec.seed)
    te = ReferenceTextEncoder(world.specs, ae, gap, seed=spec.seed, clip_len=spec.clip_len)

    pool = synth_dataset(world.specs, spec.clips_per_class, spec.clip_len, seed=spec.seed * 1000 + 1)
    n_val = max(1, round(spec.val_fraction * spec.clips_per_class))
    within = np.tile(np.arange(spec.clips_per_class), len(world.specs))
    is_val = within >= spec.clips_per_class - n_val
    tr = pool.subset(np.flatnonzero(~is_val))
    va = pool.subset(np.flatnonzero(is_val))
    te_ds = synth_dataset(world.specs, spec.test_clips_per_class, spec.clip_len, seed=spec.seed * 1000 + 2)

    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xE7A1]))
    val = make_eval_set(va.audio, va.labels, world, spec.pairings, rng, "val")
    test = make_eval_set(te_ds.audio, te_ds.labels, world, spec.pairings, rng, "test")
    # supervised annotations: one cache-corpus caption per training clip
    train_captions = []
    for k in tr.labels:
        pool_caps = world.cache_captions[world.specs[k].class_id]
        train_captions.append(str(pool_caps[int(rng.integers(len(pool_caps)))]))

    caches = {"label": build_cache(world.label_captions(), te), "enriched": build_cache(world.enriched_captions(), te)}
    return Setup(spec, world, ae, te, tr.audio, tr.labels, train_captions, val, test, caches, ae.encode_batch(tr.audio))


def _arm_key(setup: Setup, arm: Arm) -> tuple:
    digest = setup.caches[arm.cache].digest() if arm.cache else None
    return (arm.strategy, arm.effective_noise_var, digest)


def _arm_file(setup: Setup, arm: Arm) -> Path | None:
    if setup.spec.out_dir is None:
        return None
    key = json.dumps([setup.spec.setup_key(), *map(str, _arm_key(setup, arm))])
    return Path(setup.spec.out_dir) / "arms" / (hashlib.sha256(key.encode()).hexdigest()[:16] + ".sep")


def train_arm(setup: Setup, arm: Arm) -> SeparatorParams:
    """Train (or fetch the already-trained) model for one arm."""
    if STRATEGIES[arm.strategy][0] == "retrieval" and arm.cache is None:
        raise ConfigError(f"arm {arm.strategy!r} needs a cache")
    key = _arm_key(setup, arm)
    if key in setup.trained:
        return setup.trained[key]
    path = _arm_file(setup, arm)
    if path is not None and path.exists():
        ckpt = load_checkpoint(path)
        params = ckpt.exact_params.astype(np.dtype(setup.spec.base.dtype))
    else:
        config = replace(setup.spec.base, strategy=arm.strategy, noise_var=arm.noise_var, data_seed=setup.spec.seed,
                         model_seed=setup.spec.seed, noise_seed=setup.spec.seed)
        labels = [setup.world.specs[k].label for k in setup.train_labels]
        data = TrainData(
            setup.train_audio, setup.audio_encoder, setup.text_encoder,
            setup.caches[arm.cache] if arm.cache else None, setup.train_captions, labels, setup.val, setup.embeddings,
        )
        t0 = time.perf_counter()
        params, _ = train(config, data)
        setup.timings["/".join(map(str, key))] = time.perf_counter() - t0
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(path, params, config.steps, _zero_adam(params))
    setup.trained[key] = params
    return params


def _zero_adam(params: SeparatorParams):
    from .separator import AdamState

    return AdamState.zeros(params)


def _row(experiment: str, setup: Setup, arm: Arm, split: str, rep: EvalReport | None, status: str = "ok") -> dict:
    cache = setup.caches[arm.cache] if arm.cache else None
    return {
        "experiment": experiment,
        "world": setup.spec.world,
        "strategy": arm.strategy,
        "noise_var": repr(arm.effective_noise_var),
        "cache": arm.cache or "none",
        "cache_hash": cache.digest() if cache else "none",
        "seed": setup.spec.seed,
        "steps": setup.spec.base.steps,
        "split": split,
        "n_examples": len(rep.reports) if rep else 0,
        "sdri": f"{rep.mean_sdri:.6f}" if rep else "nan",
        "si_sdri": f"{rep.mean_si_sdri:.6f}" if rep else "nan",
        "status": status,
    }


def _run_arm(experiment: str, setup: Setup, arm: Arm, split: str) -> dict:
    evalset = setup.test if split == "test" else setup.val
    try:
        params = train_arm(setup, arm)
        return _row(experiment, setup, arm, split, evaluate(params, evalset, setup.text_encoder))
    except ConfigError:
        raise
    except Exception as exc:  # a failed arm becomes a marked row, the table stays usable
        log.exception("arm %s failed", arm)
        return _row(experiment, setup, arm, split, None, f"failed: {type(exc).__name__}: {exc}")


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=RESULT_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _emit(setup: Setup, name: str, rows: list[dict], extra: dict[str, str] | None = None) -> None:
    if setup.spec.out_dir is None:
        return
    out = Path(setup.spec.out_dir)
    atomic_write_text(out / f"{name}.csv", rows_to_csv(rows))
    for fname, text in (extra or {}).items():
        atomic_write_text(out / fname, text)
    manifest = {
        "experiment": name,
        "spec": json.loads(json.dumps(asdict(setup.spec), default=str)),
        "setup_key": setup.spec.setup_key(),
        "outputs": [f"{name}.csv", *(extra or {})],
        "train_seconds": setup.timings,
    }
    atomic_write_text(out / f"{name}.manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _arm_for(strategy: str, noise_var: float) -> Arm:
    cache = "enriched" if STRATEGIES[strategy][0] == "retrieval" else None
    return Arm(strategy, noise_var if STRATEGIES[strategy][1] else 0.0, cache)


def run_strategy_comparison(spec: ExperimentSpec, setup: Setup | None = None) -> list[dict]:
    """One model per strategy, same seeds and data; text-queried test metrics."""
    setup = setup or build_setup(spec)
    rows = [_run_arm("table1", setup, _arm_for(s, spec.noise_var), "test") for s in spec.strategies]
    _emit(setup, "table1", rows)
    return rows


def run_noise_sweep(spec: ExperimentSpec, setup: Setup | None = None) -> list[dict]:
    """Validation metrics over the noise grid for vanilla and retrieval training."""
    setup = setup or build_setup(spec)
    rows = []
    for base in spec.sweep_strategies:
        for eps in spec.noise_grid:
            strategy = base if eps == 0 else f"{base}-ni"
            rows.append(_run_arm("fig2", setup, _arm_for(strategy, eps), "val"))
    lines = ["# noise_var " + " ".join(f"{s}_si_sdri" for s in spec.sweep_strategies)]
    for eps in spec.noise_grid:
        vals = [r["si_sdri"] for r in rows if float(r["noise_var"]) == eps]
        lines.append(" ".join([repr(eps), *vals]))
    _emit(setup, "fig2", rows, {"fig2.dat": "\n".join(lines) + "\n"})
    return rows


def run_cache_ablation(
    spec: ExperimentSpec,
    setup: Setup | None = None,
    cache_files: dict[str, str] | None = None,
    noise_var: float = 0.0,
) -> list[dict]:
    """Retrieval training with the label-only and the enriched cache, paraphrase test queries.

    ``cache_files`` replaces the built caches with files on disk
    (keys ``label`` and ``enriched``).
    """
    setup = setup or build_setup(spec)
    if cache_files:
        for name, path in cache_files.items():
            if name not in ("label", "enriched"):
                raise ConfigError(f"unknown cache variant {name!r}")
            if not Path(path).exists():
                raise ConfigError(f"cache file not found: {path}")
            setup.caches[name] = load_cache(path, expected_dim=setup.audio_encoder.dim)
    strategy = "retrieval-ni" if noise_var > 0 else "retrieval"
    rows = [_run_arm("fig3", setup, Arm(strategy, noise_var, name), "test") for name in ("label", "enriched")]
    dat = "# cache si_sdri sdri\n" + "".join(f"{r['cache']} {r['si_sdri']} {r['sdri']}\n" for r in rows)
    _emit(setup, "fig3", rows, {"fig3.dat": dat})
    return rows


def metric(rows: Sequence[dict], **match) -> float:
    """Look up ``si_sdri`` of the unique row matching every ``key=value``."""
    hits = [r for r in rows if all(str(r[k]) == str(v) for k, v in match.items())]
    if len(hits) != 1:
        raise KeyError(f"{len(hits)} rows match {match}")
    return float(hits[0]["si_sdri"])
