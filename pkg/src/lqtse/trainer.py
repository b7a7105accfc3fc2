"""Parallel-data-free training loop and text-queried evaluation.

Every random draw of step ``s`` comes from streams seeded by
``(data_seed, s)`` (batch indices and shuffle) and
``(noise_seed, s, slot)`` (condition noise of batch slot ``slot``), so the
state after step ``s`` depends only on the state before it. A run resumed
from a checkpoint therefore replays the uninterrupted run bit for bit.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .cache import EmbeddingCache
from .conditioning import STRATEGIES, StrategyConfig, condition_batch, condition_supervised
from .encoders import AudioEncoder, TextEncoder
from .errors import ConfigError, NonFiniteError
from .metrics import MetricReport, batch_loss_and_grad, compute_metrics
from .separator import AdamState, SeparatorParams, adam_step, backward, forward, init_params, load_checkpoint, save_checkpoint
from .signal import random_derangement

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    steps: int = 3000
    lr: float = 1e-3
    decay: float = 0.32
    milestones: tuple[int, ...] | None = None  # None: 60% and 85% of the budget
    strategy: str = "supervised"
    noise_var: float = 1e-2
    data_seed: int = 0
    model_seed: int = 0
    noise_seed: int = 0
    val_every: int = 200
    patience: int = 0  # validation evals without improvement before stopping; 0 disables
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0 < self.decay <= 1:
            raise ConfigError(f"decay must be in (0, 1], got {self.decay}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {sorted(STRATEGIES)}")
        if self.noise_var < 0:
            raise ConfigError(f"noise_var must be >= 0, got {self.noise_var}")
        m = tuple(self.milestones or ())
        if any(b <= a for a, b in zip(m, m[1:])):
            raise ConfigError(f"milestones must be strictly ascending, got {m}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def resolved_milestones(self) -> tuple[int, ...]:
        if self.milestones is None:
            return (int(0.6 * self.steps), int(0.85 * self.steps))
        return tuple(self.milestones)


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Initial rate times ``decay`` for every milestone already reached."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    passed = sum(1 for m in config.resolved_milestones if m <= step)
    return config.lr * config.decay**passed


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------


@dataclass
class EvalSet:
    """Fixed mixtures with the caption used to query each target.

    A caption of ``None`` marks an example without a query; evaluation
    skips it and counts it.
    """

    mixtures: np.ndarray  # (n, N)
    targets: np.ndarray  # (n, N)
    captions: list[str | None]
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.ids:
            self.ids = [f"ex{i:05d}" for i in range(len(self.captions))]

    def __len__(self) -> int:
        return len(self.captions)


@dataclass
class TrainData:
    """Everything the loop reads besides the config.

    ``captions`` (one annotation per clip) is only needed by the supervised
    strategy and ``labels`` (one class label per clip) by the weak-label one.
    """

    audio: np.ndarray  # (K, N)
    audio_encoder: AudioEncoder
    text_encoder: TextEncoder | None = None
    cache: EmbeddingCache | None = None
    captions: Sequence[str] | None = None
    labels: Sequence[str] | None = None
    val: EvalSet | None = None
    audio_embeddings: np.ndarray | None = None

    def embeddings(self) -> np.ndarray:
        """Audio encoder output per clip, computed once (the encoder is frozen)."""
        if self.audio_embeddings is None:
            from .signal import Waveform

            enc = self.audio_encoder
            batch = getattr(enc, "encode_batch", None)
            if batch is not None:
                self.audio_embeddings = batch(self.audio)
            else:
                self.audio_embeddings = np.stack([enc.encode_audio(Waveform(a)) for a in self.audio])
        return self.audio_embeddings


@dataclass
class StepRecord:
    step: int
    loss: float
    lr: float
    strategy: str
    noise_var: float
    grad_norm: float
    clips: tuple[int, ...]
    retrieved: tuple[int | None, ...]


@dataclass
class TrainLog:
    records: list[StepRecord] = field(default_factory=list)
    validation: list[tuple[int, float, float]] = field(default_factory=list)  # (step, sdri, si_sdri)
    stopped_early_at: int | None = None

    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "lr", "strategy", "noise_var", "grad_norm", "clips", "retrieved"])
        for r in self.records:
            retrieved = ";".join("none" if i is None else str(i) for i in r.retrieved)
            w.writerow([
                r.step, repr(r.loss), repr(r.lr), r.strategy, repr(r.noise_var), repr(r.grad_norm),
                ";".join(map(str, r.clips)), retrieved,
            ])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _strategy_config(config: TrainConfig, data: TrainData) -> StrategyConfig:
    is_retrieval = STRATEGIES[config.strategy][0] == "retrieval"
    if is_retrieval and data.cache is None:
        raise ConfigError(f"strategy {config.strategy!r} needs an embedding cache")
    return StrategyConfig(config.strategy, config.noise_var, data.cache if is_retrieval else None)


def sample_batch(config: TrainConfig, step: int, n_clips: int) -> tuple[np.ndarray, np.ndarray]:
    """Clip indices (with replacement) and the derangement pairing them up."""
    rng = np.random.default_rng(np.random.SeedSequence([config.data_seed, 0xBA7C4, step]))
    idx = rng.integers(0, n_clips, size=config.batch_size)
    perm = random_derangement(config.batch_size, rng)
    return idx, perm


def noise_streams(config: TrainConfig, step: int) -> list[np.random.Generator]:
    return [
        np.random.default_rng(np.random.SeedSequence([config.noise_seed, 0x7015E, step, slot]))
        for slot in range(config.batch_size)
    ]


@dataclass
class TrainState:
    params: SeparatorParams
    adam: AdamState
    step: int = 0


def train_step(state: TrainState, config: TrainConfig, data: TrainData, strat: StrategyConfig) -> StepRecord:
    """Execute one iteration in place and return its log record."""
    step = state.step
    idx, perm = sample_batch(config, step, data.audio.shape[0])
    dtype = state.params.dtype
    targets = data.audio[idx]
    mixtures = (targets + targets[perm]).astype(dtype)
    query = data.embeddings()[idx]
    caps = [data.captions[i] for i in idx] if config.strategy == "supervised" and data.captions is not None else None
    if config.strategy == "weak" and data.labels is not None:
        caps = [data.labels[i] for i in idx]
    cond, picked = condition_batch(strat, query, noise_streams(config, step), caps, data.text_encoder)

    est, trace = forward(state.params, mixtures, cond)
    losses, grad = batch_loss_and_grad(est, targets)
    loss = float(np.mean(losses))
    if not math.isfinite(loss):
        raise NonFiniteError("non-finite loss", step=step, strategy=config.strategy, clips=idx.tolist())
    grads, _ = backward(state.params, trace, grad / config.batch_size)
    grad_norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.arrays().values()))
    lr = lr_schedule(step, config)
    try:
        state.params, state.adam = adam_step(state.params, grads, state.adam, lr)
    except NonFiniteError as exc:
        raise NonFiniteError(str(exc), step=step, strategy=config.strategy) from exc
    state.step += 1
    return StepRecord(step, loss, lr, config.strategy, strat.effective_noise_var, grad_norm, tuple(idx.tolist()), tuple(picked))


def initial_state(config: TrainConfig) -> TrainState:
    params = init_params(config.model_seed, dtype=np.dtype(config.dtype))
    return TrainState(params, AdamState.zeros(params), 0)


def resume_state(path: str | os.PathLike, config: TrainConfig) -> TrainState:
    ckpt = load_checkpoint(path)
    if ckpt.exact_params is None:
        raise ConfigError(f"{path} has no resume block")
    dtype = np.dtype(config.dtype)
    adam = AdamState(ckpt.adam.m.astype(dtype), ckpt.adam.v.astype(dtype), ckpt.adam.t)
    return TrainState(ckpt.exact_params.astype(dtype), adam, ckpt.step)


def train(
    config: TrainConfig,
    data: TrainData,
    state: TrainState | None = None,
    log_stream: io.TextIOBase | None = None,
) -> tuple[SeparatorParams, TrainLog]:
    """Run the loop until ``config.steps`` (or early stop); returns final params and the log.

    Passing ``state`` (e.g. from :func:`resume_state`) continues a run.
    """
    if data.audio.shape[0] < config.batch_size:
        raise ConfigError(f"dataset has {data.audio.shape[0]} clips, fewer than batch size {config.batch_size}")
    strat = _strategy_config(config, data)
    state = state if state is not None else initial_state(config)
    tlog = TrainLog()
    best, stale = -np.inf, 0
    if log_stream is not None:
        log_stream.write(TrainLog().to_csv())
    while state.step < config.steps:
        rec = train_step(state, config, data, strat)
        tlog.records.append(rec)
        if log_stream is not None:
            log_stream.write(TrainLog([rec]).to_csv().split("\n", 1)[1])
        done = state.step
        if config.checkpoint_every and config.checkpoint_path and done % config.checkpoint_every == 0:
            save_checkpoint(config.checkpoint_path, state.params, done, state.adam)
        if config.val_every and data.val is not None and done % config.val_every == 0:
            rep = evaluate(state.params, data.val, data.text_encoder)
            tlog.validation.append((done, rep.mean_sdri, rep.mean_si_sdri))
            log.info("step %d loss %.3f val SI-SDRi %.3f", done, rec.loss, rep.mean_si_sdri)
            if rep.mean_si_sdri > best:
                best, stale = rep.mean_si_sdri, 0
            else:
                stale += 1
                if config.patience and stale >= config.patience:
                    tlog.stopped_early_at = done
                    break
    return state.params, tlog


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    ids: list[str]
    reports: list[MetricReport]
    n_skipped: int = 0

    @property
    def mean_sdri(self) -> float:
        return float(np.mean([r.sdri_db for r in self.reports])) if self.reports else float("nan")

    @property
    def mean_si_sdri(self) -> float:
        return float(np.mean([r.si_sdri_db for r in self.reports])) if self.reports else float("nan")

    def to_csv(self) -> str:
        from .metrics import report_rows

        return report_rows(zip(self.ids, self.reports))


def evaluate(
    params: SeparatorParams,
    testset: EvalSet,
    text_encoder: TextEncoder,
    batch: int = 32,
    estimates: np.ndarray | None = None,
) -> EvalReport:
    """Score text-queried extraction on every example that has a caption.

    The condition always comes from :func:`condition_supervised`; audio
    embeddings and caches are not reachable from here. ``estimates``
    bypasses the separator (oracle and identity baselines).
    """
    keep = [i for i, c in enumerate(testset.captions) if c]
    skipped = len(testset) - len(keep)
    if skipped:
        log.warning("skipping %d evaluation examples without a caption", skipped)
    reports: list[MetricReport] = []
    for start in range(0, len(keep), batch):
        rows = keep[start:start + batch]
        if estimates is None:
            cond = np.stack([condition_supervised(testset.captions[i], text_encoder).values for i in rows])
            est, _ = forward(params, testset.mixtures[rows], cond)
        else:
            est = estimates[rows]
        for j, i in enumerate(rows):
            reports.append(compute_metrics(est[j], testset.mixtures[i], testset.targets[i]))
    return EvalReport([testset.ids[i] for i in keep], reports, skipped)


def with_steps(config: TrainConfig, steps: int) -> TrainConfig:
    """Copy of ``config`` with a new budget but the same milestones."""
    return replace(config, steps=steps, milestones=config.resolved_milestones)
