"""Command-line front end.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure.
Every file the tool produces is written to a temp name and renamed into
place. Relative output paths of ``exp`` default to ``$LQTSE_OUTPUT_ROOT``.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .cache import build_cache, load_cache, retrieve_topk, save_cache
from .conditioning import STRATEGIES
from .encoders import GapModel, PrecomputedEncoder, ReferenceAudioEncoder, ReferenceTextEncoder
from .errors import LqtseError
from .experiments import (
    ExperimentSpec,
    atomic_write_text,
    build_setup,
    output_root,
    rows_to_csv,
    run_cache_ablation,
    run_noise_sweep,
    run_strategy_comparison,
)
from .metrics import compute_metrics, report_rows
from .separator import load_checkpoint, save_checkpoint
from .synth import WORLDS, make_world, read_wav, synth_dataset, write_dataset
from .trainer import TrainConfig, TrainData, evaluate, initial_state, resume_state, train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("lqtse")


class UsageError(LqtseError, ValueError):
    pass


# ---------------------------------------------------------------------------
# key=value configuration
# ---------------------------------------------------------------------------

def _tuple_of(kind):
    return lambda text: tuple(kind(v) for v in text.split(",") if v.strip())


_TRAIN_TYPES = {
    "batch_size": int, "steps": int, "lr": float, "decay": float, "milestones": _tuple_of(int),
    "strategy": str, "noise_var": float, "data_seed": int, "model_seed": int, "noise_seed": int,
    "val_every": int, "patience": int, "checkpoint_every": int, "checkpoint_path": str, "dtype": str,
}
_SPEC_TYPES = {
    "world": str, "seed": int, "gap_norm": float, "jitter_var": float, "cone": float, "clips_per_class": int,
    "test_clips_per_class": int, "val_fraction": float, "pairings": int, "clip_len": int,
    "strategies": _tuple_of(str), "noise_grid": _tuple_of(float), "sweep_strategies": _tuple_of(str),
    "out_dir": str,
}
assert set(_TRAIN_TYPES) == {f.name for f in fields(TrainConfig)}


def parse_config(text: str, source: str = "<config>") -> dict[str, object]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    out: dict[str, object] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{n}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        kind = _TRAIN_TYPES.get(key) or _SPEC_TYPES.get(key)
        if kind is None:
            raise UsageError(f"{source}:{n}: unknown key {key!r}")
        try:
            out[key] = kind(value)
        except ValueError as exc:
            raise UsageError(f"{source}:{n}: bad value for {key}: {exc}") from None
    return out


def _load_config(path: str | None) -> dict[str, object]:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {path}")
    return parse_config(p.read_text(encoding="utf-8"), str(p))


def build_spec(values: dict[str, object], **overrides) -> ExperimentSpec:
    values = {**values, **{k: v for k, v in overrides.items() if v is not None}}
    train_kw = {k: v for k, v in values.items() if k in _TRAIN_TYPES}
    spec_kw = {k: v for k, v in values.items() if k in _SPEC_TYPES}
    base = TrainConfig(**{"val_every": 0, **train_kw})
    return ExperimentSpec(base=base, **spec_kw)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _text_encoder(args) -> object:
    if getattr(args, "embeddings", None):
        return PrecomputedEncoder(args.embeddings)
    world = make_world(args.world, seed=args.seed)
    ae = ReferenceAudioEncoder(seed=args.seed, cone=args.cone)
    return ReferenceTextEncoder(world.specs, ae, GapModel.random(ae.dim, args.gap_norm, args.jitter_var, args.seed), seed=args.seed)


def cmd_cache_build(args) -> int:
    path = Path(args.captions)
    if not path.exists():
        raise UsageError(f"caption file not found: {path}")
    captions = [c for c in path.read_text(encoding="utf-8").splitlines() if c.strip()]
    cache = build_cache(captions, _text_encoder(args))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_cache(cache, args.out)
    print(f"wrote {len(cache)} x {cache.dim} cache to {args.out} (sha256 {cache.digest()})")
    return EXIT_OK


def cmd_cache_query(args) -> int:
    cache = load_cache(args.cache)
    if (args.text is None) == (args.audio is None):
        raise UsageError("give exactly one of --text or --audio")
    if args.text is not None:
        query = _text_encoder(args).encode_text(args.text)
    elif getattr(args, "embeddings", None):
        query = PrecomputedEncoder(args.embeddings).encode_audio(read_wav(args.audio))
    else:
        query = ReferenceAudioEncoder(seed=args.seed, cone=args.cone).encode_audio(read_wav(args.audio))
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["index", "caption", "similarity"])
    for i, sim in retrieve_topk(cache, query, args.topk):
        w.writerow([i, cache.captions[i], f"{sim:.6f}"])
    return EXIT_OK


def cmd_data_synth(args) -> int:
    world = make_world(args.world, seed=args.seed)
    ds = synth_dataset(world.specs, args.clips_per_class, args.clip_len, seed=args.seed)
    manifest = write_dataset(ds, args.out)
    atomic_write_text(Path(args.out) / "captions.txt", "\n".join(world.enriched_captions()) + "\n")
    print(f"wrote {len(ds)} clips and {manifest}")
    return EXIT_OK


def _train_inputs(spec: ExperimentSpec, strategy: str, cache_path: str | None):
    setup = build_setup(spec)
    cache = None
    if strategy.startswith("retrieval"):
        cache = load_cache(cache_path, setup.audio_encoder.dim) if cache_path else setup.caches["enriched"]
    labels = [setup.world.specs[k].label for k in setup.train_labels]
    data = TrainData(setup.train_audio, setup.audio_encoder, setup.text_encoder, cache, setup.train_captions, labels,
                     setup.val, setup.embeddings)
    return setup, data


def cmd_train(args) -> int:
    values = _load_config(args.config)
    spec = build_spec(values, strategy=args.strategy, noise_var=args.noise_var, steps=args.steps)
    config = spec.base
    if args.out:
        config = replace(config, checkpoint_path=args.out)
    if not config.checkpoint_path:
        raise UsageError("no output checkpoint: pass --out or set checkpoint_path in the config")
    config = replace(config, val_every=values.get("val_every", 200))
    _, data = _train_inputs(spec, config.strategy, args.cache)
    state = resume_state(args.resume, config) if args.resume else initial_state(config)
    log_path = Path(args.log) if args.log else Path(config.checkpoint_path).with_suffix(".log.csv")
    buf = io.StringIO()
    _, tlog = train(config, data, state=state, log_stream=buf)
    save_checkpoint(config.checkpoint_path, state.params, state.step, state.adam)
    atomic_write_text(log_path, buf.getvalue())
    if tlog.validation:
        atomic_write_text(log_path.with_name(log_path.stem + ".val.csv"),
                          "step,sdri,si_sdri\n" + "".join(f"{s},{a:.6f},{b:.6f}\n" for s, a, b in tlog.validation))
    print(f"trained to step {state.step} ({config.strategy}); checkpoint {config.checkpoint_path}, log {log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    spec = build_spec(_load_config(args.config))
    setup = build_setup(spec)
    ckpt = load_checkpoint(args.checkpoint)
    params = (ckpt.exact_params or ckpt.params).astype(np.dtype(spec.base.dtype))
    evalset = setup.test if args.split == "test" else setup.val
    rep = evaluate(params, evalset, setup.text_encoder)
    out = rep.to_csv()
    if args.out:
        atomic_write_text(args.out, out)
    else:
        sys.stdout.write(out)
    print(f"mean SDRi {rep.mean_sdri:.3f} dB, mean SI-SDRi {rep.mean_si_sdri:.3f} dB over {len(rep.reports)} examples "
          f"({rep.n_skipped} skipped)", file=sys.stderr)
    return EXIT_OK


def cmd_exp(args) -> int:
    values = _load_config(args.config)
    out_dir = args.out or values.get("out_dir") or str(output_root() / args.which)
    spec = build_spec(values, out_dir=out_dir, steps=args.steps)
    if args.which == "table1":
        rows = run_strategy_comparison(spec)
    elif args.which == "fig2":
        rows = run_noise_sweep(spec)
    else:
        files = {k: v for k, v in (("label", args.label_cache), ("enriched", args.enriched_cache)) if v}
        rows = run_cache_ablation(spec, cache_files=files or None, noise_var=args.noise_var or 0.0)
    sys.stdout.write(rows_to_csv(rows))
    failed = [r for r in rows if r["status"] != "ok"]
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_metrics(args) -> int:
    est, mix, ref = (read_wav(p) for p in (args.est, args.mix, args.ref))
    rep = compute_metrics(est, mix, ref)
    text = report_rows([(Path(args.est).stem, rep)])
    sys.stdout.write(text if args.header else text.split("\n", 1)[1])
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_encoder_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--world", choices=WORLDS, default="adjacent", help="synthetic world of the reference encoders")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gap-norm", type=float, default=0.5)
    p.add_argument("--jitter-var", type=float, default=0.01)
    p.add_argument("--cone", type=float, default=0.6, help="shared-direction strength of the reference embedding space")
    p.add_argument("--embeddings", help="EMB1 file of precomputed embeddings instead of the reference encoders")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lqtse", description="Language-queried target sound extraction toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    cache = sub.add_parser("cache", help="build or query a text-embedding cache").add_subparsers(dest="action", required=True)
    p = cache.add_parser("build", help="encode one caption per line into a cache file")
    p.add_argument("--captions", required=True)
    p.add_argument("--out", required=True)
    _add_encoder_flags(p)
    p.set_defaults(func=cmd_cache_build)
    p = cache.add_parser("query", help="top-k cache rows for a text or audio query")
    p.add_argument("--cache", required=True)
    p.add_argument("--text")
    p.add_argument("--audio")
    p.add_argument("--topk", type=int, default=5)
    _add_encoder_flags(p)
    p.set_defaults(func=cmd_cache_query)

    data = sub.add_parser("data", help="synthetic data").add_subparsers(dest="action", required=True)
    p = data.add_parser("synth", help="render a synthetic world to WAV files and a manifest")
    p.add_argument("--world", choices=WORLDS, default="adjacent")
    p.add_argument("--clips-per-class", type=int, default=20)
    p.add_argument("--clip-len", type=int, default=16000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_data_synth)

    p = sub.add_parser("train", help="train one separator")
    p.add_argument("--config", help="key = value file (training and world keys)")
    p.add_argument("--strategy", choices=sorted(STRATEGIES))
    p.add_argument("--noise-var", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--cache", help="cache file for retrieval strategies (default: the world's enriched cache)")
    p.add_argument("--resume", help="checkpoint with a resume block to continue from")
    p.add_argument("--out", help="output checkpoint path")
    p.add_argument("--log", help="training log CSV path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="text-queried evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--split", choices=("test", "val"), default="test")
    p.add_argument("--out", help="per-example CSV (default: stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("exp", help="run an experiment harness")
    p.add_argument("which", choices=("table1", "fig2", "fig3"))
    p.add_argument("--config")
    p.add_argument("--steps", type=int)
    p.add_argument("--out", help="output directory (default: $LQTSE_OUTPUT_ROOT/<which>)")
    p.add_argument("--label-cache", help="fig3: label-only cache file")
    p.add_argument("--enriched-cache", help="fig3: enriched cache file")
    p.add_argument("--noise-var", type=float, help="fig3: retrieval noise variance (default 0)")
    p.set_defaults(func=cmd_exp)

    p = sub.add_parser("metrics", help="SDR/SI-SDR of an estimate WAV")
    p.add_argument("--est", required=True)
    p.add_argument("--mix", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--header", action="store_true", help="also print the CSV header")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
