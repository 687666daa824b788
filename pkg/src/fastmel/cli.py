"""Multi-command CLI: train-teacher, extract-durations, distill, train,
synthesize, bench.

Configs are JSON with optional "seed", "model", "optimizer", "train" and
"paths" sections; unknown fields are rejected by name before anything runs.
The FASTMEL_SEED environment variable overrides the config seed. Exit codes:
0 success, 2 usage/config, 3 data integrity, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import bench as bench_mod
from . import io_formats as iof
from . import training
from .errors import ConfigError, DataError, FastmelError, NumericError, ShapeError
from .model import ModelConfig

log = logging.getLogger(__name__)

_MODEL_FIELDS = {
    "vocab_size": int, "d_model": int, "n_blocks_phoneme": int, "n_blocks_mel": int,
    "n_heads": int, "conv_kernel": int, "conv_filter": int, "dp_filter": int,
    "mel_dim": int, "dropout": float, "duration_stop_gradient": bool,
}
_OPTIMIZER_FIELDS = {
    "beta1": float, "beta2": float, "eps": float,
    "warmup_steps": int, "d_model_for_schedule": int,
}
_TRAIN_FIELDS = {"steps": int, "lambda_duration": float, "batch_size": int}
_PATH_FIELDS = {"out_dir": str}


@dataclass
class RunConfig:
    seed: int
    model: ModelConfig
    optimizer: training.OptimizerConfig
    steps: int
    lambda_duration: float
    batch_size: int
    out_dir: str | None


def _check_section(section: str, values: dict, fields: dict) -> dict:
    out = {}
    for key, value in values.items():
        if key not in fields:
            raise ConfigError(f"config: unknown field '{section}.{key}'")
        want = fields[key]
        if want is bool:
            ok = isinstance(value, bool)
        elif want is int:
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif want is float:
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        else:
            ok = isinstance(value, str)
        if not ok:
            raise ConfigError(
                f"config: field '{section}.{key}' must be {want.__name__}, "
                f"got {type(value).__name__}"
            )
        out[key] = want(value) if want is not bool else value
    return out


def load_run_config(path: str | None, paper: bool = False) -> RunConfig:
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config: unparseable JSON in {path}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"config: top level of {path} must be an object")

    known = {"seed", "model", "optimizer", "train", "paths"}
    for key in raw:
        if key not in known:
            raise ConfigError(f"config: unknown field '{key}'")
    for section in ("model", "optimizer", "train", "paths"):
        if section in raw and not isinstance(raw[section], dict):
            raise ConfigError(f"config: field '{section}' must be an object")

    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"config: field 'seed' must be int, got {type(seed).__name__}")
    env_seed = os.environ.get("FASTMEL_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"FASTMEL_SEED must be an integer, got {env_seed!r}") from None

    base = ModelConfig.paper_preset().to_dict() if paper else ModelConfig().to_dict()
    base.update(_check_section("model", raw.get("model", {}), _MODEL_FIELDS))
    model = ModelConfig.from_dict(base)

    opt_values = _check_section("optimizer", raw.get("optimizer", {}), _OPTIMIZER_FIELDS)
    optimizer = training.OptimizerConfig(**opt_values)

    train_values = _check_section("train", raw.get("train", {}), _TRAIN_FIELDS)
    steps = train_values.get("steps", 1000)
    lam = train_values.get("lambda_duration", 1.0)
    batch = train_values.get("batch_size", 1)
    if steps < 1:
        raise ConfigError(f"config: field 'train.steps' must be >= 1, got {steps}")
    if batch < 1:
        raise ConfigError(f"config: field 'train.batch_size' must be >= 1, got {batch}")

    paths = _check_section("paths", raw.get("paths", {}), _PATH_FIELDS)
    return RunConfig(seed=seed, model=model, optimizer=optimizer, steps=steps,
                     lambda_duration=lam, batch_size=batch,
                     out_dir=paths.get("out_dir"))


def _resolve_out_dir(args, cfg: RunConfig | None = None) -> Path:
    out = getattr(args, "out_dir", None) or (cfg.out_dir if cfg else None)
    if out is None:
        raise ConfigError("an output directory is required (--out-dir or paths.out_dir)")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {path}")
    return p


def _load_corpus_pairs(manifest_path):
    rows = iof.load_manifest_samples(manifest_path)
    return [(entry.phoneme_ids, mel) for entry, mel, _ in rows], [entry for entry, _, _ in rows]


def _load_checkpoint_model(path, expected_kind: str):
    _require_file(path, f"{expected_kind} checkpoint")
    model, data = iof.load_model(path)
    if data.kind != expected_kind:
        raise ConfigError(
            f"{path} is a {data.kind} checkpoint; this command needs a {expected_kind}"
        )
    return model, data


# ---------------------------------------------------------------------------
# commands


def cmd_train_teacher(args) -> int:
    cfg = load_run_config(args.config, args.paper_config)
    _require_file(args.manifest, "manifest")
    out_dir = _resolve_out_dir(args, cfg)
    pairs, entries = _load_corpus_pairs(args.manifest)
    dataset = [training.TrainingSample(phonemes=t, target_mel=m, id=e.id)
               for (t, m), e in zip(pairs, entries)]
    steps = args.steps or cfg.steps
    print(f"training teacher: {len(dataset)} samples, {steps} steps, seed {cfg.seed}")
    result = training.fit_teacher(dataset, cfg.model, cfg.optimizer, steps, cfg.seed,
                                  batch_size=cfg.batch_size)
    training.write_metrics_csv(out_dir / "teacher_loss.csv", result.records)
    iof.save_model(out_dir / "teacher.ckpt", result.model, "teacher",
                   result.final_step, cfg.seed, cfg.optimizer, result.optimizer_state)
    if result.aborted:
        raise NumericError(f"teacher training aborted: {result.abort_reason}; "
                           f"last good checkpoint saved at step {result.final_step}")
    print(f"final loss {result.records[-1].total:.6f}; "
          f"wrote {out_dir / 'teacher.ckpt'} and teacher_loss.csv")
    return 0


def cmd_extract_durations(args) -> int:
    teacher, _ = _load_checkpoint_model(args.teacher, "teacher")
    _require_file(args.manifest, "manifest")
    out_dir = _resolve_out_dir(args)
    pairs, entries = _load_corpus_pairs(args.manifest)
    (out_dir / "durations").mkdir(exist_ok=True)

    report_samples = []
    kept_entries = []
    skipped = 0
    for (tokens, mel), entry in zip(pairs, entries):
        report, heads, labels = training.extract_from_teacher(teacher, tokens, mel)
        best = report.per_head_focus[report.selected_head]
        if best < training.MIN_FOCUS:
            log.warning("skipping sample %s: best focus rate %.4f", entry.id, best)
            skipped += 1
            report_samples.append({"id": entry.id, "skipped": True, **report.to_dict()})
            continue
        dur_rel = f"durations/{entry.id}.json"
        iof.write_durations_json(out_dir / dur_rel, report.durations,
                                 selected_head=report.head_labels[report.selected_head])
        if args.save_attention:
            att_dir = out_dir / "attention" / entry.id
            att_dir.mkdir(parents=True, exist_ok=True)
            for head, label in zip(heads, labels):
                iof.write_tensor(att_dir / f"head_{label}.fstn", head.weights)
        report_samples.append({"id": entry.id, "skipped": False, **report.to_dict()})
        kept_entries.append(iof.ManifestEntry(
            id=entry.id, phoneme_ids=entry.phoneme_ids,
            mel_path=str((Path(args.manifest).parent / entry.mel_path).resolve()),
            duration_path=dur_rel,
            attention_dir=f"attention/{entry.id}" if args.save_attention else None,
        ))
    iof.atomic_write_json(out_dir / "alignment_report.json",
                          {"samples": report_samples, "skipped_count": skipped})
    iof.write_manifest(out_dir / "manifest_with_durations.jsonl", kept_entries)
    print(f"extracted durations for {len(kept_entries)} samples "
          f"({skipped} skipped); report at {out_dir / 'alignment_report.json'}")
    return 0


def cmd_distill(args) -> int:
    teacher, _ = _load_checkpoint_model(args.teacher, "teacher")
    _require_file(args.manifest, "manifest")
    out_dir = _resolve_out_dir(args)
    pairs, entries = _load_corpus_pairs(args.manifest)
    samples = training.distill_dataset(teacher, pairs)
    (out_dir / "distilled").mkdir(exist_ok=True)
    new_entries = []
    for sample in samples:
        entry = entries[int(sample.id)]
        mel_rel = f"distilled/{entry.id}_mel.fstn"
        dur_rel = f"distilled/{entry.id}_durations.json"
        iof.write_tensor(out_dir / mel_rel, sample.target_mel)
        iof.write_durations_json(out_dir / dur_rel, sample.target_durations)
        new_entries.append(iof.ManifestEntry(
            id=entry.id, phoneme_ids=entry.phoneme_ids,
            mel_path=mel_rel, duration_path=dur_rel))
    iof.write_manifest(out_dir / "distilled.jsonl", new_entries)
    iof.atomic_write_json(out_dir / "distill_report.json", {
        "kept": len(new_entries),
        "skipped": len(entries) - len(new_entries),
    })
    print(f"distilled {len(new_entries)} samples "
          f"({len(entries) - len(new_entries)} skipped) -> {out_dir / 'distilled.jsonl'}")
    return 0


def cmd_train(args) -> int:
    _require_file(args.manifest, "manifest")
    rows = iof.load_manifest_samples(args.manifest, require_durations=True)
    dataset = [sample for _, _, sample in rows]

    if args.resume:
        model, data = _load_checkpoint_model(args.resume, "student")
        cfg = load_run_config(args.config, args.paper_config) if args.config else None
        seed = cfg.seed if cfg else data.seed
        optimizer = (cfg.optimizer if cfg else
                     training.OptimizerConfig.from_dict(data.optimizer_config))
        steps = args.steps or (cfg.steps if cfg else 1000)
        lam = cfg.lambda_duration if cfg else 1.0
        batch = cfg.batch_size if cfg else 1
        out_dir = _resolve_out_dir(args, cfg)
        state = iof.load_adam_state(data)
        state.t = data.step
        print(f"resuming student from step {data.step} for {steps} more steps")
        result = training.fit(dataset, model.config, optimizer, steps, seed,
                              lambda_duration=lam, batch_size=batch,
                              model=model, state=state, start_step=data.step)
    else:
        cfg = load_run_config(args.config, args.paper_config)
        out_dir = _resolve_out_dir(args, cfg)
        steps = args.steps or cfg.steps
        optimizer = cfg.optimizer
        seed = cfg.seed
        print(f"training student: {len(dataset)} samples, {steps} steps, seed {seed}")
        result = training.fit(dataset, cfg.model, optimizer, steps, seed,
                              lambda_duration=cfg.lambda_duration,
                              batch_size=cfg.batch_size)
    training.write_metrics_csv(out_dir / "student_loss.csv", result.records)
    iof.save_model(out_dir / "student.ckpt", result.model, "student",
                   result.final_step, result.seed, optimizer, result.optimizer_state)
    if result.aborted:
        raise NumericError(f"student training aborted: {result.abort_reason}; "
                           f"last good checkpoint saved at step {result.final_step}")
    mel_mse, dur_mse = training.eval_losses(result.model, dataset)
    print(f"final eval: mel MSE {mel_mse:.6f}, duration log-MSE {dur_mse:.6f}; "
          f"wrote {out_dir / 'student.ckpt'} and student_loss.csv")
    return 0


def _parse_breaks(specs) -> list[tuple[int, int]]:
    breaks = []
    for spec in specs or []:
        try:
            pos_s, frames_s = spec.split(":", 1)
            pos, frames = int(pos_s), int(frames_s)
        except ValueError:
            raise ConfigError(
                f"--break-at expects position:frames (e.g. 3:20), got {spec!r}"
            ) from None
        if frames < 1:
            raise ConfigError(f"--break-at frames must be >= 1, got {frames}")
        breaks.append((pos, frames))
    return breaks


def _read_phonemes(path, vocab_path) -> list[int]:
    p = _require_file(path, "phoneme file")
    try:
        obj = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: unparseable phoneme JSON: {e}") from e
    if isinstance(obj, dict) and "phoneme_ids" in obj:
        return [int(x) for x in obj["phoneme_ids"]]
    if isinstance(obj, dict) and "tokens" in obj:
        if vocab_path is None:
            raise ConfigError(f"{path} uses token strings; pass --vocab to map them")
        vocab = iof.load_vocab(_require_file(vocab_path, "vocabulary"))
        missing = [t for t in obj["tokens"] if t not in vocab]
        if missing:
            raise DataError(f"{path}: token {missing[0]!r} not in vocabulary")
        return [vocab[t] for t in obj["tokens"]]
    raise DataError(f"{path}: expected an object with 'phoneme_ids' or 'tokens'")


def cmd_synthesize(args) -> int:
    if args.alpha <= 0:
        raise ConfigError(f"--alpha must be positive, got {args.alpha}")
    model, _ = _load_checkpoint_model(args.ckpt, "student")
    tokens = _read_phonemes(args.phonemes, args.vocab)
    breaks = _parse_breaks(args.break_at)
    out_dir = _resolve_out_dir(args)
    mel, durations = model.synthesize(tokens, alpha=args.alpha, breaks=breaks)
    iof.write_tensor(out_dir / "mel.fstn", mel.frames)
    iof.write_durations_json(out_dir / "durations.json", durations,
                             alpha=args.alpha, total_frames=mel.n_frames,
                             breaks=[list(b) for b in breaks])
    print(f"synthesized {mel.n_frames} frames from {len(tokens)} phonemes "
          f"(alpha={args.alpha}); wrote {out_dir / 'mel.fstn'}")
    return 0


def cmd_bench(args) -> int:
    student, _ = _load_checkpoint_model(args.student, "student")
    teacher, _ = _load_checkpoint_model(args.teacher, "teacher")
    try:
        lengths = [int(x) for x in args.lengths.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--lengths must be comma-separated integers, got {args.lengths!r}") from None
    if not lengths:
        raise ConfigError("--lengths must name at least one target length")
    out_dir = _resolve_out_dir(args)
    records = bench_mod.run_bench(student, teacher, lengths, reps=args.reps,
                                  allow_mismatch=args.allow_config_mismatch)
    bench_mod.write_bench_csv(out_dir / "bench.csv", records)
    summary = bench_mod.summarize(records)
    iof.atomic_write_json(out_dir / "bench_summary.json", summary)
    for m, s in summary["speedup"].items():
        print(f"m={m}: speedup {s:.2f}x")
    print(f"wrote {out_dir / 'bench.csv'} and bench_summary.json")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fastmel",
        description="Parallel phoneme-to-mel synthesis: training, distillation, "
                    "synthesis, and latency benchmarking.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON run configuration")
            p.add_argument("--paper-config", action="store_true",
                           help="start from the full-scale model preset")
        p.add_argument("--out-dir", help="directory for outputs")

    p = sub.add_parser("train-teacher", help="train the autoregressive baseline")
    add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("extract-durations",
                       help="extract per-phoneme durations from teacher attention")
    add_common(p, config=False)
    p.add_argument("--teacher", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--save-attention", action="store_true",
                   help="also save per-head attention matrices")
    p.set_defaults(func=cmd_extract_durations)

    p = sub.add_parser("distill", help="generate student training data with the teacher")
    add_common(p, config=False)
    p.add_argument("--teacher", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("train", help="train the parallel student model")
    add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", help="student checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", help="phonemes -> mel-spectrogram")
    add_common(p, config=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--phonemes", required=True,
                   help="JSON file with 'phoneme_ids' (or 'tokens' plus --vocab)")
    p.add_argument("--alpha", type=float, default=1.0, help="speed factor")
    p.add_argument("--break-at", action="append", metavar="POS:FRAMES",
                   help="add FRAMES to the duration at POS (repeatable)")
    p.add_argument("--vocab", help="vocabulary file for token-string inputs")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("bench", help="latency: parallel pass vs per-frame steps")
    add_common(p, config=False)
    p.add_argument("--student", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--lengths", default="128,256,512")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--allow-config-mismatch", action="store_true")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except FastmelError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
