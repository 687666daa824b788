"""Procedural toy corpora for overfit and pipeline runs.

Each phoneme id maps to a fixed smooth 80-ish-dim pattern and a fixed
duration (1 + id % 4 frames); the target mel is the pattern repeated per
frame plus a small global-position wiggle. Both mappings are exactly
recoverable from the model inputs, so a desk-scale model can drive the
losses near zero.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from .io_formats import ManifestEntry, write_durations_json, write_manifest, write_tensor
from .training import TrainingSample

WIGGLE = 0.05


def phoneme_pattern(token: int, mel_dim: int) -> np.ndarray:
    """Deterministic per-token frame pattern, bounded to about [-1, 1]."""
    u = np.linspace(0.0, 1.0, mel_dim)
    return (0.6 * np.sin(np.pi * (1 + token % 7) * u)
            + 0.3 * np.cos(2.0 * np.pi * (0.37 * token + u)))


def procedural_duration(token: int) -> int:
    return 1 + token % 4


def sample_from_tokens(tokens, mel_dim: int, sample_id: str = "") -> TrainingSample:
    tokens = [int(t) for t in tokens]
    durations = [procedural_duration(t) for t in tokens]
    frames = []
    t_global = 0
    for tok, d in zip(tokens, durations):
        base = phoneme_pattern(tok, mel_dim)
        for _ in range(d):
            wiggle = WIGGLE * np.sin(0.5 * t_global + np.pi * np.linspace(0, 1, mel_dim))
            frames.append(base + wiggle)
            t_global += 1
    return TrainingSample(phonemes=tokens, target_mel=np.array(frames),
                          target_durations=durations, id=sample_id)


def make_corpus(n_samples: int = 32, min_len: int = 8, max_len: int = 16,
                vocab_size: int = 32, mel_dim: int = 80, seed: int = 0
                ) -> list[TrainingSample]:
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n_samples):
        n = int(rng.integers(min_len, max_len + 1))
        tokens = rng.integers(0, vocab_size, size=n).tolist()
        samples.append(sample_from_tokens(tokens, mel_dim, sample_id=f"s{i:03d}"))
    return samples


def write_corpus(samples: list[TrainingSample], out_dir,
                 with_durations: bool = True) -> Path:
    """Write mel/duration files plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "mels").mkdir(parents=True, exist_ok=True)
    if with_durations:
        (out_dir / "durations").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        mel_rel = f"mels/{s.id}.fstn"
        write_tensor(out_dir / mel_rel, s.target_mel)
        dur_rel = None
        if with_durations:
            dur_rel = f"durations/{s.id}.json"
            write_durations_json(out_dir / dur_rel, s.target_durations)
        entries.append(ManifestEntry(id=s.id, phoneme_ids=s.phonemes,
                                     mel_path=mel_rel, duration_path=dur_rel))
    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, entries)
    return manifest


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        description="Generate a procedural toy corpus and manifest")
    parser.add_argument("--out-dir", required=True)
    parser.add_argument("--samples", type=int, default=32)
    parser.add_argument("--min-len", type=int, default=8)
    parser.add_argument("--max-len", type=int, default=16)
    parser.add_argument("--vocab-size", type=int, default=32)
    parser.add_argument("--mel-dim", type=int, default=80)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--no-durations", action="store_true",
                        help="omit gold duration files (forces the extract step)")
    args = parser.parse_args(argv)
    samples = make_corpus(args.samples, args.min_len, args.max_len,
                          args.vocab_size, args.mel_dim, args.seed)
    manifest = write_corpus(samples, args.out_dir, with_durations=not args.no_durations)
    print(f"wrote {len(samples)} samples; manifest at {manifest}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
