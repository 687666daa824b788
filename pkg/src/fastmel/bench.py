"""Latency harness: one parallel pass vs m autoregressive steps.

Durations are fixed so both systems produce exactly the requested frame
count, isolating the architectural variable. Timings are the median over a
fixed number of repetitions after warmup runs; the instrumented pass counts
(1 vs m) are recorded alongside.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass

from .errors import ConfigError, ShapeError
from .length_regulator import regulate
from .model import FeedForwardTransformer, TeacherLite
from .tensor import no_grad


@dataclass
class BenchRecord:
    system: str  # "parallel" | "autoregressive"
    target_length: int
    wall_time: float  # median seconds over repetitions
    sequential_passes: int
    repetitions: int

    def __post_init__(self):
        if self.wall_time <= 0:
            raise ShapeError(f"wall_time must be positive, got {self.wall_time}")
        expected = 1 if self.system == "parallel" else self.target_length
        if self.sequential_passes != expected:
            raise ShapeError(
                f"{self.system} at m={self.target_length} recorded "
                f"{self.sequential_passes} sequential passes, expected {expected}"
            )


def even_durations(total_frames: int, n_phonemes: int) -> list[int]:
    """Spread total_frames over n_phonemes as evenly as possible."""
    base, rem = divmod(total_frames, n_phonemes)
    return [base + (1 if i < rem else 0) for i in range(n_phonemes)]


def check_matched_configs(student: FeedForwardTransformer, teacher: TeacherLite) -> None:
    s, t = student.config, teacher.config
    fields = ("d_model", "n_blocks_phoneme", "n_blocks_mel", "n_heads", "conv_filter")
    for f in fields:
        if getattr(s, f) != getattr(t, f):
            raise ConfigError(
                f"benchmark fairness: student.{f}={getattr(s, f)} but "
                f"teacher.{f}={getattr(t, f)} (pass allow_mismatch to override)"
            )


def _time_parallel(student: FeedForwardTransformer, tokens, m: int) -> tuple[float, int]:
    durations = even_durations(m, len(tokens))
    student.reset_counters()
    t0 = time.perf_counter()
    with no_grad():
        h = student.encode_phonemes(tokens)
        regulated = regulate(h, durations, 1.0)
        student.decode_mel(regulated.frames)
    elapsed = time.perf_counter() - t0
    return elapsed, student.decode_passes


def _time_autoregressive(teacher: TeacherLite, tokens, m: int) -> tuple[float, int]:
    teacher.reset_counters()
    t0 = time.perf_counter()
    teacher.generate(tokens, m)
    elapsed = time.perf_counter() - t0
    return elapsed, teacher.step_calls


def run_bench(student: FeedForwardTransformer, teacher: TeacherLite,
              lengths: list[int], reps: int = 5, warmup: int = 2,
              tokens=None, allow_mismatch: bool = False) -> list[BenchRecord]:
    if reps < 1:
        raise ConfigError(f"bench needs reps >= 1, got {reps}")
    if any(m < 1 for m in lengths):
        raise ConfigError(f"bench lengths must be >= 1, got {lengths}")
    if not allow_mismatch:
        check_matched_configs(student, teacher)
    if tokens is None:
        tokens = [i % student.config.vocab_size for i in range(16)]

    records = []
    for m in sorted(lengths):
        for system, timer, modelobj in (
            ("parallel", _time_parallel, student),
            ("autoregressive", _time_autoregressive, teacher),
        ):
            times = []
            passes = 0
            for rep in range(warmup + reps):
                elapsed, passes = timer(modelobj, tokens, m)
                if rep >= warmup:
                    times.append(elapsed)
            records.append(BenchRecord(
                system=system,
                target_length=m,
                wall_time=statistics.median(times),
                sequential_passes=passes,
                repetitions=reps,
            ))
    return records


def write_bench_csv(path, records: list[BenchRecord]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["system", "target_length", "wall_time",
                         "sequential_passes", "repetitions"])
        for r in records:
            writer.writerow([r.system, r.target_length, f"{r.wall_time:.9f}",
                             r.sequential_passes, r.repetitions])


def summarize(records: list[BenchRecord]) -> dict:
    """Per-length speedup = t_autoregressive / t_parallel."""
    par = {r.target_length: r.wall_time for r in records if r.system == "parallel"}
    ar = {r.target_length: r.wall_time for r in records if r.system == "autoregressive"}
    speedups = {m: ar[m] / par[m] for m in sorted(par) if m in ar}
    return {
        "lengths": sorted(par),
        "parallel_seconds": [par[m] for m in sorted(par)],
        "autoregressive_seconds": [ar[m] for m in sorted(ar)],
        "speedup": {str(m): s for m, s in speedups.items()},
    }
