"""Expand phoneme hidden states to mel-frame length according to durations.

Durations are plain lists of non-negative frame counts. The speed factor
alpha rescales them (rounding half away from zero) before expansion; word
breaks are additive edits on the durations of space tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor, gather_rows


def round_half_up(x: float) -> int:
    """Round half away from zero: 2.6 -> 3, 1.5 -> 2, 0.5 -> 1, 1.3 -> 1."""
    if x >= 0:
        return int(math.floor(x + 0.5))
    return int(math.ceil(x - 0.5))


def _check_durations(durations) -> list[int]:
    out = []
    for i, d in enumerate(durations):
        if int(d) != d or d < 0:
            raise DataError(f"duration at index {i} must be a non-negative integer, got {d!r}")
        out.append(int(d))
    return out


def scale_durations(durations, alpha: float) -> list[int]:
    """Rescale every duration by alpha, rounding half away from zero."""
    if alpha <= 0:
        raise ConfigError(f"speed factor alpha must be positive, got {alpha}")
    return [round_half_up(d * alpha) for d in _check_durations(durations)]


@dataclass
class RegulatedHidden:
    """Frame-level hidden states plus the phoneme each frame was copied from."""

    frames: Tensor
    source_index: list[int]


def regulate(h_pho: Tensor, durations, alpha: float = 1.0) -> RegulatedHidden:
    """Repeat phoneme hidden row i scale(d_i, alpha) times, in order.

    Output rows are exact copies; gradients flow back into each source row by
    summation over its copies. Zero scaled durations drop the phoneme.
    """
    if h_pho.ndim != 2:
        raise ShapeError(f"regulate needs hidden states of shape n x d, got {h_pho.shape}")
    durations = _check_durations(durations)
    if len(durations) != h_pho.shape[0]:
        raise ShapeError(
            f"duration count {len(durations)} does not match {h_pho.shape[0]} hidden rows"
        )
    scaled = scale_durations(durations, alpha)
    source_index: list[int] = []
    for i, d in enumerate(scaled):
        source_index.extend([i] * d)
    return RegulatedHidden(frames=gather_rows(h_pho, source_index), source_index=source_index)


def insert_break(durations, space_positions, extra_frames: int) -> list[int]:
    """Add extra_frames to the duration at each listed position.

    Callers are responsible for only passing positions of space/boundary
    tokens; this function just applies the additive edit.
    """
    if int(extra_frames) != extra_frames or extra_frames < 1:
        raise ConfigError(f"extra_frames must be a positive integer, got {extra_frames!r}")
    out = _check_durations(durations)
    for pos in space_positions:
        if not 0 <= pos < len(out):
            raise DataError(f"break position {pos} out of range for {len(out)} durations")
        out[pos] += int(extra_frames)
    return out
