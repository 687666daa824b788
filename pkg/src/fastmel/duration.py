"""Per-phoneme duration prediction and extraction from attention alignments.

The extractor turns a row-stochastic frame-to-phoneme attention matrix into
integer durations by counting, per phoneme, the frames whose attention argmax
lands on it. Head selection uses the focus rate: the mean over frames of the
per-row maximum weight, which is 1 for perfectly peaked (one-hot) alignments
and 1/T for uniform ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError
from .length_regulator import round_half_up
from .tensor import (
    DropoutRng,
    Tensor,
    conv1d_same,
    layer_norm,
    dropout,
    relu,
    reshape,
    matmul,
    add,
)

ROW_SUM_TOL = 1e-6


@dataclass
class AttentionMatrix:
    """S x T row-stochastic attention weights (frames x phonemes)."""

    weights: Tensor

    def __post_init__(self):
        if not isinstance(self.weights, Tensor):
            self.weights = Tensor(self.weights)
        w = self.weights.data
        if w.ndim != 2 or w.shape[0] == 0 or w.shape[1] == 0:
            raise ShapeError(f"attention matrix must be non-empty S x T, got shape {w.shape}")
        if w.min() < -ROW_SUM_TOL or w.max() > 1.0 + ROW_SUM_TOL:
            raise DataError("attention weights must lie in [0, 1]")
        sums = w.sum(axis=1)
        bad = np.abs(sums - 1.0) > ROW_SUM_TOL
        if bad.any():
            row = int(np.argmax(bad))
            raise DataError(f"attention row {row} sums to {sums[row]:.8f}, expected 1")

    @property
    def n_frames(self) -> int:
        return self.weights.shape[0]

    @property
    def n_phonemes(self) -> int:
        return self.weights.shape[1]


def focus_rate(a: AttentionMatrix) -> float:
    """Mean over rows of the row maximum; in [1/T, 1], 1 iff one-hot rows."""
    return float(a.weights.data.max(axis=1).mean())


def select_alignment_head(heads: list[AttentionMatrix]) -> int:
    """Index of the head with the largest focus rate (ties -> lowest index)."""
    if not heads:
        raise ConfigError("select_alignment_head needs at least one head")
    shape = heads[0].weights.shape
    for h in heads[1:]:
        if h.weights.shape != shape:
            raise ShapeError(f"attention heads disagree in shape: {shape} vs {h.weights.shape}")
    rates = [focus_rate(h) for h in heads]
    best = 0
    for i, r in enumerate(rates):
        if r > rates[best]:
            best = i
    return best


def extract_durations(a: AttentionMatrix) -> list[int]:
    """d_i = number of rows whose argmax column is i (ties -> lowest column)."""
    argmaxes = np.argmax(a.weights.data, axis=1)
    counts = np.bincount(argmaxes, minlength=a.n_phonemes)
    return [int(c) for c in counts]


@dataclass
class AlignmentReport:
    """Per-head focus rates, the chosen head, and the extracted durations."""

    per_head_focus: list[float]
    selected_head: int
    durations: list[int]
    head_labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        best = 0
        for i, r in enumerate(self.per_head_focus):
            if r > self.per_head_focus[best]:
                best = i
        if self.selected_head != best:
            raise DataError(
                f"selected head {self.selected_head} is not the focus argmax ({best})"
            )

    def to_dict(self) -> dict:
        d = {
            "per_head_focus": self.per_head_focus,
            "selected_head": self.selected_head,
            "durations": self.durations,
        }
        if self.head_labels:
            d["head_labels"] = self.head_labels
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AlignmentReport":
        return cls(
            per_head_focus=list(d["per_head_focus"]),
            selected_head=int(d["selected_head"]),
            durations=[int(x) for x in d["durations"]],
            head_labels=list(d.get("head_labels", [])),
        )


def align_attention(heads: list[AttentionMatrix], labels: list[str] | None = None) -> AlignmentReport:
    """Pick the most diagonal head and extract durations from it."""
    best = select_alignment_head(heads)
    return AlignmentReport(
        per_head_focus=[focus_rate(h) for h in heads],
        selected_head=best,
        durations=extract_durations(heads[best]),
        head_labels=list(labels) if labels else [],
    )


# ---------------------------------------------------------------------------
# log-domain conversions

def log_durations(durations) -> np.ndarray:
    """ln(d + 1) training targets; the +1 keeps zero durations finite."""
    arr = np.asarray(list(durations), dtype=np.float64)
    if arr.size and arr.min() < 0:
        raise DataError(f"durations must be non-negative, got min {arr.min()}")
    return np.log1p(arr)


def durations_from_log(log_d, alpha: float = 1.0) -> list[int]:
    """Invert the log-domain prediction: round_half_up(alpha*(exp(v)-1)), >= 0.

    Alpha scales the real-valued durations before the single rounding, so
    speed control does not round twice.
    """
    if alpha <= 0:
        raise ConfigError(f"speed factor alpha must be positive, got {alpha}")
    arr = log_d.data if isinstance(log_d, Tensor) else np.asarray(log_d, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError("log-domain durations contain NaN/Inf")
    return [max(0, round_half_up(alpha * v)) for v in np.expm1(arr).reshape(-1)]


# ---------------------------------------------------------------------------
# predictor


class DurationPredictor:
    """Two same-padded conv layers (relu -> layer norm -> dropout) + linear to 1.

    Sits on top of the phoneme-side encoder output and predicts log(d+1) per
    phoneme. With stop_gradient enabled the encoder input is detached, so the
    duration loss trains only the predictor itself.
    """

    def __init__(self, d_model: int, filter_size: int, kernel: int, rate: float,
                 stop_gradient: bool, rng: np.random.Generator, name: str = "duration_predictor"):
        self.rate = rate
        self.stop_gradient = stop_gradient
        self.name = name

        def conv_init(k, c_in, c_out):
            bound = math.sqrt(6.0 / (k * c_in + k * c_out))
            return Tensor(rng.uniform(-bound, bound, size=(k, c_in, c_out)), requires_grad=True)

        def lin_init(c_in, c_out):
            bound = math.sqrt(6.0 / (c_in + c_out))
            return Tensor(rng.uniform(-bound, bound, size=(c_in, c_out)), requires_grad=True)

        self.conv1_w = conv_init(kernel, d_model, filter_size)
        self.conv1_b = Tensor(np.zeros(filter_size), requires_grad=True)
        self.ln1_gamma = Tensor(np.ones(filter_size), requires_grad=True)
        self.ln1_beta = Tensor(np.zeros(filter_size), requires_grad=True)
        self.conv2_w = conv_init(kernel, filter_size, d_model)
        self.conv2_b = Tensor(np.zeros(d_model), requires_grad=True)
        self.ln2_gamma = Tensor(np.ones(d_model), requires_grad=True)
        self.ln2_beta = Tensor(np.zeros(d_model), requires_grad=True)
        self.out_w = lin_init(d_model, 1)
        self.out_b = Tensor(np.zeros(1), requires_grad=True)

    def named_parameters(self):
        yield f"{self.name}.conv1.w", self.conv1_w
        yield f"{self.name}.conv1.b", self.conv1_b
        yield f"{self.name}.ln1.gamma", self.ln1_gamma
        yield f"{self.name}.ln1.beta", self.ln1_beta
        yield f"{self.name}.conv2.w", self.conv2_w
        yield f"{self.name}.conv2.b", self.conv2_b
        yield f"{self.name}.ln2.gamma", self.ln2_gamma
        yield f"{self.name}.ln2.beta", self.ln2_beta
        yield f"{self.name}.out.w", self.out_w
        yield f"{self.name}.out.b", self.out_b

    def __call__(self, h_pho: Tensor, rng: DropoutRng | None = None) -> Tensor:
        """Log-domain duration per phoneme, shape [n]. rng=None means inference."""
        if h_pho.ndim != 2:
            raise ShapeError(f"duration predictor input must be n x d, got {h_pho.shape}")
        training = rng is not None
        h = h_pho.detach() if self.stop_gradient else h_pho
        h = layer_norm(relu(conv1d_same(h, self.conv1_w, self.conv1_b)),
                       self.ln1_gamma, self.ln1_beta)
        h = dropout(h, self.rate, rng.key(f"{self.name}.drop1") if training else 0, training)
        h = layer_norm(relu(conv1d_same(h, self.conv2_w, self.conv2_b)),
                       self.ln2_gamma, self.ln2_beta)
        h = dropout(h, self.rate, rng.key(f"{self.name}.drop2") if training else 0, training)
        out = add(matmul(h, self.out_w), self.out_b)
        return reshape(out, (h_pho.shape[0],))


def predict_log_durations(h_pho: Tensor, weights: DurationPredictor,
                          rng: DropoutRng | None = None) -> Tensor:
    return weights(h_pho, rng)
