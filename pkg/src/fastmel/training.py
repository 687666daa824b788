"""Losses, optimizer, schedule, training loops, and the distillation pipeline.

Training is batch-size-1 by default at desk scale: one optimizer step per
sample, with optional gradient accumulation over consecutive samples. The
learning rate follows the warmup-then-decay schedule
lr(step) = d^-0.5 * min(step^-0.5, step * warmup^-1.5) at every step.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, asdict, field

import numpy as np

from .duration import AttentionMatrix, align_attention, log_durations
from .errors import ConfigError, DataError, NumericError, ShapeError
from .model import FeedForwardTransformer, ModelConfig, TeacherLite
from .tensor import DropoutRng, Tensor, add, backward, mse, scale

log = logging.getLogger(__name__)

MIN_FOCUS = 0.05


@dataclass
class OptimizerConfig:
    # d_model_for_schedule is the schedule's calibration width, not the model
    # width: peak lr = ds^-0.5 * warmup^-0.5. The default gives peak 2e-3,
    # which batch-size-1 training tolerates; driving it from a 64-wide model
    # (peak 6.25e-3) collapses the features.
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    warmup_steps: int = 400
    d_model_for_schedule: int = 625

    def __post_init__(self):
        if not 0.0 < self.beta1 < 1.0 or not 0.0 < self.beta2 < 1.0:
            raise ConfigError(
                f"optimizer betas must be in (0, 1), got {self.beta1}, {self.beta2}"
            )
        if self.eps <= 0:
            raise ConfigError(f"optimizer.eps must be positive, got {self.eps}")
        if int(self.warmup_steps) != self.warmup_steps or self.warmup_steps < 1:
            raise ConfigError(f"optimizer.warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.d_model_for_schedule < 1:
            raise ConfigError(
                f"optimizer.d_model_for_schedule must be >= 1, got {self.d_model_for_schedule}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        return cls(**d)


@dataclass
class TrainingSample:
    """A (phonemes, mel) pair; durations are required for student training."""

    phonemes: list[int]
    target_mel: np.ndarray
    target_durations: list[int] | None = None
    id: str = ""

    def __post_init__(self):
        self.target_mel = np.asarray(self.target_mel, dtype=np.float64)
        if self.target_mel.ndim != 2:
            raise ShapeError(f"target mel must be m x mel_dim, got {self.target_mel.shape}")
        if self.target_durations is None:
            return
        if any(d < 0 for d in self.target_durations):
            raise DataError("target durations must be non-negative")
        if sum(self.target_durations) != self.target_mel.shape[0]:
            raise DataError(
                f"duration sum {sum(self.target_durations)} does not match "
                f"{self.target_mel.shape[0]} mel frames"
            )
        if len(self.target_durations) != len(self.phonemes):
            raise DataError(
                f"{len(self.target_durations)} durations for {len(self.phonemes)} phonemes"
            )


# ---------------------------------------------------------------------------
# losses and schedule


def mel_loss(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target))
    if pred.shape != target.shape:
        raise ShapeError(f"mel loss shapes disagree: {pred.shape} vs {target.shape}")
    return mse(pred, target)


def duration_loss(pred_log: Tensor, target_durations) -> Tensor:
    if pred_log.ndim != 1:
        raise ShapeError(f"duration predictions must be rank 1, got {pred_log.shape}")
    target = log_durations(target_durations)
    if pred_log.shape != target.shape:
        raise ShapeError(
            f"{pred_log.shape[0]} predictions for {target.shape[0]} target durations"
        )
    return mse(pred_log, Tensor(target))


def total_loss(sample: TrainingSample, model_output, lambda_duration: float = 1.0) -> Tensor:
    """mel loss + lambda * duration loss for a (mel_pred, log_d_pred) pair."""
    mel_pred, log_d_pred = model_output
    combined = mel_loss(mel_pred, sample.target_mel)
    if lambda_duration != 0.0:
        combined = add(combined,
                       scale(duration_loss(log_d_pred, sample.target_durations),
                             lambda_duration))
    return combined


def noam_lr(step: int, cfg: OptimizerConfig) -> float:
    if step < 1:
        raise ConfigError(f"schedule step must be >= 1, got {step}")
    d = float(cfg.d_model_for_schedule)
    w = float(cfg.warmup_steps)
    return d ** -0.5 * min(step ** -0.5, step * w ** -1.5)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, cfg: OptimizerConfig) -> None:
    """Standard bias-corrected Adam update, in place. Aborts on NaN gradients."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for '{name}'; aborting the step")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} for '{name}' of shape {p.data.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


# ---------------------------------------------------------------------------
# training loops


@dataclass
class StepRecord:
    step: int
    lr: float
    total: float
    mel: float
    duration: float


@dataclass
class TrainingResult:
    model: object
    optimizer_state: AdamState
    records: list[StepRecord]
    final_step: int
    seed: int
    aborted: bool = False
    abort_reason: str = ""


def write_metrics_csv(path, records: list[StepRecord]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "lr", "total_loss", "mel_loss", "duration_loss"])
        for r in records:
            writer.writerow([r.step, f"{r.lr:.12g}", f"{r.total:.12g}",
                             f"{r.mel:.12g}", f"{r.duration:.12g}"])


def _train_loop(model, params: dict[str, Tensor], loss_fn, dataset,
                optimizer_config: OptimizerConfig, steps: int, seed: int,
                batch_size: int, start_step: int, state: AdamState) -> TrainingResult:
    """Shared optimizer loop. loss_fn(sample, rng) -> (total, mel, duration) Tensors."""
    if not dataset:
        raise ConfigError("training needs a non-empty dataset")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order_rng = np.random.default_rng(seed)
    queue: list[int] = []
    records: list[StepRecord] = []
    sample_counter = 0

    for step in range(start_step + 1, start_step + steps + 1):
        lr = noam_lr(step, optimizer_config)
        grads: dict[str, np.ndarray] = {}
        tot = melv = durv = 0.0
        for _ in range(batch_size):
            if not queue:
                queue = list(order_rng.permutation(len(dataset)))
            sample = dataset[queue.pop()]
            sample_counter += 1
            rng = DropoutRng(seed, sample_counter)
            loss, mel_part, dur_part = loss_fn(sample, rng)
            if not np.isfinite(loss.item()):
                return TrainingResult(model, state, records, step - 1, seed,
                                      aborted=True,
                                      abort_reason=f"non-finite loss at step {step}")
            backward(loss)
            for name, p in params.items():
                if p.grad is not None:
                    acc = grads.setdefault(name, np.zeros_like(p.data))
                    acc += p.grad / batch_size
            tot += loss.item() / batch_size
            melv += mel_part.item() / batch_size
            durv += dur_part.item() / batch_size
        records.append(StepRecord(step, lr, tot, melv, durv))
        try:
            adam_step(params, grads, state, lr, optimizer_config)
        except NumericError as e:
            return TrainingResult(model, state, records, step - 1, seed,
                                  aborted=True, abort_reason=str(e))
    return TrainingResult(model, state, records, start_step + steps, seed)


def fit(dataset: list[TrainingSample], model_config: ModelConfig,
        optimizer_config: OptimizerConfig, steps: int, seed: int,
        lambda_duration: float = 1.0, batch_size: int = 1,
        model: FeedForwardTransformer | None = None,
        state: AdamState | None = None, start_step: int = 0) -> TrainingResult:
    """Train the parallel model on samples that carry target durations.

    Deterministic given the seed. ``model``/``state``/``start_step`` resume a
    previous run; by default a fresh model is initialized from the seed.
    """
    if any(s.target_durations is None for s in dataset):
        raise ConfigError("fit needs target durations on every sample")
    if model is None:
        model = FeedForwardTransformer(model_config, seed)
    if state is None:
        state = AdamState()
    params = model.parameters()

    def loss_fn(sample: TrainingSample, rng: DropoutRng):
        output = model.forward_train(sample.phonemes, sample.target_durations, rng)
        mel_part = mel_loss(output[0], sample.target_mel)
        dur_part = duration_loss(output[1], sample.target_durations)
        tot = add(mel_part, scale(dur_part, lambda_duration)) \
            if lambda_duration != 0.0 else mel_part
        return tot, mel_part, dur_part

    return _train_loop(model, params, loss_fn, dataset, optimizer_config,
                       steps, seed, batch_size, start_step, state)


def fit_teacher(dataset: list[TrainingSample], model_config: ModelConfig,
                optimizer_config: OptimizerConfig, steps: int, seed: int,
                batch_size: int = 1, model: TeacherLite | None = None,
                state: AdamState | None = None, start_step: int = 0) -> TrainingResult:
    """Train the autoregressive baseline with teacher forcing (mel MSE only)."""
    if model is None:
        model = TeacherLite(model_config, seed)
    if state is None:
        state = AdamState()
    params = model.parameters()

    def loss_fn(sample: TrainingSample, rng: DropoutRng):
        loss = model.teacher_forced_loss(sample.phonemes, sample.target_mel, rng)
        return loss, loss, Tensor(0.0)

    return _train_loop(model, params, loss_fn, dataset, optimizer_config,
                       steps, seed, batch_size, start_step, state)


# ---------------------------------------------------------------------------
# distillation


def eval_losses(model: FeedForwardTransformer, dataset: list[TrainingSample],
                lambda_duration: float = 1.0) -> tuple[float, float]:
    """(mel MSE, duration log-MSE) averaged over the dataset, dropout off."""
    mel_total = dur_total = 0.0
    for sample in dataset:
        output = model.forward_train(sample.phonemes, sample.target_durations, None)
        mel_total += mel_loss(output[0], sample.target_mel).item()
        dur_total += duration_loss(output[1], sample.target_durations).item()
    n = max(len(dataset), 1)
    return mel_total / n, dur_total / n


def extract_from_teacher(teacher: TeacherLite, tokens, target_mel: np.ndarray):
    """Teacher-forced pass -> per-head attention -> (report, heads, labels)."""
    _, weight_map = teacher.forced_pass(tokens, target_mel)
    labels = sorted(weight_map)
    heads = [AttentionMatrix(weight_map[label]) for label in labels]
    return align_attention(heads, labels), heads, labels


def distill_dataset(teacher: TeacherLite, corpus, min_focus: float = MIN_FOCUS
                    ) -> list[TrainingSample]:
    """Build student training pairs from the teacher.

    ``corpus`` is a sequence of (phoneme ids, ground-truth mel) pairs. For
    each: a teacher-forced pass yields attention for duration extraction, and
    a free-running generation of sum(durations) frames yields the target mel,
    so every emitted sample satisfies sum(d) == frame count by construction.
    Samples whose best focus rate falls below ``min_focus`` are skipped.
    """
    samples: list[TrainingSample] = []
    for i, (tokens, gt_mel) in enumerate(corpus):
        report, _, _ = extract_from_teacher(teacher, tokens, gt_mel)
        best_focus = report.per_head_focus[report.selected_head]
        if best_focus < min_focus:
            log.warning("skipping corpus item %d: best focus rate %.4f < %.2f",
                        i, best_focus, min_focus)
            continue
        total = sum(report.durations)
        generated = teacher.generate(tokens, total)
        samples.append(TrainingSample(
            phonemes=list(tokens),
            target_mel=generated,
            target_durations=report.durations,
            id=str(i),
        ))
    return samples
