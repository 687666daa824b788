"""Parallel phoneme-to-mel-spectrogram synthesis at desk scale."""

from .errors import (
    ConfigError,
    DataError,
    FastmelError,
    FormatError,
    IntegrityError,
    NumericError,
    ShapeError,
)
from .tensor import GradTape, Tensor, backward, grad_check, no_grad
from .length_regulator import RegulatedHidden, insert_break, regulate, scale_durations
from .duration import (
    AlignmentReport,
    AttentionMatrix,
    DurationPredictor,
    durations_from_log,
    extract_durations,
    focus_rate,
    select_alignment_head,
)
from .model import (
    FeedForwardTransformer,
    MelSpectrogram,
    ModelConfig,
    TeacherLite,
    positional_encoding,
)
from .training import (
    OptimizerConfig,
    TrainingSample,
    adam_step,
    distill_dataset,
    duration_loss,
    fit,
    fit_teacher,
    mel_loss,
    noam_lr,
    total_loss,
)
from .bench import BenchRecord, run_bench

__version__ = "0.1.0"

__all__ = [
    "AlignmentReport",
    "AttentionMatrix",
    "BenchRecord",
    "ConfigError",
    "DataError",
    "DurationPredictor",
    "FastmelError",
    "FeedForwardTransformer",
    "FormatError",
    "GradTape",
    "IntegrityError",
    "MelSpectrogram",
    "ModelConfig",
    "NumericError",
    "OptimizerConfig",
    "RegulatedHidden",
    "ShapeError",
    "TeacherLite",
    "Tensor",
    "TrainingSample",
    "adam_step",
    "backward",
    "distill_dataset",
    "duration_loss",
    "durations_from_log",
    "extract_durations",
    "fit",
    "fit_teacher",
    "focus_rate",
    "grad_check",
    "insert_break",
    "mel_loss",
    "no_grad",
    "noam_lr",
    "positional_encoding",
    "regulate",
    "run_bench",
    "scale_durations",
    "select_alignment_head",
    "total_loss",
]
