"""Feed-forward phoneme-to-mel model and the autoregressive teacher baseline.

The student maps a phoneme sequence to a mel-spectrogram in a single parallel
pass: embedding + positional encoding -> N FFT blocks -> length regulator ->
positional encoding -> N FFT blocks -> linear mel projection. Each FFT block
is multi-head self-attention plus a 2-layer 1D conv network, both wrapped
with residual, layer norm, and dropout.

The teacher is a small encoder-decoder that generates one frame per step
(causal self-attention over the emitted prefix, cross-attention to the
encoded phonemes). It exists to supply attention alignments for duration
extraction and to serve as the latency baseline; both models count their
block-stack forward passes for the benchmark. The decoder convs are causal
(left padding only) so a stateless per-step recompute and a teacher-forced
full pass compute the identical function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError
from .duration import DurationPredictor, durations_from_log
from .length_regulator import insert_break, regulate
from .tensor import (
    DropoutRng,
    Tensor,
    add,
    concat_cols,
    conv1d_causal,
    conv1d_same,
    dropout,
    gather_rows,
    layer_norm,
    matmul,
    mse,
    no_grad,
    relu,
    scale,
    softmax_rows,
    transpose,
)


@dataclass
class ModelConfig:
    vocab_size: int = 51
    d_model: int = 64
    n_blocks_phoneme: int = 2
    n_blocks_mel: int = 2
    n_heads: int = 2
    conv_kernel: int = 3
    conv_filter: int = 256
    dp_filter: int = 64
    mel_dim: int = 80
    dropout: float = 0.1
    duration_stop_gradient: bool = True

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_blocks_phoneme", "n_blocks_mel",
                     "n_heads", "conv_kernel", "conv_filter", "dp_filter", "mel_dim"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ConfigError(f"model.{name} must be a positive integer, got {v!r}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"model.d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.conv_kernel % 2 == 0:
            raise ConfigError(f"model.conv_kernel must be odd, got {self.conv_kernel}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"model.dropout must be in [0, 1), got {self.dropout}")

    @classmethod
    def paper_preset(cls) -> "ModelConfig":
        """Full-scale configuration (384-dim hidden, 6 blocks per side)."""
        return cls(vocab_size=51, d_model=384, n_blocks_phoneme=6, n_blocks_mel=6,
                   n_heads=2, conv_kernel=3, conv_filter=1536, dp_filter=256,
                   mel_dim=80, dropout=0.1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class MelSpectrogram:
    """m x mel_dim frame matrix; all values finite."""

    frames: Tensor

    def __post_init__(self):
        if not isinstance(self.frames, Tensor):
            self.frames = Tensor(self.frames)
        if self.frames.ndim != 2:
            raise ShapeError(f"mel-spectrogram must be m x mel_dim, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames.data)):
            raise NumericError("mel-spectrogram contains NaN/Inf")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal encoding: PE[t,2i]=sin(t/10000^(2i/d)), odd columns cos."""
    if length < 1:
        raise ShapeError(f"positional encoding length must be >= 1, got {length}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    even = np.arange(0, d_model, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, even / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : d_model // 2])
    return pe


def _uniform_init(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.w = _uniform_init(rng, d_in, d_out, (d_in, d_out))
        self.b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.w)
        return add(y, self.b) if self.b is not None else y

    def named_parameters(self, prefix: str):
        yield f"{prefix}.w", self.w
        if self.b is not None:
            yield f"{prefix}.b", self.b


class Conv1d:
    def __init__(self, kernel: int, c_in: int, c_out: int, rng: np.random.Generator,
                 causal: bool = False):
        self.w = _uniform_init(rng, kernel * c_in, kernel * c_out, (kernel, c_in, c_out))
        self.b = Tensor(np.zeros(c_out), requires_grad=True)
        self.causal = causal

    def __call__(self, x: Tensor) -> Tensor:
        if self.causal:
            return conv1d_causal(x, self.w, self.b)
        return conv1d_same(x, self.w, self.b)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class LayerNorm:
    def __init__(self, d: int):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


class MultiHeadAttention:
    """Scaled dot-product attention with per-head projections, no mask by default.

    The q/k/v projections carry no bias: a key bias shifts every score in a
    row equally, which softmax cancels exactly, leaving a parameter with a
    structurally zero gradient that finite differences cannot confirm.
    """

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads != 0:
            raise ConfigError(f"d_model {d_model} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = [Linear(d_model, self.d_head, rng, bias=False) for _ in range(n_heads)]
        self.k = [Linear(d_model, self.d_head, rng, bias=False) for _ in range(n_heads)]
        self.v = [Linear(d_model, self.d_head, rng, bias=False) for _ in range(n_heads)]
        self.out = Linear(d_model, d_model, rng)

    def __call__(self, x: Tensor, memory: Tensor | None = None,
                 mask: Tensor | None = None, return_weights: bool = False):
        kv = x if memory is None else memory
        heads = []
        weights = []
        inv_scale = 1.0 / math.sqrt(self.d_head)
        for h in range(self.n_heads):
            scores = scale(matmul(self.q[h](x), transpose(self.k[h](kv))), inv_scale)
            if mask is not None:
                scores = add(scores, mask)
            att = softmax_rows(scores)
            if return_weights:
                weights.append(np.array(att.data))
            heads.append(matmul(att, self.v[h](kv)))
        y = self.out(concat_cols(heads))
        if return_weights:
            return y, weights
        return y

    def named_parameters(self, prefix: str):
        for h in range(self.n_heads):
            yield from self.q[h].named_parameters(f"{prefix}.head{h}.q")
            yield from self.k[h].named_parameters(f"{prefix}.head{h}.k")
            yield from self.v[h].named_parameters(f"{prefix}.head{h}.v")
        yield from self.out.named_parameters(f"{prefix}.out")


def causal_mask(length: int) -> Tensor:
    """Additive upper-triangular mask: large negatives above the diagonal."""
    m = np.triu(np.full((length, length), -1e9), k=1)
    return Tensor(m)


class FftBlock:
    """Self-attention and 2-layer conv net, each with residual + norm + dropout."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, name: str):
        self.name = name
        self.rate = cfg.dropout
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.ln1 = LayerNorm(cfg.d_model)
        self.conv1 = Conv1d(cfg.conv_kernel, cfg.d_model, cfg.conv_filter, rng)
        self.conv2 = Conv1d(cfg.conv_kernel, cfg.conv_filter, cfg.d_model, rng)
        self.ln2 = LayerNorm(cfg.d_model)

    def __call__(self, x: Tensor, rng: DropoutRng | None = None) -> Tensor:
        training = rng is not None
        a = dropout(self.attn(x), self.rate,
                    rng.key(f"{self.name}.attn_drop") if training else 0, training)
        y1 = self.ln1(add(x, a))
        c = self.conv2(relu(self.conv1(y1)))
        c = dropout(c, self.rate,
                    rng.key(f"{self.name}.conv_drop") if training else 0, training)
        return self.ln2(add(y1, c))

    def named_parameters(self):
        yield from self.attn.named_parameters(f"{self.name}.attn")
        yield from self.ln1.named_parameters(f"{self.name}.ln1")
        yield from self.conv1.named_parameters(f"{self.name}.conv1")
        yield from self.conv2.named_parameters(f"{self.name}.conv2")
        yield from self.ln2.named_parameters(f"{self.name}.ln2")


def _check_tokens(tokens, vocab_size: int) -> list[int]:
    toks = [int(t) for t in tokens]
    if not toks:
        raise DataError("phoneme sequence must be non-empty")
    for t in toks:
        if not 0 <= t < vocab_size:
            raise DataError(f"phoneme id {t} out of vocabulary (size {vocab_size})")
    return toks


class FeedForwardTransformer:
    """The parallel student model. ``decode_passes`` counts mel-side stack runs."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        cfg = config
        self.embedding = _uniform_init(rng, cfg.vocab_size, cfg.d_model,
                                       (cfg.vocab_size, cfg.d_model))
        self.pho_blocks = [FftBlock(cfg, rng, f"pho_blocks.{i}")
                           for i in range(cfg.n_blocks_phoneme)]
        self.mel_blocks = [FftBlock(cfg, rng, f"mel_blocks.{i}")
                           for i in range(cfg.n_blocks_mel)]
        self.mel_out = Linear(cfg.d_model, cfg.mel_dim, rng)
        self.duration_predictor = DurationPredictor(
            cfg.d_model, cfg.dp_filter, cfg.conv_kernel, cfg.dropout,
            cfg.duration_stop_gradient, rng)
        self.decode_passes = 0

    def named_parameters(self):
        yield "embedding", self.embedding
        for block in self.pho_blocks + self.mel_blocks:
            yield from block.named_parameters()
        yield from self.mel_out.named_parameters("mel_out")
        yield from self.duration_predictor.named_parameters()

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def reset_counters(self):
        self.decode_passes = 0

    def encode_phonemes(self, tokens, rng: DropoutRng | None = None) -> Tensor:
        tokens = _check_tokens(tokens, self.config.vocab_size)
        h = gather_rows(self.embedding, tokens)
        h = add(h, Tensor(positional_encoding(len(tokens), self.config.d_model)))
        for block in self.pho_blocks:
            h = block(h, rng)
        return h

    def decode_mel(self, frames: Tensor, rng: DropoutRng | None = None) -> Tensor:
        """One parallel pass over all frames, whatever their count."""
        if frames.shape[0] < 1:
            raise ShapeError("decode_mel needs at least one frame")
        self.decode_passes += 1
        h = add(frames, Tensor(positional_encoding(frames.shape[0], self.config.d_model)))
        for block in self.mel_blocks:
            h = block(h, rng)
        return self.mel_out(h)

    def forward_train(self, tokens, durations, rng: DropoutRng | None):
        """Teacher-supplied durations in, (mel prediction, log-duration prediction) out."""
        h_pho = self.encode_phonemes(tokens, rng)
        log_d = self.duration_predictor(h_pho, rng)
        regulated = regulate(h_pho, durations, 1.0)
        mel = self.decode_mel(regulated.frames, rng)
        return mel, log_d

    def synthesize(self, tokens, alpha: float = 1.0,
                   breaks: list[tuple[int, int]] | None = None):
        """Full inference: returns (MelSpectrogram, realized integer durations).

        Predicted durations are scaled by alpha before the single rounding;
        break insertion then adds frames at the given positions.
        """
        with no_grad():
            h_pho = self.encode_phonemes(tokens)
            log_d = self.duration_predictor(h_pho)
            durations = durations_from_log(log_d, alpha)
            for pos, extra in breaks or []:
                durations = insert_break(durations, [pos], extra)
            if sum(durations) == 0:
                raise NumericError(
                    f"all {len(durations)} predicted durations rounded to zero "
                    f"(alpha={alpha}); nothing to synthesize"
                )
            regulated = regulate(h_pho, durations, 1.0)
            mel = self.decode_mel(regulated.frames)
        return MelSpectrogram(mel), durations


class TeacherDecoderBlock:
    """Causal self-attention, cross-attention to the encoder, causal conv net."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, name: str):
        self.name = name
        self.rate = cfg.dropout
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.ln1 = LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.ln2 = LayerNorm(cfg.d_model)
        self.conv1 = Conv1d(cfg.conv_kernel, cfg.d_model, cfg.conv_filter, rng, causal=True)
        self.conv2 = Conv1d(cfg.conv_kernel, cfg.conv_filter, cfg.d_model, rng, causal=True)
        self.ln3 = LayerNorm(cfg.d_model)

    def __call__(self, x: Tensor, memory: Tensor, mask: Tensor,
                 rng: DropoutRng | None = None, return_weights: bool = False):
        training = rng is not None
        a = self.self_attn(x, mask=mask)
        a = dropout(a, self.rate,
                    rng.key(f"{self.name}.self_drop") if training else 0, training)
        y1 = self.ln1(add(x, a))
        if return_weights:
            c, weights = self.cross_attn(y1, memory=memory, return_weights=True)
        else:
            c, weights = self.cross_attn(y1, memory=memory), []
        c = dropout(c, self.rate,
                    rng.key(f"{self.name}.cross_drop") if training else 0, training)
        y2 = self.ln2(add(y1, c))
        f = self.conv2(relu(self.conv1(y2)))
        f = dropout(f, self.rate,
                    rng.key(f"{self.name}.conv_drop") if training else 0, training)
        return self.ln3(add(y2, f)), weights

    def named_parameters(self):
        yield from self.self_attn.named_parameters(f"{self.name}.self_attn")
        yield from self.ln1.named_parameters(f"{self.name}.ln1")
        yield from self.cross_attn.named_parameters(f"{self.name}.cross_attn")
        yield from self.ln2.named_parameters(f"{self.name}.ln2")
        yield from self.conv1.named_parameters(f"{self.name}.conv1")
        yield from self.conv2.named_parameters(f"{self.name}.conv2")
        yield from self.ln3.named_parameters(f"{self.name}.ln3")


class TeacherLite:
    """Small autoregressive encoder-decoder baseline.

    ``step_calls`` counts decoder steps; generating m frames takes exactly m.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        cfg = config
        self.embedding = _uniform_init(rng, cfg.vocab_size, cfg.d_model,
                                       (cfg.vocab_size, cfg.d_model))
        self.enc_blocks = [FftBlock(cfg, rng, f"enc_blocks.{i}")
                           for i in range(cfg.n_blocks_phoneme)]
        self.prenet = Linear(cfg.mel_dim, cfg.d_model, rng)
        self.dec_blocks = [TeacherDecoderBlock(cfg, rng, f"dec_blocks.{i}")
                           for i in range(cfg.n_blocks_mel)]
        self.out = Linear(cfg.d_model, cfg.mel_dim, rng)
        self.step_calls = 0

    def named_parameters(self):
        yield "embedding", self.embedding
        for block in self.enc_blocks:
            yield from block.named_parameters()
        yield from self.prenet.named_parameters("prenet")
        for block in self.dec_blocks:
            yield from block.named_parameters()
        yield from self.out.named_parameters("out")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def reset_counters(self):
        self.step_calls = 0

    def encode_phonemes(self, tokens, rng: DropoutRng | None = None) -> Tensor:
        tokens = _check_tokens(tokens, self.config.vocab_size)
        h = gather_rows(self.embedding, tokens)
        h = add(h, Tensor(positional_encoding(len(tokens), self.config.d_model)))
        for block in self.enc_blocks:
            h = block(h, rng)
        return h

    def _decode(self, dec_in: Tensor, memory: Tensor, rng: DropoutRng | None = None,
                return_weights: bool = False):
        """Run the decoder stack over shifted frames (zero start frame first)."""
        length = dec_in.shape[0]
        h = add(self.prenet(dec_in), Tensor(positional_encoding(length, self.config.d_model)))
        mask = causal_mask(length)
        all_weights: dict[str, np.ndarray] = {}
        for i, block in enumerate(self.dec_blocks):
            h, weights = block(h, memory, mask, rng, return_weights)
            for hd, w in enumerate(weights):
                all_weights[f"layer{i}.head{hd}"] = w
        pred = self.out(h)
        if return_weights:
            return pred, all_weights
        return pred

    @staticmethod
    def _shift_right(frames: np.ndarray | None, mel_dim: int, length: int) -> Tensor:
        dec_in = np.zeros((length, mel_dim))
        if frames is not None and len(frames) > 0:
            take = min(len(frames), length - 1)
            dec_in[1:take + 1] = frames[:take]
        return Tensor(dec_in)

    def step(self, prefix_mel: np.ndarray | None, memory: Tensor):
        """One autoregressive step: next frame + cross-attention rows per head.

        An empty prefix is handled by the zero start frame. Stateless: the
        prefix is re-encoded each call, which is what makes the per-frame
        cost grow with position.
        """
        self.step_calls += 1
        s = 0 if prefix_mel is None else len(prefix_mel)
        with no_grad():
            dec_in = self._shift_right(prefix_mel, self.config.mel_dim, s + 1)
            pred, weights = self._decode(dec_in, memory, return_weights=True)
        next_frame = np.array(pred.data[-1])
        last_rows = {label: np.array(w[-1]) for label, w in weights.items()}
        return next_frame, last_rows

    def generate(self, tokens, n_frames: int) -> np.ndarray:
        """Free-running generation of exactly n_frames (no stop token)."""
        if n_frames < 1:
            raise ConfigError(f"generate needs n_frames >= 1, got {n_frames}")
        with no_grad():
            memory = self.encode_phonemes(tokens)
        frames = np.zeros((0, self.config.mel_dim))
        for _ in range(n_frames):
            nxt, _ = self.step(frames, memory)
            frames = np.vstack([frames, nxt[None, :]])
        return frames

    def forced_pass(self, tokens, target_mel: np.ndarray, rng: DropoutRng | None = None):
        """Teacher-forced pass over a ground-truth mel.

        Returns (predicted frames [S x mel], {head label: S x T attention}).
        Position s sees target frames < s, so the stacked attention rows match
        what sequential stepping would produce.
        """
        target = np.asarray(target_mel, dtype=np.float64)
        if target.ndim != 2 or target.shape[1] != self.config.mel_dim:
            raise ShapeError(
                f"target mel must be S x {self.config.mel_dim}, got {target.shape}"
            )
        memory = self.encode_phonemes(tokens, rng)
        dec_in = self._shift_right(target, self.config.mel_dim, target.shape[0])
        return self._decode(dec_in, memory, rng, return_weights=True)

    def teacher_forced_loss(self, tokens, target_mel: np.ndarray,
                            rng: DropoutRng | None = None) -> Tensor:
        pred, _ = self.forced_pass(tokens, target_mel, rng)
        return mse(pred, Tensor(np.asarray(target_mel, dtype=np.float64)))
