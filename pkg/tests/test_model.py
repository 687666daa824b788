import math

import numpy as np
import pytest

import fastmel.tensor as T
from fastmel.duration import AttentionMatrix, extract_durations
from fastmel.errors import ConfigError, DataError, NumericError, ShapeError
from fastmel.model import (
    FeedForwardTransformer,
    FftBlock,
    MelSpectrogram,
    ModelConfig,
    MultiHeadAttention,
    TeacherLite,
    positional_encoding,
)
from fastmel.tensor import Tensor, grad_check


def tiny_config(**kw):
    base = dict(vocab_size=8, d_model=8, n_blocks_phoneme=1, n_blocks_mel=1,
                n_heads=2, conv_kernel=3, conv_filter=8, dp_filter=8,
                mel_dim=4, dropout=0.1)
    base.update(kw)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# config


def test_config_validates_divisibility():
    with pytest.raises(ConfigError):
        tiny_config(d_model=10, n_heads=4)


def test_config_validates_kernel_parity():
    with pytest.raises(ConfigError):
        tiny_config(conv_kernel=2)


def test_config_validates_dropout_range():
    with pytest.raises(ConfigError):
        tiny_config(dropout=1.0)


def test_paper_preset_values():
    cfg = ModelConfig.paper_preset()
    assert (cfg.vocab_size, cfg.d_model, cfg.n_blocks_phoneme, cfg.n_blocks_mel) == (51, 384, 6, 6)
    assert (cfg.n_heads, cfg.conv_kernel, cfg.conv_filter, cfg.dp_filter) == (2, 3, 1536, 256)
    assert (cfg.mel_dim, cfg.dropout) == (80, 0.1)


def test_config_dict_roundtrip():
    cfg = tiny_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------------------
# positional encoding


def test_pe_first_row_alternates_zero_one():
    pe = positional_encoding(3, 6)
    np.testing.assert_array_equal(pe[0], [0.0, 1.0, 0.0, 1.0, 0.0, 1.0])


def test_pe_bounded():
    pe = positional_encoding(50, 16)
    assert pe.min() >= -1.0 and pe.max() <= 1.0


def test_pe_hand_value():
    pe = positional_encoding(2, 4)
    assert pe[1, 0] == pytest.approx(math.sin(1.0), abs=1e-6)
    assert pe[1, 1] == pytest.approx(math.cos(1.0), abs=1e-6)
    assert pe[1, 2] == pytest.approx(math.sin(1.0 / 100.0), abs=1e-6)


# ---------------------------------------------------------------------------
# attention


def test_attention_single_position_weight_is_one():
    mha = MultiHeadAttention(4, 1, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).normal(size=(1, 4)))
    y, weights = mha(x, return_weights=True)
    assert weights[0].shape == (1, 1)
    assert weights[0][0, 0] == pytest.approx(1.0, abs=1e-15)
    expected = mha.out(mha.v[0](x))
    np.testing.assert_allclose(y.data, expected.data, atol=1e-12)


def test_attention_identical_rows_give_identical_outputs():
    mha = MultiHeadAttention(6, 2, np.random.default_rng(2))
    row = np.random.default_rng(3).normal(size=6)
    x = Tensor(np.tile(row, (4, 1)))
    y = mha(x).data
    for t in range(1, 4):
        np.testing.assert_allclose(y[t], y[0], atol=1e-12)


def test_attention_matches_hand_computation():
    mha = MultiHeadAttention(2, 1, np.random.default_rng(4))
    wq = np.array([[1.0, 0.0], [0.0, 1.0]])
    wk = np.array([[0.5, 0.0], [0.0, 0.5]])
    wv = np.array([[1.0, 2.0], [3.0, 4.0]])
    mha.q[0].w.data = wq.copy()
    mha.k[0].w.data = wk.copy()
    mha.v[0].w.data = wv.copy()
    mha.out.w.data = np.eye(2)
    mha.out.b.data = np.zeros(2)
    x = np.array([[1.0, 0.0], [0.0, 1.0]])

    scores = (x @ wq) @ (x @ wk).T / math.sqrt(2)
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    att = e / e.sum(axis=1, keepdims=True)
    expected = att @ (x @ wv)

    got = mha(Tensor(x)).data
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_attention_head_mismatch():
    with pytest.raises(ConfigError):
        MultiHeadAttention(6, 4, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# FFT block


@pytest.mark.parametrize("L", [1, 7, 40])
def test_fft_block_preserves_shape(L):
    cfg = tiny_config()
    blk = FftBlock(cfg, np.random.default_rng(0), "b")
    x = Tensor(np.random.default_rng(1).normal(size=(L, cfg.d_model)))
    assert blk(x).shape == (L, cfg.d_model)


def test_fft_block_zero_weights_is_double_layer_norm():
    cfg = tiny_config()
    blk = FftBlock(cfg, np.random.default_rng(0), "b")
    for _, t in blk.attn.named_parameters("a"):
        t.data = np.zeros_like(t.data)
    for conv in (blk.conv1, blk.conv2):
        conv.w.data = np.zeros_like(conv.w.data)
        conv.b.data = np.zeros_like(conv.b.data)
    x = Tensor(np.random.default_rng(2).normal(size=(5, cfg.d_model)))
    ones, zeros = Tensor(np.ones(cfg.d_model)), Tensor(np.zeros(cfg.d_model))
    expected = T.layer_norm(T.layer_norm(x, ones, zeros), ones, zeros)
    np.testing.assert_allclose(blk(x).data, expected.data, atol=1e-12)


def test_fft_block_gradient_check():
    cfg = tiny_config(dropout=0.0)
    blk = FftBlock(cfg, np.random.default_rng(1), "b")
    x = Tensor(np.random.default_rng(101).normal(size=(5, 8)), requires_grad=True)
    target = Tensor(np.random.default_rng(201).normal(size=(5, 8)))
    inputs = [x] + [p for _, p in blk.named_parameters()]
    err = grad_check(lambda *a: T.mse(blk(x, None), target), inputs, h=1e-5)
    assert err < 1e-5


# ---------------------------------------------------------------------------
# student model


def test_encode_shape_single_token():
    model = FeedForwardTransformer(tiny_config(), seed=0)
    assert model.encode_phonemes([3]).shape == (1, 8)


def test_encode_deterministic_bitwise():
    model = FeedForwardTransformer(tiny_config(), seed=0)
    a = model.encode_phonemes([1, 2, 3]).data.tobytes()
    b = model.encode_phonemes([1, 2, 3]).data.tobytes()
    assert a == b


def test_encode_position_sensitivity():
    model = FeedForwardTransformer(tiny_config(), seed=0)
    a = model.encode_phonemes([1, 2]).data
    b = model.encode_phonemes([2, 1]).data
    assert not np.allclose(a, b)


def test_encode_rejects_out_of_vocab():
    model = FeedForwardTransformer(tiny_config(), seed=0)
    with pytest.raises(DataError):
        model.encode_phonemes([0, 99])
    with pytest.raises(DataError):
        model.encode_phonemes([])


def test_decode_single_frame_and_pass_count():
    model = FeedForwardTransformer(tiny_config(), seed=0)
    out = model.decode_mel(Tensor(np.zeros((1, 8))))
    assert out.shape == (1, 4)
    model.reset_counters()
    for m in (1, 5, 17):
        model.decode_mel(Tensor(np.zeros((m, 8))))
    assert model.decode_passes == 3


def test_decode_zero_weights_collapse_to_bias():
    model = FeedForwardTransformer(tiny_config(), seed=0)
    for name, p in model.named_parameters():
        p.data = np.zeros_like(p.data)
    for blk in model.mel_blocks:
        blk.ln1.gamma.data = np.ones_like(blk.ln1.gamma.data)
        blk.ln2.gamma.data = np.ones_like(blk.ln2.gamma.data)
    model.mel_out.b.data = np.full(4, 0.7)
    out = model.decode_mel(Tensor(np.random.default_rng(0).normal(size=(6, 8))))
    np.testing.assert_allclose(out.data, np.full((6, 4), 0.7), atol=1e-12)


class StubPredictor:
    """Emits fixed log-domain durations regardless of the hidden states."""

    def __init__(self, durations):
        self.log_d = np.log1p(np.asarray(durations, dtype=float))

    def __call__(self, h, rng=None):
        return Tensor(self.log_d)


def test_synthesize_frame_count_equals_duration_sum():
    model = FeedForwardTransformer(tiny_config(), seed=0)
    model.duration_predictor = StubPredictor([2, 0, 3, 1])
    mel, durations = model.synthesize([1, 2, 3, 4], alpha=1.0)
    assert durations == [2, 0, 3, 1]
    assert mel.n_frames == sum(durations) == 6


def test_synthesize_alpha_one_roundtrip():
    model = FeedForwardTransformer(tiny_config(), seed=0)
    D = [3, 1, 4, 1, 5]
    model.duration_predictor = StubPredictor(D)
    mel, durations = model.synthesize([1, 2, 3, 4, 5], alpha=1.0)
    assert durations == D
    assert mel.n_frames == sum(D)


def test_synthesize_single_parallel_pass_any_length():
    model = FeedForwardTransformer(tiny_config(), seed=0)
    for total in (4, 40, 400):
        model.duration_predictor = StubPredictor([total // 4] * 4)
        model.reset_counters()
        mel, _ = model.synthesize([1, 2, 3, 4])
        assert model.decode_passes == 1
        assert mel.n_frames == total


def test_synthesize_all_zero_durations_raises():
    model = FeedForwardTransformer(tiny_config(), seed=0)
    model.duration_predictor = StubPredictor([0, 0, 0])
    with pytest.raises(NumericError, match="zero"):
        model.synthesize([1, 2, 3])


def test_synthesize_breaks_add_exact_frames():
    model = FeedForwardTransformer(tiny_config(), seed=0)
    model.duration_predictor = StubPredictor([2, 2, 2])
    _, base = model.synthesize([1, 2, 3])
    _, edited = model.synthesize([1, 2, 3], breaks=[(1, 20)])
    assert sum(edited) == sum(base) + 20
    assert edited[1] == base[1] + 20


def test_synthesize_outputs_finite_with_random_weights():
    model = FeedForwardTransformer(tiny_config(dropout=0.3), seed=9)
    model.duration_predictor = StubPredictor([1, 2, 3])
    mel, _ = model.synthesize([5, 6, 7])
    assert isinstance(mel, MelSpectrogram)
    assert np.all(np.isfinite(mel.frames.data))


def test_inference_determinism_bitwise():
    model = FeedForwardTransformer(tiny_config(), seed=3)
    model.duration_predictor = StubPredictor([2, 2])
    a, _ = model.synthesize([1, 2])
    b, _ = model.synthesize([1, 2])
    assert a.frames.data.tobytes() == b.frames.data.tobytes()


def test_full_model_gradient_check_tiny_config():
    from fastmel.training import duration_loss, mel_loss

    cfg = tiny_config(vocab_size=6, dropout=0.0, duration_stop_gradient=False)
    model = FeedForwardTransformer(cfg, seed=3)
    tokens = [1, 2, 3, 4]
    durations = [2, 1, 3, 2]
    target = np.random.default_rng(1).normal(size=(sum(durations), cfg.mel_dim))
    tensors = [p for _, p in model.named_parameters()]

    def f(*ws):
        mel_pred, log_d = model.forward_train(tokens, durations, None)
        return T.add(mel_loss(mel_pred, target), duration_loss(log_d, durations))

    assert grad_check(f, tensors, h=1e-5) < 1e-4


def test_duration_stop_gradient_blocks_encoder():
    from fastmel.training import duration_loss

    cfg = tiny_config(vocab_size=6, dropout=0.0, duration_stop_gradient=True)
    model = FeedForwardTransformer(cfg, seed=3)
    h = model.encode_phonemes([1, 2, 3])
    log_d = model.duration_predictor(h)
    T.backward(duration_loss(log_d, [1, 2, 3]))
    assert model.embedding.grad is None or not model.embedding.grad.any()
    assert model.duration_predictor.out_w.grad is not None


# ---------------------------------------------------------------------------
# teacher


def teacher_pair(seed=0):
    cfg = tiny_config(vocab_size=10)
    teacher = TeacherLite(cfg, seed=seed)
    tokens = [1, 2, 3, 4, 5]
    return teacher, tokens


def test_teacher_generate_counts_steps():
    teacher, tokens = teacher_pair()
    teacher.reset_counters()
    frames = teacher.generate(tokens, 7)
    assert frames.shape == (7, 4)
    assert teacher.step_calls == 7


def test_teacher_cross_attention_rows_are_stochastic():
    teacher, tokens = teacher_pair()
    memory = teacher.encode_phonemes(tokens)
    _, rows = teacher.step(np.zeros((3, 4)), memory)
    assert rows
    for label, row in rows.items():
        assert row.shape == (5,)
        assert abs(row.sum() - 1.0) < 1e-6
        assert row.min() >= 0.0


def test_teacher_forced_attention_accepted_by_extractor():
    teacher, tokens = teacher_pair()
    target = np.random.default_rng(3).normal(size=(9, 4))
    _, weight_map = teacher.forced_pass(tokens, target)
    for label, w in weight_map.items():
        a = AttentionMatrix(w)
        d = extract_durations(a)
        assert sum(d) == 9
        assert len(d) == len(tokens)


def test_teacher_step_matches_forced_pass():
    # causal decoder: stepping over a prefix reproduces the forced-pass rows
    teacher, tokens = teacher_pair(seed=5)
    target = np.random.default_rng(4).normal(size=(6, 4))
    memory = teacher.encode_phonemes(tokens)
    pred, weight_map = teacher.forced_pass(tokens, target)
    for s in range(6):
        frame, rows = teacher.step(target[:s], memory)
        np.testing.assert_allclose(frame, pred.data[s], atol=1e-10)
        for label, row in rows.items():
            np.testing.assert_allclose(row, weight_map[label][s], atol=1e-10)


def test_teacher_empty_prefix_zero_start():
    teacher, tokens = teacher_pair()
    memory = teacher.encode_phonemes(tokens)
    a, _ = teacher.step(None, memory)
    b, _ = teacher.step(np.zeros((0, 4)), memory)
    np.testing.assert_array_equal(a, b)


def test_teacher_autoregressive_passes_scale_with_length():
    teacher, tokens = teacher_pair()
    for m in (3, 8):
        teacher.reset_counters()
        teacher.generate(tokens, m)
        assert teacher.step_calls == m
