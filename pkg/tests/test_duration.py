import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import fastmel.tensor as T
from fastmel.duration import (
    AlignmentReport,
    AttentionMatrix,
    DurationPredictor,
    durations_from_log,
    extract_durations,
    focus_rate,
    predict_log_durations,
    select_alignment_head,
)
from fastmel.errors import ConfigError, DataError, NumericError, ShapeError
from fastmel.tensor import Tensor, grad_check


def random_row_stochastic(S, T_cols, rng):
    raw = rng.uniform(0.01, 1.0, size=(S, T_cols))
    return raw / raw.sum(axis=1, keepdims=True)


def uniform_matrix(S, T_cols):
    return np.full((S, T_cols), 1.0 / T_cols)


def one_hot_diagonal(S, T_cols):
    m = np.zeros((S, T_cols))
    for s in range(S):
        m[s, min(int(s * T_cols / S), T_cols - 1)] = 1.0
    return m


def constant_max_matrix(S, T_cols, peak):
    """Every row has max exactly `peak`, so the focus rate is exactly peak."""
    rest = (1.0 - peak) / (T_cols - 1)
    m = np.full((S, T_cols), rest)
    for s in range(S):
        m[s, s % T_cols] = peak
    return m


# ---------------------------------------------------------------------------
# AttentionMatrix


def test_attention_matrix_validates_row_sums():
    with pytest.raises(DataError, match="row 1"):
        AttentionMatrix(np.array([[0.5, 0.5], [0.9, 0.3]]))


def test_attention_matrix_validates_range():
    with pytest.raises(DataError):
        AttentionMatrix(np.array([[1.5, -0.5]]))


def test_attention_matrix_rejects_empty():
    with pytest.raises(ShapeError):
        AttentionMatrix(np.zeros((0, 3)))


# ---------------------------------------------------------------------------
# focus rate


def test_focus_rate_one_hot_is_one():
    a = AttentionMatrix(one_hot_diagonal(6, 6))
    assert focus_rate(a) == 1.0


def test_focus_rate_uniform_is_inverse_T():
    a = AttentionMatrix(uniform_matrix(5, 4))
    assert focus_rate(a) == pytest.approx(0.25, abs=1e-15)


def test_focus_rate_hand_case():
    a = AttentionMatrix(np.array([[0.7, 0.3], [0.2, 0.8], [0.5, 0.5]]))
    assert focus_rate(a) == pytest.approx(2.0 / 3.0, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.integers(1, 8), st.integers(0, 10_000))
def test_focus_rate_bounds(S, T_cols, seed):
    a = AttentionMatrix(random_row_stochastic(S, T_cols, np.random.default_rng(seed)))
    f = focus_rate(a)
    assert 1.0 / T_cols <= f <= 1.0


def test_focus_rate_is_one_iff_one_hot():
    rows = np.array([[1.0, 0.0], [0.3, 0.7]])
    assert focus_rate(AttentionMatrix(rows)) < 1.0
    assert focus_rate(AttentionMatrix(np.array([[1.0, 0.0], [0.0, 1.0]]))) == 1.0


# ---------------------------------------------------------------------------
# head selection


def test_select_uniform_vs_one_hot():
    heads = [AttentionMatrix(uniform_matrix(6, 4)), AttentionMatrix(one_hot_diagonal(6, 4))]
    assert select_alignment_head(heads) == 1


def test_select_singleton():
    assert select_alignment_head([AttentionMatrix(uniform_matrix(3, 3))]) == 0


def test_select_tie_prefers_lowest_index():
    heads = [AttentionMatrix(constant_max_matrix(10, 5, f)) for f in (0.4, 0.9, 0.9)]
    rates = [focus_rate(h) for h in heads]
    assert rates == pytest.approx([0.4, 0.9, 0.9], abs=1e-12)
    assert select_alignment_head(heads) == 1


def test_select_empty_rejected():
    with pytest.raises(ConfigError):
        select_alignment_head([])


def test_select_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        select_alignment_head([AttentionMatrix(uniform_matrix(3, 3)),
                               AttentionMatrix(uniform_matrix(4, 3))])


def test_selection_invariant_under_appending_weaker_heads():
    rng = np.random.default_rng(5)
    heads = [AttentionMatrix(constant_max_matrix(12, 4, 0.8))]
    assert select_alignment_head(heads) == 0
    for peak in (0.7, 0.5, 0.3):
        heads.append(AttentionMatrix(constant_max_matrix(12, 4, peak)))
        assert select_alignment_head(heads) == 0


# ---------------------------------------------------------------------------
# extraction


def test_extract_identity_pattern():
    S = 5
    d = extract_durations(AttentionMatrix(np.eye(S)))
    assert d == [1] * S
    assert sum(d) == S


def test_extract_counting_case():
    argmaxes = [0, 0, 1, 2, 2, 2]
    m = np.full((6, 3), 0.1)
    for s, t in enumerate(argmaxes):
        m[s, t] = 0.8
    assert extract_durations(AttentionMatrix(m)) == [2, 1, 3]


def test_extract_absent_column_gives_zero():
    argmaxes = [0, 0, 2, 2]
    m = np.full((4, 3), 0.15)
    for s, t in enumerate(argmaxes):
        m[s, t] = 0.7
    assert extract_durations(AttentionMatrix(m)) == [2, 0, 2]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 64), st.integers(1, 16), st.integers(0, 10_000))
def test_extract_conservation(S, T_cols, seed):
    a = AttentionMatrix(random_row_stochastic(S, T_cols, np.random.default_rng(seed)))
    assert sum(extract_durations(a)) == S


def test_extract_depends_only_on_argmax_pattern():
    rng = np.random.default_rng(11)
    a = random_row_stochastic(8, 4, rng)
    # sharpen every row toward its argmax: the argmax pattern is unchanged
    b = a.copy()
    for s in range(8):
        t = np.argmax(a[s])
        one_hot = np.zeros(4)
        one_hot[t] = 1.0
        b[s] = 0.5 * (a[s] + one_hot)
    assert extract_durations(AttentionMatrix(b)) == extract_durations(AttentionMatrix(a))


# ---------------------------------------------------------------------------
# alignment report


def test_alignment_report_validates_selection():
    with pytest.raises(DataError):
        AlignmentReport(per_head_focus=[0.3, 0.9], selected_head=0, durations=[1, 2])


def test_alignment_report_roundtrip():
    r = AlignmentReport(per_head_focus=[0.3, 0.9], selected_head=1,
                        durations=[1, 2], head_labels=["l0.h0", "l0.h1"])
    assert AlignmentReport.from_dict(r.to_dict()) == r


# ---------------------------------------------------------------------------
# log-domain conversions


def test_durations_from_log_roundtrip():
    for d in ([0, 1, 2, 7], [3], [0, 0, 5]):
        log_d = np.log1p(np.array(d, dtype=float))
        assert durations_from_log(log_d) == list(d)


def test_durations_from_log_zeros():
    assert durations_from_log(np.zeros(3)) == [0, 0, 0]


def test_durations_from_log_half_up():
    assert durations_from_log(np.array([math.log(3.6)])) == [3]


def test_durations_from_log_rejects_nan():
    with pytest.raises(NumericError):
        durations_from_log(np.array([np.nan]))


def test_durations_from_log_alpha_single_rounding():
    # exp(v)-1 = 1.0 per phoneme; alpha 1.3 -> 1.3 -> rounds to 1
    v = np.log(2.0) * np.ones(4)
    assert durations_from_log(v, alpha=1.3) == [1, 1, 1, 1]
    assert durations_from_log(v, alpha=1.5) == [2, 2, 2, 2]
    with pytest.raises(ConfigError):
        durations_from_log(v, alpha=0.0)


# ---------------------------------------------------------------------------
# predictor


def make_predictor(d_model=8, dp_filter=8, seed=0, stop_gradient=True, rate=0.1):
    return DurationPredictor(d_model, dp_filter, 3, rate, stop_gradient,
                             np.random.default_rng(seed))


def test_predictor_zero_weights_collapse_to_bias():
    p = make_predictor()
    for name, t in p.named_parameters():
        t.data = np.zeros_like(t.data)
    p.out_b.data = np.array([0.37])
    h = Tensor(np.random.default_rng(1).normal(size=(5, 8)))
    out = predict_log_durations(h, p)
    np.testing.assert_allclose(out.data, np.full(5, 0.37), atol=1e-12)


@pytest.mark.parametrize("n", [1, 5, 37])
def test_predictor_output_shape(n):
    p = make_predictor()
    h = Tensor(np.random.default_rng(2).normal(size=(n, 8)))
    assert p(h).shape == (n,)


def test_predictor_gradient_matches_finite_differences():
    p = make_predictor(seed=4, stop_gradient=False, rate=0.0)
    h = Tensor(np.random.default_rng(5).normal(size=(6, 8)), requires_grad=True)
    target = Tensor(np.random.default_rng(6).normal(size=(6,)))
    inputs = [h] + [t for _, t in p.named_parameters()]
    err = grad_check(lambda *a: T.mse(p(h), target), inputs, h=1e-5)
    assert err < 1e-5


def test_predictor_stop_gradient_blocks_input():
    p = make_predictor(seed=7, stop_gradient=True, rate=0.0)
    h = Tensor(np.random.default_rng(8).normal(size=(4, 8)), requires_grad=True)
    T.backward(T.sum_all(p(h)))
    assert h.grad is None or not h.grad.any()
    assert p.out_w.grad is not None
