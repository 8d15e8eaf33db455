import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calibbench import gradcore as gc
from calibbench.errors import DegenerateRowError, DimensionError, ParameterError, PreconditionError
from calibbench.model import (
    ClassifierConfig,
    FrozenEncoder,
    PromptBank,
    class_directions,
    classify,
    encode_text,
    init_prompts,
    text_similarity_stats,
)


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_init_prompts_shape_and_determinism():
    cfg = ClassifierConfig(n_classes=2, context_length=16, token_dim=32, seed=3)
    a, b = init_prompts(cfg), init_prompts(cfg)
    assert a.tokens.shape == (32, 32)
    assert a.tokens.value.tobytes() == b.tokens.value.tobytes()
    other = init_prompts(ClassifierConfig(n_classes=2, seed=4))
    assert other.tokens.value.tobytes() != a.tokens.value.tobytes()


def test_init_prompts_standard_deviation():
    # 10 classes * 313 tokens * 32 dims ~ 10^5 entries
    cfg = ClassifierConfig(n_classes=10, context_length=313, token_dim=32, seed=0)
    sd = init_prompts(cfg).tokens.value.std(ddof=1)
    assert 0.019 <= sd <= 0.021


@pytest.mark.parametrize(
    "kwargs",
    [dict(n_classes=1), dict(n_classes=3, tau=0.0), dict(n_classes=3, context_length=0)],
)
def test_classifier_config_validation(kwargs):
    with pytest.raises(ParameterError):
        ClassifierConfig(**kwargs)


def test_prompt_bank_shape_validation():
    with pytest.raises(DimensionError):
        PromptBank(np.zeros((5, 4)), 2, 2)
    with pytest.raises(ParameterError):
        PromptBank(np.full((4, 4), np.nan), 2, 2)


def test_encode_text_reduces_to_normalized_prompt():
    rng = np.random.default_rng(0)
    tokens = rng.standard_normal((3, 5))
    enc = FrozenEncoder.from_arrays(np.eye(5), np.zeros((3, 5)), context_length=1)
    u = encode_text(PromptBank(tokens, 3, 1), enc)
    np.testing.assert_allclose(u, tokens / np.linalg.norm(tokens, axis=1, keepdims=True), atol=1e-15)


def test_encode_text_mean_pools_tokens():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((4, 6))
    C = rng.standard_normal((2, 4))
    tokens = rng.standard_normal((6, 4))
    enc = FrozenEncoder.from_arrays(A, C, context_length=3)
    pooled = tokens.reshape(2, 3, 4).mean(axis=1)
    raw = (pooled + C) @ A
    want = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    np.testing.assert_allclose(encode_text(PromptBank(tokens, 2, 3), enc), want, atol=1e-14)


def test_encode_text_unit_rows_and_gradient():
    enc = FrozenEncoder(0, 4, 3, token_dim=12, feature_dim=20)
    rng = np.random.default_rng(2)
    bank = PromptBank(rng.normal(0, 0.3, (12, 12)), 4, 3)
    u = encode_text(bank, enc)
    np.testing.assert_allclose(np.linalg.norm(u, axis=1), 1.0, atol=1e-12)
    w = rng.standard_normal(u.shape)
    err = gc.grad_check(lambda x: gc.sum_(gc.mul(encode_text(x, enc), w)), bank.tokens)
    assert err <= 1e-5


def test_encode_text_degenerate_row():
    enc = FrozenEncoder.from_arrays(np.eye(2), np.zeros((2, 2)), context_length=1)
    with pytest.raises(DegenerateRowError):
        encode_text(PromptBank(np.array([[1.0, 0.0], [0.0, 0.0]]), 2, 1), enc)


def test_encoder_is_reconstructible_and_readonly():
    a = FrozenEncoder(9, 4, 16)
    b = FrozenEncoder(9, 4, 16)
    assert a.fingerprint() == b.fingerprint()
    assert FrozenEncoder(10, 4, 16).fingerprint() != a.fingerprint()
    with pytest.raises(ValueError):
        a.projection[0, 0] = 1.0
    m = FrozenEncoder(9, 4, 16, matched=False)
    assert m.fingerprint() == FrozenEncoder(9, 4, 16, matched=False).fingerprint()


def test_matched_encoder_anchor_geometry():
    seed, K = 5, 4
    enc = FrozenEncoder(seed, K, 16, anchor_overlap=0.5, anchor_alignment=0.5)
    g, e = class_directions(seed, K, 64)
    u = enc.anchors @ enc.projection  # text features of all-zero prompts
    np.testing.assert_allclose(np.linalg.norm(u, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(u @ g, np.sqrt(0.5), atol=1e-12)
    np.testing.assert_allclose(np.diag(u @ e.T), np.sqrt(0.5) * 0.5, atol=1e-12)
    # the projection has orthonormal rows, so it preserves token-space geometry
    np.testing.assert_allclose(enc.projection @ enc.projection.T, np.eye(32), atol=1e-12)


def test_fully_aligned_anchors_point_at_class_means():
    enc = FrozenEncoder(2, 3, 4, anchor_overlap=0.3, anchor_alignment=1.0)
    g, e = class_directions(2, 3, 64)
    want = np.sqrt(0.3) * g + np.sqrt(0.7) * e
    np.testing.assert_allclose(enc.anchors @ enc.projection, want, atol=1e-12)


def test_matched_encoder_needs_room():
    with pytest.raises(DimensionError):
        FrozenEncoder(0, 16, 4, token_dim=32)
    with pytest.raises(DimensionError):
        FrozenEncoder(0, 4, 4, token_dim=80, feature_dim=64)


def test_class_directions_orthonormal():
    g, e = class_directions(1, 6, 10)
    q = np.vstack([g, e])
    np.testing.assert_allclose(q @ q.T, np.eye(7), atol=1e-12)
    with pytest.raises(DimensionError):
        class_directions(1, 10, 10)


def test_classify_identical_direction_is_confident():
    u = np.array([[1.0, 0.0], [0.0, 1.0]])
    batch = classify(np.array([[1.0, 0.0]]), u, 100.0)
    assert batch.predicted[0] == 0
    assert batch.confidence[0] > 0.99
    np.testing.assert_allclose(batch.confidence[0], 1.0 / (1.0 + np.exp(-100.0)), rtol=1e-15)


def test_classify_identical_text_features_uniform():
    rng = np.random.default_rng(0)
    u = np.tile(unit_rows(rng, 1, 5), (3, 1))
    batch = classify(unit_rows(rng, 4, 5), u, 100.0)
    np.testing.assert_allclose(batch.probs, 1.0 / 3, atol=1e-15)
    assert np.all(batch.predicted == 0)


def test_classify_requires_unit_rows():
    u = np.eye(2)
    with pytest.raises(PreconditionError):
        classify(np.array([[2.0, 0.0]]), u, 1.0)
    with pytest.raises(PreconditionError):
        classify(np.array([[1.0, 0.0]]), 2 * u, 1.0)
    with pytest.raises(DimensionError):
        classify(np.array([[1.0, 0.0, 0.0]]), u, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 200.0))
def test_classify_logits_are_cosines_and_tau_keeps_argmax(seed, tau):
    rng = np.random.default_rng(seed)
    v, u = unit_rows(rng, 20, 8), unit_rows(rng, 4, 8)
    batch = classify(v, u, tau)
    assert np.all(np.abs(batch.logits) <= 1 + 1e-9)
    np.testing.assert_array_equal(batch.predicted, classify(v, u, 1.0).predicted)
    np.testing.assert_allclose(batch.probs.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(batch.confidence, batch.probs.max(axis=1))


def test_text_similarity_examples():
    assert text_similarity_stats(np.tile([[0.6, 0.8]], (3, 1)))["mean_offdiag"] == pytest.approx(1.0)
    assert text_similarity_stats(np.eye(4))["mean_offdiag"] == 0.0
    ang = 2 * np.pi * np.arange(3) / 3
    stats = text_similarity_stats(np.stack([np.cos(ang), np.sin(ang)], axis=1))
    assert stats["mean_offdiag"] == pytest.approx(-0.5, abs=1e-12)
    assert stats["max_offdiag"] == pytest.approx(-0.5, abs=1e-12)
    with pytest.raises(ParameterError):
        text_similarity_stats(np.eye(1))
