"""Attention primitives against scalar-loop oracles, the documented edge
cases, and gradient checks."""

import numpy as np
import pytest

import reference
from coreason import attention as A
from coreason import tensor as T
from coreason.errors import ConfigError, InputError, ShapeError
from coreason.gradcheck import grad_check
from coreason.tensor import RngState, Tensor


@pytest.fixture(autouse=True)
def _float64():
    with T.precision("float64"):
        yield


def identity_params(d_model, h=1):
    """Multi-head params with identity projections and zero bias."""
    p = A.MultiHeadParams.create(RngState(0), d_model, h)
    for w in (p.wq, p.wk, p.wv, p.wo):
        w.data = np.eye(d_model, dtype=w.dtype)
    return p


class TestScaledDotAttention:
    def test_single_key_gives_weight_one(self):
        rng = RngState(1)
        q = Tensor(rng.normal(1.0, (3, 4)))
        k = Tensor(rng.normal(1.0, (1, 4)))
        v = Tensor(rng.normal(1.0, (1, 5)))
        out, w = A.scaled_dot_attention(q, k, v)
        np.testing.assert_allclose(w.data, np.ones((3, 1)))
        np.testing.assert_allclose(out.data, np.repeat(v.data, 3, axis=0))

    def test_orthogonal_query_averages_values(self):
        # all logits equal -> uniform weights -> column mean of V
        q = Tensor(np.zeros((1, 4)))
        k = Tensor(RngState(2).normal(1.0, (5, 4)))
        v = Tensor(RngState(3).normal(1.0, (5, 3)))
        out, w = A.scaled_dot_attention(q, k, v)
        np.testing.assert_allclose(w.data, np.full((1, 5), 0.2), atol=1e-12)
        np.testing.assert_allclose(out.data[0], v.data.mean(axis=0), rtol=1e-12)

    def test_random_case_matches_scalar_oracle(self):
        rng = RngState(4)
        q = rng.normal(1.0, (3, 4))
        k = rng.normal(1.0, (5, 4))
        v = rng.normal(1.0, (5, 6))
        out, w = A.scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v))
        want_out, want_w = reference.scaled_dot_attention(q, k, v)
        np.testing.assert_allclose(out.data, want_out, rtol=1e-10)
        np.testing.assert_allclose(w.data, want_w, rtol=1e-10)

    def test_rows_sum_to_one(self):
        rng = RngState(5)
        _, w = A.scaled_dot_attention(Tensor(rng.normal(2.0, (7, 8))),
                                      Tensor(rng.normal(2.0, (9, 8))),
                                      Tensor(rng.normal(2.0, (9, 8))))
        np.testing.assert_allclose(w.data.sum(axis=-1), np.ones(7), atol=1e-6)

    def test_empty_axes_rejected(self):
        with pytest.raises(ShapeError):
            A.scaled_dot_attention(Tensor(np.zeros((2, 0))),
                                   Tensor(np.zeros((3, 0))),
                                   Tensor(np.zeros((3, 2))))
        with pytest.raises(ShapeError):
            A.scaled_dot_attention(Tensor(np.zeros((2, 4))),
                                   Tensor(np.zeros((0, 4))),
                                   Tensor(np.zeros((0, 2))))


class TestMultiHead:
    def test_single_identity_head_equals_plain_attention(self):
        rng = RngState(6)
        x = rng.normal(1.0, (4, 6))
        p = identity_params(6, h=1)
        got = A.multi_head(Tensor(x), Tensor(x), Tensor(x), p)
        want, _ = reference.scaled_dot_attention(x, x, x)
        np.testing.assert_allclose(got.data, want, rtol=1e-10)

    def test_matches_per_head_oracle(self):
        rng = RngState(7)
        d_model, h = 8, 4
        p = A.MultiHeadParams.create(rng, d_model, h)
        q = rng.normal(1.0, (2, d_model))
        k = rng.normal(1.0, (5, d_model))
        v = rng.normal(1.0, (5, d_model))
        got = A.multi_head(Tensor(q), Tensor(k), Tensor(v), p)
        want = reference.multi_head_attention(
            q, k, v, p.wq.data, p.bq.data, p.wk.data, p.bk.data,
            p.wv.data, p.bv.data, p.wo.data, p.bo.data, h)
        np.testing.assert_allclose(got.data, want, rtol=1e-9)

    def test_wide_input_matches_oracle(self):
        # key/value/query inputs wider than d_model (fused-branch shape)
        rng = RngState(8)
        d_model, h = 6, 3
        p = A.MultiHeadParams.create(rng, d_model, h, d_in_q=12, d_in_kv=12)
        f = rng.normal(1.0, (4, 12))
        got = A.multi_head(Tensor(f), Tensor(f), Tensor(f), p)
        want = reference.multi_head_attention(
            f, f, f, p.wq.data, p.bq.data, p.wk.data, p.bk.data,
            p.wv.data, p.bv.data, p.wo.data, p.bo.data, h)
        np.testing.assert_allclose(got.data, want, rtol=1e-9)

    def test_output_shape_law(self):
        rng = RngState(9)
        p = A.MultiHeadParams.create(rng, 8, 2)
        for m, n in [(1, 1), (3, 7), (6, 2)]:
            out = A.multi_head(Tensor(rng.normal(1.0, (m, 8))),
                               Tensor(rng.normal(1.0, (n, 8))),
                               Tensor(rng.normal(1.0, (n, 8))), p)
            assert out.shape == (m, 8)

    def test_key_value_permutation_invariance(self):
        rng = RngState(10)
        p = A.MultiHeadParams.create(rng, 8, 2)
        q = Tensor(rng.normal(1.0, (3, 8)))
        kv = rng.normal(1.0, (5, 8))
        perm = RngState(11).permutation(5)
        out1 = A.multi_head(q, Tensor(kv), Tensor(kv), p)
        out2 = A.multi_head(q, Tensor(kv[perm]), Tensor(kv[perm]), p)
        np.testing.assert_allclose(out1.data, out2.data, rtol=1e-9)

    def test_divisibility_checked_at_construction(self):
        with pytest.raises(ConfigError):
            A.MultiHeadParams.create(RngState(0), 10, 3)

    def test_empty_sequence_rejected(self):
        p = A.MultiHeadParams.create(RngState(0), 4, 2)
        with pytest.raises(InputError):
            A.multi_head(Tensor(np.zeros((0, 4))), Tensor(np.zeros((2, 4))),
                         Tensor(np.zeros((2, 4))), p)

    def test_gradients(self):
        rng = RngState(12)
        p = A.MultiHeadParams.create(rng, 6, 2)
        q = Tensor(rng.normal(1.0, (3, 6)), requires_grad=True)
        kv = Tensor(rng.normal(1.0, (4, 6)), requires_grad=True)
        params = p.parameters() + [("q", q), ("kv", kv)]
        report = grad_check(
            lambda: T.sum_all(T.relu(A.multi_head(q, kv, kv, p))),
            params, eps=1e-5)
        assert report.max_rel_error < 1e-3, report.summary()


class TestPositionalEncoding:
    def test_row_zero_alternates_zero_one(self):
        tab = A.positional_encoding(16, 8)
        np.testing.assert_allclose(tab.table[0, 0::2], np.zeros(4), atol=1e-12)
        np.testing.assert_allclose(tab.table[0, 1::2], np.ones(4), atol=1e-12)

    def test_column_zero_is_sin_pos(self):
        tab = A.positional_encoding(32, 8)
        np.testing.assert_allclose(tab.table[:, 0],
                                   np.sin(np.arange(32.0)), rtol=1e-6)

    def test_entries_bounded(self):
        tab = A.positional_encoding(512, 64)
        assert np.all(tab.table >= -1.0) and np.all(tab.table <= 1.0)

    def test_rows_distinct_below_100(self):
        tab = A.positional_encoding(100, 16)
        for i in range(0, 100, 7):
            for j in range(i + 1, 100, 13):
                assert np.linalg.norm(tab.table[i] - tab.table[j]) > 0.0

    def test_odd_dim_rejected(self):
        with pytest.raises(ConfigError):
            A.positional_encoding(10, 7)

    def test_rows_beyond_table_rejected(self):
        tab = A.positional_encoding(4, 8)
        with pytest.raises(ShapeError):
            tab.rows(5)


class TestAddPosition:
    def test_zero_input_identity_affine_gives_pe_rows(self):
        tab = A.positional_encoding(8, 6)
        gamma = Tensor(np.ones(6))
        beta = Tensor(np.zeros(6))
        out = A.add_position(Tensor(np.zeros((3, 6))), tab, gamma, beta)
        np.testing.assert_allclose(out.data, tab.table[:3], atol=1e-12)

    def test_matches_composition_of_verified_ops(self):
        rng = RngState(13)
        x = rng.normal(1.0, (5, 8))
        gamma = rng.normal(1.0, (8,))
        beta = rng.normal(1.0, (8,))
        tab = A.positional_encoding(16, 8)
        got = A.add_position(Tensor(x), tab, Tensor(gamma), Tensor(beta))
        want = reference.layer_norm(x, gamma, beta) + tab.table[:5]
        np.testing.assert_allclose(got.data, want, rtol=1e-9, atol=1e-9)

    def test_single_row(self):
        tab = A.positional_encoding(4, 6)
        x = RngState(14).normal(1.0, (1, 6))
        got = A.add_position(Tensor(x), tab, Tensor(np.ones(6)),
                             Tensor(np.zeros(6)))
        want = reference.layer_norm(x, np.ones(6), np.zeros(6)) + tab.table[:1]
        np.testing.assert_allclose(got.data, want, rtol=1e-9, atol=1e-9)


class TestFeedForward:
    def test_zero_weights_broadcast_second_bias(self):
        p = A.FeedForwardParams.create(RngState(15), 4, 8)
        p.w1.data[:] = 0
        p.w2.data[:] = 0
        p.b2.data[:] = np.arange(4.0)
        out = A.feed_forward(Tensor(np.ones((3, 4))), p, "eval")
        np.testing.assert_allclose(out.data, np.tile(np.arange(4.0), (3, 1)))

    def test_eval_equals_train_with_zero_dropout(self):
        rng = RngState(16)
        p_drop = A.FeedForwardParams.create(RngState(17), 4, 8, dropout_rate=0.3)
        p_zero = A.FeedForwardParams.create(RngState(17), 4, 8, dropout_rate=0.0)
        x = Tensor(rng.normal(1.0, (5, 4)))
        a = A.feed_forward(x, p_drop, "eval")
        b = A.feed_forward(x, p_zero, "train", rng=RngState(0))
        np.testing.assert_array_equal(a.data, b.data)

    def test_matches_scalar_oracle(self):
        rng = RngState(18)
        p = A.FeedForwardParams.create(rng, 4, 8, dropout_rate=0.0)
        x = rng.normal(1.0, (3, 4))
        got = A.feed_forward(Tensor(x), p, "eval")
        hidden = np.maximum(reference.matmul(x, p.w1.data) + p.b1.data, 0.0)
        want = reference.matmul(hidden, p.w2.data) + p.b2.data
        np.testing.assert_allclose(got.data, want, rtol=1e-10)

    def test_narrow_hidden_rejected(self):
        with pytest.raises(ConfigError):
            A.FeedForwardParams.create(RngState(0), 8, 4)

    def test_bad_mode_rejected(self):
        p = A.FeedForwardParams.create(RngState(0), 4, 8)
        with pytest.raises(InputError):
            A.feed_forward(Tensor(np.zeros((2, 4))), p, "test")

    def test_gradients(self):
        rng = RngState(19)
        p = A.FeedForwardParams.create(rng, 4, 8, dropout_rate=0.0)
        x = Tensor(rng.normal(1.0, (3, 4)), requires_grad=True)
        report = grad_check(
            lambda: T.sum_all(T.relu(A.feed_forward(x, p, "eval"))),
            p.parameters() + [("x", x)], eps=1e-5)
        assert report.max_rel_error < 1e-3, report.summary()


class TestRecorder:
    def test_captures_every_weight_matrix(self):
        rng = RngState(20)
        p = A.MultiHeadParams.create(rng, 8, 2)
        x = Tensor(rng.normal(1.0, (3, 8)))
        with A.record_attention() as sink:
            A.multi_head(x, x, x, p, label="block0")
            A.scaled_dot_attention(x, x, x, label="plain")
        assert [r.label for r in sink] == ["block0", "plain"]
        assert sink[0].weights.shape == (2, 3, 3)
        assert sink[1].weights.shape == (3, 3)
        for r in sink:
            np.testing.assert_allclose(r.weights.sum(axis=-1),
                                       np.ones(r.weights.shape[:-1]),
                                       atol=1e-6)

    def test_no_capture_outside_context(self):
        rng = RngState(21)
        p = A.MultiHeadParams.create(rng, 4, 2)
        x = Tensor(rng.normal(1.0, (2, 4)))
        with A.record_attention() as sink:
            pass
        A.multi_head(x, x, x, p)
        assert sink == []

    def test_nested_contexts_restore_outer(self):
        rng = RngState(22)
        p = A.MultiHeadParams.create(rng, 4, 2)
        x = Tensor(rng.normal(1.0, (2, 4)))
        with A.record_attention() as outer:
            with A.record_attention() as inner:
                A.multi_head(x, x, x, p)
            A.multi_head(x, x, x, p)
        assert len(inner) == 1 and len(outer) == 1


def test_multi_head_stacked_matches_per_sequence():
    """A (B, n, d) stack must give exactly the per-sequence results."""
    with T.precision("float64"):
        rng = RngState(23)
        p = A.MultiHeadParams.create(rng, 8, 2)
        q = rng.normal(1.0, (3, 5, 8))
        kv = rng.normal(1.0, (3, 4, 8))
        stacked = A.multi_head(Tensor(q), Tensor(kv), Tensor(kv), p)
        for b in range(3):
            one = A.multi_head(Tensor(q[b]), Tensor(kv[b]), Tensor(kv[b]), p)
            np.testing.assert_allclose(stacked.data[b], one.data,
                                       rtol=0, atol=1e-12)


def test_multi_head_stacked_records_batched_weights():
    rng = RngState(24)
    p = A.MultiHeadParams.create(rng, 8, 2)
    x = Tensor(rng.normal(1.0, (3, 4, 8)))
    with A.record_attention() as sink:
        A.multi_head(x, x, x, p, label="stacked")
    assert sink[0].weights.shape == (3, 2, 4, 4)
    np.testing.assert_allclose(sink[0].weights.sum(axis=-1),
                               np.ones((3, 2, 4)), atol=1e-6)


def test_multi_head_rejects_mismatched_batch_axes():
    rng = RngState(25)
    p = A.MultiHeadParams.create(rng, 8, 2)
    q = Tensor(rng.normal(1.0, (3, 4, 8)))
    kv = Tensor(rng.normal(1.0, (2, 4, 8)))
    with pytest.raises(ShapeError):
        A.multi_head(q, kv, kv, p)
