"""Co-attention encoder units, the stacked encoder, and the memory cell."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import reference
from coreason import encoder as E
from coreason import tensor as T
from coreason.encoder import (CoAttentionBlockParams, EncoderParams,
                              MemoryCell, UnitParams, co_attention_stack,
                              guided_attention_unit, inject_memory,
                              memory_read, memory_write, self_attention_unit)
from coreason.errors import ConfigError, NumericError, ShapeError
from coreason.gradcheck import grad_check
from coreason.tensor import RngState, Tensor


@pytest.fixture(autouse=True)
def _float64():
    with T.precision("float64"):
        yield


D, H, DFF = 6, 2, 8


def unit_params(seed=0):
    return UnitParams.create(RngState(seed), D, H, DFF, dropout_rate=0.0)


def oracle_unit(x, guide, p):
    """Residual + layer-norm around attention, then around feed-forward."""
    att = reference.multi_head_attention(
        x, guide, guide, p.mha.wq.data, p.mha.bq.data, p.mha.wk.data,
        p.mha.bk.data, p.mha.wv.data, p.mha.bv.data, p.mha.wo.data,
        p.mha.bo.data, p.mha.h)
    h = reference.layer_norm(x + att, p.gamma1.data, p.beta1.data)
    hidden = np.maximum(reference.matmul(h, p.ff.w1.data) + p.ff.b1.data, 0.0)
    ff = reference.matmul(hidden, p.ff.w2.data) + p.ff.b2.data
    return reference.layer_norm(h + ff, p.gamma2.data, p.beta2.data)


class TestSelfAttentionUnit:
    def test_shape_preserved(self):
        p = unit_params(1)
        for n in (1, 3, 9):
            x = Tensor(RngState(n).normal(1.0, (n, D)))
            assert self_attention_unit(x, p, "eval").shape == (n, D)

    def test_identical_rows_stay_identical(self):
        p = unit_params(2)
        row = RngState(3).normal(1.0, (1, D))
        out = self_attention_unit(Tensor(np.repeat(row, 3, axis=0)), p, "eval")
        for i in (1, 2):
            np.testing.assert_allclose(out.data[i], out.data[0], rtol=1e-12)

    def test_matches_compositional_oracle(self):
        p = unit_params(4)
        x = RngState(5).normal(1.0, (4, D))
        got = self_attention_unit(Tensor(x), p, "eval")
        np.testing.assert_allclose(got.data, oracle_unit(x, x, p),
                                   rtol=1e-8, atol=1e-10)


class TestGuidedAttentionUnit:
    def test_singleton_guide(self):
        p = unit_params(6)
        rng = RngState(7)
        x = rng.normal(1.0, (4, D))
        y = rng.normal(1.0, (1, D))
        got = guided_attention_unit(Tensor(x), Tensor(y), p, "eval")
        np.testing.assert_allclose(got.data, oracle_unit(x, y, p),
                                   rtol=1e-8, atol=1e-10)

    def test_output_aligned_to_x(self):
        p = unit_params(8)
        rng = RngState(9)
        for n_x, n_y in [(2, 7), (5, 1), (3, 3)]:
            out = guided_attention_unit(Tensor(rng.normal(1.0, (n_x, D))),
                                        Tensor(rng.normal(1.0, (n_y, D))),
                                        p, "eval")
            assert out.shape == (n_x, D)

    def test_matches_compositional_oracle(self):
        p = unit_params(10)
        rng = RngState(11)
        x = rng.normal(1.0, (3, D))
        y = rng.normal(1.0, (5, D))
        got = guided_attention_unit(Tensor(x), Tensor(y), p, "eval")
        np.testing.assert_allclose(got.data, oracle_unit(x, y, p),
                                   rtol=1e-8, atol=1e-10)


class TestCoAttentionStack:
    def test_single_block_equals_manual_units(self):
        params = EncoderParams.create(RngState(12), D, H, DFF, n_blocks=1,
                                      dropout_rate=0.0)
        rng = RngState(13)
        q = rng.normal(1.0, (4, D))
        r = rng.normal(1.0, (3, D))
        zq, zr = co_attention_stack(Tensor(q), Tensor(r), params, "eval")
        b = params.blocks[0]
        q_self = oracle_unit(q, q, b.sa_q)
        r_self = oracle_unit(r, r, b.sa_r)
        np.testing.assert_allclose(zq.data, oracle_unit(q_self, r_self, b.ga_q),
                                   rtol=1e-7, atol=1e-9)
        np.testing.assert_allclose(zr.data, oracle_unit(r_self, q_self, b.ga_r),
                                   rtol=1e-7, atol=1e-9)

    def test_shapes_preserved_across_blocks(self):
        params = EncoderParams.create(RngState(14), D, H, DFF, n_blocks=3,
                                      dropout_rate=0.0)
        rng = RngState(15)
        zq, zr = co_attention_stack(Tensor(rng.normal(1.0, (5, D))),
                                    Tensor(rng.normal(1.0, (2, D))),
                                    params, "eval")
        assert zq.shape == (5, D) and zr.shape == (2, D)

    def test_zeroed_branches_reduce_to_layer_norm_cascade(self):
        params = EncoderParams.create(RngState(16), D, H, DFF, n_blocks=1,
                                      dropout_rate=0.0)
        rng = RngState(17)
        q = rng.normal(1.0, (3, D))
        r = rng.normal(1.0, (2, D))
        with E.zeroed_branches():
            zq, zr = co_attention_stack(Tensor(q), Tensor(r), params, "eval")
        b = params.blocks[0]

        def cascade(x, unit_a, unit_b):
            y = reference.layer_norm(x, unit_a.gamma1.data, unit_a.beta1.data)
            y = reference.layer_norm(y, unit_a.gamma2.data, unit_a.beta2.data)
            y = reference.layer_norm(y, unit_b.gamma1.data, unit_b.beta1.data)
            return reference.layer_norm(y, unit_b.gamma2.data, unit_b.beta2.data)

        np.testing.assert_allclose(zq.data, cascade(q, b.sa_q, b.ga_q),
                                   rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(zr.data, cascade(r, b.sa_r, b.ga_r),
                                   rtol=1e-9, atol=1e-12)

    def test_eval_mode_is_deterministic(self):
        params = EncoderParams.create(RngState(18), D, H, DFF, n_blocks=2,
                                      dropout_rate=0.3)
        rng = RngState(19)
        q = Tensor(rng.normal(1.0, (4, D)))
        r = Tensor(rng.normal(1.0, (3, D)))
        a = co_attention_stack(q, r, params, "eval")
        b = co_attention_stack(q, r, params, "eval")
        np.testing.assert_array_equal(a[0].data, b[0].data)
        np.testing.assert_array_equal(a[1].data, b[1].data)

    def test_block_count_validated(self):
        with pytest.raises(ConfigError):
            EncoderParams.create(RngState(0), D, H, DFF, n_blocks=0)


class TestMemoryCell:
    def test_fresh_cell_reads_empty(self):
        cell = MemoryCell(4, D)
        assert memory_read(cell).shape == (0, D)
        assert len(cell) == 0 and cell.t == 0

    def test_reads_in_write_order(self):
        cell = MemoryCell(4, D)
        v1 = np.arange(D, dtype=np.float64)
        v2 = -v1
        memory_write(cell, Tensor(v1))
        memory_write(cell, Tensor(v2))
        got = memory_read(cell).data
        np.testing.assert_array_equal(got, np.stack([v1, v2]))

    def test_fifo_eviction_by_hand_for_capacity_3(self):
        cell = MemoryCell(3, D)
        writes = [np.full(D, float(i)) for i in range(4)]
        for w in writes:
            memory_write(cell, Tensor(w))
        got = memory_read(cell).data
        np.testing.assert_array_equal(got, np.stack(writes[1:]))
        assert cell.t == 4

    def test_capacity_law(self):
        cell = MemoryCell(5, D)
        for i in range(5):
            memory_write(cell, Tensor(np.full(D, float(i))))
            assert len(cell) == i + 1
        memory_write(cell, Tensor(np.zeros(D)))
        assert len(cell) == 5

    def test_stored_values_bitwise_equal(self):
        cell = MemoryCell(2, D)
        v = RngState(20).normal(1.0, (D,))
        memory_write(cell, Tensor(v))
        assert memory_read(cell).data[0].tobytes() == v.tobytes()

    def test_non_finite_write_rejected(self):
        cell = MemoryCell(2, D)
        bad = np.zeros(D)
        bad[0] = np.nan
        with pytest.raises(NumericError):
            memory_write(cell, Tensor(bad))

    def test_wrong_width_rejected(self):
        with pytest.raises(ShapeError):
            memory_write(MemoryCell(2, D), Tensor(np.zeros(D + 1)))

    def test_state_round_trip(self):
        cell = MemoryCell(3, D)
        for i in range(4):
            memory_write(cell, Tensor(np.full(D, float(i))))
        clone = MemoryCell.from_state(cell.state())
        np.testing.assert_array_equal(memory_read(clone).data,
                                      memory_read(cell).data)
        assert clone.t == cell.t and clone.capacity == cell.capacity

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(min_value=0, max_value=2), max_size=40),
           st.integers(min_value=1, max_value=6))
    def test_capacity_bound_under_random_op_sequences(self, ops, capacity):
        cell = MemoryCell(capacity, D)
        wrote = 0
        for i, op in enumerate(ops):
            if op == 0:
                memory_write(cell, Tensor(np.full(D, float(i))))
                wrote += 1
                # read-after-write: newest entry is the last row
                np.testing.assert_array_equal(memory_read(cell).data[-1],
                                              np.full(D, float(i)))
            elif op == 1:
                assert memory_read(cell).shape == (len(cell), D)
            else:
                cell.reset()
                wrote = 0
            assert len(cell) <= capacity
            assert len(cell) == min(wrote, capacity)


class TestInjectMemory:
    def test_empty_cell_appends_projection_bias(self):
        params = EncoderParams.create(RngState(21), D, H, DFF, n_blocks=1)
        params.mem_b.data[:] = np.arange(D, dtype=np.float64)
        z = Tensor(RngState(22).normal(1.0, (3, D)))
        out = inject_memory(z, MemoryCell(4, D), params)
        assert out.shape == (4, D)
        np.testing.assert_array_equal(out.data[:3], z.data)
        np.testing.assert_allclose(out.data[3], params.mem_b.data)

    def test_missing_cell_behaves_like_empty(self):
        params = EncoderParams.create(RngState(23), D, H, DFF, n_blocks=1)
        z = Tensor(RngState(24).normal(1.0, (2, D)))
        a = inject_memory(z, None, params)
        b = inject_memory(z, MemoryCell(4, D), params)
        np.testing.assert_array_equal(a.data, b.data)

    def test_single_entry_projected(self):
        params = EncoderParams.create(RngState(25), D, H, DFF, n_blocks=1)
        v = RngState(26).normal(1.0, (D,))
        cell = MemoryCell(4, D)
        memory_write(cell, Tensor(v))
        out = inject_memory(Tensor(np.zeros((1, D))), cell, params)
        want = reference.matmul(v.reshape(1, D), params.mem_w.data)[0] \
            + params.mem_b.data
        np.testing.assert_allclose(out.data[1], want, rtol=1e-10)

    def test_two_entries_use_their_mean(self):
        params = EncoderParams.create(RngState(27), D, H, DFF, n_blocks=1)
        rng = RngState(28)
        v1, v2 = rng.normal(1.0, (D,)), rng.normal(1.0, (D,))
        cell = MemoryCell(4, D)
        memory_write(cell, Tensor(v1))
        memory_write(cell, Tensor(v2))
        out = inject_memory(Tensor(np.zeros((1, D))), cell, params)
        mean = (v1 + v2) / 2.0
        want = reference.matmul(mean.reshape(1, D), params.mem_w.data)[0] \
            + params.mem_b.data
        np.testing.assert_allclose(out.data[1], want, rtol=1e-10)


def test_encoder_with_memory_passes_grad_check():
    params = EncoderParams.create(RngState(29), 4, 2, 4, n_blocks=1,
                                  dropout_rate=0.0)
    rng = RngState(30)
    q = Tensor(rng.normal(1.0, (3, 4)), requires_grad=True)
    r = Tensor(rng.normal(1.0, (2, 4)), requires_grad=True)
    cell = MemoryCell(4, 4)
    memory_write(cell, Tensor(rng.normal(1.0, (4,))))
    stored_before = memory_read(cell).data.copy()

    def loss():
        zq, zr = co_attention_stack(q, r, params, "eval")
        zq = inject_memory(zq, cell, params)
        zr = inject_memory(zr, cell, params)
        return T.sum_all(T.relu(T.concat([zq, zr], axis=0)))

    names = params.parameters() + [("q", q), ("r", r)]
    report = grad_check(loss, names, eps=1e-5,
                        max_coords_per_tensor=6, rng=RngState(31))
    assert report.max_rel_error < 1e-3, report.summary()
    # stored entries are constants: untouched by forward/backward
    np.testing.assert_array_equal(memory_read(cell).data, stored_before)
