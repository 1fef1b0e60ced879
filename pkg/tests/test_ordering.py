import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rdvq import gradcore as G
from rdvq import ordering as od
from rdvq import tokenizer as tk
from rdvq.gradcore import DimensionError, Parameter


def layout(*grids):
    return tk.ScaleLayout.from_grids(grids)


def predecessors_oracle(order):
    L = len(order)
    return np.array([[order[i] > order[j] for j in range(L)] for i in range(L)])


class TestOrder:
    def test_three_scale_segments(self):
        plan = od.build_order(layout((1, 1), (2, 2), (4, 4)))
        assert plan.segments_per_scale == (4, 8, 16)
        assert plan.offsets == (0, 4, 12)
        assert plan.num_orders == 28
        assert plan.order.min() >= 0 and plan.order.max() < 28

    def test_single_scale_raster(self):
        plan = od.build_order(layout((2, 2)))
        np.testing.assert_array_equal(plan.order, [0, 1, 2, 3])

    def test_second_scale_fully_after_first(self):
        plan = od.build_order(layout((2, 2), (2, 4)))
        np.testing.assert_array_equal(plan.order[4:], np.arange(4, 12))
        M = plan.mask
        assert M[4:, :4].all()
        assert not M[:4, 4:].any()

    def test_scale_ranges(self):
        plan = od.build_order(layout((2, 2), (4, 4), (8, 8)))
        for info, off, n in zip(plan.layout.scales, plan.offsets, plan.segments_per_scale):
            o = plan.order[info.offset:info.offset + info.length]
            assert o.min() >= off and o.max() < off + n
            np.testing.assert_array_equal(np.unique(o), np.arange(off, off + n))

    def test_uneven_segments_front_loaded(self):
        assert od.segment_sizes(5, 4) == [2, 1, 1, 1]
        assert od.segment_sizes(1, 4) == [1, 0, 0, 0]
        plan = od.build_order(layout((1, 1)))
        np.testing.assert_array_equal(plan.order, [0])

    def test_perm_is_bijection(self):
        plan = od.build_order(layout((1, 2), (2, 4), (4, 8)))
        assert sorted(plan.perm) == list(range(plan.length))
        np.testing.assert_array_equal(plan.perm[plan.inverse_perm], np.arange(plan.length))
        assert (np.diff(plan.seq_order) >= 0).all()

    def test_levels(self):
        plan = od.build_order(layout((1, 1), (2, 2), (4, 4)))
        assert len(plan.levels) == 21
        assert plan.levels[0] == 0 and plan.levels[-1] == 27


class TestMask:
    def test_chain(self):
        np.testing.assert_array_equal(od.build_mask([0, 1, 2]),
                                      [[0, 0, 0], [1, 0, 0], [1, 1, 0]])

    def test_same_order_invisible(self):
        assert not od.build_mask([0, 0]).any()

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 6), min_size=1, max_size=12))
    def test_matches_pairwise_oracle(self, order):
        np.testing.assert_array_equal(od.build_mask(order), predecessors_oracle(order))

    def test_plan_mask(self):
        plan = od.build_order(layout((1, 1), (2, 2), (4, 4)))
        np.testing.assert_array_equal(plan.mask, predecessors_oracle(plan.order))
        np.testing.assert_array_equal(plan.seq_mask, predecessors_oracle(plan.seq_order))


class TestConditionalInputs:
    def test_shift_right(self):
        plan = od.build_order(layout((2, 2)))
        y = np.arange(8.0).reshape(1, 4, 2)
        start = Parameter(np.array([-1.0, -2.0]), "start")
        seq = od.build_conditional_inputs(y, plan, start).inputs.value[0]
        np.testing.assert_array_equal(seq, [[-1, -2], [0, 1], [2, 3], [4, 5]])

    def test_zero_inputs(self):
        plan = od.build_order(layout((1, 1), (2, 2), (4, 4)))
        seq = od.build_conditional_inputs(np.zeros((2, 21, 3)), plan, Parameter(np.zeros(3), "s"))
        assert not seq.inputs.value.any()

    def test_segment_shift_rule(self):
        plan = od.build_order(layout((1, 1), (2, 2), (4, 4)))
        src = plan.source
        assert src[0] == od.START
        # scale 1: first token sees the coarse token, then shift within the scale
        np.testing.assert_array_equal(src[1:5], [0, 1, 2, 3])
        # scale 2: the first segment sees the last segment of scale 1
        assert src[5] == 4
        np.testing.assert_array_equal(src[6:21], np.arange(5, 20))

    def test_broadcast_of_last_segment(self):
        # 8 coarse tokens in 4 segments of 2; 16 fine tokens in 8 segments of 2
        plan = od.build_order(layout((2, 4), (4, 4)))
        np.testing.assert_array_equal(plan.source[8:10], [6, 7])
        plan = od.build_order(layout((1, 1), (2, 4), (4, 8)))
        # 8 tokens in 8 segments, then 32 tokens in 16 segments of 2, fed by one token
        np.testing.assert_array_equal(plan.source[9:11], [8, 8])

    def test_only_final_token_unused(self):
        plan = od.build_order(layout((1, 1), (2, 2), (4, 4)))
        unused = set(range(21)) - set(plan.source.tolist())
        assert unused == {20}

    def test_causal_by_perturbation(self):
        lay = layout((1, 2), (2, 4), (4, 8))
        plan = od.build_order(lay)
        rng = np.random.default_rng(0)
        y = rng.normal(size=(1, plan.length, 2))
        start = Parameter(rng.normal(size=2), "s")
        base = od.build_conditional_inputs(y, plan, start).inputs.value
        seq_order = plan.seq_order
        for j in range(plan.length):
            y2 = y.copy()
            y2[0, j] += 1.0
            changed = np.abs(od.build_conditional_inputs(y2, plan, start).inputs.value - base).max(-1)[0] > 0
            assert (seq_order[changed] > plan.order[j]).all()

    def test_gradient_to_start_token(self):
        plan = od.build_order(layout((1, 1), (2, 2)))
        start = Parameter(np.ones(2), "s")
        seq = od.build_conditional_inputs(np.zeros((3, 5, 2)), plan, start)
        g = G.backward(G.sum(seq.inputs), [start])["s"]
        np.testing.assert_array_equal(g, [3.0, 3.0])

    def test_length_mismatch(self):
        plan = od.build_order(layout((2, 2)))
        with pytest.raises(DimensionError):
            od.build_conditional_inputs(np.zeros((1, 3, 2)), plan, Parameter(np.zeros(2), "s"))


class TestWindows:
    def test_identity_partition(self):
        lay = layout((1, 1), (2, 2), (4, 4))
        part = od.partition_layout(lay, [1, 2, 4])
        assert part.num_groups == 1
        assert sorted(part.groups[0]) == list(range(21))

    def test_four_groups(self):
        lay = tk.ScaleLayout.from_grids([(2, 2), (4, 4), (8, 8)], [16, 8, 4])
        part = od.partition_layout(lay, [1, 2, 4])
        assert part.num_groups == 4
        assert part.group_layout.num_tokens == 21
        assert all(len(g) == 1 + 4 + 16 for g in part.groups)

    def test_colocation(self):
        lay = tk.ScaleLayout.from_grids([(2, 2), (4, 4), (8, 8)], [16, 8, 4])
        part = od.partition_layout(lay, [1, 2, 4])
        # window (0, 1): coarse token 1; fine tokens in columns 2..3 of rows 0..1
        g = part.groups[1]
        assert g[0] == 1
        np.testing.assert_array_equal(g[1:5], 4 + np.array([2, 3, 6, 7]))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 10**6))
    def test_round_trip(self, gh, gw, seed):
        lay = tk.ScaleLayout.from_grids([(gh, gw), (2 * gh, 2 * gw), (4 * gh, 4 * gw)], [16, 8, 4])
        part = od.partition_layout(lay, [1, 2, 4])
        assert sorted(part.groups.reshape(-1)) == list(range(lay.num_tokens))
        x = np.random.default_rng(seed).normal(size=(2, lay.num_tokens, 3))
        np.testing.assert_array_equal(part.scatter(part.gather(x), 2), x)

    def test_inconsistent_windows(self):
        lay = tk.ScaleLayout.from_grids([(2, 2), (4, 4), (8, 8)], [16, 8, 4])
        with pytest.raises(DimensionError):
            od.partition_layout(lay, [1, 1, 4])

    def test_window_partition_on_latents(self):
        m = tk.MultiScaleLatents([G.constant(np.zeros((1, 2, s, s))) for s in (2, 4, 8)], True, [16, 8, 4])
        groups = od.window_partition(m, [1, 2, 4])
        assert len(groups) == 4
