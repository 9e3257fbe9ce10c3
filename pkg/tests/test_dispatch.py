from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from slicemoe import autodiff as ad
from slicemoe import numerics as nx
from slicemoe.autodiff import Variable
from slicemoe.config import SliceMoEConfig
from slicemoe.dispatch import (
    ExpertParams,
    active_param_count,
    count_expert_rows,
    dispatch_grouped,
    dispatch_naive,
    expert_ffn,
    expert_block_params,
    gate_and_assign,
)
from slicemoe.errors import ContractError, DimensionError
from slicemoe.router import RoutingDecision

from instances import random_instance, run_instance
from oracles import expert_ffn_rowwise


def make_decision(ids, weights, n_tokens, n_slices):
    w = ad.constant(np.asarray(weights, dtype=float))
    return RoutingDecision(np.asarray(ids), w, w, n_tokens, n_slices)


def zero_experts(n_experts, w, f):
    cfg = SliceMoEConfig(d=w, n_slices=1, top_k=1, n_experts=n_experts, expert_hidden=f)
    experts = ExpertParams.init(cfg, nx.Rng(0))
    for v in experts.named().values():
        v.value = np.zeros_like(v.value)
    return experts


def identity_experts(n_experts, w):
    experts = zero_experts(n_experts, w, w)
    experts.w1.value[:] = np.eye(w)
    experts.w2.value[:] = np.eye(w)
    return experts


class TestExpertFFN:
    def test_zero_params(self, rng):
        out = expert_ffn(ad.constant(rng.normal(size=(3, 4))), zero_experts(2, 4, 8), 1)
        np.testing.assert_array_equal(out.value, 0.0)

    def test_identity_on_nonnegative(self, rng):
        x = np.abs(rng.normal(size=(5, 3)))
        np.testing.assert_array_equal(expert_ffn(ad.constant(x), identity_experts(1, 3), 0).value, x)

    def test_batched_equals_rowwise(self, tiny_cfg, rng):
        experts = ExpertParams.init(tiny_cfg, nx.Rng(2))
        experts.b1.value = rng.normal(size=experts.b1.shape)
        x = rng.normal(size=(6, 4))
        out = expert_ffn(ad.constant(x), experts, 2).value
        ref = expert_ffn_rowwise(x, *(v.value[2] for v in experts.named().values()))
        assert out.tobytes() == ref.tobytes()

    def test_width_mismatch(self, tiny_cfg):
        with pytest.raises(DimensionError):
            expert_ffn(ad.constant(np.ones((2, 5))), ExpertParams.init(tiny_cfg, nx.Rng(0)), 0)

    def test_default_hidden_width(self):
        experts = ExpertParams.init(SliceMoEConfig(), nx.Rng(0))
        assert experts.w1.shape == (16, 8, 32) and experts.w2.shape == (16, 32, 8)


class TestGateAndAssign:
    def test_unit_weight_is_raw_slice(self):
        slabs = np.array([[[4.0, 8.0]]])
        batch = gate_and_assign(slabs, make_decision([[0]], [[1.0]], 1, 1), 1)
        np.testing.assert_array_equal(batch.inputs[0].value, [[4.0, 8.0]])

    def test_quarter_weight(self):
        slabs = np.array([[[4.0, 8.0]]])
        batch = gate_and_assign(slabs, make_decision([[0]], [[0.25]], 1, 1), 1)
        np.testing.assert_array_equal(batch.inputs[0].value, [[1.0, 2.0]])

    def test_conservation_small(self, rng):
        ids = [[0, 1], [1, 0], [0, 1], [1, 0]]
        batch = gate_and_assign(rng.normal(size=(2, 2, 3)), make_decision(ids, np.full((4, 2), 0.5), 2, 2), 2)
        assert batch.counts.sum() == 8

    @given(st.integers(0, 10_000))
    def test_origins_unique_and_complete(self, seed):
        g = np.random.default_rng(seed)
        b, s, e = int(g.integers(1, 6)), int(g.integers(1, 4)), int(g.integers(1, 6))
        k = int(g.integers(1, e + 1))
        ids = np.argsort(g.random((b * s, e)), axis=1)[:, :k]
        batch = gate_and_assign(g.normal(size=(b, s, 2)), make_decision(ids, g.random((b * s, k)), b, s), e)
        origins = np.concatenate(batch.origins)
        assert batch.counts.sum() == b * s * k
        assert len({tuple(o) for o in origins}) == b * s * k
        for exp, org in enumerate(batch.origins):
            for tok, sl, rank in org:
                assert ids[tok * s + sl, rank] == exp


class TestDispatchPaths:
    def test_identity_end_to_end(self, rng):
        x = np.abs(rng.normal(size=(3, 4)))
        decision = make_decision(np.zeros((3, 1), int), np.ones((3, 1)), 3, 1)
        out = dispatch_naive(x[:, None, :], decision, identity_experts(1, 4))
        np.testing.assert_array_equal(out.value, x)

    def test_zero_weight_second_rank_matches_single_expert(self, rng):
        cfg = SliceMoEConfig(d=4, n_slices=2, top_k=2, n_experts=3)
        experts = ExpertParams.init(cfg, nx.Rng(1))
        slabs = rng.normal(size=(2, 2, 2))
        two = make_decision([[0, 1], [2, 0], [1, 2], [0, 2]], np.tile([1.0, 0.0], (4, 1)), 2, 2)
        one = make_decision([[0], [2], [1], [0]], np.ones((4, 1)), 2, 2)
        np.testing.assert_array_equal(dispatch_naive(slabs, two, experts).value, dispatch_naive(slabs, one, experts).value)

    def test_sums_over_ranks(self, rng):
        cfg = SliceMoEConfig(d=2, n_slices=1, top_k=2, n_experts=2)
        experts = ExpertParams.init(cfg, nx.Rng(1))
        slab = rng.normal(size=(1, 1, 2))
        out = dispatch_naive(slab, make_decision([[1, 0]], [[0.7, 0.3]], 1, 1), experts).value
        x = ad.constant(slab[0])
        y1 = expert_ffn(ad.scale(x, 0.7), experts, 1).value
        y0 = expert_ffn(ad.scale(x, 0.3), experts, 0).value
        assert out.tobytes() == (y1 + y0).tobytes()

    def test_empty_experts_are_skipped(self, rng):
        cfg = SliceMoEConfig(d=4, n_slices=2, top_k=1, n_experts=5)
        experts = ExpertParams.init(cfg, nx.Rng(0))
        decision = make_decision([[3], [3]], [[0.9], [0.4]], 1, 2)
        with count_expert_rows(5) as c:
            out = dispatch_grouped(rng.normal(size=(1, 2, 2)), decision, experts)
        assert c.rows.tolist() == [0, 0, 0, 2, 0]
        assert out.shape == (1, 4)

    def test_single_token_single_slice(self, rng):
        cfg = SliceMoEConfig(d=3, n_slices=1, top_k=1, n_experts=2)
        experts = ExpertParams.init(cfg, nx.Rng(0))
        slab = rng.normal(size=(1, 1, 3))
        out = dispatch_grouped(slab, make_decision([[1]], [[0.6]], 1, 1), experts)
        ref = expert_ffn(ad.constant(0.6 * slab[0]), experts, 1)
        assert out.value.tobytes() == ref.value.tobytes()

    def test_large_instance_bitwise(self, rng):
        cfg = SliceMoEConfig(d=64, n_slices=8, top_k=2, n_experts=16)
        experts = ExpertParams.init(cfg, nx.Rng(3))
        ids = np.argsort(rng.random((64 * 8, 16)), axis=1)[:, :2]
        decision = make_decision(ids, rng.random((64 * 8, 2)), 64, 8)
        slabs = rng.normal(size=(64, 8, 8))
        naive = dispatch_naive(slabs, decision, experts).value
        assert dispatch_grouped(slabs, decision, experts).value.tobytes() == naive.tobytes()
        assert dispatch_grouped(slabs, decision, experts, batched=True).value.tobytes() == naive.tobytes()
        with ad.no_grad():
            assert dispatch_grouped(slabs, decision, experts, threads=4).value.tobytes() == naive.tobytes()

    @pytest.mark.parametrize("seed", range(12))
    def test_forward_and_backward_bitwise(self, seed):
        inst = random_instance(seed)
        ref_out, ref_grads = run_instance(inst, "naive")
        for mode in ("grouped", "batched"):
            out, grads = run_instance(inst, mode)
            assert out.shape == (inst.batch, inst.cfg.d)
            assert out.tobytes() == ref_out.tobytes()
            for k in ref_grads:
                assert grads[k].tobytes() == ref_grads[k].tobytes(), (mode, k)

    def test_threaded_refuses_to_record(self, tiny_cfg, rng):
        experts = ExpertParams.init(tiny_cfg, nx.Rng(0))
        slabs = Variable(rng.normal(size=(2, 2, 4)), requires_grad=True)
        decision = make_decision([[0, 1]] * 4, np.full((4, 2), 0.5), 2, 2)
        with ad.Tape(), pytest.raises(ContractError):
            dispatch_grouped(slabs, decision, experts, threads=2)

    @given(st.integers(0, 1000))
    def test_token_permutation_equivariance(self, seed):
        g = np.random.default_rng(seed)
        cfg = SliceMoEConfig(d=6, n_slices=3, top_k=2, n_experts=4)
        experts = ExpertParams.init(cfg, nx.Rng(seed))
        b = 5
        ids = np.argsort(g.random((b * 3, 4)), axis=1)[:, :2]
        wts = g.random((b * 3, 2))
        slabs = g.normal(size=(b, 3, 2))
        perm = g.permutation(b)
        rows = (perm[:, None] * 3 + np.arange(3)).reshape(-1)
        out = dispatch_grouped(slabs, make_decision(ids, wts, b, 3), experts).value
        out_p = dispatch_grouped(slabs[perm], make_decision(ids[rows], wts[rows], b, 3), experts).value
        assert out_p.tobytes() == out[perm].tobytes()


class TestActiveParams:
    def test_default_fraction(self):
        ap = active_param_count(SliceMoEConfig())
        assert ap.active_fraction == Fraction(1, 8)
        assert ap.active_expert_params == 2 * 8 * expert_block_params(SliceMoEConfig())

    def test_saturation(self):
        cfg = SliceMoEConfig(d=16, n_slices=4, top_k=4, n_experts=4)
        ap = active_param_count(cfg)
        assert ap.active_expert_params == ap.expert_slot_params == 4 * 4 * expert_block_params(cfg)

    def test_independent_of_expert_count(self):
        a = active_param_count(SliceMoEConfig(n_experts=16))
        b = active_param_count(SliceMoEConfig(n_experts=32))
        assert a.active_expert_params == b.active_expert_params

    def test_block_params_closed_form(self):
        # w = 8, F = 32: 8*32 + 32 + 32*8 + 8
        assert expert_block_params(SliceMoEConfig()) == 552

    def test_instrumented_rows(self, rng):
        from slicemoe.model import SliceMoELayer

        cfg = SliceMoEConfig()
        layer = SliceMoELayer(cfg, nx.Rng(0))
        measured = layer.measure_active_params(rng.normal(size=(10, 64)))
        assert measured["rows_per_expert"].sum() == 10 * cfg.n_slices * cfg.top_k
        assert measured["active_fraction"] == active_param_count(cfg).active_fraction
