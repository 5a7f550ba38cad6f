import numpy as np
import pytest
import torch

from oracles import (
    enumerate_positions,
    euler_reference,
    finite_difference_grads,
    max_relative_grad_error,
)

from weavegen import codec
from weavegen.connector import ConditionProjector, ProjectedCondition
from weavegen.core import ASSISTANT, USER, InputError, TransformerDims
from weavegen.genhead import (
    ConditionBundle,
    GenerationHead,
    SamplerStep,
    drop_final_text_chunk,
    make_flow_state,
    position_indices,
    positions_to_array,
)
from weavegen.mllm import ChunkSpan


def text_cond(rows, d, seed=0, spans=None):
    g = torch.Generator().manual_seed(seed)
    return ProjectedCondition(
        values=torch.randn(rows, d, generator=g, dtype=torch.float64),
        chunk_spans=spans or [ChunkSpan(0, 0, rows, "text", USER)],
    )


def tiny_head(c_lat=12, d_cond=6, width=12, heads=2, layers=1, seed=0):
    torch.manual_seed(seed)
    return GenerationHead(TransformerDims(layers, width, heads), c_lat, d_cond, dtype=torch.float64)


class TestPositionIndices:
    def test_spec_example(self):
        out = position_indices([(2, 2), (1, 2)], (2, 2))
        arr = positions_to_array(out)
        assert arr[:4, 0].tolist() == [0, 0, 0, 0]
        assert arr[4:6].tolist() == [[1, 0, 0], [1, 0, 1]]
        assert arr[6:, 0].tolist() == [2, 2, 2, 2]
        assert arr[6:, 1:].tolist() == [[0, 0], [0, 1], [1, 0], [1, 1]]

    def test_no_conditions(self):
        arr = positions_to_array(position_indices([], (4, 4)))
        assert (arr[:, 0] == 0).all() and arr.shape == (16, 3)

    def test_three_conditions_target_t3(self):
        out = position_indices([(1, 1), (1, 1), (1, 1)], (1, 1))
        assert out[-1].t == 3

    def test_matches_enumerator_on_200_random_layouts(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            layout = [(int(rng.integers(1, 5)), int(rng.integers(1, 5))) for _ in range(rng.integers(0, 4))]
            target = (int(rng.integers(1, 5)), int(rng.integers(1, 5)))
            got = positions_to_array(position_indices(layout, target))
            want = enumerate_positions(layout, target)
            assert np.array_equal(got, want)

    def test_rejects_empty_grid(self):
        with pytest.raises(InputError):
            position_indices([(0, 2)], (1, 1))


class TestFlowState:
    def test_t_zero_is_data(self):
        x0 = torch.randn(2, 2, 12, dtype=torch.float64)
        eps = torch.randn_like(x0)
        st = make_flow_state(x0, 0.0, eps)
        assert torch.equal(st.x_t, x0)

    def test_t_one_is_noise(self):
        x0 = torch.randn(2, 2, 12, dtype=torch.float64)
        eps = torch.randn_like(x0)
        st = make_flow_state(x0, 1.0, eps)
        assert torch.equal(st.x_t, eps)

    def test_target_is_eps_minus_x0(self):
        x0 = torch.randn(2, 2, 12, dtype=torch.float64)
        eps = torch.randn_like(x0)
        assert torch.equal(make_flow_state(x0, 0.4, eps).v_target, eps - x0)

    def test_range_checked(self):
        with pytest.raises(InputError):
            make_flow_state(torch.zeros(1, 1, 3), 1.5, torch.zeros(1, 1, 3))


class TestVelocity:
    def test_output_shape_ignores_condition_count(self):
        head = tiny_head()
        rng = np.random.default_rng(0)
        conds = [codec.encode(rng.random((4, 4, 3)), 2, seq_index=i) for i in range(3)]
        x_t = torch.randn(3, 2, 12, dtype=torch.float64)
        for k in range(4):
            bundle = ConditionBundle(cond_latents=conds[:k], text_cond=text_cond(3, 6))
            v = head.velocity(x_t, 0.5, bundle)
            assert v.shape == (3, 2, 12)

    def test_depends_on_text_condition(self):
        head = tiny_head()
        x_t = torch.randn(2, 2, 12, dtype=torch.float64)
        a = head.velocity(x_t, 0.5, ConditionBundle([], text_cond(3, 6, seed=1)))
        b = head.velocity(x_t, 0.5, ConditionBundle([], text_cond(3, 6, seed=2)))
        assert not torch.allclose(a, b)

    def test_depends_on_condition_frames(self):
        head = tiny_head()
        rng = np.random.default_rng(1)
        x_t = torch.randn(2, 2, 12, dtype=torch.float64)
        tc = text_cond(3, 6)
        bare = head.velocity(x_t, 0.5, ConditionBundle([], tc))
        framed = head.velocity(
            x_t, 0.5, ConditionBundle([codec.encode(rng.random((4, 4, 3)), 2)], tc)
        )
        assert not torch.allclose(bare, framed)

    def test_finite_for_100_seeds(self):
        x_t = torch.randn(2, 2, 12, dtype=torch.float64)
        for seed in range(100):
            head = tiny_head(seed=seed)
            v = head.velocity(x_t, 0.3, ConditionBundle([], text_cond(2, 6, seed=seed)))
            assert torch.isfinite(v).all()

    def test_empty_text_condition_is_legal(self):
        head = tiny_head()
        tc = ProjectedCondition(values=torch.zeros(0, 6, dtype=torch.float64), chunk_spans=[])
        v = head.velocity(torch.randn(1, 1, 12, dtype=torch.float64), 0.5, ConditionBundle([], tc))
        assert torch.isfinite(v).all()

    def test_shape_mismatch_rejected(self):
        head = tiny_head()
        with pytest.raises(InputError):
            head.velocity(torch.randn(2, 2, 9, dtype=torch.float64), 0.5, ConditionBundle([], text_cond(1, 6)))


class TestFlowLoss:
    def test_exact_velocity_oracle_gives_zero_loss(self, monkeypatch):
        head = tiny_head()
        rng = np.random.default_rng(2)
        x0 = codec.encode(rng.random((4, 4, 3)), 2)
        bundle = ConditionBundle([], text_cond(2, 6))
        eps = torch.randn(2, 2, 12, dtype=torch.float64)
        x0_t = torch.from_numpy(x0.data)

        def exact_velocity(x_t, t_diff, cond):
            return eps - x0_t

        monkeypatch.setattr(head, "velocity", exact_velocity)
        loss = head.flow_loss(x0, bundle, t_diff=0.37, eps=eps)
        assert loss.item() == 0.0

    def test_deterministic_given_seed(self):
        head = tiny_head()
        rng = np.random.default_rng(3)
        x0 = codec.encode(rng.random((4, 4, 3)), 2)
        bundle = ConditionBundle([], text_cond(2, 6))
        a = head.flow_loss(x0, bundle, torch.Generator().manual_seed(5))
        b = head.flow_loss(x0, bundle, torch.Generator().manual_seed(5))
        assert a.item() == b.item()

    def test_gradients_match_finite_differences(self):
        head = tiny_head()
        connector = ConditionProjector(1, 4, 6, dtype=torch.float64)
        torch.manual_seed(9)
        hidden_vals = torch.randn(1, 3, 4, dtype=torch.float64)
        from weavegen.mllm import HiddenStates

        hidden = HiddenStates(values=hidden_vals, valid_prefix_len=3)
        spans = [ChunkSpan(0, 0, 3, "text", USER)]
        rng = np.random.default_rng(4)
        x0 = codec.encode(rng.random((4, 4, 3)), 2)
        cond_frame = codec.encode(rng.random((2, 4, 3)), 2)
        eps = torch.randn(2, 2, 12, dtype=torch.float64)

        def loss_fn():
            tc = connector.project(hidden, 3, spans)
            bundle = ConditionBundle([cond_frame], tc)
            return head.flow_loss(x0, bundle, t_diff=0.62, eps=eps)

        params = list(head.parameters()) + list(connector.parameters())
        assert sum(p.numel() for p in params) <= 10_000
        analytic = torch.autograd.grad(loss_fn(), params)
        fd = finite_difference_grads(loss_fn, params)
        assert max_relative_grad_error(list(analytic), fd) < 1e-4


class TestDropFinalTextChunk:
    def make_cond(self):
        g = torch.Generator().manual_seed(0)
        values = torch.randn(10, 6, generator=g, dtype=torch.float64)
        spans = [
            ChunkSpan(0, 0, 3, "text", USER),
            ChunkSpan(1, 3, 6, "image", USER),
            ChunkSpan(2, 6, 10, "text", ASSISTANT),
        ]
        return ProjectedCondition(values=values, chunk_spans=spans)

    def test_drops_last_text_rows_only(self):
        cond = self.make_cond()
        neg = drop_final_text_chunk(cond)
        assert neg.values.shape == (6, 6)
        assert torch.equal(neg.values, cond.values[:6])
        assert [s.kind for s in neg.chunk_spans] == ["text", "image"]

    def test_no_text_spans_is_identity(self):
        g = torch.Generator().manual_seed(1)
        cond = ProjectedCondition(
            values=torch.randn(4, 6, generator=g), chunk_spans=[ChunkSpan(0, 0, 4, "image", USER)]
        )
        neg = drop_final_text_chunk(cond)
        assert torch.equal(neg.values, cond.values)

    def test_single_text_chunk_leaves_empty_negative(self):
        g = torch.Generator().manual_seed(2)
        cond = ProjectedCondition(
            values=torch.randn(4, 6, generator=g), chunk_spans=[ChunkSpan(0, 0, 4, "text", USER)]
        )
        neg = drop_final_text_chunk(cond)
        assert neg.values.shape == (0, 6)
        assert neg.chunk_spans == []

    def test_later_spans_are_shifted(self):
        values = torch.arange(20, dtype=torch.float64).reshape(10, 2)
        spans = [
            ChunkSpan(0, 0, 2, "text", USER),
            ChunkSpan(1, 2, 6, "text", USER),
            ChunkSpan(2, 6, 10, "image", USER),
        ]
        neg = drop_final_text_chunk(ProjectedCondition(values=values, chunk_spans=spans))
        assert torch.equal(neg.values, torch.cat([values[:2], values[6:]]))
        assert [(s.start, s.end) for s in neg.chunk_spans] == [(0, 2), (2, 6)]


class TestSampler:
    def bundle(self, d_cond=6):
        spans = [
            ChunkSpan(0, 0, 2, "text", USER),
            ChunkSpan(1, 2, 4, "text", USER),
        ]
        return ConditionBundle([], text_cond(4, d_cond, seed=3, spans=spans))

    def test_determinism_bit_identical(self):
        head = tiny_head()
        bundle = self.bundle()
        a = head.sample(bundle, (2, 2), 5, 1.7, torch.Generator().manual_seed(11))
        b = head.sample(bundle, (2, 2), 5, 1.7, torch.Generator().manual_seed(11))
        assert np.array_equal(a.data, b.data)

    def test_cfg_one_equals_unguided_reference(self):
        head = tiny_head()
        bundle = self.bundle()
        out = head.sample(bundle, (1, 1), 6, 1.0, torch.Generator().manual_seed(7))
        # independent reference loop: positive velocity only
        with torch.no_grad():
            x = torch.randn((1, 1, 12), generator=torch.Generator().manual_seed(7), dtype=torch.float64)
            for k in range(6):
                t = 1.0 - k / 6
                x = x - head.velocity(x, t, bundle) / 6
        assert np.array_equal(out.data, x.numpy())

    def test_cfg_identities_against_scalar_oracle(self):
        head = tiny_head()
        bundle = self.bundle()
        neg_bundle = ConditionBundle([], drop_final_text_chunk(bundle.text_cond))
        for scale in (0.0, 1.0, 2.0):
            trace: list[SamplerStep] = []
            head.sample(bundle, (1, 1), 4, scale, torch.Generator().manual_seed(13), trace=trace)
            assert len(trace) == 4
            for step in trace:
                x = torch.from_numpy(step.x)
                with torch.no_grad():
                    v_pos = head.velocity(x, step.t_diff, bundle).numpy()
                    v_neg = head.velocity(x, step.t_diff, neg_bundle).numpy()
                if scale == 1.0:
                    assert np.array_equal(step.v_guided, v_pos)
                    assert step.v_neg is None
                elif scale == 0.0:
                    assert np.array_equal(step.v_guided, v_neg)
                    assert step.v_pos is None
                else:
                    want = v_neg + scale * (v_pos - v_neg)
                    assert np.array_equal(step.v_guided, want)
                    assert np.allclose(step.v_guided, 2 * v_pos - v_neg, rtol=1e-12, atol=1e-12)

    def test_trace_integrates_to_output(self):
        head = tiny_head()
        bundle = self.bundle()
        trace: list[SamplerStep] = []
        out = head.sample(bundle, (2, 2), 5, 1.5, torch.Generator().manual_seed(3), trace=trace)
        ref = euler_reference(trace[0].x, [s.v_guided for s in trace])
        assert np.allclose(out.data, ref, atol=1e-12)

    def test_sampled_latent_metadata(self):
        head = tiny_head()
        rng = np.random.default_rng(5)
        conds = [codec.encode(rng.random((2, 2, 3)), 2, seq_index=i) for i in range(2)]
        bundle = ConditionBundle(conds, text_cond(2, 6))
        out = head.sample(bundle, (3, 2), 2, 1.0, torch.Generator().manual_seed(0))
        assert out.seq_index == 2
        assert (out.height_px, out.width_px) == (6, 4)

    def test_condition_seq_index_must_increase(self):
        rng = np.random.default_rng(6)
        lat = codec.encode(rng.random((2, 2, 3)), 2, seq_index=1)
        with pytest.raises(InputError):
            ConditionBundle([lat, lat], text_cond(1, 6))
