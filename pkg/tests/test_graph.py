import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import TINY, fixed_input
from ldprune.graph import (
    ConvNode,
    SpecError,
    UNetSpec,
    build_unet,
    clone_graph,
    enumerate_candidates,
    estimate_costs,
)
from ldprune.tensor import ShapeError, Tensor


class TestSpec:
    def test_roundtrip(self):
        assert UNetSpec.from_dict(TINY.to_dict()) == TINY

    @pytest.mark.parametrize("kwargs", [
        dict(latent_size=12, channel_mults=(1, 2, 4, 8)),
        dict(base_width=12, norm_groups=8),
        dict(attention_levels=(3,)),
        dict(channel_mults=()),
        dict(layers_per_level=0),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(SpecError):
            UNetSpec(**kwargs)


class TestDefaultArchitecture:
    @pytest.fixture(scope="class")
    @classmethod
    def graph(cls):
        return build_unet(UNetSpec(), seed=0)

    def test_kinds_present(self, graph):
        kinds = {n.kind for n in graph.nodes}
        for k in ("Conv", "GroupNorm", "LayerNorm", "Activation", "Linear", "Attention", "ResBlock",
                  "BasicTransformerBlock", "Downsample", "Upsample", "Embedding"):
            assert k in kinds

    def test_structure(self, graph):
        ids = {n.id for n in graph.nodes}
        assert {"down.1.attn.0.attn1", "down.1.attn.0.attn2", "mid.attn.0", "up.2.res.1"} <= ids
        assert "down.0.attn.0" not in ids  # no attention at the finest level
        assert len(graph.skip_links) == 6

    def test_shape_inference_matches_execution(self, graph):
        graph.check_shapes()

    def test_forward_output_shape(self, graph):
        out = graph.forward(fixed_input(graph.spec, 3), [1, 500, 999], [0, 3, 7])
        assert out.shape == (3, 4, 16, 16)
        assert np.isfinite(out.data).all()

    def test_param_count_has_no_double_counting(self, graph):
        by_node = sum(n.own_param_count() for n in graph.nodes)
        assert graph.param_count() == by_node

    def test_candidates_exclude_embedding(self, graph):
        cands = enumerate_candidates(graph)
        assert "cond_embed" not in cands
        assert len(cands) == len(set(cands)) > 100

    def test_cost_filter_shrinks_candidates(self, graph):
        assert len(enumerate_candidates(graph, 0.02)) < len(enumerate_candidates(graph, 0.0))


class TestForward:
    def test_wrong_latent_shape(self, tiny_graph):
        with pytest.raises(ShapeError):
            tiny_graph.forward(Tensor(np.zeros((1, 4, 6, 6))), 0, 0)

    def test_condition_out_of_range(self, tiny_graph):
        with pytest.raises(ValueError):
            tiny_graph.forward(fixed_input(TINY, 1), 0, TINY.num_conditions)

    def test_conditions_change_output(self, tiny_graph):
        x = fixed_input(TINY, 1)
        a = tiny_graph.forward(x, 100, 0).data
        b = tiny_graph.forward(x, 100, 1).data
        assert not np.allclose(a, b)

    def test_batched_matches_single(self, tiny_graph):
        x = fixed_input(TINY, 2)
        both = tiny_graph.forward(x, [10, 20], [0, 1]).data
        one = tiny_graph.forward(Tensor(x.data[1:]), 20, 1).data
        np.testing.assert_allclose(both[1:], one, atol=1e-5)

    def test_forward_call_counter(self, tiny_graph):
        tiny_graph.forward(fixed_input(TINY, 3), 0, 0)
        assert tiny_graph.forward_calls == 3

    def test_features_collected_at_level_boundaries(self, tiny_graph):
        feats = {}
        tiny_graph.forward(fixed_input(TINY, 1), 0, 0, features=feats)
        assert set(feats) == {"down.0", "down.1", "mid", "up.0", "up.1"}

    def test_clone_is_independent(self, tiny_graph):
        c = clone_graph(tiny_graph)
        c.node("conv_in").params["weight"].data[...] = 0
        assert np.abs(tiny_graph.node("conv_in").params["weight"].data).sum() > 0


class TestCosts:
    def test_conv_param_count(self):
        node = ConvNode("c", 4, 4, 8, kernel=3, rng=np.random.default_rng(0))
        assert node.own_param_count() == 148

    def test_macs_roll_up(self, tiny_graph):
        res = tiny_graph.node("down.0.res.0")
        assert res.est_cost == pytest.approx(sum(c.est_cost for c in res.children))

    def test_timed_costs_are_positive(self, tiny_graph):
        estimate_costs(tiny_graph, "time", repeats=2)
        assert tiny_graph.node("conv_in").est_cost > 0
        assert tiny_graph.forward_calls == 0

    def test_unknown_method(self, tiny_graph):
        with pytest.raises(ValueError):
            estimate_costs(tiny_graph, "flops")


class TestShapeProperties:
    @settings(max_examples=10, deadline=None)
    @given(levels=st.integers(1, 3), layers=st.integers(1, 2), base=st.sampled_from([4, 8]),
           attn=st.booleans())
    def test_declared_shapes_hold_for_random_specs(self, levels, layers, base, attn):
        spec = UNetSpec(latent_size=8, base_width=base, channel_mults=tuple(range(1, levels + 1)),
                        layers_per_level=layers, attention_levels=(levels - 1,) if attn else (),
                        cond_dim=8, head_dim=4, norm_groups=4, num_conditions=2)
        g = build_unet(spec, seed=1)
        g.check_shapes()
        assert g.forward(fixed_input(spec, 1), 3, 1).shape == (1,) + spec.latent_shape
