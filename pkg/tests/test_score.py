import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ldprune import modify, score
from ldprune.checkpoint import graph_hash
from ldprune.diffusion import generate_many
from ldprune.graph import enumerate_candidates
from ldprune.latents import LatentSet
from ldprune.score import Combinator, ConditionScore, OperatorScore

ORIG = np.array([[1.0, 1.0], [3.0, 3.0]])
MOD = np.array([[2.0, 2.0], [2.0, 2.0]])


class TestStatistics:
    def test_mean(self):
        np.testing.assert_allclose(score.latent_mean(np.array([[1.0, 3.0], [3.0, 1.0]])), [2, 2])

    def test_mean_of_singleton_and_zeros(self):
        np.testing.assert_allclose(score.latent_mean(np.array([[4.0, -1.0]])), [4, -1])
        np.testing.assert_allclose(score.latent_mean(np.zeros((5, 3))), 0)

    def test_population_std(self):
        np.testing.assert_allclose(score.latent_std(ORIG), [1, 1])

    def test_singleton_std_is_zero_and_warns(self, caplog):
        np.testing.assert_allclose(score.latent_std(np.array([[4.0, -1.0]])), 0)
        assert "size 1" in caplog.text

    def test_std_matches_brute_force(self):
        x = np.random.default_rng(0).standard_normal((17, 9))
        oracle = [math.sqrt(sum((x[i, j] - x[:, j].mean()) ** 2 for i in range(17)) / 17) for j in range(9)]
        np.testing.assert_allclose(score.latent_std(x), oracle, atol=1e-6)

    def test_empty_set_rejected(self):
        with pytest.raises(ValueError):
            score.latent_mean(np.zeros((0, 3)))

    def test_translation_invariance(self):
        x = np.random.default_rng(1).standard_normal((8, 5))
        np.testing.assert_allclose(score.latent_std(x + 7.5), score.latent_std(x), atol=1e-9)


class TestDistances:
    def test_worked_pair(self):
        assert score.avg_distance(ORIG, MOD) == pytest.approx(0.0, abs=1e-12)
        assert score.std_distance(ORIG, MOD) == pytest.approx(math.sqrt(2), abs=1e-12)

    def test_shift_by_3_4(self):
        x = np.random.default_rng(2).standard_normal((6, 2))
        assert score.avg_distance(x, x + [3.0, 4.0]) == pytest.approx(5.0)
        assert score.std_distance(x, x + [3.0, 4.0]) == pytest.approx(0.0, abs=1e-9)

    def test_identical_is_zero(self):
        x = np.random.default_rng(3).standard_normal((6, 4))
        assert score.avg_distance(x, x) == 0 and score.std_distance(x, x) == 0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            score.avg_distance(np.ones((2, 3)), np.ones((2, 4)))
        with pytest.raises(ValueError):
            score.std_distance(np.ones((2, 3)), np.ones((2, 4)))


class TestCombine:
    def test_sum(self):
        assert score.combine(0.0, math.sqrt(2), "sum") == pytest.approx(math.sqrt(2))

    def test_product_absorbs_zero(self):
        assert score.combine(0.0, 123.0, Combinator.PRODUCT) == 0.0

    def test_single_terms(self):
        assert score.combine(5.0, 7.0, "avg_only") == 5.0
        assert score.combine(5.0, 7.0, "std_only") == 7.0

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            score.combine(-1.0, 1.0)

    def test_get_score_worked_pair(self):
        s = score.get_score(ORIG, MOD)
        assert s.combined == pytest.approx(math.sqrt(2), abs=1e-6)


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


class TestLaws:
    @settings(max_examples=60, deadline=None)
    @given(x=arrays(np.float64, (5, 4), elements=finite), v=arrays(np.float64, 4, elements=finite))
    def test_shift_law(self, x, v):
        assert score.avg_distance(x, x + v) == pytest.approx(np.linalg.norm(v), abs=1e-9)
        assert score.std_distance(x, x + v) == pytest.approx(0.0, abs=1e-6)

    @settings(max_examples=60, deadline=None)
    @given(x=arrays(np.float64, (6, 3), elements=finite), alpha=st.floats(0, 3))
    def test_scale_law(self, x, alpha):
        k = abs(1 - alpha)
        assert score.avg_distance(x, alpha * x) == pytest.approx(k * np.linalg.norm(score.latent_mean(x)), abs=1e-9)
        assert score.std_distance(x, alpha * x) == pytest.approx(k * np.linalg.norm(score.latent_std(x)), abs=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(x=arrays(np.float64, (6, 3), elements=finite), alpha=st.floats(-3, 0))
    def test_negative_scale_flips_mean_not_spread(self, x, alpha):
        # std(alpha * x) = |alpha| * std(x), so the spread term uses |1 - |alpha||
        assert score.avg_distance(x, alpha * x) == pytest.approx(
            abs(1 - alpha) * np.linalg.norm(score.latent_mean(x)), abs=1e-9)
        assert score.std_distance(x, alpha * x) == pytest.approx(
            abs(1 - abs(alpha)) * np.linalg.norm(score.latent_std(x)), abs=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(a=arrays(np.float64, (4, 3), elements=finite), b=arrays(np.float64, (4, 3), elements=finite))
    def test_symmetry_and_sum_dominance(self, a, b):
        assert score.avg_distance(a, b) == score.avg_distance(b, a)
        assert score.std_distance(a, b) == score.std_distance(b, a)
        s = score.get_score(a, b)
        assert s.combined >= max(s.avg_dist, s.std_dist)


class _Clone:
    """Replacement that recomputes the original operator exactly."""

    zero = False

    def __init__(self, node):
        self.node = node

    def apply(self, x):
        return self.node.compute(x, None)

    def parameters(self):
        return []


class TestScoreOperator:
    def test_functional_clone_scores_zero(self, tiny_graph, fast_sched, monkeypatch):
        orig = generate_many(tiny_graph, [0, 1], 3, fast_sched)
        monkeypatch.setattr(modify, "build_replacement", lambda g, plan: _Clone(g.node(plan.target)))
        s = score.score_operator(orig, tiny_graph, "down.0.res.0.conv1", [0, 1], 3, fast_sched)
        assert s.total == pytest.approx(0.0, abs=1e-5)

    def test_accumulates_over_conditions(self, tiny_graph, fast_sched, monkeypatch):
        orig = generate_many(tiny_graph, [0, 1], 2, fast_sched)
        stub = {0: 1.5, 1: 2.5}
        monkeypatch.setattr(score, "get_score",
                            lambda o, m, c: ConditionScore(stub[o.condition_id], 0.0, stub[o.condition_id]))
        s = score.score_operator(orig, tiny_graph, "mid.res.0", [0, 1], 2, fast_sched)
        assert s.total == 4.0

    def test_real_candidates_nonnegative_and_restored(self, tiny_graph, fast_sched):
        orig = generate_many(tiny_graph, [0], 2, fast_sched)
        h = graph_hash(tiny_graph)
        for op in enumerate_candidates(tiny_graph, 0.02)[:6]:
            s = score.score_operator(orig, tiny_graph, op, [0], 2, fast_sched)
            assert s.total >= 0 and math.isfinite(s.total)
        assert graph_hash(tiny_graph) == h

    def test_missing_condition(self, tiny_graph, fast_sched):
        orig = generate_many(tiny_graph, [0], 2, fast_sched)
        with pytest.raises(ValueError):
            score.score_operator(orig, tiny_graph, "mid.res.0", [0, 1], 2, fast_sched)

    def test_modification_errors_carry_op(self, tiny_graph, fast_sched):
        orig = generate_many(tiny_graph, [0], 2, fast_sched)
        with pytest.raises(modify.ModificationError, match="cond_embed"):
            score.score_operator(orig, tiny_graph, "cond_embed", [0], 2, fast_sched)
        assert tiny_graph.active_plan is None

    def test_recombined_and_roundtrip(self):
        s = OperatorScore("x")
        s.add(0, ConditionScore(1.0, 2.0, 3.0))
        s.add(1, ConditionScore(0.5, 0.25, 0.75))
        assert s.recombined("product").total == pytest.approx(2.0 + 0.125)
        assert OperatorScore.from_dict(s.to_dict()) == s

    def test_latent_set_validation(self):
        with pytest.raises(ValueError):
            LatentSet(np.array([[np.nan, 1.0]]))
