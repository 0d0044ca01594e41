import math

import numpy as np
import pytest

from bimark import (
    DomainError,
    ParseError,
    ProbabilityDistribution,
)
from bimark.toylm import (
    DistributionTrace,
    SyntheticLM,
    TraceLM,
    entropy,
    load_trace,
    save_trace,
)


class TestSyntheticLM:
    def test_deterministic_per_context(self):
        lm = SyntheticLM(32, order=2, alpha=0.7, seed=3)
        a = lm.next_distribution([4, 5, 6])
        b = lm.next_distribution([4, 5, 6])
        assert np.array_equal(a.probs, b.probs)

    def test_context_is_last_k_tokens(self):
        lm = SyntheticLM(32, order=2, alpha=0.7, seed=3)
        a = lm.next_distribution([9, 9, 4, 5])
        b = lm.next_distribution([1, 4, 5])
        assert np.array_equal(a.probs, b.probs)

    def test_fresh_instance_reproduces(self):
        a = SyntheticLM(64, order=1, alpha=1.0, seed=11).next_distribution([7])
        b = SyntheticLM(64, order=1, alpha=1.0, seed=11).next_distribution([7])
        assert np.array_equal(a.probs, b.probs)

    def test_different_seeds_differ(self):
        a = SyntheticLM(64, order=1, alpha=1.0, seed=1).next_distribution([7])
        b = SyntheticLM(64, order=1, alpha=1.0, seed=2).next_distribution([7])
        assert not np.array_equal(a.probs, b.probs)

    def test_high_alpha_is_near_uniform(self):
        lm = SyntheticLM(1024, order=1, alpha=1000.0, seed=5)
        ents = [entropy(lm.next_distribution([c])) for c in range(1000)]
        assert abs(np.mean(ents) - math.log2(1024)) < 0.1

    def test_low_alpha_is_peaked(self):
        lm = SyntheticLM(64, order=1, alpha=0.01, seed=5)
        ents = [entropy(lm.next_distribution([c])) for c in range(500)]
        assert np.mean(ents) < 2.0

    def test_entropy_monotone_in_alpha(self):
        means = []
        for alpha in (0.01, 0.1, 1.0, 10.0, 1000.0):
            lm = SyntheticLM(256, order=1, alpha=alpha, seed=9)
            means.append(np.mean([entropy(lm.next_distribution([c])) for c in range(1000)]))
        assert all(a <= b for a, b in zip(means, means[1:]))

    def test_flat_dirichlet_coordinates_balanced(self):
        # alpha=1 coordinates have mean 1/V
        lm = SyntheticLM(4, order=1, alpha=1.0, seed=13)
        probs = np.array([lm.next_distribution([c]).probs for c in range(4000)])
        se = probs.std(axis=0).max() / math.sqrt(len(probs))
        assert np.all(np.abs(probs.mean(axis=0) - 0.25) < 4 * se)

    def test_rejects_bad_alpha(self):
        with pytest.raises(DomainError):
            SyntheticLM(8, alpha=0.0)


class TestEntropy:
    def test_uniform_four(self):
        assert entropy(ProbabilityDistribution(np.full(4, 0.25))) == pytest.approx(2.0)

    def test_point_mass(self):
        assert entropy(ProbabilityDistribution(np.array([1.0, 0.0]))) == 0.0

    def test_hand_computed(self):
        d = ProbabilityDistribution(np.array([0.5, 0.25, 0.25]))
        assert entropy(d) == pytest.approx(1.5)


class TestTraceFiles:
    def _trace(self):
        return DistributionTrace((
            ProbabilityDistribution(np.array([0.25, 0.25, 0.5])),
            ProbabilityDistribution(np.array([0.1, 0.2, 0.7])),
        ))

    def test_round_trip(self, tmp_path):
        path = tmp_path / "trace.txt"
        trace = self._trace()
        save_trace(trace, path)
        loaded = load_trace(path)
        assert len(loaded) == 2
        for a, b in zip(trace.steps, loaded.steps):
            assert np.max(np.abs(a.probs - b.probs)) <= 1e-12

    def test_replay_order(self):
        trace = self._trace()
        assert trace.replay(0).probs[2] == 0.5
        assert trace.replay(1).probs[2] == 0.7
        with pytest.raises(DomainError):
            trace.replay(2)

    def test_rejects_unnormalized_row(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("vocab_size=2\n0.49 0.49\n")
        with pytest.raises(ParseError) as err:
            load_trace(path)
        assert "row 2" in str(err.value)

    def test_rejects_wrong_width(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("vocab_size=3\n0.5 0.5\n")
        with pytest.raises(ParseError) as err:
            load_trace(path)
        assert "row 2" in str(err.value)

    def test_rejects_missing_header(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("0.5 0.5\n")
        with pytest.raises(ParseError):
            load_trace(path)

    def test_trace_lm_maps_prefix_length(self):
        trace = self._trace()
        lm = TraceLM(trace, prompt_length=4)
        assert np.array_equal(lm.next_distribution([0, 1, 2, 3]).probs, trace.replay(0).probs)
        assert np.array_equal(lm.next_distribution([0, 1, 2, 3, 9]).probs, trace.replay(1).probs)
