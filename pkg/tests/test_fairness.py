from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from equifl.errors import DimensionError, InputError
from equifl.fairness import delta_dp, delta_eo, hard_decisions, soft_dp_penalty


def oracle_dp(preds, groups):
    """Every ordered pair of present groups, rates counted by hand."""
    present = sorted(set(groups))
    rate = {}
    for g in present:
        rows = [p for p, s in zip(preds, groups) if s == g]
        rate[g] = sum(rows) / len(rows)
    return max([abs(rate[a] - rate[b]) for a, b in product(present, present)], default=0.0)


def oracle_eo(preds, labels, groups):
    rate = {}
    for g in sorted(set(groups)):
        pos = [p for p, y, s in zip(preds, labels, groups) if s == g and y == 1]
        if pos:
            rate[g] = sum(pos) / len(pos)
    return max([abs(rate[a] - rate[b]) for a, b in product(rate, rate)], default=0.0)


def test_dp_hand_example():
    assert delta_dp([1, 0, 1, 1], [0, 0, 1, 1]) == 0.5


def test_dp_constant_predictor():
    assert delta_dp([1] * 7, [0, 1, 2, 0, 1, 2, 2]) == 0.0


def test_dp_three_groups_max_pair():
    # positive rates 0.2 / 0.5 / 0.9 from 10 rows each
    preds = [1] * 2 + [0] * 8 + [1] * 5 + [0] * 5 + [1] * 9 + [0] * 1
    groups = [0] * 10 + [1] * 10 + [2] * 10
    assert delta_dp(preds, groups) == pytest.approx(0.7, abs=1e-12)


def test_dp_single_group():
    assert delta_dp([1, 0, 1], [3, 3, 3]) == 0.0


def test_eo_hand_examples():
    assert delta_eo([1, 0, 1, 0], [1, 1, 1, 1], [0, 0, 1, 1]) == 0.0
    assert delta_eo([1, 0, 1, 1, 1, 0], [1, 1, 1, 1, 1, 1], [0, 0, 1, 1, 1, 1]) == pytest.approx(0.25)


def test_eo_perfect_predictor():
    labels = [0, 1, 1, 0, 1, 0]
    assert delta_eo(labels, labels, [0, 0, 1, 1, 2, 2]) == 0.0


def test_eo_skips_groups_without_positives():
    # group 1 has no actual positives; only group 0 remains
    assert delta_eo([1, 0, 1, 1], [1, 1, 0, 0], [0, 0, 1, 1]) == 0.0


@pytest.mark.parametrize("fn", [lambda: delta_dp([], []), lambda: delta_eo([], [], [])])
def test_empty_input(fn):
    with pytest.raises(InputError):
        fn()


def test_length_mismatch():
    with pytest.raises(DimensionError):
        delta_dp([1, 0], [0])


def test_hard_decisions_threshold():
    np.testing.assert_array_equal(hard_decisions([0.49, 0.5, 0.51]), [0, 1, 1])


small_instances = st.integers(1, 12).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(0, 1), min_size=n, max_size=n),
        st.lists(st.integers(0, 1), min_size=n, max_size=n),
        st.lists(st.integers(0, 3), min_size=n, max_size=n),
    )
)


@settings(max_examples=300, deadline=None)
@given(small_instances)
def test_brute_force_equivalence(inst):
    preds, labels, groups = inst
    assert delta_dp(preds, groups) == oracle_dp(preds, groups)
    assert delta_eo(preds, labels, groups) == oracle_eo(preds, labels, groups)


@settings(max_examples=100, deadline=None)
@given(small_instances, st.permutations(range(4)), st.randoms(use_true_random=False))
def test_relabel_and_permutation_invariance(inst, relabel, rnd):
    preds, labels, groups = inst
    order = list(range(len(preds)))
    rnd.shuffle(order)
    p2 = [preds[i] for i in order]
    y2 = [labels[i] for i in order]
    g2 = [relabel[groups[i]] for i in order]
    assert delta_dp(p2, g2) == pytest.approx(delta_dp(preds, groups), abs=1e-15)
    assert delta_eo(p2, y2, g2) == pytest.approx(delta_eo(preds, labels, groups), abs=1e-15)
    assert 0.0 <= delta_dp(preds, groups) <= 1.0
    assert 0.0 <= delta_eo(preds, labels, groups) <= 1.0


class TestSoftPenalty:
    def test_single_group(self):
        value, grad = soft_dp_penalty([0.3, 0.9], [1, 1])
        assert value == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_hand_example(self):
        value, grad = soft_dp_penalty([0.9, 0.7, 0.1, 0.3], [0, 0, 1, 1])
        assert value == pytest.approx(0.6, abs=1e-12)
        np.testing.assert_allclose(grad, [0.5, 0.5, -0.5, -0.5])

    def test_equal_means(self):
        value, grad = soft_dp_penalty([0.2, 0.4, 0.3, 0.3], [0, 0, 1, 1])
        assert value == pytest.approx(0.0, abs=1e-15)

    def test_tie_goes_to_lowest_pair(self):
        # means 0.2, 0.8, 0.2: pairs (0,1) and (1,2) tie; (0,1) wins
        _, grad = soft_dp_penalty([0.2, 0.8, 0.2], [0, 1, 2])
        np.testing.assert_array_equal(grad, [-1.0, 1.0, 0.0])

    @settings(max_examples=100, deadline=None)
    @given(small_instances)
    def test_matches_dp_at_saturated_outputs(self, inst):
        preds, _, groups = inst
        value, _ = soft_dp_penalty(np.asarray(preds, dtype=float), groups)
        assert value == pytest.approx(delta_dp(preds, groups), abs=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 20))
        groups = rng.integers(0, 3, size=n)
        probs = rng.uniform(0.05, 0.95, size=n)
        value, grad = soft_dp_penalty(probs, groups)
        h = 1e-7
        fd = np.empty(n)
        for i in range(n):
            up, down = probs.copy(), probs.copy()
            up[i] += h
            down[i] -= h
            fd[i] = (soft_dp_penalty(up, groups)[0] - soft_dp_penalty(down, groups)[0]) / (2 * h)
        denom = np.maximum(np.maximum(np.abs(grad), np.abs(fd)), 1e-8)
        assert np.max(np.abs(grad - fd) / denom) <= 1e-6
