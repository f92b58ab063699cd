"""Survival objective: NLL against hand evaluation, risk limits, and the
concordance index against exhaustive pair enumeration."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from milsurv import autodiff as ad
from milsurv.errors import ContractError, UndefinedMetricError
from milsurv.gradcheck import all_passed, grad_check
from milsurv.rng import Rng
from milsurv.survival import (
    concordance_index,
    nll_loss,
    risk_score,
    survival_output,
)


def hand_nll(logits, bin, censored, eps=1e-7):
    """Independent step-by-step evaluation of the loss formula in plain
    Python floats (64-bit)."""
    hazards = [min(max(1.0 / (1.0 + math.exp(-z)), eps), 1.0 - eps) for z in logits]
    curve = []
    running = 1.0
    for h in hazards:
        running *= 1.0 - h
        curve.append(min(max(running, eps), 1.0))
    if censored:
        return -math.log(curve[bin])
    prev = 1.0 if bin == 0 else curve[bin - 1]
    return -(math.log(prev) + math.log(hazards[bin]))


class TestNll:
    def test_uncensored_bin0_with_zero_logit(self):
        out = survival_output(np.array([0.0, 0.7, -0.3, 1.1]))
        loss = nll_loss(out, 0, censored=False)
        assert loss.data == pytest.approx(-math.log(0.5), abs=1e-10)

    def test_censored_confident_survivor_unpenalized(self):
        out = survival_output(np.full(4, -40.0))  # hazards clamp to eps
        loss = nll_loss(out, 3, censored=True)
        assert 0 <= float(loss.data) < 1e-6

    def test_worked_example_matches_hand_evaluation(self):
        logits = [0.2, -0.1, 0.4, 0.0]
        out = survival_output(np.array(logits))
        loss = nll_loss(out, 2, censored=False)
        assert float(loss.data) == pytest.approx(hand_nll(logits, 2, False), abs=1e-10)

    @pytest.mark.parametrize("bin,censored", [(0, True), (1, True), (2, False), (3, False)])
    def test_many_cases_match_hand_evaluation(self, bin, censored):
        rng = Rng(41, bin)
        for _ in range(25):
            logits = rng.normal(shape=4) * 2
            out = survival_output(logits)
            got = float(nll_loss(out, bin, censored).data)
            assert got == pytest.approx(hand_nll(list(logits), bin, censored), abs=1e-10)

    def test_bin_out_of_range(self):
        out = survival_output(np.zeros(4))
        with pytest.raises(ContractError):
            nll_loss(out, 4, censored=False)

    def test_gradient_wrt_logits(self):
        rng = Rng(17)
        logits = ad.Tensor(rng.normal(shape=4), requires_grad=True)

        def loss(tape):
            return nll_loss(survival_output(logits, tape=tape), 2, False, tape=tape)

        res = grad_check(loss, [("logits", logits)], tol=1e-6)
        assert all_passed(res), [str(r) for r in res]

    def test_survival_curve_nonincreasing_and_bounded(self):
        rng = Rng(23)
        for _ in range(50):
            out = survival_output(rng.normal(shape=4) * 3)
            curve = out.survival.data
            assert np.all(np.diff(curve) <= 1e-12)
            assert np.all(curve > 0) and np.all(curve <= 1)
            assert np.all(out.hazards.data > 0) and np.all(out.hazards.data < 1)


class TestRisk:
    def test_minimum_risk_limit(self):
        assert risk_score(np.full(4, -1e9)) == pytest.approx(-4.0, abs=1e-5)

    def test_maximum_risk_limit(self):
        assert risk_score(np.full(4, 1e9)) == pytest.approx(0.0, abs=1e-5)

    def test_monotone_in_each_logit(self):
        rng = Rng(29)
        for _ in range(20):
            logits = rng.normal(shape=4)
            base = risk_score(logits)
            for j in range(4):
                bumped = logits.copy()
                bumped[j] += 0.1
                assert risk_score(bumped) > base

    def test_matches_tape_path(self):
        rng = Rng(31)
        for _ in range(20):
            logits = rng.normal(shape=4) * 2
            assert risk_score(logits) == pytest.approx(
                survival_output(logits).risk_value(), abs=1e-12)


def brute_force_cindex(risks, times, censored):
    """Reference oracle: explicit O(n^2) loops, no vectorization."""
    num = 0.0
    pairs = 0
    n = len(risks)
    for i in range(n):
        for j in range(n):
            if censored[i] or not times[i] < times[j]:
                continue
            pairs += 1
            if risks[i] > risks[j]:
                num += 1.0
            elif risks[i] == risks[j]:
                num += 0.5
    if pairs == 0:
        raise UndefinedMetricError("no comparable pairs")
    return num / pairs


class TestConcordance:
    def test_perfect_ranking(self):
        assert concordance_index([3, 2, 1], [1, 2, 3], [False] * 3) == 1.0

    def test_tie_credit(self):
        assert concordance_index([5, 5], [1, 2], [False, False]) == 0.5

    def test_worked_censored_example(self):
        times = [2, 4, 4, 6]
        censored = [False, True, False, False]
        assert concordance_index([4, 3, 2, 1], times, censored) == 1.0
        assert concordance_index([4, 3, 1, 2], times, censored) == 0.75

    def test_no_comparable_pairs(self):
        with pytest.raises(UndefinedMetricError):
            concordance_index([1.0, 2.0], [5.0, 3.0], [True, True])

    def test_matches_brute_force_on_random_instances(self):
        rng = Rng(2025, 1)
        for trial in range(200):
            n = int(rng.integers(2, 51))
            times = np.round(rng.uniform(0, 40, n), 1)  # induce some time ties
            censored = rng.random(n) < rng.uniform(0.0, 0.8)
            risks = np.round(rng.normal(shape=n), 2)  # induce some risk ties
            try:
                expected = brute_force_cindex(list(risks), list(times), list(censored))
            except UndefinedMetricError:
                with pytest.raises(UndefinedMetricError):
                    concordance_index(risks, times, censored)
                continue
            assert concordance_index(risks, times, censored) == expected

    @given(st.lists(st.tuples(st.floats(-50, 50), st.floats(0, 100), st.booleans()),
                    min_size=2, max_size=25),
           st.floats(0.1, 4.0), st.floats(-10, 10))
    @settings(max_examples=200, deadline=None)
    def test_invariant_under_increasing_transform(self, rows, scale, shift):
        risks = [r for r, _, _ in rows]
        times = [t for _, t, _ in rows]
        censored = [c for _, _, c in rows]
        transformed = [scale * r + shift for r in risks]
        try:
            base = concordance_index(risks, times, censored)
        except UndefinedMetricError:
            return
        # scaling can collapse distinct risks at float precision; skip then
        if len(set(risks)) != len(set(transformed)):
            return
        assert concordance_index(transformed, times, censored) == pytest.approx(base, abs=1e-12)

    def test_negated_risks_complement(self):
        rng = Rng(77)
        risks = rng.normal(shape=30)  # continuous draws: no ties
        times = rng.uniform(0, 60, 30)
        censored = rng.random(30) < 0.4
        c1 = concordance_index(risks, times, censored)
        c2 = concordance_index(-risks, times, censored)
        assert c1 + c2 == pytest.approx(1.0, abs=1e-12)

    def test_uncensored_no_ties_equals_kendall_accuracy(self):
        rng = Rng(88)
        for _ in range(20):
            n = int(rng.integers(3, 51))
            risks = rng.normal(shape=n)
            times = rng.uniform(0, 100, n)
            censored = [False] * n
            assert concordance_index(risks, times, censored) == brute_force_cindex(
                list(risks), list(times), censored)

    def test_null_calibration_with_heavy_censoring(self):
        rng = Rng(4242)
        n = 1000
        risks = rng.normal(shape=n)
        times = rng.uniform(0, 120, n)
        censored = rng.random(n) < 0.45
        assert 0.47 <= concordance_index(risks, times, censored) <= 0.53
