"""Metrics tests.

The estimator checks run against an independent subset-enumeration oracle,
not against a rearranged form of the same formula.
"""

from __future__ import annotations

import math
from itertools import combinations

import pytest

from alliancecoder.metrics import (
    CountComparisonReport,
    api_count_comparison,
    dataset_pass_at_k_empirical,
    dataset_pass_at_k_estimator,
    intersection_report,
    pass_at_k_empirical,
    pass_at_k_estimator,
    prompt_length_analysis,
    recall_metrics,
    TaskRetrieval,
)


def oracle_pass_at_k(n: int, c: int, k: int) -> float:
    """Exhaustive oracle: fraction of k-subsets of n samples hitting a pass.

    Samples 0..c-1 are the passing ones. Counts every k-combination that
    contains at least one of them.
    """
    hits = 0
    total = 0
    for combo in combinations(range(n), k):
        total += 1
        if any(i < c for i in combo):
            hits += 1
    return hits / total


class TestPassAtKEstimator:
    def test_matches_enumeration_oracle_exactly(self):
        # full grid n <= 8, 0 <= c <= n, 1 <= k <= n
        for n in range(1, 9):
            for c in range(0, n + 1):
                for k in range(1, n + 1):
                    got = pass_at_k_estimator(n, c, k)
                    want = oracle_pass_at_k(n, c, k)
                    assert got == pytest.approx(want, abs=1e-12), (n, c, k)

    def test_frozen_values(self):
        assert pass_at_k_estimator(5, 2, 1) == pytest.approx(0.4, abs=1e-12)
        # 1 - C(7,5)/C(10,5) = 1 - 21/252
        assert pass_at_k_estimator(10, 3, 5) == pytest.approx(
            1 - 21 / 252, abs=1e-9
        )
        assert pass_at_k_estimator(10, 3, 5) == pytest.approx(
            0.9166666666666666, abs=1e-9
        )

    def test_edges(self):
        for n in (1, 4, 8):
            for k in range(1, n + 1):
                assert pass_at_k_estimator(n, 0, k) == 0.0
                assert pass_at_k_estimator(n, n, k) == 1.0
        # n - c < k forces a passing sample into every subset
        assert pass_at_k_estimator(5, 3, 3) == 1.0

    def test_monotonic_in_k_and_c(self):
        for n in range(1, 9):
            for c in range(0, n + 1):
                vals = [pass_at_k_estimator(n, c, k) for k in range(1, n + 1)]
                for lo, hi in zip(vals, vals[1:]):
                    assert hi >= lo - 1e-12
            for k in range(1, n + 1):
                vals = [pass_at_k_estimator(n, c, k) for c in range(0, n + 1)]
                for lo, hi in zip(vals, vals[1:]):
                    assert hi >= lo - 1e-12

    def test_preconditions(self):
        with pytest.raises(ValueError):
            pass_at_k_estimator(0, 0, 1)
        with pytest.raises(ValueError):
            pass_at_k_estimator(5, 6, 1)
        with pytest.raises(ValueError):
            pass_at_k_estimator(5, 2, 0)
        with pytest.raises(ValueError):
            pass_at_k_estimator(5, 2, 6)
        with pytest.raises(ValueError):
            pass_at_k_estimator(5, -1, 1)


class TestPassAtKEmpirical:
    def test_task_level_any_pass(self):
        assert pass_at_k_empirical(["Pass", "TestFail", "Timeout"], 3) == 1
        assert pass_at_k_empirical(["TestFail", "TestFail"], 2) == 0

    def test_sample_count_checked(self):
        with pytest.raises(ValueError):
            pass_at_k_empirical(["Pass"], 2)

    def test_dataset_mean_percentage(self):
        rep = dataset_pass_at_k_empirical(
            [["Pass"], ["TestFail"], ["Pass"], ["Pass"]], 1
        )
        assert rep.value == pytest.approx(0.75, abs=1e-12)
        assert rep.as_percent_str() == "75.00"
        assert rep.method == "empirical"
        assert rep.k == 1

    def test_agrees_with_estimator_at_extremes(self):
        # c = 0 and c = n are the only points where the two must agree
        for n in (1, 3, 5):
            all_fail = ["TestFail"] * n
            all_pass = ["Pass"] * n
            for k in range(1, n + 1):
                emp_fail = pass_at_k_empirical(all_fail, n)
                emp_pass = pass_at_k_empirical(all_pass, n)
                assert emp_fail == pass_at_k_estimator(n, 0, k)
                assert emp_pass == pass_at_k_estimator(n, n, k)

    def test_dataset_estimator(self):
        # two tasks: (n=5, c=5) -> 1.0 and (n=5, c=0) -> 0.0; mean 0.5
        rep = dataset_pass_at_k_estimator([(5, 5), (5, 0)], 1)
        assert rep.value == pytest.approx(0.5, abs=1e-12)
        assert rep.method == "estimator"


class TestRecallMetrics:
    def _rows(self):
        # task a: oracle {x, y}, retrieved {x}; y's definition visible in context
        # task b: oracle {z}, retrieved {}; nothing in context
        # task c: empty oracle, excluded from denominators
        return [
            TaskRetrieval("a", frozenset({"x"}), frozenset({"x", "y"}), frozenset({"y"})),
            TaskRetrieval("b", frozenset(), frozenset({"z"}), frozenset()),
            TaskRetrieval("c", frozenset({"q"}), frozenset(), frozenset()),
        ]

    def test_plain_recall(self):
        rep = recall_metrics(self._rows(), passed_tasks=set(), conapi_passed=set())
        # mean of (1/2, 0/1) over the two scored tasks
        assert rep.recall == pytest.approx(0.25, abs=1e-12)
        assert rep.excluded_tasks == 1

    def test_crecall_adds_context_visible_oracle_apis(self):
        rep = recall_metrics(self._rows(), passed_tasks=set(), conapi_passed=set())
        # task a: retrieved + context-visible = {x, y} -> 1.0; task b stays 0
        assert rep.crecall == pytest.approx(0.5, abs=1e-12)
        assert rep.crecall >= rep.recall

    def test_brecall_restricted_to_jointly_passed(self):
        rep = recall_metrics(
            self._rows(), passed_tasks={"a"}, conapi_passed={"a", "b"}
        )
        assert rep.brecall == pytest.approx(0.5, abs=1e-12)
        assert rep.brecall_tasks == 1

    def test_bounds(self):
        rep = recall_metrics(self._rows(), passed_tasks=set(), conapi_passed=set())
        assert 0.0 <= rep.recall <= rep.crecall <= 1.0


class TestCountComparison:
    def test_hand_computed_partition(self):
        rows = [
            TaskRetrieval("a", frozenset({"x", "y", "z"}), frozenset({"x"}), frozenset()),
            TaskRetrieval("b", frozenset({"x"}), frozenset({"x"}), frozenset()),
            TaskRetrieval("c", frozenset(), frozenset({"x", "y"}), frozenset()),
            TaskRetrieval("d", frozenset({"q"}), frozenset(), frozenset()),
        ]
        rep = api_count_comparison(rows)
        assert (rep.higher, rep.equal, rep.lower) == (1, 1, 1)
        assert rep.excluded == 1
        assert rep.higher_pct == pytest.approx(100 / 3, abs=1e-9)
        total = rep.higher_pct + rep.equal_pct + rep.lower_pct
        assert total == pytest.approx(100.0, abs=0.1)

    def test_percentages_with_denominator_exclusions(self):
        # raw counts chosen so the three displayed cells round to known strings
        rep = CountComparisonReport.from_counts(
            higher=7445, equal=690, lower=1861, excluded=4, denominator=10000
        )
        assert rep.formatted_row() == "74.45 / 6.9 / 18.61"
        total = rep.higher_pct + rep.equal_pct + rep.lower_pct
        assert total == pytest.approx(100.0, abs=0.1)


class TestIntersectionReport:
    def _runs(self):
        # per-task sample pass vectors, k=2 everywhere
        return {
            "Pure": {"t1": [False, False], "t2": [True, False], "t3": [False, False], "t4": [False, False]},
            "Context": {"t1": [True, False], "t2": [True, True], "t3": [False, False], "t4": [True, False]},
            "API": {"t1": [True, True], "t2": [False, False], "t3": [True, False], "t4": [False, False]},
            "ConAPI": {"t1": [False, True], "t2": [True, False], "t3": [False, False], "t4": [False, False]},
        }

    def _containment(self):
        return {
            "t1": "FullyContained",
            "t2": "FullyContained",
            "t3": "NotIncluded",
            "t4": "FullyContained",
        }

    def test_pass_sets_and_intersections(self):
        rep = intersection_report(self._runs(), self._containment())
        assert rep.pass_sets["Context"] == {"t1", "t2", "t4"}
        assert rep.pass_sets["API"] == {"t1", "t3"}
        assert rep.intersections[("Context", "API")] == {"t1"}
        assert rep.intersections[("Context", "API", "ConAPI")] == {"t1"}

    def test_containment_split_excludes_pure_passes(self):
        rep = intersection_report(self._runs(), self._containment())
        # t2 passed Pure, so FullyContained pool is {t1, t4}
        fully = rep.containment["FullyContained"]
        assert fully.total == 2
        assert fully.cpass == 2          # t1, t4 pass Context
        assert fully.bpass == 1          # only t1 also passes API
        assert fully.cpass_pct == pytest.approx(100.0, abs=1e-9)
        assert fully.bpass_pct == pytest.approx(50.0, abs=1e-9)
        assert fully.bpass <= fully.cpass

    def test_task_set_mismatch_rejected(self):
        runs = self._runs()
        del runs["API"]["t4"]
        with pytest.raises(ValueError) as err:
            intersection_report(runs, self._containment())
        assert "t4" in str(err.value)


class TestPromptLengthAnalysis:
    def test_partition_means(self):
        lengths = {"a": 80, "b": 120, "c": 900, "d": 1100}
        rep = prompt_length_analysis(
            lengths, {"both_pass": {"a", "b"}, "api_only_pass": {"c", "d"}}
        )
        assert rep["both_pass"].mean == pytest.approx(100.0)
        assert rep["api_only_pass"].mean == pytest.approx(1000.0)
        assert rep["both_pass"].count == 2
        assert rep["api_only_pass"].max == 1100

    def test_median_and_min(self):
        rep = prompt_length_analysis({"a": 1, "b": 5, "c": 100}, {"p": {"a", "b", "c"}})
        assert rep["p"].median == 5
        assert rep["p"].min == 1
