"""Evaluation metrics.

pass@k(n, c, k) = 1 - C(n-c, k) / C(n, k), computed in product form so large
arguments never overflow:

    1 - prod_{i=0}^{k-1} (n - c - i) / (n - i)

Retrieval quality is reported as mean per-task recall against the oracle API
sets, with two refinements: brecall restricts to tasks passed by both the
evaluated run and the oracle-API run, and crecall credits oracle APIs whose
definitions are already visible in the task context.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field


@dataclass(frozen=True)
class PassAtK:
    k: int
    method: str  # "empirical" | "estimator"
    value: float  # dataset-level fraction in [0, 1]

    def as_percent_str(self) -> str:
        return f"{self.value * 100:.2f}"


def pass_at_k_estimator(n: int, c: int, k: int) -> float:
    """Unbiased pass@k from n samples with c passing."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not 0 <= c <= n:
        raise ValueError(f"c must be in 0..n, got c={c} n={n}")
    if not 1 <= k <= n:
        raise ValueError(f"k must be in 1..n, got k={k} n={n}")
    if c == 0:
        return 0.0
    if n - c < k:
        return 1.0
    prod = 1.0
    for i in range(k):
        prod *= (n - c - i) / (n - i)
    return 1.0 - prod


PASS_STATUS = "Pass"


def pass_at_k_empirical(statuses, k: int) -> int:
    """Task-level any-pass indicator over exactly k sample verdict statuses."""
    statuses = list(statuses)
    if len(statuses) != k:
        raise ValueError(f"expected {k} sample verdicts, got {len(statuses)}")
    return int(any(_status_name(s) == PASS_STATUS for s in statuses))


def _status_name(status) -> str:
    return status.value if hasattr(status, "value") else str(status)


def dataset_pass_at_k_empirical(per_task_statuses, k: int) -> PassAtK:
    values = [pass_at_k_empirical(s, k) for s in per_task_statuses]
    if not values:
        raise ValueError("no tasks to aggregate")
    return PassAtK(k=k, method="empirical", value=sum(values) / len(values))


def dataset_pass_at_k_estimator(per_task_counts, k: int) -> PassAtK:
    """`per_task_counts` is a sequence of (n, c) pairs."""
    values = [pass_at_k_estimator(n, c, k) for n, c in per_task_counts]
    if not values:
        raise ValueError("no tasks to aggregate")
    return PassAtK(k=k, method="estimator", value=sum(values) / len(values))


@dataclass(frozen=True)
class TaskRetrieval:
    """Per-task retrieval data used by the recall and count analyses."""

    task_id: str
    retrieved: frozenset
    oracle: frozenset
    context_contained: frozenset  # oracle ids whose definitions appear in context


@dataclass
class RecallReport:
    recall: float
    brecall: float
    crecall: float
    scored_tasks: int
    brecall_tasks: int
    excluded_tasks: int  # empty oracle sets


def _mean_recall(rows) -> float:
    vals = [len(r.retrieved & r.oracle) / len(r.oracle) for r in rows]
    return sum(vals) / len(vals) if vals else 0.0


def recall_metrics(rows, passed_tasks, conapi_passed) -> RecallReport:
    """Mean oracle-API recall over tasks with non-empty oracles.

    passed_tasks: task ids passed by the evaluated run (any sample).
    conapi_passed: task ids passed by the oracle-API-plus-context run.
    """
    scored = [r for r in rows if r.oracle]
    excluded = len(list(rows)) - len(scored)
    joint = {t for t in passed_tasks if t in conapi_passed}
    brows = [r for r in scored if r.task_id in joint]
    crows = [
        TaskRetrieval(r.task_id, r.retrieved | (r.oracle & r.context_contained),
                      r.oracle, r.context_contained)
        for r in scored
    ]
    return RecallReport(
        recall=_mean_recall(scored),
        brecall=_mean_recall(brows),
        crecall=_mean_recall(crows),
        scored_tasks=len(scored),
        brecall_tasks=len(brows),
        excluded_tasks=excluded,
    )


def _trimmed_pct(x: float) -> str:
    out = f"{x:.2f}".rstrip("0").rstrip(".")
    return out if out else "0"


@dataclass
class CountComparisonReport:
    """Retrieved-vs-oracle API count partition: higher / equal / lower."""

    higher: int
    equal: int
    lower: int
    excluded: int       # tasks without an oracle set, footnoted
    denominator: int    # percentage base
    higher_pct: float = field(init=False)
    equal_pct: float = field(init=False)
    lower_pct: float = field(init=False)

    def __post_init__(self):
        d = self.denominator
        if d < 1:
            raise ValueError("denominator must be >= 1")
        self.higher_pct = 100.0 * self.higher / d
        self.equal_pct = 100.0 * self.equal / d
        self.lower_pct = 100.0 * self.lower / d
        total = self.higher_pct + self.equal_pct + self.lower_pct
        if abs(total - 100.0) > 0.1:
            raise ValueError(f"category percentages sum to {total:.2f}, not 100 +/- 0.1")

    @classmethod
    def from_counts(cls, higher, equal, lower, excluded=0, denominator=None):
        if denominator is None:
            denominator = higher + equal + lower
        return cls(higher, equal, lower, excluded, denominator)

    def formatted_row(self) -> str:
        return " / ".join(
            _trimmed_pct(p) for p in (self.higher_pct, self.equal_pct, self.lower_pct)
        )


def api_count_comparison(rows) -> CountComparisonReport:
    """Compare |deduplicated retrieved| with |oracle| per task.

    Tasks with an empty oracle set are excluded from the three categories and
    from the percentage denominator; they show up in the footnote count.
    """
    rows = list(rows)
    higher = equal = lower = excluded = 0
    for r in rows:
        if not r.oracle:
            excluded += 1
            continue
        if len(r.retrieved) > len(r.oracle):
            higher += 1
        elif len(r.retrieved) == len(r.oracle):
            equal += 1
        else:
            lower += 1
    classified = higher + equal + lower
    if not classified:
        raise ValueError("no tasks with oracle data to compare")
    return CountComparisonReport(higher, equal, lower, excluded, classified)


@dataclass
class ContainmentSplit:
    total: int   # tasks in this containment class, Pure passes excluded
    cpass: int   # passed by Context
    bpass: int   # passed by both Context and API
    cpass_pct: float = field(init=False)
    bpass_pct: float = field(init=False)

    def __post_init__(self):
        self.cpass_pct = 100.0 * self.cpass / self.total if self.total else 0.0
        self.bpass_pct = 100.0 * self.bpass / self.cpass if self.cpass else 0.0


@dataclass
class IntersectionReport:
    pass_sets: dict           # condition -> set of passed task ids
    intersections: dict       # tuple of conditions -> set of task ids
    containment: dict         # containment class name -> ContainmentSplit
    excluded_pure: set        # tasks dropped from containment (Pure passed)
    task_count: int


def pass_set(task_samples) -> set:
    """Tasks with at least one passing sample; input maps task -> [bool]."""
    return {task for task, samples in task_samples.items() if any(samples)}


def intersection_report(runs, containment, vacuous_tasks=()) -> IntersectionReport:
    """Cross-condition pass-set analysis.

    runs: condition name -> {task_id: [per-sample pass booleans]}.
    containment: task_id -> containment class name.
    vacuous_tasks: task ids with empty oracle sets, excluded from the
    containment split on top of the Pure-passed exclusion.
    """
    conditions = list(runs)
    if not conditions:
        raise ValueError("no runs given")
    task_sets = {cond: set(tasks) for cond, tasks in runs.items()}
    base = task_sets[conditions[0]]
    for cond, tasks in task_sets.items():
        if tasks != base:
            diff = sorted(tasks.symmetric_difference(base))
            raise ValueError(f"task sets differ between runs ({cond}): {', '.join(diff)}")
    ks = {cond: {len(samples) for samples in runs[cond].values()} for cond in conditions}
    for cond, sizes in ks.items():
        if len(sizes) > 1:
            raise ValueError(f"inconsistent sample counts in run {cond}: {sorted(sizes)}")

    sets = {cond: pass_set(runs[cond]) for cond in conditions}
    inter: dict = {}
    for i, a in enumerate(conditions):
        for b in conditions[i + 1:]:
            inter[(a, b)] = sets[a] & sets[b]
    for triple in (("Context", "API", "ConAPI"),):
        if all(c in sets for c in triple):
            inter[triple] = sets[triple[0]] & sets[triple[1]] & sets[triple[2]]

    excluded_pure = sets.get("Pure", set())
    splits: dict = {}
    if "Context" in sets and "API" in sets:
        for klass in ("FullyContained", "PartiallyContained", "NotIncluded"):
            pool = [
                t for t in base
                if containment.get(t) == klass
                and t not in excluded_pure
                and t not in vacuous_tasks
            ]
            if not pool:
                continue
            cpass = sum(1 for t in pool if t in sets["Context"])
            bpass = sum(1 for t in pool if t in sets["Context"] and t in sets["API"])
            splits[klass] = ContainmentSplit(total=len(pool), cpass=cpass, bpass=bpass)

    return IntersectionReport(
        pass_sets=sets,
        intersections=inter,
        containment=splits,
        excluded_pure=excluded_pure,
        task_count=len(base),
    )


@dataclass
class LengthSummary:
    count: int
    min: int
    median: float
    mean: float
    max: int


def prompt_length_analysis(lengths, partition) -> dict:
    """Summarize prompt token lengths per task partition.

    lengths: task_id -> token estimate. partition: name -> set of task ids.
    Tasks missing from `lengths` are ignored inside their partition.
    """
    out: dict[str, LengthSummary] = {}
    for name, tasks in partition.items():
        vals = sorted(lengths[t] for t in tasks if t in lengths)
        if not vals:
            out[name] = LengthSummary(0, 0, 0.0, 0.0, 0)
            continue
        out[name] = LengthSummary(
            count=len(vals),
            min=vals[0],
            median=statistics.median(vals),
            mean=statistics.fmean(vals),
            max=vals[-1],
        )
    return out
