"""Aggregate analytics over session logs: outcome tables, fix-type transition
matrices, error taxonomies, rank correlation and effect size, edit-similarity
curves, and cost reports.

kendall_tau and cliffs_delta are computed from exact integer pair counts
(merge-sort inversion counting and bisect counting respectively) so results
agree bit-for-bit with a naive O(n^2) enumeration.
"""

from __future__ import annotations

import bisect
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from . import grading
from .agent import ERROR_REPAIR, FIX_TYPES, SessionLog
from .errors import EmptyGroup, LengthMismatch
from .gateway import PriceTable, Usage, cost
from .grading import ReproOutcome

ERROR_TYPES = ("NameError", "AttributeError", "ValueError", "KeyError", "TypeError", "Others")

_FINAL_LINE_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_][A-Za-z0-9_]*)*)(?::|$)")


def classify_error(traceback_text: str) -> str:
    """Bucket a traceback by the exception class on its final line.

    The five most common classes keep their own bucket; everything else
    (including exceptions with module-qualified names) maps to Others.
    """
    lines = [ln.strip() for ln in traceback_text.strip().split("\n") if ln.strip()]
    if not lines:
        return "Others"
    m = _FINAL_LINE_RE.match(lines[-1])
    if not m:
        return "Others"
    name = m.group(1).split(".")[-1]
    return name if name in ERROR_TYPES[:-1] else "Others"


# --------------------------------------------------------------------------
# rank correlation / effect size


def kendall_tau(x: Sequence[float], y: Sequence[float]) -> float:
    """Kendall rank correlation with tie correction (tau-b).

    Concordant/discordant pairs are counted via merge-sort inversion counting
    on y after sorting by (x, y); ties are counted per group. Returns NaN
    when either vector is constant (the denominator vanishes).
    """
    if len(x) != len(y):
        raise LengthMismatch(f"{len(x)} vs {len(y)} observations")
    n = len(x)
    if n < 2:
        raise LengthMismatch("need at least 2 observations")
    pairs = sorted(zip(x, y))
    ys = [p[1] for p in pairs]

    n0 = n * (n - 1) // 2
    n1 = _tie_pairs(p[0] for p in pairs)
    n2 = _tie_pairs(sorted(y))
    n3 = _tie_pairs(pairs)

    discordant = _count_inversions(ys)
    concordant = n0 - n1 - n2 + n3 - discordant

    denom_sq = (n0 - n1) * (n0 - n2)
    if denom_sq == 0:
        return float("nan")
    return (concordant - discordant) / math.sqrt(denom_sq)


def _tie_pairs(values: Iterable) -> int:
    counts = Counter(values)
    return sum(c * (c - 1) // 2 for c in counts.values())


def _count_inversions(values: list) -> int:
    """Pairs (i < j) with values[i] > values[j], by merge sort."""

    def sort(arr: list) -> tuple[list, int]:
        if len(arr) <= 1:
            return arr, 0
        mid = len(arr) // 2
        left, a = sort(arr[:mid])
        right, b = sort(arr[mid:])
        merged = []
        inv = a + b
        i = j = 0
        while i < len(left) and j < len(right):
            if right[j] < left[i]:
                inv += len(left) - i
                merged.append(right[j])
                j += 1
            else:
                merged.append(left[i])
                i += 1
        merged.extend(left[i:])
        merged.extend(right[j:])
        return merged, inv

    return sort(list(values))[1]


def cliffs_delta(a: Sequence[float], b: Sequence[float]) -> float:
    """Cliff's delta effect size: P(a > b) - P(a < b) over all cross pairs."""
    if not a or not b:
        raise EmptyGroup("both groups must be non-empty")
    sb = sorted(b)
    greater = less = 0
    for v in a:
        greater += bisect.bisect_left(sb, v)  # b values strictly below v
        less += len(sb) - bisect.bisect_right(sb, v)  # strictly above
    return (greater - less) / (len(a) * len(b))


# --------------------------------------------------------------------------
# outcome table


@dataclass(frozen=True)
class OutcomeRow:
    error_status: str
    csv_state: str  # with_csv_within | with_csv_beyond | no_csv | (blank for failures)
    label: str
    count: int


def outcome_table(outcomes: Iterable[ReproOutcome], threshold: float = grading.DEFAULT_THRESHOLD) -> list[OutcomeRow]:
    """Partition outcomes into the taxonomy rows. Counts sum to the input
    size; every outcome lands in exactly one row."""
    counts: Counter = Counter()
    for o in outcomes:
        if o.error_status in grading.FAILURE_STATUSES:
            key = (o.error_status, "", grading.FAILED)
        elif not o.has_csv or o.delta_s is None:
            key = (o.error_status, "no_csv", grading.NON_REPRODUCIBLE)
        elif o.delta_s <= threshold:
            key = (o.error_status, "with_csv_within", grading.REPRODUCIBLE)
        else:
            key = (o.error_status, "with_csv_beyond", grading.NON_REPRODUCIBLE)
        counts[key] += 1
    rows = [OutcomeRow(es, cs, label, n) for (es, cs, label), n in counts.items()]
    order = {s: i for i, s in enumerate(grading.ERROR_STATUSES)}
    rows.sort(key=lambda r: (order.get(r.error_status, 99), r.csv_state))
    return rows


# --------------------------------------------------------------------------
# transition matrix

# columns: where a fix attempt landed
COL_TIMEOUT = "timeout"
COL_ERROR_NONREPRO = "error_nonrepro"
COL_ERRORFREE_NONREPRO = "errorfree_nonrepro"
COL_ERROR_REPRO = "error_repro"
COL_ERRORFREE_REPRO = "errorfree_repro"
COL_OTHER_FAILED = "other_failed"
TRANSITION_COLUMNS = (
    COL_TIMEOUT,
    COL_ERROR_NONREPRO,
    COL_ERRORFREE_NONREPRO,
    COL_ERROR_REPRO,
    COL_ERRORFREE_REPRO,
    COL_OTHER_FAILED,
)


def state_column(outcome: ReproOutcome) -> str:
    if outcome.error_status == grading.TIMEOUT:
        return COL_TIMEOUT
    if outcome.error_status in grading.FAILURE_STATUSES:
        return COL_OTHER_FAILED
    error = outcome.error_status == grading.ERROR
    repro = outcome.label == grading.REPRODUCIBLE
    if error:
        return COL_ERROR_REPRO if repro else COL_ERROR_NONREPRO
    return COL_ERRORFREE_REPRO if repro else COL_ERRORFREE_NONREPRO


@dataclass
class TransitionMatrix:
    counts: dict  # fix_type -> {column -> int}

    def row_sum(self, fix_type: str) -> int:
        return sum(self.counts.get(fix_type, {}).values())

    def total(self) -> int:
        return sum(self.row_sum(ft) for ft in self.counts)


def transition_matrix(logs: Iterable[SessionLog]) -> TransitionMatrix:
    """Count, per fix type, the state every applied fix landed in. Row sums
    equal the per-type fix totals by construction."""
    counts: dict = {ft: {col: 0 for col in TRANSITION_COLUMNS} for ft in FIX_TYPES}
    for log in logs:
        for rec in log.records:
            counts[rec.fix_type][state_column(rec.post_state)] += 1
    return TransitionMatrix(counts=counts)


# --------------------------------------------------------------------------
# error taxonomy over iterations


def error_taxonomy(logs: Iterable[SessionLog]) -> dict[str, Counter]:
    """Error-type counts at baseline and after each fix iteration."""
    out: dict[str, Counter] = {"baseline": Counter()}
    for log in logs:
        for et in log.baseline_error_types:
            out["baseline"][et] += 1
        for rec in log.records:
            key = f"iteration_{rec.iteration}"
            out.setdefault(key, Counter())
            for et in rec.post_error_types:
                out[key][et] += 1
    return out


# --------------------------------------------------------------------------
# similarity curves


def similarity_curves(logs: Iterable[SessionLog]) -> dict:
    """Mean edit similarity to the baseline per fix index, plus per-step
    similarity samples grouped by fix type."""
    logs = list(logs)
    by_iteration: dict[int, list[float]] = defaultdict(list)
    per_step: dict[str, list[float]] = defaultdict(list)
    for log in logs:
        for rec in log.records:
            by_iteration[rec.iteration].append(rec.edit_sim_baseline)
            per_step[rec.fix_type].append(rec.edit_sim_prev)
    curve = [
        {"iteration": i, "mean_edit_sim_baseline": sum(v) / len(v), "n": len(v)}
        for i, v in sorted(by_iteration.items())
    ]
    return {"baseline_curve": curve, "per_step_by_fix_type": dict(per_step)}


# --------------------------------------------------------------------------
# cost report


@dataclass(frozen=True)
class CostRow:
    group: str
    n: int
    mean_cost: float
    mean_input_uncached: float
    mean_input_cached: float
    mean_output: float


def _mean_usage_cost(usages: list[Usage], prices: PriceTable, group: str) -> CostRow:
    n = len(usages)
    if n == 0:
        return CostRow(group, 0, 0.0, 0.0, 0.0, 0.0)
    return CostRow(
        group=group,
        n=n,
        mean_cost=sum(cost(u, prices) for u in usages) / n,
        mean_input_uncached=sum(u.input_uncached for u in usages) / n,
        mean_input_cached=sum(u.input_cached for u in usages) / n,
        mean_output=sum(u.output for u in usages) / n,
    )


def cost_report(logs: Iterable[SessionLog], prices: Optional[PriceTable] = None) -> list[CostRow]:
    """Mean cost and token usage per notebook and per fix type."""
    from .gateway import load_price_table

    prices = prices or load_price_table()
    logs = list(logs)
    rows = [_mean_usage_cost([log.total_usage for log in logs], prices, "per_notebook")]
    for ft in FIX_TYPES:
        usages = [rec.usage for log in logs for rec in log.records if rec.fix_type == ft]
        rows.append(_mean_usage_cost(usages, prices, ft))
    return rows


# --------------------------------------------------------------------------
# correlations between fix effort and notebook shape


def fix_effort_correlations(logs: Iterable[SessionLog]) -> list[dict]:
    """Kendall tau between the number of fixes and each notebook-shape
    covariate, over all sessions that reached Reproducible."""
    logs = [l for l in logs if l.terminal is not None and l.terminal.label == grading.REPRODUCIBLE]
    rows = []
    for covariate in ("size_chars", "loc", "error_count"):
        xs, ys = [], []
        for log in logs:
            if covariate in log.notebook_stats:
                xs.append(log.fix_count)
                ys.append(log.notebook_stats[covariate])
        if len(xs) >= 2:
            tau = kendall_tau(xs, ys)
        else:
            tau = float("nan")
        rows.append({"covariate": covariate, "n": len(xs), "kendall_tau": tau})
    return rows
