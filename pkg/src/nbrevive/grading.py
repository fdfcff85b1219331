"""Submission grading: competition metadata, CSV validation, metric
computation, score deviation, and the outcome taxonomy.

An execution outcome is labeled by three coordinates: the error status of the
run, whether a valid submission CSV exists, and whether the relative score
deviation clears the threshold. Hard pipeline failures (timeout, missing
write-back, LLM failure, environment failure) are always Failed regardless of
the other two coordinates, and a missing CSV can never be Reproducible.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .errors import MetricDomainError, ZeroTarget

logger = logging.getLogger(__name__)

# error statuses
ERROR_FREE = "error_free"
ERROR = "error"
TIMEOUT = "timeout"
NOT_SAVED = "not_saved"
LLM_FAILED = "llm_failed"
BACKPORT_FAILED = "backport_failed"

FAILURE_STATUSES = (TIMEOUT, NOT_SAVED, LLM_FAILED, BACKPORT_FAILED)
ERROR_STATUSES = (ERROR_FREE, ERROR) + FAILURE_STATUSES

# labels
REPRODUCIBLE = "Reproducible"
NON_REPRODUCIBLE = "NonReproducible"
FAILED = "Failed"

DEFAULT_THRESHOLD = 0.10


@dataclass(frozen=True)
class CompetitionSpec:
    """Static description of one competition's grading contract."""

    id: str
    metric: str
    target_score: float
    columns: tuple[str, ...]
    id_column: str
    ground_truth_path: Optional[str] = None
    description: str = ""
    submission_filename: str = "submission.csv"
    higher_is_better: Optional[bool] = None  # None -> metric default

    def direction(self) -> bool:
        if self.higher_is_better is not None:
            return self.higher_is_better
        return METRICS[self.metric].higher_is_better


@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str


@dataclass(frozen=True)
class ReproOutcome:
    """Classified outcome of one executed/graded notebook state."""

    error_status: str
    has_csv: bool
    delta_s: Optional[float]
    label: str

    def to_dict(self) -> dict:
        return {
            "error_status": self.error_status,
            "has_csv": self.has_csv,
            "delta_s": self.delta_s,
            "label": self.label,
        }

    @staticmethod
    def from_dict(d: dict) -> "ReproOutcome":
        return ReproOutcome(d["error_status"], d["has_csv"], d.get("delta_s"), d["label"])


# --------------------------------------------------------------------------
# metrics


def _as_float(v, what: str) -> float:
    try:
        return float(v)
    except (TypeError, ValueError) as exc:
        raise MetricDomainError(f"{what} value {v!r} is not numeric") from exc


def _accuracy(pred: Sequence, truth: Sequence) -> float:
    hits = 0
    for p, t in zip(pred, truth):
        try:
            same = float(p) == float(t)
        except (TypeError, ValueError):
            same = str(p) == str(t)
        hits += same
    return hits / len(pred)


def _rmse(pred: Sequence, truth: Sequence) -> float:
    se = [( _as_float(p, "prediction") - _as_float(t, "truth")) ** 2 for p, t in zip(pred, truth)]
    return math.sqrt(sum(se) / len(se))


def _mae(pred: Sequence, truth: Sequence) -> float:
    ae = [abs(_as_float(p, "prediction") - _as_float(t, "truth")) for p, t in zip(pred, truth)]
    return sum(ae) / len(ae)


def _logloss(pred: Sequence, truth: Sequence) -> float:
    eps = 1e-15
    total = 0.0
    for p, t in zip(pred, truth):
        p = _as_float(p, "probability")
        t = _as_float(t, "truth")
        if p < 0.0 or p > 1.0:
            raise MetricDomainError(f"probability {p} outside [0, 1]")
        if t not in (0.0, 1.0):
            raise MetricDomainError(f"logloss truth label {t} is not binary")
        p = min(max(p, eps), 1.0 - eps)
        total += -(t * math.log(p) + (1.0 - t) * math.log(1.0 - p))
    return total / len(pred)


def _auc(pred: Sequence, truth: Sequence) -> float:
    pairs = []
    n_pos = n_neg = 0
    for p, t in zip(pred, truth):
        p = _as_float(p, "score")
        t = _as_float(t, "truth")
        if t not in (0.0, 1.0):
            raise MetricDomainError(f"auc truth label {t} is not binary")
        n_pos += t == 1.0
        n_neg += t == 0.0
        pairs.append((p, t))
    if n_pos == 0 or n_neg == 0:
        raise MetricDomainError("auc needs both classes present")
    # rank-based with tie-averaged ranks
    pairs.sort(key=lambda pt: pt[0])
    ranks = [0.0] * len(pairs)
    i = 0
    while i < len(pairs):
        j = i
        while j + 1 < len(pairs) and pairs[j + 1][0] == pairs[i][0]:
            j += 1
        mean_rank = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[k] = mean_rank
        i = j + 1
    pos_rank_sum = sum(r for r, (_, t) in zip(ranks, pairs) if t == 1.0)
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass(frozen=True)
class Metric:
    name: str
    higher_is_better: bool
    fn: object


METRICS = {
    "accuracy": Metric("accuracy", True, _accuracy),
    "rmse": Metric("rmse", False, _rmse),
    "mae": Metric("mae", False, _mae),
    "logloss": Metric("logloss", False, _logloss),
    "auc": Metric("auc", True, _auc),
}


def compute_metric(pred: Sequence, truth: Sequence, metric: str) -> float:
    if metric not in METRICS:
        raise MetricDomainError(f"unknown metric {metric!r}")
    if len(pred) != len(truth):
        raise MetricDomainError(f"length mismatch: {len(pred)} predictions vs {len(truth)} truths")
    if not pred:
        raise MetricDomainError("empty inputs")
    return METRICS[metric].fn(pred, truth)


# --------------------------------------------------------------------------
# score deviation and classification


def score_deviation(reproduced: float, target: float) -> float:
    """Relative deviation |reproduced - target| / |target|.

    Raises ZeroTarget when the target score is zero (the denominator)."""
    if target == 0:
        raise ZeroTarget("target score is zero, relative deviation undefined")
    return abs(reproduced - target) / abs(target)


def classify_outcome(
    error_status: str,
    has_csv: bool,
    delta_s: Optional[float],
    threshold: float = DEFAULT_THRESHOLD,
) -> ReproOutcome:
    """Total mapping from the three outcome coordinates to a label.

    Failure statuses always map to Failed; without a valid CSV the best
    possible label is NonReproducible; otherwise the deviation decides.
    """
    if error_status not in ERROR_STATUSES:
        raise ValueError(f"unknown error status {error_status!r}")
    if error_status in FAILURE_STATUSES:
        label = FAILED
    elif has_csv and delta_s is not None and delta_s <= threshold:
        label = REPRODUCIBLE
    else:
        label = NON_REPRODUCIBLE
    return ReproOutcome(error_status=error_status, has_csv=has_csv, delta_s=delta_s, label=label)


def classify(
    report,
    delta_s: Optional[float] = None,
    threshold: float = DEFAULT_THRESHOLD,
    error_status: Optional[str] = None,
) -> ReproOutcome:
    """Classify an execution report plus its graded deviation.

    ``error_status`` overrides the report-derived status (used for llm_failed
    and backport_failed, which do not come from execution). ``delta_s`` must
    be present iff the report carried a submission that validated.
    """
    if error_status is None:
        if report.status == "timeout":
            error_status = TIMEOUT
        elif report.status == "not_saved":
            error_status = NOT_SAVED
        elif any(not r.ok for r in report.cell_results):
            error_status = ERROR
        else:
            error_status = ERROR_FREE
    has_csv = report is not None and getattr(report, "submission", None) is not None and delta_s is not None
    return classify_outcome(error_status, has_csv, delta_s, threshold)


# --------------------------------------------------------------------------
# CSV submissions


@dataclass(frozen=True)
class Table:
    header: tuple[str, ...]
    rows: tuple[tuple[str, ...], ...]

    def column(self, name: str) -> list[str]:
        i = self.header.index(name)
        return [r[i] for r in self.rows]


def read_table(text: str) -> Table:
    reader = csv.reader(io.StringIO(text))
    rows = [tuple(r) for r in reader if r]
    if not rows:
        return Table(header=(), rows=())
    return Table(header=rows[0], rows=tuple(rows[1:]))


def load_table(path: str | Path) -> Table:
    return read_table(Path(path).read_text(encoding="utf-8"))


def validate_submission(submission: Table, comp: CompetitionSpec, truth: Table) -> list[Violation]:
    """Check a submission against the competition schema and ground truth.

    Verifies header names and order, id completeness (every ground-truth id
    present exactly once, no unknown ids), row count, and that prediction
    cells parse under the metric's domain. Returns the violations found; an
    empty list means the CSV is valid.
    """
    violations: list[Violation] = []
    if not submission.header:
        return [Violation("empty", "submission has no header row")]
    if tuple(submission.header) != tuple(comp.columns):
        violations.append(
            Violation(
                "header_mismatch",
                f"expected columns {list(comp.columns)}, got {list(submission.header)}",
            )
        )
        return violations  # nothing else is checkable without the schema

    truth_ids = truth.column(comp.id_column)
    sub_ids = submission.column(comp.id_column)
    if len(submission.rows) != len(truth.rows):
        violations.append(
            Violation("row_count", f"expected {len(truth.rows)} rows, got {len(submission.rows)}")
        )
    truth_set = set(truth_ids)
    seen: set[str] = set()
    for rid in sub_ids:
        if rid not in truth_set:
            violations.append(Violation("unknown_id", f"id {rid!r} not in ground truth"))
        elif rid in seen:
            violations.append(Violation("duplicate_id", f"id {rid!r} appears more than once"))
        seen.add(rid)
    for rid in truth_set - seen:
        violations.append(Violation("missing_id", f"ground-truth id {rid!r} missing"))

    numeric = comp.metric in ("rmse", "mae", "logloss", "auc")
    pred_cols = [c for c in comp.columns if c != comp.id_column]
    for col in pred_cols:
        for i, v in enumerate(submission.column(col)):
            if v == "" or (numeric and not _parses_as_float(v)):
                violations.append(Violation("unparseable_value", f"row {i} column {col!r}: {v!r}"))
    return violations


def _parses_as_float(v: str) -> bool:
    try:
        f = float(v)
    except ValueError:
        return False
    return not math.isnan(f)


def grade_submission(text: str, comp: CompetitionSpec, truth: Table) -> tuple[Optional[float], list[Violation]]:
    """Validate and score a submission CSV.

    Returns (score, violations); score is None whenever the CSV is malformed
    or fails validation, so a malformed CSV grades as having no submission.
    """
    try:
        submission = read_table(text)
    except csv.Error as exc:
        return None, [Violation("unreadable", str(exc))]
    violations = validate_submission(submission, comp, truth)
    if violations:
        return None, violations
    pred_col = next(c for c in comp.columns if c != comp.id_column)
    by_id = dict(zip(submission.column(comp.id_column), submission.column(pred_col)))
    truth_pred_col = next(c for c in truth.header if c != comp.id_column)
    pred, tr = [], []
    for rid, tval in zip(truth.column(comp.id_column), truth.column(truth_pred_col)):
        pred.append(by_id[rid])
        tr.append(tval)
    return compute_metric(pred, tr, comp.metric), []


# --------------------------------------------------------------------------
# competition config loading


def load_competition_spec(path: str | Path) -> CompetitionSpec:
    """Read a competition spec from a JSON or TOML file."""
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".toml":
        try:
            import tomllib  # py>=3.11
        except ImportError:  # pragma: no cover - depends on interpreter
            import tomli as tomllib
        data = tomllib.loads(raw.decode("utf-8"))
    else:
        data = json.loads(raw.decode("utf-8"))
    return competition_from_dict(data, base_dir=path.parent)


def competition_from_dict(data: dict, base_dir: Optional[Path] = None) -> CompetitionSpec:
    if data.get("metric") not in METRICS:
        raise MetricDomainError(f"unknown metric {data.get('metric')!r}")
    target = float(data["target_score"])
    if target == 0:
        raise ZeroTarget(f"competition {data.get('id')!r} has target score 0")
    gt = data.get("ground_truth_path")
    if gt is not None and base_dir is not None and not Path(gt).is_absolute():
        gt = str(base_dir / gt)
    return CompetitionSpec(
        id=str(data["id"]),
        metric=data["metric"],
        target_score=target,
        columns=tuple(data["columns"]),
        id_column=data["id_column"],
        ground_truth_path=gt,
        description=data.get("description", ""),
        submission_filename=data.get("submission_filename", "submission.csv"),
        higher_is_better=data.get("higher_is_better"),
    )
