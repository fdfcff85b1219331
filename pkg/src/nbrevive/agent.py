"""Modernization agent: decides what kind of fix a notebook state needs,
builds the LLM prompt, parses the plan-then-patch response, and drives the
execute -> grade -> classify loop until the score reproduces or the iteration
budget runs out.

One iteration = one LLM round trip plus one execution of the patched
notebook. The terminal outcome is the last classification, except for hard
LLM-side failures (context cutoff, gateway errors, persistent malformed
responses) which terminate the session as llm_failed.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from . import grading
from .backport import EnvironmentSpec
from .errors import (
    GatewayError,
    NoCodeBlock,
    PatchParseError,
    TokenBudgetExceeded,
)
from .gateway import Usage
from .grading import CompetitionSpec, ReproOutcome, classify, score_deviation
from .harness import ExecLimits, ExecutionReport, Executor
from .notebook import (
    Notebook,
    apply_patch,
    code_text,
    count_tokens,
    edit_similarity,
    first_error_index,
    notebook_stats,
    parse_cell_delimited,
    render_cell_delimited,
)

logger = logging.getLogger(__name__)

# fix types
RUNTIME_REDUCTION = "runtime_reduction"
ERROR_REPAIR = "error_repair"
SCORE_CALIBRATION = "score_calibration"
FIX_TYPES = (RUNTIME_REDUCTION, ERROR_REPAIR, SCORE_CALIBRATION)

FILE_LEVEL = "file_level"
CELL_LEVEL = "cell_level"

DEFAULT_MAX_ITERATIONS = 16
DEFAULT_TOKEN_CUTOFF = 13485


@dataclass(frozen=True)
class SessionConfig:
    threshold: float = grading.DEFAULT_THRESHOLD
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    mode: str = FILE_LEVEL
    token_cutoff: int = DEFAULT_TOKEN_CUTOFF
    retry_budget: int = 2  # consecutive unapplied iterations before giving up
    tokenizer: Optional[Callable[[str], int]] = None


@dataclass(frozen=True)
class Scores:
    target: float
    reproduced: Optional[float] = None


@dataclass
class FixRecord:
    """One loop iteration: what was asked, what came back, what it did."""

    iteration: int
    fix_type: str
    prompt: str
    plan: str
    patch_applied: bool
    pre_state: ReproOutcome
    post_state: ReproOutcome
    usage: Usage
    edit_sim_prev: float
    edit_sim_baseline: float
    post_error_types: tuple[str, ...] = ()
    reproduced_score: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "record": "fix",
            "iteration": self.iteration,
            "fix_type": self.fix_type,
            "plan": self.plan,
            "patch_applied": self.patch_applied,
            "pre_state": self.pre_state.to_dict(),
            "post_state": self.post_state.to_dict(),
            "usage": self.usage.to_dict(),
            "edit_sim_prev": self.edit_sim_prev,
            "edit_sim_baseline": self.edit_sim_baseline,
            "post_error_types": list(self.post_error_types),
            "reproduced_score": self.reproduced_score,
            "prompt_chars": len(self.prompt),
        }


@dataclass
class SessionLog:
    """Append-only record of one modernization session."""

    notebook_id: str
    baseline_state: Optional[ReproOutcome] = None
    baseline_error_types: tuple[str, ...] = ()
    notebook_stats: dict = field(default_factory=dict)
    records: list[FixRecord] = field(default_factory=list)
    terminal: Optional[ReproOutcome] = None
    total_usage: Usage = field(default_factory=Usage)
    final_notebook: Optional[Notebook] = None  # not persisted in the JSONL

    def append(self, record: FixRecord) -> None:
        if self.terminal is not None:
            raise ValueError("session already finished")
        self.records.append(record)
        self.total_usage = self.total_usage + record.usage

    def finish(self, outcome: ReproOutcome) -> None:
        if self.terminal is not None:
            raise ValueError("session already finished")
        self.terminal = outcome

    @property
    def fix_count(self) -> int:
        return len(self.records)

    def to_jsonl(self) -> str:
        lines = [
            json.dumps(
                {
                    "record": "baseline",
                    "notebook_id": self.notebook_id,
                    "state": self.baseline_state.to_dict() if self.baseline_state else None,
                    "error_types": list(self.baseline_error_types),
                    **self.notebook_stats,
                },
                ensure_ascii=False,
            )
        ]
        lines += [json.dumps(r.to_dict(), ensure_ascii=False) for r in self.records]
        lines.append(
            json.dumps(
                {
                    "record": "terminal",
                    "notebook_id": self.notebook_id,
                    "state": self.terminal.to_dict() if self.terminal else None,
                    "iterations": len(self.records),
                    "total_usage": self.total_usage.to_dict(),
                    **self.notebook_stats,
                },
                ensure_ascii=False,
            )
        )
        return "".join(line + "\n" for line in lines)

    @staticmethod
    def from_jsonl(text: str) -> "SessionLog":
        log = SessionLog(notebook_id="?")
        for line in text.splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            kind = d.get("record")
            if kind == "baseline":
                log.notebook_id = d.get("notebook_id", "?")
                log.baseline_state = ReproOutcome.from_dict(d["state"]) if d.get("state") else None
                log.baseline_error_types = tuple(d.get("error_types", ()))
                log.notebook_stats = {
                    k: d[k] for k in ("size_chars", "loc", "error_count") if k in d
                }
            elif kind == "fix":
                log.records.append(
                    FixRecord(
                        iteration=d["iteration"],
                        fix_type=d["fix_type"],
                        prompt="",
                        plan=d.get("plan", ""),
                        patch_applied=d.get("patch_applied", False),
                        pre_state=ReproOutcome.from_dict(d["pre_state"]),
                        post_state=ReproOutcome.from_dict(d["post_state"]),
                        usage=Usage.from_dict(d.get("usage", {})),
                        edit_sim_prev=d.get("edit_sim_prev", 1.0),
                        edit_sim_baseline=d.get("edit_sim_baseline", 1.0),
                        post_error_types=tuple(d.get("post_error_types", ())),
                        reproduced_score=d.get("reproduced_score"),
                    )
                )
            elif kind == "terminal":
                log.terminal = ReproOutcome.from_dict(d["state"]) if d.get("state") else None
                log.total_usage = Usage.from_dict(d.get("total_usage", {}))
                if not log.notebook_stats:
                    log.notebook_stats = {
                        k: d[k] for k in ("size_chars", "loc", "error_count") if k in d
                    }
        return log


# --------------------------------------------------------------------------
# triage


def classify_issue(report: ExecutionReport, outcome: ReproOutcome) -> str:
    """Map the current state to the fix the next prompt should ask for.

    Timeouts need the runtime reduced; visible errors need repairing; an
    error-free run that still misses the target (including one that produced
    no submission at all) needs its score calibrated.
    """
    if outcome.error_status == grading.TIMEOUT:
        return RUNTIME_REDUCTION
    if report is not None and report.error_cells():
        return ERROR_REPAIR
    return SCORE_CALIBRATION


# --------------------------------------------------------------------------
# prompt construction

_RESPONSE_CONTRACT = """## Response format
First write a short plan describing the changes you will make and why.
Then output exactly one fenced markdown code block containing the FULL
updated notebook in the same cell-delimited format shown above, including
every cell (changed and unchanged). Do not output anything after the block.
"""

_OBJECTIVES = {
    RUNTIME_REDUCTION: (
        "The notebook exceeded its wall-clock budget. Reduce its runtime so it "
        "finishes in time (subsample heavy loops, cut search spaces, cap "
        "epochs/estimators) while changing the modeling approach as little as "
        "possible."
    ),
    ERROR_REPAIR: (
        "The notebook raises errors when executed in the environment below. "
        "Repair the errors (API renames, removed defaults, changed signatures) "
        "while preserving the original intent of the code."
    ),
    SCORE_CALIBRATION: (
        "The notebook runs without errors but its score does not reproduce the "
        "target. Adjust the code so the produced submission scores within the "
        "tolerance of the target (check label encodings, column order, metric "
        "direction, data filtering)."
    ),
}

_NO_SUBMISSION_NOTE = (
    "Note: the last run wrote no submission CSV at all; make sure the notebook "
    "saves its predictions to the expected path."
)


def build_prompt(
    fix_type: str,
    nb: Notebook,
    comp: CompetitionSpec,
    env: EnvironmentSpec,
    scores: Scores,
    mode: str = FILE_LEVEL,
    token_cutoff: int = DEFAULT_TOKEN_CUTOFF,
    tokenizer: Optional[Callable[[str], int]] = None,
    has_submission: bool = True,
) -> str:
    """Assemble the full prompt for one fix iteration.

    In cell_level mode an error_repair prompt only shows the cells up to and
    including the first failing cell (with its traceback) plus the one
    immediately after. Raises TokenBudgetExceeded when the assembled prompt
    crosses the context cutoff.
    """
    if fix_type not in FIX_TYPES:
        raise ValueError(f"unknown fix type {fix_type!r}")
    shown = nb
    window_note = ""
    if mode == CELL_LEVEL and fix_type == ERROR_REPAIR:
        k = first_error_index(nb)
        if k is not None:
            shown = Notebook(
                format_version=nb.format_version,
                cells=nb.cells[: k + 2],
                metadata=dict(nb.metadata),
            )
            window_note = (
                "Only the cells up to the first failing cell (with its "
                "traceback) and the one immediately after are shown. Focus on "
                "fixing that first error.\n\n"
            )
    rendered = render_cell_delimited(shown, include_tracebacks=fix_type == ERROR_REPAIR)

    direction = "higher is better" if comp.direction() else "lower is better"
    reproduced = (
        f"{scores.reproduced}" if scores.reproduced is not None else "not available (no valid submission)"
    )
    objective = _OBJECTIVES[fix_type]
    if fix_type == SCORE_CALIBRATION and not has_submission:
        objective += "\n" + _NO_SUBMISSION_NOTE

    parts = [
        "You are modernizing a Python machine-learning notebook so that it runs "
        "in the environment below and reproduces its original competition score.",
        f"## Fix objective\n{objective}",
        f"## Competition\n{comp.description or comp.id}\n"
        f"Metric: {comp.metric} ({direction})\n"
        f"Target score: {comp.target_score}\n"
        f"Last reproduced score: {reproduced}",
        f"## Environment\n{env.fingerprint()}",
        "## Input/output contract\n"
        f"- Competition data is mounted read-only under {('/kaggle/input/')}.\n"
        f"- Write the submission CSV to /kaggle/working/{comp.submission_filename}.\n"
        f"- Expected columns: {', '.join(comp.columns)}.",
        f"## Notebook\n{window_note}{rendered}",
        _RESPONSE_CONTRACT,
    ]
    prompt = "\n\n".join(parts)
    tokens = count_tokens(prompt, tokenizer)
    if tokens > token_cutoff:
        raise TokenBudgetExceeded(f"prompt needs {tokens} tokens, cutoff is {token_cutoff}")
    return prompt


# --------------------------------------------------------------------------
# response parsing

_FENCE_RE = re.compile(r"```[^\n]*\n(.*?)```", re.DOTALL)


def parse_response(text: str) -> tuple[str, Notebook]:
    """Split an LLM response into (plan, patch notebook).

    The patch is the LAST complete fenced code block (a warning is logged
    when several are present); everything before it is the plan. Raises
    NoCodeBlock when no complete fence exists and PatchParseError when the
    block is not valid cell-delimited text.
    """
    matches = list(_FENCE_RE.finditer(text))
    if not matches:
        raise NoCodeBlock("response contains no complete fenced code block")
    if len(matches) > 1:
        logger.warning("response contains %d fenced blocks; using the last", len(matches))
    chosen = matches[-1]
    plan = text[: chosen.start()].strip()
    patch = parse_cell_delimited(chosen.group(1))
    return plan, patch


# --------------------------------------------------------------------------
# grading glue


def grade_report(report: ExecutionReport, comp: CompetitionSpec, truth: Optional[grading.Table]) -> tuple[Optional[float], Optional[float]]:
    """(reproduced_score, delta_s) for a report's submission; (None, None)
    when there is nothing valid to grade."""
    if report.submission is None or truth is None:
        return None, None
    score, violations = grading.grade_submission(report.submission.text, comp, truth)
    if violations or score is None:
        return None, None
    return score, score_deviation(score, comp.target_score)


def _error_types(report: Optional[ExecutionReport]) -> tuple[str, ...]:
    from .analytics import classify_error

    if report is None:
        return ()
    return tuple(classify_error(r.traceback or "") for r in report.error_cells())


_LLM_FAILED_OUTCOME_ARGS = dict(error_status=grading.LLM_FAILED, has_csv=False, delta_s=None)


def _llm_failed() -> ReproOutcome:
    return grading.classify_outcome(**_LLM_FAILED_OUTCOME_ARGS)


# --------------------------------------------------------------------------
# the loop


def run_session(
    nb: Notebook,
    comp: CompetitionSpec,
    executor: Executor,
    gateway,
    env: Optional[EnvironmentSpec] = None,
    limits: Optional[ExecLimits] = None,
    config: Optional[SessionConfig] = None,
    truth: Optional[grading.Table] = None,
    notebook_id: str = "notebook",
) -> SessionLog:
    """Run the modernization loop on one notebook.

    Executes the baseline, then iterates fix attempts until the outcome is
    Reproducible, the iteration budget is exhausted, or an LLM-side failure
    terminates the session as llm_failed. Every iteration (applied or not)
    appends one FixRecord; usage accumulates across iterations.
    """
    env = env or EnvironmentSpec(interpreter_version="3.10.12")
    limits = limits or ExecLimits()
    config = config or SessionConfig()
    if truth is None and comp.ground_truth_path:
        truth = grading.load_table(comp.ground_truth_path)

    log = SessionLog(notebook_id=notebook_id, notebook_stats=notebook_stats(nb))
    baseline_code = code_text(nb)

    current = nb
    report = executor.execute(current, comp, limits, env)
    # prompts are built from the executed notebook so they carry tracebacks
    current = report.executed_notebook or current
    score, delta = grade_report(report, comp, truth)
    state = classify(report, delta_s=delta, threshold=config.threshold)
    log.baseline_state = state
    log.baseline_error_types = _error_types(report)
    prev_code = baseline_code
    consecutive_failures = 0

    while log.terminal is None:
        if state.label == grading.REPRODUCIBLE:
            log.finish(state)
            break
        if len(log.records) >= config.max_iterations:
            log.finish(state)
            break

        fix_type = classify_issue(report, state)
        try:
            prompt = build_prompt(
                fix_type,
                current,
                comp,
                env,
                Scores(target=comp.target_score, reproduced=score),
                mode=config.mode,
                token_cutoff=config.token_cutoff,
                tokenizer=config.tokenizer,
                has_submission=report.submission is not None,
            )
        except TokenBudgetExceeded as exc:
            logger.info("%s: %s", notebook_id, exc)
            log.finish(_llm_failed())
            break

        iteration_usage = Usage()
        plan = ""
        patch = None
        gateway_failed = False
        for attempt in range(2):  # one same-iteration retry on a malformed response
            try:
                text, usage = gateway.complete(prompt)
            except GatewayError as exc:
                logger.warning("%s: gateway failure: %s", notebook_id, exc)
                gateway_failed = True
                break
            iteration_usage = iteration_usage + usage
            try:
                plan, patch = parse_response(text)
                break
            except (NoCodeBlock, PatchParseError) as exc:
                logger.warning("%s: malformed response (attempt %d): %s", notebook_id, attempt + 1, exc)
        if gateway_failed:
            log.finish(_llm_failed())
            break

        if patch is None:
            consecutive_failures += 1
            record = FixRecord(
                iteration=len(log.records) + 1,
                fix_type=fix_type,
                prompt=prompt,
                plan=plan,
                patch_applied=False,
                pre_state=state,
                post_state=state,
                usage=iteration_usage,
                edit_sim_prev=1.0,
                edit_sim_baseline=edit_similarity(baseline_code, prev_code),
                post_error_types=_error_types(report),
                reproduced_score=score,
            )
            log.append(record)
            if consecutive_failures >= config.retry_budget:
                log.finish(_llm_failed())
            continue

        consecutive_failures = 0
        new_nb = apply_patch(current, patch)
        new_code = code_text(new_nb)
        report = executor.execute(new_nb, comp, limits, env)
        new_nb = report.executed_notebook or new_nb
        score, delta = grade_report(report, comp, truth)
        new_state = classify(report, delta_s=delta, threshold=config.threshold)
        log.append(
            FixRecord(
                iteration=len(log.records) + 1,
                fix_type=fix_type,
                prompt=prompt,
                plan=plan,
                patch_applied=True,
                pre_state=state,
                post_state=new_state,
                usage=iteration_usage,
                edit_sim_prev=edit_similarity(prev_code, new_code),
                edit_sim_baseline=edit_similarity(baseline_code, new_code),
                post_error_types=_error_types(report),
                reproduced_score=score,
            )
        )
        current, state, prev_code = new_nb, new_state, new_code

    log.final_notebook = current
    return log


def write_session_log(log: SessionLog, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(log.to_jsonl(), encoding="utf-8", newline="\n")
    return path
