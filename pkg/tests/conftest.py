"""Shared fixtures and scenario builders for the test suite."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from nbrevive.grading import CompetitionSpec
from nbrevive.notebook import Cell, Notebook, parse_notebook

DATA_DIR = Path(__file__).parent / "data"

TRUTH_CSV = "id,label\n1,1\n2,0\n3,1\n4,0\n5,1\n6,1\n7,0\n8,0\n"
# predictions right on 6 of 8 rows -> accuracy 0.75
GOOD_SUBMISSION = "id,label\n1,1\n2,0\n3,1\n4,0\n5,1\n6,0\n7,1\n8,0\n"
# right on 4 of 8 rows -> accuracy 0.5
POOR_SUBMISSION = "id,label\n1,0\n2,1\n3,1\n4,0\n5,1\n6,0\n7,1\n8,1\n"


def make_notebook(*sources: str, kinds=None, fmt=(4, 5)) -> Notebook:
    kinds = kinds or ["code"] * len(sources)
    cells = tuple(Cell(index=i, kind=k, source=s) for i, (s, k) in enumerate(zip(sources, kinds)))
    return Notebook(format_version=fmt, cells=cells)


@pytest.fixture
def error_notebook() -> Notebook:
    """4 code cells; cell 3 carries a ValueError traceback."""
    return parse_notebook((DATA_DIR / "xgb_cover_type.ipynb").read_bytes())


@pytest.fixture
def competition(tmp_path) -> CompetitionSpec:
    gt = tmp_path / "truth.csv"
    gt.write_text(TRUTH_CSV, encoding="utf-8")
    return CompetitionSpec(
        id="demo-tabular",
        metric="accuracy",
        target_score=0.75,
        columns=("id", "label"),
        id_column="id",
        ground_truth_path=str(gt),
        description="Predict the binary label for every id.",
    )


def executor_entry(
    status="completed",
    runtime=2.0,
    failing=None,  # {index: traceback}
    submission_text=None,
    submission_name="submission.csv",
    n_code_cells=0,
    install_error=None,
):
    """Build one MockExecutor fixture entry."""
    cells = []
    failing = failing or {}
    for i in range(n_code_cells):
        if i in failing:
            cells.append({"index": i, "ok": False, "traceback": failing[i]})
        else:
            cells.append({"index": i, "ok": True})
    entry = {"status": status, "runtime_seconds": runtime, "cells": cells}
    if submission_text is not None:
        entry["submission"] = {"filename": submission_name, "text": submission_text}
    if install_error:
        entry["install_error"] = install_error
    return entry


def wrap_patch(plan: str, cell_text: str) -> str:
    """LLM response text: plan, then one fenced block with the patch."""
    return f"{plan}\n\n```\n{cell_text}```"


NAME_ERROR_TB = (
    "Traceback (most recent call last)\n"
    "/tmp/ipykernel/123.py in <module>\n"
    "----> 1 print(resuls)\n"
    "NameError: name 'resuls' is not defined"
)
