#!/usr/bin/env python3
"""Demo pipeline over a synthetic two-notebook corpus with mock backends.

Builds a tiny corpus (one broken notebook the scripted model can fix, one
already-working notebook), then drives baseline -> modernize -> report via
the CLI and prints where each table landed. No network, no containers.

Usage: python scripts/run_mock_pipeline.py [--root DIR]
"""

import argparse
import json
import tempfile
from pathlib import Path

from nbrevive.cli import main as cli_main
from nbrevive.notebook import apply_patch, content_hash, parse_cell_delimited, serialize_notebook
from nbrevive.notebook import Cell, Notebook

TRUTH_CSV = "id,label\n1,1\n2,0\n3,1\n4,0\n5,1\n6,1\n7,0\n8,0\n"
GOOD_SUBMISSION = "id,label\n1,1\n2,0\n3,1\n4,0\n5,1\n6,0\n7,1\n8,0\n"  # accuracy 0.75

BROKEN_SOURCES = ("labels = [1, 0, 1, 0, 1, 0, 1, 0]", "print(lables)")
FIXED_PATCH = (
    "### CELL 0 [code]\nlabels = [1, 0, 1, 0, 1, 0, 1, 0]\n\n"
    "### CELL 1 [code]\nprint(labels)\n"
)
NAME_ERROR_TB = (
    "Traceback (most recent call last)\n"
    "----> 1 print(lables)\n"
    "NameError: name 'lables' is not defined"
)

COMPETITION = {
    "id": "demo-tabular",
    "metric": "accuracy",
    "target_score": 0.75,
    "columns": ["id", "label"],
    "id_column": "id",
    "ground_truth_path": "truth.csv",
    "description": "Predict the binary label for every id.",
}


def notebook(*sources):
    cells = tuple(Cell(index=i, kind="code", source=s) for i, s in enumerate(sources))
    return Notebook(format_version=(4, 5), cells=cells)


def executor_entry(failing=None, submission=None, n_code_cells=0):
    cells = []
    for i in range(n_code_cells):
        bad = failing and i in failing
        cells.append(
            {"index": i, "ok": not bad, **({"traceback": failing[i]} if bad else {})}
        )
    entry = {"status": "completed", "runtime_seconds": 2.0, "cells": cells}
    if submission is not None:
        entry["submission"] = {"filename": "submission.csv", "text": submission}
    return entry


def build_corpus(root: Path) -> dict:
    nb_dir = root / "notebooks"
    comp_dir = root / "competitions"
    nb_dir.mkdir(parents=True)
    comp_dir.mkdir(parents=True)

    (comp_dir / "truth.csv").write_text(TRUTH_CSV, encoding="utf-8")
    (comp_dir / "demo-tabular.json").write_text(json.dumps(COMPETITION), encoding="utf-8")

    broken = notebook(*BROKEN_SOURCES)
    fixed = apply_patch(broken, parse_cell_delimited(FIXED_PATCH))
    good = notebook("save_predictions('/kaggle/working/submission.csv')")

    meta = {"competition": "demo-tabular", "submitted_at": "2021-03-01T00:00:00+00:00"}
    for name, nb in (("fixme", broken), ("already_fine", good)):
        (nb_dir / f"{name}.ipynb").write_bytes(serialize_notebook(nb))
        (nb_dir / f"{name}.meta.json").write_text(json.dumps(meta), encoding="utf-8")

    fixture = {
        content_hash(broken): executor_entry(failing={1: NAME_ERROR_TB}, n_code_cells=2),
        content_hash(fixed): executor_entry(submission=GOOD_SUBMISSION, n_code_cells=2),
        content_hash(good): executor_entry(submission=GOOD_SUBMISSION, n_code_cells=1),
    }
    (root / "fixture.json").write_text(json.dumps(fixture, indent=1), encoding="utf-8")

    script = {
        "*": {
            "response": f"The second cell misspells the variable.\n\n```\n{FIXED_PATCH}```",
            "usage": {"input_uncached": 5192, "input_cached": 2931, "output": 2877},
        }
    }
    (root / "gateway.json").write_text(json.dumps(script, indent=1), encoding="utf-8")
    return {
        "--notebooks-dir": str(nb_dir),
        "--competitions-dir": str(comp_dir),
        "--out-dir": str(root / "runs"),
        "--executor-fixture": str(root / "fixture.json"),
        "--gateway-script": str(root / "gateway.json"),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--root", help="corpus directory (default: a temp dir)")
    args = parser.parse_args()

    root = Path(args.root) if args.root else Path(tempfile.mkdtemp(prefix="nbrevive-demo-"))
    flags = build_corpus(root)
    common = [arg for pair in flags.items() for arg in pair]

    for argv in (
        ["baseline", "--run-name", "demo-baseline", *common],
        ["modernize", "--run-name", "demo-modernize", *common],
        ["report", "--run-name", "demo-report",
         "--out-dir", flags["--out-dir"],
         "--logs-dir", str(Path(flags["--out-dir"]) / "demo-modernize")],
    ):
        rc = cli_main(argv)
        if rc != 0:
            raise SystemExit(rc)

    print(f"\ncorpus and runs under: {root}")
    summary = (Path(flags["--out-dir"]) / "demo-modernize" / "summary.csv").read_text(encoding="utf-8")
    print("modernize summary:\n" + summary)


if __name__ == "__main__":
    main()
