"""Execute a notebook's code cells sequentially in an error-tolerant shell.

One shim process per container, single-threaded. Every code cell runs in
order regardless of earlier failures; per-cell wall time lands in cell
metadata as exec_time_seconds. A wall-clock budget covers the whole run:
on expiry the current cell is interrupted, the notebook is marked
timed_out, and the partial result is still written (the harness kill is
the backstop for cells that swallow the interrupt).

Expression results surface through the display hook into the stdout
stream, console style; rich display data is out of scope. Tracebacks are
recorded as error outputs only, never duplicated into the streams.

Exit status: 0 whenever the executed notebook was written (timeouts and
cell errors included), nonzero when it could not be.
"""

from __future__ import annotations

import argparse
import contextlib
import io
import json
import os
import signal
import sys
import threading
import time
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from IPython.core.interactiveshell import InteractiveShell
from traitlets.config import Config

RUNTIME_LINE = "RUNTIME_SECONDS={:.3f}"


@dataclass
class ShimConfig:
    notebook_path: str
    output_path: str
    timeout: float = 600.0
    allow_errors: bool = True  # always true in this system

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")


def _fresh_shell() -> InteractiveShell:
    cfg = Config()
    cfg.HistoryManager.enabled = False
    cfg.InteractiveShell.colors = "NoColor"
    InteractiveShell.clear_instance()
    shell = InteractiveShell.instance(config=cfg)
    # errors are reported via structured outputs; the shell must not print
    shell.showtraceback = lambda *a, **k: None
    return shell


def _source_text(cell: dict) -> str:
    src = cell.get("source", "")
    return "".join(src) if isinstance(src, list) else src


def _error_output(exc: BaseException) -> dict:
    if exc.__traceback__ is not None:
        lines = traceback.format_exception(type(exc), exc, exc.__traceback__)
    else:  # syntax errors never start executing
        lines = traceback.format_exception_only(type(exc), exc)
    tb = [line.rstrip("\n") for line in lines if line.strip()]
    if not tb:
        tb = [f"{type(exc).__name__}: {exc}"]
    return {
        "output_type": "error",
        "ename": type(exc).__name__,
        "evalue": str(exc),
        "traceback": tb,
    }


def _stream_outputs(stdout: str, stderr: str) -> list[dict]:
    outputs = []
    if stdout:
        outputs.append({"output_type": "stream", "name": "stdout", "text": stdout})
    if stderr:
        outputs.append({"output_type": "stream", "name": "stderr", "text": stderr})
    return outputs


def _run_cells(nb: dict, budget: float) -> tuple[float, bool]:
    """Execute all code cells in place. Returns (runtime, timed_out)."""
    shell = _fresh_shell()
    code_cells = [c for c in nb.get("cells", []) if c.get("cell_type") == "code"]
    for cell in code_cells:  # nothing has run yet
        cell["outputs"] = []
        cell["execution_count"] = None

    started = time.perf_counter()
    deadline = started + budget
    timed_out = False
    timer = threading.Timer(budget, lambda: os.kill(os.getpid(), signal.SIGINT))
    timer.daemon = True
    timer.start()
    count = 0
    try:
        for cell in code_cells:
            if time.perf_counter() >= deadline:
                timed_out = True
                break
            count += 1
            out_buf, err_buf = io.StringIO(), io.StringIO()
            cell_start = time.perf_counter()
            try:
                with contextlib.redirect_stdout(out_buf), contextlib.redirect_stderr(err_buf):
                    result = shell.run_cell(_source_text(cell), store_history=True)
                error = result.error_in_exec or result.error_before_exec
            except KeyboardInterrupt as exc:  # budget expired between bytecodes
                error = exc
            elapsed = time.perf_counter() - cell_start

            cell["execution_count"] = count
            cell.setdefault("metadata", {})["exec_time_seconds"] = elapsed
            cell["outputs"] = _stream_outputs(out_buf.getvalue(), err_buf.getvalue())
            if error is not None:
                cell["outputs"].append(_error_output(error))
            if isinstance(error, KeyboardInterrupt) and time.perf_counter() >= deadline:
                timed_out = True
                break
    except KeyboardInterrupt:  # interrupt landed outside a cell
        timed_out = True
    finally:
        timer.cancel()
    if timed_out:
        nb.setdefault("metadata", {})["timed_out"] = True
    return time.perf_counter() - started, timed_out


def run_shim(cfg: ShimConfig) -> int:
    try:
        nb = json.loads(Path(cfg.notebook_path).read_text(encoding="utf-8"))
        if not isinstance(nb.get("cells"), list):
            raise ValueError("input is not a notebook: no cells list")
    except (OSError, ValueError) as exc:
        print(f"runner: cannot read notebook: {exc}", file=sys.stderr)
        return 1

    runtime, _ = _run_cells(nb, cfg.timeout)

    payload = json.dumps(nb, ensure_ascii=False, indent=1) + "\n"
    for attempt in (1, 2):  # a late timer signal may land mid-write once
        try:
            Path(cfg.output_path).write_text(payload, encoding="utf-8")
            break
        except KeyboardInterrupt:
            if attempt == 2:
                return 1
        except OSError as exc:
            print(f"runner: cannot write executed notebook: {exc}", file=sys.stderr)
            return 1
    print(RUNTIME_LINE.format(runtime))
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="runner",
        description="Execute a notebook error-tolerantly and write it back with outputs.",
    )
    parser.add_argument("--notebook", required=True, help="input .ipynb path")
    parser.add_argument("--out", required=True, help="executed .ipynb path")
    parser.add_argument("--timeout", type=float, default=600.0, help="wall-clock budget, seconds")
    args = parser.parse_args(argv)
    try:
        cfg = ShimConfig(notebook_path=args.notebook, output_path=args.out, timeout=args.timeout)
    except ValueError as exc:
        print(f"runner: {exc}", file=sys.stderr)
        return 2
    return run_shim(cfg)


if __name__ == "__main__":
    sys.exit(main())
