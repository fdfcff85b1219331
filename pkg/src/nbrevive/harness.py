"""Execution harness: resource limits, execution reports, submission
collection, and two backends — a scripted mock keyed by notebook content hash
and a container backend that drives the runner shim.

Container contract: competition data is mounted read-only at /kaggle/input/,
the notebook works under a scratch /kaggle/working/, and the shim writes the
executed notebook back, prints RUNTIME_SECONDS=<float> on stdout, and records
a timed_out marker in the notebook metadata on expiry.
"""

from __future__ import annotations

import abc
import json
import logging
import re
import shutil
import subprocess
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .backport import EnvironmentSpec, emit_requirements
from .errors import ExecutorUnavailable
from .grading import CompetitionSpec
from .notebook import (
    Cell,
    CellOutput,
    Notebook,
    content_hash,
    extract_pip_installs,
    parse_notebook,
    serialize_notebook,
)

logger = logging.getLogger(__name__)

DATASET_MOUNT = "/kaggle/input"
SCRATCH_MOUNT = "/kaggle/working"

COMPLETED = "completed"
TIMEOUT = "timeout"
NOT_SAVED = "not_saved"

_RUNTIME_LINE_RE = re.compile(r"^RUNTIME_SECONDS=([0-9.eE+-]+)\s*$", re.MULTILINE)


@dataclass(frozen=True)
class ExecLimits:
    """Resource envelope for one notebook execution."""

    wall_clock_seconds: float = 600.0
    cpu_cores: int = 4
    memory_bytes: int = 30 * 2**30
    gpu_count: int = 1

    def __post_init__(self):
        if self.wall_clock_seconds <= 0:
            raise ValueError("wall_clock_seconds must be positive")
        if self.gpu_count == 0:
            logger.warning("running without a GPU; accelerator notebooks will degrade")


@dataclass(frozen=True)
class CellResult:
    index: int
    ok: bool
    traceback: Optional[str] = None


@dataclass(frozen=True)
class SubmissionArtifact:
    filename: str
    text: str


@dataclass(frozen=True)
class ExecutionReport:
    """What one execution produced. status is completed | timeout |
    not_saved; runtime covers cell execution only, not environment setup."""

    status: str
    runtime_seconds: float
    cell_results: tuple[CellResult, ...]
    submission: Optional[SubmissionArtifact]
    executed_notebook: Optional[Notebook]
    env_fingerprint: str

    def error_cells(self) -> tuple[CellResult, ...]:
        return tuple(r for r in self.cell_results if not r.ok)


class Executor(abc.ABC):
    @abc.abstractmethod
    def execute(
        self,
        nb: Notebook,
        comp: CompetitionSpec,
        limits: ExecLimits,
        env: EnvironmentSpec,
    ) -> ExecutionReport:
        ...


def collect_submission(workdir: str | Path, expected_filename: str = "submission.csv") -> Optional[SubmissionArtifact]:
    """Find the submission CSV under the working directory.

    An exact match on the expected filename wins; otherwise the most recently
    modified CSV is taken; None when no CSV exists."""
    workdir = Path(workdir)
    exact = workdir / expected_filename
    if exact.is_file():
        return SubmissionArtifact(filename=expected_filename, text=exact.read_text(encoding="utf-8"))
    candidates = [p for p in workdir.rglob("*.csv") if p.is_file()]
    if not candidates:
        return None
    newest = max(candidates, key=lambda p: p.stat().st_mtime)
    return SubmissionArtifact(filename=newest.name, text=newest.read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# scripted backend


class MockExecutor(Executor):
    """Deterministic backend scripted by a JSON fixture.

    The fixture maps content_hash(nb) to an entry:

        {
          "status": "completed" | "timeout" | "not_saved",
          "runtime_seconds": 12.5,
          "cells": [{"index": 0, "ok": true},
                    {"index": 3, "ok": false, "traceback": "...",
                     "stdout": "..."}],
          "install_error": "...",            # optional, synthetic cell -1
          "submission": {"filename": "submission.csv", "text": "id,y\\n..."}
        }

    Unknown hashes raise ExecutorUnavailable so fixture drift fails loudly
    instead of silently defaulting.
    """

    def __init__(self, fixture: dict | str | Path):
        if not isinstance(fixture, dict):
            fixture = json.loads(Path(fixture).read_text(encoding="utf-8"))
        self._fixture = fixture
        self.calls: list[str] = []

    def execute(self, nb, comp, limits, env) -> ExecutionReport:
        key = content_hash(nb)
        self.calls.append(key)
        entry = self._fixture.get(key)
        if entry is None:
            raise ExecutorUnavailable(f"no scripted execution for notebook hash {key[:12]}…")
        cell_results = []
        if entry.get("install_error"):
            cell_results.append(CellResult(index=-1, ok=False, traceback=entry["install_error"]))
        scripted = {c["index"]: c for c in entry.get("cells", [])}
        executed_cells = []
        code_seen = 0
        for pos, cell in enumerate(nb.cells):
            if cell.kind != "code":
                executed_cells.append(cell)
                continue
            spec = scripted.get(pos, {"index": pos, "ok": True})
            outputs = []
            if spec.get("stdout"):
                outputs.append(CellOutput(kind="stream", text=spec["stdout"]))
            if not spec.get("ok", True):
                tb = spec.get("traceback", "Exception: scripted failure")
                cell_results.append(CellResult(index=pos, ok=False, traceback=tb))
                outputs.append(
                    CellOutput(
                        kind="error",
                        text=tb.strip().split("\n")[-1],
                        traceback=tb,
                        exception_class=_exception_class(tb),
                    )
                )
            else:
                cell_results.append(CellResult(index=pos, ok=True))
            executed_cells.append(
                Cell(
                    index=cell.index,
                    kind=cell.kind,
                    source=cell.source,
                    outputs=tuple(outputs),
                    exec_time=spec.get("exec_time"),
                )
            )
            code_seen += 1
        status = entry.get("status", COMPLETED)
        runtime = float(entry.get("runtime_seconds", 1.0))
        if status == TIMEOUT:
            runtime = max(runtime, limits.wall_clock_seconds)
        sub = entry.get("submission")
        submission = SubmissionArtifact(sub["filename"], sub["text"]) if sub else None
        executed = None
        if status != NOT_SAVED:
            executed = Notebook(
                format_version=nb.format_version,
                cells=tuple(executed_cells),
                metadata=dict(nb.metadata),
            )
        return ExecutionReport(
            status=status,
            runtime_seconds=runtime,
            cell_results=tuple(sorted(cell_results, key=lambda r: r.index)),
            submission=submission,
            executed_notebook=executed,
            env_fingerprint=f"mock; {env.fingerprint()}",
        )


def _exception_class(traceback_text: str) -> Optional[str]:
    for line in reversed(traceback_text.strip().split("\n")):
        m = re.match(r"^([A-Za-z_][A-Za-z0-9_.]*)(?::|$)", line.strip())
        if m:
            return m.group(1).split(".")[-1]
    return None


# --------------------------------------------------------------------------
# container backend


@dataclass(frozen=True)
class ContainerConfig:
    image: str
    container_cmd: str = "docker"
    dataset_dir: Optional[str] = None  # host path mounted at /kaggle/input
    startup_grace_seconds: float = 120.0
    keep_workdir: bool = False


class ContainerExecutor(Executor):
    """Runs the notebook inside a container via the runner shim CLI.

    The workdir is bind-mounted at /kaggle/working; !pip install directives
    from the notebook plus the backported requirements are installed before
    execution; an install failure surfaces as a synthetic failing cell at
    index -1 rather than aborting the run.
    """

    def __init__(self, config: ContainerConfig):
        self.config = config

    def build_command(self, workdir: Path, limits: ExecLimits) -> list[str]:
        cfg = self.config
        cmd = [
            cfg.container_cmd,
            "run",
            "--rm",
            f"--cpus={limits.cpu_cores}",
            f"--memory={limits.memory_bytes}",
        ]
        if limits.gpu_count > 0:
            cmd.append(f"--gpus={limits.gpu_count}")
        cmd += ["-v", f"{workdir}:{SCRATCH_MOUNT}"]
        if cfg.dataset_dir:
            cmd += ["-v", f"{cfg.dataset_dir}:{DATASET_MOUNT}:ro"]
        cmd += ["-w", SCRATCH_MOUNT, cfg.image, "bash", f"{SCRATCH_MOUNT}/_driver.sh"]
        return cmd

    def _write_driver(self, workdir: Path, limits: ExecLimits) -> None:
        driver = f"""#!/usr/bin/env bash
set -u
if [ -s {SCRATCH_MOUNT}/_requirements.txt ]; then
  pip install -r {SCRATCH_MOUNT}/_requirements.txt > {SCRATCH_MOUNT}/_install.log 2>&1 \\
    || cp {SCRATCH_MOUNT}/_install.log {SCRATCH_MOUNT}/_install_failed.log
fi
runner --notebook {SCRATCH_MOUNT}/_input.ipynb --out {SCRATCH_MOUNT}/_executed.ipynb \\
  --timeout {limits.wall_clock_seconds}
"""
        (workdir / "_driver.sh").write_text(driver, encoding="utf-8")

    def execute(self, nb, comp, limits, env) -> ExecutionReport:
        if shutil.which(self.config.container_cmd) is None:
            raise ExecutorUnavailable(f"container runtime {self.config.container_cmd!r} not found")
        workdir = Path(tempfile.mkdtemp(prefix="nbrevive-run-"))
        try:
            (workdir / "_input.ipynb").write_bytes(serialize_notebook(nb))
            reqs = {r.package: r.version for r in env.requirements if r.version}
            req_text = emit_requirements(reqs)
            for spec in extract_pip_installs(nb):
                if spec.package not in reqs:
                    req_text += spec.as_line() + "\n"
            (workdir / "_requirements.txt").write_text(req_text, encoding="utf-8")
            self._write_driver(workdir, limits)
            cmd = self.build_command(workdir, limits)
            budget = limits.wall_clock_seconds + self.config.startup_grace_seconds
            try:
                proc = subprocess.run(cmd, capture_output=True, text=True, timeout=budget)
            except subprocess.TimeoutExpired:
                return self._report(workdir, nb, env, forced_timeout=True, limits=limits)
            except FileNotFoundError as exc:
                raise ExecutorUnavailable(str(exc)) from exc
            return self._report(
                workdir, nb, env, forced_timeout=False, limits=limits, stdout=proc.stdout
            )
        finally:
            if not self.config.keep_workdir:
                shutil.rmtree(workdir, ignore_errors=True)

    def _report(self, workdir, nb, env, forced_timeout, limits, stdout="") -> ExecutionReport:
        runtime = 0.0
        m = _RUNTIME_LINE_RE.search(stdout or "")
        if m:
            runtime = float(m.group(1))
        executed_path = workdir / "_executed.ipynb"
        fingerprint = f"container {self.config.image}; {env.fingerprint()}"
        if not executed_path.is_file():
            status = TIMEOUT if forced_timeout else NOT_SAVED
            return ExecutionReport(
                status=status,
                runtime_seconds=max(runtime, limits.wall_clock_seconds) if forced_timeout else runtime,
                cell_results=(),
                submission=collect_submission(workdir) if not forced_timeout else None,
                executed_notebook=None,
                env_fingerprint=fingerprint,
            )
        executed = parse_notebook(executed_path.read_bytes())
        timed_out = forced_timeout or bool(executed.metadata.get("timed_out"))
        cell_results = []
        if (workdir / "_install_failed.log").is_file():
            cell_results.append(
                CellResult(
                    index=-1,
                    ok=False,
                    traceback=(workdir / "_install_failed.log").read_text(encoding="utf-8"),
                )
            )
        for pos, cell in enumerate(executed.cells):
            if cell.kind != "code":
                continue
            tb = cell.first_traceback()
            cell_results.append(CellResult(index=pos, ok=tb is None, traceback=tb))
        return ExecutionReport(
            status=TIMEOUT if timed_out else COMPLETED,
            runtime_seconds=max(runtime, limits.wall_clock_seconds) if timed_out else runtime,
            cell_results=tuple(cell_results),
            submission=collect_submission(workdir),
            executed_notebook=executed,
            env_fingerprint=fingerprint,
        )
