"""Harness tests: limits, the scripted mock backend, submission collection
precedence, and container command construction."""

import os
import time

import pytest

from conftest import executor_entry, make_notebook
from nbrevive.backport import EnvironmentSpec
from nbrevive.errors import ExecutorUnavailable
from nbrevive.grading import CompetitionSpec
from nbrevive.harness import (
    ContainerConfig,
    ContainerExecutor,
    ExecLimits,
    MockExecutor,
    collect_submission,
)
from nbrevive.notebook import content_hash

COMP = CompetitionSpec(
    id="c", metric="accuracy", target_score=0.9, columns=("id", "label"), id_column="id"
)
ENV = EnvironmentSpec(interpreter_version="3.9.25")


def test_limits_defaults():
    limits = ExecLimits()
    assert limits.wall_clock_seconds == 600.0
    assert limits.cpu_cores == 4
    assert limits.memory_bytes == 30 * 2**30
    assert limits.gpu_count == 1


def test_limits_validation_and_gpu_warning(caplog):
    with pytest.raises(ValueError):
        ExecLimits(wall_clock_seconds=0)
    with caplog.at_level("WARNING"):
        ExecLimits(gpu_count=0)
    assert any("GPU" in r.message for r in caplog.records)


# --------------------------------------------------------------------------
# mock backend


def test_mock_executor_happy_path():
    nb = make_notebook("a=1", "b=2")
    fixture = {
        content_hash(nb): executor_entry(
            runtime=3.5, n_code_cells=2, submission_text="id,label\n1,1\n"
        )
    }
    report = MockExecutor(fixture).execute(nb, COMP, ExecLimits(), ENV)
    assert report.status == "completed"
    assert report.runtime_seconds == 3.5
    assert all(r.ok for r in report.cell_results)
    assert report.submission.filename == "submission.csv"
    assert report.executed_notebook is not None
    assert "mock" in report.env_fingerprint


def test_mock_executor_injects_errors_into_notebook():
    nb = make_notebook("a=1", "boom()")
    tb = "Traceback\nNameError: name 'boom' is not defined"
    fixture = {content_hash(nb): executor_entry(n_code_cells=2, failing={1: tb})}
    report = MockExecutor(fixture).execute(nb, COMP, ExecLimits(), ENV)
    assert [r.ok for r in report.cell_results] == [True, False]
    assert report.error_cells()[0].traceback == tb
    executed = report.executed_notebook
    assert executed.cells[1].first_traceback() == tb
    assert executed.cells[1].outputs[-1].exception_class == "NameError"


def test_mock_executor_unknown_hash_fails_loudly():
    with pytest.raises(ExecutorUnavailable):
        MockExecutor({}).execute(make_notebook("x"), COMP, ExecLimits(), ENV)


def test_mock_executor_timeout_clamps_runtime():
    nb = make_notebook("while True: pass")
    fixture = {content_hash(nb): executor_entry(status="timeout", runtime=1.0, n_code_cells=1)}
    report = MockExecutor(fixture).execute(nb, COMP, ExecLimits(wall_clock_seconds=600), ENV)
    assert report.status == "timeout"
    assert report.runtime_seconds >= 600


def test_mock_executor_not_saved_has_no_notebook():
    nb = make_notebook("x=1")
    fixture = {content_hash(nb): executor_entry(status="not_saved", n_code_cells=1)}
    report = MockExecutor(fixture).execute(nb, COMP, ExecLimits(), ENV)
    assert report.status == "not_saved"
    assert report.executed_notebook is None


def test_mock_executor_install_failure_synthetic_cell():
    nb = make_notebook("import ghost")
    fixture = {
        content_hash(nb): executor_entry(n_code_cells=1, install_error="No matching distribution")
    }
    report = MockExecutor(fixture).execute(nb, COMP, ExecLimits(), ENV)
    first = report.cell_results[0]
    assert first.index == -1 and not first.ok
    assert report.error_cells()[0].traceback.startswith("No matching")


# --------------------------------------------------------------------------
# submission collection


def test_collect_submission_exact_name_wins(tmp_path):
    (tmp_path / "other.csv").write_text("id,label\n1,0\n")
    time.sleep(0.01)
    (tmp_path / "submission.csv").write_text("id,label\n1,1\n")
    os.utime(tmp_path / "other.csv")  # other is newer by mtime
    art = collect_submission(tmp_path)
    assert art.filename == "submission.csv"


def test_collect_submission_newest_fallback(tmp_path):
    (tmp_path / "a.csv").write_text("a")
    time.sleep(0.01)
    nested = tmp_path / "out"
    nested.mkdir()
    (nested / "b.csv").write_text("b")
    os.utime(nested / "b.csv")
    art = collect_submission(tmp_path)
    assert art.filename == "b.csv"


def test_collect_submission_none(tmp_path):
    assert collect_submission(tmp_path) is None


# --------------------------------------------------------------------------
# container command construction


def test_container_command_mounts_and_limits(tmp_path):
    executor = ContainerExecutor(
        ContainerConfig(image="runner:1", dataset_dir="/data/comp")
    )
    cmd = executor.build_command(tmp_path, ExecLimits(wall_clock_seconds=600, cpu_cores=4))
    joined = " ".join(cmd)
    assert cmd[0] == "docker"
    assert "--cpus=4" in joined
    assert f"--memory={30 * 2**30}" in joined
    assert "--gpus=1" in joined
    assert f"{tmp_path}:/kaggle/working" in joined
    assert "/data/comp:/kaggle/input:ro" in joined
    assert "runner:1" in cmd


def test_container_command_no_gpu(tmp_path):
    executor = ContainerExecutor(ContainerConfig(image="runner:1"))
    cmd = executor.build_command(tmp_path, ExecLimits(gpu_count=0))
    assert not any(tok.startswith("--gpus") for tok in cmd)


def test_container_executor_unavailable_without_runtime():
    executor = ContainerExecutor(ContainerConfig(image="x", container_cmd="definitely-not-a-cmd"))
    with pytest.raises(ExecutorUnavailable):
        executor.execute(make_notebook("x"), COMP, ExecLimits(), ENV)
