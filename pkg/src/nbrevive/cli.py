"""Command-line entry points: baseline, backport, modernize, report.

Batch commands walk a notebook corpus (one .ipynb plus a sidecar
<stem>.meta.json naming its competition and submission date), run the
requested stage per notebook on a worker pool, and write their tables under a
timestamped run directory. A failure on one notebook is recorded and never
aborts the batch.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from . import analytics, backport, grading
from .agent import SessionConfig, SessionLog, run_session, write_session_log
from .errors import NBReviveError
from .gateway import HttpGateway, MockGateway, load_price_table
from .grading import CompetitionSpec, classify, load_competition_spec
from .harness import ContainerConfig, ContainerExecutor, ExecLimits, MockExecutor
from .notebook import parse_notebook, serialize_notebook

logger = logging.getLogger(__name__)


@dataclass
class RunConfig:
    notebooks_dir: str = "notebooks"
    competitions_dir: str = "competitions"
    out_dir: str = "runs"
    run_name: Optional[str] = None
    logs_dir: Optional[str] = None  # report input
    threshold: float = grading.DEFAULT_THRESHOLD
    max_iterations: int = 16
    mode: str = "file_level"
    token_cutoff: int = 13485
    retry_budget: int = 2
    workers: int = 0  # 0 -> cpu count
    executor: str = "mock"
    executor_fixture: Optional[str] = None
    image: str = "nbrevive-runner:latest"
    dataset_dir: Optional[str] = None
    container_cmd: str = "docker"
    gateway: str = "mock"
    gateway_script: Optional[str] = None
    gateway_base_url: Optional[str] = None
    gateway_model: str = "default"
    release_cache: Optional[str] = None
    refresh_index: bool = False
    wall_clock_seconds: float = 600.0
    cpu_cores: int = 4
    memory_gib: float = 30.0
    gpu_count: int = 1

    @staticmethod
    def from_file(path: str | Path) -> "RunConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return RunConfig(**data)

    def limits(self) -> ExecLimits:
        return ExecLimits(
            wall_clock_seconds=self.wall_clock_seconds,
            cpu_cores=self.cpu_cores,
            memory_bytes=int(self.memory_gib * 2**30),
            gpu_count=self.gpu_count,
        )

    def session_config(self) -> SessionConfig:
        return SessionConfig(
            threshold=self.threshold,
            max_iterations=self.max_iterations,
            mode=self.mode,
            token_cutoff=self.token_cutoff,
            retry_budget=self.retry_budget,
        )


def _run_dir(cfg: RunConfig) -> Path:
    name = cfg.run_name or time.strftime("run-%Y%m%d-%H%M%S")
    path = Path(cfg.out_dir) / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _make_executor(cfg: RunConfig):
    if cfg.executor == "mock":
        if not cfg.executor_fixture:
            raise ValueError("mock executor needs --executor-fixture")
        return MockExecutor(cfg.executor_fixture)
    return ContainerExecutor(
        ContainerConfig(image=cfg.image, container_cmd=cfg.container_cmd, dataset_dir=cfg.dataset_dir)
    )


def _make_gateway(cfg: RunConfig):
    if cfg.gateway == "mock":
        if not cfg.gateway_script:
            raise ValueError("mock gateway needs --gateway-script")
        return MockGateway(cfg.gateway_script)
    if not cfg.gateway_base_url:
        raise ValueError("http gateway needs --gateway-base-url")
    return HttpGateway(base_url=cfg.gateway_base_url, model=cfg.gateway_model)


@dataclass
class CorpusEntry:
    notebook_path: Path
    meta: dict
    comp: CompetitionSpec


def load_corpus(cfg: RunConfig) -> list[CorpusEntry]:
    """Pair every notebook with its sidecar metadata and competition spec.

    The sidecar may override the competition's target score (per-notebook
    reported scores differ within one competition)."""
    entries = []
    comp_dir = Path(cfg.competitions_dir)
    for nb_path in sorted(Path(cfg.notebooks_dir).glob("*.ipynb")):
        meta_path = nb_path.with_suffix("").with_suffix(".meta.json")
        if not meta_path.is_file():
            meta_path = nb_path.parent / (nb_path.stem + ".meta.json")
        if not meta_path.is_file():
            raise FileNotFoundError(f"no sidecar metadata for {nb_path.name}")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        comp_file = comp_dir / f"{meta['competition']}.json"
        if not comp_file.is_file():
            comp_file = comp_dir / f"{meta['competition']}.toml"
        comp = load_competition_spec(comp_file)
        if "target_score" in meta:
            comp = dataclasses.replace(comp, target_score=float(meta["target_score"]))
        entries.append(CorpusEntry(notebook_path=nb_path, meta=meta, comp=comp))
    return entries


def _pool_map(fn, entries, workers: int):
    """Run fn over entries on a thread pool; exceptions become results."""
    results = []
    max_workers = workers or None
    with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = {pool.submit(fn, e): e for e in entries}
        for fut in concurrent.futures.as_completed(futures):
            entry = futures[fut]
            try:
                results.append((entry, fut.result(), None))
            except Exception as exc:  # per-notebook isolation
                logger.exception("notebook %s failed", entry.notebook_path.name)
                results.append((entry, None, exc))
    results.sort(key=lambda r: r[0].notebook_path.name)
    return results


def _outcome_rows_csv(rows) -> tuple[list[str], list[list]]:
    header = ["error_status", "csv_state", "label", "count"]
    return header, [[r.error_status, r.csv_state, r.label, r.count] for r in rows]


# --------------------------------------------------------------------------
# subcommands


def cmd_baseline(cfg: RunConfig) -> Path:
    """Execute every notebook once and classify the outcome."""
    run_dir = _run_dir(cfg)
    executor = _make_executor(cfg)
    limits = cfg.limits()
    entries = load_corpus(cfg)

    def one(entry: CorpusEntry):
        nb = parse_notebook(entry.notebook_path.read_bytes())
        env = backport.EnvironmentSpec(interpreter_version="current")
        report = executor.execute(nb, entry.comp, limits, env)
        truth = (
            grading.load_table(entry.comp.ground_truth_path)
            if entry.comp.ground_truth_path
            else None
        )
        from .agent import grade_report

        score, delta = grade_report(report, entry.comp, truth)
        outcome = classify(report, delta_s=delta, threshold=cfg.threshold)
        return outcome, score, report.runtime_seconds

    results = _pool_map(one, entries, cfg.workers)
    outcomes = []
    with open(run_dir / "baseline_outcomes.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for entry, result, exc in results:
            if exc is not None:
                fh.write(json.dumps({"notebook": entry.notebook_path.name, "error": str(exc)}) + "\n")
                continue
            outcome, score, runtime = result
            outcomes.append(outcome)
            fh.write(
                json.dumps(
                    {
                        "notebook": entry.notebook_path.name,
                        "outcome": outcome.to_dict(),
                        "reproduced_score": score,
                        "runtime_seconds": runtime,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
    header, rows = _outcome_rows_csv(analytics.outcome_table(outcomes, cfg.threshold))
    _write_csv(run_dir / "outcome_table.csv", header, rows)
    logger.info("baseline: %d notebooks -> %s", len(entries), run_dir)
    return run_dir


def cmd_backport(cfg: RunConfig) -> Path:
    """Reconstruct a contemporary environment per notebook."""
    run_dir = _run_dir(cfg)
    if not cfg.release_cache:
        raise ValueError("backport needs --release-cache")
    index = backport.load_release_index(cfg.release_cache)
    entries = load_corpus(cfg)

    def one(entry: CorpusEntry):
        nb = parse_notebook(entry.notebook_path.read_bytes())
        submitted_at = backport._parse_ts(entry.meta["submitted_at"])
        if cfg.refresh_index:
            for dep in backport.extract_dependencies(nb):
                if dep not in index:
                    try:
                        releases = backport.fetch_release_history(dep)
                        index.put(dep, releases)
                        backport.write_release_cache(cfg.release_cache, dep, releases)
                    except Exception as exc:
                        logger.warning("refresh failed for %s: %s", dep, exc)
        result = backport.build_environment_spec(nb, submitted_at, index)
        backport.write_install_plan(result.environment, run_dir, stem=entry.notebook_path.stem)
        return result

    results = _pool_map(one, entries, cfg.workers)
    summary = []
    for entry, result, exc in results:
        if exc is not None:
            summary.append({"notebook": entry.notebook_path.name, "status": "error", "error": str(exc)})
            continue
        summary.append(
            {
                "notebook": entry.notebook_path.name,
                "status": "ok" if result.ok else "backport_failed",
                "interpreter": result.environment.interpreter_version,
                "interpreter_flagged": result.interpreter_flagged,
                "unresolved": list(result.unresolved),
                "yanked_only": list(result.yanked_only),
                "pinned": len(result.environment.requirements),
            }
        )
    (run_dir / "backport_summary.json").write_text(
        json.dumps(summary, indent=1, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    logger.info("backport: %d notebooks -> %s", len(entries), run_dir)
    return run_dir


def cmd_modernize(cfg: RunConfig) -> Path:
    """Run the fix loop per notebook; write session logs and patched
    notebooks."""
    run_dir = _run_dir(cfg)
    executor = _make_executor(cfg)
    limits = cfg.limits()
    session_cfg = cfg.session_config()
    entries = load_corpus(cfg)

    def one(entry: CorpusEntry):
        nb = parse_notebook(entry.notebook_path.read_bytes())
        gateway = _make_gateway(cfg)  # per notebook: mock cursors are stateful
        env = backport.EnvironmentSpec(interpreter_version="current")
        log = run_session(
            nb,
            entry.comp,
            executor=executor,
            gateway=gateway,
            env=env,
            limits=limits,
            config=session_cfg,
            notebook_id=entry.notebook_path.stem,
        )
        write_session_log(log, run_dir / f"{entry.notebook_path.stem}.session.jsonl")
        if log.final_notebook is not None:
            (run_dir / f"{entry.notebook_path.stem}.modernized.ipynb").write_bytes(
                serialize_notebook(log.final_notebook)
            )
        return log

    results = _pool_map(one, entries, cfg.workers)
    logs = [r for _, r, exc in results if exc is None]
    rows = []
    for entry, log, exc in results:
        if exc is not None:
            rows.append([entry.notebook_path.name, "error", "", "", str(exc)])
            continue
        rows.append(
            [
                entry.notebook_path.name,
                log.terminal.label if log.terminal else "",
                log.terminal.error_status if log.terminal else "",
                log.fix_count,
                "",
            ]
        )
    _write_csv(run_dir / "summary.csv", ["notebook", "label", "error_status", "fixes", "error"], rows)
    header, orows = _outcome_rows_csv(
        analytics.outcome_table([l.terminal for l in logs if l.terminal], cfg.threshold)
    )
    _write_csv(run_dir / "outcome_table.csv", header, orows)
    logger.info("modernize: %d notebooks -> %s", len(entries), run_dir)
    return run_dir


def cmd_report(cfg: RunConfig) -> Path:
    """Aggregate session logs into the analysis tables."""
    run_dir = _run_dir(cfg)
    logs_dir = Path(cfg.logs_dir or cfg.out_dir)
    logs = [
        SessionLog.from_jsonl(p.read_text(encoding="utf-8"))
        for p in sorted(logs_dir.glob("*.session.jsonl"))
    ]
    if not logs:
        raise FileNotFoundError(f"no *.session.jsonl under {logs_dir}")

    header, rows = _outcome_rows_csv(
        analytics.outcome_table([l.terminal for l in logs if l.terminal], cfg.threshold)
    )
    _write_csv(run_dir / "outcome_table.csv", header, rows)

    tm = analytics.transition_matrix(logs)
    rows = [
        [ft] + [tm.counts[ft][col] for col in analytics.TRANSITION_COLUMNS] + [tm.row_sum(ft)]
        for ft in sorted(tm.counts)
    ]
    _write_csv(
        run_dir / "transition_matrix.csv",
        ["fix_type"] + list(analytics.TRANSITION_COLUMNS) + ["total"],
        rows,
    )

    taxonomy = analytics.error_taxonomy(logs)
    rows = [
        [stage] + [counts.get(et, 0) for et in analytics.ERROR_TYPES]
        for stage, counts in sorted(taxonomy.items())
    ]
    _write_csv(run_dir / "error_taxonomy.csv", ["stage"] + list(analytics.ERROR_TYPES), rows)

    curves = analytics.similarity_curves(logs)
    (run_dir / "similarity_curves.json").write_text(
        json.dumps(curves, indent=1, ensure_ascii=False) + "\n", encoding="utf-8"
    )

    prices = load_price_table()
    rows = [
        [r.group, r.n, f"{r.mean_cost:.4f}", f"{r.mean_input_uncached:.2f}",
         f"{r.mean_input_cached:.2f}", f"{r.mean_output:.2f}"]
        for r in analytics.cost_report(logs, prices)
    ]
    _write_csv(
        run_dir / "cost_report.csv",
        ["group", "n", "mean_cost_usd", "mean_input_uncached", "mean_input_cached", "mean_output"],
        rows,
    )

    rows = [[r["covariate"], r["n"], r["kendall_tau"]] for r in analytics.fix_effort_correlations(logs)]
    _write_csv(run_dir / "fix_effort_correlations.csv", ["covariate", "n", "kendall_tau"], rows)

    hist = {}
    for log in logs:
        hist[log.fix_count] = hist.get(log.fix_count, 0) + 1
    _write_csv(
        run_dir / "fix_histogram.csv",
        ["fixes", "notebooks"],
        [[k, v] for k, v in sorted(hist.items())],
    )
    logger.info("report: %d sessions -> %s", len(logs), run_dir)
    return run_dir


# --------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--notebooks-dir")
    p.add_argument("--competitions-dir")
    p.add_argument("--out-dir")
    p.add_argument("--run-name")
    p.add_argument("--threshold", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--executor", choices=["mock", "container"])
    p.add_argument("--executor-fixture")
    p.add_argument("--image")
    p.add_argument("--dataset-dir")
    p.add_argument("--gateway", choices=["mock", "http"])
    p.add_argument("--gateway-script")
    p.add_argument("--gateway-base-url")
    p.add_argument("--gateway-model")
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--mode", choices=["file_level", "cell_level"])
    p.add_argument("--token-cutoff", type=int)
    p.add_argument("--wall-clock-seconds", type=float)
    p.add_argument("--release-cache")
    p.add_argument("--refresh-index", action="store_true", default=None)
    p.add_argument("--logs-dir")


def build_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for f in dataclasses.fields(RunConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            setattr(cfg, f.name, val)
    return cfg


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="nbrevive",
        description="Execute, grade, backport, and modernize competition notebooks.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("baseline", cmd_baseline),
        ("backport", cmd_backport),
        ("modernize", cmd_modernize),
        ("report", cmd_report),
    ):
        p = sub.add_parser(name)
        _add_common(p)
        p.set_defaults(fn=fn)

    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = build_config(args)
        run_dir = args.fn(cfg)
    except (NBReviveError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(run_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
