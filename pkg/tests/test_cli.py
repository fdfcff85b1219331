"""End-to-end command tests: corpus loading, the four subcommands, run
determinism, and per-notebook failure isolation."""

import json
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import pytest

from conftest import GOOD_SUBMISSION, NAME_ERROR_TB, TRUTH_CSV, executor_entry, make_notebook, wrap_patch
from nbrevive.backport import Release, write_release_cache
from nbrevive.cli import RunConfig, build_config, load_corpus, main
from nbrevive.notebook import apply_patch, content_hash, parse_cell_delimited, parse_notebook, serialize_notebook

BROKEN_SOURCES = ("x = [1, 0, 1, 0]", "print(resuls)")
FIXED_PATCH = "### CELL 0 [code]\nx = [1, 0, 1, 0]\n\n### CELL 1 [code]\nprint(x)\n"
GOOD_SOURCE = "write_submission('/kaggle/working/submission.csv')"

COMPETITION_JSON = {
    "id": "demo-tabular",
    "metric": "accuracy",
    "target_score": 0.75,
    "columns": ["id", "label"],
    "id_column": "id",
    "ground_truth_path": "truth.csv",
    "description": "Predict the binary label for every id.",
}


@dataclass
class Corpus:
    notebooks_dir: Path
    competitions_dir: Path
    fixture_path: Path
    gateway_path: Path
    out_dir: Path

    def common_args(self):
        return [
            "--notebooks-dir", str(self.notebooks_dir),
            "--competitions-dir", str(self.competitions_dir),
            "--out-dir", str(self.out_dir),
            "--executor", "mock",
            "--executor-fixture", str(self.fixture_path),
            "--gateway", "mock",
            "--gateway-script", str(self.gateway_path),
        ]


def build_corpus(root: Path, with_orphan: bool = False) -> Corpus:
    nb_dir = root / "notebooks"
    comp_dir = root / "competitions"
    out_dir = root / "runs"
    nb_dir.mkdir()
    comp_dir.mkdir()

    (comp_dir / "truth.csv").write_text(TRUTH_CSV, encoding="utf-8")
    (comp_dir / "demo-tabular.json").write_text(json.dumps(COMPETITION_JSON), encoding="utf-8")

    broken = make_notebook(*BROKEN_SOURCES)
    fixed = apply_patch(broken, parse_cell_delimited(FIXED_PATCH))
    good = make_notebook(GOOD_SOURCE)

    meta = {"competition": "demo-tabular", "submitted_at": "2021-03-01T00:00:00+00:00"}
    for name, nb in (("fixme", broken), ("good", good)):
        (nb_dir / f"{name}.ipynb").write_bytes(serialize_notebook(nb))
        (nb_dir / f"{name}.meta.json").write_text(json.dumps(meta), encoding="utf-8")
    if with_orphan:
        (nb_dir / "orphan.ipynb").write_bytes(serialize_notebook(make_notebook("1 / 0")))
        (nb_dir / "orphan.meta.json").write_text(json.dumps(meta), encoding="utf-8")

    fixture = {
        content_hash(broken): executor_entry(failing={1: NAME_ERROR_TB}, n_code_cells=2),
        content_hash(fixed): executor_entry(submission_text=GOOD_SUBMISSION, n_code_cells=2),
        content_hash(good): executor_entry(submission_text=GOOD_SUBMISSION, n_code_cells=1),
    }
    fixture_path = root / "fixture.json"
    fixture_path.write_text(json.dumps(fixture), encoding="utf-8")

    gateway_path = root / "gateway.json"
    gateway_path.write_text(
        json.dumps(
            {
                "*": {
                    "response": wrap_patch("Fix the undefined name.", FIXED_PATCH),
                    "usage": {"input_uncached": 100, "input_cached": 10, "output": 50},
                }
            }
        ),
        encoding="utf-8",
    )
    return Corpus(nb_dir, comp_dir, fixture_path, gateway_path, out_dir)


@pytest.fixture
def corpus(tmp_path) -> Corpus:
    return build_corpus(tmp_path)


# --------------------------------------------------------------------------
# configuration


def test_config_from_file_round_trip(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"threshold": 0.2, "mode": "cell_level"}), encoding="utf-8")
    cfg = RunConfig.from_file(path)
    assert cfg.threshold == 0.2
    assert cfg.mode == "cell_level"
    assert cfg.max_iterations == 16  # untouched default


def test_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"thresold": 0.2}), encoding="utf-8")
    with pytest.raises(ValueError, match="thresold"):
        RunConfig.from_file(path)


def test_flags_override_config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"threshold": 0.2, "max_iterations": 4}), encoding="utf-8")

    class Args:
        config = str(path)
        threshold = 0.05
        max_iterations = None

    cfg = build_config(Args())
    assert cfg.threshold == 0.05  # flag wins
    assert cfg.max_iterations == 4  # config survives absent flag


def test_limits_and_session_config_derivation():
    cfg = RunConfig(memory_gib=2.0, gpu_count=0, threshold=0.3, mode="cell_level")
    limits = cfg.limits()
    assert limits.memory_bytes == 2 * 2**30
    assert limits.gpu_count == 0
    sess = cfg.session_config()
    assert sess.threshold == 0.3
    assert sess.mode == "cell_level"


# --------------------------------------------------------------------------
# corpus loading


def test_load_corpus_pairs_notebooks(corpus):
    cfg = RunConfig(notebooks_dir=str(corpus.notebooks_dir), competitions_dir=str(corpus.competitions_dir))
    entries = load_corpus(cfg)
    assert [e.notebook_path.stem for e in entries] == ["fixme", "good"]
    assert all(e.comp.id == "demo-tabular" for e in entries)
    assert entries[0].comp.target_score == 0.75
    # relative ground truth resolved against the competition file
    assert Path(entries[0].comp.ground_truth_path).is_file()


def test_load_corpus_target_override(tmp_path):
    corpus = build_corpus(tmp_path)
    meta_path = corpus.notebooks_dir / "fixme.meta.json"
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    meta["target_score"] = 0.9
    meta_path.write_text(json.dumps(meta), encoding="utf-8")
    cfg = RunConfig(notebooks_dir=str(corpus.notebooks_dir), competitions_dir=str(corpus.competitions_dir))
    entries = load_corpus(cfg)
    assert entries[0].comp.target_score == 0.9
    assert entries[1].comp.target_score == 0.75  # others untouched


def test_load_corpus_missing_sidecar(tmp_path):
    corpus = build_corpus(tmp_path)
    (corpus.notebooks_dir / "good.meta.json").unlink()
    cfg = RunConfig(notebooks_dir=str(corpus.notebooks_dir), competitions_dir=str(corpus.competitions_dir))
    with pytest.raises(FileNotFoundError, match="good"):
        load_corpus(cfg)


# --------------------------------------------------------------------------
# baseline


def test_baseline_command(corpus, capsys):
    rc = main(["baseline", "--run-name", "b1", *corpus.common_args()])
    assert rc == 0
    run_dir = corpus.out_dir / "b1"
    assert str(run_dir) in capsys.readouterr().out

    lines = [
        json.loads(line)
        for line in (run_dir / "baseline_outcomes.jsonl").read_text(encoding="utf-8").splitlines()
    ]
    by_nb = {l["notebook"]: l for l in lines}
    assert by_nb["fixme.ipynb"]["outcome"]["label"] == "NonReproducible"
    assert by_nb["fixme.ipynb"]["outcome"]["error_status"] == "error"
    assert by_nb["good.ipynb"]["outcome"]["label"] == "Reproducible"
    assert by_nb["good.ipynb"]["reproduced_score"] == 0.75

    table = (run_dir / "outcome_table.csv").read_text(encoding="utf-8")
    assert table.startswith("error_status,csv_state,label,count\n")
    counts = sum(int(row.rsplit(",", 1)[1]) for row in table.strip().splitlines()[1:])
    assert counts == 2


# --------------------------------------------------------------------------
# modernize


def test_modernize_command(corpus):
    rc = main(["modernize", "--run-name", "m1", *corpus.common_args()])
    assert rc == 0
    run_dir = corpus.out_dir / "m1"

    summary = (run_dir / "summary.csv").read_text(encoding="utf-8").splitlines()
    assert summary[0] == "notebook,label,error_status,fixes,error"
    rows = {r.split(",")[0]: r.split(",") for r in summary[1:]}
    assert rows["fixme.ipynb"][1] == "Reproducible" and rows["fixme.ipynb"][3] == "1"
    assert rows["good.ipynb"][1] == "Reproducible" and rows["good.ipynb"][3] == "0"

    fixed = parse_notebook((run_dir / "fixme.modernized.ipynb").read_bytes())
    assert [c.source for c in fixed.cells] == ["x = [1, 0, 1, 0]", "print(x)"]

    session = (run_dir / "fixme.session.jsonl").read_text(encoding="utf-8").splitlines()
    kinds = [json.loads(line)["record"] for line in session]
    assert kinds[0] == "baseline" and kinds[-1] == "terminal" and kinds.count("fix") == 1


def test_modernize_deterministic(corpus):
    assert main(["modernize", "--run-name", "d1", *corpus.common_args()]) == 0
    assert main(["modernize", "--run-name", "d2", *corpus.common_args()]) == 0
    d1, d2 = corpus.out_dir / "d1", corpus.out_dir / "d2"
    names = sorted(p.name for p in d1.iterdir())
    assert names == sorted(p.name for p in d2.iterdir())
    for name in names:
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes(), name


def test_failure_isolation(tmp_path, capsys):
    corpus = build_corpus(tmp_path, with_orphan=True)  # orphan hash not scripted
    rc = main(["baseline", "--run-name", "iso", *corpus.common_args()])
    assert rc == 0
    run_dir = corpus.out_dir / "iso"
    lines = [
        json.loads(line)
        for line in (run_dir / "baseline_outcomes.jsonl").read_text(encoding="utf-8").splitlines()
    ]
    by_nb = {l["notebook"]: l for l in lines}
    assert "error" in by_nb["orphan.ipynb"]
    assert by_nb["good.ipynb"]["outcome"]["label"] == "Reproducible"  # batch survived

    rc = main(["modernize", "--run-name", "iso-m", *corpus.common_args()])
    assert rc == 0
    summary = (corpus.out_dir / "iso-m" / "summary.csv").read_text(encoding="utf-8")
    assert "orphan.ipynb,error" in summary
    assert "fixme.ipynb,Reproducible" in summary


def test_missing_fixture_flag_exits_2(corpus, capsys):
    args = [a for a in corpus.common_args() if a != "--executor-fixture"]
    args.remove(str(corpus.fixture_path))
    rc = main(["modernize", "--run-name", "x", *args])
    assert rc == 2
    assert "executor-fixture" in capsys.readouterr().err


def test_bad_config_file_exits_2(corpus, tmp_path, capsys):
    cfg_path = tmp_path / "bad.json"
    cfg_path.write_text(json.dumps({"no_such_key": 1}), encoding="utf-8")
    rc = main(["baseline", "--config", str(cfg_path), *corpus.common_args()])
    assert rc == 2
    assert "no_such_key" in capsys.readouterr().err


# --------------------------------------------------------------------------
# report


def test_report_command(corpus):
    assert main(["modernize", "--run-name", "m2", *corpus.common_args()]) == 0
    logs_dir = corpus.out_dir / "m2"
    rc = main(
        ["report", "--run-name", "r1", "--out-dir", str(corpus.out_dir), "--logs-dir", str(logs_dir)]
    )
    assert rc == 0
    run_dir = corpus.out_dir / "r1"
    for name in (
        "outcome_table.csv",
        "transition_matrix.csv",
        "error_taxonomy.csv",
        "similarity_curves.json",
        "cost_report.csv",
        "fix_effort_correlations.csv",
        "fix_histogram.csv",
    ):
        assert (run_dir / name).is_file(), name

    tm = (run_dir / "transition_matrix.csv").read_text(encoding="utf-8").splitlines()
    assert tm[0].startswith("fix_type,") and tm[0].endswith(",total")
    row = tm[1].split(",")
    assert row[0] == "error_repair"
    assert sum(int(v) for v in row[1:-1]) == int(row[-1])  # row sum column consistent

    cost = (run_dir / "cost_report.csv").read_text(encoding="utf-8").splitlines()
    per_nb = [r for r in cost if r.startswith("per_notebook")][0].split(",")
    assert per_nb[1] == "2"  # both sessions

    hist = (run_dir / "fix_histogram.csv").read_text(encoding="utf-8")
    assert "0,1" in hist and "1,1" in hist


def test_report_without_logs_exits_2(tmp_path, capsys):
    rc = main(["report", "--out-dir", str(tmp_path), "--logs-dir", str(tmp_path), "--run-name", "r"])
    assert rc == 2
    assert "session.jsonl" in capsys.readouterr().err


# --------------------------------------------------------------------------
# backport


def test_backport_command(tmp_path, capsys):
    nb_dir = tmp_path / "nbs"
    comp_dir = tmp_path / "comps"
    cache_dir = tmp_path / "cache"
    out_dir = tmp_path / "runs"
    for d in (nb_dir, comp_dir, cache_dir):
        d.mkdir()
    (comp_dir / "truth.csv").write_text(TRUTH_CSV, encoding="utf-8")
    (comp_dir / "demo-tabular.json").write_text(json.dumps(COMPETITION_JSON), encoding="utf-8")

    nb = make_notebook("import numpy as np\nprint(np.__version__)")
    (nb_dir / "np_user.ipynb").write_bytes(serialize_notebook(nb))
    (nb_dir / "np_user.meta.json").write_text(
        json.dumps({"competition": "demo-tabular", "submitted_at": "2021-03-01T00:00:00+00:00"}),
        encoding="utf-8",
    )

    def rel(v, y, m, d):
        return Release(version=v, released_at=datetime(y, m, d, tzinfo=timezone.utc))

    write_release_cache(cache_dir, "numpy", [rel("1.19.5", 2021, 1, 5), rel("1.20.0", 2021, 1, 30), rel("1.21.0", 2021, 6, 22)])

    rc = main(
        [
            "backport",
            "--run-name", "bp",
            "--notebooks-dir", str(nb_dir),
            "--competitions-dir", str(comp_dir),
            "--out-dir", str(out_dir),
            "--release-cache", str(cache_dir),
        ]
    )
    assert rc == 0
    run_dir = out_dir / "bp"
    assert (run_dir / "np_user.requirements.txt").read_text(encoding="utf-8") == "numpy<=1.20.0\n"
    env = json.loads((run_dir / "np_user.env.json").read_text(encoding="utf-8"))
    assert env["python"] == "3.9.25"
    summary = json.loads((run_dir / "backport_summary.json").read_text(encoding="utf-8"))
    assert summary[0]["status"] == "ok"
    assert summary[0]["pinned"] == 1
