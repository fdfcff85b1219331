"""Notebook model tests: wire-format round trips, patching, pip-install
extraction, edit similarity against a full-matrix DP oracle."""

import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_notebook
from nbrevive.errors import MalformedNotebook, PatchParseError, UnsupportedFormat
from nbrevive.notebook import (
    Cell,
    Notebook,
    apply_patch,
    code_text,
    content_hash,
    count_tokens,
    edit_similarity,
    extract_pip_installs,
    first_error_index,
    levenshtein,
    parse_cell_delimited,
    parse_notebook,
    render_cell_delimited,
    serialize_notebook,
)

# --------------------------------------------------------------------------
# wire format


def test_render_single_cell():
    nb = make_notebook("x=1")
    assert render_cell_delimited(nb) == "### CELL 0 [code]\nx=1\n"


def test_render_empty_notebook():
    assert render_cell_delimited(make_notebook()) == ""


def test_render_markdown_comment_prefixed():
    nb = make_notebook("Title\n\ntext", kinds=["markdown"])
    assert render_cell_delimited(nb) == "### CELL 0 [markdown]\n# Title\n#\n# text\n"


def test_parse_reindexes_by_appearance():
    text = "### CELL 7 [code]\na=1\n\n### CELL 2 [markdown]\n# hi\n"
    nb = parse_cell_delimited(text)
    assert [c.index for c in nb.cells] == [0, 1]
    assert [c.kind for c in nb.cells] == ["code", "markdown"]
    assert nb.cells[0].source == "a=1"
    assert nb.cells[1].source == "hi"


def test_parse_ignores_traceback_blocks(error_notebook):
    text = render_cell_delimited(error_notebook, include_tracebacks=True)
    assert "### TRACEBACK" in text
    nb = parse_cell_delimited(text)
    assert [c.source for c in nb.cells] == [c.source for c in error_notebook.cells]


def test_parse_rejects_garbage():
    with pytest.raises(PatchParseError):
        parse_cell_delimited("no cells here at all")


def test_parse_rejects_malformed_header():
    with pytest.raises(PatchParseError):
        parse_cell_delimited("### CELL x [code]\na=1\n")


def test_parse_tolerates_crlf():
    nb = parse_cell_delimited("### CELL 0 [code]\r\nx = 1\r\n")
    assert nb.cells[0].source == "x = 1"


_cell_source = st.text(
    alphabet=st.characters(blacklist_categories=("Cs",), blacklist_characters="\r"),
    max_size=200,
).filter(lambda s: not any(ln.startswith("### ") for ln in s.split("\n")))


@given(
    st.lists(
        st.tuples(st.sampled_from(["code", "markdown"]), _cell_source),
        min_size=1,
        max_size=6,
    )
)
@settings(max_examples=200)
def test_round_trip_any_sources(cells):
    nb = Notebook(
        format_version=(4, 5),
        cells=tuple(Cell(index=i, kind=k, source=s) for i, (k, s) in enumerate(cells)),
    )
    back = parse_cell_delimited(render_cell_delimited(nb))
    assert [(c.kind, c.source) for c in back.cells] == [(c.kind, c.source) for c in nb.cells]


@given(
    st.lists(
        st.tuples(st.sampled_from(["code", "markdown"]), _cell_source),
        min_size=1,
        max_size=4,
    )
)
@settings(max_examples=100)
def test_render_parse_render_stable(cells):
    nb = Notebook(
        format_version=(4, 5),
        cells=tuple(Cell(index=i, kind=k, source=s) for i, (k, s) in enumerate(cells)),
    )
    once = render_cell_delimited(nb)
    assert render_cell_delimited(parse_cell_delimited(once)) == once


def test_separator_is_exactly_one_blank_line():
    nb = make_notebook("a=1", "b=2")
    assert render_cell_delimited(nb) == "### CELL 0 [code]\na=1\n\n### CELL 1 [code]\nb=2\n"


# --------------------------------------------------------------------------
# nbformat JSON


def test_parse_notebook_fixture(error_notebook):
    assert error_notebook.format_version == (4, 4)
    assert len(error_notebook.cells) == 4
    assert first_error_index(error_notebook) == 3
    err = error_notebook.cells[3].outputs[-1]
    assert err.exception_class == "ValueError"
    assert "Invalid classes" in err.traceback


def test_parse_notebook_rejects_non_json():
    with pytest.raises(MalformedNotebook):
        parse_notebook(b"not json")


def test_parse_notebook_rejects_other_formats():
    with pytest.raises(UnsupportedFormat):
        parse_notebook(json.dumps({"cells": [], "nbformat": 3}))


def test_serialize_round_trips_sources(error_notebook):
    again = parse_notebook(serialize_notebook(error_notebook))
    assert [c.source for c in again.cells] == [c.source for c in error_notebook.cells]
    assert again.metadata == error_notebook.metadata


def test_serialize_preserves_unknown_fields(tmp_path):
    raw = {
        "nbformat": 4,
        "nbformat_minor": 5,
        "metadata": {"custom_tool": {"x": 1}},
        "cells": [
            {"cell_type": "code", "metadata": {"collapsed": True}, "outputs": [],
             "execution_count": None, "source": ["a = 1\n"], "vendor_field": "kept"},
        ],
    }
    nb = parse_notebook(json.dumps(raw))
    out = json.loads(serialize_notebook(nb).decode("utf-8"))
    assert out["metadata"]["custom_tool"] == {"x": 1}
    assert out["cells"][0]["vendor_field"] == "kept"


def test_content_hash_tracks_sources_only(error_notebook):
    h = content_hash(error_notebook)
    patched = apply_patch(error_notebook, error_notebook)
    assert content_hash(patched) == h  # outputs/metadata do not matter
    changed = make_notebook("different')")
    assert content_hash(changed) != h


def test_apply_patch_clears_outputs(error_notebook):
    patch = parse_cell_delimited("### CELL 0 [code]\nx=1\n")
    out = apply_patch(error_notebook, patch)
    assert len(out.cells) == 1
    assert out.cells[0].outputs == ()
    assert out.metadata == error_notebook.metadata
    assert out.format_version == error_notebook.format_version


# --------------------------------------------------------------------------
# pip install extraction


def test_extract_pip_basic():
    nb = make_notebook("!pip install numpy==1.19.5 pandas<=1.2.0 xgboost")
    specs = extract_pip_installs(nb)
    assert [(s.package, s.constraint, s.version) for s in specs] == [
        ("numpy", "exact", "1.19.5"),
        ("pandas", "at_most", "1.2.0"),
        ("xgboost", "none", None),
    ]


def test_extract_pip_flags_and_magics():
    nb = make_notebook(
        "%pip install -q --upgrade scikit-learn>=0.24\n"
        "!pip3 install -i https://mirror.example/simple torch==1.7.1\n"
        "x = 1  # not a pip line"
    )
    specs = extract_pip_installs(nb)
    assert [(s.package, s.constraint) for s in specs] == [
        ("scikit-learn", "none"),  # >= widened to unconstrained
        ("torch", "exact"),
    ]


def test_extract_pip_dedup_and_normalization():
    nb = make_notebook("!pip install Scikit_Learn\n!pip install scikit-learn==1.0")
    specs = extract_pip_installs(nb)
    assert len(specs) == 1
    assert specs[0].package == "scikit-learn"


def test_extract_pip_skips_unparseable_tokens():
    nb = make_notebook("!pip install ./local-dir valid-pkg")
    specs = extract_pip_installs(nb)
    assert [s.package for s in specs] == ["valid-pkg"]


# --------------------------------------------------------------------------
# token counting


def test_count_tokens_default_rule():
    assert count_tokens("") == 0
    assert count_tokens("abcd") == 1
    assert count_tokens("abcde") == 2
    assert count_tokens("é" * 4) == 2  # 8 utf-8 bytes


def test_count_tokens_pluggable():
    assert count_tokens("whatever", tokenizer=lambda s: 42) == 42


# --------------------------------------------------------------------------
# edit similarity vs full-matrix DP oracle


def oracle_levenshtein(a: str, b: str) -> int:
    m, n = len(a), len(b)
    dp = [[0] * (n + 1) for _ in range(m + 1)]
    for i in range(m + 1):
        dp[i][0] = i
    for j in range(n + 1):
        dp[0][j] = j
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            dp[i][j] = min(
                dp[i - 1][j] + 1,
                dp[i][j - 1] + 1,
                dp[i - 1][j - 1] + (a[i - 1] != b[j - 1]),
            )
    return dp[m][n]


def test_edit_similarity_documented_cases():
    assert edit_similarity("", "") == 1.0
    assert edit_similarity("abc", "") == 0.0
    assert edit_similarity("kitten", "sitting") == 1 - 3 / 7


@given(st.text(max_size=60), st.text(max_size=60))
@settings(max_examples=300)
def test_levenshtein_matches_oracle(a, b):
    assert levenshtein(a, b) == oracle_levenshtein(a, b)


@given(st.text(max_size=40), st.text(max_size=40))
@settings(max_examples=100)
def test_edit_similarity_symmetric_and_bounded(a, b):
    s = edit_similarity(a, b)
    assert 0.0 <= s <= 1.0
    assert s == edit_similarity(b, a)
    assert edit_similarity(a, a) == 1.0


def test_code_text_excludes_markdown():
    nb = make_notebook("a=1", "# heading", "b=2", kinds=["code", "markdown", "code"])
    assert code_text(nb) == "a=1\nb=2"
