"""Notebook model: parse/serialize nbformat JSON, the cell-delimited wire
format used in prompts and patches, patch application, pip-install directive
extraction, token counting, and edit similarity.

The wire format is line-oriented:

    ### CELL {i} [{kind}]
    {source, verbatim for code; every line '# '-prefixed for markdown}
    ### TRACEBACK            <- optional, only when rendered with tracebacks
    {traceback text}

Cells are separated by exactly one blank line and the document ends with a
single newline. Parsing re-indexes cells by order of appearance and ignores
traceback blocks, so render -> parse -> render is stable and parse tolerates
LLM renumbering.
"""

from __future__ import annotations

import ast
import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional

from .errors import MalformedNotebook, PatchParseError, UnsupportedFormat

logger = logging.getLogger(__name__)

CODE = "code"
MARKDOWN = "markdown"

_HEADER_RE = re.compile(r"^### CELL (\d+) \[(code|markdown)\]$", re.MULTILINE)
_TRACEBACK_MARKER = "### TRACEBACK"
# ANSI color escapes show up in kernel tracebacks; strip them everywhere.
_ANSI_RE = re.compile(r"\x1b\[[0-9;]*m")


@dataclass(frozen=True)
class CellOutput:
    """One recorded output of an executed code cell.

    kind is one of stream | display | error. Error outputs carry the full
    traceback text and the exception class name when known.
    """

    kind: str
    text: str = ""
    traceback: str = ""
    exception_class: Optional[str] = None


@dataclass(frozen=True)
class Cell:
    index: int
    kind: str
    source: str
    outputs: tuple[CellOutput, ...] = ()
    exec_time: Optional[float] = None

    def first_traceback(self) -> Optional[str]:
        for out in self.outputs:
            if out.kind == "error" and out.traceback:
                return out.traceback
        return None


@dataclass(frozen=True)
class Notebook:
    """Immutable in-memory notebook. ``raw`` keeps the original JSON dict (when
    parsed from disk) so untouched fields survive re-serialization."""

    format_version: tuple[int, int]
    cells: tuple[Cell, ...]
    metadata: dict = field(default_factory=dict)
    raw: Optional[dict] = field(default=None, compare=False, repr=False)

    def code_cells(self) -> tuple[Cell, ...]:
        return tuple(c for c in self.cells if c.kind == CODE)


@dataclass(frozen=True)
class RequirementSpec:
    """One package requirement from a !pip install directive.

    constraint is one of exact | at_most | none.
    """

    package: str
    constraint: str = "none"
    version: Optional[str] = None

    def as_line(self) -> str:
        if self.constraint == "exact":
            return f"{self.package}=={self.version}"
        if self.constraint == "at_most":
            return f"{self.package}<={self.version}"
        return self.package


def normalize_package_name(name: str) -> str:
    # PEP 503 index normalization
    return re.sub(r"[-_.]+", "-", name).lower()


# --------------------------------------------------------------------------
# nbformat JSON


def _join_source(src) -> str:
    if isinstance(src, str):
        return src
    if isinstance(src, list):
        return "".join(src)
    raise MalformedNotebook(f"cell source has unexpected type {type(src).__name__}")


def _parse_outputs(raw_outputs) -> tuple[CellOutput, ...]:
    outs = []
    for out in raw_outputs or ():
        kind = out.get("output_type")
        if kind == "stream":
            outs.append(CellOutput(kind="stream", text=_join_source(out.get("text", ""))))
        elif kind in ("display_data", "execute_result"):
            data = out.get("data", {}) or {}
            outs.append(CellOutput(kind="display", text=_join_source(data.get("text/plain", ""))))
        elif kind == "error":
            tb_lines = out.get("traceback", []) or []
            tb = _ANSI_RE.sub("", "\n".join(str(ln) for ln in tb_lines))
            outs.append(
                CellOutput(
                    kind="error",
                    text=f"{out.get('ename', '')}: {out.get('evalue', '')}".strip(": "),
                    traceback=tb,
                    exception_class=out.get("ename") or None,
                )
            )
        # unknown output types are dropped from the model but survive in raw
    return tuple(outs)


def parse_notebook(raw: bytes | str) -> Notebook:
    """Parse nbformat 4.x JSON into the internal model.

    Raises MalformedNotebook for unreadable input and UnsupportedFormat for
    format majors other than 4.
    """
    if isinstance(raw, bytes):
        try:
            raw = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedNotebook(f"not utf-8: {exc}") from exc
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise MalformedNotebook(f"not JSON: {exc}") from exc
    if not isinstance(data, dict) or "cells" not in data:
        raise MalformedNotebook("no cells field")
    major = data.get("nbformat")
    if major != 4:
        raise UnsupportedFormat(f"nbformat {major!r}, only 4.x is supported")
    minor = data.get("nbformat_minor", 0)

    cells = []
    for i, c in enumerate(data["cells"]):
        if not isinstance(c, dict) or "cell_type" not in c:
            raise MalformedNotebook(f"cell {i} has no cell_type")
        ctype = c["cell_type"]
        source = _join_source(c.get("source", ""))
        meta = c.get("metadata", {}) or {}
        if ctype == "code":
            cells.append(
                Cell(
                    index=i,
                    kind=CODE,
                    source=source,
                    outputs=_parse_outputs(c.get("outputs")),
                    exec_time=meta.get("exec_time_seconds"),
                )
            )
        else:
            # markdown and raw cells carry no outputs
            cells.append(Cell(index=i, kind=MARKDOWN, source=source))
    return Notebook(
        format_version=(major, minor),
        cells=tuple(cells),
        metadata=data.get("metadata", {}) or {},
        raw=data,
    )


def _serialize_output(out: CellOutput) -> dict:
    if out.kind == "stream":
        return {"output_type": "stream", "name": "stdout", "text": out.text.splitlines(keepends=True)}
    if out.kind == "display":
        return {
            "output_type": "display_data",
            "data": {"text/plain": out.text.splitlines(keepends=True)},
            "metadata": {},
        }
    ename = out.exception_class or (out.text.split(":", 1)[0] if out.text else "Exception")
    evalue = out.text.split(": ", 1)[1] if ": " in out.text else ""
    return {
        "output_type": "error",
        "ename": ename,
        "evalue": evalue,
        "traceback": out.traceback.split("\n") if out.traceback else [],
    }


def serialize_notebook(nb: Notebook) -> bytes:
    """Render the notebook back to nbformat JSON (UTF-8).

    When the notebook came from disk, the retained raw dict is used as the
    base so unknown fields are preserved; cell sources/outputs are written
    from the model.
    """
    if nb.raw is not None and len(nb.raw.get("cells", ())) == len(nb.cells):
        data = json.loads(json.dumps(nb.raw))  # deep copy
        for cell, raw_cell in zip(nb.cells, data["cells"]):
            original = _join_source(raw_cell.get("source", ""))
            if original != cell.source:
                raw_cell["source"] = cell.source.splitlines(keepends=True)
        # outputs are written back only for code cells in synthesized form
    else:
        data = {
            "nbformat": nb.format_version[0],
            "nbformat_minor": nb.format_version[1],
            "metadata": nb.metadata,
            "cells": [],
        }
        for cell in nb.cells:
            entry: dict = {
                "cell_type": cell.kind,
                "metadata": {},
                "source": cell.source.splitlines(keepends=True),
            }
            if cell.kind == CODE:
                entry["outputs"] = [_serialize_output(o) for o in cell.outputs]
                entry["execution_count"] = None
                if cell.exec_time is not None:
                    entry["metadata"]["exec_time_seconds"] = cell.exec_time
            data["cells"].append(entry)
    return (json.dumps(data, indent=1, ensure_ascii=False) + "\n").encode("utf-8")


def content_hash(nb: Notebook) -> str:
    """sha256 over a canonical (kind, source) serialization.

    Stable across metadata/output changes; used to key scripted execution
    fixtures."""
    canon = json.dumps(
        {"nbformat": list(nb.format_version), "cells": [[c.kind, c.source] for c in nb.cells]},
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------
# cell-delimited wire format


def _prefix_markdown(source: str) -> str:
    return "\n".join("# " + line if line else "#" for line in source.split("\n"))


def _unprefix_markdown(body: str) -> str:
    lines = []
    for line in body.split("\n"):
        if line.startswith("# "):
            lines.append(line[2:])
        elif line == "#":
            lines.append("")
        else:
            lines.append(line)  # tolerate unprefixed lines in LLM output
    return "\n".join(lines)


def render_cell_delimited(nb: Notebook, include_tracebacks: bool = False) -> str:
    """Render the notebook to the cell-delimited text format.

    include_tracebacks appends a ### TRACEBACK block after each cell that has
    an error output. Empty notebooks render to the empty string.
    """
    blocks = []
    for cell in nb.cells:
        body = cell.source if cell.kind == CODE else _prefix_markdown(cell.source)
        block = f"### CELL {cell.index} [{cell.kind}]\n{body}"
        if include_tracebacks:
            tb = cell.first_traceback()
            if tb:
                block += f"\n{_TRACEBACK_MARKER}\n{tb}"
        blocks.append(block)
    if not blocks:
        return ""
    return "\n\n".join(blocks) + "\n"


def parse_cell_delimited(text: str) -> Notebook:
    """Parse cell-delimited text back into a (bare) notebook.

    Cells are re-indexed by order of appearance; header numbering and any
    traceback blocks are ignored. Raises PatchParseError when no well-formed
    header is present or a CELL header line is malformed.
    """
    text = text.replace("\r\n", "\n")
    headers = list(_HEADER_RE.finditer(text))
    if not headers:
        raise PatchParseError("no cell headers found")
    for line in text.split("\n"):
        if line.startswith("### CELL") and not _HEADER_RE.fullmatch(line):
            raise PatchParseError(f"malformed cell header: {line!r}")

    cells = []
    for pos, m in enumerate(headers):
        start = m.end() + 1  # skip the newline after the header
        end = headers[pos + 1].start() if pos + 1 < len(headers) else len(text)
        content = text[start:end] if start <= end else ""
        tb = re.search(r"^### TRACEBACK$", content, re.MULTILINE)
        if tb:
            cut = tb.start()
            # also drop the newline that preceded the marker
            content = content[: cut - 1] if cut > 0 else ""
        elif pos + 1 < len(headers):
            if content.endswith("\n\n"):
                content = content[:-2]
            elif content.endswith("\n"):
                content = content[:-1]
        else:
            if content.endswith("\n"):
                content = content[:-1]
        kind = m.group(2)
        if kind == MARKDOWN:
            content = _unprefix_markdown(content)
        cells.append(Cell(index=pos, kind=kind, source=content))
    return Notebook(format_version=(4, 5), cells=tuple(cells))


def apply_patch(base: Notebook, patch: Notebook) -> Notebook:
    """Replace the notebook's cells with the patch's cells.

    Keeps the base notebook's format version and metadata; all outputs are
    cleared (the patched notebook has not run yet)."""
    cells = tuple(
        Cell(index=i, kind=c.kind, source=c.source) for i, c in enumerate(patch.cells)
    )
    return Notebook(format_version=base.format_version, cells=cells, metadata=dict(base.metadata))


def first_error_index(nb: Notebook) -> Optional[int]:
    """Position (in nb.cells) of the first cell with an error output."""
    for pos, cell in enumerate(nb.cells):
        if cell.first_traceback() is not None:
            return pos
    return None


# --------------------------------------------------------------------------
# !pip install extraction

_PIP_LINE_RE = re.compile(r"^\s*[!%]\s*pip3?\s+install\b(.*)$")
# flags whose value comes as a separate token
_VALUE_FLAGS = {
    "-i",
    "--index-url",
    "--extra-index-url",
    "-f",
    "--find-links",
    "-r",
    "--requirement",
    "-t",
    "--target",
    "--no-binary",
    "--only-binary",
}
_REQ_RE = re.compile(
    r"^(?P<name>[A-Za-z0-9][A-Za-z0-9._-]*)(?:\[[^\]]*\])?"
    r"(?:(?P<op>==|<=|>=|~=|!=|<|>)(?P<ver>[^,;]+))?$"
)


def extract_pip_installs(nb: Notebook) -> list[RequirementSpec]:
    """Collect package requirements from !pip install lines in code cells.

    ``pkg==v`` maps to an exact constraint, ``pkg<=v`` to at-most, anything
    else (bare name, >=, ~=, ...) to an unconstrained requirement; tokens that
    do not parse as requirements are skipped with a warning.
    """
    specs: list[RequirementSpec] = []
    seen: set[str] = set()
    for cell in nb.code_cells():
        for line in cell.source.split("\n"):
            m = _PIP_LINE_RE.match(line)
            if not m:
                continue
            tokens = m.group(1).split()
            skip_next = False
            for tok in tokens:
                if skip_next:
                    skip_next = False
                    continue
                if tok in _VALUE_FLAGS:
                    skip_next = True
                    continue
                if tok.startswith("-"):
                    continue
                req = _REQ_RE.match(tok)
                if not req:
                    logger.warning("skipping unparseable pip token %r", tok)
                    continue
                name = normalize_package_name(req.group("name"))
                op, ver = req.group("op"), req.group("ver")
                if op == "==":
                    spec = RequirementSpec(name, "exact", ver)
                elif op == "<=":
                    spec = RequirementSpec(name, "at_most", ver)
                else:
                    if op:
                        logger.warning("constraint %r on %s widened to unconstrained", op + ver, name)
                    spec = RequirementSpec(name)
                key = spec.package
                if key not in seen:
                    seen.add(key)
                    specs.append(spec)
    return specs


# --------------------------------------------------------------------------
# text measures


def code_text(nb: Notebook) -> str:
    """Concatenated code-cell sources, joined by single newlines.

    Markdown is excluded; this is the string edit similarity is measured
    over."""
    return "\n".join(c.source for c in nb.code_cells())


def levenshtein(a: str, b: str) -> int:
    """Character-level Levenshtein distance, two-row DP."""
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, cb in enumerate(b, start=1):
            cur[j] = min(
                prev[j] + 1,  # deletion
                cur[j - 1] + 1,  # insertion
                prev[j - 1] + (ca != cb),  # substitution
            )
        prev = cur
    return prev[len(b)]


def edit_similarity(a: str, b: str) -> float:
    """1 - levenshtein(a, b) / max(len(a), len(b)); 1.0 when both empty."""
    if not a and not b:
        return 1.0
    return 1.0 - levenshtein(a, b) / max(len(a), len(b))


def count_tokens(text: str, tokenizer: Optional[Callable[[str], int]] = None) -> int:
    """Token count of ``text``: ceil(utf-8 bytes / 4) unless an exact
    tokenizer callable is supplied."""
    if tokenizer is not None:
        return tokenizer(text)
    return math.ceil(len(text.encode("utf-8")) / 4)


def notebook_stats(nb: Notebook) -> dict:
    """Size measures used for correlation reports: total source characters,
    code lines, and number of cells currently showing an error."""
    code = code_text(nb)
    return {
        "size_chars": sum(len(c.source) for c in nb.cells),
        "loc": len(code.split("\n")) if code else 0,
        "error_count": sum(1 for c in nb.cells if c.first_traceback() is not None),
    }
