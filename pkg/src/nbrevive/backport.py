"""Environment backporting: reconstruct a contemporary dependency set for a
notebook from its imports and submission date.

The policy, per package, over release history sorted by release date:

1. newest release that predates the notebook's submission timestamp;
2. else the oldest release whose requires-python matches the chosen
   interpreter;
3. else the oldest release at all.

Yanked releases are never eligible; a package whose every release is yanked
raises NoInstallableRelease. Constraints are emitted as ``name<=version`` so
the resolver may still pick an older compatible build.
"""

from __future__ import annotations

import ast
import json
import logging
import re
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional

from packaging.specifiers import InvalidSpecifier, SpecifierSet
from packaging.version import InvalidVersion, Version

from .errors import NoInstallableRelease, PackageUnknown
from .notebook import Notebook, RequirementSpec, normalize_package_name

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Release:
    version: str
    released_at: datetime
    requires_interpreter: Optional[str] = None
    yanked: bool = False


@dataclass(frozen=True)
class InterpreterRelease:
    version: tuple[int, int, int]
    released_at: datetime


@dataclass(frozen=True)
class InterpreterChoice:
    version: tuple[int, int, int]
    flagged: bool  # True when nothing predated the timestamp (oldest fallback)

    def __str__(self) -> str:
        return ".".join(str(p) for p in self.version)


@dataclass(frozen=True)
class EnvironmentSpec:
    """Interpreter plus at-most-pinned requirements, ready to materialize."""

    interpreter_version: str
    requirements: tuple[RequirementSpec, ...] = ()

    def fingerprint(self) -> str:
        reqs = ", ".join(r.as_line() for r in self.requirements) or "unpinned"
        return f"python {self.interpreter_version}; {reqs}"


def _parse_ts(s: str) -> datetime:
    dt = datetime.fromisoformat(s.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt


# --------------------------------------------------------------------------
# release index


class ReleaseIndex:
    """Package -> release history, ascending by (released_at, insertion
    order). Backed by one JSON file per package in a cache directory."""

    def __init__(self, packages: Optional[Mapping[str, Iterable[Release]]] = None):
        self._packages: dict[str, tuple[Release, ...]] = {}
        for name, rels in (packages or {}).items():
            self.put(name, rels)

    def put(self, name: str, releases: Iterable[Release]) -> None:
        ordered = sorted(enumerate(releases), key=lambda ir: (ir[1].released_at, ir[0]))
        self._packages[normalize_package_name(name)] = tuple(r for _, r in ordered)

    def releases(self, name: str) -> tuple[Release, ...]:
        key = normalize_package_name(name)
        if key not in self._packages:
            raise PackageUnknown(f"package {key!r} not in release index")
        return self._packages[key]

    def __contains__(self, name: str) -> bool:
        return normalize_package_name(name) in self._packages

    def packages(self) -> list[str]:
        return sorted(self._packages)


def _release_from_dict(d: dict) -> Release:
    return Release(
        version=d["version"],
        released_at=_parse_ts(d["released_at"]),
        requires_interpreter=d.get("requires_interpreter") or None,
        yanked=bool(d.get("yanked", False)),
    )


def load_release_index(cache_dir: str | Path) -> ReleaseIndex:
    """Load every ``<package>.json`` file under the cache directory."""
    index = ReleaseIndex()
    for path in sorted(Path(cache_dir).glob("*.json")):
        data = json.loads(path.read_text(encoding="utf-8"))
        index.put(path.stem, [_release_from_dict(d) for d in data])
    return index


def write_release_cache(cache_dir: str | Path, name: str, releases: Iterable[Release]) -> Path:
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"{normalize_package_name(name)}.json"
    payload = [
        {
            "version": r.version,
            "released_at": r.released_at.isoformat(),
            "requires_interpreter": r.requires_interpreter,
            "yanked": r.yanked,
        }
        for r in releases
    ]
    path.write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")
    return path


def fetch_release_history(
    name: str,
    base_url: str = "https://pypi.org/pypi",
    session=None,
    timeout: float = 30.0,
) -> list[Release]:
    """Pull one package's release history from a package-index JSON API.

    A release is dated by its earliest file upload and considered yanked only
    when every file of that release is yanked; releases without files are
    skipped (nothing installable).
    """
    import requests

    sess = session or requests.Session()
    resp = sess.get(f"{base_url}/{normalize_package_name(name)}/json", timeout=timeout)
    resp.raise_for_status()
    data = resp.json()
    releases = []
    for version, files in (data.get("releases") or {}).items():
        if not files:
            continue
        times = [f.get("upload_time_iso_8601") or f.get("upload_time") for f in files]
        times = [t for t in times if t]
        if not times:
            continue
        releases.append(
            Release(
                version=version,
                released_at=min(_parse_ts(t) for t in times),
                requires_interpreter=next(
                    (f.get("requires_python") for f in files if f.get("requires_python")), None
                ),
                yanked=all(f.get("yanked", False) for f in files),
            )
        )
    releases.sort(key=lambda r: r.released_at)
    return releases


# --------------------------------------------------------------------------
# import extraction

_MAGIC_LINE_RE = re.compile(r"^\s*[%!?]")
_IMPORT_FALLBACK_RE = re.compile(r"^\s*(?:import|from)\s+([A-Za-z_][A-Za-z0-9_]*)", re.MULTILINE)


def _load_bundled_json(filename: str) -> dict:
    with resources.files("nbrevive").joinpath("data", filename).open("r", encoding="utf-8") as fh:
        return json.load(fh)


def default_alias_table() -> dict[str, str]:
    return dict(_load_bundled_json("module_aliases.json"))


def _strip_magics(source: str) -> str:
    return "\n".join("" if _MAGIC_LINE_RE.match(ln) else ln for ln in source.split("\n"))


def _top_level_imports(source: str) -> list[str]:
    cleaned = _strip_magics(source)
    names: list[str] = []
    try:
        tree = ast.parse(cleaned)
    except SyntaxError:
        # legacy syntax or partial cells: fall back to a line scan
        names.extend(m.group(1) for m in _IMPORT_FALLBACK_RE.finditer(cleaned))
        return names
    for node in ast.walk(tree):
        if isinstance(node, ast.Import):
            names.extend(alias.name.split(".")[0] for alias in node.names)
        elif isinstance(node, ast.ImportFrom):
            if node.level == 0 and node.module:
                names.append(node.module.split(".")[0])
    return names


# stdlib names that predate sys.stdlib_module_names' interpreter
_LEGACY_STDLIB = {
    "cPickle", "cStringIO", "StringIO", "urllib2", "urlparse", "Queue",
    "ConfigParser", "HTMLParser", "httplib", "xmlrpclib", "Tkinter", "copy_reg",
    "thread", "dummy_thread", "repr", "sets", "md5", "sha", "commands",
}


def extract_dependencies(nb: Notebook, alias_table: Optional[Mapping[str, str]] = None) -> list[str]:
    """Third-party distribution names imported by the notebook's code cells.

    Walks the AST of each code cell (line-scan fallback for unparseable
    sources), drops standard-library modules, maps import names through the
    module->distribution alias table, and normalizes. Order of first
    appearance, no duplicates.
    """
    aliases = dict(default_alias_table())
    if alias_table:
        aliases.update(alias_table)
    stdlib = set(sys.stdlib_module_names) | _LEGACY_STDLIB
    found: list[str] = []
    seen: set[str] = set()
    for cell in nb.code_cells():
        for mod in _top_level_imports(cell.source):
            if mod in stdlib or mod.startswith("_"):
                continue
            dist = normalize_package_name(aliases.get(mod, mod))
            if dist not in seen:
                seen.add(dist)
                found.append(dist)
    return found


# --------------------------------------------------------------------------
# interpreter major detection

_PY2_MARKERS = (
    re.compile(r"(?m)^\s*print\s+[^\s(=]"),  # print statement with an argument
    re.compile(r"(?m)^\s*print\s*$"),  # bare print
    re.compile(r"\bxrange\s*\("),
    re.compile(r"\braw_input\s*\("),
)
_PY3_MARKERS = (
    re.compile(r"""\b[fF](?:['"])"""),  # f-string literal
    re.compile(r"\basync\s+def\b"),
    re.compile(r"\bawait\s+\w"),
    re.compile(r"\bprint\s*\("),
)


def detect_major(nb: Notebook) -> int:
    """Guess the interpreter major line (2 or 3) from code-cell syntax.

    Any py3-only marker (f-string, async/await, print call) wins; else any
    py2-only marker (print statement, xrange, raw_input) yields 2; the
    default is 3.
    """
    code = "\n".join(c.source for c in nb.code_cells())
    if any(p.search(code) for p in _PY3_MARKERS):
        return 3
    if any(p.search(code) for p in _PY2_MARKERS):
        return 2
    return 3


# --------------------------------------------------------------------------
# interpreter version inference


def load_python_releases(path: Optional[str | Path] = None) -> list[InterpreterRelease]:
    """Interpreter release table; the bundled one covers major lines 2 and 3."""
    if path is None:
        data = _load_bundled_json("python_releases.json")
    else:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    out = []
    for entry in data:
        parts = tuple(int(p) for p in entry["version"].split("."))
        while len(parts) < 3:
            parts = parts + (0,)
        out.append(InterpreterRelease(version=parts, released_at=_parse_ts(entry["released_at"])))
    out.sort(key=lambda r: (r.released_at, r.version))
    return out


def infer_interpreter(
    submitted_at: datetime,
    major: int,
    table: Optional[list[InterpreterRelease]] = None,
) -> InterpreterChoice:
    """Pick the interpreter version contemporary with the submission.

    The most recent release of the major line predating the timestamp decides
    the minor family; the family's highest patch level is then used (security
    backports keep old families installable). When nothing predates the
    timestamp the oldest release of the line is used and the choice is
    flagged for review.
    """
    table = table if table is not None else load_python_releases()
    line = [r for r in table if r.version[0] == major]
    if not line:
        raise ValueError(f"no interpreter releases for major line {major}")
    eligible = [r for r in line if r.released_at < submitted_at]
    if eligible:
        base = max(eligible, key=lambda r: (r.released_at, r.version))
        flagged = False
    else:
        base = min(line, key=lambda r: (r.released_at, r.version))
        flagged = True
    family = base.version[:2]
    patch = max(r.version[2] for r in line if r.version[:2] == family)
    return InterpreterChoice(version=(family[0], family[1], patch), flagged=flagged)


# --------------------------------------------------------------------------
# version selection


def _interpreter_compatible(requires: Optional[str], interpreter: tuple[int, int, int]) -> bool:
    if not requires:
        return True
    try:
        spec = SpecifierSet(requires)
    except InvalidSpecifier:
        logger.warning("unparseable requires-python %r treated as unconstrained", requires)
        return True
    return spec.contains(Version(".".join(str(p) for p in interpreter)), prereleases=True)


def select_version(
    package: str,
    submitted_at: datetime,
    interpreter: tuple[int, int, int],
    index: ReleaseIndex,
) -> Release:
    """Choose the release to pin for one package (see module docstring)."""
    releases = index.releases(package)
    candidates = [r for r in releases if not r.yanked]
    if not candidates:
        raise NoInstallableRelease(f"every release of {package!r} is yanked")
    before = [r for r in candidates if r.released_at < submitted_at]
    if before:
        return before[-1]  # newest predating; history is sorted ascending
    compatible = [r for r in candidates if _interpreter_compatible(r.requires_interpreter, interpreter)]
    if compatible:
        return compatible[0]  # oldest satisfying requires-python
    return candidates[0]  # oldest available


def emit_requirements(selections: Mapping[str, str]) -> str:
    """Requirements text: ``name<=version`` lines, sorted by name, LF-ended."""
    lines = [f"{normalize_package_name(name)}<={version}" for name, version in selections.items()]
    return "".join(line + "\n" for line in sorted(lines))


_REQ_LINE_RE = re.compile(r"^(?P<name>[A-Za-z0-9][A-Za-z0-9._-]*)(?P<op><=|==)(?P<ver>\S+)$")


def parse_requirements(text: str) -> dict[str, str]:
    """Inverse of emit_requirements (constraint operator is dropped)."""
    out: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        m = _REQ_LINE_RE.match(line)
        if not m:
            raise ValueError(f"unparseable requirement line {line!r}")
        out[normalize_package_name(m.group("name"))] = m.group("ver")
    return out


# --------------------------------------------------------------------------
# orchestration


@dataclass(frozen=True)
class BackportResult:
    environment: EnvironmentSpec
    interpreter_flagged: bool
    unresolved: tuple[str, ...]  # packages missing from the index
    yanked_only: tuple[str, ...]  # packages whose releases are all yanked

    @property
    def ok(self) -> bool:
        return not self.unresolved and not self.yanked_only


def build_environment_spec(
    nb: Notebook,
    submitted_at: datetime,
    index: ReleaseIndex,
    python_table: Optional[list[InterpreterRelease]] = None,
    alias_table: Optional[Mapping[str, str]] = None,
) -> BackportResult:
    """End-to-end backport for one notebook: imports -> interpreter ->
    per-package version pins. Packages that cannot be resolved are reported
    rather than raised so batch callers can flag the notebook and move on.
    """
    deps = extract_dependencies(nb, alias_table)
    major = detect_major(nb)
    choice = infer_interpreter(submitted_at, major, python_table)
    pins: dict[str, str] = {}
    unresolved: list[str] = []
    yanked_only: list[str] = []
    for dep in deps:
        try:
            pins[dep] = select_version(dep, submitted_at, choice.version, index).version
        except PackageUnknown:
            unresolved.append(dep)
        except NoInstallableRelease:
            yanked_only.append(dep)
    reqs = tuple(
        RequirementSpec(name, "at_most", version) for name, version in sorted(pins.items())
    )
    env = EnvironmentSpec(interpreter_version=str(choice), requirements=reqs)
    return BackportResult(
        environment=env,
        interpreter_flagged=choice.flagged,
        unresolved=tuple(unresolved),
        yanked_only=tuple(yanked_only),
    )


def write_install_plan(env: EnvironmentSpec, out_dir: str | Path, stem: str = "environment") -> tuple[Path, Path]:
    """Materialize an environment spec as an interpreter pin (JSON) plus a
    requirements file; shell-agnostic, consumed by the container backend."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    req_path = out_dir / f"{stem}.requirements.txt"
    req_path.write_text(
        emit_requirements({r.package: r.version for r in env.requirements if r.version}),
        encoding="utf-8",
        newline="\n",
    )
    env_path = out_dir / f"{stem}.env.json"
    env_path.write_text(
        json.dumps({"python": env.interpreter_version}, indent=1) + "\n", encoding="utf-8"
    )
    return env_path, req_path
