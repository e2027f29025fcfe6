"""Dependency parsing and per-notebook environment construction.

Reads the three dependency-declaration formats found in harvested repos
(requirements.txt, setup.py, Pipfile), plans one isolated environment per
notebook (declared Python version + union of declared packages, or a pinned
default scientific stack when nothing is declared), and builds/caches the
environment under ``cache/<env_id>/``.

Builds are serialized per env_id; distinct env_ids may build concurrently.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import shutil
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .errors import MissingToolError, UnparseableDepsError
from .harvest import DependencyFileSet
from .notebooks import NotebookDescriptor

log = logging.getLogger(__name__)

SOURCE_FILES = ("requirements", "setup", "pipfile")
VERSION_OPERATORS = ("==", ">=", "<=", "~=", "!=", ">", "<")  # longest first
FAILURE_REASONS = ("resolution", "network", "timeout", "other")

_NAME_RE = re.compile(r"[A-Za-z0-9](?:[A-Za-z0-9._-]*[A-Za-z0-9])?")
_VERSION_RE = re.compile(r"[A-Za-z0-9.*+!_-]+")
_EGG_RE = re.compile(r"[#&]egg=([A-Za-z0-9._-]+)")
_VCS_PREFIXES = ("git+", "hg+", "svn+", "bzr+")
_URL_PREFIXES = ("http://", "https://", "ftp://", "file://", "git://", "ssh://")

_RESOLUTION_PATTERNS = re.compile(
    r"no matching distribution"
    r"|could not find a version"
    r"|resolutionimpossible"
    r"|packagesnotfounderror"
    r"|conflicting dependencies"
    r"|invalid requirement"
    r"|unsatisfiable", re.I)
_NETWORK_PATTERNS = re.compile(
    r"could not resolve host"
    r"|temporary failure in name resolution"
    r"|connection (?:refused|reset|timed out)"
    r"|network is unreachable"
    r"|connecttimeout|readtimeout"
    r"|proxyerror"
    r"|failed to establish a new connection", re.I)


@dataclass
class DependencySpec:
    """One declared package requirement.

    ``name`` is normalized (lowercase, runs of ``-_.`` folded to ``-``);
    ``raw`` keeps the source line for rendering and for unresolvable entries
    (editable installs, VCS/URL/path references, unparseable lines).
    """

    name: str
    extras: list[str] = field(default_factory=list)
    version_constraints: list[tuple[str, str]] = field(default_factory=list)
    environment_marker: str | None = None
    source_file: str = "requirements"
    resolvable: bool = True
    raw: str = ""

    def __post_init__(self):
        if not self.name:
            raise ValueError("dependency name must be non-empty")
        if self.source_file not in SOURCE_FILES:
            raise ValueError(f"unknown source_file {self.source_file!r}")
        for op, _version in self.version_constraints:
            if op not in VERSION_OPERATORS:
                raise ValueError(f"unsupported version operator {op!r}")

    def requirement_line(self) -> str:
        """Canonical single-line form (the raw line for unresolvable specs)."""
        if not self.resolvable:
            return self.raw
        out = self.name
        if self.extras:
            out += "[" + ",".join(self.extras) + "]"
        if self.version_constraints:
            out += ",".join(op + ver for op, ver in self.version_constraints)
        if self.environment_marker:
            out += " ; " + self.environment_marker
        return out


@dataclass
class EnvironmentPlan:
    notebook: str  # repo-relative notebook path (or owner/name:path reference)
    python_version: str
    deps: list[DependencySpec] = field(default_factory=list)
    fallback_default_stack: bool = False
    env_id: str = ""
    notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.env_id:
            self.env_id = compute_env_id(self.python_version, self.deps)


@dataclass
class InstallResult:
    plan: EnvironmentPlan
    success: bool
    log: str
    duration_seconds: float
    reason: str | None = None  # resolution | network | timeout | other
    env_path: str | None = None

    def __post_init__(self):
        if not self.success and not self.log:
            raise ValueError("failed install must carry a log")
        if self.reason is not None and self.reason not in FAILURE_REASONS:
            raise ValueError(f"unknown failure reason {self.reason!r}")
        if self.duration_seconds < 0:
            raise ValueError("duration_seconds must be nonnegative")


def normalize_package_name(name: str) -> str:
    """Fold case and separator runs: ``My_Pkg.Name`` → ``my-pkg-name``."""
    return re.sub(r"[-_.]+", "-", name).lower()


def compute_env_id(python_version: str, deps: list[DependencySpec]) -> str:
    """Content hash of (python version, sorted canonical dep lines).

    Pure function of its inputs; permuting ``deps`` never changes the result.
    """
    lines = sorted(spec.requirement_line() for spec in deps)
    payload = python_version + "\n" + "\n".join(lines)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# requirements.txt


def _strip_comment(line: str) -> str:
    """Drop ``#`` comments (full-line, or inline when preceded by space)."""
    if line.lstrip().startswith("#"):
        return ""
    pos = 0
    while True:
        pos = line.find("#", pos)
        if pos < 0:
            return line
        if pos == 0 or line[pos - 1] in " \t":
            return line[:pos]
        pos += 1


def _unresolvable_name(line: str) -> str:
    """Best-effort display name for a non-index requirement line."""
    egg = _EGG_RE.search(line)
    if egg:
        return normalize_package_name(egg.group(1))
    target = line.split()[-1] if line.split() else line
    target = target.split("#", 1)[0].split("?", 1)[0].rstrip("/")
    tail = target.rsplit("/", 1)[-1]
    if tail.endswith(".git"):
        tail = tail[:-4]
    candidate = re.sub(r"[^A-Za-z0-9._-]+", "-", tail).strip("-_.")
    return normalize_package_name(candidate) if candidate else "unresolved"


def _parse_requirement_line(line: str, source_file: str) -> DependencySpec:
    """Parse one PEP-508-style line; fall back to an unresolvable spec."""
    parsed = _try_parse_pep508(line, source_file)
    if parsed is not None:
        return parsed
    return DependencySpec(name=_unresolvable_name(line), source_file=source_file,
                          resolvable=False, raw=line)


def _try_parse_pep508(line: str, source_file: str) -> DependencySpec | None:
    text = line.strip()
    marker = None
    if ";" in text:
        text, _, marker_text = text.partition(";")
        marker = marker_text.strip() or None
        text = text.strip()

    match = _NAME_RE.match(text)
    if not match:
        return None
    name = match.group(0)
    rest = text[match.end():].lstrip()

    extras: list[str] = []
    if rest.startswith("["):
        close = rest.find("]")
        if close < 0:
            return None
        inner = rest[1:close]
        for part in inner.split(","):
            part = part.strip()
            if not part:
                continue
            if not _NAME_RE.fullmatch(part):
                return None
            extras.append(part)
        rest = rest[close + 1:].lstrip()

    parenthesized = rest.startswith("(")
    if parenthesized:
        if not rest.endswith(")"):
            return None
        rest = rest[1:-1].strip()

    constraints: list[tuple[str, str]] = []
    if rest:
        for clause in rest.split(","):
            clause = clause.strip()
            if not clause:
                return None
            op = next((o for o in VERSION_OPERATORS if clause.startswith(o)), None)
            if op is None:
                return None
            version = clause[len(op):].strip()
            if not version or not _VERSION_RE.fullmatch(version):
                return None
            constraints.append((op, version))

    return DependencySpec(
        name=normalize_package_name(name), extras=extras,
        version_constraints=constraints, environment_marker=marker,
        source_file=source_file, raw=line.strip())


def _logical_requirement_lines(text: str):
    """Physical lines joined on trailing backslash, comments stripped."""
    pending = ""
    for raw in text.splitlines():
        line = pending + raw
        pending = ""
        stripped = _strip_comment(line)
        if stripped.rstrip().endswith("\\"):
            pending = stripped.rstrip()[:-1]
            continue
        yield stripped.strip()
    if pending.strip():
        yield pending.strip()


def parse_requirements(text: str, base_dir: str | os.PathLike | None = None,
                       source_file: str = "requirements",
                       _seen: set[str] | None = None) -> list[DependencySpec]:
    """Parse requirements-format text into dependency specs.

    Comments and blank lines are skipped; ``-r other.txt`` includes are read
    relative to ``base_dir`` (cycle-safe); editable/VCS/URL/path lines and
    anything outside the supported grammar become unresolvable specs that
    keep their raw line.
    """
    if _seen is None:
        _seen = set()
    specs: list[DependencySpec] = []

    for line in _logical_requirement_lines(text):
        if not line:
            continue

        lowered = line.lower()
        include = None
        if lowered.startswith(("-r ", "-r=")):
            include = line[3:].strip()
        elif lowered.startswith(("--requirement ", "--requirement=")):
            include = line[len("--requirement"):].lstrip(" =").strip()
        if include is not None:
            if base_dir is None:
                specs.append(DependencySpec(
                    name=_unresolvable_name(include) or "unresolved",
                    source_file=source_file, resolvable=False, raw=line))
                continue
            target = (Path(base_dir) / include).resolve()
            key = str(target)
            if key in _seen:
                continue
            _seen.add(key)
            try:
                nested = target.read_text(encoding="utf-8")
            except OSError:
                specs.append(DependencySpec(
                    name=_unresolvable_name(include) or "unresolved",
                    source_file=source_file, resolvable=False, raw=line))
                continue
            specs.extend(parse_requirements(nested, base_dir=target.parent,
                                            source_file=source_file, _seen=_seen))
            continue

        if lowered.startswith(("-e ", "-e=", "--editable ", "--editable=")):
            specs.append(DependencySpec(
                name=_unresolvable_name(line.split(None, 1)[-1]),
                source_file=source_file, resolvable=False, raw=line))
            continue
        if line.startswith("-"):
            # installer option (index URLs, hash modes, …): not a dependency
            continue
        if lowered.startswith(_VCS_PREFIXES + _URL_PREFIXES) or \
                line.startswith(("./", "../", "/", "~")):
            specs.append(DependencySpec(
                name=_unresolvable_name(line), source_file=source_file,
                resolvable=False, raw=line))
            continue

        specs.append(_parse_requirement_line(line, source_file))
    return specs


def render(specs: list[DependencySpec]) -> str:
    """Render specs back to requirements text (parse∘render is stable)."""
    return "".join(spec.requirement_line() + "\n" for spec in specs)


# ---------------------------------------------------------------------------
# setup.py (static extraction only — never executed)


def extract_setup_deps(setup_source: str) -> list[DependencySpec] | None:
    """Statically extract install_requires / extras_require string literals.

    Returns None (unparseable) when the file doesn't parse or when either
    argument is built dynamically — the file is never executed.
    """
    import ast

    try:
        tree = ast.parse(setup_source)
    except (SyntaxError, ValueError):
        return None

    def literal_str_list(node) -> list[str] | None:
        if not isinstance(node, (ast.List, ast.Tuple)):
            return None
        out = []
        for item in node.elts:
            if isinstance(item, ast.Constant) and isinstance(item.value, str):
                out.append(item.value)
            else:
                return None
        return out

    setup_calls = [
        node for node in ast.walk(tree)
        if isinstance(node, ast.Call) and (
            (isinstance(node.func, ast.Name) and node.func.id == "setup") or
            (isinstance(node.func, ast.Attribute) and node.func.attr == "setup"))
    ]

    lines: list[str] = []
    found_any_kwarg = False
    for call in setup_calls:
        for kw in call.keywords:
            if kw.arg == "install_requires":
                found_any_kwarg = True
                values = literal_str_list(kw.value)
                if values is None:
                    return None
                lines.extend(values)
            elif kw.arg == "extras_require":
                found_any_kwarg = True
                if not isinstance(kw.value, ast.Dict):
                    return None
                for value in kw.value.values:
                    values = literal_str_list(value)
                    if values is None:
                        return None
                    lines.extend(values)
    if not found_any_kwarg:
        return []
    return [_parse_requirement_line(line.strip(), "setup")
            for line in lines if line.strip()]


# ---------------------------------------------------------------------------
# Pipfile (minimal TOML subset: sections, string/inline-table/array values)


def _skip_ws(text: str, i: int) -> int:
    while i < len(text) and text[i] in " \t":
        i += 1
    return i


def _read_string(text: str, i: int) -> tuple[str, int]:
    quote = text[i]
    i += 1
    out = []
    while i < len(text):
        ch = text[i]
        if ch == quote:
            return "".join(out), i + 1
        if ch == "\\" and quote == '"' and i + 1 < len(text):
            esc = text[i + 1]
            out.append({"n": "\n", "t": "\t", '"': '"', "\\": "\\"}.get(esc, esc))
            i += 2
            continue
        out.append(ch)
        i += 1
    raise UnparseableDepsError("unterminated string in Pipfile")


def _read_value(text: str, i: int):
    i = _skip_ws(text, i)
    if i >= len(text):
        raise UnparseableDepsError("missing value in Pipfile")
    ch = text[i]
    if ch in "\"'":
        return _read_string(text, i)
    if ch == "[":
        items = []
        i += 1
        while True:
            i = _skip_ws(text, i)
            if i >= len(text):
                raise UnparseableDepsError("unterminated array in Pipfile")
            if text[i] == "]":
                return items, i + 1
            value, i = _read_value(text, i)
            items.append(value)
            i = _skip_ws(text, i)
            if i < len(text) and text[i] == ",":
                i += 1
    if ch == "{":
        table = {}
        i += 1
        while True:
            i = _skip_ws(text, i)
            if i >= len(text):
                raise UnparseableDepsError("unterminated inline table in Pipfile")
            if text[i] == "}":
                return table, i + 1
            key, i = _read_key(text, i)
            i = _skip_ws(text, i)
            if i >= len(text) or text[i] != "=":
                raise UnparseableDepsError("malformed inline table in Pipfile")
            value, i = _read_value(text, i + 1)
            table[key] = value
            i = _skip_ws(text, i)
            if i < len(text) and text[i] == ",":
                i += 1
    # bareword (true/false/number); taken verbatim
    j = i
    while j < len(text) and text[j] not in " \t,}]#":
        j += 1
    if j == i:
        raise UnparseableDepsError(f"malformed value near {text[i:i+10]!r}")
    return text[i:j], j


def _read_key(text: str, i: int) -> tuple[str, int]:
    i = _skip_ws(text, i)
    if i < len(text) and text[i] in "\"'":
        return _read_string(text, i)
    j = i
    while j < len(text) and (text[j].isalnum() or text[j] in "._-"):
        j += 1
    if j == i:
        raise UnparseableDepsError(f"malformed key near {text[i:i+10]!r}")
    return text[i:j], j


def _parse_toml_subset(text: str) -> dict[str, dict]:
    """Sections of key = value pairs; values: string, array, inline table."""
    sections: dict[str, dict] = {}
    current: dict | None = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise UnparseableDepsError(f"malformed section header {line!r}")
            name = line[1:-1].strip().strip('"').strip("'")
            if not name:
                raise UnparseableDepsError("empty section name in Pipfile")
            current = sections.setdefault(name, {})
            continue
        if current is None:
            raise UnparseableDepsError(f"key outside any section: {line!r}")
        key, i = _read_key(line, 0)
        i = _skip_ws(line, i)
        if i >= len(line) or line[i] != "=":
            raise UnparseableDepsError(f"expected '=' in line {line!r}")
        value, i = _read_value(line, i + 1)
        i = _skip_ws(line, i)
        if i < len(line) and line[i] != "#":
            raise UnparseableDepsError(f"trailing content in line {line!r}")
        current[key] = value
    return sections


def parse_pipfile(text: str) -> list[DependencySpec]:
    """Extract [packages] and [dev-packages] entries.

    Raises UnparseableDepsError on TOML syntax errors (callers record the
    file as unparseable rather than crashing).
    """
    sections = _parse_toml_subset(text)
    specs: list[DependencySpec] = []
    for section in ("packages", "dev-packages"):
        for key, value in sections.get(section, {}).items():
            name = normalize_package_name(key)
            raw = f"{key} = {value!r}"
            if isinstance(value, str):
                if value == "*" or not value:
                    specs.append(DependencySpec(name=name, source_file="pipfile",
                                                raw=raw))
                else:
                    parsed = _try_parse_pep508(name + value, "pipfile")
                    if parsed is None:
                        specs.append(DependencySpec(name=name, source_file="pipfile",
                                                    resolvable=False, raw=raw))
                    else:
                        parsed.raw = raw
                        specs.append(parsed)
            elif isinstance(value, dict):
                if any(k in value for k in ("git", "hg", "svn", "bzr", "path",
                                            "file", "editable")):
                    specs.append(DependencySpec(name=name, source_file="pipfile",
                                                resolvable=False, raw=raw))
                    continue
                extras = [e for e in value.get("extras", [])
                          if isinstance(e, str)]
                version = value.get("version")
                constraints: list[tuple[str, str]] = []
                if isinstance(version, str) and version not in ("*", ""):
                    parsed = _try_parse_pep508(name + version, "pipfile")
                    if parsed is None:
                        specs.append(DependencySpec(
                            name=name, extras=extras, source_file="pipfile",
                            resolvable=False, raw=raw))
                        continue
                    constraints = parsed.version_constraints
                specs.append(DependencySpec(name=name, extras=extras,
                                            version_constraints=constraints,
                                            source_file="pipfile", raw=raw))
            else:
                specs.append(DependencySpec(name=name, source_file="pipfile",
                                            resolvable=False, raw=raw))
    return specs


# ---------------------------------------------------------------------------
# planning


def _nearest(paths: list[str], basename: str) -> str | None:
    for path in paths:  # already sorted by (depth, name)
        name = path.rsplit("/", 1)[-1].lower()
        if name == basename:
            return path
    return None


def read_dependency_sources(dep_files: DependencyFileSet | None,
                            repo_root: str | os.PathLike | None,
                            ) -> tuple[dict[str, list[DependencySpec] | None], list[str]]:
    """Parse the nearest-to-root dependency file of each kind.

    Returns ({source: specs-or-None}, notes); None marks a file that exists
    but could not be parsed.  Sources with no file are absent from the map.
    """
    parsed: dict[str, list[DependencySpec] | None] = {}
    notes: list[str] = []
    if dep_files is None or repo_root is None:
        return parsed, notes
    root = Path(repo_root)

    req_path = _nearest(dep_files.paths, "requirements.txt")
    if req_path is not None:
        try:
            text = (root / req_path).read_text(encoding="utf-8", errors="replace")
            parsed["requirements"] = parse_requirements(
                text, base_dir=(root / req_path).parent)
        except OSError as exc:
            parsed["requirements"] = None
            notes.append(f"requirements unreadable: {exc}")

    setup_path = _nearest(dep_files.paths, "setup.py")
    if setup_path is not None:
        try:
            text = (root / setup_path).read_text(encoding="utf-8", errors="replace")
            specs = extract_setup_deps(text)
            parsed["setup"] = specs
            if specs is None:
                notes.append(f"setup extraction dynamic/unparseable: {setup_path}")
        except OSError as exc:
            parsed["setup"] = None
            notes.append(f"setup unreadable: {exc}")

    pipfile_path = _nearest(dep_files.paths, "pipfile")
    if pipfile_path is not None:
        try:
            text = (root / pipfile_path).read_text(encoding="utf-8", errors="replace")
            parsed["pipfile"] = parse_pipfile(text)
        except UnparseableDepsError as exc:
            parsed["pipfile"] = None
            notes.append(f"pipfile unparseable: {exc}")
        except OSError as exc:
            parsed["pipfile"] = None
            notes.append(f"pipfile unreadable: {exc}")
    return parsed, notes


def resolve_python_version(declared: str | None, default_python: str = "3.6") -> str:
    """Declared version when usable; 2.7.18 for bare major 2; else default."""
    if not declared:
        return default_python
    version = declared.strip()
    parts = version.split(".")
    if not all(re.fullmatch(r"\d+", p) for p in parts if p) or not parts[0]:
        return default_python
    if parts[0] == "2":
        return version if len(parts) >= 2 else "2.7.18"
    if parts[0] == "3":
        return version if len(parts) >= 2 else default_python
    return default_python


def plan_environment(nb: NotebookDescriptor,
                     parsed_sources: dict[str, list[DependencySpec] | None],
                     default_python: str = "3.6",
                     default_stack: list[DependencySpec] | None = None,
                     extra_notes: list[str] | None = None) -> EnvironmentPlan:
    """Union declared deps (requirements > setup > pipfile on conflicts).

    Falls back to the pinned default stack only when no dependency file
    parsed successfully.
    """
    notes = list(extra_notes or [])
    merged: dict[str, DependencySpec] = {}
    any_parsed = False
    for source in SOURCE_FILES:
        specs = parsed_sources.get(source)
        if specs is None:
            continue
        any_parsed = True
        for spec in specs:
            key = spec.name if spec.resolvable else f"raw:{spec.raw}"
            existing = merged.get(key)
            if existing is None:
                merged[key] = spec
            elif (existing.version_constraints != spec.version_constraints
                    and spec.resolvable):
                notes.append(
                    f"version conflict for {spec.name}: kept "
                    f"{existing.source_file} {existing.version_constraints}, "
                    f"ignored {spec.source_file} {spec.version_constraints}")

    python_version = resolve_python_version(nb.language_version, default_python)

    if any_parsed:
        deps = list(merged.values())
        fallback = False
    else:
        deps = list(default_stack or [])
        fallback = True
        notes.append("no dependency declaration parsed; default stack used")

    return EnvironmentPlan(
        notebook=nb.relative_path or nb.title,
        python_version=python_version,
        deps=deps,
        fallback_default_stack=fallback,
        notes=notes)


def load_default_stack(manifest_path: str | os.PathLike | None = None,
                       ) -> list[DependencySpec]:
    """Read the pinned default-stack manifest (requirements format)."""
    if manifest_path:
        text = Path(manifest_path).read_text(encoding="utf-8")
    else:
        from importlib import resources
        text = (resources.files("nbaudit") / "data" / "default_stack.txt"
                ).read_text(encoding="utf-8")
    return parse_requirements(text)


# ---------------------------------------------------------------------------
# building


class VenvManager:
    """Builds environments with the running interpreter's venv machinery.

    Installs packages with pip inside the created environment.  The created
    environment always runs the orchestrator's own interpreter version; when
    a plan asks for a different one, a note goes into the build log (this
    manager targets sandboxed test runs; the conda-compatible manager below
    honors versions).
    """

    name = "venv"

    def __init__(self, base_python: str | None = None):
        self.base_python = base_python or sys.executable

    def available(self) -> bool:
        return bool(self.base_python and os.path.exists(self.base_python))

    def create_args(self, env_path: Path, python_version: str) -> list[str]:
        return [self.base_python, "-m", "venv", str(env_path)]

    def install_args(self, env_path: Path, lines: list[str]) -> list[str]:
        pip = env_path / "bin" / "pip"
        return [str(pip), "install", "--no-input", "--disable-pip-version-check",
                "--quiet", *lines]

    def python_path(self, env_path: Path) -> Path:
        return env_path / "bin" / "python"


class CondaManager:
    """Drives a conda-compatible CLI (conda/mamba/micromamba).

    create: <tool> create -p <env> python=<version> -y -q
    install: <env>/bin/python -m pip install <lines>
    """

    name = "conda"

    def __init__(self, tool: str = "conda"):
        self.tool = tool

    def available(self) -> bool:
        return shutil.which(self.tool) is not None

    def create_args(self, env_path: Path, python_version: str) -> list[str]:
        return [self.tool, "create", "-p", str(env_path),
                f"python={python_version}", "-y", "-q"]

    def install_args(self, env_path: Path, lines: list[str]) -> list[str]:
        python = self.python_path(env_path)
        return [str(python), "-m", "pip", "install", "--no-input", *lines]

    def python_path(self, env_path: Path) -> Path:
        return env_path / "bin" / "python"


def get_env_manager(kind: str, conda_tool: str = "conda",
                    base_python: str | None = None):
    if kind == "venv":
        manager = VenvManager(base_python=base_python)
    elif kind == "conda":
        manager = CondaManager(tool=conda_tool)
    else:
        raise MissingToolError(f"unknown environment manager {kind!r}")
    if not manager.available():
        raise MissingToolError(
            f"environment manager {kind!r} not available "
            f"(looked for {getattr(manager, 'tool', manager.name)!r})")
    return manager


_ENV_LOCKS: dict[str, threading.Lock] = {}
_ENV_LOCKS_GUARD = threading.Lock()

MARKER_NAME = ".env-ready.json"


def _env_lock(env_id: str) -> threading.Lock:
    with _ENV_LOCKS_GUARD:
        lock = _ENV_LOCKS.get(env_id)
        if lock is None:
            lock = _ENV_LOCKS[env_id] = threading.Lock()
        return lock


def classify_install_failure(log_text: str, timed_out: bool) -> str:
    if timed_out:
        return "timeout"
    if _RESOLUTION_PATTERNS.search(log_text):
        return "resolution"
    if _NETWORK_PATTERNS.search(log_text):
        return "network"
    return "other"


def install_environment(plan: EnvironmentPlan, manager, cache: str | os.PathLike,
                        timeout_seconds: float = 1200.0) -> InstallResult:
    """Build (or reuse) the environment for ``plan`` under cache/<env_id>/.

    Serialized per env_id; a ready-marker file makes reuse cheap and
    crash-safe (a partially built env has no marker and is rebuilt).
    """
    cache_dir = Path(cache)
    env_path = cache_dir / plan.env_id
    marker = env_path / MARKER_NAME
    start = time.monotonic()

    with _env_lock(plan.env_id):
        if marker.exists():
            return InstallResult(
                plan=plan, success=True,
                log=f"reused cached environment {plan.env_id}",
                duration_seconds=time.monotonic() - start,
                env_path=str(env_path))

        if env_path.exists():
            shutil.rmtree(env_path, ignore_errors=True)
        cache_dir.mkdir(parents=True, exist_ok=True)

        log_parts: list[str] = []
        deadline = start + timeout_seconds

        def run_step(args: list[str]) -> tuple[bool, bool]:
            """Returns (ok, timed_out); appends combined output to the log."""
            remaining = deadline - time.monotonic()
            log_parts.append("$ " + " ".join(args))
            if remaining <= 0:
                log_parts.append("build timeout exhausted before step")
                return False, True
            try:
                proc = subprocess.run(
                    args, capture_output=True, text=True, timeout=remaining,
                    env={**os.environ, "PIP_NO_INPUT": "1"})
            except subprocess.TimeoutExpired as exc:
                for stream in (exc.stdout, exc.stderr):
                    if stream:
                        text = stream.decode("utf-8", "replace") \
                            if isinstance(stream, bytes) else stream
                        log_parts.append(text)
                log_parts.append(f"timed out after {timeout_seconds:.0f}s")
                return False, True
            except OSError as exc:
                log_parts.append(f"failed to launch: {exc}")
                return False, False
            if proc.stdout:
                log_parts.append(proc.stdout)
            if proc.stderr:
                log_parts.append(proc.stderr)
            if proc.returncode != 0:
                log_parts.append(f"exit code {proc.returncode}")
                return False, False
            return True, False

        ok, timed_out = run_step(manager.create_args(env_path, plan.python_version))

        install_lines = [s.requirement_line() for s in plan.deps if s.resolvable]
        skipped = [s.raw for s in plan.deps if not s.resolvable]
        if skipped:
            log_parts.append("skipped unresolvable requirement lines:")
            log_parts.extend("  " + line for line in skipped)
        if ok and install_lines:
            ok, timed_out = run_step(manager.install_args(env_path, install_lines))

        duration = time.monotonic() - start
        log_text = "\n".join(log_parts)

        try:
            env_path.mkdir(parents=True, exist_ok=True)
            (env_path / "build.log").write_text(log_text, encoding="utf-8")
        except OSError:
            log.warning("could not write build log under %s", env_path)

        if not ok:
            return InstallResult(
                plan=plan, success=False, log=log_text or "build failed",
                duration_seconds=duration,
                reason=classify_install_failure(log_text, timed_out),
                env_path=None)

        # write-then-rename: a crash can never leave a partial marker behind
        marker_tmp = marker.with_name(MARKER_NAME + ".tmp")
        marker_tmp.write_text(json.dumps({
            "env_id": plan.env_id,
            "python_version": plan.python_version,
            "deps": sorted(s.requirement_line() for s in plan.deps),
        }, indent=2), encoding="utf-8")
        marker_tmp.replace(marker)
        return InstallResult(plan=plan, success=True, log=log_text or "created",
                             duration_seconds=duration, env_path=str(env_path))
