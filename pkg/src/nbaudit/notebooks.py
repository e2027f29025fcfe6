"""Notebook parsing and structural analysis.

Handles document format v4 (flat cell list) natively and v3 (worksheets)
by conversion.  All functions here are pure: bytes in, records out.
"""

from __future__ import annotations

import ast
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidNotebookError

log = logging.getLogger(__name__)

__all__ = [
    "NotebookDescriptor",
    "CellDescriptor",
    "OutputItem",
    "ImportRecord",
    "NameAnalysis",
    "MarkdownStats",
    "parse_notebook",
    "extract_imports",
    "analyze_name",
    "markdown_stats",
    "notebook_json",
]

KNOWN_LANGUAGES = ("python", "r", "julia", "bash", "matlab")

_KERNEL_HINTS = (
    (re.compile(r"^python|^pypy", re.IGNORECASE), "python"),
    (re.compile(r"^ir(kernel)?$|^r$", re.IGNORECASE), "r"),
    (re.compile(r"^julia", re.IGNORECASE), "julia"),
    (re.compile(r"^bash$", re.IGNORECASE), "bash"),
    (re.compile(r"^(octave|matlab)", re.IGNORECASE), "matlab"),
)

# v3 top-level output keys → mime types
_V3_MIME_KEYS = {
    "text": "text/plain",
    "html": "text/html",
    "svg": "image/svg+xml",
    "png": "image/png",
    "jpeg": "image/jpeg",
    "latex": "text/latex",
    "javascript": "application/javascript",
    "json": "application/json",
}

_WINDOWS_FORBIDDEN = set('<>:"/\\|?*') | {chr(c) for c in range(32)}
_WINDOWS_RESERVED = {"CON", "PRN", "AUX", "NUL"} | {
    f"{base}{n}" for base in ("COM", "LPT") for n in range(1, 10)
}
_POSIX_PORTABLE_RE = re.compile(r"^[A-Za-z0-9._-]+$")


@dataclass
class OutputItem:
    kind: str  # stream | execute_result | display_data | error
    stream_name: str | None = None  # stdout | stderr
    mime_bundle: dict[str, str] = field(default_factory=dict)
    error_name: str | None = None
    error_message: str | None = None
    traceback: str | None = None

    def __post_init__(self):
        if self.kind not in ("stream", "execute_result", "display_data", "error"):
            raise ValueError(f"bad output kind {self.kind!r}")
        if self.kind == "error" and not self.error_name:
            raise ValueError("error output requires error_name")
        if self.kind == "stream" and self.stream_name not in ("stdout", "stderr"):
            raise ValueError("stream output requires stream_name stdout/stderr")

    def to_json(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.stream_name:
            out["stream_name"] = self.stream_name
        if self.mime_bundle:
            out["mime"] = dict(self.mime_bundle)
        if self.error_name:
            out["error_name"] = self.error_name
            out["error_message"] = self.error_message or ""
            out["traceback"] = self.traceback or ""
        return out

    @classmethod
    def from_json(cls, data: dict) -> "OutputItem":
        return cls(
            kind=data["kind"],
            stream_name=data.get("stream_name"),
            mime_bundle=dict(data.get("mime") or {}),
            error_name=data.get("error_name"),
            error_message=data.get("error_message"),
            traceback=data.get("traceback"),
        )


@dataclass
class CellDescriptor:
    index: int
    kind: str  # code | markdown | raw
    source: str = ""
    outputs: list[OutputItem] = field(default_factory=list)
    execution_count: int | None = None

    def __post_init__(self):
        if self.kind not in ("code", "markdown", "raw"):
            raise ValueError(f"bad cell kind {self.kind!r}")
        if self.kind != "code" and self.outputs:
            raise ValueError("only code cells carry outputs")

    @property
    def is_empty(self) -> bool:
        return not self.source.strip()


@dataclass
class NotebookDescriptor:
    relative_path: str
    title: str
    nbformat_major: int
    nbformat_minor: int = 0
    kernel_name: str | None = None
    language: str = "unknown"
    language_version: str | None = None
    total_cells: int = 0
    code_cells: int = 0
    markdown_cells: int = 0
    raw_cells: int = 0
    empty_cells: int = 0
    code_cells_with_output: int = 0
    max_execution_count: int | None = None

    def __post_init__(self):
        if self.total_cells != self.code_cells + self.markdown_cells + self.raw_cells:
            raise ValueError("cell counts do not add up")
        if self.code_cells_with_output > self.code_cells:
            raise ValueError("more cells with output than code cells")
        if self.empty_cells > self.total_cells:
            raise ValueError("more empty cells than cells")


@dataclass
class ImportRecord:
    module: str
    form: str  # import | from_import | load_ext
    locality: str  # local | external

    def __post_init__(self):
        if not self.module:
            raise ValueError("module must be non-empty")
        if self.form not in ("import", "from_import", "load_ext"):
            raise ValueError(f"bad import form {self.form!r}")
        if self.locality not in ("local", "external"):
            raise ValueError(f"bad locality {self.locality!r}")


@dataclass
class NameAnalysis:
    title_length: int
    posix_portable: bool
    windows_valid: bool
    is_untitled: bool
    has_copy: bool
    has_test: bool


@dataclass
class MarkdownStats:
    lines: int = 0
    words: int = 0
    headers: int = 0
    paragraphs: int = 0


# ---------------------------------------------------------------------------
# parsing


def _join_source(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, list):
        return "".join(s for s in value if isinstance(s, str))
    return ""


def _mime_payload(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, list):
        return "".join(s for s in value if isinstance(s, str))
    return json.dumps(value, sort_keys=True)


def _bundle_from_v4(data) -> dict[str, str]:
    if not isinstance(data, dict):
        return {}
    return {str(mime): _mime_payload(payload) for mime, payload in data.items()}


def _bundle_from_v3(output: dict) -> dict[str, str]:
    bundle = {}
    for key, mime in _V3_MIME_KEYS.items():
        if key in output:
            bundle[mime] = _mime_payload(output[key])
    return bundle


def _convert_output(raw, major: int) -> OutputItem | None:
    if not isinstance(raw, dict):
        return None
    otype = raw.get("output_type", "")
    if otype == "stream":
        name = raw.get("name") if major >= 4 else raw.get("stream")
        if name not in ("stdout", "stderr"):
            name = "stdout"
        text = _mime_payload(raw.get("text", ""))
        return OutputItem(kind="stream", stream_name=name,
                          mime_bundle={"text/plain": text})
    if otype in ("execute_result", "pyout"):
        bundle = _bundle_from_v4(raw.get("data")) if major >= 4 else _bundle_from_v3(raw)
        return OutputItem(kind="execute_result", mime_bundle=bundle)
    if otype == "display_data":
        bundle = _bundle_from_v4(raw.get("data")) if major >= 4 else _bundle_from_v3(raw)
        return OutputItem(kind="display_data", mime_bundle=bundle)
    if otype in ("error", "pyerr"):
        tb = raw.get("traceback", [])
        tb_text = "\n".join(tb) if isinstance(tb, list) else str(tb)
        return OutputItem(kind="error",
                          error_name=str(raw.get("ename") or "UnknownError"),
                          error_message=str(raw.get("evalue") or ""),
                          traceback=tb_text)
    return None


def _cell_kind(cell_type: str) -> str:
    if cell_type == "code":
        return "code"
    if cell_type in ("markdown", "heading", "html"):
        return "markdown"
    return "raw"


def _convert_cell(index: int, raw: dict, major: int) -> CellDescriptor:
    kind = _cell_kind(str(raw.get("cell_type", "raw")))
    if major >= 4 or kind != "code":
        source = _join_source(raw.get("source", ""))
    else:
        source = _join_source(raw.get("input", ""))
    outputs: list[OutputItem] = []
    execution_count = None
    if kind == "code":
        for raw_out in raw.get("outputs") or []:
            item = _convert_output(raw_out, major)
            if item is not None:
                outputs.append(item)
        count = raw.get("execution_count") if major >= 4 else raw.get("prompt_number")
        if isinstance(count, int):
            execution_count = count
    return CellDescriptor(index=index, kind=kind, source=source,
                          outputs=outputs, execution_count=execution_count)


def _resolve_language(metadata: dict) -> tuple[str | None, str, str | None]:
    """Return (kernel_name, language, language_version).

    Resolution order: kernelspec.language, then language_info.name (with the
    v3 ``metadata.language`` string as its older spelling), then a heuristic
    match on the kernel name, else "unknown".
    """
    kernelspec = metadata.get("kernelspec") or {}
    language_info = metadata.get("language_info") or {}
    kernel_info = metadata.get("kernel_info") or {}
    kernel_name = kernelspec.get("name") or kernel_info.get("name")

    language = None
    for candidate in (kernelspec.get("language"), language_info.get("name"),
                      metadata.get("language")):
        if isinstance(candidate, str) and candidate.strip():
            language = candidate.strip().lower()
            break
    if language is None and isinstance(kernel_name, str):
        for pattern, lang in _KERNEL_HINTS:
            if pattern.search(kernel_name):
                language = lang
                break
    if language is None:
        language = "unknown"

    version = language_info.get("version")
    if not isinstance(version, str) or not version.strip():
        version = None
    return (kernel_name if isinstance(kernel_name, str) else None, language, version)


def parse_notebook(raw: bytes | str, relative_path: str = "",
                   ) -> tuple[NotebookDescriptor, list[CellDescriptor]]:
    """Parse a notebook document into a descriptor plus its cells.

    Raises :class:`InvalidNotebookError` for malformed JSON, non-notebook
    JSON, or an unsupported major format version (<3 or >4).
    """
    try:
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
        data = json.loads(raw)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InvalidNotebookError(f"not notebook JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise InvalidNotebookError("notebook document must be a JSON object")

    major = data.get("nbformat")
    if not isinstance(major, int):
        raise InvalidNotebookError("missing nbformat version")
    if major < 3 or major > 4:
        raise InvalidNotebookError(f"unsupported nbformat major {major}")
    minor = data.get("nbformat_minor")
    minor = minor if isinstance(minor, int) else 0

    metadata = data.get("metadata") if isinstance(data.get("metadata"), dict) else {}

    raw_cells: list[dict] = []
    if major == 4:
        cells_field = data.get("cells")
        if not isinstance(cells_field, list):
            raise InvalidNotebookError("v4 notebook without a cells list")
        raw_cells = [c for c in cells_field if isinstance(c, dict)]
    else:
        worksheets = data.get("worksheets")
        if not isinstance(worksheets, list):
            raise InvalidNotebookError("v3 notebook without worksheets")
        for sheet in worksheets:
            if isinstance(sheet, dict) and isinstance(sheet.get("cells"), list):
                raw_cells.extend(c for c in sheet["cells"] if isinstance(c, dict))

    cells = [_convert_cell(i, c, major) for i, c in enumerate(raw_cells)]
    kernel_name, language, version = _resolve_language(metadata)

    code = [c for c in cells if c.kind == "code"]
    exec_counts = [c.execution_count for c in code
                   if c.execution_count is not None and c.execution_count >= 0]
    title = Path(relative_path).name
    title = title[: -len(".ipynb")] if title.endswith(".ipynb") else title

    descriptor = NotebookDescriptor(
        relative_path=relative_path,
        title=title,
        nbformat_major=major,
        nbformat_minor=minor,
        kernel_name=kernel_name,
        language=language,
        language_version=version,
        total_cells=len(cells),
        code_cells=len(code),
        markdown_cells=sum(1 for c in cells if c.kind == "markdown"),
        raw_cells=sum(1 for c in cells if c.kind == "raw"),
        empty_cells=sum(1 for c in cells if c.is_empty),
        code_cells_with_output=sum(1 for c in code if c.outputs),
        max_execution_count=max(exec_counts) if exec_counts else None,
    )
    return descriptor, cells


def notebook_json(cells: list[CellDescriptor], language: str = "python",
                  language_version: str | None = None, kernel_name: str = "python3",
                  ) -> dict:
    """Build a v4 notebook document from cell descriptors (fixtures, round trips)."""
    nb_cells = []
    for cell in cells:
        raw: dict = {"cell_type": cell.kind, "metadata": {}, "source": cell.source}
        if cell.kind == "code":
            raw["execution_count"] = cell.execution_count
            raw["outputs"] = []
            for item in cell.outputs:
                if item.kind == "stream":
                    raw["outputs"].append({
                        "output_type": "stream", "name": item.stream_name,
                        "text": item.mime_bundle.get("text/plain", ""),
                    })
                elif item.kind == "error":
                    raw["outputs"].append({
                        "output_type": "error", "ename": item.error_name,
                        "evalue": item.error_message or "",
                        "traceback": (item.traceback or "").split("\n"),
                    })
                else:
                    out: dict = {"output_type": item.kind,
                                 "data": dict(item.mime_bundle), "metadata": {}}
                    if item.kind == "execute_result":
                        out["execution_count"] = cell.execution_count
                    raw["outputs"].append(out)
        nb_cells.append(raw)
    info: dict = {"name": language}
    if language_version:
        info["version"] = language_version
    return {
        "nbformat": 4,
        "nbformat_minor": 5,
        "metadata": {
            "kernelspec": {"name": kernel_name, "language": language,
                           "display_name": kernel_name},
            "language_info": info,
        },
        "cells": nb_cells,
    }


# ---------------------------------------------------------------------------
# imports


_LOAD_EXT_RE = re.compile(r"^\s*%load_ext\s+([A-Za-z_][A-Za-z0-9_.]*)")


def strip_noncode_lines(source: str) -> str | None:
    """Remove interactive-shell syntax so the remainder parses as plain code.

    Line magics (``%...``) and shell escapes (``!...``) become blank lines,
    which keeps line numbers stable.  Returns None when the cell opens with a
    cell magic (``%%``): the body then belongs to another language entirely.
    """
    lines = source.splitlines()
    for line in lines:
        if not line.strip():
            continue
        if line.lstrip().startswith("%%"):
            return None
        break
    cleaned = []
    for line in lines:
        stripped = line.lstrip()
        if stripped.startswith(("%", "!")):
            cleaned.append("")
        else:
            cleaned.append(line)
    return "\n".join(cleaned)


def _module_exists_under(root: Path, module: str) -> bool:
    candidate = root / module
    return (root / f"{module}.py").is_file() or candidate.is_dir()


def extract_imports(cells: list[CellDescriptor], repo_root: str | Path,
                    notebook_dir: str | Path | None = None,
                    ) -> tuple[list[ImportRecord], int]:
    """Collect import statements and load-extension magics from code cells.

    Returns (records, parse_skipped_cells).  Locality is ``local`` when the
    import is relative or its top-level module resolves to a file/directory
    at the repository root or next to the notebook.
    """
    repo_root = Path(repo_root)
    nb_dir = Path(notebook_dir) if notebook_dir is not None else repo_root

    def locality_of(module: str) -> str:
        top = module.split(".", 1)[0]
        if _module_exists_under(repo_root, top) or _module_exists_under(nb_dir, top):
            return "local"
        return "external"

    records: list[ImportRecord] = []
    seen: set[tuple[str, str]] = set()
    skipped = 0

    def add(module: str, form: str, locality: str) -> None:
        key = (module, form)
        if key in seen:
            return
        seen.add(key)
        records.append(ImportRecord(module=module, form=form, locality=locality))

    for cell in cells:
        if cell.kind != "code" or cell.is_empty:
            continue
        for match in _LOAD_EXT_RE.finditer(cell.source):
            module = match.group(1)
            add(module, "load_ext", locality_of(module))
        cleaned = strip_noncode_lines(cell.source)
        if cleaned is None:
            continue
        try:
            tree = ast.parse(cleaned)
        except (SyntaxError, ValueError):
            skipped += 1
            continue
        for node in ast.walk(tree):
            if isinstance(node, ast.Import):
                for alias in node.names:
                    top = alias.name.split(".", 1)[0]
                    add(top, "import", locality_of(top))
            elif isinstance(node, ast.ImportFrom):
                if node.level and node.level > 0:
                    # relative: local by definition
                    if node.module:
                        add(node.module.split(".", 1)[0], "from_import", "local")
                    else:
                        for alias in node.names:
                            add(alias.name.split(".", 1)[0], "from_import", "local")
                elif node.module:
                    top = node.module.split(".", 1)[0]
                    add(top, "from_import", locality_of(top))
    return records, skipped


# ---------------------------------------------------------------------------
# naming and markdown


def analyze_name(title: str) -> NameAnalysis:
    """Portability and naming-convention analysis of a notebook title.

    The title is the filename without its extension.  ``has_copy`` looks for
    the literal "Copy" token the notebook UI appends when duplicating files;
    ``has_test`` is case-insensitive.
    """
    if not title:
        raise ValueError("title must be non-empty")
    posix = bool(_POSIX_PORTABLE_RE.match(title)) and not title.startswith("-")
    windows = not (
        any(ch in _WINDOWS_FORBIDDEN for ch in title)
        or title.rstrip(" .") != title
        or title.upper() in _WINDOWS_RESERVED
    )
    return NameAnalysis(
        title_length=len(title),
        posix_portable=posix,
        windows_valid=windows,
        is_untitled=title.startswith("Untitled"),
        has_copy="Copy" in title,
        has_test="test" in title.lower(),
    )


def markdown_stats(cells: list[CellDescriptor]) -> MarkdownStats:
    """Aggregate line/word/header/paragraph counts over markdown cells."""
    stats = MarkdownStats()
    for cell in cells:
        if cell.kind != "markdown":
            continue
        lines = cell.source.splitlines()
        stats.lines += len(lines)
        stats.words += len(cell.source.split())
        stats.headers += sum(1 for line in lines if line.lstrip().startswith("#"))
        in_block = False
        for line in lines:
            if line.strip():
                if not in_block:
                    stats.paragraphs += 1
                in_block = True
            else:
                in_block = False
    return stats
