"""Output normalization, structural diffing, and outcome classification.

Stored outputs from the original notebook are compared against the rerun's
outputs cell-by-cell (position-aligned — re-execution never adds or removes
cells).  Volatile content (memory addresses, timestamps, ANSI color codes,
trailing whitespace) is normalized away first so the different/identical
split reflects substance, not noise.
"""

from __future__ import annotations

import base64
import re
from dataclasses import dataclass, field

from .errors import InconsistentStageDataError
from .notebooks import CellDescriptor, OutputItem
from .envs import InstallResult
from .execution import CellResult, ExecutionRecord

DIFF_KINDS = ("output_added", "output_removed", "output_changed",
              "output_count_changed", "error_vs_output")

OUTCOME_CLASSES = ("not_attempted", "install_failed", "exception", "timeout",
                   "kernel_start_failure", "success_different",
                   "success_identical")

_DEFAULT_VOLATILE = (
    # memory addresses in reprs; ADDR contains a non-hex letter so the
    # replacement can never re-match (idempotence)
    (r"\b0x[0-9a-fA-F]+\b", "0xADDR"),
    # ANSI escape sequences (color codes in tracebacks)
    (r"\x1b\[[0-9;]*[A-Za-z]", ""),
    # ISO-8601 timestamps with a time component
    (r"\d{4}-\d{2}-\d{2}[T ]\d{2}:\d{2}:\d{2}(?:\.\d+)?"
     r"(?:Z|[+-]\d{2}:?\d{2})?", "TIMESTAMP"),
)

_TEXT_MIME_PREFIXES = ("text/",)
_TEXT_MIMES = {"application/json", "application/javascript",
               "image/svg+xml", "text/plain", "text/html", "text/latex"}


def _is_text_mime(mime: str) -> bool:
    return mime in _TEXT_MIMES or mime.startswith(_TEXT_MIME_PREFIXES)


@dataclass
class NormalizationRules:
    strip_execution_counts: bool = True
    volatile_patterns: list[tuple[str, str]] = field(
        default_factory=lambda: list(_DEFAULT_VOLATILE))
    coalesce_streams: bool = True
    image_compare: str = "exact_bytes"
    trailing_whitespace_insensitive: bool = True

    def __post_init__(self):
        if self.image_compare != "exact_bytes":
            raise ValueError("image_compare supports only 'exact_bytes'")
        self._compiled = [(re.compile(pat), repl)
                          for pat, repl in self.volatile_patterns]

    def normalize_text(self, text: str) -> str:
        for pattern, replacement in self._compiled:
            text = pattern.sub(replacement, text)
        if self.trailing_whitespace_insensitive:
            text = "\n".join(line.rstrip() for line in text.split("\n"))
        return text


@dataclass
class DiffItem:
    cell_index: int
    kind: str
    detail: str = ""

    def __post_init__(self):
        if self.kind not in DIFF_KINDS:
            raise ValueError(f"bad diff kind {self.kind!r}")
        if self.cell_index < 0:
            raise ValueError("cell_index must be nonnegative")


@dataclass
class ReproOutcome:
    notebook: str
    outcome_class: str
    reason: str | None = None            # not_attempted only
    exception_name: str | None = None    # exception only
    diff_count: int = 0

    def __post_init__(self):
        if self.outcome_class not in OUTCOME_CLASSES:
            raise ValueError(f"bad outcome class {self.outcome_class!r}")
        if self.outcome_class == "success_identical" and self.diff_count != 0:
            raise ValueError("identical outcome cannot carry diffs")
        if self.outcome_class == "exception" and not self.exception_name:
            raise ValueError("exception outcome requires exception_name")


def _normalize_payload(mime: str, payload: str, rules: NormalizationRules) -> str:
    if _is_text_mime(mime):
        return rules.normalize_text(payload)
    # binary payloads arrive base64-encoded; equality is exact bytes, so only
    # encoding whitespace (line wrapping) is insignificant
    return re.sub(r"\s+", "", payload)


def normalize_outputs(outputs: list[OutputItem],
                      rules: NormalizationRules | None = None) -> list[OutputItem]:
    """Deterministic, idempotent cleanup applied to both sides of a diff."""
    if rules is None:
        rules = NormalizationRules()

    coalesced: list[OutputItem] = []
    for item in outputs:
        previous = coalesced[-1] if coalesced else None
        if (rules.coalesce_streams and item.kind == "stream"
                and previous is not None and previous.kind == "stream"
                and previous.stream_name == item.stream_name):
            merged_text = (previous.mime_bundle.get("text/plain", "")
                           + item.mime_bundle.get("text/plain", ""))
            coalesced[-1] = OutputItem(
                kind="stream", stream_name=item.stream_name,
                mime_bundle={"text/plain": merged_text})
        else:
            coalesced.append(OutputItem(
                kind=item.kind, stream_name=item.stream_name,
                mime_bundle=dict(item.mime_bundle),
                error_name=item.error_name,
                error_message=item.error_message,
                traceback=item.traceback))

    normalized: list[OutputItem] = []
    for item in coalesced:
        bundle = {mime: _normalize_payload(mime, payload, rules)
                  for mime, payload in item.mime_bundle.items()}
        normalized.append(OutputItem(
            kind=item.kind, stream_name=item.stream_name, mime_bundle=bundle,
            error_name=item.error_name,
            error_message=(rules.normalize_text(item.error_message)
                           if item.error_message else item.error_message),
            traceback=(rules.normalize_text(item.traceback)
                       if item.traceback else item.traceback)))
    return normalized


def _describe(item: OutputItem) -> str:
    if item.kind == "stream":
        return f"stream {item.stream_name}"
    if item.kind == "error":
        return f"error {item.error_name}"
    return f"{item.kind} [{', '.join(sorted(item.mime_bundle)) or 'empty'}]"


def _compare_pair(index: int, left: OutputItem, right: OutputItem) -> DiffItem | None:
    """Diff two normalized outputs at the same position, or None if equal."""
    if (left.kind == "error") != (right.kind == "error"):
        return DiffItem(index, "error_vs_output",
                        f"{_describe(left)} vs {_describe(right)}")
    if left.kind != right.kind or left.stream_name != right.stream_name:
        return DiffItem(index, "output_changed",
                        f"{_describe(left)} vs {_describe(right)}")
    if left.kind == "error":
        if (left.error_name != right.error_name
                or (left.error_message or "") != (right.error_message or "")):
            return DiffItem(index, "output_changed",
                            f"error {left.error_name} vs {right.error_name}")
        return None
    if set(left.mime_bundle) != set(right.mime_bundle):
        only_left = sorted(set(left.mime_bundle) - set(right.mime_bundle))
        only_right = sorted(set(right.mime_bundle) - set(left.mime_bundle))
        return DiffItem(index, "output_changed",
                        f"mime keys differ (-{only_left} +{only_right})")
    for mime in sorted(left.mime_bundle):
        a, b = left.mime_bundle[mime], right.mime_bundle[mime]
        if _is_text_mime(mime):
            if a != b:
                return DiffItem(index, "output_changed", f"{mime} text differs")
        else:
            try:
                same = base64.b64decode(a, validate=False) == \
                    base64.b64decode(b, validate=False)
            except (ValueError, TypeError):
                same = a == b
            if not same:
                return DiffItem(index, "output_changed", f"{mime} bytes differ")
    return None


def diff_notebooks(original_cells: list[CellDescriptor],
                   executed_results: list[CellResult],
                   rules: NormalizationRules | None = None) -> list[DiffItem]:
    """Compare stored vs rerun outputs for every executed code cell.

    Cells align by index.  Unequal output counts produce one
    output_count_changed item plus itemized added/removed entries; equal
    counts compare positionally.
    """
    if rules is None:
        rules = NormalizationRules()
    by_index = {cell.index: cell for cell in original_cells
                if cell.kind == "code"}
    diffs: list[DiffItem] = []

    for result in executed_results:
        original = by_index.get(result.cell_index)
        stored = normalize_outputs(original.outputs if original else [], rules)
        rerun = normalize_outputs(result.outputs, rules)

        if len(stored) != len(rerun):
            diffs.append(DiffItem(
                result.cell_index, "output_count_changed",
                f"{len(stored)} stored vs {len(rerun)} rerun outputs"))
            for left, right in zip(stored, rerun):
                item = _compare_pair(result.cell_index, left, right)
                if item is not None:
                    diffs.append(item)
            for extra in rerun[len(stored):]:
                diffs.append(DiffItem(result.cell_index, "output_added",
                                      _describe(extra)))
            for extra in stored[len(rerun):]:
                diffs.append(DiffItem(result.cell_index, "output_removed",
                                      _describe(extra)))
            continue

        for left, right in zip(stored, rerun):
            item = _compare_pair(result.cell_index, left, right)
            if item is not None:
                diffs.append(item)
    return diffs


def classify(install: InstallResult | None, exec_record: ExecutionRecord | None,
             diffs: list[DiffItem] | None, *, notebook: str,
             not_attempted_reason: str | None = None) -> ReproOutcome:
    """Single-valued reproducibility classification for one notebook.

    Precedence: not_attempted → install_failed → exception → timeout /
    kernel_start_failure → success_different → success_identical.
    Inconsistent stage data (diffs without a completed execution, execution
    despite a failed install) raises rather than guessing.
    """
    if not_attempted_reason is not None or (install is None and exec_record is None):
        if exec_record is not None or (diffs is not None and diffs != []):
            raise InconsistentStageDataError(
                f"{notebook}: not-attempted notebook has stage results")
        return ReproOutcome(notebook=notebook, outcome_class="not_attempted",
                            reason=not_attempted_reason or "not attempted")

    if install is not None and not install.success:
        if exec_record is not None:
            raise InconsistentStageDataError(
                f"{notebook}: execution recorded despite failed install")
        return ReproOutcome(notebook=notebook, outcome_class="install_failed")

    if exec_record is None:
        return ReproOutcome(notebook=notebook, outcome_class="not_attempted",
                            reason="environment built but never executed")

    if exec_record.outcome == "exception":
        if diffs:
            raise InconsistentStageDataError(
                f"{notebook}: diffs recorded for a failed execution")
        return ReproOutcome(notebook=notebook, outcome_class="exception",
                            exception_name=exec_record.exception_name)
    if exec_record.outcome == "timeout":
        return ReproOutcome(notebook=notebook, outcome_class="timeout")
    if exec_record.outcome == "kernel_start_failure":
        return ReproOutcome(notebook=notebook, outcome_class="kernel_start_failure")

    # completed
    if diffs is None:
        raise InconsistentStageDataError(
            f"{notebook}: completed execution but no diff stage result")
    count = len(diffs)
    if count > 0:
        return ReproOutcome(notebook=notebook, outcome_class="success_different",
                            diff_count=count)
    return ReproOutcome(notebook=notebook, outcome_class="success_identical")
