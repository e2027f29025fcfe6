"""Notebook re-execution: subprocess orchestration and event decoding.

Each notebook runs in its own subprocess — the environment's interpreter
launching a shim program that executes code cells top-to-bottom, once each,
and streams line-delimited JSON events on stdout.  This module owns the
orchestrator side: launching the process (in its own process group), decoding
the event stream incrementally, enforcing the wall-clock deadline, and
folding events into an ExecutionRecord.
"""

from __future__ import annotations

import json
import logging
import os
import signal
import subprocess
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .notebooks import OutputItem

log = logging.getLogger(__name__)

OUTCOMES = ("completed", "exception", "timeout", "kernel_start_failure")
EVENT_KINDS = ("cell_start", "output", "cell_end", "fatal")


@dataclass
class ExecutionPolicy:
    per_notebook_timeout_seconds: int = 300
    stop_on_exception: bool = True
    working_dir: str = "notebook_dir"
    network_allowed: bool = True
    kill_grace_seconds: float = 10.0

    def __post_init__(self):
        if self.per_notebook_timeout_seconds < 1:
            raise ValueError("timeout must be >= 1 second")
        if self.working_dir != "notebook_dir":
            raise ValueError("working_dir supports only 'notebook_dir'")


@dataclass
class CellResult:
    cell_index: int
    outputs: list[OutputItem] = field(default_factory=list)
    duration_seconds: float = 0.0


@dataclass
class ExecutionRecord:
    notebook: str
    env_id: str
    outcome: str
    cell_results: list[CellResult] = field(default_factory=list)
    exception_name: str | None = None
    exception_message: str | None = None
    exception_cell_index: int | None = None
    total_duration_seconds: float = 0.0
    started_at: str = ""

    def __post_init__(self):
        if self.outcome not in OUTCOMES:
            raise ValueError(f"bad outcome {self.outcome!r}")
        if self.outcome == "exception" and not self.exception_name:
            raise ValueError("exception outcome requires exception_name")
        if self.total_duration_seconds < 0:
            raise ValueError("total_duration_seconds must be nonnegative")


@dataclass
class ShimEvent:
    kind: str  # cell_start | output | cell_end | fatal | decoder_error
    cell_index: int | None = None
    payload: dict = field(default_factory=dict)
    monotonic_time: float | None = None


@dataclass
class DecodedStream:
    """Incremental fold of the shim's line protocol into cell results."""

    events: list[ShimEvent] = field(default_factory=list)
    cell_results: list[CellResult] = field(default_factory=list)
    decoder_errors: int = 0
    fatal: ShimEvent | None = None
    open_cell: CellResult | None = None
    open_cell_started: float | None = None

    @property
    def truncated(self) -> bool:
        """True when the stream ended inside a cell_start/cell_end bracket."""
        return self.open_cell is not None

    def feed_line(self, line: str) -> ShimEvent:
        line = line.strip()
        try:
            data = json.loads(line)
            if not isinstance(data, dict):
                raise ValueError("event must be an object")
            kind = data.get("kind")
            if kind not in EVENT_KINDS:
                raise ValueError(f"unknown event kind {kind!r}")
            event = ShimEvent(
                kind=kind,
                cell_index=data.get("cell_index"),
                payload=data,
                monotonic_time=data.get("monotonic_time"))
        except (ValueError, TypeError) as exc:
            event = ShimEvent(kind="decoder_error",
                              payload={"line": line[:500], "error": str(exc)})
            self.decoder_errors += 1
            self.events.append(event)
            return event

        self.events.append(event)
        if event.kind == "cell_start":
            if self.open_cell is not None:
                # unbalanced bracket: close the dangling cell as-is
                self.cell_results.append(self.open_cell)
            self.open_cell = CellResult(cell_index=event.cell_index or 0)
            self.open_cell_started = event.monotonic_time
        elif event.kind == "output":
            if self.open_cell is not None:
                try:
                    item = OutputItem.from_json(event.payload.get("output") or {})
                except (KeyError, ValueError, TypeError) as exc:
                    self.decoder_errors += 1
                    self.events.append(ShimEvent(
                        kind="decoder_error",
                        payload={"line": line[:500], "error": str(exc)}))
                else:
                    self.open_cell.outputs.append(item)
        elif event.kind == "cell_end":
            if self.open_cell is not None:
                duration = event.payload.get("duration_seconds")
                if duration is None and (event.monotonic_time is not None
                                         and self.open_cell_started is not None):
                    duration = event.monotonic_time - self.open_cell_started
                self.open_cell.duration_seconds = max(0.0, float(duration or 0.0))
                self.cell_results.append(self.open_cell)
                self.open_cell = None
                self.open_cell_started = None
        elif event.kind == "fatal":
            self.fatal = event
        return event

    def close(self) -> None:
        """Fold a dangling open cell into the results (truncated stream)."""
        if self.open_cell is not None:
            self.cell_results.append(self.open_cell)
            # keep open_cell set: `truncated` stays observable
        # cell results arrive in order; enforce it defensively
        self.cell_results.sort(key=lambda c: c.cell_index)


def shim_protocol_decode(lines) -> DecodedStream:
    """Decode an iterable of protocol lines (tolerates truncation anywhere).

    Malformed lines become decoder_error events and the stream continues.
    """
    decoded = DecodedStream()
    for line in lines:
        if line.strip():
            decoded.feed_line(line)
    decoded.close()
    return decoded


def _last_error_output(cell: CellResult) -> OutputItem | None:
    for item in reversed(cell.outputs):
        if item.kind == "error":
            return item
    return None


def fold_execution(decoded: DecodedStream, notebook: str, env_id: str,
                   exit_code: int | None, killed_on_deadline: bool,
                   n_code_cells: int, total_duration: float,
                   started_at: str) -> ExecutionRecord:
    """Turn a decoded stream plus process facts into an ExecutionRecord."""
    outcome = None
    exception_name = exception_message = None
    exception_cell = None

    if killed_on_deadline:
        outcome = "timeout"
    elif decoded.fatal is not None:
        reason = str(decoded.fatal.payload.get("reason") or "")
        if reason == "timeout":
            outcome = "timeout"
        elif reason == "exception":
            outcome = "exception"
            exception_name = decoded.fatal.payload.get("error_name") or "Exception"
            exception_message = decoded.fatal.payload.get("error_message")
            exception_cell = decoded.fatal.payload.get("cell_index")
        else:
            outcome = "kernel_start_failure"
            exception_message = reason or None
    elif not decoded.events and (exit_code is None or exit_code != 0):
        outcome = "kernel_start_failure"
    else:
        # no fatal event: look at the last cell_end status
        error_cells = [c for c in decoded.cell_results
                       if _last_error_output(c) is not None]
        if error_cells:
            outcome = "exception"
            last = error_cells[-1]
            err = _last_error_output(last)
            exception_name = err.error_name or "Exception"
            exception_message = err.error_message
            exception_cell = last.cell_index
        elif decoded.truncated or len(decoded.cell_results) < n_code_cells:
            outcome = "kernel_start_failure" if not decoded.cell_results \
                else "timeout"
        else:
            outcome = "completed"

    if outcome == "exception" and exception_cell is None and decoded.cell_results:
        exception_cell = decoded.cell_results[-1].cell_index

    return ExecutionRecord(
        notebook=notebook, env_id=env_id, outcome=outcome,
        cell_results=decoded.cell_results,
        exception_name=exception_name,
        exception_message=exception_message,
        exception_cell_index=exception_cell,
        total_duration_seconds=max(0.0, total_duration),
        started_at=started_at)


def build_shim_argv(python_executable: str, shim_path: str, notebook_path: str,
                    policy: ExecutionPolicy) -> list[str]:
    """Subprocess contract: interpreter, shim program, notebook, policy args."""
    argv = [python_executable, shim_path, notebook_path,
            "--timeout", str(policy.per_notebook_timeout_seconds)]
    argv.append("--stop-on-exception" if policy.stop_on_exception
                else "--no-stop-on-exception")
    return argv


def _kill_process_group(proc: subprocess.Popen) -> None:
    try:
        os.killpg(os.getpgid(proc.pid), signal.SIGKILL)
    except (ProcessLookupError, PermissionError, OSError):
        try:
            proc.kill()
        except OSError:
            pass


def execute_notebook(notebook_path: str | os.PathLike, *, notebook_ref: str,
                     env_id: str, n_code_cells: int, policy: ExecutionPolicy,
                     python_executable: str, shim_path: str,
                     env: dict | None = None) -> ExecutionRecord:
    """Run one notebook through the shim and fold its event stream.

    The shim enforces the per-notebook timeout itself; the orchestrator adds
    a hard deadline (timeout + grace) after which the whole process group is
    killed, so a wedged kernel can never stall the pipeline.

    ``n_code_cells`` is the number of non-empty code cells (empty ones are
    never sent to the kernel).
    """
    notebook_path = Path(notebook_path)
    started_at = datetime.now(timezone.utc).isoformat()
    start = time.monotonic()
    deadline = start + policy.per_notebook_timeout_seconds + policy.kill_grace_seconds

    argv = build_shim_argv(python_executable, str(shim_path),
                           str(notebook_path), policy)
    decoded = DecodedStream()
    killed = False
    exit_code: int | None = None

    try:
        proc = subprocess.Popen(
            argv, stdout=subprocess.PIPE, stderr=subprocess.PIPE,
            cwd=str(notebook_path.parent), start_new_session=True,
            text=True, encoding="utf-8", errors="replace", env=env)
    except OSError as exc:
        return ExecutionRecord(
            notebook=notebook_ref, env_id=env_id, outcome="kernel_start_failure",
            exception_message=f"failed to launch shim: {exc}",
            total_duration_seconds=time.monotonic() - start,
            started_at=started_at)

    def reader():
        # line-buffered stdout; readline blocks, so the deadline is enforced
        # by the watchdog thread below
        assert proc.stdout is not None
        for line in proc.stdout:
            if line.strip():
                decoded.feed_line(line)

    import threading
    reader_thread = threading.Thread(target=reader, daemon=True)
    reader_thread.start()

    while True:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            killed = True
            _kill_process_group(proc)
            proc.wait()
            break
        try:
            exit_code = proc.wait(timeout=min(remaining, 0.5))
            break
        except subprocess.TimeoutExpired:
            continue

    reader_thread.join(timeout=policy.kill_grace_seconds)
    stderr_tail = ""
    if proc.stderr is not None:
        try:
            stderr_tail = proc.stderr.read()[-2000:]
        except (OSError, ValueError):
            pass
        proc.stderr.close()
    if proc.stdout is not None:
        proc.stdout.close()
    decoded.close()

    total = time.monotonic() - start
    record = fold_execution(decoded, notebook_ref, env_id, exit_code, killed,
                            n_code_cells, total, started_at)
    if record.outcome == "kernel_start_failure" and stderr_tail:
        record.exception_message = ((record.exception_message or "")
                                    + "\n" + stderr_tail).strip()[:2000]
    return record
