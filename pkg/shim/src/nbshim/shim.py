# Notebook cell runner: executes one notebook's code cells top to bottom,
# exactly once each, and streams what happened as line-delimited JSON events
# on stdout (one event per line, UTF-8, no embedded newlines).
#
# Event kinds:
#   cell_start  {"kind", "cell_index", "monotonic_time"}
#   output      {"kind", "cell_index", "output": {...output item...}}
#   cell_end    {"kind", "cell_index", "status": ok|error|timeout,
#                "duration_seconds", "monotonic_time"}
#   fatal       {"kind", "reason", ...context...}   (terminates the stream)
#
# Output items mirror notebook output structure: kind stream (stream_name +
# text under mime["text/plain"]), execute_result / display_data (mime
# bundle), error (error_name, error_message, traceback).
#
# This file must stay standard-library-only and runnable on old interpreter
# versions: it is executed by the Python *inside* each reconstructed
# environment, whose version the orchestrator does not control, and it must
# not perturb the packages under test.  Exit code 0 means the protocol ran
# to completion (independent of whether the notebook itself succeeded).

from __future__ import print_function

import argparse
import ast
import io
import json
import os
import signal
import sys
import time
import traceback

PROTOCOL_STREAM = sys.stdout  # events; cell prints are captured separately


def _emit(event):
    try:
        PROTOCOL_STREAM.write(json.dumps(event, ensure_ascii=False,
                                         separators=(",", ":")) + "\n")
        PROTOCOL_STREAM.flush()
    except BrokenPipeError:
        # the protocol consumer is gone; nothing sensible left to do
        try:
            devnull = os.open(os.devnull, os.O_WRONLY)
            os.dup2(devnull, PROTOCOL_STREAM.fileno())
        except OSError:
            pass
        os._exit(3)


def emit_fatal(reason, **context):
    event = {"kind": "fatal", "reason": reason}
    event.update(context)
    _emit(event)


class CellTimeout(BaseException):
    # BaseException so a notebook's bare `except Exception` cannot swallow
    # the deadline signal.
    pass


def _alarm_handler(signum, frame):
    raise CellTimeout()


def load_code_cells(path):
    """Notebook file -> list of (cell_index, source) for code cells.

    Handles both the flat v4 layout and the v3 worksheet layout.  The cell
    index counts every cell in document order, matching how the notebook
    stores them.
    """
    with io.open(path, "r", encoding="utf-8") as fh:
        nb = json.load(fh)
    if not isinstance(nb, dict):
        raise ValueError("not a notebook: top level is not an object")
    major = nb.get("nbformat")
    if major not in (3, 4):
        raise ValueError("unsupported notebook format version: %r" % (major,))
    if major == 4:
        cells = nb.get("cells")
    else:
        worksheets = nb.get("worksheets") or []
        if not isinstance(worksheets, list):
            raise ValueError("worksheets is not a list")
        cells = []
        for sheet in worksheets:
            if not isinstance(sheet, dict):
                # refuse to guess: an executor must not silently skip
                # structure it cannot interpret
                raise ValueError("worksheet entry is not an object")
            cells.extend(sheet.get("cells") or [])
    if not isinstance(cells, list):
        raise ValueError("notebook has no cell list")

    out = []
    for index, cell in enumerate(cells):
        if not isinstance(cell, dict) or cell.get("cell_type") != "code":
            continue
        source = cell.get("source" if major == 4 else "input", "")
        if isinstance(source, list):
            source = "".join(source)
        if not isinstance(source, str):
            source = ""
        out.append((index, source))
    return out


def strip_notebook_magics(source):
    """Drop interpreter-specific magic/shell lines from a cell.

    A first line starting with %% marks the whole cell as a foreign-language
    or special-processing cell; the caller should skip it (returns None).
    Single-% magic lines and ! shell escapes are blanked (line numbers are
    preserved for tracebacks); everything else passes through.
    """
    lines = source.splitlines()
    if lines and lines[0].lstrip().startswith("%%"):
        return None
    kept = []
    for line in lines:
        stripped = line.lstrip()
        if stripped.startswith("%") or stripped.startswith("!"):
            kept.append("")
        else:
            kept.append(line)
    return "\n".join(kept)


class ResultCapture(object):
    """displayhook replacement keeping the last non-None value."""

    def __init__(self):
        self.value = None
        self.seen = False

    def __call__(self, value):
        if value is not None:
            self.value = value
            self.seen = True


def execute_cell(cell_index, source, globals_dict, deadline):
    """Run one cell; returns (status, outputs, duration_seconds).

    status: "ok" | "error" | "timeout".  outputs is a list of output items
    (dicts).  The cell's prints are captured and reported as stream items;
    a trailing bare expression is reported as an execute_result, mirroring
    how notebooks display the last expression of a cell.
    """
    outputs = []
    prepared = strip_notebook_magics(source)
    if prepared is None or not prepared.strip():
        return "ok", outputs, 0.0

    try:
        tree = ast.parse(prepared, "<cell %d>" % cell_index)
    except SyntaxError:
        return "error", [_error_item("SyntaxError")], 0.0
    wants_result = bool(tree.body) and isinstance(tree.body[-1], ast.Expr)
    try:
        if wants_result:
            code = compile(ast.Interactive(body=tree.body),
                           "<cell %d>" % cell_index, "single")
        else:
            code = compile(tree, "<cell %d>" % cell_index, "exec")
    except (SyntaxError, ValueError):
        return "error", [_error_item("SyntaxError")], 0.0

    capture = ResultCapture()
    out_buf = io.StringIO()
    err_buf = io.StringIO()
    old = (sys.stdout, sys.stderr, sys.displayhook)
    sys.stdout, sys.stderr, sys.displayhook = out_buf, err_buf, capture

    status = "ok"
    error_item = None
    remaining = deadline - time.monotonic()
    start = time.monotonic()
    try:
        if remaining <= 0:
            raise CellTimeout()
        if hasattr(signal, "setitimer"):
            signal.setitimer(signal.ITIMER_REAL, remaining)
        try:
            exec(code, globals_dict)
        finally:
            if hasattr(signal, "setitimer"):
                signal.setitimer(signal.ITIMER_REAL, 0)
    except CellTimeout:
        status = "timeout"
    except (Exception, SystemExit):
        status = "error"
        error_item = _error_item()
    finally:
        duration = time.monotonic() - start
        sys.stdout, sys.stderr, sys.displayhook = old

    text_out = out_buf.getvalue()
    text_err = err_buf.getvalue()
    if text_out:
        outputs.append({"kind": "stream", "stream_name": "stdout",
                        "mime": {"text/plain": text_out}})
    if text_err:
        outputs.append({"kind": "stream", "stream_name": "stderr",
                        "mime": {"text/plain": text_err}})
    if status == "ok" and wants_result and capture.seen:
        outputs.append({"kind": "execute_result",
                        "mime": {"text/plain": repr(capture.value)}})
    if error_item is not None:
        outputs.append(error_item)
    return status, outputs, duration


def _error_item(forced_name=None):
    exc_type, exc, tb = sys.exc_info()
    if exc_type is None:
        name = forced_name or "Exception"
        message = ""
        tb_text = ""
    else:
        name = forced_name or getattr(exc_type, "__name__", "Exception")
        message = str(exc)
        # hide the runner's own frames, like a kernel traceback would
        while tb is not None and tb.tb_frame.f_code.co_filename == __file__:
            tb = tb.tb_next
        tb_text = "".join(traceback.format_exception(exc_type, exc, tb))
    return {"kind": "error", "error_name": name, "error_message": message,
            "traceback": tb_text}


def run(notebook_path, timeout_seconds, stop_on_exception):
    """Execute the notebook; returns the process exit code."""
    try:
        cells = load_code_cells(notebook_path)
    except (IOError, OSError) as exc:
        emit_fatal("unreadable notebook: %s" % exc, path=notebook_path)
        return 2
    except (ValueError, KeyError) as exc:
        emit_fatal("invalid notebook: %s" % exc, path=notebook_path)
        return 2

    if hasattr(signal, "SIGALRM"):
        signal.signal(signal.SIGALRM, _alarm_handler)
    deadline = time.monotonic() + timeout_seconds
    globals_dict = {"__name__": "__main__", "__builtins__": __builtins__}

    for cell_index, source in cells:
        if not source.strip():
            continue  # empty code cells are never sent to the kernel
        if time.monotonic() >= deadline:
            emit_fatal("timeout", cell_index=cell_index)
            return 0
        _emit({"kind": "cell_start", "cell_index": cell_index,
               "monotonic_time": time.monotonic()})
        status, outputs, duration = execute_cell(
            cell_index, source, globals_dict, deadline)
        for item in outputs:
            _emit({"kind": "output", "cell_index": cell_index,
                   "output": item})
        _emit({"kind": "cell_end", "cell_index": cell_index,
               "status": status, "duration_seconds": duration,
               "monotonic_time": time.monotonic()})
        if status == "timeout":
            emit_fatal("timeout", cell_index=cell_index)
            return 0
        if status == "error" and stop_on_exception:
            return 0
    return 0


class _FatalArgumentParser(argparse.ArgumentParser):
    # argument errors must still speak the protocol: fatal event, then exit
    def error(self, message):
        emit_fatal("bad arguments: %s" % message)
        self.exit(2)


def main(argv=None):
    parser = _FatalArgumentParser(
        prog="nbshim",
        description="Execute a notebook's code cells, streaming JSON events.")
    parser.add_argument("notebook", help="path to the .ipynb file")
    parser.add_argument("--timeout", type=float, default=300.0,
                        help="whole-notebook budget in seconds")
    parser.add_argument("--stop-on-exception", dest="stop_on_exception",
                        action="store_true", default=True)
    parser.add_argument("--no-stop-on-exception", dest="stop_on_exception",
                        action="store_false")
    args = parser.parse_args(argv)
    sys.exit(run(args.notebook, args.timeout, args.stop_on_exception))


if __name__ == "__main__":
    main()
