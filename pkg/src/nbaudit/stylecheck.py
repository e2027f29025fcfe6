"""Tokenizer-driven whitespace/style checker for notebook code cells.

Implements the classic PEP 8 rule subset the audit reports on, with
pycodestyle-compatible codes, positions, and messages:

    E101 E225 E231 E262 E265 E401 E402 E701 E703 E741 W601 W606

The engine builds logical lines from the token stream (strings muted,
continuations joined) and runs physical- and logical-line checks exactly the
way the reference tool family does, so findings agree code-for-code and
column-for-column with an independent linter on the same source.  W601 and
W606 are legacy Python-2-era rules kept because the audited corpus still
trips them; modern linters have dropped both.

Columns are reported 1-based per cell; lines 1-based per cell.
"""

from __future__ import annotations

import bisect
import keyword
import re
import tokenize
from dataclasses import dataclass, field
from io import StringIO

from .notebooks import CellDescriptor, strip_noncode_lines

__all__ = ["StyleFinding", "StyleReport", "check_style", "check_source", "EMITTED_CODES"]

EMITTED_CODES = frozenset({
    "E101", "E225", "E231", "E262", "E265", "E401", "E402",
    "E701", "E703", "E741", "W601", "W606",
})

SINGLETONS = frozenset(["False", "None", "True"])
KEYWORDS = frozenset(keyword.kwlist + ["print"]) - SINGLETONS
UNARY_OPERATORS = frozenset([">>", "**", "*", "+", "-"])
ARITHMETIC_OP = frozenset(["**", "*", "/", "//", "+", "-", "@"])
WS_OPTIONAL_OPERATORS = ARITHMETIC_OP.union(["^", "&", "|", "<<", ">>", "%"])
WS_NEEDED_OPERATORS = frozenset([
    "**=", "*=", "/=", "//=", "+=", "-=", "!=", "<", ">",
    "%=", "^=", "&=", "|=", "==", "<=", ">=", "<<=", ">>=", "=",
    "and", "in", "is", "or", "->", ":="])
WHITESPACE = frozenset(" \t\xa0")
NEWLINE = frozenset([tokenize.NL, tokenize.NEWLINE])
SKIP_TOKENS = NEWLINE.union([tokenize.INDENT, tokenize.DEDENT])
SKIP_COMMENTS = SKIP_TOKENS.union([tokenize.COMMENT, tokenize.ERRORTOKEN])

INDENT_REGEX = re.compile(r"([ \t]*)")
LAMBDA_REGEX = re.compile(r"\blambda\b")
STARTSWITH_DEF_REGEX = re.compile(r"^(async\s+def|def)\b")
STARTSWITH_INDENT_STATEMENT_REGEX = re.compile(
    r"^\s*({})\b".format("|".join(s.replace(" ", r"\s+") for s in (
        "def", "async def",
        "for", "async for",
        "if", "elif", "else",
        "try", "except", "finally",
        "with", "async with",
        "class",
        "while",
    )))
)
DUNDER_REGEX = re.compile(r"^__([^\s]+)__(?::\s*[a-zA-Z.0-9_\[\]\"]+)? = ")

_NOQA_RE = re.compile(r"# no(?:qa|pep8)\b", re.I)


def _noqa(text: str) -> bool:
    return bool(_NOQA_RE.search(text))


@dataclass
class StyleFinding:
    cell_index: int
    code: str
    line: int  # 1-based within the cell
    column: int  # 1-based within the line
    message: str


@dataclass
class StyleReport:
    findings: list[StyleFinding] = field(default_factory=list)
    parse_skipped_cells: list[int] = field(default_factory=list)


# ---------------------------------------------------------------------------
# helpers shared with the reference behavior


def expand_indent(line: str) -> int:
    """Indentation width with tabs expanded to the next multiple of 8."""
    line = line.rstrip("\n\r")
    if "\t" not in line:
        return len(line) - len(line.lstrip())
    result = 0
    for char in line:
        if char == "\t":
            result = result // 8 * 8 + 8
        elif char == " ":
            result += 1
        else:
            break
    return result


def mute_string(text: str) -> str:
    """Replace string contents with 'xxx' so checks can't match inside them."""
    start = text.index(text[-1]) + 1
    end = len(text) - 1
    if text[-3:] in ('"""', "'''"):
        start += 2
        end -= 2
    return text[:start] + "x" * (end - start) + text[end:]


def _update_counts(segment: str, counts: dict) -> None:
    for char in segment:
        if char in counts:
            counts[char] += 1


def _is_eol_token(token) -> bool:
    return token[0] in NEWLINE or token[4][token[3][1]:].lstrip() == "\\\n"


# ---------------------------------------------------------------------------
# physical-line checks


def tabs_or_spaces(physical_line: str, indent_char: str):
    """E101: indentation mixes the file's dominant indent character."""
    indent = INDENT_REGEX.match(physical_line).group(1)
    for offset, char in enumerate(indent):
        if char != indent_char:
            return offset, "E101 indentation contains mixed spaces and tabs"
    return None


# ---------------------------------------------------------------------------
# logical-line checks


def missing_whitespace(logical_line, tokens):
    """E225/E231 (optional-whitespace operators classified internally).

    Tracks a need_space state across operator tokens; brace context decides
    slice colons, lambda defaults, keyword '=' and tuple commas.
    """
    need_space = False
    prev_type = tokenize.OP
    prev_text = prev_end = None
    operator_types = (tokenize.OP, tokenize.NAME)
    brace_stack = []
    for token_type, text, start, end, line in tokens:
        if token_type == tokenize.OP and text in {"[", "(", "{"}:
            brace_stack.append(text)
        elif token_type == tokenize.NAME and text == "lambda":
            brace_stack.append("l")
        elif brace_stack:
            if token_type == tokenize.OP and text in {"]", ")", "}"}:
                brace_stack.pop()
            elif (brace_stack[-1] == "l" and token_type == tokenize.OP
                    and text == ":"):
                brace_stack.pop()

        if token_type in SKIP_COMMENTS:
            continue

        if token_type == tokenize.OP and text in {",", ";", ":"}:
            next_char = line[end[1]:end[1] + 1]
            if next_char not in WHITESPACE and next_char not in "\r\n":
                # slice colon
                if text == ":" and brace_stack[-1:] == ["["]:
                    pass
                # tuple / trailing comma before a closer
                elif text == "," and next_char in ")]":
                    pass
                else:
                    yield start, f"E231 missing whitespace after {text!r}"

        if need_space:
            if start != prev_end:
                if need_space is not True and not need_space[1]:
                    yield (need_space[0],
                           "E225 missing whitespace around operator")
                need_space = False
            elif (
                    # positional-only parameter marker tolerances
                    prev_text == "/" and text in {",", ")", ":"} or
                    prev_text == ")" and text == ":"
            ):
                pass
            else:
                if need_space is True or need_space[1]:
                    yield prev_end, "E225 missing whitespace around operator"
                elif prev_text != "**":
                    code, optype = "E226", "arithmetic"
                    if prev_text == "%":
                        code, optype = "E228", "modulo"
                    elif prev_text not in ARITHMETIC_OP:
                        code, optype = "E227", "bitwise or shift"
                    yield (need_space[0], "%s missing whitespace "
                           "around %s operator" % (code, optype))
                need_space = False
        elif token_type in operator_types and prev_end is not None:
            if (
                    text == "=" and (
                        brace_stack[-1:] == ["l"] or   # lambda default
                        brace_stack[-1:] == ["("]      # keyword argument
                    )
            ):
                pass
            elif text in WS_NEEDED_OPERATORS:
                need_space = True
            elif text in UNARY_OPERATORS:
                # binary use only: -123, -x, *args stay unflagged
                if prev_type == tokenize.OP and prev_text in "}])" or (
                    prev_type != tokenize.OP and
                    prev_text not in KEYWORDS and
                    not keyword.issoftkeyword(prev_text)
                ):
                    need_space = None
            elif text in WS_OPTIONAL_OPERATORS:
                need_space = None

            if need_space is None:
                # surrounding space optional, but both sides must match
                need_space = (prev_end, start != prev_end)
            elif need_space and start == prev_end:
                yield prev_end, "E225 missing whitespace around operator"
                need_space = False
        prev_type = token_type
        prev_text = text
        prev_end = end


def whitespace_before_comment(logical_line, tokens):
    """E262 inline-comment format, E265 block-comment format."""
    prev_end = (0, 0)
    for token_type, text, start, end, line in tokens:
        if token_type == tokenize.COMMENT:
            inline_comment = line[:start[1]].strip()
            symbol, sp, comment = text.partition(" ")
            bad_prefix = symbol not in "#:" and (symbol.lstrip("#")[:1] or "#")
            if inline_comment:
                if bad_prefix or comment[:1] in WHITESPACE:
                    yield start, "E262 inline comment should start with '# '"
            elif bad_prefix and (bad_prefix != "!" or start[0] > 1):
                # shebang on line 1 is exempt
                if bad_prefix != "#":
                    yield start, "E265 block comment should start with '# '"
        elif token_type != tokenize.NL:
            prev_end = end


def imports_on_separate_lines(logical_line):
    """E401: multiple modules in one import statement."""
    line = logical_line
    if line.startswith("import "):
        found = line.find(",")
        if -1 < found and ";" not in line[:found]:
            yield found, "E401 multiple imports on one line"


def module_imports_on_top_of_file(logical_line, indent_level, checker_state, noqa):
    """E402: module-level import after non-import code."""
    def is_string_literal(line):
        if line[0] in "uUbB":
            line = line[1:]
        if line and line[0] in "rR":
            line = line[1:]
        return line and (line[0] == '"' or line[0] == "'")

    allowed_keywords = ("try", "except", "else", "finally", "with", "if", "elif")

    if indent_level:  # imports inside blocks are fine
        return
    if not logical_line:
        return
    if noqa:
        return
    line = logical_line
    if line.startswith("import ") or line.startswith("from "):
        if checker_state.get("seen_non_imports", False):
            yield 0, "E402 module level import not at top of file"
    elif re.match(DUNDER_REGEX, line):
        return
    elif any(line.startswith(kw) for kw in allowed_keywords):
        return
    elif is_string_literal(line):
        # first string literal is the docstring
        if checker_state.get("seen_docstring", False):
            checker_state["seen_non_imports"] = True
        else:
            checker_state["seen_docstring"] = True
    else:
        checker_state["seen_non_imports"] = True


def compound_statements(logical_line):
    """E701 colon-joined statements, E703 trailing semicolon."""
    line = logical_line
    last_char = len(line) - 1
    found = line.find(":")
    prev_found = 0
    counts = {char: 0 for char in "{}[]()"}
    while -1 < found < last_char:
        _update_counts(line[prev_found:found], counts)
        if (
                counts["{"] <= counts["}"] and
                counts["["] <= counts["]"] and
                counts["("] <= counts[")"] and
                line[found + 1] != "="  # := assignment expression
        ):
            lambda_kw = LAMBDA_REGEX.search(line, 0, found)
            if lambda_kw:
                # lambda assignment is a different rule (not emitted here)
                break
            if STARTSWITH_DEF_REGEX.match(line):
                pass  # one-line def is a different rule (not emitted here)
            elif STARTSWITH_INDENT_STATEMENT_REGEX.match(line):
                yield found, "E701 multiple statements on one line (colon)"
        prev_found = found
        found = line.find(":", found + 1)
    found = line.find(";")
    while -1 < found:
        if found >= last_char:
            yield found, "E703 statement ends with a semicolon"
        found = line.find(";", found + 1)


def ambiguous_identifier(logical_line, tokens):
    """E741: 'l', 'O', 'I' bound as names."""
    func_depth = None  # set to brace depth when 'def'/'lambda' seen
    seen_colon = False  # parameter list finished
    brace_depth = 0
    idents_to_avoid = ("l", "O", "I")
    prev_type, prev_text, prev_start, prev_end, __ = tokens[0]
    for index in range(1, len(tokens)):
        token_type, text, start, end, line = tokens[index]
        ident = pos = None
        if prev_text in {"def", "lambda"}:
            func_depth = brace_depth
            seen_colon = False
        elif (func_depth is not None and text == ":"
                and brace_depth == func_depth):
            seen_colon = True
        if text in "([{":
            brace_depth += 1
        elif text in ")]}":
            brace_depth -= 1
        # lhs of assignment
        if text == ":=" or (text == "=" and brace_depth == 0):
            if prev_text in idents_to_avoid:
                ident = prev_text
                pos = prev_start
        # bound via as/for/global/nonlocal
        if prev_text in ("as", "for", "global", "nonlocal"):
            if text in idents_to_avoid:
                ident = text
                pos = start
        # function / lambda parameters
        if (
                func_depth is not None and
                not seen_colon and
                index < len(tokens) - 1 and tokens[index + 1][1] in ":,=)" and
                prev_text in {"lambda", ",", "*", "**", "("} and
                text in idents_to_avoid
        ):
            ident = text
            pos = start
        if ident:
            yield pos, "E741 ambiguous variable name '%s'" % ident
        prev_type = token_type
        prev_text = text
        prev_start = start


def deprecated_has_key(logical_line, noqa):
    """W601: the Python-2 dict.has_key() idiom."""
    pos = logical_line.find(".has_key(")
    if pos > -1 and not noqa:
        yield pos, "W601 .has_key() is deprecated, use 'in'"


def async_await_keywords(logical_line, tokens):
    """W606: 'async'/'await' used as plain identifiers.

    Both became reserved keywords in Python 3.7; the corpus predates that.
    A small state machine over the token stream accepts the legitimate
    grammar positions (async def/with/for, await <expr>) and flags the rest.
    """
    state = None
    for token_type, text, start, end, line in tokens:
        error = False

        if token_type == tokenize.NL:
            continue

        if state is None:
            if token_type == tokenize.NAME:
                if text == "async":
                    state = ("async_stmt", start)
                elif text == "await":
                    state = ("await", start)
                elif text in ("def", "for"):
                    state = ("define", start)
        elif state[0] == "async_stmt":
            if token_type == tokenize.NAME and text in ("def", "with", "for"):
                state = None
            else:
                error = True
        elif state[0] == "await":
            if token_type == tokenize.NAME:
                state = None
            elif token_type == tokenize.OP and text == "(":
                state = None
            else:
                error = True
        elif state[0] == "define":
            if token_type == tokenize.NAME and text in ("async", "await"):
                error = True
            else:
                state = None

        if error:
            yield (state[1],
                   "W606 'async' and 'await' are reserved keywords starting "
                   "with Python 3.7")
            state = None

    if state is not None:
        yield (state[1],
               "W606 'async' and 'await' are reserved keywords starting "
               "with Python 3.7")


# ---------------------------------------------------------------------------
# engine

# (name, function, style) where style describes the argument wiring
_LOGICAL_CHECKS = (
    ("missing_whitespace", missing_whitespace, "tokens"),
    ("whitespace_before_comment", whitespace_before_comment, "tokens"),
    ("imports_on_separate_lines", imports_on_separate_lines, "line"),
    ("module_imports_on_top_of_file", module_imports_on_top_of_file, "module_state"),
    ("compound_statements", compound_statements, "line"),
    ("ambiguous_identifier", ambiguous_identifier, "tokens"),
    ("deprecated_has_key", deprecated_has_key, "noqa"),
    ("async_await_keywords", async_await_keywords, "tokens"),
)


class _SourceChecker:
    """Single-source checker: tokenize, build logical lines, run checks."""

    def __init__(self, source: str):
        self.lines = StringIO(source).readlines()
        if self.lines and self.lines[0][:1] == "﻿":
            self.lines[0] = self.lines[0][1:]
        self.total_lines = len(self.lines)
        self.line_number = 0
        self.indent_char: str | None = None
        self.indent_level = 0
        self.blank_lines = 0
        self.tokens: list = []
        self.logical_line = ""
        self.noqa = False
        self._checker_states: dict[str, dict] = {}
        self.findings: list[tuple[int, int, str, str]] = []
        self.failed = False

    # -- reporting

    def report_error(self, line_number: int, offset: int, text: str) -> None:
        code = text[:4]
        if code in EMITTED_CODES:
            self.findings.append((line_number, offset, code, text[5:]))

    # -- input plumbing

    def readline(self) -> str:
        if self.line_number >= self.total_lines:
            return ""
        line = self.lines[self.line_number]
        self.line_number += 1
        if self.indent_char is None and line[:1] in WHITESPACE:
            self.indent_char = line[0]
        return line

    def check_physical(self, line: str) -> None:
        result = tabs_or_spaces(line, self.indent_char)
        if result is not None:
            offset, text = result
            self.report_error(self.line_number, offset, text)
            if text[:4] == "E101":
                self.indent_char = line[0]

    def maybe_check_physical(self, token, prev_physical: str) -> None:
        if _is_eol_token(token):
            if token[4] == "":
                # NEWLINE synthesized at EOF carries no source line
                self.check_physical(prev_physical)
            else:
                self.check_physical(token[4])
        elif token[0] == tokenize.STRING and "\n" in token[1]:
            # multiline string: check each physical line except the last
            if _noqa(token[4]):
                return
            start, end = token[2][0], token[3][0]
            self.line_number = start
            for line_number in range(start, end):
                self.check_physical(self.lines[line_number - 1] + "\n")
                self.line_number += 1

    def generate_tokens(self):
        tokengen = tokenize.generate_tokens(self.readline)
        try:
            prev_physical = ""
            for token in tokengen:
                if token[2][0] > self.total_lines:
                    return
                self.maybe_check_physical(token, prev_physical)
                yield token
                prev_physical = token[4]
        except (SyntaxError, tokenize.TokenError):
            self.failed = True

    # -- logical lines

    def build_tokens_line(self):
        logical = []
        comments = []
        length = 0
        prev_row = prev_col = mapping = None
        for token_type, text, start, end, line in self.tokens:
            if token_type in SKIP_TOKENS:
                continue
            if not mapping:
                mapping = [(0, start)]
            if token_type == tokenize.COMMENT:
                comments.append(text)
                continue
            if token_type == tokenize.STRING:
                text = mute_string(text)
            if prev_row:
                (start_row, start_col) = start
                if prev_row != start_row:  # continuation joined with a space
                    prev_text = self.lines[prev_row - 1][prev_col - 1]
                    if prev_text == "," or (prev_text not in "{[(" and
                                            text not in "}])"):
                        text = " " + text
                elif prev_col != start_col:  # keep intra-line gap verbatim
                    text = line[prev_col:start_col] + text
            logical.append(text)
            length += len(text)
            mapping.append((length, end))
            (prev_row, prev_col) = end
        self.logical_line = "".join(logical)
        self.noqa = bool(comments) and _noqa("".join(comments))
        return mapping

    def check_logical(self) -> None:
        mapping = self.build_tokens_line()
        if not mapping:
            return
        mapping_offsets = [offset for offset, _ in mapping]
        (start_row, start_col) = mapping[0][1]
        start_line = self.lines[start_row - 1]
        self.indent_level = expand_indent(start_line[:start_col])

        for name, check, style in _LOGICAL_CHECKS:
            if style == "tokens":
                results = check(self.logical_line, self.tokens)
            elif style == "line":
                results = check(self.logical_line)
            elif style == "noqa":
                results = check(self.logical_line, self.noqa)
            else:  # module_state
                state = self._checker_states.setdefault(name, {})
                results = check(self.logical_line, self.indent_level,
                                state, self.noqa)
            for offset, text in results or ():
                if not isinstance(offset, tuple):
                    token_offset, pos = mapping[bisect.bisect_left(
                        mapping_offsets, offset)]
                    offset = (pos[0], pos[1] + offset - token_offset)
                self.report_error(offset[0], offset[1], text)
        self.blank_lines = 0
        self.tokens = []

    def run(self) -> tuple[list[tuple[int, int, str, str]], bool]:
        """Returns (findings as (line, col0, code, message), tokenize_failed)."""
        parens = 0
        for token in self.generate_tokens():
            self.tokens.append(token)
            token_type, text = token[0:2]
            if token_type == tokenize.OP:
                if text in "([{":
                    parens += 1
                elif text in "}])":
                    parens -= 1
            elif not parens:
                if token_type in NEWLINE:
                    if token_type == tokenize.NEWLINE:
                        self.check_logical()
                    elif len(self.tokens) == 1:
                        self.blank_lines += 1
                        del self.tokens[0]
                    else:
                        self.check_logical()
        if self.failed:
            return [], True
        if self.tokens:
            self.check_physical(self.lines[-1])
            self.check_logical()
        return self.findings, False


def check_source(source: str) -> tuple[list[tuple[int, int, str, str]], bool]:
    """Check one source string.

    Returns (findings, failed) where each finding is
    (line, column0, code, message) with 0-based column, and ``failed`` marks
    sources the tokenizer rejects (the caller records a parse-skipped cell;
    partial findings are discarded as untrustworthy).
    """
    checker = _SourceChecker(source)
    findings, failed = checker.run()
    findings.sort(key=lambda f: (f[0], f[1], f[2]))
    return findings, failed


def check_style(cells: list[CellDescriptor]) -> StyleReport:
    """Run the style rule subset over every non-empty code cell.

    Line magics and shell escapes are blanked line-preservingly first; cells
    that open with a cell magic (non-Python body) and cells the tokenizer
    rejects are recorded as parse-skipped.
    """
    report = StyleReport()
    for cell in cells:
        if cell.kind != "code" or cell.is_empty:
            continue
        prepared = strip_noncode_lines(cell.source)
        if prepared is None:
            report.parse_skipped_cells.append(cell.index)
            continue
        if not prepared.strip():
            continue
        if not prepared.endswith("\n"):
            prepared += "\n"
        findings, failed = check_source(prepared)
        if failed:
            report.parse_skipped_cells.append(cell.index)
            continue
        for line, col0, code, message in findings:
            report.findings.append(StyleFinding(
                cell_index=cell.index, code=code,
                line=line, column=col0 + 1, message=message,
            ))
    return report
