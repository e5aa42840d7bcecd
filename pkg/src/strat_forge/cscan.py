"""Brace-balance scanner locating function definitions in C/C++ source.

This is deliberately not a parser: it masks comments, literals and
preprocessor lines, then classifies each top-level ``{`` by the text that
precedes it. Namespaces, ``extern "C"`` blocks and class bodies are
transparent so methods defined inline are found too.
"""

from __future__ import annotations

import bisect
import re
from dataclasses import dataclass

_CONTROL = {"if", "for", "while", "switch", "catch", "do", "else", "return", "sizeof"}
_ACCESS_RE = re.compile(r"^\s*(?:(?:public|private|protected)\s*:(?!:)\s*)+")
_CONTAINER_RE = re.compile(
    r"^\s*(?:template\s*<[^{]*>\s*)?(?:namespace\b|extern\s*\"\s*\"|class\b|struct\b|union\b)"
)
_NAME_RE = re.compile(
    r"(operator\s*(?:\(\s*\)|[^\s(]+)|~?[A-Za-z_]\w*(?:\s*::\s*~?[A-Za-z_]\w*)*)\s*(?:<[^()]*>)?\s*$"
)


@dataclass(frozen=True)
class FunctionSpan:
    name: str
    start_line: int
    end_line: int

    def contains(self, line: int) -> bool:
        return self.start_line <= line <= self.end_line


def mask_source(text: str) -> str:
    """Blank out comments, string/char literal contents and preprocessor lines.

    Newlines and quote characters are kept so offsets and line numbers survive.
    """
    out = list(text)
    n = len(text)
    i = 0
    at_line_start = True
    while i < n:
        c = text[i]
        if c == "\n":
            at_line_start = True
            i += 1
            continue
        if at_line_start and c == "#":
            # preprocessor directive, including backslash continuations
            while i < n and text[i] != "\n":
                if text[i] == "\\" and i + 1 < n and text[i + 1] == "\n":
                    out[i] = " "
                    i += 2
                    continue
                out[i] = " "
                i += 1
            continue
        if not c.isspace():
            at_line_start = False
        if text.startswith("//", i):
            while i < n and text[i] != "\n":
                out[i] = " "
                i += 1
            continue
        if text.startswith("/*", i):
            end = text.find("*/", i + 2)
            end = n if end < 0 else end + 2
            for j in range(i, end):
                if text[j] != "\n":
                    out[j] = " "
            i = end
            continue
        if c in "\"'":
            j = i + 1
            while j < n and text[j] != c and text[j] != "\n":
                if text[j] == "\\":
                    out[j] = " "
                    j += 1
                    if j < n and text[j] != "\n":
                        out[j] = " "
                    j += 1
                    continue
                out[j] = " "
                j += 1
            i = j + 1
            continue
        i += 1
    return "".join(out)


def header_function_name(header: str) -> str | None:
    depth = 0
    for idx, ch in enumerate(header):
        if ch == "(" and depth == 0:
            prefix = header[:idx]
            m = _NAME_RE.search(prefix)
            if not m:
                return None
            name = re.sub(r"\s+", "", m.group(1))
            if name.split("::")[-1] in _CONTROL:
                return None
            return name
        if ch == "<":
            depth += 1
        elif ch == ">" and depth:
            depth -= 1
    return None


def _classify(header: str) -> tuple[str, str | None]:
    header = _ACCESS_RE.sub("", header)
    stripped = header.strip()
    if not stripped:
        return "opaque", None
    first = re.match(r"[A-Za-z_]\w*", stripped)
    if first and first.group(0) in _CONTROL:
        return "opaque", None
    if "(" in stripped:
        before_paren = stripped.split("(", 1)[0]
        if "=" in before_paren and "operator" not in before_paren:
            return "opaque", None
        if _CONTAINER_RE.match(stripped) and not re.search(r"\)\s*(?:const\b.*|noexcept\b.*|override\b.*|->.*)?$", stripped, re.S):
            return "container", None
        name = header_function_name(stripped)
        if name:
            return "function", name
        return "opaque", None
    if _CONTAINER_RE.match(stripped):
        return "container", None
    return "opaque", None


def _line_starts(text: str) -> list[int]:
    starts = [0]
    for idx, ch in enumerate(text):
        if ch == "\n":
            starts.append(idx + 1)
    return starts


def find_functions(text: str) -> list[FunctionSpan]:
    """Return every function definition in ``text`` with 1-based inclusive line spans."""
    masked = mask_source(text)
    starts = _line_starts(text)

    def line_of(offset: int) -> int:
        return bisect.bisect_right(starts, offset)

    spans: list[FunctionSpan] = []
    stack: list[tuple[str, str | None, int]] = []  # kind, name, header offset
    header_start = 0
    for idx, ch in enumerate(masked):
        if ch == "{":
            inside_code = any(kind in ("function", "opaque") for kind, _, _ in stack)
            if inside_code:
                stack.append(("opaque", None, idx))
            else:
                header = masked[header_start:idx]
                kind, name = _classify(header)
                lead = len(header) - len(_ACCESS_RE.sub("", header).lstrip())
                stack.append((kind, name, header_start + lead))
            header_start = idx + 1
        elif ch == "}":
            if stack:
                kind, name, offset = stack.pop()
                if kind == "function" and name:
                    spans.append(FunctionSpan(name, line_of(offset), line_of(idx)))
            header_start = idx + 1
        elif ch == ";":
            header_start = idx + 1
    spans.sort(key=lambda s: (s.start_line, s.end_line))
    return spans


def function_at(spans: list[FunctionSpan], line: int) -> FunctionSpan | None:
    """Innermost function span containing ``line``."""
    best = None
    for span in spans:
        if span.contains(line) and (best is None or span.start_line >= best.start_line):
            best = span
    return best


def extract_lines(text: str, start_line: int, end_line: int) -> str:
    lines = text.splitlines(keepends=True)
    chunk = "".join(lines[start_line - 1 : end_line])
    if chunk and not chunk.endswith("\n"):
        chunk += "\n"
    return chunk
