"""Unified diff parsing, generation and application."""

from __future__ import annotations

import difflib
import re
from dataclasses import dataclass, field

_HUNK_RE = re.compile(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@ ?(.*)$")
_NO_NEWLINE = "\\ No newline at end of file"


class ParseError(ValueError):
    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass
class Hunk:
    old_start: int
    old_len: int
    new_start: int
    new_len: int
    context: str
    lines: list[tuple[str, str]] = field(default_factory=list)

    def changed_old_lines(self) -> list[int]:
        """Old-file line numbers touched by this hunk.

        Removed lines map to themselves; an insertion maps to the old line it
        is inserted before (or the last old line when appended at the end).
        """
        touched: list[int] = []
        old = self.old_start if self.old_len else self.old_start + 1
        last_old = self.old_start + self.old_len - 1
        for tag, _ in self.lines:
            if tag == "-":
                touched.append(old)
                old += 1
            elif tag == "+":
                touched.append(max(1, old if old <= last_old else old - 1))
            else:
                old += 1
        return sorted(set(touched))

    def changed_new_lines(self) -> list[int]:
        touched: list[int] = []
        new = self.new_start
        for tag, _ in self.lines:
            if tag == "+":
                touched.append(new)
                new += 1
            elif tag == " ":
                new += 1
        return touched


@dataclass
class FilePatch:
    old_path: str
    new_path: str
    hunks: list[Hunk] = field(default_factory=list)

    @property
    def path(self) -> str:
        return self.new_path if self.new_path != "/dev/null" else self.old_path


def _strip_prefix(path: str) -> str:
    path = path.split("\t", 1)[0].strip()
    if path.startswith(("a/", "b/")):
        return path[2:]
    return path


def parse_unified_diff(text: str) -> list[FilePatch]:
    """Parse a (possibly multi-file, git-style) unified diff."""
    patches: list[FilePatch] = []
    lines = text.splitlines()
    i = 0
    current: FilePatch | None = None
    while i < len(lines):
        line = lines[i]
        if line.startswith("--- ") and i + 1 < len(lines) and lines[i + 1].startswith("+++ "):
            current = FilePatch(_strip_prefix(line[4:]), _strip_prefix(lines[i + 1][4:]))
            patches.append(current)
            i += 2
            continue
        if line.startswith("@@"):
            m = _HUNK_RE.match(line)
            if not m:
                raise ParseError(f"malformed hunk header {line!r}", i + 1)
            if current is None:
                raise ParseError("hunk before any file header", i + 1)
            old_len = int(m.group(2)) if m.group(2) is not None else 1
            new_len = int(m.group(4)) if m.group(4) is not None else 1
            hunk = Hunk(int(m.group(1)), old_len, int(m.group(3)), new_len, m.group(5).strip())
            i += 1
            seen_old = seen_new = 0
            while i < len(lines) and (seen_old < old_len or seen_new < new_len):
                body = lines[i]
                if body == _NO_NEWLINE:
                    i += 1
                    continue
                tag = body[:1] if body else " "
                if tag not in (" ", "-", "+"):
                    raise ParseError(f"unexpected line in hunk: {body!r}", i + 1)
                hunk.lines.append((tag, body[1:]))
                if tag != "+":
                    seen_old += 1
                if tag != "-":
                    seen_new += 1
                i += 1
            if seen_old != old_len or seen_new != new_len:
                raise ParseError("hunk shorter than its header declares", i)
            while i < len(lines) and lines[i] == _NO_NEWLINE:
                i += 1
            current.hunks.append(hunk)
            continue
        i += 1
    return patches


def make_unified_diff(before: str, after: str, path: str = "code", context: int = 3) -> str:
    a = before.splitlines(keepends=True)
    b = after.splitlines(keepends=True)
    out: list[str] = []
    for line in difflib.unified_diff(a, b, f"a/{path}", f"b/{path}", n=context):
        if line.endswith("\n"):
            out.append(line)
        else:
            out.append(line + "\n" + _NO_NEWLINE + "\n")
    return "".join(out)


def apply_unified_diff(before: str, diff: str) -> str:
    """Apply a single-file unified diff to ``before`` and return the result."""
    patches = parse_unified_diff(diff)
    if not patches:
        return before
    if len(patches) != 1:
        raise ValueError("apply_unified_diff handles single-file diffs only")
    src = before.splitlines(keepends=True)
    out: list[str] = []
    pos = 0
    raw = diff.splitlines()
    trailing = _newline_flags(raw)
    for hunk in patches[0].hunks:
        start = hunk.old_start - 1 if hunk.old_len else hunk.old_start
        if start < pos:
            raise ValueError("overlapping hunks")
        out.extend(src[pos:start])
        pos = start
        for tag, text in hunk.lines:
            if tag in (" ", "-"):
                if pos >= len(src) or src[pos].rstrip("\n") != text:
                    raise ValueError(f"context mismatch at old line {pos + 1}")
                if tag == " ":
                    out.append(src[pos])
                pos += 1
            else:
                out.append(text + "\n")
    out.extend(src[pos:])
    result = "".join(out)
    if trailing.get("new") and result.endswith("\n"):
        result = result[:-1]
    return result


def _newline_flags(raw: list[str]) -> dict[str, bool]:
    flags = {"new": False}
    for idx, line in enumerate(raw):
        if line == _NO_NEWLINE and idx > 0 and raw[idx - 1][:1] in ("+", " "):
            flags["new"] = True
    return flags
