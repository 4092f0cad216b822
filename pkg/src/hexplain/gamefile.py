"""Line-oriented sectioned text format shared by game definitions and run configs.

::

    # comment
    [room field]
    title = Field
    description = You are standing in an open field.
      Indented lines continue the previous value.
    exits = east:house, north:garden
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

_HEADER = re.compile(r"^\[\s*([A-Za-z_][\w-]*)(?:\s+([^\]\s][^\]]*?))?\s*\]\s*$")
_ENTRY = re.compile(r"^([A-Za-z_][\w.-]*)\s*=\s*(.*)$")


class ParseError(ValueError):
    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


@dataclass
class Entry:
    key: str
    value: str
    line: int


@dataclass
class Section:
    kind: str
    arg: str | None
    line: int
    entries: list[Entry] = field(default_factory=list)

    def get(self, key: str, default: str | None = None) -> str | None:
        for entry in self.entries:
            if entry.key == key:
                return entry.value
        return default

    def as_dict(self) -> dict[str, str]:
        return {e.key: e.value for e in self.entries}


def read_sections(text: str, require: bool = True) -> list[Section]:
    sections: list[Section] = []
    current: Section | None = None
    last: Entry | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if raw[0] in " \t" and last is not None:
            last.value = f"{last.value} {stripped}".strip()
            continue
        if stripped.startswith("["):
            match = _HEADER.match(stripped)
            if not match:
                raise ParseError(f"malformed section header {stripped!r}", lineno,
                                 raw.index("[") + 1)
            current = Section(match.group(1).lower(), match.group(2), lineno)
            sections.append(current)
            last = None
            continue
        match = _ENTRY.match(stripped)
        if not match:
            raise ParseError(f"expected 'key = value', got {stripped!r}", lineno,
                             len(raw) - len(raw.lstrip()) + 1)
        if current is None:
            raise ParseError("entry outside of any section", lineno)
        last = Entry(match.group(1), match.group(2).strip(), lineno)
        current.entries.append(last)
    if require and not sections:
        raise ParseError("no sections found", 1)
    return sections
