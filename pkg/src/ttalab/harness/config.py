"""Plain-text sweep configuration.

Format::

    # comment
    key = value              # shared by every section below
    [section name]
    key = value, value, ...  # list-valued keys take comma-separated items

Keys before the first section header apply to all sections; a section
overrides them. A file without headers describes a single grid. Keys mirror
:class:`~ttalab.harness.runner.GridSpec` fields; list fields are
``scenarios gammas batch_sizes corruptions methods mem_inits seeds``.
"""

from __future__ import annotations

import re
from pathlib import Path

_SECTION = re.compile(r"^\[(?P<name>[^\]]+)\]$")


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> list[tuple[str, dict[str, str]]]:
    """Return ``[(section, mapping)]`` with shared keys merged into each section."""
    shared: dict[str, str] = {}
    sections: list[tuple[str, dict[str, str]]] = []
    current = shared
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _SECTION.match(line)
        if m:
            current = {}
            sections.append((m.group("name").strip(), current))
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in current:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        current[key] = value
    if not sections:
        return [("default", dict(shared))]
    return [(name, {**shared, **body}) for name, body in sections]


def load_config(path: str | Path) -> list[tuple[str, dict[str, str]]]:
    return parse_config(Path(path).read_text())


def split_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]
