"""Structured-text config files and the shared threshold block.

Manifests, grammars and rule sets all use the same line-oriented format::

    # comment
    key = value            # top-level entries before the first section

    [section]
    free-form line         # interpretation is up to the section's consumer
    key = value

Blank lines and ``#`` comments are ignored. Section lines are returned in
file order so consumers can rely on declaration order (rule precedence,
transition priority).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    """A config, manifest, grammar or rule file is malformed."""


@dataclass
class ConfigLine:
    text: str
    lineno: int


@dataclass
class StructuredText:
    path: Path | None
    top: dict[str, str]
    sections: dict[str, list[ConfigLine]]

    def section(self, name: str) -> list[ConfigLine]:
        return self.sections.get(name, [])

    def where(self, line: ConfigLine | None = None) -> str:
        src = str(self.path) if self.path else "<string>"
        return f"{src}:{line.lineno}" if line else src


def _strip_comment(raw: str) -> str:
    idx = raw.find("#")
    return (raw if idx < 0 else raw[:idx]).strip()


def parse_structured_text(text: str, path: Path | None = None) -> StructuredText:
    top: dict[str, str] = {}
    sections: dict[str, list[ConfigLine]] = {}
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if not current:
                raise ConfigError(f"{path or '<string>'}:{lineno}: empty section name")
            if current in sections:
                raise ConfigError(f"{path or '<string>'}:{lineno}: duplicate section [{current}]")
            sections[current] = []
            continue
        if current is None:
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise ConfigError(f"{path or '<string>'}:{lineno}: expected 'key = value', got {line!r}")
            key = key.strip()
            if key in top:
                raise ConfigError(f"{path or '<string>'}:{lineno}: duplicate key {key!r}")
            top[key] = value.strip()
        else:
            sections[current].append(ConfigLine(line, lineno))
    return StructuredText(path, top, sections)


def read_structured_text(path: str | Path) -> StructuredText:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror or exc}") from exc
    return parse_structured_text(text, path)


def key_values(doc: StructuredText, section: str) -> dict[str, str]:
    """Interpret every line of ``section`` as ``key = value``."""
    out: dict[str, str] = {}
    for line in doc.section(section):
        key, sep, value = line.text.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{doc.where(line)}: expected 'key = value' in [{section}]")
        out[key.strip()] = value.strip()
    return out


@dataclass(frozen=True)
class Thresholds:
    """Tunable constants of the context-inference front end."""

    touch_px: float = 1.0          # D(I,J) below this counts as touching
    overlap_px2: float = 0.0       # Inter(I,J) above this counts as overlapping
    jaw_closed_px: float = 18.0    # jaw-end gap below this means the grasper is closed
    min_area_px2: float = 15.0     # polygons smaller than this are noise
    rdp_epsilon_px: float = 1.5
    mode_window: int = 10          # frames in the rolling-mode downsampling window
    marker_half_px: float = 4.0    # half side of the square drawn around a point annotation

    def __post_init__(self):
        if self.mode_window < 1:
            raise ConfigError("mode_window must be >= 1")
        if self.rdp_epsilon_px < 0:
            raise ConfigError("rdp_epsilon_px must be >= 0")
        if self.marker_half_px <= 0:
            raise ConfigError("marker_half_px must be > 0")

    def with_overrides(self, **overrides) -> "Thresholds":
        clean = {k: v for k, v in overrides.items() if v is not None}
        unknown = set(clean) - {f.name for f in dataclasses.fields(self)}
        if unknown:
            raise ConfigError(f"unknown threshold(s): {', '.join(sorted(unknown))}")
        coerced = {}
        for f in dataclasses.fields(self):
            if f.name in clean:
                try:
                    coerced[f.name] = int(clean[f.name]) if f.type in (int, "int") else float(clean[f.name])
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"threshold {f.name}: {clean[f.name]!r} is not a number") from exc
        return dataclasses.replace(self, **coerced)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]
