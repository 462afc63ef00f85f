"""On-disk skill library format: Markdown files plus a SKILL.md index.

The writer is bit-exact (UTF-8, `\n` newlines, no trailing whitespace) so
that libraries can be diffed and version-controlled; the reader tolerates
cosmetic variation such as extra blank lines, unknown front-matter keys,
and responses wrapped in code fences.
"""

from __future__ import annotations

import re
from pathlib import Path

from .model import (
    ErrorType,
    NavigationEntry,
    NavigationIndex,
    SkillFile,
    SkillLibrary,
    SkillPattern,
    validate_library,
)

SKILL_INDEX_NAME = "SKILL.md"
_INDEX_TITLE = "# Skill Library Index"

_PATTERN_HEADING = re.compile(r"^##\s*Pattern:\s*(.+?)\s*$")
_ADDRESSES = re.compile(r"^\*\*Addresses:?\*\*:?\s*(.*)$")
_WHEN = re.compile(r"^\*\*When to use:?\*\*:?\s*$")
_PROCEDURE = re.compile(r"^\*\*Procedure:?\*\*:?\s*$")
_KEYWORDS = re.compile(r"^\*\*Keywords:?\*\*:?\s*(.*)$")
_PATTERNS_LIST = re.compile(r"^\*\*Patterns:?\*\*:?\s*$")
_BULLET = re.compile(r"^[-*]\s+(.*)$")
_NUMBERED = re.compile(r"^\d+[.)]\s+(.*)$")
_FENCE = re.compile(r"^```")
_SECTION_HEADING = re.compile(r"^##\s+(\S+\.md)\s*$")


class SkillFormatError(ValueError):
    """Raised when a skill file or index cannot be parsed."""

    def __init__(self, message: str, source: str = "", line: int = 0):
        location = f"{source}:{line}: " if source else ""
        super().__init__(f"{location}{message}")
        self.source = source
        self.line = line


def render_pattern(pattern: SkillPattern) -> str:
    lines = [f"## Pattern: {pattern.name}", ""]
    lines.append(f"**Addresses:** {pattern.description}")
    lines.append("")
    lines.append("**When to use:**")
    for trigger in pattern.when_to_use:
        lines.append(f"- {trigger}")
    lines.append("")
    lines.append("**Procedure:**")
    for i, step in enumerate(pattern.procedure, start=1):
        lines.append(f"{i}. {step}")
    if pattern.example:
        lines.append("")
        lines.append("```")
        lines.extend(pattern.example.rstrip("\n").split("\n"))
        lines.append("```")
    return "\n".join(lines)


def render_skill_file(skill: SkillFile) -> str:
    ids = ", ".join(sorted(skill.source_question_ids))
    lines = [
        "---",
        f"subfield: {skill.subfield}",
        f"error_type: {skill.error_type.slug}",
        f"version: {skill.version}",
        f"source_question_ids: {ids}" if ids else "source_question_ids:",
        "---",
    ]
    body = "\n\n".join(render_pattern(p) for p in skill.patterns)
    return "\n".join(lines) + "\n\n" + body + "\n"


def render_navigation(nav: NavigationIndex) -> str:
    chunks = [_INDEX_TITLE]
    for entry in nav.entries:
        lines = [f"## {entry.path}", ""]
        if entry.summary:
            lines.append(entry.summary)
            lines.append("")
        lines.append("**Keywords:**")
        for keyword in entry.keywords:
            lines.append(f"- {keyword}")
        lines.append("")
        lines.append("**Patterns:**")
        for name in entry.pattern_names:
            lines.append(f"- {name}")
        chunks.append("\n".join(lines))
    return "\n\n".join(chunks) + "\n"


def strip_outer_fence(text: str) -> str:
    """Drop a single code fence wrapping the whole text, if present."""
    lines = text.strip().split("\n")
    if len(lines) >= 2 and _FENCE.match(lines[0]) and _FENCE.match(lines[-1]):
        return "\n".join(lines[1:-1])
    return text


def parse_patterns(text: str, source: str = "") -> list[SkillPattern]:
    """Parse `## Pattern:` sections out of Markdown text.

    Tolerates surrounding prose and an outer code fence; sections missing a
    non-empty procedure are rejected.
    """
    lines = strip_outer_fence(text).split("\n")
    sections: list[tuple[str, int, list[str]]] = []
    current: list[str] | None = None
    for lineno, line in enumerate(lines, start=1):
        heading = _PATTERN_HEADING.match(line)
        if heading:
            current = []
            sections.append((heading.group(1), lineno, current))
        elif current is not None:
            current.append(line)

    patterns = []
    for name, lineno, body in sections:
        patterns.append(_parse_pattern_body(name, body, source, lineno))
    return patterns


def _parse_pattern_body(
    name: str, body: list[str], source: str, lineno: int
) -> SkillPattern:
    description = ""
    when_to_use: list[str] = []
    procedure: list[str] = []
    example_lines: list[str] = []
    mode = ""
    in_fence = False
    for line in body:
        if _FENCE.match(line.strip()):
            in_fence = not in_fence
            if not in_fence:
                mode = ""
            else:
                mode = "example"
            continue
        if in_fence:
            example_lines.append(line)
            continue
        stripped = line.strip()
        addresses = _ADDRESSES.match(stripped)
        if addresses:
            description = addresses.group(1).strip()
            mode = "description"
            continue
        if _WHEN.match(stripped):
            mode = "when"
            continue
        if _PROCEDURE.match(stripped):
            mode = "procedure"
            continue
        if not stripped:
            if mode == "description":
                mode = ""
            continue
        bullet = _BULLET.match(stripped)
        numbered = _NUMBERED.match(stripped)
        if mode == "when" and bullet:
            when_to_use.append(bullet.group(1).strip())
        elif mode == "procedure" and (numbered or bullet):
            match = numbered or bullet
            procedure.append(match.group(1).strip())
        elif mode == "description":
            description = (description + " " + stripped).strip()
    if not procedure:
        raise SkillFormatError(
            f"pattern {name!r} has no procedure steps", source, lineno
        )
    return SkillPattern(
        name=name,
        description=description,
        when_to_use=tuple(when_to_use),
        procedure=tuple(procedure),
        example="\n".join(example_lines),
    )


def _parse_front_matter(
    lines: list[str], source: str
) -> tuple[dict[str, str], int]:
    if not lines or lines[0].strip() != "---":
        raise SkillFormatError("missing front-matter delimiter '---'", source, 1)
    fields: dict[str, str] = {}
    for lineno in range(1, len(lines)):
        line = lines[lineno]
        if line.strip() == "---":
            return fields, lineno + 1
        if not line.strip():
            continue
        if ":" not in line:
            raise SkillFormatError(
                f"front-matter line is not 'key: value': {line!r}", source, lineno + 1
            )
        key, _, value = line.partition(":")
        fields[key.strip()] = value.strip()
    raise SkillFormatError("front matter never closed with '---'", source, len(lines))


def parse_skill_file(text: str, source: str = "") -> SkillFile:
    """Parse a complete on-disk skill file (front matter plus patterns)."""
    lines = text.split("\n")
    fields, body_start = _parse_front_matter(lines, source)
    for required in ("subfield", "error_type", "version"):
        if required not in fields:
            raise SkillFormatError(f"front matter missing {required!r}", source, 1)
    try:
        error_type = ErrorType.parse(fields["error_type"])
    except ValueError as exc:
        raise SkillFormatError(str(exc), source, 1) from exc
    try:
        version = int(fields["version"])
    except ValueError as exc:
        raise SkillFormatError(
            f"version is not an integer: {fields['version']!r}", source, 1
        ) from exc
    ids_raw = fields.get("source_question_ids", "")
    ids = frozenset(i.strip() for i in ids_raw.split(",") if i.strip())
    patterns = parse_patterns("\n".join(lines[body_start:]), source)
    if not patterns:
        raise SkillFormatError("skill file contains no pattern sections", source, body_start + 1)
    try:
        return SkillFile(
            subfield=fields["subfield"],
            error_type=error_type,
            patterns=tuple(patterns),
            version=version,
            source_question_ids=ids,
        )
    except ValueError as exc:
        raise SkillFormatError(str(exc), source, 1) from exc


def parse_navigation(text: str, source: str = "") -> NavigationIndex:
    lines = text.split("\n")
    entries: list[NavigationEntry] = []
    path = ""
    summary_lines: list[str] = []
    keywords: list[str] = []
    pattern_names: list[str] = []
    mode = ""
    started = 0

    def flush(lineno: int) -> None:
        nonlocal path, summary_lines, keywords, pattern_names, mode
        if not path:
            return
        entries.append(
            NavigationEntry(
                path=path,
                summary=" ".join(summary_lines).strip(),
                keywords=tuple(keywords),
                pattern_names=tuple(pattern_names),
            )
        )
        path, summary_lines, keywords, pattern_names, mode = "", [], [], [], ""

    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        heading = _SECTION_HEADING.match(line)
        if heading:
            flush(lineno)
            path = heading.group(1)
            started = lineno
            mode = "summary"
            continue
        if not path:
            continue
        keywords_inline = _KEYWORDS.match(stripped)
        if keywords_inline:
            mode = "keywords"
            inline = keywords_inline.group(1).strip()
            if inline:
                keywords.extend(k.strip() for k in inline.split(",") if k.strip())
            continue
        if _PATTERNS_LIST.match(stripped):
            mode = "patterns"
            continue
        bullet = _BULLET.match(stripped)
        if bullet and mode == "keywords":
            keywords.append(bullet.group(1).strip())
            continue
        if bullet and mode == "patterns":
            pattern_names.append(bullet.group(1).strip())
            continue
        if stripped and mode == "summary":
            summary_lines.append(stripped)
    flush(len(lines))
    for entry in entries:
        if not entry.keywords:
            raise SkillFormatError(
                f"index entry {entry.path} has no keywords", source, started
            )
    return NavigationIndex(entries=tuple(entries))


def write_library(lib: SkillLibrary, directory: str | Path) -> None:
    """Write the library to `directory` in the canonical byte-exact layout."""
    violations = validate_library(lib)
    if violations:
        raise ValueError("refusing to write invalid library: " + "; ".join(violations))
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    (root / SKILL_INDEX_NAME).write_text(
        render_navigation(lib.navigation), encoding="utf-8", newline="\n"
    )
    for path in lib.navigation.paths:
        skill = lib.files[path]
        target = root / path
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(render_skill_file(skill), encoding="utf-8", newline="\n")


def load_library(directory: str | Path, library_version: int = 1) -> SkillLibrary:
    """Load a library directory written by `write_library`."""
    root = Path(directory)
    index_path = root / SKILL_INDEX_NAME
    if not index_path.is_file():
        raise SkillFormatError(f"no {SKILL_INDEX_NAME} in {root}", str(index_path), 0)
    nav = parse_navigation(
        index_path.read_text(encoding="utf-8"), str(index_path)
    )
    files: dict[str, SkillFile] = {}
    for entry in nav.entries:
        file_path = root / entry.path
        if not file_path.is_file():
            raise SkillFormatError(
                f"index lists {entry.path} but the file is missing", str(index_path), 0
            )
        files[entry.path] = parse_skill_file(
            file_path.read_text(encoding="utf-8"), str(file_path)
        )
    return SkillLibrary(files=files, navigation=nav, library_version=library_version)


def render_injection_block(path: str, skill: SkillFile) -> str:
    """Render one skill file for prompt injection, headed by its path."""
    body = "\n\n".join(render_pattern(p) for p in skill.patterns)
    return f"# Skill: {path}\n\n{body}"
