"""Warm-up: distill the initial skill library from baseline failures.

Every training question is evaluated with no skills injected; the teacher
annotates each failure, annotations are clustered by (subfield, error
type), and one skill file is synthesized per cluster together with the
navigation index.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from . import prompts
from .evaluate import EvalConfig, evaluate_question
from .executor import PotExecutor
from .gateway import (
    CompletionRequest,
    Gateway,
    Role,
    StructuredParseError,
)
from .model import (
    ErrorType,
    EvalRecord,
    FailureAnnotation,
    NavigationEntry,
    NavigationIndex,
    Question,
    SkillFile,
    SkillLibrary,
    SkillPattern,
    slug,
    slug_path,
)
from .skillfmt import parse_patterns, write_library

logger = logging.getLogger(__name__)

MAX_KEYWORDS = 8
_KEYWORDS_LINE = re.compile(r"^\*\*Keywords:?\*\*:?\s*(.+)$", re.MULTILINE)

ANNOTATION_SCHEMA = [
    ("subfield", "string"),
    ("error_type", ("enum", [m.slug for m in ErrorType])),
    ("root_cause", "string"),
]


@dataclass(frozen=True)
class ClusterCase:
    annotation: FailureAnnotation
    question: Question
    record: EvalRecord


def collect_failures(
    train: Sequence[Question],
    gateway: Gateway,
    executor: PotExecutor,
    config: EvalConfig = EvalConfig(),
) -> list[tuple[Question, EvalRecord]]:
    """Evaluate every training question skill-free; keep the incorrect ones."""
    failures = []
    for q in train:
        record = evaluate_question(q, [], gateway, executor, config)
        if not record.correct:
            failures.append((q, record))
    return failures


def annotate_failure(
    gateway: Gateway, q: Question, record: EvalRecord
) -> Optional[FailureAnnotation]:
    """Ask the teacher for a structured diagnosis; None when unparseable."""
    request = CompletionRequest(
        role=Role.TEACHER,
        system_prompt=prompts.ANNOTATION_SYSTEM,
        user_prompt=prompts.annotation_user_prompt(q, record.raw_completion),
    )
    try:
        fields = gateway.complete_structured(request, ANNOTATION_SCHEMA)
    except StructuredParseError as exc:
        logger.warning("annotation dropped for %s: %s", q.id, exc)
        return None
    return FailureAnnotation(
        question_id=q.id,
        subfield=fields["subfield"],
        error_type=ErrorType(fields["error_type"]),
        root_cause=fields["root_cause"],
    )


def cluster(
    cases: Sequence[ClusterCase],
) -> dict[tuple[str, ErrorType], list[ClusterCase]]:
    """Group cases by slug-normalized (subfield, error type); sorted keys."""
    grouped: dict[tuple[str, ErrorType], list[ClusterCase]] = {}
    for case in cases:
        key = (slug(case.annotation.subfield), case.annotation.error_type)
        grouped.setdefault(key, []).append(case)
    return {key: grouped[key] for key in sorted(grouped, key=lambda k: (k[0], k[1].slug))}


def parse_keywords(text: str) -> list[str]:
    match = _KEYWORDS_LINE.search(text)
    if not match:
        return []
    return [k.strip() for k in match.group(1).split(",") if k.strip()]


def merge_patterns(patterns: Sequence[SkillPattern]) -> tuple[SkillPattern, ...]:
    """Collapse same-name patterns; first occurrence wins, extras fold in."""
    merged: dict[str, SkillPattern] = {}
    for pattern in patterns:
        existing = merged.get(pattern.name)
        if existing is None:
            merged[pattern.name] = pattern
            continue
        triggers = list(existing.when_to_use)
        triggers += [t for t in pattern.when_to_use if t not in triggers]
        steps = list(existing.procedure)
        steps += [s for s in pattern.procedure if s not in steps]
        merged[pattern.name] = SkillPattern(
            name=existing.name,
            description=existing.description or pattern.description,
            when_to_use=tuple(triggers),
            procedure=tuple(steps),
            example=existing.example or pattern.example,
        )
    return tuple(merged.values())


def fallback_pattern(subfield_slug: str, error_type: ErrorType, text: str) -> SkillPattern:
    """Wrap an unparseable synthesis reply verbatim so nothing is lost."""
    topic = error_type.slug.replace("_", " ")
    return SkillPattern(
        name="Unstructured guidance",
        description=f"Guidance for {topic} failures in {subfield_slug}.",
        when_to_use=(f"Questions about {subfield_slug.replace('_', ' ')}",),
        procedure=("Apply the guidance quoted in the example block.",),
        example=text.strip(),
    )


def synthesize_skill_file(
    gateway: Gateway,
    key: tuple[str, ErrorType],
    cases: Sequence[ClusterCase],
) -> tuple[SkillFile, list[str]]:
    """One teacher call per cluster; returns the file and routing keywords."""
    subfield_slug, error_type = key
    if not cases:
        raise ValueError("cluster must be non-empty")
    case_tuples = [
        (c.question, c.record.raw_completion, c.annotation.root_cause) for c in cases
    ]
    user = prompts.synthesis_user_prompt(subfield_slug, error_type, case_tuples)
    request = CompletionRequest(
        role=Role.TEACHER, system_prompt=prompts.SYNTHESIS_SYSTEM, user_prompt=user
    )
    reply = gateway.complete(request)
    patterns, keywords = _parse_synthesis(reply)
    if not patterns:
        retry = CompletionRequest(
            role=Role.TEACHER,
            system_prompt=prompts.SYNTHESIS_SYSTEM,
            user_prompt=user
            + "\n\nYour previous reply had no usable '## Pattern:' sections. "
            "Follow the requested format exactly.",
        )
        reply = gateway.complete(retry)
        patterns, keywords = _parse_synthesis(reply)
    if not patterns:
        logger.warning(
            "synthesis unparseable for %s/%s; keeping verbatim fallback",
            subfield_slug,
            error_type.slug,
        )
        patterns = [fallback_pattern(subfield_slug, error_type, reply)]
    skill = SkillFile(
        subfield=subfield_slug,
        error_type=error_type,
        patterns=merge_patterns(patterns),
        version=1,
        source_question_ids=frozenset(c.question.id for c in cases),
    )
    return skill, keywords[:MAX_KEYWORDS]


def _parse_synthesis(reply: str) -> tuple[list[SkillPattern], list[str]]:
    try:
        patterns = parse_patterns(reply)
    except ValueError:
        patterns = []
    return patterns, parse_keywords(reply)


def file_summary(skill: SkillFile) -> str:
    topic = skill.error_type.slug.replace("_", " ")
    count = len(skill.patterns)
    noun = "pattern" if count == 1 else "patterns"
    return f"{count} {noun} addressing {topic} failures in {skill.subfield}."


def build_navigation(
    files: dict[str, SkillFile], keywords_by_path: Optional[dict[str, list[str]]] = None
) -> NavigationIndex:
    """One entry per file, sorted by path; keywords fall back to the subfield."""
    keywords_by_path = keywords_by_path or {}
    entries = []
    for path in sorted(files):
        skill = files[path]
        keywords = [slug(skill.subfield)]
        for keyword in keywords_by_path.get(path, []):
            if keyword not in keywords:
                keywords.append(keyword)
        entries.append(
            NavigationEntry(
                path=path,
                summary=file_summary(skill),
                keywords=tuple(keywords[:MAX_KEYWORDS]),
                pattern_names=skill.pattern_names,
            )
        )
    return NavigationIndex(entries=tuple(entries))


def run_warmup(
    train: Sequence[Question],
    gateway: Gateway,
    executor: PotExecutor,
    config: EvalConfig = EvalConfig(),
    out_dir: Optional[str | Path] = None,
    min_cluster_size: int = 1,
) -> tuple[SkillLibrary, dict]:
    """Full warm-up pass; optionally writes the library to out_dir."""
    failures = collect_failures(train, gateway, executor, config)
    cases = []
    dropped = 0
    for q, record in failures:
        annotation = annotate_failure(gateway, q, record)
        if annotation is None:
            dropped += 1
            continue
        cases.append(ClusterCase(annotation=annotation, question=q, record=record))

    clusters = cluster(cases)
    files: dict[str, SkillFile] = {}
    keywords_by_path: dict[str, list[str]] = {}
    for key, members in clusters.items():
        if len(members) < min_cluster_size:
            logger.info("cluster %s below minimum size; skipped", key)
            continue
        skill, keywords = synthesize_skill_file(gateway, key, members)
        path = slug_path(key[0], key[1])
        files[path] = skill
        keywords_by_path[path] = keywords

    library = SkillLibrary(
        files=files,
        navigation=build_navigation(files, keywords_by_path),
        library_version=1,
    )
    manifest = {
        "train_questions": len(train),
        "failures": len(failures),
        "annotations_kept": len(cases),
        "annotations_dropped": dropped,
        "clusters": len(clusters),
        "files": len(files),
        "library_version": library.library_version,
    }
    if not files:
        logger.warning("warm-up produced an empty library (no usable failures)")
    if out_dir is not None:
        write_library(library, out_dir)
    return library, manifest
