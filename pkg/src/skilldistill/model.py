"""Domain types shared across the pipeline and the skill-library path mapping.

Everything here is an immutable value; the refinement loop is the only
writer and produces new library objects rather than mutating old ones.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

UNATTRIBUTED = "UNATTRIBUTED"

_SLUG_KEEP = re.compile(r"[^a-z0-9_]+")
_PATH_RE = re.compile(r"^[a-z0-9_]+/[a-z0-9_]+\.md$")


class ErrorType(Enum):
    """Closed taxonomy of failure categories assigned during annotation."""

    VISUAL_EVIDENCE = "visual_evidence"
    WRONG_METHOD_SELECTION = "wrong_method_selection"
    CONCEPT_CONFUSION = "concept_confusion"
    MISSED_MULTI_STEP_COMPUTATION = "missed_multi_step_computation"
    UNIT_CURRENCY_MISTAKES = "unit_currency_mistakes"
    MISSED_CONSTRAINTS = "missed_constraints"
    WRONG_TARGETS = "wrong_targets"
    WRONG_OUTPUT_FORMAT = "wrong_output_format"
    CODE_EXECUTION_ERRORS = "code_execution_errors"
    OTHER = "other"

    @property
    def slug(self) -> str:
        return self.value

    @classmethod
    def parse(cls, text: str) -> "ErrorType":
        """Parse a taxonomy name, normalizing spaces and hyphens to underscores."""
        normalized = re.sub(r"[\s\-]+", "_", text.strip().lower())
        for member in cls:
            if member.value == normalized:
                return member
        raise ValueError(f"unknown error type: {text!r}")


class Difficulty(Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"


class QType(Enum):
    MULTIPLE_CHOICE = "multiple_choice"
    OPEN_ENDED = "open_ended"


class Condition(Enum):
    WITH_SKILLS = "with_skills"
    WITHOUT_SKILLS = "without_skills"


class GradingRoute(Enum):
    RULE_MC = "rule_mc"
    JUDGE_OPEN = "judge_open"


def slug(text: str) -> str:
    """Normalize free text to a path-safe slug.

    Lowercase, whitespace and hyphen runs become single underscores, any
    other non-alphanumeric character is stripped. Idempotent.
    """
    lowered = re.sub(r"[\s\-]+", "_", text.strip().lower())
    return _SLUG_KEEP.sub("", lowered)


def slug_path(subfield: str, error_type: ErrorType) -> str:
    """Relative library path for a (subfield, error type) pair."""
    if not subfield or not subfield.strip():
        raise ValueError("subfield must be non-empty")
    sub = slug(subfield)
    if not sub:
        raise ValueError(f"subfield {subfield!r} has no sluggable characters")
    return f"{sub}/{error_type.slug}.md"


@dataclass(frozen=True)
class Question:
    """One benchmark item with grouping and stratification metadata."""

    id: str
    group_id: str
    text: str
    context: str
    subfield: str
    difficulty: Difficulty
    qtype: QType
    options: tuple[tuple[str, str], ...]
    gold: str
    is_arithmetic: bool
    language_tag: str

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("question id must be non-empty")
        if self.qtype is QType.MULTIPLE_CHOICE:
            if not self.options:
                raise ValueError(f"question {self.id}: multiple_choice requires options")
            labels = [label for label, _ in self.options]
            if len(set(labels)) != len(labels):
                raise ValueError(f"question {self.id}: option labels must be unique")
            if self.gold not in labels:
                raise ValueError(
                    f"question {self.id}: gold {self.gold!r} is not an option label"
                )

    @property
    def option_labels(self) -> tuple[str, ...]:
        return tuple(label for label, _ in self.options)


@dataclass(frozen=True)
class FailureAnnotation:
    """Teacher's structured diagnosis of one failed question."""

    question_id: str
    subfield: str
    error_type: ErrorType
    root_cause: str

    def __post_init__(self) -> None:
        if not self.subfield.strip():
            raise ValueError(f"annotation for {self.question_id}: subfield is empty")
        if not self.root_cause.strip():
            raise ValueError(f"annotation for {self.question_id}: root_cause is empty")


@dataclass(frozen=True)
class SkillPattern:
    """One named failure scenario: triggers, steps, and an optional example."""

    name: str
    description: str
    when_to_use: tuple[str, ...]
    procedure: tuple[str, ...]
    example: str = ""

    def __post_init__(self) -> None:
        if not self.name.strip():
            raise ValueError("pattern name must be non-empty")
        if not self.procedure:
            raise ValueError(f"pattern {self.name!r}: procedure must be non-empty")


@dataclass(frozen=True)
class SkillFile:
    """All patterns that share one (subfield, error type) pair."""

    subfield: str
    error_type: ErrorType
    patterns: tuple[SkillPattern, ...]
    version: int = 1
    source_question_ids: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if not self.patterns:
            raise ValueError(f"skill file {self.path}: needs at least one pattern")
        names = [p.name for p in self.patterns]
        if len(set(names)) != len(names):
            raise ValueError(f"skill file {self.path}: duplicate pattern names")
        if self.version < 1:
            raise ValueError(f"skill file {self.path}: version must be >= 1")

    @property
    def path(self) -> str:
        return slug_path(self.subfield, self.error_type)

    @property
    def pattern_names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.patterns)


@dataclass(frozen=True)
class NavigationEntry:
    path: str
    summary: str
    keywords: tuple[str, ...]
    pattern_names: tuple[str, ...]


@dataclass(frozen=True)
class NavigationIndex:
    entries: tuple[NavigationEntry, ...] = ()

    def entry_for(self, path: str) -> Optional[NavigationEntry]:
        for entry in self.entries:
            if entry.path == path:
                return entry
        return None

    @property
    def paths(self) -> tuple[str, ...]:
        return tuple(entry.path for entry in self.entries)


@dataclass(frozen=True)
class SkillLibrary:
    """The distilled artifact: files keyed by relative path plus navigation."""

    files: dict[str, SkillFile] = field(default_factory=dict)
    navigation: NavigationIndex = NavigationIndex()
    library_version: int = 1

    def subfields(self) -> tuple[str, ...]:
        return tuple(sorted({f.split("/")[0] for f in self.files}))

    def paths_in_navigation_order(self) -> tuple[str, ...]:
        return self.navigation.paths

    def paths_for_subfield(self, subfield_slug: str) -> tuple[str, ...]:
        return tuple(
            p for p in self.navigation.paths if p.split("/")[0] == subfield_slug
        )


@dataclass(frozen=True)
class PotTrace:
    """Code extracted from a completion and what executing it produced."""

    code: str
    outcome: str
    detail: str = ""


@dataclass(frozen=True)
class EvalRecord:
    """Outcome of evaluating one question under one skill condition."""

    question_id: str
    condition: Condition
    loaded_files: tuple[str, ...]
    raw_completion: str
    extracted_answer: str
    correct: bool
    grading_route: GradingRoute
    pot_trace: Optional[PotTrace] = None

    def __post_init__(self) -> None:
        if self.condition is Condition.WITHOUT_SKILLS and self.loaded_files:
            raise ValueError(
                f"record {self.question_id}: without_skills must not list loaded files"
            )


@dataclass(frozen=True)
class EvidencePartition:
    """Per-iteration split of evaluated training questions into three groups.

    attribution maps every member id to a library path or UNATTRIBUTED.
    """

    q_plus: frozenset[str]
    q_minus: frozenset[str]
    q_gap: frozenset[str]
    attribution: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.q_plus & self.q_minus or self.q_plus & self.q_gap or self.q_minus & self.q_gap:
            raise ValueError("partition groups must be pairwise disjoint")
        members = self.q_plus | self.q_minus | self.q_gap
        missing = members - set(self.attribution)
        if missing:
            raise ValueError(f"attribution missing for: {sorted(missing)}")

    @property
    def members(self) -> frozenset[str]:
        return self.q_plus | self.q_minus | self.q_gap


@dataclass(frozen=True)
class GateDecision:
    """Outcome of one verification-gate attempt on a candidate file."""

    file_path: str
    attempt_index: int
    score: float
    threshold: float
    committed: bool
    candidate_digest: str

    def __post_init__(self) -> None:
        if self.attempt_index < 1:
            raise ValueError("attempt_index must be >= 1")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must be a fraction in [0, 1]")
        if self.committed != (self.score >= self.threshold):
            raise ValueError("committed must hold exactly when score >= threshold")


def classify_outcome(with_correct: bool, without_correct: bool) -> str:
    """2x2 outcome table: which evidence group a question falls into."""
    if with_correct:
        return "q_plus"
    if without_correct:
        return "q_minus"
    return "q_gap"


def partition_from_outcomes(
    outcomes: dict[str, tuple[bool, bool]],
    attribution: Optional[dict[str, str]] = None,
) -> EvidencePartition:
    """Build an EvidencePartition from per-question (with, without) outcomes."""
    groups: dict[str, set[str]] = {"q_plus": set(), "q_minus": set(), "q_gap": set()}
    for qid, (with_ok, without_ok) in outcomes.items():
        groups[classify_outcome(with_ok, without_ok)].add(qid)
    attr = dict(attribution) if attribution else {}
    for qid in outcomes:
        attr.setdefault(qid, UNATTRIBUTED)
    return EvidencePartition(
        q_plus=frozenset(groups["q_plus"]),
        q_minus=frozenset(groups["q_minus"]),
        q_gap=frozenset(groups["q_gap"]),
        attribution=attr,
    )


def validate_library(lib: SkillLibrary) -> list[str]:
    """Check structural invariants; returns one message per violation."""
    violations: list[str] = []
    nav_paths = list(lib.navigation.paths)
    seen: set[str] = set()
    for path in nav_paths:
        if path in seen:
            violations.append(f"{path}: duplicate navigation entry")
        seen.add(path)
        if path not in lib.files:
            violations.append(f"{path}: navigation entry points at a missing file (dangling reference)")
    for path in lib.files:
        if path not in seen:
            violations.append(f"{path}: file present but absent from navigation (unlisted file)")
    for entry in lib.navigation.entries:
        if not entry.keywords:
            violations.append(f"{entry.path}: navigation keywords must be non-empty")
    for path, skill in lib.files.items():
        if not _PATH_RE.match(path):
            violations.append(f"{path}: not a two-level subfield/error_type.md path")
        if path != skill.path:
            violations.append(
                f"{path}: stored under a path that does not match "
                f"slug_path({skill.subfield!r}, {skill.error_type.slug})"
            )
        if not skill.patterns:
            violations.append(f"{path}: skill file has no patterns")
    if lib.library_version < 1:
        violations.append(f"library_version {lib.library_version} must be >= 1")
    return violations
