"""Prompt templates for the student, teacher, judge, and selector roles.

Templates are deterministic string assembly; the anchor constants are
shared with tests so scripted mock backends can key on them.
"""

from __future__ import annotations

from typing import Sequence

from .model import ErrorType, Question, QType

QUESTION_ANCHOR = "Question:"
CONTEXT_ANCHOR = "Context:"
OPTIONS_ANCHOR = "Options:"
ATTRIBUTION_ANCHOR = "Question under review:"
EXPANSION_ANCHOR = "Skill file to expand:"
REPAIR_ANCHOR = "Skill file to repair:"
SYNTHESIS_ANCHOR = "Failure cluster:"
ANNOTATION_ANCHOR = "Failed question:"
SELECTOR_ANCHOR = "Route this question:"
JUDGE_ANCHOR = "Candidate answer:"
MAPPER_ANCHOR = "Numeric result:"

DIRECT_SYSTEM = (
    "You are an expert financial analyst answering one exam question. "
    "Reply with the final answer only: for multiple-choice questions output "
    "just the option label (for example: B); for open-ended questions output "
    "just the answer with no explanation."
)

POT_SYSTEM = (
    "You are an expert financial analyst. Solve the question by writing one "
    "Python program inside a single fenced code block. The program's final "
    "line must be a bare expression that evaluates to the numeric answer. "
    "Do not call print() and do not write anything outside the code block."
)

ANNOTATION_SYSTEM = (
    "You are a senior instructor diagnosing why a model answered a financial "
    "question incorrectly. Identify the underlying knowledge gap, not a "
    "surface description of what was computed."
)

SYNTHESIS_SYSTEM = (
    "You are a senior instructor writing reusable skill guidance from a "
    "cluster of related failures. Produce one pattern per distinct failure "
    "scenario; do not duplicate patterns."
)

REFINE_SYSTEM = (
    "You are a senior instructor maintaining a library of skill files. "
    "Return the complete revised skill file as Markdown."
)

ATTRIBUTION_SYSTEM = (
    "You decide which loaded skill file was most responsible for a model's "
    "outcome on one question. Answer with exactly one path from the list, "
    "and nothing else."
)

SELECTOR_SYSTEM = (
    "You route financial questions to skill files using the library index "
    "below. Follow the output instructions exactly."
)

JUDGE_SYSTEM = (
    "You are a strict grader for open-ended financial questions. Compare the "
    "candidate answer with the reference answer for semantic equivalence. "
    "End your reply with one line: 'VERDICT: CORRECT' or 'VERDICT: INCORRECT'."
)

MAPPER_SYSTEM = (
    "You map a computed numeric result to the closest multiple-choice "
    "option. Reply with just the option label."
)

ERROR_TAXONOMY_LINES = "\n".join(f"- {member.slug}" for member in ErrorType)


def question_block(q: Question) -> str:
    parts = []
    if q.context:
        parts.append(f"{CONTEXT_ANCHOR}\n{q.context}")
    parts.append(f"{QUESTION_ANCHOR}\n{q.text}")
    if q.qtype is QType.MULTIPLE_CHOICE:
        option_lines = "\n".join(f"{label}. {body}" for label, body in q.options)
        parts.append(f"{OPTIONS_ANCHOR}\n{option_lines}")
    return "\n\n".join(parts)


def student_user_prompt(q: Question, injection: str) -> str:
    block = question_block(q)
    if injection:
        return injection + "\n\n" + block
    return block


def annotation_user_prompt(q: Question, completion: str) -> str:
    return (
        f"{ANNOTATION_ANCHOR}\n{question_block(q)}\n\n"
        f"Model's incorrect answer and reasoning trace:\n{completion}\n\n"
        f"Ground-truth answer: {q.gold}\n\n"
        "Classify the failure. error_type must be one of:\n"
        f"{ERROR_TAXONOMY_LINES}\n\n"
        "subfield names the financial subdomain; use \"common\" for "
        "cross-cutting failures such as output formatting or reading "
        "evidence. root_cause states the missing knowledge in one or two "
        "sentences.\n\n"
        "Reply with ONLY a JSON object with fields subfield, error_type, "
        "root_cause."
    )


def synthesis_user_prompt(
    subfield_slug: str,
    error_type: ErrorType,
    cases: Sequence[tuple[Question, str, str]],
) -> str:
    """cases: (question, reasoning trace, root cause) per cluster member."""
    rendered = []
    for i, (q, trace, root_cause) in enumerate(cases, start=1):
        rendered.append(
            f"### Case {i}\n{question_block(q)}\n\n"
            f"Incorrect attempt:\n{trace}\n\n"
            f"Ground truth: {q.gold}\n\n"
            f"Diagnosed root cause: {root_cause}"
        )
    cases_text = "\n\n".join(rendered)
    return (
        f"{SYNTHESIS_ANCHOR} {subfield_slug} / {error_type.slug}\n\n"
        f"{cases_text}\n\n"
        "Write skill guidance that would prevent these failures. Start with "
        "one line '**Keywords:** k1, k2, ...' (at most 8 routing keywords), "
        "then one '## Pattern: <name>' section per distinct failure "
        "scenario. Each pattern must contain '**Addresses:** <knowledge "
        "gap>', a '**When to use:**' bullet list, a '**Procedure:**' "
        "numbered list, and optionally one fenced code or worked example "
        "block."
    )


def expansion_user_prompt(
    path: str, current_text: str, cases: Sequence[tuple[Question, str]]
) -> str:
    """cases: (question, failing trace) attributed to this file."""
    rendered = []
    for i, (q, trace) in enumerate(cases, start=1):
        rendered.append(
            f"### Uncovered case {i}\n{question_block(q)}\n\n"
            f"Failing attempt:\n{trace}\n\n"
            f"Ground truth: {q.gold}"
        )
    return (
        f"{EXPANSION_ANCHOR} {path}\n\n"
        f"Current contents:\n\n{current_text}\n\n"
        f"{'-' * 8}\n\n"
        "The cases below stay wrong even with this file loaded. Diagnose why "
        "coverage fails (missing procedures, trigger conditions too narrow "
        "to fire, or a missing worked example) and return the COMPLETE "
        "revised file: refine an existing pattern or add a new one. Keep the "
        "same section format.\n\n" + "\n\n".join(rendered)
    )


def repair_user_prompt(
    path: str,
    current_text: str,
    positives: Sequence[tuple[Question, str]],
    negatives: Sequence[tuple[Question, str]],
) -> str:
    pos = [
        f"### Working case {i}\n{question_block(q)}\n\nCorrect attempt:\n{trace}"
        for i, (q, trace) in enumerate(positives, start=1)
    ]
    neg = [
        f"### Regressed case {i}\n{question_block(q)}\n\n"
        f"Now-incorrect attempt:\n{trace}\n\nGround truth: {q.gold}"
        for i, (q, trace) in enumerate(negatives, start=1)
    ]
    return (
        f"{REPAIR_ANCHOR} {path}\n\n"
        f"Current contents:\n\n{current_text}\n\n"
        f"{'-' * 8}\n\n"
        "This file's guidance keeps the working cases correct but causes the "
        "regressed cases to fail. Remove or narrow the guidance responsible "
        "for the regressions while preserving the reasoning that the working "
        "cases rely on. Return the COMPLETE revised file in the same "
        "format.\n\n"
        + "\n\n".join(pos + neg)
    )


def attribution_user_prompt(
    q: Question, completion: str, correct: bool, loaded_paths: Sequence[str]
) -> str:
    outcome = "correct" if correct else "incorrect"
    paths = "\n".join(f"- {p}" for p in loaded_paths)
    return (
        f"{ATTRIBUTION_ANCHOR}\n{question_block(q)}\n\n"
        f"The model answered this question {outcome} with these skill files "
        f"loaded:\n{paths}\n\n"
        f"Model output:\n{completion}\n\n"
        "Which single file is most responsible for the outcome? Reply with "
        "exactly one path from the list above."
    )


def selector_bundle_user_prompt(index_text: str, q: Question) -> str:
    return (
        f"Library index:\n\n{index_text}\n\n"
        f"{SELECTOR_ANCHOR}\n{q.text}\n\n"
        "Name the single best-matching subfield directory from the index "
        "keywords. Reply with just the subfield name."
    )


def selector_per_file_user_prompt(index_text: str, q: Question) -> str:
    return (
        f"Library index:\n\n{index_text}\n\n"
        f"{SELECTOR_ANCHOR}\n{q.text}\n\n"
        "List the skill file paths worth loading for this question, one per "
        "line, most relevant first. Paths must come from the index."
    )


def judge_user_prompt(q: Question, predicted: str) -> str:
    return (
        f"{question_block(q)}\n\n"
        f"Reference answer: {q.gold}\n\n"
        f"{JUDGE_ANCHOR}\n{predicted}\n\n"
        "Is the candidate answer correct? End with 'VERDICT: CORRECT' or "
        "'VERDICT: INCORRECT'."
    )


def mapper_user_prompt(result: str, q: Question) -> str:
    option_lines = "\n".join(f"{label}. {body}" for label, body in q.options)
    return (
        f"{MAPPER_ANCHOR} {result}\n\n"
        f"{OPTIONS_ANCHOR}\n{option_lines}\n\n"
        "Reply with the label of the closest option."
    )
