"""Per-question evaluation: prompting, PoT execution, grading, summaries.

Each question is evaluated independently. Arithmetic questions run through
program-of-thought execution with numeric option mapping; grading is
rule-based for multiple choice and judge-based for open-ended answers.
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence

from . import prompts
from .executor import DEFAULT_TIMEOUT_MS, ExecutionResult, PotExecutor
from .gateway import CompletionRequest, Gateway, GatewayError, Role
from .model import (
    Condition,
    EvalRecord,
    GradingRoute,
    PotTrace,
    QType,
    Question,
    SkillFile,
    SkillLibrary,
)
from .skillfmt import render_injection_block

logger = logging.getLogger(__name__)

_FENCED = re.compile(r"```[^\n]*\n(.*?)```", re.DOTALL)
_NUMBER = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?")
_VERDICT = re.compile(r"VERDICT:\s*(CORRECT|INCORRECT)", re.IGNORECASE)
_CURRENCY = "$€£¥"

NO_ANSWER = ""


class Mode(Enum):
    DIRECT = "direct"
    POT = "pot"


@dataclass(frozen=True)
class PromptBundle:
    system_prompt: str
    user_prompt: str
    injected_paths: tuple[str, ...]
    mode: Mode


@dataclass(frozen=True)
class EvalConfig:
    workers: int = 1
    pot_timeout_ms: int = DEFAULT_TIMEOUT_MS
    selector_mode: str = "bundle"
    max_files: int = 6


def mode_for(q: Question) -> Mode:
    return Mode.POT if q.is_arithmetic else Mode.DIRECT


def build_prompt(q: Question, skills: Sequence[SkillFile], mode: Mode) -> PromptBundle:
    """Assemble the student prompt; skills render before the question."""
    if (mode is Mode.POT) != q.is_arithmetic:
        raise ValueError(
            f"question {q.id}: mode {mode.value} inconsistent with "
            f"is_arithmetic={q.is_arithmetic}"
        )
    injection = "\n\n".join(
        render_injection_block(skill.path, skill) for skill in skills
    )
    return PromptBundle(
        system_prompt=prompts.POT_SYSTEM if mode is Mode.POT else prompts.DIRECT_SYSTEM,
        user_prompt=prompts.student_user_prompt(q, injection),
        injected_paths=tuple(skill.path for skill in skills),
        mode=mode,
    )


def extract_pot_code(completion: str) -> str:
    """Content of the last fenced block, or the whole completion trimmed."""
    blocks = _FENCED.findall(completion)
    if blocks:
        return blocks[-1].strip("\n")
    return completion.strip()


def execute_pot(
    code: str, executor: PotExecutor, timeout_ms: int = DEFAULT_TIMEOUT_MS
) -> ExecutionResult:
    return executor.run(code, timeout_ms=timeout_ms)


def parse_option_number(body: str) -> Optional[float]:
    """First number in an option body after stripping currency formatting."""
    cleaned = body
    for symbol in _CURRENCY:
        cleaned = cleaned.replace(symbol, "")
    cleaned = cleaned.replace(",", "").replace("%", "")
    match = _NUMBER.search(cleaned)
    if match is None:
        return None
    return float(match.group(0))


def map_to_option(
    result: float, options: Sequence[tuple[str, str]]
) -> Optional[str]:
    """Label of the numerically closest option; ties go to the lowest index.

    Returns None when no option body parses as a number.
    """
    best: Optional[tuple[float, str]] = None
    for label, body in options:
        value = parse_option_number(body)
        if value is None:
            continue
        distance = abs(result - value)
        if best is None or distance < best[0]:
            best = (distance, label)
    return best[1] if best else None


def normalize_label(text: str) -> str:
    out = text.strip()
    while out and (out[-1] in ".:" or (out[0] in "([\"'*" and out[-1] in ")]\"'*")):
        if out[-1] in ".:":
            out = out[:-1].strip()
        else:
            out = out[1:-1].strip()
    return out.upper()


def _normalize_body(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip().rstrip(".")).casefold()


def grade_mc(
    predicted: str, gold: str, options: Sequence[tuple[str, str]]
) -> bool:
    """Rule-based exact match over normalized option labels."""
    predicted_label = normalize_label(predicted)
    gold_label = normalize_label(gold)
    labels = {normalize_label(label) for label, _ in options}
    if predicted_label not in labels:
        wanted = _normalize_body(predicted)
        for label, body in options:
            if _normalize_body(body) == wanted:
                predicted_label = normalize_label(label)
                break
    return predicted_label == gold_label


def judge_verdict(
    q: Question, predicted: str, gateway: Gateway
) -> tuple[bool, bool]:
    """(verdict, parse_failed): judge the answer, retrying once on no verdict."""
    user = prompts.judge_user_prompt(q, predicted)
    for attempt in range(2):
        suffix = (
            ""
            if attempt == 0
            else "\n\nYour previous reply had no verdict line. End with "
            "'VERDICT: CORRECT' or 'VERDICT: INCORRECT'."
        )
        reply = gateway.complete(
            CompletionRequest(
                role=Role.JUDGE,
                system_prompt=prompts.JUDGE_SYSTEM,
                user_prompt=user + suffix,
            )
        )
        matches = _VERDICT.findall(reply)
        if matches:
            return matches[-1].upper() == "CORRECT", False
    logger.warning("judge-parse-failure for question %s: graded incorrect", q.id)
    return False, True


def grade_open(q: Question, predicted: str, gateway: Gateway) -> bool:
    verdict, _ = judge_verdict(q, predicted, gateway)
    return verdict


def _llm_map_to_option(result: str, q: Question, gateway: Gateway) -> Optional[str]:
    try:
        reply = gateway.complete(
            CompletionRequest(
                role=Role.SELECTOR,
                system_prompt=prompts.MAPPER_SYSTEM,
                user_prompt=prompts.mapper_user_prompt(result, q),
            )
        )
    except GatewayError as exc:
        logger.warning("LLM option mapper unavailable for %s: %s", q.id, exc)
        return None
    label = normalize_label(reply)
    for option_label, _ in q.options:
        if normalize_label(option_label) == label:
            return option_label
    return None


def evaluate_question(
    q: Question,
    skills: Sequence[SkillFile],
    gateway: Gateway,
    executor: PotExecutor,
    config: EvalConfig = EvalConfig(),
    use_llm_mapper: bool = True,
) -> EvalRecord:
    """Evaluate one question end to end; failures land in the record."""
    mode = mode_for(q)
    bundle = build_prompt(q, skills, mode)
    condition = Condition.WITH_SKILLS if skills else Condition.WITHOUT_SKILLS
    route = (
        GradingRoute.RULE_MC
        if q.qtype is QType.MULTIPLE_CHOICE
        else GradingRoute.JUDGE_OPEN
    )

    def record(
        completion: str, answer: str, correct: bool, trace: Optional[PotTrace]
    ) -> EvalRecord:
        return EvalRecord(
            question_id=q.id,
            condition=condition,
            loaded_files=bundle.injected_paths if skills else (),
            raw_completion=completion,
            extracted_answer=answer,
            correct=correct,
            grading_route=route,
            pot_trace=trace,
        )

    try:
        completion = gateway.complete(
            CompletionRequest(
                role=Role.STUDENT,
                system_prompt=bundle.system_prompt,
                user_prompt=bundle.user_prompt,
            )
        )
    except GatewayError as exc:
        logger.warning("student call failed for %s: %s", q.id, exc)
        return record("", NO_ANSWER, False, None)

    if mode is Mode.DIRECT:
        if route is GradingRoute.RULE_MC:
            return record(
                completion, completion.strip(), grade_mc(completion, q.gold, q.options), None
            )
        try:
            correct = grade_open(q, completion.strip(), gateway)
        except GatewayError as exc:
            logger.warning("judge call failed for %s: %s", q.id, exc)
            correct = False
        return record(completion, completion.strip(), correct, None)

    code = extract_pot_code(completion)
    if not code:
        trace = PotTrace(code="", outcome="runtime_error", detail="empty extraction")
        return record(completion, NO_ANSWER, False, trace)
    result = execute_pot(code, executor, timeout_ms=config.pot_timeout_ms)
    if not result.ok:
        assert result.error_class is not None
        trace = PotTrace(code=code, outcome=result.error_class.value, detail=result.detail)
        return record(completion, NO_ANSWER, False, trace)
    trace = PotTrace(code=code, outcome="ok", detail=result.value)

    if route is GradingRoute.RULE_MC:
        label: Optional[str] = None
        try:
            label = map_to_option(float(result.value), q.options)
        except ValueError:
            label = None
        if label is None and use_llm_mapper:
            label = _llm_map_to_option(result.value, q, gateway)
        if label is None:
            logger.warning("question %s: PoT value %r unmapped", q.id, result.value)
            return record(completion, NO_ANSWER, False, trace)
        return record(completion, label, grade_mc(label, q.gold, q.options), trace)

    try:
        correct = grade_open(q, result.value, gateway)
    except GatewayError as exc:
        logger.warning("judge call failed for %s: %s", q.id, exc)
        correct = False
    return record(completion, result.value, correct, trace)


def evaluate_set(
    questions: Sequence[Question],
    library: Optional[SkillLibrary],
    gateway: Gateway,
    executor: PotExecutor,
    config: EvalConfig = EvalConfig(),
    select_fn: Optional[Callable[[Question], list[str]]] = None,
) -> tuple[list[EvalRecord], dict]:
    """Evaluate a question set; returns records in input order plus a summary."""
    from .selector import select_skills

    def paths_for(q: Question) -> list[str]:
        if library is None:
            return []
        if select_fn is not None:
            return select_fn(q)
        return select_skills(
            q, library, gateway, mode=config.selector_mode, max_files=config.max_files
        )

    def one(q: Question) -> EvalRecord:
        paths = paths_for(q)
        skills = [library.files[p] for p in paths] if library else []
        return evaluate_question(q, skills, gateway, executor, config)

    if config.workers <= 1:
        records = [one(q) for q in questions]
    else:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            records = list(pool.map(one, questions))
    return records, summarize(records, questions)


def _accuracy(correct: int, total: int) -> Optional[float]:
    if total == 0:
        return None
    return round(100.0 * correct / total, 2)


def render_accuracy(value: Optional[float]) -> str:
    return "—" if value is None else f"{value:.2f}"


def summarize(records: Sequence[EvalRecord], questions: Sequence[Question]) -> dict:
    by_id = {q.id: q for q in questions}
    total = len(records)
    correct = sum(1 for r in records if r.correct)

    def breakdown(key_fn) -> dict:
        buckets: dict[str, dict[str, int]] = {}
        for r in records:
            q = by_id[r.question_id]
            bucket = buckets.setdefault(key_fn(q), {"total": 0, "correct": 0})
            bucket["total"] += 1
            bucket["correct"] += int(r.correct)
        return {
            key: {
                **counts,
                "accuracy": _accuracy(counts["correct"], counts["total"]),
            }
            for key, counts in sorted(buckets.items())
        }

    return {
        "total": total,
        "correct": correct,
        "accuracy": _accuracy(correct, total),
        "accuracy_display": render_accuracy(_accuracy(correct, total)),
        "by_qtype": breakdown(lambda q: q.qtype.value),
        "by_difficulty": breakdown(lambda q: q.difficulty.value),
        "by_subfield": breakdown(lambda q: q.subfield or "(none)"),
    }
