"""Corpus loading, language filtering, context propagation, and splits.

Input is newline-delimited JSON, one record per question. Splits are
stratified, seeded, and deterministic; per-stratum train counts use
round-half-up with a bounded global drift correction.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import dataclass, replace
from pathlib import Path

from .model import Difficulty, QType, Question

logger = logging.getLogger(__name__)

DEFAULT_TRAIN_FRACTION = 0.6
DEFAULT_STRATA = ("difficulty", "qtype")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Corpus:
    questions: tuple[Question, ...]
    source_digest: str = ""

    def __len__(self) -> int:
        return len(self.questions)

    def ids(self) -> tuple[str, ...]:
        return tuple(q.id for q in self.questions)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = DEFAULT_TRAIN_FRACTION
    strata_keys: tuple[str, ...] = DEFAULT_STRATA
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        unknown = set(self.strata_keys) - {"difficulty", "qtype"}
        if unknown:
            raise ValueError(f"unknown strata keys: {sorted(unknown)}")


def question_from_record(record: dict, where: str) -> Question:
    try:
        options = tuple(
            (opt["label"], opt["body"]) for opt in record.get("options", [])
        )
        return Question(
            id=str(record["id"]),
            group_id=str(record.get("group_id", record["id"])),
            text=record["question"],
            context=record.get("context", ""),
            subfield=record.get("subfield", ""),
            difficulty=Difficulty(record["difficulty"]),
            qtype=QType(record["qtype"]),
            options=options,
            gold=str(record["gold"]),
            is_arithmetic=bool(record["is_arithmetic"]),
            language_tag=record.get("language", ""),
        )
    except KeyError as exc:
        raise CorpusError(f"{where}: missing field {exc.args[0]!r}") from exc
    except (ValueError, TypeError) as exc:
        raise CorpusError(f"{where}: {exc}") from exc


def question_to_record(q: Question) -> dict:
    return {
        "id": q.id,
        "group_id": q.group_id,
        "question": q.text,
        "context": q.context,
        "subfield": q.subfield,
        "difficulty": q.difficulty.value,
        "qtype": q.qtype.value,
        "options": [{"label": label, "body": body} for label, body in q.options],
        "gold": q.gold,
        "is_arithmetic": q.is_arithmetic,
        "language": q.language_tag,
    }


def load_corpus(path: str | Path) -> Corpus:
    raw = Path(path).read_bytes()
    digest = hashlib.sha256(raw).hexdigest()
    questions: list[Question] = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(raw.decode("utf-8").split("\n"), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"line {lineno}: invalid JSON: {exc}") from exc
        question = question_from_record(record, f"line {lineno}")
        if question.id in seen:
            raise CorpusError(
                f"line {lineno}: duplicate id {question.id!r} "
                f"(first seen on line {seen[question.id]})"
            )
        seen[question.id] = lineno
        questions.append(question)
    return Corpus(questions=tuple(questions), source_digest=digest)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    lines = [json.dumps(question_to_record(q), ensure_ascii=False) for q in corpus.questions]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def filter_language(corpus: Corpus, tag: str) -> Corpus:
    kept = tuple(q for q in corpus.questions if q.language_tag == tag)
    return Corpus(questions=kept, source_digest=corpus.source_digest)


def propagate_context(corpus: Corpus) -> Corpus:
    """Copy the first group member's context into empty sibling contexts."""
    first_context: dict[str, str] = {}
    for q in corpus.questions:
        if q.group_id not in first_context:
            first_context[q.group_id] = q.context
    updated = tuple(
        replace(q, context=first_context[q.group_id]) if not q.context else q
        for q in corpus.questions
    )
    return Corpus(questions=updated, source_digest=corpus.source_digest)


def _stratum_key(q: Question, keys: tuple[str, ...]) -> tuple[str, ...]:
    values = []
    for key in keys:
        if key == "difficulty":
            values.append(q.difficulty.value)
        elif key == "qtype":
            values.append(q.qtype.value)
    return tuple(values)


def _round_half_up(x: float) -> int:
    return int(x + 0.5)


def stratified_split(corpus: Corpus, spec: SplitSpec) -> tuple[Corpus, Corpus]:
    """Deterministic seeded split; per-stratum round-half-up train counts.

    If the summed per-stratum counts drift from the global round-half-up
    target by more than one item, boundary items of the largest strata are
    moved until the drift is within one.
    """
    strata: dict[tuple[str, ...], list[Question]] = {}
    for q in corpus.questions:
        strata.setdefault(_stratum_key(q, spec.strata_keys), []).append(q)

    rng = random.Random(spec.seed)
    shuffled: dict[tuple[str, ...], list[Question]] = {}
    take: dict[tuple[str, ...], int] = {}
    for key in sorted(strata):
        members = list(strata[key])
        rng.shuffle(members)
        shuffled[key] = members
        take[key] = _round_half_up(spec.train_fraction * len(members))

    total = len(corpus.questions)
    target = _round_half_up(spec.train_fraction * total)
    while abs(sum(take.values()) - target) > 1:
        drift = sum(take.values()) - target
        direction = -1 if drift > 0 else 1
        movable = [
            key
            for key in sorted(strata, key=lambda k: (-len(strata[k]), k))
            if 0 <= take[key] + direction <= len(strata[key])
        ]
        if not movable:
            break
        take[movable[0]] += direction

    train: list[Question] = []
    test: list[Question] = []
    for key in sorted(shuffled):
        members = shuffled[key]
        train.extend(members[: take[key]])
        test.extend(members[take[key] :])

    order = {q.id: i for i, q in enumerate(corpus.questions)}
    train.sort(key=lambda q: order[q.id])
    test.sort(key=lambda q: order[q.id])
    return (
        Corpus(questions=tuple(train), source_digest=corpus.source_digest),
        Corpus(questions=tuple(test), source_digest=corpus.source_digest),
    )


def split_manifest(
    corpus: Corpus, spec: SplitSpec, train: Corpus, test: Corpus
) -> dict:
    strata_counts: dict[str, dict[str, int]] = {}
    for name, part in (("train", train), ("test", test)):
        for q in part.questions:
            key = "/".join(_stratum_key(q, spec.strata_keys))
            strata_counts.setdefault(key, {"train": 0, "test": 0})
            strata_counts[key][name] += 1
    return {
        "seed": spec.seed,
        "train_fraction": spec.train_fraction,
        "strata_keys": list(spec.strata_keys),
        "total": len(corpus),
        "train_total": len(train),
        "test_total": len(test),
        "per_stratum": {k: strata_counts[k] for k in sorted(strata_counts)},
        "source_digest": corpus.source_digest,
    }
