"""Dual-phase gated refinement of a skill library.

Each iteration: evaluate every training question with and without the
current library, partition the outcomes, attribute them to files, run a
coverage phase (expand files whose attributed gap cases stay wrong), a
post-coverage verification pass, and a safety phase (repair files blamed
for regressions), with every candidate update passing a verification gate
before commit and rolling back after n_max failed attempts.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

from . import prompts
from .evaluate import EvalConfig, evaluate_question
from .executor import PotExecutor
from .gateway import CompletionRequest, Gateway, Role
from .model import (
    UNATTRIBUTED,
    ErrorType,
    EvalRecord,
    EvidencePartition,
    GateDecision,
    NavigationEntry,
    NavigationIndex,
    Question,
    SkillFile,
    SkillLibrary,
    SkillPattern,
    partition_from_outcomes,
    slug,
    slug_path,
)
from .selector import select_skills
from .skillfmt import parse_patterns, render_skill_file, write_library
from .warmup import annotate_failure, file_summary, merge_patterns

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RefinementConfig:
    iterations: int = 2
    tau_cov: float = 0.5
    tau_safe_retain: float = 0.9
    n_max: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0.0 < self.tau_cov <= 1.0:
            raise ValueError("tau_cov must be in (0, 1]")
        if not 0.0 < self.tau_safe_retain <= 1.0:
            raise ValueError("tau_safe_retain must be in (0, 1]")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")


@dataclass(frozen=True)
class IterationReport:
    iteration: int
    sizes_before: tuple[int, int, int]
    sizes_after: tuple[int, int, int]
    coverage_decisions: tuple[GateDecision, ...]
    safety_decisions: tuple[GateDecision, ...]
    library_version_before: int
    library_version_after: int
    fresh_annotation_routes: dict[str, str]

    def __post_init__(self) -> None:
        commits = sum(
            1
            for d in self.coverage_decisions + self.safety_decisions
            if d.committed
        )
        if self.library_version_after != self.library_version_before + commits:
            raise ValueError(
                "library_version must advance exactly once per committed decision"
            )

    def to_dict(self) -> dict:
        def decisions(items: tuple[GateDecision, ...]) -> list[dict]:
            return [
                {
                    "file_path": d.file_path,
                    "attempt_index": d.attempt_index,
                    "score": d.score,
                    "threshold": d.threshold,
                    "committed": d.committed,
                    "candidate_digest": d.candidate_digest,
                }
                for d in items
            ]

        return {
            "iteration": self.iteration,
            "sizes_before": {
                "q_plus": self.sizes_before[0],
                "q_minus": self.sizes_before[1],
                "q_gap": self.sizes_before[2],
            },
            "sizes_after": {
                "q_plus": self.sizes_after[0],
                "q_minus": self.sizes_after[1],
                "q_gap": self.sizes_after[2],
            },
            "coverage_decisions": decisions(self.coverage_decisions),
            "safety_decisions": decisions(self.safety_decisions),
            "library_version_before": self.library_version_before,
            "library_version_after": self.library_version_after,
            "fresh_annotation_routes": dict(self.fresh_annotation_routes),
        }


def candidate_digest(candidate: SkillFile) -> str:
    return hashlib.sha256(render_skill_file(candidate).encode("utf-8")).hexdigest()


def collect_evidence(
    train: Sequence[Question],
    lib: SkillLibrary,
    gateway: Gateway,
    executor: PotExecutor,
    config: EvalConfig = EvalConfig(),
) -> tuple[EvidencePartition, dict[str, EvalRecord], dict[str, EvalRecord]]:
    """Evaluate each question with and without skills; classify outcomes."""

    def pair(q: Question) -> tuple[str, EvalRecord, EvalRecord]:
        paths = select_skills(
            q, lib, gateway, mode=config.selector_mode, max_files=config.max_files
        )
        skills = [lib.files[p] for p in paths]
        with_record = evaluate_question(q, skills, gateway, executor, config)
        without_record = evaluate_question(q, [], gateway, executor, config)
        return q.id, with_record, without_record

    if config.workers <= 1:
        results = [pair(q) for q in train]
    else:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(pair, train))

    with_records = {qid: w for qid, w, _ in results}
    without_records = {qid: wo for qid, _, wo in results}
    outcomes = {
        qid: (with_records[qid].correct, without_records[qid].correct)
        for qid, _, _ in results
    }
    return partition_from_outcomes(outcomes), with_records, without_records


def attribute(
    gateway: Gateway, q: Question, with_record: EvalRecord
) -> str:
    """Teacher names the single loaded file most responsible for the outcome."""
    if not with_record.loaded_files:
        return UNATTRIBUTED
    reply = gateway.complete(
        CompletionRequest(
            role=Role.TEACHER,
            system_prompt=prompts.ATTRIBUTION_SYSTEM,
            user_prompt=prompts.attribution_user_prompt(
                q, with_record.raw_completion, with_record.correct, with_record.loaded_files
            ),
        )
    )
    answer = reply.strip().splitlines()[0].strip() if reply.strip() else ""
    if answer in with_record.loaded_files:
        return answer
    logger.warning(
        "attribution for %s named %r, not a loaded file; UNATTRIBUTED", q.id, answer
    )
    return UNATTRIBUTED


def _parse_candidate(reply: str, base: SkillFile) -> Optional[SkillFile]:
    try:
        patterns = merge_patterns(parse_patterns(reply))
    except ValueError:
        return None
    if not patterns:
        return None
    return replace(base, patterns=patterns)


def _propose(
    gateway: Gateway,
    system_prompt: str,
    user_prompt: str,
    base: SkillFile,
) -> Optional[SkillFile]:
    """One proposal attempt; a single parse re-prompt before giving up."""
    reply = gateway.complete(
        CompletionRequest(
            role=Role.TEACHER, system_prompt=system_prompt, user_prompt=user_prompt
        )
    )
    candidate = _parse_candidate(reply, base)
    if candidate is not None:
        return candidate
    retry = gateway.complete(
        CompletionRequest(
            role=Role.TEACHER,
            system_prompt=system_prompt,
            user_prompt=user_prompt
            + "\n\nYour previous reply had no usable '## Pattern:' sections. "
            "Return the complete file in the requested format.",
        )
    )
    return _parse_candidate(retry, base)


def propose_expansion(
    gateway: Gateway,
    path: str,
    current: Optional[SkillFile],
    gap_cases: Sequence[tuple[Question, EvalRecord]],
    attempt_feedback: str = "",
) -> Optional[SkillFile]:
    if not gap_cases:
        raise ValueError("gap_cases must be non-empty")
    base = current or _new_file_base(path)
    current_text = (
        render_skill_file(current) if current else "(new file - no contents yet)"
    )
    user = prompts.expansion_user_prompt(
        path, current_text, [(q, r.raw_completion) for q, r in gap_cases]
    )
    if attempt_feedback:
        user += "\n\n" + attempt_feedback
    return _propose(gateway, prompts.REFINE_SYSTEM, user, base)


def propose_repair(
    gateway: Gateway,
    path: str,
    current: SkillFile,
    positives: Sequence[tuple[Question, EvalRecord]],
    negatives: Sequence[tuple[Question, EvalRecord]],
    attempt_feedback: str = "",
) -> Optional[SkillFile]:
    user = prompts.repair_user_prompt(
        path,
        render_skill_file(current),
        [(q, r.raw_completion) for q, r in positives],
        [(q, r.raw_completion) for q, r in negatives],
    )
    if attempt_feedback:
        user += "\n\n" + attempt_feedback
    return _propose(gateway, prompts.REFINE_SYSTEM, user, current)


def _new_file_base(path: str) -> SkillFile:
    """Skeleton identity for a file being created by unattributed routing."""
    subfield_slug, name = path.split("/", 1)
    return SkillFile(
        subfield=subfield_slug,
        error_type=ErrorType(name.removesuffix(".md")),
        patterns=(
            SkillPattern(
                name="placeholder",
                description="",
                when_to_use=(),
                procedure=("placeholder",),
            ),
        ),
        version=1,
        source_question_ids=frozenset(),
    )


def _nav_with_entry(
    nav: NavigationIndex, path: str, skill: SkillFile, keywords: Optional[tuple[str, ...]]
) -> NavigationIndex:
    existing = nav.entry_for(path)
    kept = keywords or (existing.keywords if existing else (slug(skill.subfield),))
    entry = NavigationEntry(
        path=path,
        summary=file_summary(skill),
        keywords=kept,
        pattern_names=skill.pattern_names,
    )
    others = [e for e in nav.entries if e.path != path]
    return NavigationIndex(entries=tuple(sorted([*others, entry], key=lambda e: e.path)))


def overlay_library(lib: SkillLibrary, path: str, candidate: SkillFile) -> SkillLibrary:
    """Library with the candidate substituted, for verification runs only."""
    files = dict(lib.files)
    files[path] = candidate
    return SkillLibrary(
        files=files,
        navigation=_nav_with_entry(lib.navigation, path, candidate, None),
        library_version=lib.library_version,
    )


def commit_candidate(
    lib: SkillLibrary, path: str, candidate: SkillFile, new_source_ids: frozenset[str]
) -> SkillLibrary:
    """Committed update: file version and library version both advance."""
    old = lib.files.get(path)
    committed = replace(
        candidate,
        version=(old.version + 1) if old else 1,
        source_question_ids=(old.source_question_ids if old else frozenset())
        | new_source_ids,
    )
    files = dict(lib.files)
    files[path] = committed
    return SkillLibrary(
        files=files,
        navigation=_nav_with_entry(lib.navigation, path, committed, None),
        library_version=lib.library_version + 1,
    )


def verify_candidate(
    candidate: SkillFile,
    path: str,
    lib: SkillLibrary,
    targets: Sequence[Question],
    preserve: Optional[Sequence[Question]],
    gateway: Gateway,
    executor: PotExecutor,
    config: EvalConfig = EvalConfig(),
) -> tuple[float, Optional[float], int]:
    """(target score, retain score, recovered count) under an overlay library.

    Selection is re-run against the overlay so trigger-condition edits can
    change which files load. An empty preserve set retains vacuously.
    """
    if not targets:
        raise ValueError("targets must be non-empty")
    overlay = overlay_library(lib, path, candidate)

    def run(q: Question) -> bool:
        paths = select_skills(
            q, overlay, gateway, mode=config.selector_mode, max_files=config.max_files
        )
        skills = [overlay.files[p] for p in paths]
        return evaluate_question(q, skills, gateway, executor, config).correct

    recovered = sum(1 for q in targets if run(q))
    score = recovered / len(targets)
    retain: Optional[float] = None
    if preserve is not None:
        kept = sum(1 for q in preserve if run(q))
        retain = kept / len(preserve) if preserve else 1.0
    return score, retain, recovered


def gate_decision(
    path: str,
    attempt: int,
    phase: str,
    target_score: float,
    retain: Optional[float],
    recovered: int,
    config: RefinementConfig,
    digest: str,
) -> GateDecision:
    """Accept/reject one candidate attempt.

    Coverage commits on target recovery rate >= tau_cov. Safety commits
    when retention >= tau_safe_retain and at least one negative recovered;
    the recorded score collapses to 0.0 when nothing was recovered so the
    committed <=> score >= threshold invariant stays exact.
    """
    if phase == "coverage":
        score, threshold = target_score, config.tau_cov
    elif phase == "safety":
        effective_retain = 1.0 if retain is None else retain
        score = effective_retain if recovered >= 1 else 0.0
        threshold = config.tau_safe_retain
    else:
        raise ValueError(f"unknown phase {phase!r}")
    return GateDecision(
        file_path=path,
        attempt_index=attempt,
        score=score,
        threshold=threshold,
        committed=score >= threshold,
        candidate_digest=digest,
    )


def run_gated_update(
    lib: SkillLibrary,
    path: str,
    phase: str,
    propose_fn: Callable[[int, str], Optional[SkillFile]],
    verify_fn: Callable[[SkillFile], tuple[float, Optional[float], int]],
    new_source_ids: frozenset[str],
    config: RefinementConfig,
) -> tuple[SkillLibrary, list[GateDecision]]:
    """Propose/verify/gate loop for one file; rolls back after n_max rejects."""
    decisions: list[GateDecision] = []
    feedback = ""
    for attempt in range(1, config.n_max + 1):
        candidate = propose_fn(attempt, feedback)
        if candidate is None:
            threshold = config.tau_cov if phase == "coverage" else config.tau_safe_retain
            decisions.append(
                GateDecision(
                    file_path=path,
                    attempt_index=attempt,
                    score=0.0,
                    threshold=threshold,
                    committed=False,
                    candidate_digest="",
                )
            )
            feedback = "The previous proposal could not be parsed; follow the format."
            continue
        target_score, retain, recovered = verify_fn(candidate)
        decision = gate_decision(
            path,
            attempt,
            phase,
            target_score,
            retain,
            recovered,
            config,
            candidate_digest(candidate),
        )
        decisions.append(decision)
        if decision.committed:
            return commit_candidate(lib, path, candidate, new_source_ids), decisions
        feedback = (
            f"A previous proposal scored {decision.score:.2f} against the "
            f"required {decision.threshold:.2f}; revise it further."
        )
    return lib, decisions


def run_iteration(
    lib: SkillLibrary,
    train: Sequence[Question],
    gateway: Gateway,
    executor: PotExecutor,
    config: RefinementConfig,
    iteration: int,
    eval_config: EvalConfig = EvalConfig(),
) -> tuple[SkillLibrary, IterationReport]:
    by_id = {q.id: q for q in train}
    order = {q.id: i for i, q in enumerate(train)}

    def in_order(ids) -> list[str]:
        return sorted(ids, key=lambda qid: order[qid])

    version_before = lib.library_version
    partition, with_records, without_records = collect_evidence(
        train, lib, gateway, executor, eval_config
    )
    sizes_before = (len(partition.q_plus), len(partition.q_minus), len(partition.q_gap))

    attribution: dict[str, str] = {}
    for qid in in_order(partition.members):
        attribution[qid] = attribute(gateway, by_id[qid], with_records[qid])

    # Coverage phase: group attributed gap cases per file; unattributed gap
    # cases are routed through a fresh annotation (file created if absent).
    fresh_routes: dict[str, str] = {}
    gap_by_file: dict[str, list[str]] = {}
    for qid in in_order(partition.q_gap):
        path = attribution[qid]
        if path == UNATTRIBUTED:
            annotation = annotate_failure(gateway, by_id[qid], without_records[qid])
            if annotation is None:
                continue
            path = slug_path(annotation.subfield, annotation.error_type)
            fresh_routes[qid] = path
        gap_by_file.setdefault(path, []).append(qid)

    coverage_decisions: list[GateDecision] = []
    for path in sorted(gap_by_file):
        target_ids = gap_by_file[path]
        targets = [by_id[qid] for qid in target_ids]
        cases = [(by_id[qid], with_records[qid]) for qid in target_ids]
        current = lib.files.get(path)

        def propose(attempt: int, feedback: str, _cases=cases, _cur=current, _path=path):
            return propose_expansion(gateway, _path, _cur, _cases, feedback)

        def verify(candidate: SkillFile, _targets=targets, _path=path):
            score, _, recovered = verify_candidate(
                candidate, _path, lib, _targets, None, gateway, executor, eval_config
            )
            return score, None, recovered

        lib, decisions = run_gated_update(
            lib, path, "coverage", propose, verify, frozenset(target_ids), config
        )
        coverage_decisions.extend(decisions)

    # Post-coverage verification over the affected set.
    affected = in_order(partition.q_gap | partition.q_plus)
    post_records: dict[str, EvalRecord] = {}
    for qid in affected:
        q = by_id[qid]
        paths = select_skills(
            q, lib, gateway, mode=eval_config.selector_mode, max_files=eval_config.max_files
        )
        skills = [lib.files[p] for p in paths]
        post_records[qid] = evaluate_question(q, skills, gateway, executor, eval_config)

    promoted = {qid for qid in partition.q_gap if post_records[qid].correct}
    regressed = {qid for qid in partition.q_plus if not post_records[qid].correct}
    new_plus = (partition.q_plus - regressed) | promoted
    new_minus = set(partition.q_minus) | regressed
    remaining_gap = set(partition.q_gap) - promoted
    sizes_after = (len(new_plus), len(new_minus), len(remaining_gap))

    # Safety phase: only questions whose status changed are re-attributed.
    latest_with = dict(with_records)
    latest_with.update(post_records)
    for qid in in_order(promoted | regressed):
        attribution[qid] = attribute(gateway, by_id[qid], post_records[qid])

    minus_by_file: dict[str, list[str]] = {}
    for qid in in_order(new_minus):
        path = attribution[qid]
        if path == UNATTRIBUTED:
            continue
        minus_by_file.setdefault(path, []).append(qid)
    plus_by_file: dict[str, list[str]] = {}
    for qid in in_order(new_plus):
        path = attribution[qid]
        if path != UNATTRIBUTED:
            plus_by_file.setdefault(path, []).append(qid)

    safety_decisions: list[GateDecision] = []
    for path in sorted(minus_by_file):
        if path not in lib.files:
            logger.warning("regressions attributed to unknown file %s; skipped", path)
            continue
        negative_ids = minus_by_file[path]
        preserve_ids = plus_by_file.get(path, [])
        negatives = [(by_id[qid], latest_with[qid]) for qid in negative_ids]
        positives = [(by_id[qid], latest_with[qid]) for qid in preserve_ids]
        current = lib.files[path]

        def propose(
            attempt: int,
            feedback: str,
            _pos=positives,
            _neg=negatives,
            _cur=current,
            _path=path,
        ):
            return propose_repair(gateway, _path, _cur, _pos, _neg, feedback)

        def verify(
            candidate: SkillFile,
            _targets=[by_id[qid] for qid in negative_ids],
            _preserve=[by_id[qid] for qid in preserve_ids],
            _path=path,
        ):
            return verify_candidate(
                candidate, _path, lib, _targets, _preserve, gateway, executor, eval_config
            )

        lib, decisions = run_gated_update(
            lib, path, "safety", propose, verify, frozenset(negative_ids), config
        )
        safety_decisions.extend(decisions)

    report = IterationReport(
        iteration=iteration,
        sizes_before=sizes_before,
        sizes_after=sizes_after,
        coverage_decisions=tuple(coverage_decisions),
        safety_decisions=tuple(safety_decisions),
        library_version_before=version_before,
        library_version_after=lib.library_version,
        fresh_annotation_routes=fresh_routes,
    )
    return lib, report


def run_refinement(
    lib: SkillLibrary,
    train: Sequence[Question],
    gateway: Gateway,
    executor: PotExecutor,
    config: RefinementConfig,
    eval_config: EvalConfig = EvalConfig(),
    out_dir: Optional[str | Path] = None,
) -> tuple[SkillLibrary, list[IterationReport]]:
    """Run all refinement iterations, snapshotting the library after each."""
    reports: list[IterationReport] = []
    for t in range(1, config.iterations + 1):
        lib, report = run_iteration(
            lib, train, gateway, executor, config, t, eval_config
        )
        reports.append(report)
        if out_dir is not None:
            snapshot_dir = Path(out_dir) / "iterations" / f"k{t}"
            write_library(lib, snapshot_dir)
            report_path = Path(out_dir) / "iterations" / f"k{t}_report.json"
            report_path.write_text(
                json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8"
            )
    if out_dir is not None:
        manifest = {
            "iterations": config.iterations,
            "tau_cov": config.tau_cov,
            "tau_safe_retain": config.tau_safe_retain,
            "n_max": config.n_max,
            "seed": config.seed,
            "per_iteration": [
                {
                    "iteration": r.iteration,
                    "sizes_before": r.to_dict()["sizes_before"],
                    "sizes_after": r.to_dict()["sizes_after"],
                    "commits": sum(
                        1
                        for d in r.coverage_decisions + r.safety_decisions
                        if d.committed
                    ),
                    "rollbacks": sum(
                        1
                        for d in r.coverage_decisions + r.safety_decisions
                        if d.attempt_index == config.n_max and not d.committed
                    ),
                }
                for r in reports
            ],
            "final_library_version": lib.library_version,
        }
        (Path(out_dir) / "refinement_manifest.json").write_text(
            json.dumps(manifest, indent=2) + "\n", encoding="utf-8"
        )
    return lib, reports
