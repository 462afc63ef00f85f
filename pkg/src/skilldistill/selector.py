"""Inference-time skill selection and injection-payload assembly.

Bundle mode (default) asks the selector role for the best-matching
subfield and loads every file under it plus all common/ files; per-file
mode asks for an explicit path list. Both cap the result and order it by
the navigation index.
"""

from __future__ import annotations

import logging

from . import prompts
from .gateway import CompletionRequest, Gateway, GatewayError, Role
from .model import Question, SkillLibrary, slug
from .skillfmt import render_injection_block, render_navigation

logger = logging.getLogger(__name__)

COMMON_SCOPE = "common"
DEFAULT_MAX_FILES = 6


def _navigation_order(lib: SkillLibrary, paths: list[str]) -> list[str]:
    rank = {p: i for i, p in enumerate(lib.navigation.paths)}
    return sorted(paths, key=lambda p: rank[p])


def select_skills(
    q: Question,
    lib: SkillLibrary,
    gateway: Gateway,
    mode: str = "bundle",
    max_files: int = DEFAULT_MAX_FILES,
) -> list[str]:
    """Choose which skill files to inject for one question.

    A selection failure is not an error: the question just runs skill-free.
    """
    if not lib.files:
        return []
    index_text = render_navigation(lib.navigation)
    if mode == "bundle":
        prompt = prompts.selector_bundle_user_prompt(index_text, q)
    elif mode == "per_file":
        prompt = prompts.selector_per_file_user_prompt(index_text, q)
    else:
        raise ValueError(f"unknown selection mode {mode!r}")
    try:
        reply = gateway.complete(
            CompletionRequest(
                role=Role.SELECTOR,
                system_prompt=prompts.SELECTOR_SYSTEM,
                user_prompt=prompt,
            )
        )
    except GatewayError as exc:
        logger.warning("selector failed for %s (runs skill-free): %s", q.id, exc)
        return []

    if mode == "bundle":
        chosen = slug(reply.strip().splitlines()[0] if reply.strip() else "")
        if chosen not in {p.split("/")[0] for p in lib.files}:
            logger.warning(
                "selector named unknown subfield %r for %s (runs skill-free)",
                reply.strip(),
                q.id,
            )
            return []
        paths = [
            p
            for p in lib.navigation.paths
            if p.split("/")[0] in (chosen, COMMON_SCOPE)
        ]
    else:
        paths = []
        for line in reply.strip().splitlines():
            candidate = line.strip().lstrip("-* ").strip()
            if not candidate:
                continue
            if candidate in lib.files:
                if candidate not in paths:
                    paths.append(candidate)
            else:
                logger.warning(
                    "selector proposed unknown path %r for %s; dropped", candidate, q.id
                )
        paths = _navigation_order(lib, paths)
    return paths[:max_files]


def render_injection(paths: list[str], lib: SkillLibrary) -> str:
    """Concatenate skill renderings in navigation order, one header per file."""
    missing = [p for p in paths if p not in lib.files]
    if missing:
        raise KeyError(f"paths not in library: {missing}")
    ordered = _navigation_order(lib, list(dict.fromkeys(paths)))
    return "\n\n".join(render_injection_block(p, lib.files[p]) for p in ordered)
