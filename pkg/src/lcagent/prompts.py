"""Prompt templates stored as ``data/prompts/<stage>.<lang>.txt`` (string.Template syntax)."""

from __future__ import annotations

import functools
from importlib import resources
from pathlib import Path
from string import Template


class MissingPrompt(KeyError):
    pass


_override_dir: Path | None = None


def set_prompt_dir(path: str | Path | None) -> None:
    """Point template lookup at a reviewer-edited directory (None restores the shipped set)."""
    global _override_dir
    _override_dir = Path(path) if path else None
    _load.cache_clear()


@functools.lru_cache(maxsize=None)
def _load(stage: str, language: str) -> str:
    name = f"{stage}.{language.lower()}.txt"
    if _override_dir is not None and (_override_dir / name).exists():
        return (_override_dir / name).read_text(encoding="utf-8")
    res = resources.files("lcagent.data").joinpath("prompts", name)
    if not res.is_file():
        if language.lower() != "en":
            return _load(stage, "en")
        raise MissingPrompt(name)
    return res.read_text(encoding="utf-8")


def render_prompt(stage: str, language: str = "EN", **values) -> str:
    return Template(_load(stage, str(getattr(language, "value", language)))).safe_substitute(**values)
