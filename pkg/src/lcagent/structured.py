"""Pull the first JSON block out of a model reply and validate it."""

from __future__ import annotations

import json
import re
from typing import TypeVar

from pydantic import BaseModel, ValidationError

T = TypeVar("T", bound=BaseModel)

_FENCE_RE = re.compile(r"```[A-Za-z0-9_-]*[ \t]*\n?(.*?)```", re.DOTALL)
_TRAILING_COMMA_RE = re.compile(r",(\s*[}\]])")
_UNQUOTED_KEY_RE = re.compile(r'([{,]\s*)([A-Za-z_][A-Za-z0-9_\-]*)(\s*:)')


class StructuredOutputError(ValueError):
    pass


class NoStructuredBlock(StructuredOutputError):
    pass


class SchemaViolation(StructuredOutputError):
    def __init__(self, field: str, reason: str):
        super().__init__(f"{field}: {reason}")
        self.field = field
        self.reason = reason


def _balanced_blocks(text: str):
    """Yield every balanced top-level ``{...}`` span in order."""
    pairs = {"{": "}", "[": "]"}
    i = 0
    while i < len(text):
        ch = text[i]
        if ch != "{":
            i += 1
            continue
        stack = [pairs[ch]]
        j = i + 1
        in_str = False
        while j < len(text) and stack:
            c = text[j]
            if in_str:
                if c == "\\":
                    j += 1
                elif c == '"':
                    in_str = False
            elif c == '"':
                in_str = True
            elif c in pairs:
                stack.append(pairs[c])
            elif c == stack[-1]:
                stack.pop()
            j += 1
        if not stack:
            yield text[i:j]
            i = j
        else:
            i += 1


def repair_json(block: str) -> str:
    """One bounded repair: drop trailing commas and quote bare keys."""
    fixed = _TRAILING_COMMA_RE.sub(r"\1", block)
    return _UNQUOTED_KEY_RE.sub(r'\1"\2"\3', fixed)


def _decode(block: str):
    try:
        return json.loads(block)
    except json.JSONDecodeError:
        return json.loads(repair_json(block))


def extract_block(text: str):
    """Return the decoded first structured block found in ``text``."""
    candidates: list[str] = []
    for fenced in _FENCE_RE.findall(text):
        candidates.append(fenced.strip())
    candidates.extend(_balanced_blocks(text))
    if not candidates:
        raise NoStructuredBlock("no fenced or brace-delimited block in reply")
    last_error = None
    for block in candidates:
        try:
            return _decode(block)
        except json.JSONDecodeError as exc:
            last_error = exc
    raise NoStructuredBlock(f"no parseable block (last error: {last_error})")


def parse_structured(response_text: str, schema: type[T]) -> T:
    data = extract_block(response_text)
    try:
        return schema.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        raise SchemaViolation(loc, err["msg"]) from exc
