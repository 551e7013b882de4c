"""A deterministic offline judge that answers the three judge prompts by rule.

It reads the sections the metric functions write into judge requests and
never sees anything else, so runs with it are reproducible and free.
"""

from __future__ import annotations

import json
import re

from .backend import Backend, ModelRequest, ModelResponse
from .expert import normalize_drug
from .metrics import tokenize

_SECTION_RE = re.compile(r"^### (.+)$", re.MULTILINE)
_TNM_RE = re.compile(r"\b(T(?:x|1a|1b|1c|2a|2b|3|4)|N[x0-3]|M(?:0|1a|1b|1c))\b", re.IGNORECASE)
_REGIMEN_RE = re.compile(r"^(?:Core regimen|核心方案)\s*[:：]\s*(.*)$", re.MULTILINE | re.IGNORECASE)


def sections(text: str) -> dict[str, str]:
    out = {}
    marks = list(_SECTION_RE.finditer(text))
    for i, m in enumerate(marks):
        end = marks[i + 1].start() if i + 1 < len(marks) else len(text)
        out[m.group(1).strip()] = text[m.end() : end].strip()
    return out


def regimen_of(plan: str) -> list[str]:
    m = _REGIMEN_RE.search(plan)
    if not m or m.group(1).strip().lower() in ("", "none", "无"):
        return []
    return [d.strip() for d in re.split(r"[,，、;；+]", m.group(1)) if d.strip()]


class OfflineJudge(Backend):
    def __init__(self, name: str = "offline-judge"):
        self.name = name

    def _complete(self, request: ModelRequest) -> ModelResponse:
        text = request.flat_text()
        parts = sections(text)
        handler = {
            "judge-rq": self._rq,
            "judge-precision": self._precision,
            "judge-similarity": self._similarity,
        }.get(request.tag)
        if handler is None:
            return ModelResponse("The offline judge only answers judge requests.")
        return ModelResponse("```json\n" + json.dumps(handler(parts), ensure_ascii=False) + "\n```")

    @staticmethod
    def _rq(parts: dict) -> dict:
        reasoning = parts.get("MODEL REASONING", "")
        gold = _TNM_RE.findall(parts.get("REFERENCE STAGING", ""))
        said = {c.upper() for c in _TNM_RE.findall(reasoning)}
        scores = []
        for cat in gold[:3]:
            if cat.upper() in said:
                scores.append(5)
            elif any(s[0] == cat[0].upper() for s in said):
                scores.append(2)
            else:
                scores.append(1)
        while len(scores) < 3:
            scores.append(1)
        overall = 5 if all(s == 5 for s in scores) else (3 if any(s == 5 for s in scores) else 1)
        return {"t": scores[0], "n": scores[1], "m": scores[2], "overall": overall}

    @staticmethod
    def _precision(parts: dict) -> dict:
        pred = regimen_of(parts.get("PREDICTED PLAN", ""))
        gold = regimen_of(parts.get("REFERENCE PLAN", ""))
        gold_by_name = {normalize_drug(g): g for g in gold}
        matched = [[p, gold_by_name[normalize_drug(p)]] for p in pred if normalize_drug(p) in gold_by_name]
        return {"pred_meds": pred, "gold_meds": gold, "matched": matched}

    @staticmethod
    def _similarity(parts: dict) -> dict:
        pred = set(tokenize(parts.get("PREDICTED RATIONALE", "")))
        gold = set(tokenize(parts.get("REFERENCE RATIONALE", "")))
        if not pred or not gold:
            return {"score": 0}
        jaccard = len(pred & gold) / len(pred | gold)
        return {"score": int(round(5 * jaccard))}
