"""Case records, the JSON case-file format, validation and core-subset sampling."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any

from .categories import MCategory, NCategory, TCategory, format_tnm


class CaseFileError(Exception):
    pass


class MalformedCaseFile(CaseFileError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class DuplicateCaseId(CaseFileError):
    def __init__(self, case_id: str):
        super().__init__(f"duplicate case id {case_id!r}")
        self.case_id = case_id


class SubsetTooLarge(ValueError):
    pass


class Modality(str, Enum):
    Clinical = "C"
    Imaging = "I"
    Pathology = "P"
    Supplementary = "S"

    @property
    def code(self) -> str:
        return self.value


class Language(str, Enum):
    ZH = "ZH"
    EN = "EN"


class TaskId(str, Enum):
    TnmStaging = "TnmStaging"
    TreatmentRecommendation = "TreatmentRecommendation"
    EndToEnd = "EndToEnd"


@dataclass(frozen=True)
class CaseDocument:
    modality: Modality
    text: str | None = None
    image_refs: tuple[str, ...] = ()
    extra: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def has_content(self) -> bool:
        return bool(self.text and self.text.strip()) or bool(self.image_refs)


@dataclass(frozen=True)
class GoldStaging:
    t: TCategory
    n: NCategory
    m: MCategory
    reasoning_evidence: str = ""
    extra: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def tnm(self) -> tuple[TCategory, NCategory, MCategory]:
        return (self.t, self.n, self.m)

    def render(self) -> str:
        return format_tnm(self.t, self.n, self.m)


@dataclass(frozen=True)
class GoldTreatment:
    strategy: str
    core_regimen: tuple[str, ...] = ()
    key_considerations: str = ""
    reasoning: str = ""
    extra: dict = field(default_factory=dict, compare=False, hash=False)

    def render(self) -> str:
        drugs = ", ".join(self.core_regimen) if self.core_regimen else "none"
        return (
            f"Strategy: {self.strategy}\nCore regimen: {drugs}\n"
            f"Key considerations: {self.key_considerations}"
        )


@dataclass(frozen=True)
class CaseRecord:
    id: str
    language: Language
    documents: tuple[CaseDocument, ...]
    gold_staging: GoldStaging | None = None
    gold_treatment: GoldTreatment | None = None
    extra: dict = field(default_factory=dict, compare=False, hash=False)

    def without_gold(self) -> "CaseRecord":
        return replace(self, gold_staging=None, gold_treatment=None)

    def document(self, modality: Modality) -> CaseDocument | None:
        for doc in self.documents:
            if doc.modality is modality:
                return doc
        return None


# -- serialization -----------------------------------------------------------

_DOC_KEYS = {"modality", "text", "image_refs"}
_STAGING_KEYS = {"t", "n", "m", "reasoning_evidence"}
_TREATMENT_KEYS = {"strategy", "core_regimen", "key_considerations", "reasoning"}
_CASE_KEYS = {"id", "language", "documents", "gold_staging", "gold_treatment"}


def _extra(obj: dict, known: set[str]) -> dict:
    return {k: v for k, v in obj.items() if k not in known}


def _require(obj: Any, key: str, where: str):
    if not isinstance(obj, dict):
        raise ValueError(f"{where} must be an object")
    if key not in obj:
        raise ValueError(f"{where} is missing field {key!r}")
    return obj[key]


def document_from_dict(obj: dict) -> CaseDocument:
    modality = Modality(_require(obj, "modality", "document"))
    text = obj.get("text")
    if text is not None and not isinstance(text, str):
        raise ValueError("document text must be a string")
    refs = obj.get("image_refs") or []
    if not isinstance(refs, list) or not all(isinstance(r, str) for r in refs):
        raise ValueError("image_refs must be a list of strings")
    return CaseDocument(modality, text, tuple(refs), _extra(obj, _DOC_KEYS))


def case_from_dict(obj: dict) -> CaseRecord:
    case_id = _require(obj, "id", "case")
    if not isinstance(case_id, str) or not case_id:
        raise ValueError("case id must be a non-empty string")
    language = Language(_require(obj, "language", f"case {case_id}"))
    docs = _require(obj, "documents", f"case {case_id}")
    if not isinstance(docs, list):
        raise ValueError(f"case {case_id}: documents must be a list")
    gold_staging = None
    if obj.get("gold_staging") is not None:
        gs = obj["gold_staging"]
        gold_staging = GoldStaging(
            TCategory(_require(gs, "t", "gold_staging")),
            NCategory(_require(gs, "n", "gold_staging")),
            MCategory(_require(gs, "m", "gold_staging")),
            gs.get("reasoning_evidence", ""),
            _extra(gs, _STAGING_KEYS),
        )
    gold_treatment = None
    if obj.get("gold_treatment") is not None:
        gt = obj["gold_treatment"]
        regimen = gt.get("core_regimen") or []
        if not all(isinstance(d, str) and d.strip() == d and d for d in regimen):
            raise ValueError(f"case {case_id}: core_regimen entries must be non-empty trimmed strings")
        gold_treatment = GoldTreatment(
            _require(gt, "strategy", "gold_treatment"),
            tuple(regimen),
            gt.get("key_considerations", ""),
            gt.get("reasoning", ""),
            _extra(gt, _TREATMENT_KEYS),
        )
    return CaseRecord(
        case_id,
        language,
        tuple(document_from_dict(d) for d in docs),
        gold_staging,
        gold_treatment,
        _extra(obj, _CASE_KEYS),
    )


def document_to_dict(doc: CaseDocument) -> dict:
    out: dict[str, Any] = {"modality": doc.modality.value}
    if doc.text is not None:
        out["text"] = doc.text
    out["image_refs"] = list(doc.image_refs)
    out.update(doc.extra)
    return out


def case_to_dict(case: CaseRecord) -> dict:
    out: dict[str, Any] = {
        "id": case.id,
        "language": case.language.value,
        "documents": [document_to_dict(d) for d in case.documents],
    }
    if case.gold_staging is not None:
        gs = case.gold_staging
        out["gold_staging"] = {
            "t": gs.t.value,
            "n": gs.n.value,
            "m": gs.m.value,
            "reasoning_evidence": gs.reasoning_evidence,
            **gs.extra,
        }
    if case.gold_treatment is not None:
        gt = case.gold_treatment
        out["gold_treatment"] = {
            "strategy": gt.strategy,
            "core_regimen": list(gt.core_regimen),
            "key_considerations": gt.key_considerations,
            "reasoning": gt.reasoning,
            **gt.extra,
        }
    out.update(case.extra)
    return out


def dumps_cases(cases: list[CaseRecord]) -> str:
    return json.dumps({"cases": [case_to_dict(c) for c in cases]}, ensure_ascii=False, indent=2) + "\n"


def dump_cases(cases: list[CaseRecord], path: str | Path) -> None:
    Path(path).write_text(dumps_cases(cases), encoding="utf-8")


def _line_of(text: str, needle: str, start: int = 0) -> int:
    pos = text.find(needle, start)
    return text.count("\n", 0, pos) + 1 if pos >= 0 else 1


def loads_cases(text: str) -> list[CaseRecord]:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedCaseFile(exc.lineno, exc.msg) from exc
    if not isinstance(payload, dict) or not isinstance(payload.get("cases"), list):
        raise MalformedCaseFile(1, "top-level object with a 'cases' list expected")
    records: list[CaseRecord] = []
    seen: set[str] = set()
    for i, entry in enumerate(payload["cases"]):
        try:
            case = case_from_dict(entry)
        except (ValueError, TypeError) as exc:
            case_id = entry.get("id") if isinstance(entry, dict) else None
            line = _line_of(text, f'"{case_id}"') if case_id else 1
            raise MalformedCaseFile(line, f"entry {i}: {exc}") from exc
        if case.id in seen:
            raise DuplicateCaseId(case.id)
        seen.add(case.id)
        records.append(case)
    return records


def load_cases(path: str | Path) -> list[CaseRecord]:
    """Read a case file; raises FileNotFoundError for a missing path."""
    return loads_cases(Path(path).read_text(encoding="utf-8"))


# -- validation --------------------------------------------------------------


@dataclass(frozen=True)
class ValidationIssue:
    code: str
    detail: str = ""


def validate_case(case: CaseRecord, task: TaskId) -> list[ValidationIssue]:
    issues: list[ValidationIssue] = []
    task = TaskId(task)
    if task is TaskId.TnmStaging and case.gold_staging is None:
        issues.append(ValidationIssue("MissingGoldStaging", case.id))
    if task is not TaskId.TnmStaging and case.gold_treatment is None:
        issues.append(ValidationIssue("MissingGoldTreatment", case.id))
    for i, doc in enumerate(case.documents):
        if not doc.has_content:
            issues.append(ValidationIssue("EmptyDocument", f"{case.id}[{i}]"))
    return issues


# -- sampling ----------------------------------------------------------------


def sample_core(
    cases: list[CaseRecord], seed: int, subset_size: int, num_subsets: int = 3
) -> list[list[CaseRecord]]:
    """Draw ``num_subsets`` independent subsets, each without replacement."""
    if num_subsets < 1:
        raise ValueError("num_subsets must be >= 1")
    if subset_size > len(cases):
        raise SubsetTooLarge(f"subset_size {subset_size} exceeds {len(cases)} cases")
    rng = random.Random(seed)
    return [rng.sample(cases, subset_size) for _ in range(num_subsets)]
