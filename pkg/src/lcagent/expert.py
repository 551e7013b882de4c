"""Scenario expert agents constrained to a locally injected guideline subset."""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from pydantic import BaseModel, Field

from .backend import Backend, Message, ModelRequest, text_part
from .predicates import Predicate, PredicateError, UnknownField
from .prompts import render_prompt
from .routing import PROFILE_FIELDS, ClinicalWarning, ProfileVector, ScenarioId
from .structured import StructuredOutputError, parse_structured

FIRST_LINE_ONLY = "first-line-only"
LATER_LINE_SCENARIOS = frozenset({ScenarioId.AdvDriverNegLaterLine, ScenarioId.AdvDriverPosLaterLine})


class GuidelineError(ValueError):
    pass


class MissingScenarioFile(GuidelineError):
    def __init__(self, scenario: str):
        super().__init__(f"no guideline subset file for scenario {scenario}")
        self.scenario = scenario


class BadPredicate(GuidelineError):
    def __init__(self, field: str, detail: str = ""):
        super().__init__(f"eligibility predicate problem at {field!r}{': ' + detail if detail else ''}")
        self.field = field


class ConstraintViolation(Exception):
    def __init__(self, drug: str, scenario: ScenarioId):
        super().__init__(f"{drug!r} is not an eligible drug in the {scenario.value} guideline subset")
        self.drug = drug
        self.scenario = scenario


class ExpertParseError(ValueError):
    pass


# -- drug names -------------------------------------------------------------------


@functools.lru_cache(maxsize=1)
def _alias_table() -> tuple[dict[str, str], dict[str, str]]:
    text = resources.files("lcagent.data").joinpath("guidelines", "drug_aliases.tsv").read_text(encoding="utf-8")
    to_canonical: dict[str, str] = {}
    zh_name: dict[str, str] = {}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        alias, canonical, language = (c.strip() for c in line.split("\t"))
        to_canonical[alias.lower()] = canonical
        if language == "ZH":
            zh_name.setdefault(canonical, alias)
    return to_canonical, zh_name


def normalize_drug(name: str) -> str:
    """Canonical generic name; unknown names come back trimmed and lower-cased."""
    key = " ".join(name.strip().split()).lower()
    return _alias_table()[0].get(key, key)


def localized_drug(canonical: str, language: str) -> str:
    if str(getattr(language, "value", language)).upper() == "ZH":
        return _alias_table()[1].get(canonical, canonical)
    return canonical


# -- guideline subsets ----------------------------------------------------------------


@dataclass(frozen=True)
class Regimen:
    name: str
    drugs: tuple[str, ...]
    eligibility: Predicate
    tags: frozenset[str] = frozenset()

    def eligible(self, profile: ProfileVector) -> bool:
        if FIRST_LINE_ONLY in self.tags and profile.treatment_line >= 2:
            return False
        return self.eligibility(profile)


@dataclass(frozen=True)
class GuidelineSubset:
    scenario: ScenarioId
    sources: tuple[str, ...]
    constraint_blocks: tuple[str, ...]
    allowed_regimens: tuple[Regimen, ...]
    version: str = ""

    def eligible_regimens(self, profile: ProfileVector) -> list[Regimen]:
        return [r for r in self.allowed_regimens if r.eligible(profile)]

    def allowed_drugs(self, profile: ProfileVector) -> set[str]:
        return {normalize_drug(d) for r in self.eligible_regimens(profile) for d in r.drugs}

    def render_constraints(self) -> str:
        return "\n".join(f"[{i}] {text}" for i, text in enumerate(self.constraint_blocks))

    def render_regimens(self, profile: ProfileVector) -> str:
        eligible = self.eligible_regimens(profile)
        if not eligible:
            return "(no systemic regimen is permitted in this scenario)"
        return "\n".join(f"- {r.name}: {', '.join(r.drugs) or 'no drugs'}" for r in eligible)


GuidelineStore = dict


def subset_from_dict(data: dict) -> GuidelineSubset:
    scenario = ScenarioId(data["scenario"])
    regimens = []
    for entry in data.get("regimens", []):
        try:
            predicate = Predicate(entry.get("eligibility", "True"), PROFILE_FIELDS)
        except UnknownField as exc:
            raise BadPredicate(exc.field, f"regimen {entry.get('name')!r}") from exc
        except PredicateError as exc:
            raise BadPredicate(entry.get("name", "?"), str(exc)) from exc
        drugs = tuple(entry.get("drugs", []))
        if any(not d or d.strip() != d for d in drugs):
            raise GuidelineError(f"regimen {entry.get('name')!r} has an empty or untrimmed drug name")
        regimens.append(Regimen(entry["name"], drugs, predicate, frozenset(entry.get("tags", []))))
    if not regimens and scenario is not ScenarioId.MdtReferral:
        raise GuidelineError(f"{scenario.value} must list at least one regimen")
    return GuidelineSubset(
        scenario,
        tuple(data.get("sources", [])),
        tuple(data.get("constraints", [])),
        tuple(regimens),
        str(data.get("version", "")),
    )


def load_guidelines(directory: str | Path | None = None) -> GuidelineStore:
    """One ``<ScenarioId>.json`` per scenario; all eight must be present and valid."""
    if directory is None:
        return default_guidelines()
    directory = Path(directory)
    store = {}
    for scenario in ScenarioId:
        path = directory / f"{scenario.value}.json"
        if not path.exists():
            raise MissingScenarioFile(scenario.value)
        subset = subset_from_dict(json.loads(path.read_text(encoding="utf-8")))
        if subset.scenario is not scenario:
            raise GuidelineError(f"{path.name} declares scenario {subset.scenario.value}")
        store[scenario] = subset
    return store


@functools.lru_cache(maxsize=1)
def default_guidelines() -> GuidelineStore:
    root = resources.files("lcagent.data").joinpath("guidelines")
    store = {}
    for scenario in ScenarioId:
        store[scenario] = subset_from_dict(json.loads(root.joinpath(f"{scenario.value}.json").read_text(encoding="utf-8")))
    return store


# -- recommendation -------------------------------------------------------------------


@dataclass(frozen=True)
class TreatmentRecommendation:
    scenario: ScenarioId
    strategy: str
    core_regimen: tuple[str, ...]
    key_considerations: str
    warnings: tuple[ClinicalWarning, ...] = ()
    reasoning: str = ""
    cited_blocks: tuple[int, ...] = ()
    attempts: int = 1

    def render(self) -> str:
        drugs = ", ".join(self.core_regimen) if self.core_regimen else "none"
        return (
            f"Scenario: {self.scenario.value}\nStrategy: {self.strategy}\nCore regimen: {drugs}\n"
            f"Key considerations: {self.key_considerations}\nReasoning: {self.reasoning}"
        )

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.value,
            "strategy": self.strategy,
            "core_regimen": list(self.core_regimen),
            "key_considerations": self.key_considerations,
            "warnings": [w.message for w in self.warnings],
            "reasoning": self.reasoning,
            "cited_blocks": list(self.cited_blocks),
            "attempts": self.attempts,
        }


class ExpertReply(BaseModel):
    strategy: str
    core_regimen: list[str] = Field(default_factory=list)
    key_considerations: str = ""
    reasoning: str = ""
    cited_blocks: list[int] = Field(default_factory=list)


def check_grounding(reply: ExpertReply, subset: GuidelineSubset, profile: ProfileVector) -> None:
    allowed = subset.allowed_drugs(profile)
    for drug in reply.core_regimen:
        if normalize_drug(drug) not in allowed:
            raise ConstraintViolation(drug, subset.scenario)


def violation_notice(exc: ConstraintViolation) -> str:
    return (
        f"CONSTRAINT VIOLATION: {exc.drug!r} is not among the eligible regimens of the injected guideline subset. "
        "Revise the recommendation using only the listed eligible regimens and reply with the same JSON structure."
    )


def recommend(
    profile: ProfileVector,
    scenario: ScenarioId,
    store: GuidelineStore | None,
    backend: Backend,
    template: str | None = None,
    language: str = "EN",
    case_id: str = "",
    warnings: list[ClinicalWarning] | None = None,
    context: str = "",
) -> TreatmentRecommendation:
    """Ask the scenario expert; reject out-of-subset drugs once with a notice, then fail."""
    scenario = ScenarioId(scenario)
    store = store or default_guidelines()
    subset = store[scenario]
    warnings = list(warnings or [])
    system = template if template is not None else render_prompt(f"expert-{scenario.value}", language)
    system = (
        f"{system}\n\nGuideline constraints ({scenario.value}):\n{subset.render_constraints()}\n\n"
        f"Eligible regimens:\n{subset.render_regimens(profile)}"
    )
    body = [f"Case ID: {case_id}", "Patient profile:", profile.render()]
    if warnings:
        body += ["Pre-treatment warnings:"] + [f"- {w.message}" for w in warnings]
    if context:
        body.append(context)
    messages = [Message("user", (text_part("\n".join(body)),))]

    last_violation: ConstraintViolation | None = None
    for attempt in (1, 2):
        response = backend.complete(ModelRequest(system, tuple(messages), tag="expert"))
        try:
            reply = parse_structured(response.text, ExpertReply)
        except StructuredOutputError as exc:
            raise ExpertParseError(str(exc)) from exc
        try:
            check_grounding(reply, subset, profile)
        except ConstraintViolation as exc:
            last_violation = exc
            messages += [
                Message("assistant", (text_part(response.text),)),
                Message("user", (text_part(violation_notice(exc)),)),
            ]
            continue
        considerations = reply.key_considerations
        if warnings:
            considerations = "\n".join([w.message for w in warnings] + ([considerations] if considerations else []))
        cited = tuple(i for i in reply.cited_blocks if 0 <= i < len(subset.constraint_blocks))
        return TreatmentRecommendation(
            scenario=scenario,
            strategy=reply.strategy,
            core_regimen=tuple(d.strip() for d in reply.core_regimen if d.strip()),
            key_considerations=considerations,
            warnings=tuple(warnings),
            reasoning=reply.reasoning,
            cited_blocks=cited,
            attempts=attempt,
        )
    assert last_violation is not None
    raise last_violation
