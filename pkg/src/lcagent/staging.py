"""Dimension-isolated T, N and M stagers: a rule engine and a backend-driven agent."""

from __future__ import annotations

import functools
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

from pydantic import BaseModel, Field

from .backend import Backend, BackendError, text_part, user_request
from .categories import DIMENSION_TYPES, MCategory, NCategory, TCategory, parse_category
from .normalize import M_DESCRIPTORS, N_DESCRIPTORS, T_DESCRIPTORS, EvidencePools, NormalizedFinding
from .prompts import render_prompt
from .structured import StructuredOutputError, parse_structured


class RuleFileError(ValueError):
    pass


class RuleFileGap(RuleFileError):
    def __init__(self, descriptor: str):
        super().__init__(f"no rule-file mapping for descriptor {descriptor!r}")
        self.descriptor = descriptor


class AgentParseError(ValueError):
    def __init__(self, dimension: str, reason: str):
        super().__init__(f"{dimension}-stage reply: {reason}")
        self.dimension = dimension
        self.reason = reason


class StagingFailed(Exception):
    """One or more stagers failed; ``errors`` maps dimension to the exception."""

    def __init__(self, errors: dict[str, Exception]):
        detail = "; ".join(f"{d}: {type(e).__name__}: {e}" for d, e in errors.items())
        super().__init__(detail)
        self.errors = errors


# -- rule file -----------------------------------------------------------------


@dataclass(frozen=True)
class SizeBand:
    category: TCategory
    lo: float
    hi: float | None  # None: unbounded

    def contains(self, size_mm: float) -> bool:
        return self.lo < size_mm and (self.hi is None or size_mm <= self.hi)


@dataclass(frozen=True)
class StagingRuleFile:
    version: str
    t_size_mm: tuple[SizeBand, ...]
    t_descriptors: dict[str, TCategory | None]
    n_stations: dict[str, NCategory]
    m_patterns: dict[str, str]  # descriptor -> M category value or "extrathoracic"
    m_single: MCategory = MCategory.M1b
    m_multiple: MCategory = MCategory.M1c
    review_flags: dict[str, str] = field(default_factory=dict)

    def t_for_size(self, size_mm: float) -> TCategory | None:
        for band in self.t_size_mm:
            if band.contains(size_mm):
                return band.category
        return None

    def t_for_descriptor(self, descriptor: str) -> TCategory | None:
        if descriptor not in self.t_descriptors:
            raise RuleFileGap(descriptor)
        return self.t_descriptors[descriptor]

    def n_for_descriptor(self, descriptor: str) -> NCategory:
        if descriptor not in self.n_stations:
            raise RuleFileGap(descriptor)
        return self.n_stations[descriptor]

    def m_for_descriptor(self, descriptor: str) -> str:
        if descriptor not in self.m_patterns:
            raise RuleFileGap(descriptor)
        return self.m_patterns[descriptor]

    def describe(self) -> str:
        """Compact human-readable rendering injected into agent prompts."""
        lines = [f"Rule set {self.version}", "T by maximum diameter (mm, lower bound exclusive):"]
        for b in self.t_size_mm:
            lines.append(f"  {b.category.value}: >{b.lo:g}" + (f" and <={b.hi:g}" if b.hi is not None else ""))
        lines.append("Minimum T by descriptor:")
        for d, c in self.t_descriptors.items():
            lines.append(f"  {d}: {c.value if c else 'no minimum'}")
        lines.append("N by station:")
        for d, c in self.n_stations.items():
            lines.append(f"  {d}: {c.value}")
        lines.append("M by pattern:")
        for d, c in self.m_patterns.items():
            lines.append(f"  {d}: {c}")
        lines.append(
            f"  extrathoracic total lesions = 1: {self.m_single.value}; >= 2 or multiple: {self.m_multiple.value}"
        )
        return "\n".join(lines)


def rules_from_dict(data: dict) -> StagingRuleFile:
    try:
        bands = tuple(
            SizeBand(TCategory(b["category"]), float(b["lo"]), None if b["hi"] is None else float(b["hi"]))
            for b in data["t_size_mm"]
        )
        t_desc = {k: (TCategory(v) if v else None) for k, v in data["t_descriptors"].items()}
        n_st = {k: NCategory(v) for k, v in data["n_stations"].items()}
        m_pat = {k: (v if v == "extrathoracic" else MCategory(v).value) for k, v in data["m_patterns"].items()}
        extra = data.get("m_extrathoracic", {})
        rules = StagingRuleFile(
            version=str(data["version"]),
            t_size_mm=bands,
            t_descriptors=t_desc,
            n_stations=n_st,
            m_patterns=m_pat,
            m_single=MCategory(extra.get("single", "M1b")),
            m_multiple=MCategory(extra.get("multiple", "M1c")),
            review_flags=dict(data.get("review_flags", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise RuleFileError(f"malformed staging rule file: {exc}") from exc
    validate_rules(rules)
    return rules


def validate_rules(rules: StagingRuleFile) -> None:
    bounds = [b.lo for b in rules.t_size_mm]
    if bounds != sorted(set(bounds)):
        raise RuleFileError("size thresholds must be strictly increasing")
    for prev, nxt in zip(rules.t_size_mm, rules.t_size_mm[1:]):
        if prev.hi is None or prev.hi != nxt.lo or prev.hi <= prev.lo:
            raise RuleFileError(f"size bands {prev.category.value}/{nxt.category.value} are not contiguous")
    for vocabulary, table in ((T_DESCRIPTORS, rules.t_descriptors), (N_DESCRIPTORS, rules.n_stations), (M_DESCRIPTORS, rules.m_patterns)):
        for tag in vocabulary:
            if tag not in table:
                raise RuleFileGap(tag)


def load_staging_rules(path: str | Path | None = None) -> StagingRuleFile:
    if path is None:
        return default_rules()
    return rules_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@functools.lru_cache(maxsize=1)
def default_rules() -> StagingRuleFile:
    text = resources.files("lcagent.data").joinpath("rules", "ajcc8_rules.json").read_text(encoding="utf-8")
    return rules_from_dict(json.loads(text))


# -- results -------------------------------------------------------------------


@dataclass(frozen=True)
class TraceStep:
    rule: str
    refs: tuple[int, ...] = ()  # indices into the staged pool


@dataclass(frozen=True)
class SubStageResult:
    dimension: str
    category: TCategory | NCategory | MCategory
    uncertain: tuple[NormalizedFinding, ...] = ()
    trace: tuple[TraceStep, ...] = ()

    def to_dict(self) -> dict:
        return {
            "dimension": self.dimension,
            "category": self.category.value,
            "uncertain": [f.describe() for f in self.uncertain],
            "trace": [{"rule": s.rule, "refs": list(s.refs)} for s in self.trace],
        }


@dataclass(frozen=True)
class RuleBased:
    pass


@dataclass(frozen=True)
class BackendDriven:
    backend: Backend
    language: str = "EN"
    templates: dict[str, str] | None = None  # dimension -> full system prompt override
    case_id: str = ""


RULE_BASED = RuleBased()


# -- rule engine ----------------------------------------------------------------


def _split(pool: Sequence[NormalizedFinding]):
    confirmed = [(i, f) for i, f in enumerate(pool) if f.confirmed]
    uncertain = tuple(f for f in pool if not f.confirmed)
    return confirmed, uncertain


def _rule_t(pool: Sequence[NormalizedFinding], rules: StagingRuleFile) -> SubStageResult:
    confirmed, uncertain = _split(pool)
    best = TCategory.Tx
    trace: list[TraceStep] = []
    for i, f in confirmed:
        for d in sorted(f.descriptors):
            cat = rules.t_for_descriptor(d)
            if cat is not None:
                trace.append(TraceStep(f"descriptor:{d}->{cat.value}", (i,)))
                best = max(best, cat)
        # separate nodules act through their descriptor, not their own diameter
        if f.size_mm is not None and not any(d.startswith("separate-nodule") for d in f.descriptors):
            cat = rules.t_for_size(f.size_mm)
            if cat is not None:
                trace.append(TraceStep(f"size:{f.size_mm:g}mm->{cat.value}", (i,)))
                best = max(best, cat)
    if best is TCategory.Tx:
        trace.append(TraceStep("no assessable confirmed evidence->Tx"))
    return SubStageResult("T", best, uncertain, tuple(trace))


def _rule_n(pool: Sequence[NormalizedFinding], rules: StagingRuleFile) -> SubStageResult:
    confirmed, uncertain = _split(pool)
    best: NCategory | None = None
    unevaluable: list[int] = []
    trace: list[TraceStep] = []
    for i, f in confirmed:
        for d in sorted(f.descriptors):
            cat = rules.n_for_descriptor(d)
            if cat is NCategory.Nx:
                unevaluable.append(i)
                continue
            trace.append(TraceStep(f"station:{d}->{cat.value}", (i,)))
            best = cat if best is None else max(best, cat)
    if best is None:
        if unevaluable:
            best = NCategory.Nx
            trace.append(TraceStep("regional nodes unevaluable->Nx", tuple(unevaluable)))
        else:
            best = NCategory.N0
            trace.append(TraceStep("no confirmed regional nodal involvement->N0"))
    return SubStageResult("N", best, uncertain, tuple(trace))


def _rule_m(pool: Sequence[NormalizedFinding], rules: StagingRuleFile) -> SubStageResult:
    confirmed, uncertain = _split(pool)
    best = MCategory.M0
    trace: list[TraceStep] = []
    extrathoracic: list[int] = []
    total = 0
    for i, f in confirmed:
        hit = False
        for d in sorted(f.descriptors):
            target = rules.m_for_descriptor(d)
            if target == "extrathoracic":
                hit = True
            else:
                trace.append(TraceStep(f"pattern:{d}->{target}", (i,)))
                best = max(best, MCategory(target))
        if hit:
            extrathoracic.append(i)
            # an unstated count ("multiple") is at least two lesions
            total += 2 if f.lesion_count is None else max(f.lesion_count, 1)
    if extrathoracic:
        cat = rules.m_single if total == 1 else rules.m_multiple
        label = "single extrathoracic lesion" if total == 1 else f"multiple extrathoracic lesions ({total}+)"
        trace.append(TraceStep(f"{label}->{cat.value}", tuple(extrathoracic)))
        best = max(best, cat)
    if best is MCategory.M0:
        trace.append(TraceStep("no confirmed distant pattern->M0"))
    return SubStageResult("M", best, uncertain, tuple(trace))


_RULE_STAGERS = {"T": _rule_t, "N": _rule_n, "M": _rule_m}


# -- agent path -----------------------------------------------------------------


class TraceItem(BaseModel):
    step: str
    refs: list[int] = Field(default_factory=list)


class StageReply(BaseModel):
    category: str
    trace: list[TraceItem] = Field(default_factory=list)


def findings_block(pool: Sequence[NormalizedFinding]) -> str:
    if not pool:
        return "(no findings in this pool)"
    lines = []
    for i, f in enumerate(pool):
        lines.append(f"[{i}] {'CONFIRMED' if f.confirmed else 'UNCERTAIN'} {f.describe()}")
    return "\n".join(lines)


def _agent(dimension: str, pool: Sequence[NormalizedFinding], engine: BackendDriven, rules: StagingRuleFile) -> SubStageResult:
    tag = f"{dimension.lower()}-stage"
    if engine.templates and dimension in engine.templates:
        system = engine.templates[dimension]
    else:
        system = render_prompt(tag, engine.language, rules=rules.describe())
    body = f"Case ID: {engine.case_id}\nDimension: {dimension}\nFindings:\n{findings_block(pool)}"
    response = engine.backend.complete(user_request(system, [text_part(body)], tag=tag))
    try:
        reply = parse_structured(response.text, StageReply)
        category = parse_category(dimension, reply.category)
    except (StructuredOutputError, ValueError) as exc:
        raise AgentParseError(dimension, str(exc)) from exc
    _, uncertain = _split(pool)
    trace = tuple(TraceStep(t.step, tuple(r for r in t.refs if 0 <= r < len(pool))) for t in reply.trace)
    return SubStageResult(dimension, category, uncertain, trace)


# -- public API -----------------------------------------------------------------


def stage_dimension(dimension: str, pool: Sequence[NormalizedFinding], engine=RULE_BASED, rules: StagingRuleFile | None = None) -> SubStageResult:
    if dimension not in DIMENSION_TYPES:
        raise ValueError(f"unknown dimension {dimension!r}")
    rules = rules or default_rules()
    if isinstance(engine, BackendDriven):
        return _agent(dimension, pool, engine, rules)
    return _RULE_STAGERS[dimension](pool, rules)


def stage_t(e_t, engine=RULE_BASED, rules=None) -> SubStageResult:
    return stage_dimension("T", e_t, engine, rules)


def stage_n(e_n, engine=RULE_BASED, rules=None) -> SubStageResult:
    return stage_dimension("N", e_n, engine, rules)


def stage_m(e_m, engine=RULE_BASED, rules=None) -> SubStageResult:
    return stage_dimension("M", e_m, engine, rules)


def stage_all(pools: EvidencePools, engine=RULE_BASED, rules: StagingRuleFile | None = None, parallel: bool = True):
    """Run the three stagers; they share nothing, so order and threading are irrelevant."""
    rules = rules or default_rules()
    dims = ("T", "N", "M")
    results: dict[str, SubStageResult] = {}
    errors: dict[str, Exception] = {}
    if parallel:
        with ThreadPoolExecutor(max_workers=3) as pool:
            futures = {d: pool.submit(stage_dimension, d, pools.pool(d), engine, rules) for d in dims}
            for d, fut in futures.items():
                try:
                    results[d] = fut.result()
                except (BackendError, AgentParseError, RuleFileError) as exc:
                    errors[d] = exc
    else:
        for d in dims:
            try:
                results[d] = stage_dimension(d, pools.pool(d), engine, rules)
            except (BackendError, AgentParseError, RuleFileError) as exc:
                errors[d] = exc
    if errors:
        raise StagingFailed(errors)
    return results["T"], results["N"], results["M"]
