"""The staged decision pipeline and the single-prompt baseline, per case."""

from __future__ import annotations

from dataclasses import dataclass, field

from pydantic import BaseModel, Field

from .aggregation import PotentialShift, StageGroupTable, aggregate_stage, default_table, project_uncertainty
from .backend import Backend, text_part, user_request
from .cases import CaseRecord, GoldStaging, TaskId
from .categories import OverallStage, format_tnm, parse_category
from .expert import GuidelineStore, TreatmentRecommendation, default_guidelines, recommend
from .normalize import EvidencePools, Normalized, case_parts, dispatch_pools, normalize_case, normalize_reports
from .prompts import render_prompt
from .routing import (
    ClinicalWarning,
    ProfileVector,
    RoutingConfig,
    ScenarioId,
    check_missing_critical,
    default_routing,
    extract_profile,
    route_scenario,
)
from .staging import RULE_BASED, BackendDriven, StagingRuleFile, SubStageResult, default_rules, stage_all
from .structured import StructuredOutputError, parse_structured

GOLD_HEADER = "Reference staging (expert-annotated):"


def gold_block(gold: GoldStaging) -> str:
    text = f"{GOLD_HEADER} {gold.render()}"
    if gold.reasoning_evidence:
        text += f"\nReference staging evidence: {gold.reasoning_evidence}"
    return text


def predicted_block(substages, stage: OverallStage) -> str:
    t, n, m = (s.category.value for s in substages)
    return f"Pipeline staging: T={t}; N={n}; M={m}; overall stage {stage.value}"


@dataclass(frozen=True)
class PipelineOptions:
    normalizer: str = "lexicon"  # lexicon | backend
    stager: str = "rule"  # rule | agent
    profiler: str = "lexicon"  # lexicon | backend
    language: str = "EN"
    input_mode: str = "TextOnly"
    rules: StagingRuleFile | None = None
    table: StageGroupTable | None = None
    routing: RoutingConfig | None = None
    guidelines: GuidelineStore | None = None

    @classmethod
    def from_dict(cls, data: dict | None, **overrides) -> "PipelineOptions":
        data = dict(data or {})
        data.update(overrides)
        known = {k: data[k] for k in ("normalizer", "stager", "profiler", "language", "input_mode") if k in data}
        opts = cls(**known)
        for name, allowed in (("normalizer", ("lexicon", "backend")), ("stager", ("rule", "agent")), ("profiler", ("lexicon", "backend"))):
            if getattr(opts, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}")
        return opts


@dataclass
class StagingOutcome:
    normalized: Normalized
    pools: EvidencePools
    substages: tuple[SubStageResult, SubStageResult, SubStageResult]
    stage: OverallStage
    shifts: list[PotentialShift]

    @property
    def tnm(self):
        return tuple(s.category for s in self.substages)

    def reasoning(self) -> str:
        lines = []
        for sub in self.substages:
            steps = "; ".join(s.rule for s in sub.trace) or "no rule fired"
            lines.append(f"{sub.dimension}: {sub.category.value} ({steps})")
            for f in sub.uncertain:
                lines.append(f"  uncertain {sub.dimension} evidence: {f.describe()}")
        lines.append(f"Overall stage: {self.stage.value}")
        for shift in self.shifts:
            lines.append(
                f"Potential shift: if confirmed, {shift.dimension}->{shift.assumed_category.value} gives {shift.projected_stage.value}"
            )
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "primary_side": self.pools.primary_side.value,
            "substages": [s.to_dict() for s in self.substages],
            "stage": self.stage.value,
            "potential_shifts": [s.to_dict() for s in self.shifts],
            "unclassifiable": [f.describe() for f in self.pools.unclassifiable],
        }


@dataclass
class RecommendationOutcome:
    profile: ProfileVector
    scenario: ScenarioId
    warnings: list[ClinicalWarning]
    recommendation: TreatmentRecommendation

    def to_dict(self) -> dict:
        return {
            "profile": self.profile.to_dict(),
            "scenario": self.scenario.value,
            "recommendation": self.recommendation.to_dict(),
        }


def normalize(case: CaseRecord, backend: Backend | None, options: PipelineOptions) -> tuple[Normalized, EvidencePools]:
    if options.normalizer == "backend":
        if backend is None:
            raise ValueError("the backend normalizer needs a backend")
        normalized = normalize_reports(case, backend, language=options.language, input_mode=options.input_mode)
    else:
        normalized = normalize_case(case)
    return normalized, dispatch_pools(normalized.findings, normalized.primary_side)


def run_staging(case: CaseRecord, backend: Backend | None = None, options: PipelineOptions | None = None) -> StagingOutcome:
    options = options or PipelineOptions()
    rules = options.rules or default_rules()
    table = options.table or default_table()
    normalized, pools = normalize(case, backend, options)
    if options.stager == "agent":
        if backend is None:
            raise ValueError("the agent stager needs a backend")
        engine = BackendDriven(backend, options.language, case_id=case.id)
    else:
        engine = RULE_BASED
    substages = stage_all(pools, engine, rules)
    tnm = tuple(s.category for s in substages)
    stage = aggregate_stage(*tnm, table=table)
    uncertain = [f for s in substages for f in s.uncertain]
    shifts = project_uncertainty(uncertain, tnm, rules, table, pools=pools)
    return StagingOutcome(normalized, pools, substages, stage, shifts)


def run_recommendation(
    case: CaseRecord,
    stage: OverallStage,
    pools: EvidencePools,
    backend: Backend,
    options: PipelineOptions | None = None,
    substages=None,
    context: str = "",
) -> RecommendationOutcome:
    options = options or PipelineOptions()
    routing = options.routing or default_routing()
    profile_backend = backend if options.profiler == "backend" else None
    profile = extract_profile(case, stage, substages, profile_backend, pools=pools, config=routing, input_mode=options.input_mode)
    scenario = route_scenario(profile, routing)
    warnings = check_missing_critical(profile, scenario, routing, options.language)
    rec = recommend(
        profile,
        scenario,
        options.guidelines or default_guidelines(),
        backend,
        language=options.language,
        case_id=case.id,
        warnings=warnings,
        context=context,
    )
    return RecommendationOutcome(profile, scenario, warnings, rec)


@dataclass
class CaseResult:
    staging: StagingOutcome | None = None
    recommendation: RecommendationOutcome | None = None
    predicted_tnm: tuple | None = None
    stage: OverallStage | None = None
    reasoning: str = ""
    plan_text: str = ""
    plan_reasoning: str = ""
    core_regimen: tuple[str, ...] = ()
    details: dict = field(default_factory=dict)


def run_lcagent(case: CaseRecord, task: TaskId, backend: Backend, options: PipelineOptions) -> CaseResult:
    task = TaskId(task)
    if task is TaskId.TreatmentRecommendation:
        # gold stage replaces the predicted one at the routing boundary
        if case.gold_staging is None:
            raise ValueError(f"case {case.id} has no gold staging to inject")
        gold = case.gold_staging
        stage = aggregate_stage(*gold.tnm, table=options.table)
        _, pools = normalize(case, backend, options)
        rec = run_recommendation(case, stage, pools, backend, options, context=gold_block(gold))
        return _with_recommendation(CaseResult(stage=stage), rec)

    outcome = run_staging(case.without_gold(), backend, options)
    result = CaseResult(
        staging=outcome,
        predicted_tnm=outcome.tnm,
        stage=outcome.stage,
        reasoning=outcome.reasoning(),
        details={"staging": outcome.to_dict()},
    )
    if task is TaskId.TnmStaging:
        return result
    rec = run_recommendation(
        case.without_gold(), outcome.stage, outcome.pools, backend, options, outcome.substages,
        context=predicted_block(outcome.substages, outcome.stage),
    )
    return _with_recommendation(result, rec)


def _with_recommendation(result: CaseResult, rec: RecommendationOutcome) -> CaseResult:
    result.recommendation = rec
    result.plan_text = rec.recommendation.render()
    result.core_regimen = rec.recommendation.core_regimen
    result.plan_reasoning = rec.recommendation.reasoning
    result.details["recommendation"] = rec.to_dict()
    return result


# -- single-prompt baseline ----------------------------------------------------------


class DirectStagingReply(BaseModel):
    t: str
    n: str
    m: str
    reasoning: str = ""


class DirectPlanReply(BaseModel):
    strategy: str
    core_regimen: list[str] = Field(default_factory=list)
    key_considerations: str = ""
    reasoning: str = ""


class DirectParseError(ValueError):
    pass


DIRECT_STAGES = {
    TaskId.TnmStaging: "direct-staging",
    TaskId.TreatmentRecommendation: "direct-treatment",
    TaskId.EndToEnd: "direct-e2e",
}


def run_direct(case: CaseRecord, task: TaskId, backend: Backend, options: PipelineOptions) -> CaseResult:
    """Exactly one request per case."""
    task = TaskId(task)
    stage_name = DIRECT_STAGES[task]
    system = render_prompt(stage_name, options.language)
    header = f"Case ID: {case.id}"
    if task is TaskId.TreatmentRecommendation:
        if case.gold_staging is None:
            raise ValueError(f"case {case.id} has no gold staging to inject")
        header += "\n" + gold_block(case.gold_staging)
    parts = [text_part(header)] + case_parts(case.without_gold(), options.input_mode)
    response = backend.complete(user_request(system, parts, tag=stage_name))
    try:
        if task is TaskId.TnmStaging:
            reply = parse_structured(response.text, DirectStagingReply)
            tnm = (parse_category("T", reply.t), parse_category("N", reply.n), parse_category("M", reply.m))
            return CaseResult(
                predicted_tnm=tnm,
                stage=aggregate_stage(*tnm, table=options.table),
                reasoning=reply.reasoning,
                details={"staging": {"tnm": format_tnm(*tnm)}},
            )
        plan = parse_structured(response.text, DirectPlanReply)
    except (StructuredOutputError, ValueError) as exc:
        raise DirectParseError(str(exc)) from exc
    drugs = tuple(d.strip() for d in plan.core_regimen if d.strip())
    text = (
        f"Strategy: {plan.strategy}\nCore regimen: {', '.join(drugs) or 'none'}\n"
        f"Key considerations: {plan.key_considerations}\nReasoning: {plan.reasoning}"
    )
    return CaseResult(plan_text=text, core_regimen=drugs, plan_reasoning=plan.reasoning, details={"plan": plan.model_dump()})
