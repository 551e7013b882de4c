"""Clinical profile extraction and deterministic scenario routing."""

from __future__ import annotations

import functools
import itertools
import json
import re
from dataclasses import dataclass, field, fields
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterator, Sequence

from pydantic import BaseModel

from .backend import Backend, text_part, user_request
from .cases import CaseRecord
from .categories import OverallStage
from .normalize import EvidencePools, case_parts
from .predicates import Predicate, PredicateError
from .prompts import render_prompt
from .structured import StructuredOutputError, parse_structured


class Histology(str, Enum):
    Adenocarcinoma = "Adenocarcinoma"
    Squamous = "Squamous"
    SCLC = "SCLC"
    OtherNSCLC = "OtherNSCLC"
    Unknown = "Unknown"


class DriverStatus(str, Enum):
    Positive = "Positive"
    Negative = "Negative"
    Unknown = "Unknown"


class DriverGene(str, Enum):
    EGFR = "EGFR"
    ALK = "ALK"
    ROS1 = "ROS1"
    KRAS_G12C = "KRAS-G12C"
    Other = "Other"


class PdL1(str, Enum):
    Negative = "<1%"
    Low = "1-49%"
    High = ">=50%"
    Unknown = "Unknown"


class Resection(str, Enum):
    yes = "yes"
    no = "no"
    Unknown = "Unknown"


class Burden(str, Enum):
    None_ = "None"
    Oligo = "Oligo"
    Wide = "Wide"
    Unknown = "Unknown"


class ScenarioId(str, Enum):
    PostopEarlyStage = "PostopEarlyStage"
    NeoadjuvantResectable = "NeoadjuvantResectable"
    AdvDriverNegFirstLine = "AdvDriverNegFirstLine"
    AdvDriverPosFirstLine = "AdvDriverPosFirstLine"
    AdvDriverNegLaterLine = "AdvDriverNegLaterLine"
    AdvDriverPosLaterLine = "AdvDriverPosLaterLine"
    Oligometastatic = "Oligometastatic"
    MdtReferral = "MdtReferral"


class InvalidProfile(ValueError):
    pass


class ProfileParseError(ValueError):
    pass


STAGE_IV = (OverallStage.IVA, OverallStage.IVB)


@dataclass(frozen=True)
class ProfileVector:
    histology: Histology = Histology.Unknown
    driver_status: DriverStatus = DriverStatus.Unknown
    driver_gene: DriverGene | None = None
    pd_l1: PdL1 = PdL1.Unknown
    ps_score: int | None = None  # None: not documented
    resection_done: Resection = Resection.Unknown
    treatment_line: int = 1
    prior_regimens: tuple[str, ...] = ()
    metastatic_burden: Burden = Burden.None_
    stage: OverallStage = OverallStage.Indeterminate
    resectable_intent: bool = False
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if self.treatment_line < 1:
            raise InvalidProfile("treatment_line must be a positive integer")
        if (self.treatment_line == 1) != (not self.prior_regimens):
            raise InvalidProfile("treatment_line is 1 exactly when there are no prior regimens")
        if self.ps_score is not None and not 0 <= self.ps_score <= 4:
            raise InvalidProfile("ps_score must lie in 0..4")
        if (self.driver_status is DriverStatus.Positive) != (self.driver_gene is not None):
            raise InvalidProfile("driver_gene is set exactly when driver_status is Positive")
        if (
            self.metastatic_burden is not Burden.None_
            and self.stage not in STAGE_IV
            and "burden-without-stage-iv" not in self.flags
        ):
            object.__setattr__(self, "flags", self.flags + ("burden-without-stage-iv",))

    @property
    def driver_label(self) -> str:
        if self.driver_status is DriverStatus.Positive:
            return f"Positive({self.driver_gene.value})"
        return self.driver_status.value

    def to_dict(self) -> dict:
        return {
            "histology": self.histology.value,
            "driver_status": self.driver_label,
            "pd_l1": self.pd_l1.value,
            "ps_score": "Unknown" if self.ps_score is None else self.ps_score,
            "resection_done": self.resection_done.value,
            "treatment_line": self.treatment_line,
            "prior_regimens": list(self.prior_regimens),
            "metastatic_burden": self.metastatic_burden.value,
            "stage": self.stage.value,
            "resectable_intent": self.resectable_intent,
            "flags": list(self.flags),
        }

    def render(self) -> str:
        return "\n".join(f"- {k}: {v}" for k, v in self.to_dict().items() if k != "flags")


PROFILE_FIELDS = frozenset(f.name for f in fields(ProfileVector)) - {"flags"}


@dataclass(frozen=True)
class ClinicalWarning:
    field: str
    message: str

    def __str__(self) -> str:
        return self.message


# -- routing config ---------------------------------------------------------------


@dataclass(frozen=True)
class RoutingRule:
    scenario: ScenarioId
    guard: Predicate


@dataclass(frozen=True)
class RoutingConfig:
    version: str
    rules: tuple[RoutingRule, ...]
    fallback: ScenarioId
    first_line: frozenset[ScenarioId]
    critical_fields: dict[ScenarioId, tuple[str, ...]]
    oligo_max_lesions: int = 3
    oligo_max_organs: int = 2


def routing_from_dict(data: dict) -> RoutingConfig:
    rules = []
    for entry in data["rules"]:
        try:
            guard = Predicate(entry["when"], PROFILE_FIELDS)
        except PredicateError as exc:
            raise ValueError(f"routing rule for {entry['scenario']}: {exc}") from exc
        rules.append(RoutingRule(ScenarioId(entry["scenario"]), guard))
    critical = {}
    for name, names in data.get("critical_fields", {}).items():
        unknown = [n for n in names if n not in PROFILE_FIELDS]
        if unknown:
            raise ValueError(f"critical field(s) {unknown} are not profile fields")
        critical[ScenarioId(name)] = tuple(names)
    threshold = data.get("oligo_threshold", {})
    return RoutingConfig(
        version=str(data.get("version", "")),
        rules=tuple(rules),
        fallback=ScenarioId(data.get("fallback", "MdtReferral")),
        first_line=frozenset(ScenarioId(s) for s in data.get("first_line_scenarios", [])),
        critical_fields=critical,
        oligo_max_lesions=int(threshold.get("max_lesions", 3)),
        oligo_max_organs=int(threshold.get("max_organs", 2)),
    )


def load_routing(path: str | Path | None = None) -> RoutingConfig:
    if path is None:
        return default_routing()
    return routing_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@functools.lru_cache(maxsize=1)
def default_routing() -> RoutingConfig:
    text = resources.files("lcagent.data").joinpath("routing.json").read_text(encoding="utf-8")
    return routing_from_dict(json.loads(text))


def matching_rules(profile: ProfileVector, config: RoutingConfig | None = None) -> list[ScenarioId]:
    config = config or default_routing()
    return [r.scenario for r in config.rules if r.guard(profile)]


def route_scenario(profile: ProfileVector, config: RoutingConfig | None = None) -> ScenarioId:
    """First matching guard in priority order, else the fallback scenario."""
    config = config or default_routing()
    for rule in config.rules:
        if rule.guard(profile):
            return rule.scenario
    return config.fallback


# -- missing critical fields --------------------------------------------------------

_FIELD_LABELS = {
    "histology": ("histological subtype", "病理组织学类型"),
    "driver_status": ("driver-gene status (EGFR/ALK/ROS1/KRAS and others)", "驱动基因状态（EGFR/ALK/ROS1/KRAS 等）"),
    "pd_l1": ("PD-L1 expression", "PD-L1 表达水平"),
    "ps_score": ("ECOG performance status", "ECOG PS 评分"),
    "resection_done": ("surgical resection status", "手术切除情况"),
    "metastatic_burden": ("metastatic burden (lesion and organ count)", "转移负荷（病灶数与器官数）"),
    "stage": ("overall clinical stage", "临床总分期"),
}


def _is_missing(profile: ProfileVector, name: str) -> bool:
    value = getattr(profile, name)
    if value is None:
        return True
    return isinstance(value, Enum) and value.value in ("Unknown", "Indeterminate")


def check_missing_critical(
    profile: ProfileVector,
    scenario: ScenarioId,
    config: RoutingConfig | None = None,
    language: str = "EN",
) -> list[ClinicalWarning]:
    config = config or default_routing()
    zh = str(getattr(language, "value", language)).upper() == "ZH"
    warnings = []
    for name in config.critical_fields.get(ScenarioId(scenario), ()):
        if not _is_missing(profile, name):
            continue
        en, cn = _FIELD_LABELS.get(name, (name, name))
        if zh:
            msg = f"治疗前评估提示：病例未记录{cn}，请在确定治疗方案前完善该项检查或评估。"
        else:
            msg = f"Pre-treatment evaluation required: {en} is not documented; obtain it before finalizing therapy."
        warnings.append(ClinicalWarning(name, msg))
    if ScenarioId(scenario) is config.fallback:
        reason = _referral_reason(profile)
        if zh:
            msg = f"多学科会诊提示：{reason[1]}，超出本系统专家场景范围，建议提交 MDT 讨论。"
        else:
            msg = f"MDT referral: {reason[0]}; this falls outside the supported expert scenarios."
        warnings.append(ClinicalWarning("scenario", msg))
    return warnings


def _referral_reason(profile: ProfileVector) -> tuple[str, str]:
    if profile.histology is Histology.SCLC:
        return "small-cell histology", "小细胞肺癌"
    if not profile.stage.determinate:
        return "the overall stage is indeterminate", "总分期无法确定"
    if profile.stage in STAGE_IV and profile.resection_done is Resection.yes:
        return "stage IV disease after resection", "术后 IV 期病变"
    if profile.stage not in STAGE_IV:
        return "non-metastatic disease without a documented resection or resectable intent", "非转移性病变但无手术或可切除意向记录"
    return "no routing rule applies", "无适用路由规则"


# -- grid helper ---------------------------------------------------------------------

GRID_LINES = (1, 2, 3)


def iter_profile_grid() -> Iterator[ProfileVector]:
    """Every combination of the profile field domains (lines 1..3 stand for 1, 2 and >=3)."""
    drivers = [(DriverStatus.Negative, None), (DriverStatus.Unknown, None)] + [
        (DriverStatus.Positive, g) for g in DriverGene
    ]
    for hist, (status, gene), pd, ps, res, line, burden, stage, intent in itertools.product(
        Histology, drivers, PdL1, (0, 1, 2, 3, 4, None), Resection, GRID_LINES, Burden, OverallStage, (False, True)
    ):
        prior = tuple(f"regimen-{i}" for i in range(1, line))
        yield ProfileVector(hist, status, gene, pd, ps, res, line, prior, burden, stage, intent)


# -- lexicon extractor ---------------------------------------------------------------

_CLAUSE_RE = re.compile(r"[^。；;\n.!?！？]+")
_SCLC_RE = re.compile(r"(?<!non-)(?<!non )(?<![a-z])small[- ]cell(?! lung cancer, non)|(?<!非)小细胞|\bSCLC\b", re.IGNORECASE)
_HISTOLOGY_PATTERNS = (
    (Histology.Squamous, re.compile(r"squamous|鳞癌|鳞状细胞癌", re.IGNORECASE)),
    (Histology.Adenocarcinoma, re.compile(r"adenocarcinoma|腺癌", re.IGNORECASE)),
    (Histology.OtherNSCLC, re.compile(r"large[- ]cell|大细胞|\bNSCLC\b|non-small[- ]cell|非小细胞", re.IGNORECASE)),
)
_GENE_PATTERNS = (
    (DriverGene.KRAS_G12C, re.compile(r"KRAS\s*[- ]?\s*G12C", re.IGNORECASE)),
    (DriverGene.EGFR, re.compile(r"EGFR", re.IGNORECASE)),
    (DriverGene.ALK, re.compile(r"\bALK\b|ALK(?=[\s:：阳融])", re.IGNORECASE)),
    (DriverGene.ROS1, re.compile(r"ROS-?1", re.IGNORECASE)),
    (DriverGene.Other, re.compile(r"\b(?:BRAF|MET|RET|HER2|ERBB2|NTRK)\b|(?:BRAF|MET|RET|HER2|NTRK)(?=[\s:：阳突融])", re.IGNORECASE)),
)
_POS_RE = re.compile(
    r"positive|mutation|mutant|mutated|rearrange|fusion|amplification|exon\s*\d+|L858R|G12C|阳性|突变|融合|重排|扩增",
    re.IGNORECASE,
)
_NEG_RE = re.compile(r"negative|wild[- ]type|not detected|no (?:actionable|driver)|阴性|野生型|未检出|未见", re.IGNORECASE)
_PDL1_RE = re.compile(r"PD-?L1[^。；;\n]*?(?:TPS|TC|CPS)?\s*[:：=]?\s*(<|＜|≥|>=|>|＞)?\s*(\d+(?:\.\d+)?)\s*%", re.IGNORECASE)
_PDL1_NEG_RE = re.compile(r"PD-?L1[^。；;\n]{0,20}?(?:negative|阴性)", re.IGNORECASE)
_PS_RE = re.compile(r"(?:ECOG|\bPS)\s*(?:PS|评分|score)?\s*[:：=]?\s*([0-4])(?!\d)", re.IGNORECASE)
_RESECTED_RE = re.compile(
    r"lobectomy|pneumonectomy|segmentectomy|wedge resection|(?:underwent|after|post)[^。.;\n]{0,30}resection|resected|postoperative|"
    r"肺叶切除|全肺切除|楔形切除|根治术后|切除术后|术后病理",
    re.IGNORECASE,
)
_NOT_RESECTED_RE = re.compile(
    r"no (?:prior )?(?:surgery|resection)|not (?:been )?(?:operated|resected)|未行手术|未手术|未接受手术", re.IGNORECASE
)
_INTENT_RE = re.compile(r"(?<!un)resectable|potentially operable|可手术切除|可切除|拟行手术", re.IGNORECASE)
_NO_INTENT_RE = re.compile(r"unresectable|inoperable|不可切除|无法切除|不能手术", re.IGNORECASE)
_PRIOR_RE = re.compile(r"(?:prior systemic (?:therapy|treatment)|previous systemic (?:therapy|treatment)|既往系统治疗)\s*[:：]\s*((?:[^。\n.]|\.(?=\S))*)", re.IGNORECASE)
_NONE_RE = re.compile(r"^\s*(?:none|nil|无|未)\s*[.。]?\s*$", re.IGNORECASE)


def _case_text(case: CaseRecord) -> str:
    return "\n".join(d.text for d in case.documents if d.text)


def _histology(text: str) -> Histology:
    if _SCLC_RE.search(text):
        # "non-small cell" must not read as small-cell
        stripped = re.sub(r"non-small[- ]cell|非小细胞", " ", text, flags=re.IGNORECASE)
        if _SCLC_RE.search(stripped):
            return Histology.SCLC
    for hist, pattern in _HISTOLOGY_PATTERNS:
        if pattern.search(text):
            return hist
    return Histology.Unknown


def _driver(text: str) -> tuple[DriverStatus, DriverGene | None]:
    positive: DriverGene | None = None
    negative = False
    for clause in _CLAUSE_RE.findall(text):
        genes = [g for g, p in _GENE_PATTERNS if p.search(clause)]
        if not genes and re.search(r"driver gene|驱动基因", clause, re.IGNORECASE) and _NEG_RE.search(clause):
            negative = True
            continue
        if not genes:
            continue
        if _NEG_RE.search(clause):
            negative = True
        elif _POS_RE.search(clause) and positive is None:
            positive = genes[0]
    if positive is not None:
        return DriverStatus.Positive, positive
    if negative:
        return DriverStatus.Negative, None
    return DriverStatus.Unknown, None


def _pd_l1(text: str) -> PdL1:
    m = _PDL1_RE.search(text)
    if m:
        sign, value = m.group(1) or "", float(m.group(2))
        if sign in ("<", "＜") and value <= 1:
            return PdL1.Negative
        if value < 1:
            return PdL1.Negative
        if value >= 50 or (sign in (">", "＞") and value >= 49):
            return PdL1.High
        return PdL1.Low
    if _PDL1_NEG_RE.search(text):
        return PdL1.Negative
    return PdL1.Unknown


def _ps(text: str) -> int | None:
    m = _PS_RE.search(text)
    return int(m.group(1)) if m else None


def _resection(text: str) -> Resection:
    if _NOT_RESECTED_RE.search(text):
        return Resection.no
    if _RESECTED_RE.search(text):
        return Resection.yes
    return Resection.Unknown


def _prior_regimens(text: str) -> tuple[str, ...]:
    m = _PRIOR_RE.search(text)
    if not m or _NONE_RE.match(m.group(1)):
        return ()
    parts = [p.strip(" .。") for p in re.split(r"[;；]", m.group(1))]
    return tuple(p for p in parts if p)


def metastatic_burden(stage: OverallStage, pools: EvidencePools | None, config: RoutingConfig | None = None) -> Burden:
    """Oligo when confirmed distant lesions stay within the configured lesion and organ limits."""
    config = config or default_routing()
    if stage not in STAGE_IV:
        return Burden.None_
    if pools is None:
        return Burden.Unknown
    distant = [f for f in pools.e_m if f.confirmed]
    if not distant:
        return Burden.Unknown
    if any(f.lesion_count is None for f in distant):
        return Burden.Unknown
    lesions = sum(max(f.lesion_count, 1) for f in distant)
    organs = {re.sub(r"^(?:left|right)-", "", f.site) for f in distant}
    if lesions <= config.oligo_max_lesions and len(organs) <= config.oligo_max_organs:
        return Burden.Oligo
    return Burden.Wide


def lexicon_profile(case: CaseRecord, s_final: OverallStage, pools: EvidencePools | None = None, config: RoutingConfig | None = None) -> ProfileVector:
    text = _case_text(case)
    status, gene = _driver(text)
    prior = _prior_regimens(text)
    intent = bool(_INTENT_RE.search(text)) and not _NO_INTENT_RE.search(text)
    return ProfileVector(
        histology=_histology(text),
        driver_status=status,
        driver_gene=gene,
        pd_l1=_pd_l1(text),
        ps_score=_ps(text),
        resection_done=_resection(text),
        treatment_line=len(prior) + 1,
        prior_regimens=prior,
        metastatic_burden=metastatic_burden(s_final, pools, config),
        stage=s_final,
        resectable_intent=intent,
    )


# -- backend extractor ----------------------------------------------------------------


class ProfileReply(BaseModel):
    histology: str = "Unknown"
    driver_status: str = "Unknown"
    driver_gene: str | None = None
    pd_l1: str = "Unknown"
    ps_score: int | str | None = None
    resection_done: str = "Unknown"
    prior_regimens: list[str] = []
    resectable_intent: bool = False


def _enum_or(cls, value, default):
    try:
        return cls(value)
    except ValueError:
        return default


def _profile_from_reply(reply: ProfileReply, case: CaseRecord, s_final: OverallStage, pools, config) -> ProfileVector:
    text = _case_text(case)
    status = _enum_or(DriverStatus, reply.driver_status, DriverStatus.Unknown)
    gene = _enum_or(DriverGene, reply.driver_gene, DriverGene.Other) if status is DriverStatus.Positive else None
    # evidence guard: a claimed biomarker must be mentioned somewhere in the record
    if gene is not None and gene is not DriverGene.Other:
        if not dict(_GENE_PATTERNS)[gene].search(text):
            status, gene = DriverStatus.Unknown, None
    pd = _enum_or(PdL1, reply.pd_l1, PdL1.Unknown)
    if pd is not PdL1.Unknown and not re.search(r"PD-?L1", text, re.IGNORECASE):
        pd = PdL1.Unknown
    ps = reply.ps_score
    if isinstance(ps, str):
        ps = int(ps) if ps.isdigit() else None
    if ps is not None and not 0 <= ps <= 4:
        ps = None
    prior = tuple(p.strip() for p in reply.prior_regimens if p.strip())
    return ProfileVector(
        histology=_enum_or(Histology, reply.histology, Histology.Unknown),
        driver_status=status,
        driver_gene=gene,
        pd_l1=pd,
        ps_score=ps,
        resection_done=_enum_or(Resection, reply.resection_done, Resection.Unknown),
        treatment_line=len(prior) + 1,
        prior_regimens=prior,
        metastatic_burden=metastatic_burden(s_final, pools, config),
        stage=s_final,
        resectable_intent=reply.resectable_intent,
    )


def extract_profile(
    case: CaseRecord,
    s_final: OverallStage,
    substages: Sequence | None = None,
    backend: Backend | None = None,
    template: str | None = None,
    pools: EvidencePools | None = None,
    config: RoutingConfig | None = None,
    input_mode: str = "TextOnly",
) -> ProfileVector:
    """Fill a ProfileVector from case evidence; the lexicon path runs when no backend is given."""
    if backend is None:
        return lexicon_profile(case, s_final, pools, config)
    system = template if template is not None else render_prompt("profile", case.language.value)
    staging = f"Overall stage: {s_final.value}"
    if substages:
        staging += " (" + "; ".join(f"{s.dimension}={s.category.value}" for s in substages) + ")"
    parts = [text_part(f"Case ID: {case.id}\n{staging}")] + case_parts(case, input_mode)
    response = backend.complete(user_request(system, parts, tag="profile"))
    try:
        reply = parse_structured(response.text, ProfileReply)
    except StructuredOutputError as exc:
        raise ProfileParseError(str(exc)) from exc
    return _profile_from_reply(reply, case, s_final, pools, config)
