"""Lung-cancer TNM staging and guideline-grounded treatment recommendation.

The deterministic core (normalization, rule staging, stage grouping,
uncertainty projection, routing) runs without any model; model calls go
through the ``Backend`` interface so every run can be replayed from a script.
"""

from .aggregation import PotentialShift, StageGroupTable, aggregate_stage, default_table, project_uncertainty
from .backend import Backend, HttpChatBackend, ModelRequest, ModelResponse, RecordingBackend, ScriptedBackend, ScriptRule, load_backend
from .cases import CaseDocument, CaseRecord, GoldStaging, GoldTreatment, Language, Modality, TaskId, load_cases, validate_case
from .categories import MCategory, NCategory, OverallStage, TCategory
from .expert import ConstraintViolation, TreatmentRecommendation, recommend
from .normalize import EvidencePools, NormalizedFinding, dispatch_pools, normalize_case, split_composite_site
from .pipeline import PipelineOptions, run_direct, run_lcagent, run_staging
from .routing import ProfileVector, ScenarioId, route_scenario
from .staging import RULE_BASED, BackendDriven, SubStageResult, default_rules, stage_all

__version__ = "0.1.0"

__all__ = [
    "Backend", "BackendDriven", "CaseDocument", "CaseRecord", "ConstraintViolation", "EvidencePools", "GoldStaging",
    "GoldTreatment", "HttpChatBackend", "Language", "MCategory", "Modality", "ModelRequest", "ModelResponse",
    "NCategory", "NormalizedFinding", "OverallStage", "PipelineOptions", "PotentialShift", "ProfileVector",
    "RULE_BASED", "RecordingBackend", "ScenarioId", "ScriptRule", "ScriptedBackend", "StageGroupTable",
    "SubStageResult", "TCategory", "TaskId", "TreatmentRecommendation", "aggregate_stage", "default_rules",
    "default_table", "dispatch_pools", "load_backend", "load_cases", "normalize_case", "project_uncertainty",
    "recommend", "route_scenario", "run_direct", "run_lcagent", "run_staging", "split_composite_site",
    "stage_all", "validate_case",
]
