"""Batch runner for the three tasks, per-case scoring and the benchmark grid."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .backend import Backend, Exchange, RecordingBackend, load_backend, request_to_dict
from .cases import CaseRecord, Language, TaskId, load_cases, sample_core, validate_case
from .categories import format_tnm
from .metrics import (
    EmbeddingTokenF1,
    JudgeParseError,
    JudgeSimilarity,
    judge_precision,
    judge_reasoning_quality,
    staging_hits,
)
from .pipeline import GOLD_HEADER, CaseResult, PipelineOptions, run_direct, run_lcagent

log = logging.getLogger(__name__)

MODES = ("DirectPrompt", "LCAgent")
INPUT_MODES = ("ImageDirect", "TextOnly")
TAG_ORDER = ("extract", "t-stage", "n-stage", "m-stage", "profile", "expert")


class InputModeError(ValueError):
    pass


@dataclass
class RunConfig:
    task: TaskId
    mode: str
    backend: Backend
    input_mode: str = "TextOnly"
    language: str = "EN"
    judge: Backend | None = None
    seed: int = 0
    workers: int = 4
    pipeline: PipelineOptions = field(default_factory=PipelineOptions)
    similarity: str = "embedding"  # embedding | judge

    def __post_init__(self):
        self.task = TaskId(self.task)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}")
        if self.similarity not in ("embedding", "judge"):
            raise ValueError("similarity must be 'embedding' or 'judge'")
        self.language = Language(self.language.upper()).value
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def model(self) -> str:
        return self.backend.name


@dataclass
class TaskOutput:
    case_id: str
    task: TaskId
    mode: str
    result: CaseResult | None = None
    transcript: list[Exchange] = field(default_factory=list)
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def request_texts(self) -> list[str]:
        return [ex.request.flat_text() for ex in self.transcript]


def _tag_rank(exchange: Exchange) -> int:
    tag = exchange.request.tag
    return TAG_ORDER.index(tag) if tag in TAG_ORDER else len(TAG_ORDER)


def check_input_mode(case: CaseRecord, input_mode: str) -> None:
    for i, doc in enumerate(case.documents):
        if input_mode == "ImageDirect" and not doc.image_refs:
            raise InputModeError(f"document {i} has no image_refs for ImageDirect input")
        if input_mode == "TextOnly" and not (doc.text and doc.text.strip()):
            raise InputModeError(f"document {i} has no text for TextOnly input")


def _options_for(config: RunConfig) -> PipelineOptions:
    p = config.pipeline
    return PipelineOptions(
        p.normalizer, p.stager, p.profiler, config.language, config.input_mode, p.rules, p.table, p.routing, p.guidelines
    )


def run_case(case: CaseRecord, config: RunConfig) -> TaskOutput:
    recorder = RecordingBackend(config.backend)
    out = TaskOutput(case.id, config.task, config.mode)
    try:
        issues = validate_case(case, config.task)
        if issues:
            raise ValueError("invalid case: " + ", ".join(f"{i.code}({i.detail})" for i in issues))
        check_input_mode(case, config.input_mode)
        runner = run_direct if config.mode == "DirectPrompt" else run_lcagent
        out.result = runner(case, config.task, recorder, _options_for(config))
    except Exception as exc:  # per-case isolation: record and move on
        out.error = f"{type(exc).__name__}: {exc}"
        log.info("case %s failed: %s", case.id, out.error)
    # stage agents run concurrently; order by pipeline position for stable transcripts
    out.transcript = sorted(recorder.exchanges, key=_tag_rank)
    return out


def run_task(cases: Iterable[CaseRecord], config: RunConfig) -> list[TaskOutput]:
    cases = list(cases)
    if config.workers == 1:
        return [run_case(c, config) for c in cases]
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        return list(pool.map(lambda c: run_case(c, config), cases))


# -- transcript checks -------------------------------------------------------------------


def gold_strings(case: CaseRecord) -> list[str]:
    """Strings whose presence in a request means the gold staging reached the model."""
    gold = case.gold_staging
    if gold is None:
        return []
    out = [GOLD_HEADER, gold.render()]
    if gold.reasoning_evidence:
        out.append(gold.reasoning_evidence)
    return out


def transcript_has_gold(output: TaskOutput, case: CaseRecord) -> bool:
    needles = gold_strings(case)
    for ex in output.transcript:
        if ex.request.tag.startswith("judge-"):
            continue
        text = ex.request.flat_text()
        if any(n in text for n in needles):
            return True
    return False


def scan_for_gold(outputs: list[TaskOutput], cases: list[CaseRecord]) -> dict[str, bool]:
    by_id = {c.id: c for c in cases}
    return {o.case_id: transcript_has_gold(o, by_id[o.case_id]) for o in outputs}


# -- scoring ------------------------------------------------------------------------------


@dataclass
class CaseScore:
    case_id: str
    error: str | None = None
    exact: bool | None = None
    t: bool | None = None
    n: bool | None = None
    m: bool | None = None
    rq: float | None = None
    rq_t: float | None = None
    rq_n: float | None = None
    rq_m: float | None = None
    precision: float | None = None
    f1: float | None = None
    judge_transcript: list[Exchange] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k != "judge_transcript"}


def score_output(output: TaskOutput, case: CaseRecord, judge: Backend | None, similarity: str, language: str) -> CaseScore:
    score = CaseScore(case.id, output.error)
    recorder = RecordingBackend(judge) if judge is not None else None
    result = output.result if output.ok else None
    if output.task is TaskId.TnmStaging:
        gold = case.gold_staging
        hits = staging_hits(result.predicted_tnm if result else None, gold.tnm)
        score.exact, score.t, score.n, score.m = hits
        if result is not None and recorder is not None:
            try:
                rq = judge_reasoning_quality(
                    result.reasoning, gold.render(), gold.reasoning_evidence, recorder, language, case.id
                )
                score.rq = rq.rq
                score.rq_t, score.rq_n, score.rq_m = rq.component_rq
            except (JudgeParseError, Exception) as exc:  # judge failure leaves the case unscored
                log.info("RQ unscored for %s: %s", case.id, exc)
    else:
        gold = case.gold_treatment
        if result is None:
            score.precision = 0.0 if recorder is not None else None
            score.f1 = 0.0
        else:
            if recorder is not None:
                try:
                    score.precision = judge_precision(result.plan_text, gold.render(), recorder, language, case.id)
                except Exception as exc:
                    log.info("precision unscored for %s: %s", case.id, exc)
            scorer = JudgeSimilarity(recorder, language) if similarity == "judge" and recorder else EmbeddingTokenF1()
            try:
                score.f1 = scorer.score(result.plan_reasoning, gold.reasoning, case.id)
            except Exception as exc:
                log.info("F1 unscored for %s: %s", case.id, exc)
    if recorder is not None:
        score.judge_transcript = list(recorder.exchanges)
    return score


def score_outputs(outputs: list[TaskOutput], cases: list[CaseRecord], config: RunConfig) -> list[CaseScore]:
    by_id = {c.id: c for c in cases}

    def one(o: TaskOutput) -> CaseScore:
        return score_output(o, by_id[o.case_id], config.judge, config.similarity, config.language)

    if config.workers == 1:
        return [one(o) for o in outputs]
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        return list(pool.map(one, outputs))


def _mean(values) -> float | None:
    kept = [float(v) for v in values if v is not None]
    return sum(kept) / len(kept) if kept else None


METRIC_FIELDS = ("acc", "acc_t", "acc_n", "acc_m", "rq", "rq_t", "rq_n", "rq_m", "precision", "f1")


def aggregate(scores: list[CaseScore], task: TaskId) -> dict:
    """Means of the retained case-level values; accuracy counts every case."""
    agg: dict = {k: None for k in METRIC_FIELDS}
    if task is TaskId.TnmStaging:
        for key, name in (("acc", "exact"), ("acc_t", "t"), ("acc_n", "n"), ("acc_m", "m")):
            vals = [100.0 if getattr(s, name) else 0.0 for s in scores]
            agg[key] = _mean(vals)
        for key in ("rq", "rq_t", "rq_n", "rq_m"):
            agg[key] = _mean(getattr(s, key) for s in scores)
    else:
        agg["precision"] = _mean(s.precision for s in scores)
        agg["f1"] = _mean(s.f1 for s in scores)
    agg["n_cases"] = len(scores)
    agg["n_errors"] = sum(1 for s in scores if s.error)
    return agg


# -- the grid -----------------------------------------------------------------------------


@dataclass
class CellResult:
    model: str
    mode: str
    task: TaskId
    language: str
    input_mode: str
    scorer: str
    outputs: list[TaskOutput]
    scores: list[CaseScore]
    metrics: dict

    @property
    def key(self) -> tuple:
        return (self.model, self.mode, self.task.value, self.language, self.input_mode)


@dataclass
class GridResult:
    cells: list[CellResult]
    models: list[str]
    config: dict
    leaks: dict = field(default_factory=dict)


@dataclass
class EvalConfig:
    cases: list[CaseRecord]
    models: list[tuple[str, Backend]]
    judge: Backend | None = None
    tasks: tuple[TaskId, ...] = tuple(TaskId)
    modes: tuple[str, ...] = MODES
    languages: tuple[str, ...] = ("ZH", "EN")
    input_modes: tuple[str, ...] = ("TextOnly",)
    seed: int = 0
    subset_size: int | None = None
    workers: int = 4
    similarity: str = "embedding"
    pipeline: PipelineOptions = field(default_factory=PipelineOptions)
    winrate_metric: str = "precision"
    winrate_task: TaskId = TaskId.EndToEnd
    out: str | None = None

    def summary(self) -> dict:
        return {
            "models": [name for name, _ in self.models],
            "judge": self.judge.name if self.judge else None,
            "tasks": [t.value for t in self.tasks],
            "modes": list(self.modes),
            "languages": list(self.languages),
            "input_modes": list(self.input_modes),
            "seed": self.seed,
            "subset_size": self.subset_size,
            "similarity": self.similarity,
            "pipeline": {
                "normalizer": self.pipeline.normalizer,
                "stager": self.pipeline.stager,
                "profiler": self.pipeline.profiler,
            },
            "winrate": f"{self.winrate_task.value}.{self.winrate_metric}",
        }


def _read_mapping(path: Path) -> dict:
    text = path.read_text(encoding="utf-8")
    if path.suffix in (".yaml", ".yml"):
        import yaml

        return yaml.safe_load(text) or {}
    return json.loads(text)


def load_eval_config(path: str | Path, overrides: dict | None = None) -> EvalConfig:
    """Read a JSON/YAML grid description; ``overrides`` (from flags) win over the file."""
    path = Path(path)
    data = _read_mapping(path)
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return eval_config_from_dict(data, path.parent)


def eval_config_from_dict(data: dict, base_dir: str | Path = ".") -> EvalConfig:
    base = Path(base_dir)
    known = {
        "cases", "models", "judge", "tasks", "modes", "languages", "input_modes", "seed", "subset_size",
        "workers", "similarity", "pipeline", "out", "winrate_metric", "winrate_task",
    }
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown eval config keys: {sorted(unknown)}")
    if "cases" not in data or "models" not in data:
        raise ValueError("eval config needs 'cases' and 'models'")
    cases_source = data["cases"]
    if isinstance(cases_source, dict):
        from .synthetic import GenParams, generate_suite

        gen_args = dict(cases_source)
        n = int(gen_args.pop("n", 10))
        cases = generate_suite(n, GenParams.from_dict(gen_args))
    else:
        cases = load_cases(base / cases_source)
    models = []
    for entry in data["models"]:
        backend = load_backend(entry["backend"], base) if isinstance(entry["backend"], dict) else load_backend(base / entry["backend"])
        backend.name = entry.get("name", backend.name)
        models.append((backend.name, backend))
    names = [n for n, _ in models]
    if len(set(names)) != len(names):
        raise ValueError("model names must be unique")
    judge = None
    if data.get("judge"):
        judge = load_backend(data["judge"], base) if isinstance(data["judge"], dict) else load_backend(base / data["judge"])
    out = data.get("out")
    return EvalConfig(
        cases=cases,
        models=models,
        judge=judge,
        tasks=tuple(TaskId(t) for t in data.get("tasks", [t.value for t in TaskId])),
        modes=tuple(data.get("modes", MODES)),
        languages=tuple(Language(x.upper()).value for x in data.get("languages", ["ZH", "EN"])),
        input_modes=tuple(data.get("input_modes", ["TextOnly"])),
        seed=int(data.get("seed", 0)),
        subset_size=data.get("subset_size"),
        workers=int(data.get("workers", 4)),
        similarity=data.get("similarity", "embedding"),
        pipeline=PipelineOptions.from_dict(data.get("pipeline")),
        winrate_metric=data.get("winrate_metric", "precision"),
        winrate_task=TaskId(data.get("winrate_task", TaskId.EndToEnd.value)),
        out=str(base / out) if out and not Path(out).is_absolute() else out,
    )


def select_cases(cases: list[CaseRecord], language: str, seed: int, subset_size: int | None) -> list[CaseRecord]:
    chosen = [c for c in cases if c.language.value == language]
    if subset_size is not None and chosen:
        chosen = sample_core(chosen, seed, min(int(subset_size), len(chosen)), 1)[0]
        chosen.sort(key=lambda c: c.id)
    return chosen


def run_grid(cfg: EvalConfig) -> GridResult:
    for mode in cfg.modes:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
    cells: list[CellResult] = []
    leaks: dict = {}
    scorer_name = EmbeddingTokenF1.name if cfg.similarity == "embedding" else JudgeSimilarity.name
    for name, backend in cfg.models:
        for input_mode in cfg.input_modes:
            for language in cfg.languages:
                cases = select_cases(cfg.cases, language, cfg.seed, cfg.subset_size)
                if not cases:
                    continue
                for mode in cfg.modes:
                    for task in cfg.tasks:
                        rc = RunConfig(
                            task, mode, backend, input_mode, language, cfg.judge, cfg.seed, cfg.workers,
                            cfg.pipeline, cfg.similarity,
                        )
                        outputs = run_task(cases, rc)
                        scores = score_outputs(outputs, cases, rc)
                        cell = CellResult(name, mode, task, language, input_mode, scorer_name, outputs, scores, aggregate(scores, task))
                        cells.append(cell)
                        if task is not TaskId.TnmStaging:
                            leaks["/".join(cell.key)] = scan_for_gold(outputs, cases)
    return GridResult(cells, [n for n, _ in cfg.models], cfg.summary(), leaks)


def transcript_records(output: TaskOutput, score: CaseScore | None = None) -> list[dict]:
    records = [ex.to_dict() for ex in output.transcript]
    if score is not None:
        records += [ex.to_dict() for ex in score.judge_transcript]
    return records


def result_record(cell: CellResult, output: TaskOutput, score: CaseScore) -> dict:
    """One cases.jsonl line."""
    result = output.result
    rec = {
        "model": cell.model,
        "mode": cell.mode,
        "task": cell.task.value,
        "language": cell.language,
        "input_mode": cell.input_mode,
        "case_id": output.case_id,
        "error": output.error,
        "scores": score.to_dict(),
        "requests": len(output.transcript),
    }
    if result is not None:
        if result.predicted_tnm is not None:
            rec["predicted_tnm"] = format_tnm(*result.predicted_tnm)
        if result.stage is not None:
            rec["stage"] = result.stage.value
        if result.core_regimen:
            rec["core_regimen"] = list(result.core_regimen)
        if result.details:
            rec["details"] = result.details
    return rec


__all__ = [
    "CaseScore", "CellResult", "EvalConfig", "GridResult", "InputModeError", "RunConfig", "TaskOutput",
    "aggregate", "check_input_mode", "eval_config_from_dict", "gold_strings", "load_eval_config", "request_to_dict",
    "run_case", "run_grid", "run_task", "scan_for_gold", "score_output", "score_outputs", "select_cases",
    "transcript_has_gold", "transcript_records", "result_record",
]
