"""Benchmark tables (markdown grid + CSV), the win-rate matrix and the output directory layout."""

from __future__ import annotations

import csv
import io
import json
import re
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

from .backend import dump_transcript
from .cases import TaskId
from .harness import METRIC_FIELDS, CaseScore, GridResult, aggregate, result_record
from .metrics import UnalignedCases, win_rate_matrix

SECTION_TITLES = {"ImageDirect": "MLLM (Image Input)", "TextOnly": "OCR + LLM (Text Input)"}
LANGS = ("ZH", "EN")
MISSING = "--"

# (task, metric field, column label)
MAIN_COLUMNS = (
    (TaskId.TnmStaging, "acc", "TNM Staging Acc(%)"),
    (TaskId.TnmStaging, "rq", "TNM Staging RQ"),
    (TaskId.TreatmentRecommendation, "precision", "Treatment Precision(%)"),
    (TaskId.TreatmentRecommendation, "f1", "Treatment F1"),
    (TaskId.EndToEnd, "precision", "E2E Precision(%)"),
    (TaskId.EndToEnd, "f1", "E2E F1"),
)
COMPONENT_COLUMNS = (
    (TaskId.TnmStaging, "acc_t", "T Acc(%)"),
    (TaskId.TnmStaging, "acc_n", "N Acc(%)"),
    (TaskId.TnmStaging, "acc_m", "M Acc(%)"),
    (TaskId.TnmStaging, "rq_t", "T RQ"),
    (TaskId.TnmStaging, "rq_n", "N RQ"),
    (TaskId.TnmStaging, "rq_m", "M RQ"),
)


@dataclass(frozen=True)
class MetricRow:
    model: str
    mode: str
    task: str
    language: str
    input_mode: str
    metrics: dict

    @property
    def label(self) -> str:
        return f"{self.model} + LCAgent" if self.mode == "LCAgent" else self.model


def _fmt(value) -> str:
    return MISSING if value is None else f"{value:.2f}"


def _row_order(rows: list[MetricRow], models: list[str]) -> list[tuple[str, str]]:
    seen = {(r.model, r.mode) for r in rows}
    ordered = []
    for model in models:
        for mode in ("DirectPrompt", "LCAgent"):
            if (model, mode) in seen:
                ordered.append((model, mode))
    return ordered


def _label(model: str, mode: str) -> str:
    return f"{model} + LCAgent" if mode == "LCAgent" else model


def _grid(rows: list[MetricRow], models: list[str], columns) -> list[tuple[str, list[tuple[str, list[str]]]]]:
    """[(section title, [(row label, cells)])] in input-mode order."""
    index = {(r.model, r.mode, r.task, r.language, r.input_mode): r.metrics for r in rows}
    sections = []
    for input_mode in ("ImageDirect", "TextOnly"):
        section_rows = [r for r in rows if r.input_mode == input_mode]
        if not section_rows:
            continue
        body = []
        for model, mode in _row_order(section_rows, models):
            cells = []
            for task, metric, _ in columns:
                for lang in LANGS:
                    m = index.get((model, mode, task.value, lang, input_mode))
                    cells.append(_fmt(m.get(metric) if m else None))
            body.append((_label(model, mode), cells))
        sections.append((SECTION_TITLES[input_mode], body))
    return sections


def _headers(columns) -> list[str]:
    return ["Model"] + [f"{label} {lang}" for _, _, label in columns for lang in LANGS]


def _markdown_table(columns, sections) -> list[str]:
    headers = _headers(columns)
    lines = ["| " + " | ".join(headers) + " |", "|" + "|".join(["---"] + ["---:"] * (len(headers) - 1)) + "|"]
    for title, body in sections:
        lines.append(f"| **{title}** |" + " |" * (len(headers) - 1))
        for label, cells in body:
            lines.append("| " + " | ".join([label] + cells) + " |")
    return lines


def build_report(rows: list[MetricRow], models: list[str], meta: dict | None = None, winrates: list | None = None) -> tuple[str, str]:
    """Render the main table, the component table and win-rate matrices.

    Returns (markdown, csv). Missing cells are written as "--".
    """
    meta = meta or {}
    main = _grid(rows, models, MAIN_COLUMNS)
    component = _grid(rows, models, COMPONENT_COLUMNS)
    md = ["# Benchmark report", ""]
    if meta:
        md.append(f"- F1 scorer: {meta.get('scorer', MISSING)}")
        md.append(f"- Judge: {meta.get('judge') or MISSING}")
        md.append(f"- Seed: {meta.get('seed', 0)}")
        pipe = meta.get("pipeline")
        if pipe:
            md.append("- Pipeline: " + ", ".join(f"{k}={v}" for k, v in sorted(pipe.items())))
        md.append("")
    md += ["## Main results", ""] + _markdown_table(MAIN_COLUMNS, main)
    md += ["", "## Staging components", ""] + _markdown_table(COMPONENT_COLUMNS, component)
    for title, names, matrix in winrates or []:
        md += ["", f"## Win rate ({title})", ""]
        md.append("| row beats column | " + " | ".join(names) + " |")
        md.append("|---|" + "---:|" * len(names))
        for name, row in zip(names, matrix):
            md.append(f"| {name} | " + " | ".join(f"{v:.3f}" for v in row) + " |")
    counts = sorted({(r.model, r.mode, r.task, r.language, r.input_mode, r.metrics.get("n_cases", 0), r.metrics.get("n_errors", 0)) for r in rows})
    if counts:
        md += ["", "## Case counts", "", "| Model | Mode | Task | Lang | Input | Cases | Errors |", "|---|---|---|---|---|---:|---:|"]
        for c in counts:
            md.append("| " + " | ".join(str(x) for x in c) + " |")
    markdown = "\n".join(md) + "\n"

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["section"] + _headers(MAIN_COLUMNS))
    for title, body in main:
        for label, cells in body:
            writer.writerow([title, label] + cells)
    writer.writerow([])
    writer.writerow(["section"] + _headers(COMPONENT_COLUMNS))
    for title, body in component:
        for label, cells in body:
            writer.writerow([title, label] + cells)
    return markdown, buf.getvalue()


# -- win rate -------------------------------------------------------------------------


def winrate_tables(rows_scores: list[tuple[MetricRow, list[dict]]], task: str, metric: str) -> list[tuple[str, list[str], list[list[float]]]]:
    """One matrix per (language, input mode) over every model/mode that ran ``task``."""
    groups: dict[tuple[str, str], dict[str, dict]] = defaultdict(dict)
    for row, scores in rows_scores:
        if row.task != task:
            continue
        groups[(row.language, row.input_mode)][row.label] = {s["case_id"]: s.get(metric) for s in scores}
    out = []
    for (lang, input_mode), per_model in sorted(groups.items()):
        try:
            names, matrix = win_rate_matrix(per_model)
        except UnalignedCases:
            continue
        out.append((f"{task}.{metric}, {lang}, {SECTION_TITLES[input_mode]}", names, matrix))
    return out


def _winrate_csv(names: list[str], matrix: list[list[float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([""] + names)
    for name, row in zip(names, matrix):
        writer.writerow([name] + [f"{v:.6f}" for v in row])
    return buf.getvalue()


# -- output directory -----------------------------------------------------------------


def _safe(part: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", part)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _render_dir(out: Path, rows_scores, models: list[str], meta: dict, transcripts: bool = False) -> None:
    winrates = winrate_tables(rows_scores, meta.get("winrate_task", "EndToEnd"), meta.get("winrate_metric", "precision"))
    markdown, table = build_report([r for r, _ in rows_scores], models, meta, winrates)
    _write(out / "report.md", markdown)
    _write(out / "report.csv", table)
    for old in out.glob("winrate_*.csv"):
        old.unlink()
    for i, (title, names, matrix) in enumerate(winrates):
        lang_input = title.split(", ", 1)[1]
        _write(out / f"winrate_{i:02d}_{_safe(lang_input)}.csv", _winrate_csv(names, matrix))


def write_outputs(out_dir: str | Path, grid: GridResult) -> Path:
    """report.md, report.csv, cases.jsonl, run.json, winrate_*.csv and transcripts/."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = dict(grid.config)
    meta["scorer"] = grid.cells[0].scorer if grid.cells else None
    task, _, metric = meta.get("winrate", "EndToEnd.precision").partition(".")
    meta["winrate_task"], meta["winrate_metric"] = task, metric
    lines = []
    rows_scores = []
    for cell in grid.cells:
        row = MetricRow(cell.model, cell.mode, cell.task.value, cell.language, cell.input_mode, cell.metrics)
        rows_scores.append((row, [s.to_dict() for s in cell.scores]))
        folder = out / "transcripts" / _safe(cell.model) / cell.mode / cell.task.value / f"{cell.language}-{cell.input_mode}"
        folder.mkdir(parents=True, exist_ok=True)
        for output, score in zip(cell.outputs, cell.scores):
            lines.append(json.dumps(result_record(cell, output, score), ensure_ascii=False, sort_keys=True))
            dump_transcript(output.transcript + score.judge_transcript, folder / f"{_safe(output.case_id)}.jsonl")
    _write(out / "cases.jsonl", "\n".join(lines) + ("\n" if lines else ""))
    meta["models"] = grid.models
    meta["leaks"] = {k: sum(v.values()) for k, v in sorted(grid.leaks.items())}
    _write(out / "run.json", json.dumps(meta, ensure_ascii=False, indent=2, sort_keys=True) + "\n")
    _render_dir(out, rows_scores, grid.models, meta)
    return out


def rerender(in_dir: str | Path) -> Path:
    """Rebuild the tables from cases.jsonl and run.json without calling any model."""
    src = Path(in_dir)
    meta = json.loads((src / "run.json").read_text(encoding="utf-8"))
    cells: dict[tuple, list[dict]] = defaultdict(list)
    for line in (src / "cases.jsonl").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        cells[(rec["model"], rec["mode"], rec["task"], rec["language"], rec["input_mode"])].append(rec["scores"])
    rows_scores = []
    for key, scores in cells.items():
        objs = [CaseScore(**{k: v for k, v in s.items() if k in CaseScore.__dataclass_fields__}) for s in scores]
        rows_scores.append((MetricRow(*key, aggregate(objs, TaskId(key[2]))), scores))
    models = meta.get("models") or sorted({k[0] for k in cells})
    _render_dir(src, rows_scores, models, meta)
    return src


__all__ = ["MetricRow", "build_report", "rerender", "winrate_tables", "write_outputs", "METRIC_FIELDS"]
