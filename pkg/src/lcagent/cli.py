"""Command-line entry point: stage, recommend, e2e, eval, gen, report.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .backend import load_backend
from .cases import TaskId, dump_cases, load_cases
from .categories import format_tnm
from .pipeline import PipelineOptions, run_lcagent, run_staging


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _backend(path: str | None, required: bool, what: str):
    if path is None:
        if required:
            raise UsageError(f"{what} needs --backend")
        return None
    return load_backend(path)


def _options(args, **extra) -> PipelineOptions:
    data = {"normalizer": args.normalizer, "profiler": args.profiler, "input_mode": args.input_mode}
    data.update(extra)
    return PipelineOptions.from_dict(data)


def _emit(args, payload: dict, text: str) -> None:
    print(json.dumps(payload, ensure_ascii=False, sort_keys=True) if args.json else text)


def cmd_stage(args) -> int:
    cases = load_cases(args.case)
    needs_backend = args.mode == "agent" or args.normalizer == "backend"
    backend = _backend(args.backend, needs_backend, "--mode agent / --normalizer backend")
    for case in cases:
        opts = _options(args, stager=args.mode, language=case.language.value)
        outcome = run_staging(case.without_gold(), backend, opts)
        lines = [f"== {case.id}"]
        for sub in outcome.substages:
            steps = "; ".join(s.rule for s in sub.trace)
            lines.append(f"  {sub.dimension}: {sub.category.value}  [{steps}]")
        lines.append(f"  S_final: {outcome.stage.value}")
        for shift in outcome.shifts:
            lines.append(
                f"  potential: {shift.dimension}->{shift.assumed_category.value} => {shift.projected_stage.value}"
                f" ({shift.triggering_finding.describe()})"
            )
        _emit(args, {"case_id": case.id, **outcome.to_dict(), "tnm": format_tnm(*outcome.tnm)}, "\n".join(lines))
    return 0


def _recommend(args, cases, task: TaskId) -> int:
    backend = _backend(args.backend, True, "recommendation")
    failures = 0
    for case in cases:
        opts = _options(args, stager="rule", language=case.language.value)
        try:
            result = run_lcagent(case, task, backend, opts)
        except Exception as exc:
            failures += 1
            print(f"== {case.id}\n  error: {type(exc).__name__}: {exc}", file=sys.stderr)
            continue
        rec = result.recommendation
        lines = [f"== {case.id}", f"  stage: {result.stage.value}", f"  scenario: {rec.scenario.value}"]
        lines += [f"  warning: {w.message}" for w in rec.warnings]
        lines += ["  " + line for line in rec.recommendation.render().splitlines()]
        payload = {"case_id": case.id, "stage": result.stage.value, **result.details}
        _emit(args, payload, "\n".join(lines))
    return 2 if failures else 0


def cmd_recommend(args) -> int:
    task = TaskId.TreatmentRecommendation if args.stage_source == "gold" else TaskId.EndToEnd
    return _recommend(args, load_cases(args.case), task)


def cmd_e2e(args) -> int:
    return _recommend(args, load_cases(args.cases), TaskId.EndToEnd)


def cmd_eval(args) -> int:
    from .harness import load_eval_config, run_grid
    from .report import write_outputs

    overrides = {
        "out": args.out,
        "workers": args.workers,
        "seed": args.seed,
        "subset_size": args.subset_size,
        "similarity": args.similarity,
        "languages": args.languages,
        "tasks": args.tasks,
        "modes": args.modes,
        "input_modes": args.input_modes,
    }
    cfg = load_eval_config(args.config, overrides)
    if not cfg.out:
        raise UsageError("eval needs an output directory (--out or 'out' in the config)")
    started = time.perf_counter()
    grid = run_grid(cfg)
    out = write_outputs(cfg.out, grid)
    errors = sum(c.metrics["n_errors"] for c in grid.cells)
    print(f"wrote {out / 'report.md'} ({len(grid.cells)} cells, {errors} errored cases, {time.perf_counter() - started:.1f}s)")
    return 0


def cmd_gen(args) -> int:
    from .synthetic import GenParams, generate_suite, oracle_script, write_script

    params = GenParams(
        seed=args.seed,
        language=args.language,
        uncertainty_rate=args.uncertainty_rate,
        modality_dropout_rate=args.dropout_rate,
        distractors=args.distractors,
        with_images=args.images,
    )
    cases = generate_suite(args.n, params)
    dump_cases(cases, args.out)
    if args.script:
        write_script(oracle_script(cases), args.script)
    print(f"wrote {len(cases)} cases to {args.out}")
    return 0


def cmd_report(args) -> int:
    from .report import rerender

    src = Path(getattr(args, "in"))
    if not (src / "cases.jsonl").exists():
        raise UsageError(f"{src} has no cases.jsonl")
    out = rerender(src)
    print(f"re-rendered {out / 'report.md'}")
    return 0


def _pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", help="backend config file (JSON or YAML)")
    p.add_argument("--normalizer", choices=("lexicon", "backend"), default="lexicon")
    p.add_argument("--profiler", choices=("lexicon", "backend"), default="lexicon")
    p.add_argument("--input-mode", choices=("TextOnly", "ImageDirect"), default="TextOnly")
    p.add_argument("--json", action="store_true", help="one JSON object per case")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lcagent", description="Lung-cancer staging and treatment decision pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stage", help="stage cases and print sub-stages, final stage and potential shifts")
    p.add_argument("--case", required=True, help="case file")
    p.add_argument("--mode", choices=("rule", "agent"), default="rule")
    _pipeline_flags(p)
    p.set_defaults(func=cmd_stage)

    p = sub.add_parser("recommend", help="treatment recommendation from the gold or the predicted stage")
    p.add_argument("--case", required=True)
    p.add_argument("--stage-source", choices=("gold", "predicted"), required=True)
    _pipeline_flags(p)
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("e2e", help="full pipeline from raw reports to recommendation")
    p.add_argument("--cases", required=True)
    _pipeline_flags(p)
    p.set_defaults(func=cmd_e2e)

    p = sub.add_parser("eval", help="run a benchmark grid and write reports")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--subset-size", type=int)
    p.add_argument("--similarity", choices=("embedding", "judge"))
    p.add_argument("--languages", nargs="+", choices=("ZH", "EN"))
    p.add_argument("--tasks", nargs="+", choices=[t.value for t in TaskId])
    p.add_argument("--modes", nargs="+", choices=("DirectPrompt", "LCAgent"))
    p.add_argument("--input-modes", nargs="+", choices=("TextOnly", "ImageDirect"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen", help="write synthetic cases")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--language", choices=("EN", "ZH"), default="EN")
    p.add_argument("--uncertainty-rate", type=float, default=0.0)
    p.add_argument("--dropout-rate", type=float, default=0.0)
    p.add_argument("--distractors", action="store_true")
    p.add_argument("--images", action="store_true", help="attach placeholder images for ImageDirect runs")
    p.add_argument("--script", help="also write a replay script answering every request tag")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("report", help="re-render tables from an eval output directory")
    p.add_argument("--in", required=True, metavar="DIR")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen" and args.n < 1:
            raise UsageError("--n must be >= 1")
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"lcagent: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"lcagent: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
