"""Command-line entry point: one subcommand per pipeline stage.

Stage failures exit nonzero and print a machine-readable JSON summary on
stderr with a stage-prefixed error code.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import analytics, bubbles, keybank, pipeline, review, synth
from .errors import GradePipeError


def _emit(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True, default=str))


def _fail(stage: str, exc: Exception) -> int:
    summary = {
        "stage": stage,
        "code": f"{stage}.{type(exc).__name__}",
        "message": str(exc),
    }
    print(json.dumps(summary, sort_keys=True), file=sys.stderr)
    return 1


def _config(args) -> pipeline.JobConfig:
    return pipeline.load_job_config(args.config)


def cmd_synth(args) -> int:
    out = synth.build_fixture(args.out, students=args.students, seed=args.seed, test_id=args.test_id)
    _emit({"fixture": str(out), "config": str(Path(out) / "job.json")})
    return 0


def cmd_ingest(args) -> int:
    _emit(pipeline.stage_ingest(_config(args)))
    return 0


def cmd_grade(args) -> int:
    _emit(pipeline.stage_grade(_config(args)))
    return 0


def cmd_aggregate(args) -> int:
    _emit(pipeline.stage_aggregate(_config(args)))
    return 0


def cmd_report(args) -> int:
    _emit(pipeline.stage_report(_config(args)))
    return 0


def cmd_serve(args) -> int:
    config = _config(args)
    review.serve(config.job_dir, host=args.host, port=args.port, ui_dir=args.ui)
    return 0


def cmd_export(args) -> int:
    _emit(pipeline.stage_export(_config(args), strict=args.strict))
    return 0


def cmd_lint_keys(args) -> int:
    bank = keybank.load_key_bank(args.key_bank)
    findings = bank.all_findings()
    for finding in findings:
        print(finding)
    _emit({"questions": len(bank.entries), "findings": len(findings)})
    return 0


def cmd_codebook_gen(args) -> int:
    book = bubbles.generate_codebook(
        n=args.n,
        length=args.length,
        min_distance=args.min_distance,
        seed=args.seed,
        attempt_budget=args.budget,
    )
    bubbles.save_codebook(book, args.out)
    _emit({"codes": len(book.codes), "out": str(args.out)})
    return 0


def cmd_analyze_timing(args) -> int:
    path = args.timings or analytics.reference_timings_path()
    result = analytics.timing_analysis(analytics.parse_timings(path))
    _emit(result.to_dict())
    if args.out:
        Path(args.out).write_text(json.dumps(result.to_dict(), indent=2) + "\n", "utf-8")
    return 0


def cmd_analyze_kappa(args) -> int:
    dataset = analytics.load_scores(args.scores)
    rows = analytics.kappa_report(dataset, aggregation=args.aggregation)
    csv_text = analytics.kappa_report_csv(rows)
    if args.out:
        Path(args.out).write_text(csv_text, "utf-8")
    print(csv_text, end="")
    return 0


def _grader_vector(dataset: analytics.ScoreDataset, question: str, grader: str, submissions):
    if grader in ("LLM_MEDIAN", "LLM_MAX"):
        rule = "MEDIAN" if grader == "LLM_MEDIAN" else "MAX"
        return analytics.llm_vector(dataset, question, submissions, rule)
    return [dataset.questions[question][grader][s] for s in submissions]


def cmd_analyze_deviation(args) -> int:
    dataset = analytics.load_scores(args.scores)
    out = {}
    for question in sorted(dataset.questions):
        submissions = dataset.submissions(question)
        a = _grader_vector(dataset, question, args.grader_a, submissions)
        b = _grader_vector(dataset, question, args.grader_b, submissions)
        out[question] = analytics.deviation_stats(a, b).to_dict()
    _emit(out)
    return 0


def cmd_analyze_positioning(args) -> int:
    dataset = analytics.load_scores(args.scores)
    out = {}
    for question in sorted(dataset.questions):
        submissions = dataset.submissions(question)
        llm = analytics.llm_vector(dataset, question, submissions, args.aggregation)
        a = _grader_vector(dataset, question, "A1", submissions)
        b = _grader_vector(dataset, question, "A2", submissions)
        out[question] = analytics.positioning(llm, a, b).to_dict()
    _emit(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradepipe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic test batch")
    p.add_argument("--out", required=True)
    p.add_argument("--students", type=int, default=10)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--test-id", default="bonus1")
    p.set_defaults(func=cmd_synth, stage="synth")

    for name, func, help_text in (
        ("ingest", cmd_ingest, "align pages, decode IDs, write anonymised crops"),
        ("grade", cmd_grade, "run the multi-pass grading (resumable)"),
        ("aggregate", cmd_aggregate, "summarise passes and compute provisional scores"),
        ("report", cmd_report, "write the static HTML review bundle"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="job config JSON")
        p.set_defaults(func=func, stage=name)

    p = sub.add_parser("serve", help="run the review service")
    p.add_argument("--config", required=True)
    p.add_argument("--host", default="127.0.0.1", help="loopback by default")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--ui", default=None, help="directory with UI assets")
    p.set_defaults(func=cmd_serve, stage="serve")

    p = sub.add_parser("export", help="write final grades, bonus, and decisions CSVs")
    p.add_argument("--config", required=True)
    p.add_argument("--strict", action="store_true", help="fail on undecided submissions")
    p.set_defaults(func=cmd_export, stage="export")

    p = sub.add_parser("lint-keys", help="lint every grading key in a bank")
    p.add_argument("key_bank")
    p.set_defaults(func=cmd_lint_keys, stage="lint-keys")

    p = sub.add_parser("codebook", help="identifier codebook tools")
    code_sub = p.add_subparsers(dest="subcommand", required=True)
    g = code_sub.add_parser("gen", help="generate an error-correcting codebook")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--length", type=int, required=True)
    g.add_argument("--min-distance", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--budget", type=int, default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_codebook_gen, stage="codebook")

    p = sub.add_parser("analyze", help="agreement and timing analytics")
    an_sub = p.add_subparsers(dest="subcommand", required=True)

    a = an_sub.add_parser("timing", help="digital/manual grading-time analysis")
    a.add_argument("--timings", default=None, help="timings CSV (default: bundled reference data)")
    a.add_argument("--out", default=None, help="write the JSON summary here too")
    a.set_defaults(func=cmd_analyze_timing, stage="analyze")

    a = an_sub.add_parser("kappa", help="per-question weighted kappa table")
    a.add_argument("--scores", required=True, help="scores CSV: question,submission,grader,score")
    a.add_argument("--aggregation", choices=["MEDIAN", "MAX"], default="MEDIAN")
    a.add_argument("--out", default=None)
    a.set_defaults(func=cmd_analyze_kappa, stage="analyze")

    a = an_sub.add_parser("deviation", help="absolute score deviation stats")
    a.add_argument("--scores", required=True)
    a.add_argument("--grader-a", default="A1")
    a.add_argument("--grader-b", default="LLM_MEDIAN")
    a.set_defaults(func=cmd_analyze_deviation, stage="analyze")

    a = an_sub.add_parser("positioning", help="machine score vs the two human graders")
    a.add_argument("--scores", required=True)
    a.add_argument("--aggregation", choices=["MEDIAN", "MAX"], default="MEDIAN")
    a.set_defaults(func=cmd_analyze_positioning, stage="analyze")

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except GradePipeError as exc:
        return _fail(args.stage, exc)
    except OSError as exc:
        return _fail(args.stage, exc)


if __name__ == "__main__":
    sys.exit(main())
