"""Human verification: review queue API, static HTML report, decision export.

The service is a thin JSON layer over the job directory. Queue ordering puts
flagged items first (then widest pass spread), because those are the cases the
multi-pass design exists to surface. Decisions go through the ledger's
append-only trail, so anything acknowledged with a 200 survives a restart.
"""

from __future__ import annotations

import html
import io
import csv
import shutil
from importlib import resources
from pathlib import Path

from fastapi import FastAPI, HTTPException
from fastapi.responses import FileResponse, HTMLResponse, PlainTextResponse
from pydantic import BaseModel

from .errors import FinalScoreMismatch, NoteRequired, UnknownSubmission
from .ledger import (
    ACTION_ACCEPT,
    ACTION_OVERRIDE,
    Decision,
    GradeLedger,
    SubmissionScores,
)

FILTERS = ("all", "flagged", "undecided")


def queue_order(submission: SubmissionScores) -> tuple:
    return (
        not submission.summary.flagged,
        -submission.summary.spread,
        submission.submission_ref,
    )


def item_payload(book: GradeLedger, submission: SubmissionScores) -> dict:
    decision = book.latest_decision(submission.submission_ref)
    return {
        "id": submission.submission_ref,
        "pseudonym": submission.pseudonym,
        "test_id": submission.test_id,
        "question_id": submission.question_id,
        "crop_url": f"/crops/{Path(submission.crop_file).name}",
        "passes": list(submission.summary.passes),
        "alt_flags": list(submission.alt_flags),
        "rationales": list(submission.rationales),
        "provisional": submission.provisional,
        "rule": submission.rule,
        "provisional_by_rule": submission.provisional_by_rule,
        "summary": {
            "mean": submission.summary.mean,
            "variance": submission.summary.variance,
            "spread": submission.summary.spread,
            "anomaly": submission.summary.anomaly,
            "flagged": submission.summary.flagged,
        },
        "decision": decision.to_dict() if decision else None,
    }


def export_decisions(job_dir: str | Path) -> str:
    """CSV of every item's provisional and (latest) final decision."""
    book = GradeLedger(job_dir)
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(
        ["pseudonym", "question_id", "provisional", "final", "action", "reviewer", "timestamp"]
    )
    for ref in sorted(book.submissions):
        submission = book.submissions[ref]
        decision = book.latest_decision(ref)
        writer.writerow(
            [
                submission.pseudonym,
                submission.question_id,
                submission.provisional,
                decision.final_score if decision else "",
                decision.action if decision else "",
                decision.reviewer_id if decision else "",
                decision.timestamp if decision else "",
            ]
        )
    return out.getvalue()


class DecisionPayload(BaseModel):
    action: str
    final_score: int | None = None
    note: str = ""
    reviewer: str = "reviewer"


def apply_decision(book: GradeLedger, item_id: str, payload: DecisionPayload) -> dict:
    """Validate and persist one decision; identical re-submissions are no-ops."""
    submission = book.submissions.get(item_id)
    if submission is None:
        raise UnknownSubmission(f"no review item {item_id!r}")
    if payload.action not in (ACTION_ACCEPT, ACTION_OVERRIDE):
        raise ValueError(f"unknown action {payload.action!r}")
    final = payload.final_score
    if payload.action == ACTION_ACCEPT and final is None:
        final = submission.provisional
    if final is None:
        raise ValueError("OVERRIDE requires a final_score")

    latest = book.latest_decision(item_id)
    if (
        latest is not None
        and latest.action == payload.action
        and latest.final_score == final
        and latest.note == payload.note
        and latest.reviewer_id == payload.reviewer
    ):
        return item_payload(book, submission)

    book.record_decision(
        Decision(
            submission_ref=item_id,
            action=payload.action,
            final_score=int(final),
            reviewer_id=payload.reviewer,
            note=payload.note,
        )
    )
    return item_payload(book, submission)


def create_app(job_dir: str | Path, ui_dir: str | Path | None = None) -> FastAPI:
    """Review service over one job directory."""
    job_dir = Path(job_dir)
    book = GradeLedger(job_dir)
    if ui_dir is None:
        ui_dir = Path(str(resources.files("gradepipe").joinpath("assets/ui")))
    else:
        ui_dir = Path(ui_dir)

    app = FastAPI(title="gradepipe review", docs_url=None, redoc_url=None)

    def ordered_items() -> list[SubmissionScores]:
        return sorted(book.submissions.values(), key=queue_order)

    @app.get("/api/queue")
    def get_queue(filter: str = "all"):
        if filter not in FILTERS:
            raise HTTPException(422, f"filter must be one of {FILTERS}")
        items = ordered_items()
        if filter == "flagged":
            items = [s for s in items if s.summary.flagged]
        elif filter == "undecided":
            items = [s for s in items if book.latest_decision(s.submission_ref) is None]
        decided = sum(
            1 for s in book.submissions.values()
            if book.latest_decision(s.submission_ref) is not None
        )
        return {
            "items": [item_payload(book, s) for s in items],
            "progress": {"decided": decided, "total": len(book.submissions)},
            "filter": filter,
        }

    @app.get("/api/items/{item_id}")
    def get_item(item_id: str):
        submission = book.submissions.get(item_id)
        if submission is None:
            raise HTTPException(404, f"no review item {item_id!r}")
        return item_payload(book, submission)

    @app.post("/api/items/{item_id}/decision")
    def post_decision(item_id: str, payload: DecisionPayload):
        try:
            return apply_decision(book, item_id, payload)
        except UnknownSubmission as exc:
            raise HTTPException(404, str(exc)) from exc
        except (NoteRequired, FinalScoreMismatch, ValueError) as exc:
            raise HTTPException(
                422, {"error": type(exc).__name__, "detail": str(exc)}
            ) from exc

    @app.get("/api/export.csv")
    def get_export():
        return PlainTextResponse(export_decisions(job_dir), media_type="text/csv")

    @app.get("/crops/{file_name}")
    def get_crop(file_name: str):
        path = job_dir / "crops" / Path(file_name).name
        if not path.is_file():
            raise HTTPException(404, f"no crop {file_name!r}")
        return FileResponse(path, media_type="image/png")

    @app.get("/")
    def index():
        page = ui_dir / "index.html"
        if not page.is_file():
            raise HTTPException(404, "no UI assets installed")
        return HTMLResponse(page.read_text("utf-8"))

    @app.get("/assets/{file_name}")
    def asset(file_name: str):
        path = ui_dir / Path(file_name).name
        if not path.is_file():
            raise HTTPException(404, f"no asset {file_name!r}")
        media = "text/javascript" if path.suffix == ".js" else "text/css"
        return FileResponse(path, media_type=media)

    return app


def serve(
    job_dir: str | Path,
    host: str = "127.0.0.1",
    port: int = 8765,
    ui_dir: str | Path | None = None,
) -> None:
    import uvicorn

    uvicorn.run(create_app(job_dir, ui_dir=ui_dir), host=host, port=port, log_level="warning")


# -- static HTML report ------------------------------------------------------------


_REPORT_CSS = """
body { font-family: system-ui, sans-serif; margin: 2rem; color: #222; }
h1, h2 { font-weight: 600; }
.item { border: 1px solid #ccc; border-radius: 8px; padding: 1rem; margin: 1rem 0; }
.item.flagged { border-color: #c0392b; background: #fdf3f2; }
.badge { display: inline-block; border-radius: 4px; padding: 0.1rem 0.5rem; margin-right: 0.5rem;
         background: #eee; font-size: 0.85rem; }
.badge.flag { background: #c0392b; color: white; }
.scores span { display: inline-block; width: 2rem; text-align: center; font-weight: 600; }
img.crop { max-width: 100%; border: 1px solid #ddd; }
details > pre { white-space: pre-wrap; background: #f7f7f7; padding: 0.5rem; }
"""


def build_review_report(job_dir: str | Path, out_dir: str | Path) -> int:
    """Self-contained HTML bundle: one page per question, crops copied alongside."""
    job_dir = Path(job_dir)
    out_dir = Path(out_dir)
    book = GradeLedger(job_dir)
    (out_dir / "crops").mkdir(parents=True, exist_ok=True)

    by_question: dict[str, list[SubmissionScores]] = {}
    for submission in sorted(book.submissions.values(), key=queue_order):
        by_question.setdefault(submission.question_id, []).append(submission)
        source = job_dir / submission.crop_file
        if not source.is_file():
            raise FileNotFoundError(f"missing crop {source}")
        shutil.copyfile(source, out_dir / "crops" / source.name)

    def item_html(submission: SubmissionScores) -> str:
        summary = submission.summary
        decision = book.latest_decision(submission.submission_ref)
        flag_badge = '<span class="badge flag">FLAGGED</span>' if summary.flagged else ""
        decision_line = (
            f"<p>Decision: {decision.action} &rarr; {decision.final_score} "
            f"({html.escape(decision.reviewer_id)})</p>"
            if decision
            else "<p>Decision: pending</p>"
        )
        scores = "".join(f"<span>{s}</span>" for s in summary.passes)
        rationales = "".join(
            f"<details><summary>pass {i}</summary><pre>{html.escape(text)}</pre></details>"
            for i, text in enumerate(submission.rationales)
        )
        return f"""
<div class="item{' flagged' if summary.flagged else ''}">
  <h3>{html.escape(submission.submission_ref)}</h3>
  {flag_badge}
  <span class="badge">provisional {submission.provisional} ({submission.rule})</span>
  <span class="badge">spread {summary.spread}</span>
  <span class="badge">variance {summary.variance:.2f}</span>
  <span class="badge">anomaly {summary.anomaly:.2f}</span>
  <p class="scores">passes: {scores}</p>
  <img class="crop" src="crops/{Path(submission.crop_file).name}" alt="answer crop">
  {rationales}
  {decision_line}
</div>"""

    total = len(book.submissions)
    flagged_total = sum(1 for s in book.submissions.values() if s.summary.flagged)
    question_links = []
    for question_id in sorted(by_question):
        items = by_question[question_id]
        body = "\n".join(item_html(s) for s in items)
        page = f"""<!doctype html>
<html><head><meta charset="utf-8"><title>Review {html.escape(question_id)}</title>
<style>{_REPORT_CSS}</style></head>
<body><h1>Question {html.escape(question_id)} ({len(items)} submissions)</h1>
<p><a href="index.html">back to overview</a></p>
{body}
</body></html>"""
        (out_dir / f"question_{question_id}.html").write_text(page, "utf-8")
        question_links.append(
            f'<li><a href="question_{question_id}.html">{html.escape(question_id)}</a> '
            f"({len(items)} submissions)</li>"
        )

    index = f"""<!doctype html>
<html><head><meta charset="utf-8"><title>Review report</title>
<style>{_REPORT_CSS}</style></head>
<body><h1>Review report</h1>
<p>{total} submissions, {flagged_total} flagged.</p>
<ul>{''.join(question_links)}</ul>
</body></html>"""
    (out_dir / "index.html").write_text(index, "utf-8")
    return total
