"""Job orchestration: configuration, manifest, and the pipeline stages.

A job directory is the unit of state. Stages read and write only inside it
(plus the declared input paths), record a manifest entry with input digests,
and are idempotent: re-running a completed stage reproduces its outputs and
issues no new provider calls.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import bubbles, grader, keybank, ledger, sheets
from .errors import ConfigError, GradePipeError, JobStateError
from .imaging import load_png, save_png

MAP_KEY_ENV = "GRADEPIPE_MAP_KEY"
API_KEY_ENV = "GRADEPIPE_API_KEY"


@dataclass
class ProviderConfig:
    kind: str = "mock"  # mock | http
    endpoint: str = ""
    model_id: str = "mock-grader-1"
    temperature: float | None = None
    seed: int = 0


@dataclass
class JobConfig:
    template: Path
    key_bank: Path
    roster: Path
    pages: Path
    pseudonym_map: Path
    job_dir: Path
    test_id: str
    pseudonym_salt: str = ""
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    pass_count: int = 5
    retries: int = 3
    retry_wait: float = 0.5
    concurrency: int = 1
    aggregation: str = ledger.AGG_MAX
    thresholds: ledger.FlagThresholds = field(default_factory=ledger.FlagThresholds)
    tests_total: int = 6
    questions_per_test: int = 2
    codebook: Path | None = None

    def digest(self) -> str:
        # Portable settings only; input content is digested per stage in the
        # manifest, so relocated copies of the same job hash identically.
        doc = {
            "test_id": self.test_id,
            "provider": vars(self.provider),
            "pass_count": self.pass_count,
            "aggregation": self.aggregation,
            "thresholds": vars(self.thresholds),
            "structure": [self.tests_total, self.questions_per_test],
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def load_job_config(path: str | Path) -> JobConfig:
    """Read a job configuration file; relative paths resolve against it."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text("utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read job config {path}: {exc}") from exc
    base = path.parent

    def resolve(key: str, required: bool = True) -> Path | None:
        if key not in doc:
            if required:
                raise ConfigError(f"job config is missing {key!r}")
            return None
        return (base / doc[key]).resolve()

    provider_doc = doc.get("provider", {})
    provider = ProviderConfig(
        kind=provider_doc.get("kind", "mock"),
        endpoint=provider_doc.get("endpoint", ""),
        model_id=provider_doc.get("model_id", "mock-grader-1"),
        temperature=provider_doc.get("temperature"),
        seed=int(provider_doc.get("seed", 0)),
    )
    thresholds_doc = doc.get("thresholds", {})
    structure = doc.get("structure", {})
    config = JobConfig(
        template=resolve("template"),
        key_bank=resolve("key_bank"),
        roster=resolve("roster"),
        pages=resolve("pages"),
        pseudonym_map=resolve("pseudonym_map"),
        job_dir=resolve("job_dir"),
        test_id=str(doc.get("test_id", "")),
        pseudonym_salt=str(doc.get("pseudonym_salt", "")),
        provider=provider,
        pass_count=int(doc.get("pass_count", 5)),
        retries=int(doc.get("retries", 3)),
        retry_wait=float(doc.get("retry_wait", 0.5)),
        concurrency=int(doc.get("concurrency", 1)),
        aggregation=str(doc.get("aggregation", ledger.AGG_MAX)),
        thresholds=ledger.FlagThresholds(
            spread_max=int(thresholds_doc.get("spread_max", 3)),
            variance_max=float(thresholds_doc.get("variance_max", 2.0)),
        ),
        tests_total=int(structure.get("tests", 6)),
        questions_per_test=int(structure.get("questions_per_test", 2)),
        codebook=resolve("codebook", required=False),
    )
    if config.pass_count < 1:
        raise ConfigError("pass_count must be at least 1")
    if not config.test_id:
        raise ConfigError("job config needs a test_id")
    for name in ("template", "key_bank", "roster", "pages"):
        target = getattr(config, name)
        if not target.exists():
            raise ConfigError(f"{name} path does not exist: {target}")
    return config


# -- manifest -------------------------------------------------------------------


class Manifest:
    """Provenance record: digests of every stage's inputs and the config."""

    def __init__(self, job_dir: Path):
        self.path = Path(job_dir) / "manifest.json"
        if self.path.exists():
            self.doc = json.loads(self.path.read_text("utf-8"))
        else:
            self.doc = {"job_id": "", "stages": {}, "submissions": {}}

    def update_header(self, config: JobConfig, preamble_digest: str, template_digest: str) -> None:
        self.doc.update(
            {
                "job_id": config.digest()[:12],
                "config_digest": config.digest(),
                "template_digest": template_digest,
                "preamble_digest": preamble_digest,
                "model_id": config.provider.model_id,
                "temperature": config.provider.temperature,
                "pass_count": config.pass_count,
            }
        )

    def record_stage(self, stage: str, inputs: dict[str, str]) -> None:
        self.doc["stages"][stage] = {"inputs": inputs}

    def set_submission_status(self, ref: str, status: str) -> None:
        self.doc["submissions"][ref] = status

    def save(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.doc, indent=2, sort_keys=True) + "\n", "utf-8")


def file_digest(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


# -- roster and pseudonyms ---------------------------------------------------------


def load_roster(path: str | Path) -> list[str]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError("roster file is empty")
    body = rows[1:] if rows[0] and rows[0][0].strip().lower() == "student_number" else rows
    roster = [row[0].strip() for row in body if row and row[0].strip()]
    if len(set(roster)) != len(roster):
        raise ConfigError("roster contains duplicate student numbers")
    return roster


def _map_key() -> bytes | None:
    key = os.environ.get(MAP_KEY_ENV)
    return key.encode() if key else None


def load_or_build_pseudonyms(config: JobConfig) -> ledger.PseudonymMap:
    if config.pseudonym_map.exists():
        return ledger.PseudonymMap.load(config.pseudonym_map, key=_map_key())
    if not config.pseudonym_salt:
        raise ConfigError("pseudonym_salt is required to build a new pseudonym map")
    pmap = ledger.PseudonymMap.build(load_roster(config.roster), config.pseudonym_salt)
    pmap.save(config.pseudonym_map, key=_map_key())
    return pmap


# -- providers ----------------------------------------------------------------------


def build_provider(config: JobConfig, log_path: Path | None) -> grader.GradingProvider:
    log = grader.RequestLog(log_path)
    if config.provider.kind == "mock":
        return grader.MockGradingProvider(seed=config.provider.seed, log=log)
    if config.provider.kind == "http":
        if not config.provider.endpoint:
            raise ConfigError("http provider needs an endpoint")
        return grader.HttpChatProvider(
            endpoint=config.provider.endpoint,
            api_key=os.environ.get(API_KEY_ENV),
            log=log,
        )
    raise ConfigError(f"unknown provider kind {config.provider.kind!r}")


# -- stages ----------------------------------------------------------------------------


def stage_ingest(config: JobConfig) -> dict:
    """Pages -> aligned sheets, decoded IDs, anonymised crops.

    Sheets whose identifier does not decode to a single roster entry are
    reported NEEDS_REVIEW and produce no crops.
    """
    template = sheets.load_template(config.template)
    if template.id_grid is None:
        raise ConfigError("template declares no id_grid")
    pmap = load_or_build_pseudonyms(config)
    codebook = bubbles.load_codebook(config.codebook) if config.codebook else None

    job_dir = config.job_dir
    crops_dir = job_dir / "crops"
    crops_dir.mkdir(parents=True, exist_ok=True)

    id_rows: list[dict] = []
    submissions: list[dict] = []
    pages = sorted(p.name for p in config.pages.glob("*.png"))
    if not pages:
        raise ConfigError(f"no .png pages under {config.pages}")

    def process(page_name: str):
        page = load_png(config.pages / page_name)
        aligned = sheets.align_page(page, template)
        decoded = bubbles.decode_id(aligned, template.id_grid)
        digits = decoded.digits_string()
        status = decoded.status
        pseudonym = ""
        crops: list[sheets.AnswerCrop] = []
        if codebook is not None:
            corrected = bubbles.correct_id(decoded.digits, codebook)
            digits, status = corrected.code, corrected.status
        if status == bubbles.STATUS_OK:
            student_number = digits
            if student_number in pmap.entries:
                pseudonym = pmap.entries[student_number]
                crops = sheets.anonymised_crops(aligned, pseudonym)
            else:
                status = bubbles.STATUS_NEEDS_REVIEW
        return page_name, digits, status, pseudonym, crops

    with ThreadPoolExecutor(max_workers=max(1, config.concurrency)) as pool:
        results = list(pool.map(process, pages))

    for page_name, digits, status, pseudonym, crops in results:
        id_rows.append(
            {"page": page_name, "pseudonym": pseudonym, "digits": digits, "status": status}
        )
        for crop in crops:
            save_png(crop.image, crops_dir / crop.file_name)
            submissions.append(
                {
                    "submission_ref": crop.submission_ref,
                    "pseudonym": pseudonym,
                    "question_id": crop.question_id,
                    "test_id": config.test_id,
                    "crop_file": f"crops/{crop.file_name}",
                    "content_hash": crop.content_hash,
                    "page": page_name,
                }
            )

    with (job_dir / "decoded_ids.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["page", "pseudonym", "digits", "status"])
        writer.writeheader()
        writer.writerows(id_rows)

    submissions.sort(key=lambda s: s["submission_ref"])
    lines = [json.dumps(s, sort_keys=True) for s in submissions]
    (job_dir / "submissions.jsonl").write_text(
        "\n".join(lines) + ("\n" if lines else ""), "utf-8"
    )

    manifest = Manifest(job_dir)
    manifest.update_header(config, keybank.preamble_digest(), template.digest())
    manifest.record_stage(
        "ingest",
        {
            "template": file_digest(config.template),
            "roster": file_digest(config.roster),
            "pages": hashlib.sha256(
                "".join(f"{p}:{file_digest(config.pages / p)}" for p in pages).encode()
            ).hexdigest(),
        },
    )
    manifest.save()
    review_count = sum(1 for row in id_rows if row["status"] != bubbles.STATUS_OK)
    return {
        "pages": len(pages),
        "submissions": len(submissions),
        "needs_review": review_count,
    }


def read_submissions(job_dir: Path) -> list[dict]:
    path = job_dir / "submissions.jsonl"
    if not path.exists():
        raise JobStateError("run ingest first: submissions.jsonl is missing")
    return [json.loads(line) for line in path.read_text("utf-8").splitlines() if line.strip()]


def stage_grade(config: JobConfig) -> dict:
    """Run the multi-pass grading over every submission, cached and resumable."""
    job_dir = config.job_dir
    submissions = read_submissions(job_dir)
    bank = keybank.load_key_bank(config.key_bank)
    provider = build_provider(config, job_dir / "request_log.jsonl")
    store = grader.PassStore(job_dir / "passes.jsonl")
    manifest = Manifest(job_dir)

    bundles = []
    for sub in submissions:
        entry = bank.get(sub["test_id"], sub["question_id"])
        image = load_png(job_dir / sub["crop_file"])
        crop = sheets.AnswerCrop(
            submission_ref=sub["submission_ref"],
            question_id=sub["question_id"],
            image=image,
            content_hash=sub["content_hash"],
        )
        bundles.append(
            (
                sub["submission_ref"],
                keybank.assemble_prompt(entry.question, entry.solution, entry.grading_key, crop),
            )
        )

    failures: list[tuple[str, str]] = []

    def grade_submission(item):
        ref, bundle = item
        try:
            for pass_index in range(config.pass_count):
                grader.cached_grade(
                    store,
                    provider,
                    bundle,
                    pass_index,
                    model_id=config.provider.model_id,
                    temperature=config.provider.temperature,
                    retries=config.retries,
                    retry_wait=config.retry_wait,
                )
            return ref, None
        except GradePipeError as exc:
            return ref, f"{type(exc).__name__}: {exc}"

    if config.concurrency > 1:
        with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
            outcomes = list(pool.map(grade_submission, bundles))
    else:
        outcomes = [grade_submission(item) for item in bundles]

    for ref, error in outcomes:
        manifest.set_submission_status(ref, "graded" if error is None else f"failed: {error}")
        if error is not None:
            failures.append((ref, error))

    store.compact()
    template = sheets.load_template(config.template)
    manifest.update_header(config, keybank.preamble_digest(), template.digest())
    manifest.record_stage(
        "grade",
        {
            "submissions": file_digest(job_dir / "submissions.jsonl"),
            "key_bank": hashlib.sha256(
                "".join(
                    f"{t}/{q}:{keybank.prompt_digest(e.question.text, e.solution.solution_text, keybank.render_key_text(e.grading_key))}"
                    for (t, q), e in sorted(bank.entries.items())
                ).encode()
            ).hexdigest(),
        },
    )
    manifest.save()
    if failures:
        raise JobStateError(
            f"{len(failures)} submissions failed: "
            + "; ".join(f"{ref} ({err})" for ref, err in failures[:3])
        )
    return {"submissions": len(bundles), "passes": len(store)}


def stage_aggregate(config: JobConfig) -> dict:
    """Summarise the passes per submission and compute provisional scores."""
    job_dir = config.job_dir
    submissions = read_submissions(job_dir)
    store = grader.PassStore(job_dir / "passes.jsonl")
    bank = keybank.load_key_bank(config.key_bank)

    records = []
    for sub in submissions:
        entry = bank.get(sub["test_id"], sub["question_id"])
        prompt_hash = keybank.prompt_digest(
            entry.question.text,
            entry.solution.solution_text,
            keybank.render_key_text(entry.grading_key),
        )
        passes = []
        for pass_index in range(config.pass_count):
            key = grader.PassKey(
                prompt_hash=prompt_hash,
                crop_hash=sub["content_hash"],
                model_id=config.provider.model_id,
                pass_index=pass_index,
            )
            result = store.get(key)
            if result is None:
                raise JobStateError(
                    f"missing pass {pass_index} for {sub['submission_ref']}; run grade"
                )
            passes.append(result)
        scores = [p.score for p in passes]
        summary = ledger.consistency(scores, config.thresholds)
        by_rule = {
            ledger.AGG_MAX: ledger.aggregate(scores, ledger.AGG_MAX, config.pass_count),
            ledger.AGG_MEDIAN: ledger.aggregate(scores, ledger.AGG_MEDIAN, config.pass_count),
        }
        records.append(
            ledger.SubmissionScores(
                submission_ref=sub["submission_ref"],
                pseudonym=sub["pseudonym"],
                test_id=sub["test_id"],
                question_id=sub["question_id"],
                crop_file=sub["crop_file"],
                summary=summary,
                rationales=tuple(p.raw_text for p in passes),
                alt_flags=tuple(p.alt_flag for p in passes),
                provisional=by_rule[config.aggregation],
                rule=config.aggregation,
                provisional_by_rule=by_rule,
            )
        )

    book = ledger.GradeLedger(job_dir)
    book.write_submissions(records)

    manifest = Manifest(job_dir)
    manifest.record_stage(
        "aggregate",
        {
            "passes": store.content_digest(),
            "rule": config.aggregation,
        },
    )
    manifest.save()
    flagged = sum(1 for r in records if r.summary.flagged)
    return {"submissions": len(records), "flagged": flagged}


def stage_report(config: JobConfig) -> dict:
    from . import review

    out_dir = config.job_dir / "report"
    count = review.build_review_report(config.job_dir, out_dir)
    manifest = Manifest(config.job_dir)
    manifest.record_stage(
        "report", {"summaries": file_digest(config.job_dir / "summaries.jsonl")}
    )
    manifest.save()
    return {"items": count, "report": str(out_dir / "index.html")}


def stage_export(config: JobConfig, strict: bool = False) -> dict:
    """Final grades and per-student bonus CSVs from the decided ledger."""
    from . import review

    job_dir = config.job_dir
    book = ledger.GradeLedger(job_dir)
    if not book.submissions:
        raise JobStateError("run aggregate first: summaries.jsonl is missing or empty")
    rows, warnings = ledger.export_final_grades(
        book, config.tests_total, config.questions_per_test, strict=strict
    )
    exports = job_dir / "exports"
    exports.mkdir(parents=True, exist_ok=True)
    (exports / "final_grades.csv").write_text(ledger.final_grades_csv(rows), "utf-8")
    (exports / "bonus.csv").write_text(ledger.bonus_csv(rows), "utf-8")
    (exports / "decisions.csv").write_text(review.export_decisions(job_dir), "utf-8")

    manifest = Manifest(job_dir)
    manifest.record_stage(
        "export", {"ledger": file_digest(job_dir / "ledger.jsonl") if (job_dir / "ledger.jsonl").exists() else ""}
    )
    manifest.save()
    return {"students": len(rows), "warnings": warnings}
