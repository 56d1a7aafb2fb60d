"""Pseudonyms, score aggregation, consistency flags, decisions, and grade export.

The ledger is the job's source of truth: per-submission pass scores and
summaries land in `summaries.jsonl`, human decisions append to `ledger.jsonl`
and are never rewritten (the latest decision per submission is authoritative,
earlier ones remain as audit trail). The pseudonym map lives outside the job
directory and never touches any LLM-facing artifact.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import math
import threading
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .errors import (
    FinalScoreMismatch,
    NoteRequired,
    UndecidedSubmissions,
    UnknownStudent,
    UnknownSubmission,
    WrongPassCount,
)

AGG_MAX = "MAX"
AGG_MEDIAN = "MEDIAN"

ACTION_ACCEPT = "ACCEPT"
ACTION_OVERRIDE = "OVERRIDE"

_ANOMALY_EPS = 1e-9


@dataclass(frozen=True)
class FlagThresholds:
    """Advisory disagreement thresholds; every submission is reviewed regardless."""

    spread_max: int = 3
    variance_max: float = 2.0


DEFAULT_THRESHOLDS = FlagThresholds()


# -- pseudonymisation ------------------------------------------------------------


@dataclass
class PseudonymMap:
    """Keyed-digest pseudonyms for the roster; injective by construction check."""

    salt: str
    entries: dict[str, str]

    @classmethod
    def build(cls, roster: list[str], salt: str, length: int = 12) -> "PseudonymMap":
        entries: dict[str, str] = {}
        seen: dict[str, str] = {}
        for number in roster:
            digest = hmac.new(salt.encode(), number.encode(), hashlib.sha256).hexdigest()
            pseudonym = f"s{digest[:length]}"
            if pseudonym in seen and seen[pseudonym] != number:
                raise ValueError(f"pseudonym collision between {seen[pseudonym]} and {number}")
            seen[pseudonym] = number
            entries[number] = pseudonym
        return cls(salt=salt, entries=entries)

    def save(self, path: str | Path, key: bytes | None = None) -> None:
        """Write the map; with `key` the file is Fernet-encrypted at rest."""
        payload = json.dumps({"salt": self.salt, "entries": self.entries}, sort_keys=True)
        data = payload.encode()
        if key is not None:
            from cryptography.fernet import Fernet

            data = b"FERNET:" + Fernet(key).encrypt(data)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)

    @classmethod
    def load(cls, path: str | Path, key: bytes | None = None) -> "PseudonymMap":
        data = Path(path).read_bytes()
        if data.startswith(b"FERNET:"):
            if key is None:
                raise ValueError("pseudonym map is encrypted; a key is required")
            from cryptography.fernet import Fernet

            data = Fernet(key).decrypt(data[len(b"FERNET:") :])
        doc = json.loads(data.decode())
        return cls(salt=doc["salt"], entries=dict(doc["entries"]))


def pseudonymise(student_number: str, pmap: PseudonymMap) -> str:
    try:
        return pmap.entries[student_number]
    except KeyError:
        raise UnknownStudent(f"student {student_number!r} is not on the roster") from None


# -- aggregation and consistency ---------------------------------------------------


def aggregate(passes: list[int], rule: str, expected_count: int | None = None) -> int:
    """Provisional score: MAX (deployed, in the student's favour) or MEDIAN."""
    if expected_count is not None and len(passes) != expected_count:
        raise WrongPassCount(f"expected {expected_count} passes, got {len(passes)}")
    if not passes:
        raise WrongPassCount("no passes to aggregate")
    ordered = sorted(passes)
    if rule == AGG_MAX:
        return ordered[-1]
    if rule == AGG_MEDIAN:
        return ordered[(len(ordered) - 1) // 2]
    raise ValueError(f"unknown aggregation rule {rule!r}")


@dataclass(frozen=True)
class ScoreSummary:
    passes: tuple[int, ...]
    max: int
    median: int
    mean: float
    variance: float  # sample variance, n-1 denominator
    spread: int
    anomaly: float
    flagged: bool

    def to_dict(self) -> dict:
        return asdict(self)


def consistency(
    passes: list[int], thresholds: FlagThresholds = DEFAULT_THRESHOLDS
) -> ScoreSummary:
    """Internal agreement metrics across the passes of one submission.

    anomaly is the largest deviation from the mean in standard deviations
    (zero when all passes agree); spread is max - min.
    """
    if not passes:
        raise WrongPassCount("no passes to summarise")
    n = len(passes)
    mean = sum(passes) / n
    variance = sum((x - mean) ** 2 for x in passes) / (n - 1) if n > 1 else 0.0
    spread = max(passes) - min(passes)
    max_dev = max(abs(x - mean) for x in passes)
    anomaly = max_dev / (math.sqrt(variance) + _ANOMALY_EPS)
    flagged = spread >= thresholds.spread_max or variance >= thresholds.variance_max
    return ScoreSummary(
        passes=tuple(passes),
        max=max(passes),
        median=sorted(passes)[(n - 1) // 2],
        mean=mean,
        variance=variance,
        spread=spread,
        anomaly=anomaly,
        flagged=flagged,
    )


def flag(summary: ScoreSummary, thresholds: FlagThresholds = DEFAULT_THRESHOLDS) -> bool:
    """Advisory review flag: passes disagree beyond the configured thresholds."""
    return summary.spread >= thresholds.spread_max or summary.variance >= thresholds.variance_max


# -- decisions ----------------------------------------------------------------------


def utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class Decision:
    submission_ref: str
    action: str  # ACCEPT | OVERRIDE
    final_score: int
    reviewer_id: str
    note: str = ""
    timestamp: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "Decision":
        return cls(**doc)


@dataclass
class SubmissionScores:
    """Aggregate stage output for one (student, question) unit."""

    submission_ref: str
    pseudonym: str
    test_id: str
    question_id: str
    crop_file: str
    summary: ScoreSummary
    rationales: tuple[str, ...]
    alt_flags: tuple[bool, ...]
    provisional: int
    rule: str
    provisional_by_rule: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["summary"] = self.summary.to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "SubmissionScores":
        doc = dict(doc)
        summary = dict(doc.pop("summary"))
        summary["passes"] = tuple(summary["passes"])
        return cls(
            summary=ScoreSummary(**summary),
            rationales=tuple(doc.pop("rationales")),
            alt_flags=tuple(doc.pop("alt_flags")),
            **doc,
        )


class GradeLedger:
    """Per-job store of submissions and the append-only decision trail."""

    def __init__(self, job_dir: str | Path):
        self.job_dir = Path(job_dir)
        self.summaries_path = self.job_dir / "summaries.jsonl"
        self.decisions_path = self.job_dir / "ledger.jsonl"
        self.submissions: dict[str, SubmissionScores] = {}
        self.decisions: list[Decision] = []
        self._lock = threading.Lock()
        if self.summaries_path.exists():
            for line in self.summaries_path.read_text("utf-8").splitlines():
                if line.strip():
                    record = SubmissionScores.from_dict(json.loads(line))
                    self.submissions[record.submission_ref] = record
        if self.decisions_path.exists():
            for line in self.decisions_path.read_text("utf-8").splitlines():
                if line.strip():
                    self.decisions.append(Decision.from_dict(json.loads(line)))

    def write_submissions(self, records: list[SubmissionScores]) -> None:
        records = sorted(records, key=lambda r: r.submission_ref)
        self.submissions = {r.submission_ref: r for r in records}
        self.job_dir.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps(r.to_dict(), sort_keys=True) for r in records]
        self.summaries_path.write_text("\n".join(lines) + ("\n" if lines else ""), "utf-8")

    def record_decision(self, decision: Decision) -> Decision:
        """Validate and append one decision; earlier decisions stay in the trail."""
        submission = self.submissions.get(decision.submission_ref)
        if submission is None:
            raise UnknownSubmission(f"no submission {decision.submission_ref!r}")
        if decision.action not in (ACTION_ACCEPT, ACTION_OVERRIDE):
            raise ValueError(f"unknown action {decision.action!r}")
        if not 0 <= decision.final_score <= 10:
            raise ValueError(f"final score {decision.final_score} outside 0..10")
        if decision.action == ACTION_ACCEPT and decision.final_score != submission.provisional:
            raise FinalScoreMismatch(
                f"ACCEPT must keep the provisional score {submission.provisional}"
            )
        if decision.action == ACTION_OVERRIDE and not decision.note.strip():
            raise NoteRequired("OVERRIDE decisions require a note")
        if not decision.timestamp:
            decision = Decision(**{**decision.to_dict(), "timestamp": utc_now()})
        with self._lock:
            self.decisions.append(decision)
            self.job_dir.mkdir(parents=True, exist_ok=True)
            with self.decisions_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(decision.to_dict(), sort_keys=True) + "\n")
        return decision

    def decisions_for(self, submission_ref: str) -> list[Decision]:
        return [d for d in self.decisions if d.submission_ref == submission_ref]

    def latest_decision(self, submission_ref: str) -> Decision | None:
        trail = self.decisions_for(submission_ref)
        return trail[-1] if trail else None

    def final_score(self, submission_ref: str) -> int | None:
        decision = self.latest_decision(submission_ref)
        return decision.final_score if decision else None

    def undecided(self) -> list[str]:
        return sorted(
            ref for ref in self.submissions if self.latest_decision(ref) is None
        )


# -- final grade export ---------------------------------------------------------------


@dataclass(frozen=True)
class FinalGradeRow:
    pseudonym: str
    scores: dict[tuple[str, str], int]  # (test_id, question_id) -> final score
    test_totals: dict[str, int]
    bonus: float


def export_final_grades(
    ledger: GradeLedger,
    tests_total: int,
    questions_per_test: int,
    strict: bool = False,
) -> tuple[list[FinalGradeRow], list[str]]:
    """Final scores per student with the rescaled bonus in [0, 1].

    The bonus is the decided-score total over the maximum attainable across
    the whole test series. Undecided submissions abort in strict mode and are
    excluded with a warning otherwise.
    """
    warnings: list[str] = []
    undecided = ledger.undecided()
    if undecided:
        if strict:
            raise UndecidedSubmissions(
                f"{len(undecided)} undecided submissions: {', '.join(undecided[:5])}"
            )
        warnings.extend(f"undecided submission excluded: {ref}" for ref in undecided)

    max_total = tests_total * questions_per_test * 10
    per_student: dict[str, dict[tuple[str, str], int]] = {}
    for ref, submission in sorted(ledger.submissions.items()):
        decision = ledger.latest_decision(ref)
        if decision is None:
            continue
        per_student.setdefault(submission.pseudonym, {})[
            (submission.test_id, submission.question_id)
        ] = decision.final_score

    rows = []
    for pseudonym in sorted(per_student):
        scores = per_student[pseudonym]
        totals: dict[str, int] = {}
        for (test_id, _), score in scores.items():
            totals[test_id] = totals.get(test_id, 0) + score
        bonus = min(1.0, max(0.0, sum(scores.values()) / max_total))
        rows.append(
            FinalGradeRow(
                pseudonym=pseudonym, scores=scores, test_totals=totals, bonus=bonus
            )
        )
    return rows, warnings


def final_grades_csv(rows: list[FinalGradeRow]) -> str:
    lines = ["pseudonym,test_id,question_id,final_score"]
    for row in rows:
        for (test_id, question_id), score in sorted(row.scores.items()):
            lines.append(f"{row.pseudonym},{test_id},{question_id},{score}")
    return "\n".join(lines) + "\n"


def bonus_csv(rows: list[FinalGradeRow]) -> str:
    lines = ["pseudonym,bonus"]
    for row in rows:
        lines.append(f"{row.pseudonym},{row.bonus:.4f}")
    return "\n".join(lines) + "\n"
