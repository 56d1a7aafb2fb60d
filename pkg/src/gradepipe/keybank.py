"""Question bank: questions, worked solutions, grading keys, and the fixed prompt.

Grading keys are authored as structured JSON (enumerated steps with fixed
integer point values, optional alternative solution paths) and rendered to the
prose the model sees. Keeping them structured makes the authoring rules
mechanically checkable by `lint_grading_key`:

    E_SUM          ERROR  step points do not sum to 10 on some path
    W_BIG_STEP     WARN   a single step is worth more than 3 points
    W_BANNED       WARN   vague phrasing ("partial credit", "partially correct")
    W_NO_ALT       WARN   no alternative-path allowance declared
    I_NO_EXEMPT    INFO   no "do not deduct" clause anywhere in the key

Prompt assembly is pure: the same question/solution/key/crop always produces
the same text and the same prompt hash, which is what the pass cache keys on.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import KeyMismatch, LintError, MissingKey
from .sheets import AnswerCrop

TOTAL_POINTS = 10

FOOTER_TOTAL_LINE = "Total: X/10"
FOOTER_FLAG_LINE = "Flag: 0/1 (Where 1 means the student used a different approach)"

_PROMPT_TEMPLATE = (
    resources.files("gradepipe").joinpath("assets/grading_prompt.txt").read_text("utf-8")
)
PROMPT_PREAMBLE = _PROMPT_TEMPLATE.split("\n\nQuestion:", 1)[0]

_BANNED_PHRASES = ("partial credit", "partially correct")
_EXEMPTION_PHRASES = ("do not deduct", "no points are deducted", "without deduction")


@dataclass(frozen=True)
class Question:
    question_id: str
    text: str
    test_id: str


@dataclass(frozen=True)
class SolutionKey:
    question_id: str
    solution_text: str


@dataclass(frozen=True)
class KeyStep:
    description: str
    points: int


@dataclass(frozen=True)
class AltPath:
    description: str
    steps: tuple[KeyStep, ...]


@dataclass(frozen=True)
class GradingKey:
    question_id: str
    steps: tuple[KeyStep, ...]
    alt_paths: tuple[AltPath, ...] = ()
    total_points: int = TOTAL_POINTS
    footer_contract: tuple[str, str] = (FOOTER_TOTAL_LINE, FOOTER_FLAG_LINE)


@dataclass(frozen=True)
class LintFinding:
    severity: str  # ERROR | WARN | INFO
    code: str
    message: str
    question_id: str

    def __str__(self) -> str:
        return f"{self.severity} {self.code} [{self.question_id}]: {self.message}"


def grading_key_from_dict(doc: dict, question_id: str | None = None) -> GradingKey:
    qid = doc.get("question_id", question_id)
    if qid is None:
        raise KeyMismatch("grading key declares no question_id")

    def steps_of(items) -> tuple[KeyStep, ...]:
        steps = []
        for item in items:
            points = item["points"]
            if not isinstance(points, int) or isinstance(points, bool) or points < 1:
                raise ValueError(f"step points must be a positive integer, got {points!r}")
            steps.append(KeyStep(description=str(item["description"]), points=points))
        return tuple(steps)

    return GradingKey(
        question_id=str(qid),
        steps=steps_of(doc["steps"]),
        alt_paths=tuple(
            AltPath(description=str(p["description"]), steps=steps_of(p["steps"]))
            for p in doc.get("alt_paths", [])
        ),
    )


def lint_grading_key(key: GradingKey) -> list[LintFinding]:
    """Check a grading key against the authoring rules; ERRORs block loading."""
    findings: list[LintFinding] = []
    qid = key.question_id

    paths = [("main", key.steps)] + [
        (f"alternative '{p.description}'", p.steps) for p in key.alt_paths
    ]
    for name, steps in paths:
        total = sum(s.points for s in steps)
        if total != key.total_points:
            findings.append(
                LintFinding(
                    "ERROR",
                    "E_SUM",
                    f"{name} path sums to {total}, expected {key.total_points}",
                    qid,
                )
            )

    all_steps = [s for _, steps in paths for s in steps]
    for step in all_steps:
        if step.points > 3:
            findings.append(
                LintFinding(
                    "WARN",
                    "W_BIG_STEP",
                    f"step worth {step.points} points ('{step.description}'); "
                    "keep steps at 2-3 points so one judgement cannot swing the grade",
                    qid,
                )
            )

    texts = [s.description.lower() for s in all_steps] + [
        p.description.lower() for p in key.alt_paths
    ]
    for phrase in _BANNED_PHRASES:
        if any(phrase in t for t in texts):
            findings.append(
                LintFinding(
                    "WARN",
                    "W_BANNED",
                    f"vague phrasing '{phrase}'; state concrete criteria instead",
                    qid,
                )
            )

    if not key.alt_paths:
        findings.append(
            LintFinding(
                "WARN",
                "W_NO_ALT",
                "no alternative solution path declared; add one (or a generic "
                "allowance) so valid different approaches are not zeroed",
                qid,
            )
        )

    if not any(phrase in t for t in texts for phrase in _EXEMPTION_PHRASES):
        findings.append(
            LintFinding(
                "INFO",
                "I_NO_EXEMPT",
                "no 'do not deduct' clause; consider stating which deviations "
                "are free of deductions",
                qid,
            )
        )
    return findings


def render_key_text(key: GradingKey) -> str:
    """Prose form of a grading key as the model sees it, footer lines included."""

    def step_sentence(step: KeyStep) -> str:
        unit = "point" if step.points == 1 else "points"
        return f"Give {step.points} {unit} for {step.description}."

    lines = ["Give a score out of 10 for the student's explanation."]
    lines.extend(step_sentence(s) for s in key.steps)
    for path in key.alt_paths:
        body = " ".join(step_sentence(s) for s in path.steps)
        lines.append(
            f"If the student uses a different approach ({path.description}): {body}"
        )
    if key.alt_paths:
        lines.append(
            "If the student uses a different approach that is still mathematically "
            "sound, you can overrule the given grading scheme and assign your own "
            "sub-grades; in that case, also flag that the student used a different "
            "approach."
        )
    lines.append("Finally, on a new line at the very end, write exactly:")
    lines.append(key.footer_contract[0])
    lines.append("(where X is the numeric score).")
    lines.append(key.footer_contract[1])
    lines.append("Finally motivate your grade.")
    return "\n".join(lines)


@dataclass(frozen=True)
class PromptBundle:
    """Everything one grading call needs, hashed for caching."""

    system_text: str
    question_text: str
    solution_text: str
    key_text: str
    crop: AnswerCrop
    prompt_hash: str

    def full_text(self) -> str:
        return (
            _PROMPT_TEMPLATE.replace("{question}", self.question_text)
            .replace("{solution}", self.solution_text)
            .replace("{grading_key}", self.key_text)
        )


def prompt_digest(question_text: str, solution_text: str, key_text: str) -> str:
    digest = hashlib.sha256()
    for part in (PROMPT_PREAMBLE, question_text, solution_text, key_text):
        digest.update(part.encode("utf-8"))
        digest.update(b"\x00")
    return digest.hexdigest()


def preamble_digest() -> str:
    return hashlib.sha256(PROMPT_PREAMBLE.encode("utf-8")).hexdigest()


def assemble_prompt(
    question: Question, solution: SolutionKey, key: GradingKey, crop: AnswerCrop
) -> PromptBundle:
    """Build the fixed grading prompt for one submission."""
    ids = {question.question_id, solution.question_id, key.question_id}
    if len(ids) != 1:
        raise KeyMismatch(f"question ids disagree: {sorted(ids)}")
    if crop.question_id != question.question_id:
        raise KeyMismatch(
            f"crop is for {crop.question_id}, prompt for {question.question_id}"
        )
    key_text = render_key_text(key)
    return PromptBundle(
        system_text=PROMPT_PREAMBLE,
        question_text=question.text,
        solution_text=solution.solution_text,
        key_text=key_text,
        crop=crop,
        prompt_hash=prompt_digest(question.text, solution.solution_text, key_text),
    )


# -- bank loading ---------------------------------------------------------------


@dataclass(frozen=True)
class KeyBankEntry:
    question: Question
    solution: SolutionKey
    grading_key: GradingKey
    findings: tuple[LintFinding, ...]


@dataclass
class KeyBank:
    entries: dict[tuple[str, str], KeyBankEntry] = field(default_factory=dict)

    def get(self, test_id: str, question_id: str) -> KeyBankEntry:
        try:
            return self.entries[(test_id, question_id)]
        except KeyError:
            raise MissingKey(f"no bank entry for {test_id}/{question_id}") from None

    def tests(self) -> list[str]:
        return sorted({t for t, _ in self.entries})

    def questions(self, test_id: str) -> list[str]:
        return sorted(q for t, q in self.entries if t == test_id)

    def all_findings(self) -> list[LintFinding]:
        return [f for e in self.entries.values() for f in e.findings]


def load_key_bank(root: str | Path) -> KeyBank:
    """Load and validate `questions/<test_id>/<question_id>/` directories.

    Each question directory must hold question.txt, solution.txt, and
    grading_key.json. Lint runs on every key; any ERROR aborts the load.
    """
    base = Path(root) / "questions"
    if not base.is_dir():
        raise MissingKey(f"no questions directory under {root}")
    bank = KeyBank()
    errors: list[LintFinding] = []
    for test_dir in sorted(p for p in base.iterdir() if p.is_dir()):
        for q_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
            test_id, qid = test_dir.name, q_dir.name
            question_file = q_dir / "question.txt"
            solution_file = q_dir / "solution.txt"
            key_file = q_dir / "grading_key.json"
            for f in (question_file, solution_file, key_file):
                if not f.is_file():
                    raise MissingKey(f"{test_id}/{qid} is missing {f.name}")
            text = question_file.read_text("utf-8").strip()
            solution_text = solution_file.read_text("utf-8").strip()
            if not text or not solution_text:
                raise MissingKey(f"{test_id}/{qid} has an empty question or solution")
            key = grading_key_from_dict(
                json.loads(key_file.read_text("utf-8")), question_id=qid
            )
            if key.question_id != qid:
                raise KeyMismatch(
                    f"grading key in {test_id}/{qid} declares question_id "
                    f"{key.question_id}"
                )
            findings = lint_grading_key(key)
            errors.extend(f for f in findings if f.severity == "ERROR")
            bank.entries[(test_id, qid)] = KeyBankEntry(
                question=Question(question_id=qid, text=text, test_id=test_id),
                solution=SolutionKey(question_id=qid, solution_text=solution_text),
                grading_key=key,
                findings=tuple(findings),
            )
    if errors:
        raise LintError("; ".join(str(f) for f in errors))
    return bank
