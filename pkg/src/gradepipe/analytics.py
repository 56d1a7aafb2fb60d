"""Agreement and timing statistics for grading studies.

Covers four analyses: quadratically weighted Cohen's kappa between grader
pairs, digital-to-manual grading-time ratios aggregated on the log scale under
a counterbalanced order design, distributions of absolute score deviations,
and the relative positioning of machine scores against two human annotators.

Kappa uses a fixed category count (scores 0..10) even when some categories are
unobserved, so values stay comparable across questions.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .errors import (
    DegenerateAgreement,
    IncompletePair,
    InsufficientData,
    LengthMismatch,
    MalformedTime,
)
from .ledger import AGG_MAX, AGG_MEDIAN, aggregate

SCORE_CATEGORIES = 11  # integer scores 0..10

MEDIUM_MANUAL = "MANUAL"
MEDIUM_DIGITAL = "DIGITAL"
ORDER_MANUAL_FIRST = "M_FIRST"
ORDER_DIGITAL_FIRST = "D_FIRST"

BELOW = "BELOW"
BETWEEN = "BETWEEN"
EQUAL = "EQUAL"
ABOVE = "ABOVE"


def reference_timings_path() -> Path:
    """Bundled reference timing dataset (24 annotator-question measurements)."""
    return Path(str(resources.files("gradepipe").joinpath("assets/reference_timings.csv")))


# -- weighted kappa ---------------------------------------------------------------


def contingency_table(
    scores_a: Sequence[int], scores_b: Sequence[int], k: int = SCORE_CATEGORIES
) -> np.ndarray:
    """k x k observation counts for two equally long integer score vectors."""
    a = np.asarray(scores_a, dtype=int)
    b = np.asarray(scores_b, dtype=int)
    if a.shape != b.shape:
        raise LengthMismatch(f"vectors differ in length: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise InsufficientData("need at least one paired observation")
    if (a < 0).any() or (a >= k).any() or (b < 0).any() or (b >= k).any():
        raise ValueError(f"scores must lie in 0..{k - 1}")
    counts = np.zeros((k, k), dtype=float)
    np.add.at(counts, (a, b), 1.0)
    return counts


def qwk(
    scores_a: Sequence[int], scores_b: Sequence[int], k: int = SCORE_CATEGORIES
) -> float:
    """Quadratically weighted Cohen's kappa.

    Disagreement between categories i and j is penalised by (i-j)^2/(k-1)^2;
    kappa = 1 - observed/expected weighted disagreement, with expectation from
    the product of the marginals. Zero observed disagreement gives kappa = 1.
    """
    counts = contingency_table(scores_a, scores_b, k)
    observed = counts / counts.sum()
    idx = np.arange(k)
    weights = (idx[:, None] - idx[None, :]) ** 2 / (k - 1) ** 2
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0))
    observed_disagreement = float((observed * weights).sum())
    expected_disagreement = float((expected * weights).sum())
    if observed_disagreement == 0.0:
        return 1.0
    if expected_disagreement == 0.0:
        raise DegenerateAgreement(
            "expected weighted disagreement is zero but observed is not"
        )
    return 1.0 - observed_disagreement / expected_disagreement


# -- grading-time analysis -----------------------------------------------------------


@dataclass(frozen=True)
class TimingRecord:
    annotator: str
    test_id: str
    question_id: str
    medium: str  # MANUAL | DIGITAL
    order: str  # M_FIRST | D_FIRST
    seconds: float


def parse_mmss(value: str) -> int:
    parts = value.strip().split(":")
    if len(parts) != 2:
        raise MalformedTime(f"expected mm:ss, got {value!r}")
    try:
        minutes, seconds = int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise MalformedTime(f"expected mm:ss, got {value!r}") from exc
    if minutes < 0 or not 0 <= seconds < 60:
        raise MalformedTime(f"expected mm:ss, got {value!r}")
    total = minutes * 60 + seconds
    if total <= 0:
        raise MalformedTime("time must be positive")
    return total


def parse_timings(path: str | Path) -> list[TimingRecord]:
    """Read the timing CSV: bonus,question,annotator,order,medium,mm:ss.

    Every (annotator, question) block must contribute exactly one MANUAL and
    one DIGITAL measurement.
    """
    records: list[TimingRecord] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            medium = row["medium"].strip().upper()
            order = row["order"].strip().upper()
            if medium not in (MEDIUM_MANUAL, MEDIUM_DIGITAL):
                raise MalformedTime(f"unknown medium {row['medium']!r}")
            if order not in (ORDER_MANUAL_FIRST, ORDER_DIGITAL_FIRST):
                raise MalformedTime(f"unknown order {row['order']!r}")
            records.append(
                TimingRecord(
                    annotator=row["annotator"].strip(),
                    test_id=row["bonus"].strip(),
                    question_id=row["question"].strip(),
                    medium=medium,
                    order=order,
                    seconds=float(parse_mmss(row["mm:ss"])),
                )
            )
    _pair_up(records)  # validates completeness
    return records


@dataclass(frozen=True)
class PairRatio:
    test_id: str
    question_id: str
    annotator: str
    order: str
    manual_seconds: float
    digital_seconds: float

    @property
    def ratio(self) -> float:
        return self.digital_seconds / self.manual_seconds


def _pair_up(records: Iterable[TimingRecord]) -> list[PairRatio]:
    by_key: dict[tuple[str, str, str], dict[str, TimingRecord]] = {}
    for record in records:
        slot = by_key.setdefault(
            (record.test_id, record.question_id, record.annotator), {}
        )
        if record.medium in slot:
            raise IncompletePair(
                f"duplicate {record.medium} time for {record.annotator} on "
                f"{record.test_id}/{record.question_id}"
            )
        slot[record.medium] = record
    pairs = []
    for (test_id, question_id, annotator), slot in sorted(by_key.items()):
        if MEDIUM_MANUAL not in slot or MEDIUM_DIGITAL not in slot:
            raise IncompletePair(
                f"{annotator} on {test_id}/{question_id} lacks a manual or digital time"
            )
        pairs.append(
            PairRatio(
                test_id=test_id,
                question_id=question_id,
                annotator=annotator,
                order=slot[MEDIUM_MANUAL].order,
                manual_seconds=slot[MEDIUM_MANUAL].seconds,
                digital_seconds=slot[MEDIUM_DIGITAL].seconds,
            )
        )
    return pairs


@dataclass(frozen=True)
class RatioAnalysis:
    per_pair_ratios: tuple[PairRatio, ...]
    per_question_log_means: tuple[float, ...]
    geomean: float
    ci: tuple[float, float]
    reduction_pct: float
    reduction_ci_pct: tuple[float, float]

    def to_dict(self) -> dict:
        return {
            "pairs": [
                {**asdict(p), "ratio": round(p.ratio, 6)} for p in self.per_pair_ratios
            ],
            "per_question_log_means": list(self.per_question_log_means),
            "geomean": self.geomean,
            "ci": list(self.ci),
            "reduction_pct": self.reduction_pct,
            "reduction_ci_pct": list(self.reduction_ci_pct),
        }


def timing_analysis(records: Iterable[TimingRecord]) -> RatioAnalysis:
    """Digital/manual time ratios aggregated on the log scale.

    Each annotator-question pair yields one D/M ratio; ratios are averaged in
    log space per question, then across questions, and the mean gets a
    two-sided 95% t-interval with df = #questions - 1. Point and interval are
    exponentiated back; the time reduction is 100 * (1 - value).
    """
    pairs = _pair_up(records)
    by_question: dict[tuple[str, str], list[float]] = {}
    for pair in pairs:
        by_question.setdefault((pair.test_id, pair.question_id), []).append(
            math.log(pair.ratio)
        )
    log_means = [float(np.mean(v)) for _, v in sorted(by_question.items())]
    n = len(log_means)
    if n < 2:
        raise InsufficientData("need at least 2 questions for the interval")
    mean = float(np.mean(log_means))
    sd = float(np.std(log_means, ddof=1))
    half_width = stats.t.ppf(0.975, n - 1) * sd / math.sqrt(n)
    low, high = math.exp(mean - half_width), math.exp(mean + half_width)
    geomean = math.exp(mean)
    return RatioAnalysis(
        per_pair_ratios=tuple(pairs),
        per_question_log_means=tuple(log_means),
        geomean=geomean,
        ci=(low, high),
        reduction_pct=100.0 * (1.0 - geomean),
        reduction_ci_pct=(100.0 * (1.0 - high), 100.0 * (1.0 - low)),
    )


# -- score deviations ------------------------------------------------------------------


@dataclass(frozen=True)
class DeviationStats:
    mean_abs_dev: float
    median_abs_dev: float
    histogram: tuple[int, ...]  # counts of |delta| = 0..10

    def to_dict(self) -> dict:
        return asdict(self)


def deviation_stats(scores_a: Sequence[int], scores_b: Sequence[int]) -> DeviationStats:
    """Element-wise absolute score differences with an integer-bin histogram."""
    a = np.asarray(scores_a, dtype=float)
    b = np.asarray(scores_b, dtype=float)
    if a.shape != b.shape:
        raise LengthMismatch(f"vectors differ in length: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise InsufficientData("need at least one paired observation")
    deltas = np.abs(a - b)
    histogram = np.bincount(
        np.rint(deltas).astype(int), minlength=SCORE_CATEGORIES
    )
    return DeviationStats(
        mean_abs_dev=float(deltas.mean()),
        median_abs_dev=float(np.median(deltas)),
        histogram=tuple(int(c) for c in histogram[:SCORE_CATEGORIES]),
    )


# -- positioning against two human graders ----------------------------------------------


@dataclass(frozen=True)
class PositioningBreakdown:
    counts: dict[str, int]
    proportions: dict[str, float]
    mean_boundary_distance: float
    std_boundary_distance: float

    def to_dict(self) -> dict:
        return asdict(self)


def positioning(
    llm_scores: Sequence[int],
    human_a: Sequence[int],
    human_b: Sequence[int],
) -> PositioningBreakdown:
    """Where each machine score falls relative to the two human scores.

    BELOW/ABOVE means strictly outside the human range, EQUAL means all three
    coincide, BETWEEN covers the inclusive interval otherwise (including ties
    with exactly one human). Distance is to the nearest human score, zero
    inside-or-on the range boundary only for EQUAL; for BETWEEN it is the
    distance to the nearest endpoint.
    """
    g = np.asarray(llm_scores, dtype=float)
    a = np.asarray(human_a, dtype=float)
    b = np.asarray(human_b, dtype=float)
    if not (g.shape == a.shape == b.shape):
        raise LengthMismatch("llm and human score vectors must have equal length")
    if g.size == 0:
        raise InsufficientData("need at least one observation")
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    counts = {BELOW: 0, BETWEEN: 0, EQUAL: 0, ABOVE: 0}
    distances = []
    for gi, lo_i, hi_i in zip(g, lo, hi):
        if gi < lo_i:
            counts[BELOW] += 1
            distances.append(lo_i - gi)
        elif gi > hi_i:
            counts[ABOVE] += 1
            distances.append(gi - hi_i)
        elif gi == lo_i == hi_i:
            counts[EQUAL] += 1
            distances.append(0.0)
        else:
            counts[BETWEEN] += 1
            distances.append(min(gi - lo_i, hi_i - gi))
    total = g.size
    proportions = {k: v / total for k, v in counts.items()}
    return PositioningBreakdown(
        counts=counts,
        proportions=proportions,
        mean_boundary_distance=float(np.mean(distances)),
        std_boundary_distance=float(np.std(distances)),
    )


# -- per-question kappa report ------------------------------------------------------------


GRADER_A1 = "A1"
GRADER_A2 = "A2"
LLM_PASS_GRADERS = tuple(f"LLM_pass_{i}" for i in range(5))


@dataclass
class ScoreDataset:
    """Per-question score vectors keyed by grader, aligned over submissions."""

    questions: dict[str, dict[str, dict[str, int]]]  # question -> grader -> submission -> score

    def submissions(self, question: str) -> list[str]:
        graders = self.questions[question]
        common = set.intersection(*(set(v) for v in graders.values()))
        return sorted(common)


def load_scores(path: str | Path) -> ScoreDataset:
    """Read the scores CSV: question,submission,grader,score."""
    questions: dict[str, dict[str, dict[str, int]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            question = row["question"].strip()
            questions.setdefault(question, {}).setdefault(
                row["grader"].strip(), {}
            )[row["submission"].strip()] = int(row["score"])
    return ScoreDataset(questions=questions)


def llm_vector(
    dataset: ScoreDataset, question: str, submissions: list[str], aggregation: str
) -> list[int]:
    graders = dataset.questions[question]
    missing = [g for g in LLM_PASS_GRADERS if g not in graders]
    if missing:
        raise InsufficientData(f"{question}: missing pass columns {missing}")
    vector = []
    for submission in submissions:
        passes = [graders[g][submission] for g in LLM_PASS_GRADERS]
        vector.append(aggregate(passes, aggregation))
    return vector


@dataclass(frozen=True)
class KappaRow:
    question: str
    kappa_a1_a2: float
    kappa_a1_llm: float
    kappa_a2_llm: float


def kappa_report(dataset: ScoreDataset, aggregation: str = AGG_MEDIAN) -> list[KappaRow]:
    """Per-question agreement: the two humans against each other and the machine."""
    if aggregation not in (AGG_MAX, AGG_MEDIAN):
        raise ValueError(f"unknown aggregation {aggregation!r}")
    rows = []
    for question in sorted(dataset.questions):
        graders = dataset.questions[question]
        for required in (GRADER_A1, GRADER_A2):
            if required not in graders:
                raise InsufficientData(f"{question}: missing grader {required}")
        submissions = dataset.submissions(question)
        if not submissions:
            raise InsufficientData(f"{question}: no submissions shared by all graders")
        a1 = [graders[GRADER_A1][s] for s in submissions]
        a2 = [graders[GRADER_A2][s] for s in submissions]
        llm = llm_vector(dataset, question, submissions, aggregation)
        rows.append(
            KappaRow(
                question=question,
                kappa_a1_a2=qwk(a1, a2),
                kappa_a1_llm=qwk(a1, llm),
                kappa_a2_llm=qwk(a2, llm),
            )
        )
    return rows


def kappa_report_csv(rows: list[KappaRow]) -> str:
    lines = ["question,kappa_a1_a2,kappa_a1_llm,kappa_a2_llm"]
    for row in rows:
        lines.append(
            f"{row.question},{row.kappa_a1_a2:.6f},{row.kappa_a1_llm:.6f},{row.kappa_a2_llm:.6f}"
        )
    return "\n".join(lines) + "\n"
