from __future__ import annotations

import math

import numpy as np
import pytest

from gradepipe import analytics
from gradepipe.errors import (
    IncompletePair,
    InsufficientData,
    LengthMismatch,
    MalformedTime,
)


def qwk_oracle(a, b, k=11):
    """Independent direct-summation weighted kappa, plain loops only."""
    n = len(a)
    observed = [[0.0] * k for _ in range(k)]
    for x, y in zip(a, b):
        observed[x][y] += 1.0 / n
    row = [sum(observed[i][j] for j in range(k)) for i in range(k)]
    col = [sum(observed[i][j] for i in range(k)) for j in range(k)]
    num = 0.0
    den = 0.0
    for i in range(k):
        for j in range(k):
            w = (i - j) ** 2 / (k - 1) ** 2
            num += observed[i][j] * w
            den += row[i] * col[j] * w
    if num == 0.0:
        return 1.0
    return 1.0 - num / den


class TestQwk:
    def test_identical_vectors(self):
        rng = np.random.default_rng(0)
        scores = [int(x) for x in rng.integers(0, 11, 30)]
        assert analytics.qwk(scores, scores) == 1.0

    def test_antisymmetric_construction(self):
        # observed weighted disagreement 1, expected 0.5 -> kappa = 1 - 1/0.5
        assert analytics.qwk([0, 10], [10, 0]) == pytest.approx(-1.0, abs=1e-12)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a = [int(x) for x in rng.integers(0, 11, 30)]
            b = [int(x) for x in rng.integers(0, 11, 30)]
            assert analytics.qwk(a, b) == pytest.approx(qwk_oracle(a, b), abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            a = [int(x) for x in rng.integers(0, 11, 25)]
            b = [int(x) for x in rng.integers(0, 11, 25)]
            assert analytics.qwk(a, b) == pytest.approx(analytics.qwk(b, a), abs=1e-14)

    def test_bounded_above_by_one_and_one_iff_identical(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            a = [int(x) for x in rng.integers(0, 11, 20)]
            b = [int(x) for x in rng.integers(0, 11, 20)]
            kappa = analytics.qwk(a, b)
            assert kappa <= 1.0
            if a == b:
                assert kappa == 1.0
            else:
                assert kappa < 1.0

    def test_constant_equal_vectors_degenerate_but_defined(self):
        assert analytics.qwk([4] * 10, [4] * 10) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            analytics.qwk([1, 2], [1])


class TestParseTimings:
    def test_mmss_arithmetic(self):
        assert analytics.parse_mmss("13:27") == 807
        assert analytics.parse_mmss("9:29") == 569

    def test_malformed_times(self):
        for bad in ("13", "1:99", "x:10", "-1:30", "0:00"):
            with pytest.raises(MalformedTime):
                analytics.parse_mmss(bad)

    def test_reference_fixture_loads_24_records(self):
        records = analytics.parse_timings(analytics.reference_timings_path())
        assert len(records) == 24
        manual = [r for r in records if r.medium == "MANUAL"]
        assert len(manual) == 12

    def test_specific_pair_ratio(self):
        records = analytics.parse_timings(analytics.reference_timings_path())
        result = analytics.timing_analysis(records)
        pair = next(
            p
            for p in result.per_pair_ratios
            if p.test_id == "3" and p.question_id == "Q2B" and p.annotator == "L"
        )
        assert pair.manual_seconds == 807
        assert pair.digital_seconds == 569
        assert pair.ratio == pytest.approx(0.705, abs=0.001)
        assert pair.order == "M_FIRST"

    def test_incomplete_pair(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text(
            "bonus,question,annotator,order,medium,mm:ss\n"
            "3,Q2B,L,M_FIRST,MANUAL,13:27\n"
        )
        with pytest.raises(IncompletePair):
            analytics.parse_timings(path)


# Ratios as published for the reference data, keyed by (bonus, question, annotator).
REFERENCE_RATIOS = {
    ("3", "Q2B", "L"): 0.705,
    ("3", "Q2B", "V"): 1.323,
    ("4", "Q2A", "T"): 0.998,
    ("4", "Q2A", "B"): 1.165,
    ("5", "Q1", "A"): 0.907,
    ("5", "Q1", "M"): 0.696,
    ("3", "Q2A", "T"): 0.596,
    ("3", "Q2A", "A"): 0.632,
    ("4", "Q1", "M"): 0.577,
    ("4", "Q1", "V"): 0.675,
    ("5", "Q2A", "B"): 0.629,
    ("5", "Q2A", "L"): 0.655,
}


class TestTimingAnalysis:
    @pytest.fixture()
    def result(self):
        return analytics.timing_analysis(
            analytics.parse_timings(analytics.reference_timings_path())
        )

    def test_all_pair_ratios_match_reference(self, result):
        assert len(result.per_pair_ratios) == 12
        for pair in result.per_pair_ratios:
            expected = REFERENCE_RATIOS[(pair.test_id, pair.question_id, pair.annotator)]
            assert pair.ratio == pytest.approx(expected, abs=0.001)

    def test_geometric_mean_and_interval(self, result):
        assert result.geomean == pytest.approx(0.767, abs=0.001)
        assert result.ci[0] == pytest.approx(0.595, abs=0.002)
        assert result.ci[1] == pytest.approx(0.989, abs=0.002)

    def test_reduction_percentages(self, result):
        assert result.reduction_pct == pytest.approx(23.3, abs=0.1)
        assert result.reduction_ci_pct[0] == pytest.approx(1.1, abs=0.2)
        assert result.reduction_ci_pct[1] == pytest.approx(40.5, abs=0.2)

    def test_equal_times_give_unit_ratio(self, tmp_path):
        rows = ["bonus,question,annotator,order,medium,mm:ss"]
        for q in ("Q1", "Q2"):
            for annotator in ("A", "B"):
                rows.append(f"1,{q},{annotator},M_FIRST,MANUAL,10:00")
                rows.append(f"1,{q},{annotator},M_FIRST,DIGITAL,10:00")
        path = tmp_path / "flat.csv"
        path.write_text("\n".join(rows) + "\n")
        result = analytics.timing_analysis(analytics.parse_timings(path))
        assert result.geomean == pytest.approx(1.0)
        assert result.reduction_pct == pytest.approx(0.0)

    def test_scale_invariance(self):
        records = analytics.parse_timings(analytics.reference_timings_path())
        scaled = [
            analytics.TimingRecord(
                r.annotator, r.test_id, r.question_id, r.medium, r.order, r.seconds * 3.7
            )
            for r in records
        ]
        base = analytics.timing_analysis(records)
        alt = analytics.timing_analysis(scaled)
        assert alt.geomean == pytest.approx(base.geomean, abs=1e-12)
        assert alt.ci[0] == pytest.approx(base.ci[0], abs=1e-12)
        assert alt.ci[1] == pytest.approx(base.ci[1], abs=1e-12)

    def test_single_question_has_no_interval(self, tmp_path):
        path = tmp_path / "one.csv"
        path.write_text(
            "bonus,question,annotator,order,medium,mm:ss\n"
            "1,Q1,A,M_FIRST,MANUAL,10:00\n"
            "1,Q1,A,M_FIRST,DIGITAL,9:00\n"
        )
        with pytest.raises(InsufficientData):
            analytics.timing_analysis(analytics.parse_timings(path))


class TestDeviationStats:
    def test_identical(self):
        stats = analytics.deviation_stats([1, 5, 9], [1, 5, 9])
        assert stats.mean_abs_dev == 0.0 and stats.median_abs_dev == 0.0
        assert stats.histogram[0] == 3

    def test_maximal(self):
        stats = analytics.deviation_stats([0, 10], [10, 0])
        assert stats.mean_abs_dev == 10.0 and stats.median_abs_dev == 10.0

    def test_hand_arithmetic(self):
        # |deltas| = {0, 1, 0, 4} -> mean 1.25, median 0.5
        stats = analytics.deviation_stats([5, 5, 5, 9], [5, 6, 5, 5])
        assert stats.mean_abs_dev == pytest.approx(1.25)
        assert stats.median_abs_dev == pytest.approx(0.5)
        assert stats.histogram[0] == 2 and stats.histogram[1] == 1 and stats.histogram[4] == 1

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            analytics.deviation_stats([1], [1, 2])


class TestPositioning:
    def test_between(self):
        result = analytics.positioning([7], [6], [8])
        assert result.counts["BETWEEN"] == 1
        assert result.mean_boundary_distance == pytest.approx(1.0)

    def test_equal(self):
        result = analytics.positioning([6], [6], [6])
        assert result.counts["EQUAL"] == 1
        assert result.mean_boundary_distance == 0.0

    def test_above(self):
        result = analytics.positioning([9], [6], [8])
        assert result.counts["ABOVE"] == 1
        assert result.mean_boundary_distance == pytest.approx(1.0)

    def test_touching_one_endpoint_counts_between(self):
        result = analytics.positioning([6], [6], [8])
        assert result.counts["BETWEEN"] == 1
        assert result.mean_boundary_distance == 0.0

    def test_totality_and_proportions(self):
        rng = np.random.default_rng(4)
        g = [int(x) for x in rng.integers(0, 11, 200)]
        a = [int(x) for x in rng.integers(0, 11, 200)]
        b = [int(x) for x in rng.integers(0, 11, 200)]
        result = analytics.positioning(g, a, b)
        assert sum(result.counts.values()) == 200
        assert sum(result.proportions.values()) == pytest.approx(1.0)


class TestKappaReport:
    def write_scores(self, tmp_path, rows):
        path = tmp_path / "scores.csv"
        lines = ["question,submission,grader,score"]
        lines += [f"{q},{s},{g},{v}" for q, s, g, v in rows]
        path.write_text("\n".join(lines) + "\n")
        return path

    def synthetic_rows(self, seed, questions=("QA", "QB"), n=30):
        rng = np.random.default_rng(seed)
        rows = []
        for q in questions:
            for i in range(n):
                sub = f"s{i:02d}"
                base = int(rng.integers(0, 11))
                rows.append((q, sub, "A1", base))
                rows.append((q, sub, "A2", int(np.clip(base + rng.integers(-2, 3), 0, 10))))
                for p in range(5):
                    rows.append(
                        (q, sub, f"LLM_pass_{p}", int(np.clip(base + rng.integers(-1, 2), 0, 10)))
                    )
        return rows

    def test_perfect_agreement(self, tmp_path):
        rows = []
        for i in range(10):
            sub = f"s{i}"
            rows.append(("QA", sub, "A1", i))
            rows.append(("QA", sub, "A2", i))
            rows += [("QA", sub, f"LLM_pass_{p}", i) for p in range(5)]
        path = self.write_scores(tmp_path, rows)
        report = analytics.kappa_report(analytics.load_scores(path), "MEDIAN")
        assert report[0].kappa_a1_a2 == 1.0
        assert report[0].kappa_a1_llm == 1.0
        assert report[0].kappa_a2_llm == 1.0

    def test_aggregation_changes_llm_vector(self, tmp_path):
        rows = []
        for i in range(12):
            sub = f"s{i}"
            score = i % 11
            rows.append(("QA", sub, "A1", score))
            rows.append(("QA", sub, "A2", score))
            # four passes at the human score, one outlier at 10
            rows += [("QA", sub, f"LLM_pass_{p}", score) for p in range(4)]
            rows.append(("QA", sub, "LLM_pass_4", 10))
        path = self.write_scores(tmp_path, rows)
        dataset = analytics.load_scores(path)
        median_report = analytics.kappa_report(dataset, "MEDIAN")
        max_report = analytics.kappa_report(dataset, "MAX")
        assert median_report[0].kappa_a1_llm == 1.0
        assert max_report[0].kappa_a1_llm < 1.0

    def test_matches_oracle_on_random_dataset(self, tmp_path):
        path = self.write_scores(tmp_path, self.synthetic_rows(seed=8))
        dataset = analytics.load_scores(path)
        report = analytics.kappa_report(dataset, "MEDIAN")
        for row in report:
            submissions = dataset.submissions(row.question)
            graders = dataset.questions[row.question]
            a1 = [graders["A1"][s] for s in submissions]
            a2 = [graders["A2"][s] for s in submissions]
            llm = analytics.llm_vector(dataset, row.question, submissions, "MEDIAN")
            assert row.kappa_a1_a2 == pytest.approx(qwk_oracle(a1, a2), abs=1e-12)
            assert row.kappa_a1_llm == pytest.approx(qwk_oracle(a1, llm), abs=1e-12)
            assert row.kappa_a2_llm == pytest.approx(qwk_oracle(a2, llm), abs=1e-12)

    def test_missing_grader_rejected(self, tmp_path):
        path = self.write_scores(tmp_path, [("QA", "s0", "A1", 5)])
        with pytest.raises(InsufficientData):
            analytics.kappa_report(analytics.load_scores(path))

    def test_csv_rendering(self, tmp_path):
        path = self.write_scores(tmp_path, self.synthetic_rows(seed=9, questions=("QA",)))
        rows = analytics.kappa_report(analytics.load_scores(path))
        text = analytics.kappa_report_csv(rows)
        assert text.splitlines()[0] == "question,kappa_a1_a2,kappa_a1_llm,kappa_a2_llm"
        assert text.splitlines()[1].startswith("QA,")
