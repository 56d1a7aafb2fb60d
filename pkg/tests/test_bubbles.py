from __future__ import annotations

import itertools

import numpy as np
import pytest

from gradepipe import bubbles, sheets
from gradepipe.errors import BudgetExhausted, EmptyCodebook, OutOfBounds
from gradepipe.geometry import Rect


def pairwise_min_distance(codes):
    # Independent O(n^2) oracle: plain loops, no reuse of library helpers.
    best = None
    for a, b in itertools.combinations(codes, 2):
        d = sum(1 for x, y in zip(a, b) if x != y)
        if best is None or d < best:
            best = d
    return best


def nearest_by_scan(observed, codes):
    # Exhaustive nearest-neighbour oracle over the raw code strings.
    scored = []
    for code in codes:
        d = sum(
            1
            for column, ch in zip(observed, code)
            if not (isinstance(column, int) and str(column) == ch)
        )
        scored.append((d, code))
    scored.sort(key=lambda t: (t[0], t[1]))
    best_d = scored[0][0]
    ties = [c for d, c in scored if d == best_d]
    return best_d, ties


class TestFillRatio:
    def test_fully_black_disc(self):
        image = np.zeros((40, 40), dtype=np.uint8)
        assert bubbles.fill_ratio(image, (20, 20), 9) >= 0.95

    def test_blank_paper(self):
        image = np.full((40, 40), 255, dtype=np.uint8)
        assert bubbles.fill_ratio(image, (20, 20), 9) <= 0.05

    def test_half_filled_disc_matches_pixel_count(self):
        image = np.full((40, 40), 255, dtype=np.uint8)
        image[:, :20] = 0  # left half dark; disc centred on the split
        ratio = bubbles.fill_ratio(image, (19.5, 20), 9)
        ys, xs = np.mgrid[0:40, 0:40]
        disc = (xs - 19.5) ** 2 + (ys - 20) ** 2 <= 81
        oracle = (image[disc] < 127.5).mean()
        assert ratio == pytest.approx(oracle, abs=1e-12)
        assert 0.4 <= ratio <= 0.6

    def test_disc_out_of_bounds(self):
        image = np.full((40, 40), 255, dtype=np.uint8)
        with pytest.raises(OutOfBounds):
            bubbles.fill_ratio(image, (3, 3), 9)


class TestDecodeColumn:
    def test_single_hit(self):
        ratios = [0.1, 0.05, 0.0, 0.9, 0.1, 0.0, 0.0, 0.05, 0.1, 0.0]
        assert bubbles.decode_column(ratios, 0.5) == 3

    def test_empty(self):
        assert bubbles.decode_column([0.1] * 10, 0.5) == bubbles.EMPTY

    def test_ambiguous(self):
        ratios = [0.0, 0.0, 0.8, 0.0, 0.0, 0.0, 0.0, 0.8, 0.0, 0.0]
        assert bubbles.decode_column(ratios, 0.5) == bubbles.AMBIGUOUS

    def test_lowering_threshold_never_turns_a_digit_into_empty(self):
        rng = np.random.default_rng(11)
        for _ in range(300):
            ratios = rng.uniform(0, 1, 10)
            high, low = sorted(rng.uniform(0.05, 0.95, 2), reverse=True)
            first = bubbles.decode_column(ratios, high)
            second = bubbles.decode_column(ratios, low)
            if isinstance(first, int):
                assert second != bubbles.EMPTY


class TestDecodeId:
    def test_round_trip(self, template, identity_sheet):
        page = sheets.render_synthetic_sheet(template, "0123456", {})
        decoded = bubbles.decode_id(identity_sheet(page), template.id_grid)
        assert decoded.digits_string() == "0123456"
        assert decoded.status == bubbles.STATUS_OK

    def test_round_trip_ok_when_fill_comfortably_clears_threshold(
        self, template, identity_sheet
    ):
        page = sheets.render_synthetic_sheet(template, "9081726", {}, fill=0.9)
        decoded = bubbles.decode_id(identity_sheet(page), template.id_grid)
        marked = decoded.fill_ratios.max(axis=0)
        assert (marked >= bubbles.DEFAULT_FILL_THRESHOLD + 0.2).all()
        assert decoded.digits_string() == "9081726"
        assert decoded.status == bubbles.STATUS_OK

    def test_unfilled_column_is_empty_and_flagged(self, template, identity_sheet):
        page = sheets.render_synthetic_sheet(template, "01-3456", {})
        decoded = bubbles.decode_id(identity_sheet(page), template.id_grid)
        assert decoded.digits[2] == bubbles.EMPTY
        assert decoded.status == bubbles.STATUS_NEEDS_REVIEW

    def test_double_filled_column_is_ambiguous(self, template, identity_sheet):
        page = sheets.render_synthetic_sheet(
            template, "0123456", {}, extra_fills=((4, 9),)
        )
        decoded = bubbles.decode_id(identity_sheet(page), template.id_grid)
        assert decoded.digits[4] == bubbles.AMBIGUOUS
        assert decoded.status == bubbles.STATUS_NEEDS_REVIEW


class TestBubbleGridValidation:
    def test_discs_must_stay_inside_rect(self):
        with pytest.raises(ValueError):
            bubbles.BubbleGrid.regular(
                Rect(0, 0, 100, 100), columns=4, radius=9, origin=(5, 5), pitch=(26, 26)
            )

    def test_discs_must_not_overlap(self):
        with pytest.raises(ValueError):
            bubbles.BubbleGrid.regular(
                Rect(0, 0, 300, 300), columns=4, radius=9, origin=(20, 20), pitch=(15, 26)
            )


class TestGenerateCodebook:
    def test_single_code(self):
        book = bubbles.generate_codebook(1, 6, 3, seed=5)
        assert len(book.codes) == 1 and len(book.codes[0]) == 6

    def test_500_codes_meet_min_distance(self):
        book = bubbles.generate_codebook(500, 8, 3, seed=42)
        assert len(book.codes) == 500
        assert len(set(book.codes)) == 500
        assert pairwise_min_distance(book.codes) >= 3

    def test_deterministic_given_seed(self):
        a = bubbles.generate_codebook(50, 8, 3, seed=9)
        b = bubbles.generate_codebook(50, 8, 3, seed=9)
        assert a.codes == b.codes

    def test_budget_exhausted_by_pigeonhole(self):
        with pytest.raises(BudgetExhausted):
            bubbles.generate_codebook(11, 1, 1, seed=0, attempt_budget=5000)

    def test_save_load_round_trip(self, tmp_path):
        book = bubbles.generate_codebook(20, 8, 3, seed=1)
        path = tmp_path / "codes.txt"
        bubbles.save_codebook(book, path)
        loaded = bubbles.load_codebook(path)
        assert loaded == bubbles.Codebook(book.codes, 8, 3, 1)


class TestCorrectId:
    def test_exact_codeword(self):
        book = bubbles.generate_codebook(30, 8, 3, seed=4)
        observed = [int(c) for c in book.codes[7]]
        result = bubbles.correct_id(observed, book)
        assert result.code == book.codes[7]
        assert result.distance == 0
        assert result.status == bubbles.STATUS_OK

    def test_single_column_corruption_recovered(self):
        book = bubbles.generate_codebook(30, 8, 3, seed=4)
        for code in book.codes[:10]:
            observed = [int(c) for c in code]
            observed[3] = (observed[3] + 5) % 10
            result = bubbles.correct_id(observed, book)
            oracle_distance, oracle_ties = nearest_by_scan(observed, book.codes)
            assert result.distance == oracle_distance == 1
            assert [result.code] == oracle_ties == [code]
            assert result.status == bubbles.STATUS_OK

    def test_empty_column_counts_as_mismatch(self):
        book = bubbles.generate_codebook(30, 8, 3, seed=4)
        observed = [int(c) for c in book.codes[0]]
        observed[5] = bubbles.EMPTY
        result = bubbles.correct_id(observed, book)
        assert result.code == book.codes[0]
        assert result.distance == 1
        assert result.status == bubbles.STATUS_OK

    def test_equidistant_tie_needs_review(self):
        book = bubbles.Codebook(codes=("0000", "0011", "1100"), length=4, min_distance=2, seed=0)
        observed = [0, 0, 0, 1]
        oracle_distance, oracle_ties = nearest_by_scan(observed, book.codes)
        assert oracle_distance == 1 and len(oracle_ties) == 2
        result = bubbles.correct_id(observed, book)
        assert result.status == bubbles.STATUS_NEEDS_REVIEW

    def test_empty_codebook(self):
        with pytest.raises(EmptyCodebook):
            bubbles.correct_id([1], bubbles.Codebook((), 1, 1, 0))

    def test_length_mismatch(self):
        book = bubbles.generate_codebook(3, 4, 2, seed=0)
        with pytest.raises(ValueError):
            bubbles.correct_id([1, 2], book)
