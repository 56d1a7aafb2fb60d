"""Synthetic test batches: template, key bank, roster, and rendered pages.

Everything derives from one seed, so a generated fixture is byte-identical
across runs. Used as the test oracle for the ingest path and as demo data for
the review service.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import SimilarityTransform
from .imaging import save_png
from .sheets import SheetTemplate, load_template, render_synthetic_sheet

DEFAULT_TEMPLATE_DOC = {
    "template_id": "bonus-sheet-a",
    "page_width": 850,
    "page_height": 1100,
    "fiducial_size": 36,
    "fiducials": [[70, 70], [780, 70], [70, 1030]],
    "regions": [
        {"region_id": "id_grid", "kind": "ID_GRID", "rect": [90, 110, 200, 290]},
        {"region_id": "group", "kind": "GROUP", "rect": [380, 110, 120, 60]},
        {"region_id": "version", "kind": "VERSION", "rect": [540, 110, 120, 60]},
        {"region_id": "q1", "kind": "ANSWER_BOX", "question_id": "Q1", "rect": [100, 450, 650, 260]},
        {"region_id": "q2", "kind": "ANSWER_BOX", "question_id": "Q2", "rect": [100, 760, 650, 260]},
    ],
    "id_grid": {
        "region_id": "id_grid",
        "columns": 7,
        "radius": 9,
        "origin": [110, 130],
        "pitch": [26, 26],
    },
}

_QUESTIONS = {
    "Q1": {
        "question": "Compute the limit of (x^2 - 1)/(x - 1) as x approaches 1.",
        "solution": (
            "Factor the numerator: x^2 - 1 = (x - 1)(x + 1). Cancel the common "
            "factor (x - 1) for x != 1, leaving x + 1. The limit as x "
            "approaches 1 is therefore 2."
        ),
        "grading_key": {
            "steps": [
                {"description": "recognising that both numerator and denominator are zero at x = 1", "points": 2},
                {"description": "factoring the numerator as (x - 1)(x + 1)", "points": 3},
                {"description": "cancelling the common factor (x - 1); do not deduct for omitting the x != 1 caveat", "points": 3},
                {"description": "the final value 2", "points": 2},
            ],
            "alt_paths": [
                {
                    "description": "l'Hopital's rule",
                    "steps": [
                        {"description": "recognising the 0/0 indeterminate form", "points": 2},
                        {"description": "justifying that l'Hopital's rule applies", "points": 2},
                        {"description": "differentiating numerator and denominator correctly", "points": 4},
                        {"description": "the final value 2", "points": 2},
                    ],
                }
            ],
        },
    },
    "Q2": {
        "question": "Determine the intervals on which f(x) = x^3 - 3x is increasing.",
        "solution": (
            "f'(x) = 3x^2 - 3 = 3(x - 1)(x + 1). The derivative is positive for "
            "x < -1 and x > 1, so f is increasing on (-inf, -1) and (1, inf)."
        ),
        "grading_key": {
            "steps": [
                {"description": "computing f'(x) = 3x^2 - 3", "points": 3},
                {"description": "finding the roots x = -1 and x = 1 of the derivative", "points": 2},
                {"description": "a correct sign analysis of the derivative", "points": 3},
                {"description": "stating the increasing intervals; do not deduct for open versus closed endpoints", "points": 2},
            ],
            "alt_paths": [
                {
                    "description": "a sign table built directly on the factored derivative",
                    "steps": [
                        {"description": "the factored derivative 3(x - 1)(x + 1)", "points": 3},
                        {"description": "a complete and correct sign table", "points": 4},
                        {"description": "reading off the increasing intervals", "points": 3},
                    ],
                }
            ],
        },
    },
}


def handwriting(shape: tuple[int, int], rng: np.random.Generator, strokes: int = 6) -> np.ndarray:
    """Pseudo-handwriting: a few dark polylines on white, away from the edges."""
    h, w = shape
    canvas = np.full(shape, 255, dtype=np.uint8)
    for _ in range(strokes):
        points = rng.integers((12, 12), (w - 12, h - 12), size=(4, 2))
        for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
            steps = int(max(abs(int(x1) - int(x0)), abs(int(y1) - int(y0)), 1)) * 2
            ts = np.linspace(0, 1, steps)
            xs = (x0 + ts * (int(x1) - int(x0))).astype(int)
            ys = (y0 + ts * (int(y1) - int(y0))).astype(int)
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    canvas[np.clip(ys + dy, 0, h - 1), np.clip(xs + dx, 0, w - 1)] = 30
    return canvas


def random_transform(
    rng: np.random.Generator,
    template: SheetTemplate,
    margin: int = 150,
    max_rotation_deg: float = 5.0,
    max_translation: float = 30.0,
    scale_range: tuple[float, float] = (0.95, 1.05),
) -> tuple[SimilarityTransform, tuple[int, int]]:
    """Plausible scanner placement: small rotation/scale about the page centre."""
    center = (template.page_width / 2, template.page_height / 2)
    transform = SimilarityTransform.about_point(
        center=center,
        scale=float(rng.uniform(*scale_range)),
        rotation=float(np.deg2rad(rng.uniform(-max_rotation_deg, max_rotation_deg))),
        translation=(
            float(rng.uniform(-max_translation, max_translation)) + margin,
            float(rng.uniform(-max_translation, max_translation)) + margin,
        ),
    )
    out_shape = (template.page_height + 2 * margin, template.page_width + 2 * margin)
    return transform, out_shape


def make_roster(count: int, rng: np.random.Generator) -> list[str]:
    numbers = set()
    while len(numbers) < count:
        numbers.add("0" + "".join(str(d) for d in rng.integers(0, 10, 6)))
    return sorted(numbers)


def write_key_bank(root: Path, test_id: str) -> None:
    for qid, content in _QUESTIONS.items():
        q_dir = root / "questions" / test_id / qid
        q_dir.mkdir(parents=True, exist_ok=True)
        (q_dir / "question.txt").write_text(content["question"] + "\n", "utf-8")
        (q_dir / "solution.txt").write_text(content["solution"] + "\n", "utf-8")
        (q_dir / "grading_key.json").write_text(
            json.dumps({"question_id": qid, **content["grading_key"]}, indent=2) + "\n",
            "utf-8",
        )


def build_fixture(
    out_dir: str | Path,
    students: int = 10,
    seed: int = 7,
    test_id: str = "bonus1",
) -> Path:
    """Write a complete synthetic batch ready for `ingest`.

    Layout: template.json, keybank/, roster.csv, pages/*.png, job.json (the
    job configuration), truth.json (page -> student number, for tests).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    template = load_template(DEFAULT_TEMPLATE_DOC)
    (out / "template.json").write_text(
        json.dumps(DEFAULT_TEMPLATE_DOC, indent=2) + "\n", "utf-8"
    )
    write_key_bank(out / "keybank", test_id)

    roster = make_roster(students, rng)
    (out / "roster.csv").write_text(
        "student_number\n" + "".join(f"{n}\n" for n in roster), "utf-8"
    )

    pages_dir = out / "pages"
    pages_dir.mkdir(exist_ok=True)
    truth = {}
    boxes = {box.question_id: box.rect for box in template.answer_boxes}
    for index, number in enumerate(roster):
        contents = {
            qid: handwriting((rect.h, rect.w), rng) for qid, rect in boxes.items()
        }
        transform, out_shape = random_transform(
            rng, template, max_rotation_deg=3.0, max_translation=15.0,
            scale_range=(0.97, 1.03),
        )
        page = render_synthetic_sheet(
            template, number, contents, transform, out_shape=out_shape, fill=0.9
        )
        name = f"page_{index:03d}.png"
        save_png(page, pages_dir / name)
        truth[name] = number
    (out / "truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n", "utf-8")

    config = {
        "template": "template.json",
        "key_bank": "keybank",
        "roster": "roster.csv",
        "pages": "pages",
        "pseudonym_map": "private/pseudonyms.json",
        "pseudonym_salt": f"fixture-salt-{seed}",
        "test_id": test_id,
        "structure": {"tests": 6, "questions_per_test": 2},
        "provider": {"kind": "mock", "model_id": "mock-grader-1", "temperature": None, "seed": seed},
        "pass_count": 5,
        "retries": 3,
        "concurrency": 1,
        "aggregation": "MAX",
        "thresholds": {"spread_max": 3, "variance_max": 2.0},
        "job_dir": "job",
    }
    (out / "job.json").write_text(json.dumps(config, indent=2) + "\n", "utf-8")
    return out
