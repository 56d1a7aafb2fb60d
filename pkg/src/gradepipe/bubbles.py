"""Bubble-coded identifier decoding and error-correcting identifier codebooks.

Student numbers are marked as one filled bubble per digit column (10 rows,
digits 0-9). Decoding is deliberately conservative: any column that does not
read as exactly one digit pushes the whole sheet to manual review rather than
risking a misassigned test. Codebooks generate replacement identifiers with a
guaranteed pairwise Hamming distance so single-column read errors become
correctable instead of merely detectable.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BudgetExhausted, EmptyCodebook, OutOfBounds
from .geometry import Rect
from .imaging import DARK_THRESHOLD, dark_mask

DIGIT_ROWS = 10
DEFAULT_FILL_THRESHOLD = 0.35

# Column readings that are not a digit.
EMPTY = "EMPTY"
AMBIGUOUS = "AMBIGUOUS"

STATUS_OK = "OK"
STATUS_NEEDS_REVIEW = "NEEDS_REVIEW"

# CSV/round-trip rendering of non-digit readings.
_READING_CHARS = {EMPTY: "-", AMBIGUOUS: "#"}


@dataclass(frozen=True)
class BubbleGrid:
    """Geometry of the ID bubble grid in template coordinates."""

    columns: int
    radius: float
    rect: Rect
    centers: np.ndarray  # shape (10, columns, 2), template-absolute (x, y)

    @classmethod
    def regular(
        cls,
        rect: Rect,
        columns: int,
        radius: float,
        origin: tuple[float, float],
        pitch: tuple[float, float],
    ) -> "BubbleGrid":
        """Evenly spaced grid: column i, digit d at origin + (i*pitch_x, d*pitch_y)."""
        xs = origin[0] + pitch[0] * np.arange(columns)
        ys = origin[1] + pitch[1] * np.arange(DIGIT_ROWS)
        centers = np.stack(np.meshgrid(xs, ys), axis=-1)  # (10, columns, 2)
        grid = cls(columns=columns, radius=float(radius), rect=rect, centers=centers)
        grid._validate()
        return grid

    def _validate(self) -> None:
        flat = self.centers.reshape(-1, 2)
        r = self.radius
        if (
            (flat[:, 0] - r < self.rect.x).any()
            or (flat[:, 0] + r > self.rect.x1 - 1).any()
            or (flat[:, 1] - r < self.rect.y).any()
            or (flat[:, 1] + r > self.rect.y1 - 1).any()
        ):
            raise ValueError("bubble discs must lie inside the ID grid rectangle")
        dists = np.linalg.norm(flat[:, None, :] - flat[None, :, :], axis=-1)
        np.fill_diagonal(dists, np.inf)
        if (dists < 2 * r).any():
            raise ValueError("bubble discs overlap")


@dataclass(frozen=True)
class DecodedId:
    """Per-column readings plus the raw fill ratios behind them."""

    digits: tuple
    fill_ratios: np.ndarray  # (10, columns)
    status: str

    def digits_string(self) -> str:
        return "".join(
            str(d) if isinstance(d, int) else _READING_CHARS[d] for d in self.digits
        )


def fill_ratio(
    image: np.ndarray,
    center: tuple[float, float],
    radius: float,
    threshold: float = DARK_THRESHOLD,
) -> float:
    """Fraction of disc pixels darker than the binarisation threshold."""
    h, w = image.shape
    cx, cy = center
    if cx - radius < 0 or cx + radius > w - 1 or cy - radius < 0 or cy + radius > h - 1:
        raise OutOfBounds(f"disc at ({cx:.1f}, {cy:.1f}) r={radius} exceeds image {w}x{h}")
    x0, x1 = int(np.floor(cx - radius)), int(np.ceil(cx + radius)) + 1
    y0, y1 = int(np.floor(cy - radius)), int(np.ceil(cy + radius)) + 1
    dist2 = (np.arange(x0, x1) - cx) ** 2 + (np.arange(y0, y1)[:, None] - cy) ** 2
    disc = dist2 <= radius**2
    patch = dark_mask(image[y0:y1, x0:x1], threshold)
    return float(patch[disc].mean())


def decode_column(ratios: Sequence[float], fill_threshold: float):
    """One digit if exactly one bubble clears the threshold; EMPTY/AMBIGUOUS otherwise."""
    hits = [i for i, r in enumerate(ratios) if r >= fill_threshold]
    if len(hits) == 1:
        return hits[0]
    return EMPTY if not hits else AMBIGUOUS


def decode_id(sheet, grid: BubbleGrid, fill_threshold: float = DEFAULT_FILL_THRESHOLD) -> DecodedId:
    """Read the ID grid off an aligned sheet.

    The grid region is rectified once, then every bubble disc is measured in
    template coordinates. Status is OK only when every column reads a single
    digit.
    """
    patch = sheet.extract_rect(grid.rect)
    offset = np.array([grid.rect.x, grid.rect.y], dtype=float)
    ratios = np.zeros((DIGIT_ROWS, grid.columns))
    for col in range(grid.columns):
        for digit in range(DIGIT_ROWS):
            cx, cy = grid.centers[digit, col] - offset
            ratios[digit, col] = fill_ratio(patch, (cx, cy), grid.radius)
    readings = tuple(decode_column(ratios[:, col], fill_threshold) for col in range(grid.columns))
    ok = all(isinstance(r, int) for r in readings)
    return DecodedId(
        digits=readings,
        fill_ratios=ratios,
        status=STATUS_OK if ok else STATUS_NEEDS_REVIEW,
    )


# -- error-correcting identifier codebooks ------------------------------------


@dataclass
class Codebook:
    """Digit-string identifiers with a guaranteed pairwise Hamming distance."""

    codes: tuple[str, ...]
    length: int
    min_distance: int
    seed: int
    _matrix: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def correction_radius(self) -> int:
        return (self.min_distance - 1) // 2

    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = np.array(
                [[ord(c) - ord("0") for c in code] for code in self.codes], dtype=np.uint8
            )
        return self._matrix


def hamming(a: str, b: str) -> int:
    if len(a) != len(b):
        raise ValueError("codes must have equal length")
    return sum(x != y for x, y in zip(a, b))


def generate_codebook(
    n: int,
    length: int,
    min_distance: int,
    seed: int,
    attempt_budget: int | None = None,
) -> Codebook:
    """Greedy randomized construction.

    Uniform random digit strings from the seeded generator are accepted when
    they keep Hamming distance >= min_distance to every accepted code. Output
    is fully determined by the seed.
    """
    if n < 1:
        raise ValueError("need at least one code")
    if not 1 <= min_distance <= length:
        raise ValueError("min_distance must be in 1..length")
    budget = attempt_budget if attempt_budget is not None else max(200 * n, 1000)
    rng = random.Random(seed)
    accepted: list[str] = []
    attempts = 0
    while len(accepted) < n:
        if attempts >= budget:
            raise BudgetExhausted(
                f"found {len(accepted)}/{n} codes within {budget} proposals"
            )
        attempts += 1
        candidate = "".join(rng.choice("0123456789") for _ in range(length))
        if all(hamming(candidate, code) >= min_distance for code in accepted):
            accepted.append(candidate)
    return Codebook(codes=tuple(accepted), length=length, min_distance=min_distance, seed=seed)


@dataclass(frozen=True)
class CorrectionResult:
    code: str
    distance: int
    status: str


def correct_id(observed: Sequence, codebook: Codebook) -> CorrectionResult:
    """Nearest codeword by Hamming distance.

    EMPTY/AMBIGUOUS columns mismatch every digit. OK only when the nearest
    codeword is unique and within the codebook's correction radius.
    """
    if not codebook.codes:
        raise EmptyCodebook("codebook has no codes")
    if len(observed) != codebook.length:
        raise ValueError(
            f"observed length {len(observed)} != codebook length {codebook.length}"
        )
    obs = np.array(
        [d if isinstance(d, (int, np.integer)) else 255 for d in observed], dtype=np.uint8
    )
    distances = (codebook.matrix() != obs).sum(axis=1)
    best = int(np.argmin(distances))
    dist = int(distances[best])
    unique = int((distances == dist).sum()) == 1
    ok = unique and dist <= codebook.correction_radius
    return CorrectionResult(
        code=codebook.codes[best],
        distance=dist,
        status=STATUS_OK if ok else STATUS_NEEDS_REVIEW,
    )


def save_codebook(codebook: Codebook, path: str | Path) -> None:
    lines = [
        f"length={codebook.length} min_distance={codebook.min_distance} seed={codebook.seed}"
    ]
    lines.extend(codebook.codes)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_codebook(path: str | Path) -> Codebook:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError("empty codebook file")
    header = dict(part.split("=", 1) for part in lines[0].split())
    codes = tuple(line.strip() for line in lines[1:] if line.strip())
    return Codebook(
        codes=codes,
        length=int(header["length"]),
        min_distance=int(header["min_distance"]),
        seed=int(header["seed"]),
    )
