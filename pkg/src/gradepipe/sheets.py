"""Answer-sheet templates, page alignment, and anonymised answer-box cropping.

A template declares the printed geometry of one sheet layout at reference
resolution: corner fiducial squares, the ID bubble grid, group/version fields,
and the answer boxes. Scanned pages are registered to the template with a
similarity transform estimated from the detected fiducials, after which any
region can be rectified back into template coordinates. Crops handed to the
grader come exclusively from answer boxes, so identifying regions never leave
the machine.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .bubbles import BubbleGrid
from .errors import (
    DegenerateFiducials,
    FiducialNotFound,
    MalformedTemplate,
    OutOfBounds,
    OverlapViolation,
    ResidualTooLarge,
)
from .geometry import Rect, SimilarityTransform, fit_similarity, max_residual
from .imaging import WHITE, content_hash, dark_mask

DEFAULT_ALIGN_TOLERANCE_PX = 3.0
DEFAULT_FIDUCIAL_SIZE = 36

# Ink values used by the synthetic renderer. Printed guides (bubble outlines,
# box borders) stay above the binarisation threshold so only marks made by a
# pen read as dark.
_INK = 20
_GUIDE_GRAY = 170


class RegionKind(Enum):
    ID_GRID = "ID_GRID"
    GROUP = "GROUP"
    VERSION = "VERSION"
    ANSWER_BOX = "ANSWER_BOX"


IDENTIFYING_KINDS = (RegionKind.ID_GRID, RegionKind.GROUP, RegionKind.VERSION)


@dataclass(frozen=True)
class Region:
    region_id: str
    kind: RegionKind
    rect: Rect
    question_id: str | None = None


@dataclass(frozen=True)
class SheetTemplate:
    template_id: str
    page_width: int
    page_height: int
    fiducials: tuple[tuple[float, float], ...]
    fiducial_size: int
    regions: tuple[Region, ...]
    id_grid: BubbleGrid | None = None

    @property
    def answer_boxes(self) -> tuple[Region, ...]:
        return tuple(r for r in self.regions if r.kind == RegionKind.ANSWER_BOX)

    @property
    def identifying_regions(self) -> tuple[Region, ...]:
        return tuple(r for r in self.regions if r.kind in IDENTIFYING_KINDS)

    def fiducial_points(self) -> np.ndarray:
        return np.array(self.fiducials, dtype=float)

    def digest(self) -> str:
        import hashlib

        doc = json.dumps(template_to_dict(self), sort_keys=True)
        return hashlib.sha256(doc.encode()).hexdigest()


def _collinear(points: np.ndarray, eps: float = 1.0) -> bool:
    """True when no triple of points spans a triangle of area > eps/2."""
    for a, b, c in itertools.combinations(range(len(points)), 3):
        ab = points[b] - points[a]
        ac = points[c] - points[a]
        if abs(ab[0] * ac[1] - ab[1] * ac[0]) > eps:
            return False
    return True


def load_template(source: str | Path | dict) -> SheetTemplate:
    """Parse and validate a template document (JSON file, JSON text, or dict)."""
    if isinstance(source, dict):
        doc = source
    else:
        text = Path(source).read_text(encoding="utf-8") if Path(str(source)).exists() else str(source)
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise MalformedTemplate(f"template is not valid JSON: {exc}") from exc

    try:
        template_id = str(doc["template_id"])
        page_w = int(doc["page_width"])
        page_h = int(doc["page_height"])
        fiducials = tuple((float(x), float(y)) for x, y in doc["fiducials"])
        raw_regions = doc["regions"]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedTemplate(f"missing or malformed template field: {exc}") from exc

    if page_w <= 0 or page_h <= 0:
        raise MalformedTemplate("page dimensions must be positive")

    if len(fiducials) < 3:
        raise DegenerateFiducials(f"need at least 3 fiducials, got {len(fiducials)}")
    if _collinear(np.array(fiducials, dtype=float)):
        raise DegenerateFiducials("fiducials are collinear")

    page = Rect(0, 0, page_w, page_h)
    regions: list[Region] = []
    for raw in raw_regions:
        try:
            kind = RegionKind(raw["kind"])
            rect = Rect(*(int(v) for v in raw["rect"]))
            region = Region(
                region_id=str(raw["region_id"]),
                kind=kind,
                rect=rect,
                question_id=raw.get("question_id"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedTemplate(f"malformed region: {exc}") from exc
        if rect.w <= 0 or rect.h <= 0:
            raise MalformedTemplate(f"region {region.region_id} has non-positive area")
        if not page.contains_rect(rect):
            raise MalformedTemplate(f"region {region.region_id} extends outside the page")
        if (region.question_id is not None) != (kind == RegionKind.ANSWER_BOX):
            raise MalformedTemplate(
                f"region {region.region_id}: question_id is required exactly for answer boxes"
            )
        regions.append(region)

    for box in (r for r in regions if r.kind == RegionKind.ANSWER_BOX):
        for ident in (r for r in regions if r.kind in IDENTIFYING_KINDS):
            if box.rect.intersects(ident.rect):
                raise OverlapViolation(
                    f"answer box {box.region_id} overlaps {ident.region_id}"
                )

    id_grid = None
    if "id_grid" in doc:
        spec = doc["id_grid"]
        grid_region = next(
            (r for r in regions if r.region_id == spec.get("region_id")), None
        )
        if grid_region is None or grid_region.kind != RegionKind.ID_GRID:
            raise MalformedTemplate("id_grid must reference an ID_GRID region")
        try:
            id_grid = BubbleGrid.regular(
                rect=grid_region.rect,
                columns=int(spec["columns"]),
                radius=float(spec["radius"]),
                origin=tuple(spec["origin"]),
                pitch=tuple(spec["pitch"]),
            )
        except (KeyError, ValueError) as exc:
            raise MalformedTemplate(f"invalid id_grid: {exc}") from exc

    return SheetTemplate(
        template_id=template_id,
        page_width=page_w,
        page_height=page_h,
        fiducials=fiducials,
        fiducial_size=int(doc.get("fiducial_size", DEFAULT_FIDUCIAL_SIZE)),
        regions=tuple(regions),
        id_grid=id_grid,
    )


def template_to_dict(template: SheetTemplate) -> dict:
    doc: dict = {
        "template_id": template.template_id,
        "page_width": template.page_width,
        "page_height": template.page_height,
        "fiducial_size": template.fiducial_size,
        "fiducials": [list(p) for p in template.fiducials],
        "regions": [],
    }
    for region in template.regions:
        entry: dict = {
            "region_id": region.region_id,
            "kind": region.kind.value,
            "rect": region.rect.as_list(),
        }
        if region.question_id is not None:
            entry["question_id"] = region.question_id
        doc["regions"].append(entry)
    if template.id_grid is not None:
        grid = template.id_grid
        grid_region = next(
            r for r in template.regions if r.kind == RegionKind.ID_GRID and r.rect == grid.rect
        )
        doc["id_grid"] = {
            "region_id": grid_region.region_id,
            "columns": grid.columns,
            "radius": grid.radius,
            "origin": [float(grid.centers[0, 0, 0]), float(grid.centers[0, 0, 1])],
            "pitch": [
                float(grid.centers[0, 1, 0] - grid.centers[0, 0, 0]) if grid.columns > 1 else 0.0,
                float(grid.centers[1, 0, 1] - grid.centers[0, 0, 1]),
            ],
        }
    return doc


# -- alignment -----------------------------------------------------------------


def _warp(source: np.ndarray, mapping: SimilarityTransform, out_shape: tuple[int, int]) -> np.ndarray:
    """Resample `source` so output pixel p shows source point mapping(p)."""
    a = math.cos(mapping.rotation) * mapping.scale
    b = math.sin(mapping.rotation) * mapping.scale
    matrix = np.array([[a, b], [-b, a]])  # row/col ordering
    return ndimage.affine_transform(
        source,
        matrix,
        offset=(mapping.ty, mapping.tx),
        output_shape=out_shape,
        order=1,
        mode="constant",
        cval=float(WHITE),
    )


@dataclass(frozen=True)
class AlignedSheet:
    """A scanned page registered to its template."""

    page: np.ndarray
    template: SheetTemplate
    transform: SimilarityTransform
    residual: float

    def extract_rect(self, rect: Rect) -> np.ndarray:
        """Rectify a template-coordinate rectangle out of the source page."""
        corners = self.transform.apply(rect.corners())
        h, w = self.page.shape
        if (
            corners[:, 0].min() < 0
            or corners[:, 0].max() > w - 1
            or corners[:, 1].min() < 0
            or corners[:, 1].max() > h - 1
        ):
            raise OutOfBounds(
                f"rect {rect} maps outside the {w}x{h} source image"
            )
        origin = self.transform.apply(np.array([[rect.x, rect.y]], dtype=float))[0]
        mapping = SimilarityTransform(
            self.transform.scale, self.transform.rotation, origin[0], origin[1]
        )
        return _warp(self.page, mapping, (rect.h, rect.w))


def _fiducial_candidates(page: np.ndarray, nominal_area: float) -> np.ndarray:
    """Centroids of dark blobs that look like fiducial squares.

    Filters by area relative to the printed square and by solidity, which
    rejects bubbles, handwriting strokes, and field marks.
    """
    mask = dark_mask(page)
    labels, count = ndimage.label(mask)
    if count == 0:
        return np.empty((0, 2))
    areas = np.bincount(labels.ravel())[1:]
    keep = [i + 1 for i, a in enumerate(areas) if 0.4 * nominal_area <= a <= 2.2 * nominal_area]
    if not keep:
        return np.empty((0, 2))
    slices = ndimage.find_objects(labels)
    candidates = []
    for label in keep:
        sl = slices[label - 1]
        bbox_h = sl[0].stop - sl[0].start
        bbox_w = sl[1].stop - sl[1].start
        aspect = bbox_w / bbox_h
        solidity = areas[label - 1] / (bbox_h * bbox_w)
        if 0.55 <= aspect <= 1.8 and solidity >= 0.55:
            cy, cx = ndimage.center_of_mass(mask, labels, label)
            candidates.append((cx, cy, areas[label - 1]))
    if not candidates:
        return np.empty((0, 2))
    # Largest first; cap the assignment search.
    candidates.sort(key=lambda c: -c[2])
    return np.array([(c[0], c[1]) for c in candidates[:10]])


def align_page(
    page: np.ndarray,
    template: SheetTemplate,
    tolerance_px: float = DEFAULT_ALIGN_TOLERANCE_PX,
) -> AlignedSheet:
    """Estimate the similarity transform registering `template` onto `page`.

    Fiducial blobs are matched to the template's expected markers by trying
    every assignment and keeping the geometrically plausible one with the
    smallest reprojection residual.
    """
    expected = template.fiducial_points()
    nominal_area = float(template.fiducial_size**2)
    candidates = _fiducial_candidates(page, nominal_area)
    if len(candidates) < 3:
        raise FiducialNotFound(
            f"detected {len(candidates)} fiducial candidates, need at least 3"
        )

    best: tuple[float, SimilarityTransform] | None = None
    for assignment in itertools.permutations(range(len(candidates)), len(expected)):
        dst = candidates[list(assignment)]
        transform = fit_similarity(expected, dst)
        if not 0.7 <= transform.scale <= 1.4 or abs(transform.rotation) > 0.35:
            continue
        residual = max_residual(transform, expected, dst)
        if best is None or residual < best[0]:
            best = (residual, transform)
    if best is None:
        raise FiducialNotFound("no geometrically consistent fiducial assignment")
    residual, transform = best
    if residual > tolerance_px:
        raise ResidualTooLarge(f"fiducial residual {residual:.2f}px > {tolerance_px}px")
    return AlignedSheet(page=page, template=template, transform=transform, residual=residual)


def extract_region(sheet: AlignedSheet, region: Region) -> np.ndarray:
    """Rectified sub-image for one template region."""
    return sheet.extract_rect(region.rect)


@dataclass(frozen=True)
class AnswerCrop:
    """Anonymised answer-box image for one (student, question) unit."""

    submission_ref: str
    question_id: str
    image: np.ndarray
    content_hash: str

    @property
    def file_name(self) -> str:
        return f"{self.submission_ref}.png"


def anonymised_crops(sheet: AlignedSheet, pseudonym: str) -> list[AnswerCrop]:
    """One crop per answer box; never touches identifying regions."""
    crops = []
    for box in sheet.template.answer_boxes:
        for ident in sheet.template.identifying_regions:
            # Template validation guarantees this; re-checked because crops
            # leave the trust boundary.
            if box.rect.intersects(ident.rect):
                raise OverlapViolation(
                    f"answer box {box.region_id} overlaps {ident.region_id}"
                )
        image = sheet.extract_rect(box.rect)
        crops.append(
            AnswerCrop(
                submission_ref=f"{pseudonym}_{box.question_id}",
                question_id=box.question_id,
                image=image,
                content_hash=content_hash(image),
            )
        )
    return crops


# -- synthetic rendering (test oracle and demo fixture) -------------------------


def _disc_distances(center, radius, pad=0):
    cx, cy = center
    x0, x1 = int(np.floor(cx - radius)) - pad, int(np.ceil(cx + radius)) + 1 + pad
    y0, y1 = int(np.floor(cy - radius)) - pad, int(np.ceil(cy + radius)) + 1 + pad
    dist2 = (np.arange(x0, x1) - cx) ** 2 + (np.arange(y0, y1)[:, None] - cy) ** 2
    return (y0, y1, x0, x1), dist2


def _draw_disc(canvas: np.ndarray, center: tuple[float, float], radius: float, value: int) -> None:
    (y0, y1, x0, x1), dist2 = _disc_distances(center, radius)
    canvas[y0:y1, x0:x1][dist2 <= radius**2] = value


def _draw_ring(canvas: np.ndarray, center: tuple[float, float], radius: float, value: int) -> None:
    (y0, y1, x0, x1), dist2 = _disc_distances(center, radius, pad=1)
    mask = (dist2 <= radius**2) & (dist2 >= (radius - 1.5) ** 2)
    canvas[y0:y1, x0:x1][mask] = value


def _draw_field_mark(canvas: np.ndarray, rect: Rect) -> None:
    """Dark diagonal stroke standing in for handwritten group/version entries."""
    steps = max(rect.w, rect.h) * 2
    ts = np.linspace(0.0, 1.0, steps)
    xs = rect.x + 6 + ts * (rect.w - 12)
    ys = rect.y + 6 + ts * (rect.h - 12)
    for dx in range(-1, 2):
        for dy in range(-1, 2):
            canvas[
                np.clip(ys.astype(int) + dy, 0, canvas.shape[0] - 1),
                np.clip(xs.astype(int) + dx, 0, canvas.shape[1] - 1),
            ] = _INK


def render_synthetic_sheet(
    template: SheetTemplate,
    id_digits: str,
    box_contents: dict[str, np.ndarray],
    transform: SimilarityTransform | None = None,
    out_shape: tuple[int, int] | None = None,
    fill: float = 0.9,
    extra_fills: tuple[tuple[int, int], ...] = (),
    mark_fields: bool = True,
) -> np.ndarray:
    """Deterministic synthetic scan of one filled-in sheet.

    `id_digits` marks one bubble per column ('-' leaves a column unfilled);
    `extra_fills` adds (column, digit) marks on top, e.g. to double-fill a
    column. `fill` is the inked fraction of the bubble radius. The reference
    page is warped by `transform` into a canvas of `out_shape` (defaults to
    the template's page size, so an identity render is pixel-exact).
    """
    grid = template.id_grid
    if grid is None:
        raise MalformedTemplate("template has no id_grid; cannot render identifiers")
    if len(id_digits) != grid.columns:
        raise ValueError(
            f"id_digits length {len(id_digits)} != grid columns {grid.columns}"
        )

    page = np.full((template.page_height, template.page_width), WHITE, dtype=np.uint8)

    half = template.fiducial_size // 2
    for fx, fy in template.fiducials:
        page[int(fy) - half : int(fy) + half, int(fx) - half : int(fx) + half] = 0

    for col in range(grid.columns):
        for digit in range(10):
            _draw_ring(page, tuple(grid.centers[digit, col]), grid.radius, _GUIDE_GRAY)

    marks = [
        (col, int(ch)) for col, ch in enumerate(id_digits) if ch != "-"
    ] + list(extra_fills)
    for col, digit in marks:
        _draw_disc(page, tuple(grid.centers[digit, col]), grid.radius * fill, _INK)

    if mark_fields:
        for region in template.regions:
            if region.kind in (RegionKind.GROUP, RegionKind.VERSION):
                _draw_field_mark(page, region.rect)

    for box in template.answer_boxes:
        rect = box.rect
        # Printed border sits just outside the box so crops stay content-only.
        page[rect.y - 1, rect.x - 1 : rect.x1 + 1] = _GUIDE_GRAY
        page[rect.y1, rect.x - 1 : rect.x1 + 1] = _GUIDE_GRAY
        page[rect.y - 1 : rect.y1 + 1, rect.x - 1] = _GUIDE_GRAY
        page[rect.y - 1 : rect.y1 + 1, rect.x1] = _GUIDE_GRAY
        content = box_contents.get(box.question_id)
        if content is not None:
            if content.shape != (rect.h, rect.w):
                raise ValueError(
                    f"content for {box.question_id} must be {rect.h}x{rect.w}, "
                    f"got {content.shape}"
                )
            page[rect.y : rect.y1, rect.x : rect.x1] = content

    if (transform is None or transform == SimilarityTransform.identity()) and out_shape is None:
        return page

    transform = transform or SimilarityTransform.identity()
    shape = out_shape or (template.page_height, template.page_width)
    return _warp(page, transform.invert(), shape)
