"""Planar geometry primitives: rectangles and similarity transforms."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle in pixel coordinates, half-open on the far edges."""

    x: int
    y: int
    w: int
    h: int

    @property
    def x1(self) -> int:
        return self.x + self.w

    @property
    def y1(self) -> int:
        return self.y + self.h

    @property
    def area(self) -> int:
        return self.w * self.h

    def contains_rect(self, other: "Rect") -> bool:
        return (
            other.x >= self.x
            and other.y >= self.y
            and other.x1 <= self.x1
            and other.y1 <= self.y1
        )

    def intersects(self, other: "Rect") -> bool:
        return not (
            other.x >= self.x1
            or self.x >= other.x1
            or other.y >= self.y1
            or self.y >= other.y1
        )

    def corners(self) -> np.ndarray:
        """Corner pixel centers, outermost sample positions of the rect."""
        return np.array(
            [
                [self.x, self.y],
                [self.x1 - 1, self.y],
                [self.x1 - 1, self.y1 - 1],
                [self.x, self.y1 - 1],
            ],
            dtype=float,
        )

    def as_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class SimilarityTransform:
    """Maps template coordinates to source coordinates: p' = s * R(theta) * p + t."""

    scale: float = 1.0
    rotation: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls()

    def matrix(self) -> np.ndarray:
        c = math.cos(self.rotation) * self.scale
        s = math.sin(self.rotation) * self.scale
        return np.array([[c, -s], [s, c]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 2) array of (x, y) points."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.matrix().T + np.array([self.tx, self.ty])

    def invert(self) -> "SimilarityTransform":
        inv_scale = 1.0 / self.scale
        c = math.cos(-self.rotation) * inv_scale
        s = math.sin(-self.rotation) * inv_scale
        tx = -(c * self.tx - s * self.ty)
        ty = -(s * self.tx + c * self.ty)
        return SimilarityTransform(inv_scale, -self.rotation, tx, ty)

    @classmethod
    def about_point(
        cls,
        center: tuple[float, float],
        scale: float = 1.0,
        rotation: float = 0.0,
        translation: tuple[float, float] = (0.0, 0.0),
    ) -> "SimilarityTransform":
        """Rotation/scaling about `center` followed by a translation.

        Expressed in the canonical about-the-origin form so transforms stay
        composable and invertible.
        """
        cx, cy = center
        c = math.cos(rotation) * scale
        s = math.sin(rotation) * scale
        tx = cx + translation[0] - (c * cx - s * cy)
        ty = cy + translation[1] - (s * cx + c * cy)
        return cls(scale, rotation, tx, ty)

    def max_displacement(self, points: np.ndarray) -> float:
        mapped = self.apply(points)
        return float(np.max(np.linalg.norm(mapped - np.asarray(points, float), axis=1)))


def fit_similarity(src: np.ndarray, dst: np.ndarray) -> SimilarityTransform:
    """Least-squares similarity transform mapping src points onto dst points.

    Closed form over >= 2 non-coincident point pairs; no reflection component.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.shape[0] < 2:
        raise ValueError("need matching point sets with at least 2 points")
    src_mean = src.mean(axis=0)
    dst_mean = dst.mean(axis=0)
    p = src - src_mean
    q = dst - dst_mean
    denom = float((p * p).sum())
    if denom <= 1e-12:
        raise ValueError("source points are coincident")
    a = float((p * q).sum()) / denom
    b = float((p[:, 0] * q[:, 1] - p[:, 1] * q[:, 0]).sum()) / denom
    scale = math.hypot(a, b)
    rotation = math.atan2(b, a)
    c = a
    s = b
    tx = dst_mean[0] - (c * src_mean[0] - s * src_mean[1])
    ty = dst_mean[1] - (s * src_mean[0] + c * src_mean[1])
    return SimilarityTransform(scale, rotation, float(tx), float(ty))


def max_residual(transform: SimilarityTransform, src: np.ndarray, dst: np.ndarray) -> float:
    mapped = transform.apply(src)
    return float(np.max(np.linalg.norm(mapped - np.asarray(dst, float), axis=1)))
