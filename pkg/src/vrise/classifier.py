"""Classifier isolation layer.

Saliency generation never touches a model directly; it talks to a *scorer*,
anything with ``score_batch(images) -> scores``. Images arrive as float32
arrays shaped (B, H, W) or (B, H, W, C) with values in [0, 1]; scores come
back as float32 (B, K).

Two scorers live here: a closed-form region oracle used for testing and desk
experiments, and a precision wrapper that simulates half-precision scoring.
The remote scorer speaking the wire protocol lives in :mod:`vrise.wire`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

__all__ = [
    "Scorer",
    "RegionOracleSpec",
    "RegionOracle",
    "HalfScorer",
    "as_batch",
]


@runtime_checkable
class Scorer(Protocol):
    """Batch scoring interface; implementations must be safe to call concurrently."""

    num_classes: int

    def score_batch(self, images: np.ndarray) -> np.ndarray: ...


def as_batch(images: np.ndarray) -> np.ndarray:
    """Normalize scorer input to float32 (B, H, W, C)."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[:, :, :, None]
    if arr.ndim != 4:
        raise ValueError(f"expected (B, H, W) or (B, H, W, C), got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class RegionOracleSpec:
    """Analytic classifier: class 0 responds to brightness inside target regions.

    ``rects`` holds one or more (x0, y0, x1, y1) rectangles in pixels,
    end-exclusive. Class 0's score is ``slope * mean(brightness over the
    union of the rectangles)`` clamped to [0, 1]; the remaining
    ``num_classes - 1`` classes split the leftover probability equally. The
    saliency ground truth is therefore exactly the target region.
    """

    rects: tuple[tuple[int, int, int, int], ...]
    num_classes: int = 2
    slope: float = 1.0

    def __post_init__(self) -> None:
        rects = tuple(tuple(int(v) for v in r) for r in self.rects)
        if not rects:
            raise ValueError("oracle needs at least one rectangle")
        for rect in rects:
            x0, y0, x1, y1 = rect
            if x1 <= x0 or y1 <= y0:
                raise ValueError(f"empty oracle rectangle {rect}")
        object.__setattr__(self, "rects", rects)
        if self.num_classes < 2:
            raise ValueError(f"oracle needs at least 2 classes, got {self.num_classes}")
        if self.slope <= 0:
            raise ValueError(f"slope must be positive, got {self.slope}")

    @classmethod
    def single(
        cls, rect: tuple[int, int, int, int], num_classes: int = 2, slope: float = 1.0
    ) -> "RegionOracleSpec":
        return cls(rects=(tuple(rect),), num_classes=num_classes, slope=slope)


class RegionOracle:
    """Deterministic, pure scorer implementing :class:`RegionOracleSpec`."""

    def __init__(self, spec: RegionOracleSpec):
        self.spec = spec
        self.num_classes = spec.num_classes

    def _region_mask(self, h: int, w: int) -> np.ndarray:
        mask = np.zeros((h, w), dtype=bool)
        for x0, y0, x1, y1 in self.spec.rects:
            if y1 > h or x1 > w:
                raise ValueError(f"oracle rect {(x0, y0, x1, y1)} exceeds image {(h, w)}")
            mask[y0:y1, x0:x1] = True
        return mask

    def score_batch(self, images: np.ndarray) -> np.ndarray:
        batch = as_batch(images)
        region = self._region_mask(batch.shape[1], batch.shape[2])
        bright = batch[:, region, :].mean(axis=(1, 2), dtype=np.float64)
        target = np.clip(self.spec.slope * bright, 0.0, 1.0)
        rest = (1.0 - target) / (self.num_classes - 1)
        scores = np.empty((batch.shape[0], self.num_classes), dtype=np.float32)
        scores[:, 0] = target
        scores[:, 1:] = rest[:, None]
        return scores

    def target_boxes(self) -> list[tuple[int, int, int, int]]:
        """The ground-truth boxes for pointing-game evaluation."""
        return [tuple(r) for r in self.spec.rects]


@dataclass
class HalfScorer:
    """Wraps a scorer and rounds its outputs through IEEE half precision.

    Models the classifier itself running in fp16: scores leave the wrapped
    scorer, get rounded to the nearest representable half (ties to even), and
    come back widened to float32.
    """

    inner: Scorer
    num_classes: int = field(init=False)

    def __post_init__(self) -> None:
        self.num_classes = self.inner.num_classes

    def score_batch(self, images: np.ndarray) -> np.ndarray:
        return self.inner.score_batch(images).astype(np.float16).astype(np.float32)
