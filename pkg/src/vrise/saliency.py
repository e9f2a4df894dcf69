"""Saliency map generation from randomized occlusion masks.

The estimator is the same for both mask families: draw N masks, score the
masked image, and average the masks weighted by score over visibility.
Weighting divides each mask's class score by its measured fill rate (its mean
pixel value) for mesh masks, or by the configured p1 for grid masks, so
sparser masks are not penalized for covering less area.

Composition runs in float32 with a fixed, index-ordered accumulation: mask i
is always folded in after mask i-1, regardless of batching or worker count.
Consequences relied on elsewhere:

* results are bit-identical across worker counts, and
* a checkpoint taken at N' masks equals a full run budgeted at N' masks.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .classifier import Scorer, as_batch
from .geometry import InspectedArea, VoronoiMesh, build_meshes
from .gridgen import GeneratorKind, generate_selector
from .masking import Mask, mesh_mask, rise_mask

__all__ = [
    "ParamSet",
    "SaliencyMap",
    "MapRun",
    "MapGenerationError",
    "generate_map",
    "compose",
    "iter_masks",
]

DEFAULT_BATCH = 64


@dataclass(frozen=True)
class ParamSet:
    """Everything that determines the mask stream of a run.

    ``algorithm`` is "vrise" (Voronoi mesh masks, blurred) or "rise"
    (square-grid masks, upsampled and crop-shifted). ``polygons`` is the
    number of occlusion cells; for "rise" it must be a perfect square, the
    grid being its square root on each side. ``meshcount`` is the size of the
    mesh pool for "vrise"; mask i uses mesh ``i mod meshcount``.
    """

    n_masks: int
    polygons: int
    p1: float
    master_seed: int
    algorithm: str = "vrise"
    sigma: float = 0.0
    meshcount: int = 1
    selector: GeneratorKind = field(default_factory=GeneratorKind.threshold)

    def __post_init__(self) -> None:
        if self.algorithm not in ("vrise", "rise"):
            raise ValueError(f"algorithm must be 'vrise' or 'rise', got {self.algorithm!r}")
        if self.n_masks < 1:
            raise ValueError(f"n_masks must be >= 1, got {self.n_masks}")
        if self.polygons < 1:
            raise ValueError(f"polygons must be >= 1, got {self.polygons}")
        if not (0.0 <= self.p1 <= 1.0):
            raise ValueError(f"p1 must lie in [0, 1], got {self.p1}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.meshcount < 1:
            raise ValueError(f"meshcount must be >= 1, got {self.meshcount}")
        if self.algorithm == "rise" and self.grid_side**2 != self.polygons:
            raise ValueError(
                f"rise needs a square cell count, got {self.polygons}"
            )

    @property
    def grid_side(self) -> int:
        return int(math.isqrt(self.polygons))

    def digest(self) -> str:
        """Stable identity of the mask-stream configuration, seed included."""
        return self._digest(with_seed=True)

    def config_digest(self) -> str:
        """Identity of the configuration alone, for keys shared across runs
        whose per-run seeds differ."""
        return self._digest(with_seed=False)

    def _digest(self, with_seed: bool) -> str:
        doc = {
            "algorithm": self.algorithm,
            "n_masks": self.n_masks,
            "polygons": self.polygons,
            "p1": self.p1,
            "sigma": self.sigma,
            "meshcount": self.meshcount,
            "selector": self.selector.spell(),
        }
        if with_seed:
            doc["master_seed"] = self.master_seed
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def describe(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "n_masks": self.n_masks,
            "polygons": self.polygons,
            "p1": self.p1,
            "sigma": self.sigma,
            "meshcount": self.meshcount,
            "selector": self.selector.spell(),
            "master_seed": self.master_seed,
            "digest": self.digest(),
        }


@dataclass(frozen=True)
class SaliencyMap:
    """One composed map for one class."""

    values: np.ndarray  # (H, W) float32
    class_id: int
    masks_used: int
    params: ParamSet
    precision: str = "fp32"

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", np.ascontiguousarray(self.values, dtype=np.float32))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def metadata(self) -> dict:
        return {
            "class_id": self.class_id,
            "masks_used": self.masks_used,
            "precision": self.precision,
            "params": self.params.describe(),
        }


@dataclass
class MapRun:
    """Maps (and any requested checkpoints) for each scored class."""

    maps: dict[int, SaliencyMap]
    checkpoints: dict[int, list[SaliencyMap]]
    class_ids: tuple[int, ...]

    def primary(self) -> SaliencyMap:
        return self.maps[self.class_ids[0]]


class MapGenerationError(RuntimeError):
    """Scoring failed mid-run; checkpoints taken so far ride along."""

    def __init__(self, message: str, checkpoints: dict[int, list[SaliencyMap]], masks_scored: int):
        super().__init__(message)
        self.checkpoints = checkpoints
        self.masks_scored = masks_scored


def compose(masks: "list[np.ndarray]", weights: "list[float]") -> np.ndarray:
    """Weighted mean of masks, folded strictly in list order, in float32."""
    if len(masks) != len(weights) or not masks:
        raise ValueError("need equally many masks and weights, at least one each")
    acc = np.zeros_like(np.asarray(masks[0], dtype=np.float32))
    for m, w in zip(masks, weights):
        acc += np.asarray(m, dtype=np.float32) * np.float32(w)
    return acc / np.float32(len(masks))


def _mesh_pool(params: ParamSet, area: InspectedArea) -> "list[VoronoiMesh]":
    return build_meshes(params.meshcount, params.polygons, area, params.master_seed)


def _mask_at(
    params: ParamSet, area: InspectedArea, meshes: "list[VoronoiMesh] | None", index: int
) -> Mask:
    selector = generate_selector(
        params.selector, params.polygons, params.p1, params.master_seed, index
    )
    if params.algorithm == "rise":
        return rise_mask(selector, params.grid_side, area, params.master_seed, index)
    assert meshes is not None
    m = index % len(meshes)
    return mesh_mask(meshes[m], selector, params.sigma, draw_index=index, mesh_index=m)


def iter_masks(
    params: ParamSet, area: InspectedArea, start: int = 0, stop: "int | None" = None
):
    """Yield masks ``start..stop-1`` of the stream (stop defaults to n_masks).

    Mask i is a pure function of (params, area, i); any slice of the stream
    can be regenerated independently.
    """
    stop = params.n_masks if stop is None else stop
    meshes = _mesh_pool(params, area) if params.algorithm == "vrise" else None
    for i in range(start, stop):
        yield _mask_at(params, area, meshes, i)


def _weights_for(params: ParamSet, fill_rates: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Per-mask, per-class weights: score over visibility, 0 where nothing shows.

    Grid masks divide by the configured p1 (their expected visibility); mesh
    masks divide by each mask's measured post-blur fill rate.
    """
    if params.algorithm == "rise":
        denom = np.full(len(fill_rates), params.p1, dtype=np.float32)
    else:
        denom = fill_rates.astype(np.float32)
    w = np.zeros_like(scores, dtype=np.float32)
    ok = denom > 0.0
    w[ok] = scores[ok] / denom[ok, None]
    return w


def generate_map(
    image: np.ndarray,
    params: ParamSet,
    scorer: Scorer,
    class_ids: "list[int] | None" = None,
    checkpoint_schedule: "list[int] | None" = None,
    workers: int = 1,
    batch_size: int = DEFAULT_BATCH,
) -> MapRun:
    """Estimate saliency of ``image`` for the requested classes.

    ``class_ids`` defaults to the scorer's top class on the unmasked image.
    ``checkpoint_schedule`` lists intermediate mask budgets (ascending); each
    produces a snapshot map equal to a full run with that budget. Workers
    parallelize mask production and scoring only; composition order is fixed.

    Raises :class:`MapGenerationError` if the scorer fails mid-run; snapshots
    taken before the failure are preserved on the exception.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim not in (2, 3):
        raise ValueError(f"image must be (H, W) or (H, W, C), got {img.shape}")
    h, w = img.shape[:2]
    area = InspectedArea(width=w, height=h)
    if workers < 1 or batch_size < 1:
        raise ValueError("workers and batch_size must be >= 1")

    if class_ids is None:
        base = scorer.score_batch(as_batch(img[None]))
        class_ids = [int(np.argmax(base[0]))]
    cls = tuple(int(c) for c in class_ids)
    if not cls:
        raise ValueError("class_ids must not be empty")

    schedule = sorted(set(int(n) for n in (checkpoint_schedule or [])))
    if schedule and (schedule[0] < 1 or schedule[-1] > params.n_masks):
        raise ValueError(f"checkpoints must lie in [1, {params.n_masks}], got {schedule}")

    meshes = _mesh_pool(params, area) if params.algorithm == "vrise" else None

    def produce_and_score(start: int, stop: int):
        count = stop - start
        masks = np.empty((count, h, w), dtype=np.float32)
        fills = np.empty(count, dtype=np.float64)
        for k, i in enumerate(range(start, stop)):
            mk = _mask_at(params, area, meshes, i)
            masks[k] = mk.pixels
            fills[k] = mk.fill_rate
        if img.ndim == 3:
            batch = img[None] * masks[:, :, :, None]
        else:
            batch = (img[None] * masks)[:, :, :, None]
        scores = scorer.score_batch(batch)
        return masks, fills, scores[:, list(cls)].astype(np.float32)

    blocks = [
        (s, min(s + batch_size, params.n_masks)) for s in range(0, params.n_masks, batch_size)
    ]

    acc = np.zeros((len(cls), h, w), dtype=np.float32)
    checkpoints: dict[int, list[SaliencyMap]] = {c: [] for c in cls}
    pending = list(schedule)
    done = 0

    def fold(masks: np.ndarray, fills: np.ndarray, scores: np.ndarray) -> None:
        nonlocal done
        weights = _weights_for(params, fills, scores)  # (count, n_cls)
        for k in range(masks.shape[0]):
            for ci in range(len(cls)):
                acc[ci] += masks[k] * weights[k, ci]
            done += 1
            while pending and done == pending[0]:
                pending.pop(0)
                snap = acc / np.float32(done)
                for ci, c in enumerate(cls):
                    checkpoints[c].append(
                        SaliencyMap(
                            values=snap[ci].copy(),
                            class_id=c,
                            masks_used=done,
                            params=params,
                        )
                    )

    try:
        if workers == 1:
            for start, stop in blocks:
                fold(*produce_and_score(start, stop))
        else:
            # Keep a bounded window of blocks in flight and fold them in
            # submission order, which is mask index order.
            with ThreadPoolExecutor(max_workers=workers) as pool:
                window: deque = deque()
                it = iter(blocks)
                for _ in range(min(len(blocks), workers + 2)):
                    window.append(pool.submit(produce_and_score, *next(it)))
                while window:
                    result = window.popleft().result()
                    nxt = next(it, None)
                    if nxt is not None:
                        window.append(pool.submit(produce_and_score, *nxt))
                    fold(*result)
    except Exception as exc:
        if isinstance(exc, (ValueError, MapGenerationError)):
            raise
        raise MapGenerationError(
            f"scoring failed after {done} masks: {exc}", checkpoints, done
        ) from exc

    final = acc / np.float32(params.n_masks)
    maps = {
        c: SaliencyMap(values=final[ci].copy(), class_id=c, masks_used=params.n_masks, params=params)
        for ci, c in enumerate(cls)
    }
    return MapRun(maps=maps, checkpoints=checkpoints, class_ids=cls)
