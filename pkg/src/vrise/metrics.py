"""Map quality metrics: alteration games, pointing game, SSIM measures, deltas.

Alteration game
    Pixels are ranked by descending saliency (ties resolved in row-major
    order, stably) and flipped in batches of ``step`` between the original
    image and a substrate. Constructive variants start from the substrate and
    copy original pixels in; destructive variants start from the original and
    copy substrate pixels in. The per-step class scores, including the
    starting state, form the game curve; its quality number is the arithmetic
    mean of the curve (higher is better for constructive games, lower for
    destructive ones).

Pointing game
    A map scores a hit when its maximum lies inside the union of the target
    boxes. The maximum is the first one in row-major order: lowest row, then
    lowest column.

SSIM
    Structural similarity with an 11x11 Gaussian window (sigma 1.5),
    stability constants K1=0.01, K2=0.03, covariances normalized by the
    window mass rather than a sample correction, averaged over valid window
    positions only. The dynamic range is taken jointly over both inputs. Two
    identical constant maps compare to 1.0.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np
from skimage.metrics import structural_similarity

from .classifier import Scorer, as_batch
from .masking import gaussian_blur

__all__ = [
    "GameCurve",
    "GAME_VARIANTS",
    "saliency_order",
    "alteration_game",
    "pointing_game",
    "ssim",
    "consistency",
    "convergence",
    "abs_delta",
    "rel_delta",
    "norm_delta",
    "adjust_minimizing",
    "DEFAULT_SUBSTRATE_SIGMA",
]

DEFAULT_SUBSTRATE_SIGMA = 9.0

# variant name -> (constructive?, substrate kind)
GAME_VARIANTS = {
    "insert": (True, "zeros"),
    "sharpen": (True, "blur"),
    "remove": (False, "zeros"),
    "blur": (False, "blur"),
}


@dataclass(frozen=True)
class GameCurve:
    """Recorded scores of one alteration game."""

    variant: str
    scores: np.ndarray  # (ceil(HW/step) + 1,) float64, starting state first
    step: int
    class_id: int

    @property
    def auc(self) -> float:
        """Arithmetic mean of the recorded scores."""
        return float(np.mean(self.scores))


def saliency_order(saliency: np.ndarray) -> np.ndarray:
    """Flat pixel indices, most salient first, row-major on ties.

    A stable sort on the negated values keeps equal-saliency pixels in
    row-major order, which makes game curves reproducible bit-for-bit.
    """
    flat = np.asarray(saliency, dtype=np.float64).ravel()
    return np.argsort(-flat, kind="stable")


def _substrate_for(image: np.ndarray, kind: str, sigma: float) -> np.ndarray:
    if kind == "zeros":
        return np.zeros_like(image)
    if kind == "blur":
        return gaussian_blur(image, sigma)
    raise ValueError(f"unknown substrate kind {kind!r}")


def alteration_game(
    image: np.ndarray,
    saliency: np.ndarray,
    scorer: Scorer,
    class_id: int,
    variant: str,
    step: int = 224,
    substrate_sigma: float = DEFAULT_SUBSTRATE_SIGMA,
    batch_size: int = 64,
) -> GameCurve:
    """Play one alteration game and record the class score at every state.

    The curve has ``ceil(H*W/step) + 1`` entries: the starting state plus one
    per flipped batch of pixels. All states are scored, in order, through the
    scorer in batches of ``batch_size``.
    """
    if variant not in GAME_VARIANTS:
        raise ValueError(f"variant must be one of {sorted(GAME_VARIANTS)}, got {variant!r}")
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    img = np.asarray(image, dtype=np.float32)
    sal = np.asarray(saliency, dtype=np.float64)
    if sal.shape != img.shape[:2]:
        raise ValueError(f"saliency {sal.shape} does not match image {img.shape[:2]}")

    constructive, substrate_kind = GAME_VARIANTS[variant]
    substrate = _substrate_for(img, substrate_kind, substrate_sigma)
    source = img if constructive else substrate  # pixels being copied in
    state = (substrate if constructive else img).copy()

    order = saliency_order(sal)
    h, w = sal.shape
    n_pix = h * w
    n_steps = -(-n_pix // step)  # ceil

    flat_state = state.reshape(n_pix, -1)
    flat_source = source.reshape(n_pix, -1)

    scores = np.empty(n_steps + 1, dtype=np.float64)
    pending: list[np.ndarray] = [state.copy()]
    filled = 0

    def flush() -> None:
        nonlocal filled, pending
        out = scorer.score_batch(as_batch(np.stack(pending)))
        scores[filled : filled + len(pending)] = out[:, class_id].astype(np.float64)
        filled += len(pending)
        pending = []

    for k in range(n_steps):
        idx = order[k * step : (k + 1) * step]
        flat_state[idx] = flat_source[idx]
        pending.append(state.copy())
        if len(pending) >= batch_size:
            flush()
    if pending:
        flush()

    return GameCurve(variant=variant, scores=scores, step=step, class_id=class_id)


def pointing_game(
    saliency: np.ndarray, boxes: "list[tuple[int, int, int, int]]"
) -> bool:
    """True when the map's first maximum lies inside any (x0, y0, x1, y1) box.

    Boxes are end-exclusive. ``argmax`` on the row-major array realizes the
    lowest-row-then-lowest-column tie rule.
    """
    sal = np.asarray(saliency)
    if sal.ndim != 2:
        raise ValueError(f"saliency must be 2-D, got shape {sal.shape}")
    if not boxes:
        raise ValueError("need at least one target box")
    flat_idx = int(np.argmax(sal))
    y, x = divmod(flat_idx, sal.shape[1])
    return any(x0 <= x < x1 and y0 <= y < y1 for (x0, y0, x1, y1) in boxes)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Gaussian-window structural similarity between two maps.

    Dynamic range is ``max(both) - min(both)``; a pair of identical constant
    maps is defined as perfectly similar (1.0) rather than 0/0.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError(f"maps must share a 2-D shape, got {x.shape} vs {y.shape}")
    if min(x.shape) < 11:
        raise ValueError(f"maps must be at least 11x11 for the window, got {x.shape}")
    lo = min(x.min(), y.min())
    hi = max(x.max(), y.max())
    if hi == lo:
        # Both maps are constant. Identical constants are perfectly similar;
        # distinct constants never happen here (range would be nonzero).
        return 1.0
    return float(
        structural_similarity(
            x,
            y,
            win_size=11,
            gaussian_weights=True,
            sigma=1.5,
            K1=0.01,
            K2=0.03,
            use_sample_covariance=False,
            data_range=hi - lo,
        )
    )


def consistency(maps: "list[np.ndarray]") -> np.ndarray:
    """SSIM over all unordered pairs of maps: M*(M-1)/2 values.

    Pair order is deterministic: (0,1), (0,2), ..., (M-2, M-1).
    """
    if len(maps) < 2:
        raise ValueError(f"consistency needs at least 2 maps, got {len(maps)}")
    return np.array([ssim(a, b) for a, b in combinations(maps, 2)], dtype=np.float64)


def convergence(checkpoints: "list[np.ndarray]", final: np.ndarray) -> np.ndarray:
    """SSIM of each intermediate map against the final one, in order."""
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    return np.array([ssim(c, final) for c in checkpoints], dtype=np.float64)


def abs_delta(x: float, r: float) -> float:
    """Absolute improvement of x over reference r."""
    return float(x) - float(r)


def rel_delta(x: float, r: float) -> float:
    """Relative improvement (x - r) / r; the reference must be nonzero."""
    if r == 0:
        raise ValueError("relative delta is undefined for a zero reference")
    return (float(x) - float(r)) / float(r)


def norm_delta(x: float, r: float, eps: float = 1e-6) -> float:
    """Range-normalized improvement, in [-1, 1] for scores in [0, 1].

    Gains are scaled by the headroom above the reference, losses by the
    reference itself; ``eps`` floors the denominator.
    """
    x, r = float(x), float(r)
    if x >= r:
        return (x - r) / max(1.0 - r, eps)
    return (x - r) / max(r, eps)


def adjust_minimizing(score: float) -> float:
    """Flip a lower-is-better quality number so that higher is better."""
    return 1.0 - float(score)
