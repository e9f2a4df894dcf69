"""Occlusion selector generators and their informativeness guarantees.

A selector is a binary vector with one bit per occlusion cell (1 = cell stays
visible). A selector is *uninformative* when it is all-zero or all-one: the
masked image then carries no information about which region mattered.

Four generator kinds are provided:

* ``threshold``: i.i.d. bits, P(bit=1) = p1. No guarantee; the probability of
  drawing an uninformative selector is ``P_U = p1**n + (1-p1)**n``.
* ``coordinate``: draws cell indices with replacement and sets them. Weak
  guarantee: never all-zero, never all-one (for 0 < p1 < 1); the fill count is
  bounded but not exact because repeated draws can hit the same cell.
* ``permutation``: shuffles the cell indices and takes a prefix. Strong
  guarantee: the fill count is exactly ``ceil(n * p1)``.
* ``hybrid``: a base generator plus a fixer that redraws uninformative
  selectors, applied only when ``P_U`` exceeds a configured threshold.

Requesting ``p1`` of exactly 0 or 1 is treated as an explicit request for a
constant selector: every generator returns it, flagged, and hybrid does not
try to "fix" it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import DOMAIN_FIX, DOMAIN_SELECTOR, derive_rng

__all__ = [
    "OcclusionSelector",
    "GeneratorKind",
    "FixRoundsExhausted",
    "uninformative_probability",
    "threshold_grid",
    "coordinate_grid",
    "permutation_grid",
    "hybrid_grid",
    "generate_selector",
    "generate_batch",
]


class FixRoundsExhausted(RuntimeError):
    """The hybrid replacement loop hit its round cap without an informative draw."""


@dataclass(frozen=True)
class OcclusionSelector:
    """One binary selector plus the bookkeeping evaluation needs."""

    bits: np.ndarray  # (n,) uint8, 1 = visible
    target_p1: float
    requested_uninformative: bool = False  # p1 was exactly 0 or 1

    def __post_init__(self) -> None:
        bits = np.ascontiguousarray(self.bits, dtype=np.uint8)
        if bits.ndim != 1 or bits.size < 1:
            raise ValueError(f"selector bits must be a non-empty vector, got {bits.shape}")
        object.__setattr__(self, "bits", bits)

    @property
    def n_cells(self) -> int:
        return int(self.bits.size)

    @property
    def fill_count(self) -> int:
        return int(self.bits.sum())

    @property
    def fill_rate(self) -> float:
        return self.fill_count / self.n_cells

    @property
    def is_informative(self) -> bool:
        c = self.fill_count
        return 0 < c < self.n_cells

    def as_grid(self, side: int) -> np.ndarray:
        """Reshape to a square (side, side) grid, row-major."""
        if side * side != self.n_cells:
            raise ValueError(f"{self.n_cells} cells do not form a {side}x{side} grid")
        return self.bits.reshape(side, side)


def _validate(n_cells: int, p1: float) -> None:
    if n_cells < 1:
        raise ValueError(f"n_cells must be >= 1, got {n_cells}")
    if not (0.0 <= p1 <= 1.0):
        raise ValueError(f"p1 must lie in [0, 1], got {p1}")


def _constant(n_cells: int, p1: float) -> OcclusionSelector:
    value = 1 if p1 == 1.0 else 0
    return OcclusionSelector(
        bits=np.full(n_cells, value, dtype=np.uint8),
        target_p1=p1,
        requested_uninformative=True,
    )


def uninformative_probability(n_cells: int, p1: float) -> float:
    """P_U: probability that n i.i.d. Bernoulli(p1) bits are constant."""
    _validate(n_cells, p1)
    return p1**n_cells + (1.0 - p1) ** n_cells


def _threshold_bits(n_cells: int, p1: float, rng: np.random.Generator) -> np.ndarray:
    return (rng.random(n_cells) < p1).astype(np.uint8)


def _snap(product: float) -> float:
    """Cell counts are decimal rates times integer totals; the float product
    can land a few ulps past the intended integer (100 * 0.55 is
    55.000000000000007, which a bare ceil turns into 56).  Snapping to nine
    decimals keeps ceil/floor on the decimal intent; only products within
    5e-10 of an integer are affected, far beyond any representable rate's
    genuine offset.
    """
    return round(product, 9)


def _coordinate_bits(n_cells: int, p1: float, rng: np.random.Generator) -> np.ndarray:
    if p1 <= 0.5:
        # ceil(n*p1) draws with replacement; duplicates may land on one cell,
        # so the fill count is at most the draw count (weak guarantee).
        k = math.ceil(_snap(n_cells * p1))
        bits = np.zeros(n_cells, dtype=np.uint8)
        bits[rng.integers(0, n_cells, size=k)] = 1
    else:
        # Inverted: start all-visible and occlude floor(n*(1-p1)) cells.
        # The draw count is clamped to >= 1 so the never-all-one guarantee
        # survives p1 > 1 - 1/n, where the floor would be zero.
        k = max(1, math.floor(_snap(n_cells * (1.0 - p1))))
        bits = np.ones(n_cells, dtype=np.uint8)
        bits[rng.integers(0, n_cells, size=k)] = 0
    return bits


def _permutation_bits(n_cells: int, p1: float, rng: np.random.Generator) -> np.ndarray:
    k = math.ceil(_snap(n_cells * p1))
    bits = np.zeros(n_cells, dtype=np.uint8)
    bits[rng.permutation(n_cells)[:k]] = 1
    return bits


def threshold_grid(
    n_cells: int, p1: float, master_seed: int, draw_index: int = 0
) -> OcclusionSelector:
    """I.i.d. Bernoulli selector. May be uninformative with probability P_U."""
    _validate(n_cells, p1)
    if p1 in (0.0, 1.0):
        return _constant(n_cells, p1)
    rng = derive_rng(master_seed, DOMAIN_SELECTOR, draw_index)
    return OcclusionSelector(bits=_threshold_bits(n_cells, p1, rng), target_p1=p1)


def coordinate_grid(
    n_cells: int, p1: float, master_seed: int, draw_index: int = 0
) -> OcclusionSelector:
    """Weakly guaranteed selector: never all-zero or all-one for 0 < p1 < 1.

    Fill count is at most ``ceil(n*p1)`` for p1 <= 1/2 and at least
    ``n - floor(n*(1-p1))`` for p1 > 1/2 (subject to the >= 1 occlusion
    clamp near p1 = 1, where the stated bound would contradict the
    guarantee itself).
    """
    _validate(n_cells, p1)
    if p1 in (0.0, 1.0):
        return _constant(n_cells, p1)
    rng = derive_rng(master_seed, DOMAIN_SELECTOR, draw_index)
    return OcclusionSelector(bits=_coordinate_bits(n_cells, p1, rng), target_p1=p1)


def permutation_grid(
    n_cells: int, p1: float, master_seed: int, draw_index: int = 0
) -> OcclusionSelector:
    """Strongly guaranteed selector: fill count is exactly ``ceil(n*p1)``.

    The exact count is honored even where it degenerates (e.g. ceil = n for
    p1 close to 1); such selectors are constant and simply not informative.
    """
    _validate(n_cells, p1)
    if p1 in (0.0, 1.0):
        return _constant(n_cells, p1)
    rng = derive_rng(master_seed, DOMAIN_SELECTOR, draw_index)
    return OcclusionSelector(bits=_permutation_bits(n_cells, p1, rng), target_p1=p1)


_BIT_FNS = {
    "threshold": _threshold_bits,
    "coordinate": _coordinate_bits,
    "permutation": _permutation_bits,
}


@dataclass(frozen=True)
class GeneratorKind:
    """A generator configuration, parseable from/printable to a CLI spelling.

    Plain kinds: ``threshold``, ``coordinate``, ``permutation``.
    Hybrid: ``hybrid:<base>:<fixer>:<p_u_threshold>``, e.g.
    ``hybrid:threshold:coordinate:0.0``.
    """

    name: str
    base: "GeneratorKind | None" = None
    fixer: "GeneratorKind | None" = None
    p_u_threshold: float = 0.0

    def __post_init__(self) -> None:
        if self.name == "hybrid":
            if self.base is None or self.fixer is None:
                raise ValueError("hybrid requires both a base and a fixer generator")
            if self.base.name == "hybrid" or self.fixer.name == "hybrid":
                raise ValueError("hybrid generators do not nest")
            if not (0.0 <= self.p_u_threshold <= 1.0):
                raise ValueError(f"p_u_threshold must lie in [0, 1], got {self.p_u_threshold}")
        elif self.name not in _BIT_FNS:
            raise ValueError(f"unknown generator kind {self.name!r}")

    @classmethod
    def threshold(cls) -> "GeneratorKind":
        return cls("threshold")

    @classmethod
    def coordinate(cls) -> "GeneratorKind":
        return cls("coordinate")

    @classmethod
    def permutation(cls) -> "GeneratorKind":
        return cls("permutation")

    @classmethod
    def hybrid(
        cls, base: "GeneratorKind", fixer: "GeneratorKind", p_u_threshold: float = 0.0
    ) -> "GeneratorKind":
        return cls("hybrid", base=base, fixer=fixer, p_u_threshold=p_u_threshold)

    @classmethod
    def parse(cls, text: str) -> "GeneratorKind":
        parts = text.strip().lower().split(":")
        if parts[0] != "hybrid":
            if len(parts) != 1:
                raise ValueError(f"unexpected arguments for generator {parts[0]!r}")
            return cls(parts[0])
        if len(parts) not in (3, 4):
            raise ValueError(
                "hybrid spelling is hybrid:<base>:<fixer>[:<p_u_threshold>], got " + text
            )
        thr = float(parts[3]) if len(parts) == 4 else 0.0
        return cls.hybrid(cls(parts[1]), cls(parts[2]), thr)

    def spell(self) -> str:
        if self.name != "hybrid":
            return self.name
        return f"hybrid:{self.base.name}:{self.fixer.name}:{self.p_u_threshold:g}"

    @property
    def guaranteed(self) -> bool:
        """Whether every draw with 0 < p1 < 1 is informative by construction."""
        if self.name == "hybrid":
            # A hybrid only fixes when P_U exceeds its threshold; with a
            # nonzero threshold small grids can slip through unfixed.
            return self.p_u_threshold == 0.0
        return self.name in ("coordinate", "permutation")


def hybrid_grid(
    base: GeneratorKind,
    fixer: GeneratorKind,
    p_u_threshold: float,
    n_cells: int,
    p1: float,
    master_seed: int,
    batch: int = 1,
) -> list[OcclusionSelector]:
    """Base draws with conditional replacement of uninformative selectors.

    Fixing happens only when ``P_U > p_u_threshold``; otherwise the base
    selectors are returned bit-identical to a standalone base run. Each
    replacement round r for draw i uses its own derived stream
    ``(master_seed, fix-domain, i, r)``, so results do not depend on how many
    other draws needed fixing. Rounds are capped at ``10 * ceil(1/(1-P_U))``;
    exhausting the cap raises :class:`FixRoundsExhausted`.
    """
    kind = GeneratorKind.hybrid(base, fixer, p_u_threshold)  # validates the combo
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    return [_hybrid_single(kind, n_cells, p1, master_seed, i) for i in range(batch)]


def generate_selector(
    kind: GeneratorKind, n_cells: int, p1: float, master_seed: int, draw_index: int = 0
) -> OcclusionSelector:
    """Draw ``draw_index`` of the stream defined by (kind, master_seed).

    Draw i is a pure function of the key, so callers may generate any subset
    of indices, in any order, on any number of workers.
    """
    if kind.name == "hybrid":
        return _hybrid_single(kind, n_cells, p1, master_seed, draw_index)
    _validate(n_cells, p1)
    if p1 in (0.0, 1.0):
        return _constant(n_cells, p1)
    rng = derive_rng(master_seed, DOMAIN_SELECTOR, draw_index)
    return OcclusionSelector(bits=_BIT_FNS[kind.name](n_cells, p1, rng), target_p1=p1)


def _hybrid_single(
    kind: GeneratorKind, n_cells: int, p1: float, master_seed: int, draw_index: int
) -> OcclusionSelector:
    _validate(n_cells, p1)
    if p1 in (0.0, 1.0):
        return _constant(n_cells, p1)
    base_fn = _BIT_FNS[kind.base.name]
    fix_fn = _BIT_FNS[kind.fixer.name]
    p_u = uninformative_probability(n_cells, p1)
    bits = base_fn(n_cells, p1, derive_rng(master_seed, DOMAIN_SELECTOR, draw_index))
    if p_u > kind.p_u_threshold:
        max_rounds = 10 * math.ceil(1.0 / (1.0 - p_u)) if p_u < 1.0 else 0
        rounds = 0
        while bits.sum() in (0, n_cells):
            rounds += 1
            if rounds > max_rounds:
                raise FixRoundsExhausted(
                    f"draw {draw_index}: no informative selector after {max_rounds} "
                    f"replacement rounds (n={n_cells}, p1={p1}, fixer={kind.fixer.name})"
                )
            bits = fix_fn(
                n_cells, p1, derive_rng(master_seed, DOMAIN_FIX, draw_index, rounds)
            )
    return OcclusionSelector(bits=bits, target_p1=p1)


def generate_batch(
    kind: GeneratorKind, n_cells: int, p1: float, master_seed: int, count: int
) -> list[OcclusionSelector]:
    """Draws 0..count-1 of the stream defined by (kind, master_seed)."""
    return [generate_selector(kind, n_cells, p1, master_seed, i) for i in range(count)]
