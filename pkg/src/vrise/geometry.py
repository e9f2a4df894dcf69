"""Random Voronoi meshes over a rectangular inspected area.

A mesh is built from ``n`` interior seed points plus eight auxiliary
"fencepost" seeds placed far outside the area along the extensions of its
diagonals. The fenceposts enclose all interior seeds in their convex hull, so
every interior cell is a finite polygon, while the fencepost cells themselves
never own any pixel of the area.

Rasterization rule (the ground truth all rendering must match): a pixel at
row y, column x belongs to the cell whose seed is nearest to the pixel center
``(x + 0.5, y + 0.5)`` in squared Euclidean distance, ties broken by the
lowest seed index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Voronoi

from .rng import DOMAIN_SEEDS, derive_rng

__all__ = [
    "InspectedArea",
    "SeedSet",
    "VoronoiMesh",
    "fencepost_points",
    "generate_seeds",
    "grid_seed_points",
    "build_mesh",
    "build_random_mesh",
    "build_meshes",
    "rasterize_cells",
    "polygon_area",
    "clip_polygon_to_rect",
]

# Cap on the (rows * width * seeds) float64 distance block, in elements.
_CHUNK_ELEMENTS = 8_000_000


@dataclass(frozen=True)
class InspectedArea:
    """The rectangle under inspection, in pixel units."""

    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"area must be at least 1x1, got {self.width}x{self.height}")

    @property
    def shape(self) -> tuple[int, int]:
        """(height, width), the numpy array shape of a rendered mask."""
        return (self.height, self.width)

    @property
    def center(self) -> tuple[float, float]:
        return (self.width / 2.0, self.height / 2.0)

    @property
    def circumradius(self) -> float:
        """Half the diagonal: radius of the smallest center-circle covering the area."""
        return 0.5 * math.hypot(self.width, self.height)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of points (..., 2) lying inside [0, W) x [0, H)."""
        pts = np.asarray(points, dtype=np.float64)
        return (
            (pts[..., 0] >= 0.0)
            & (pts[..., 0] < self.width)
            & (pts[..., 1] >= 0.0)
            & (pts[..., 1] < self.height)
        )


def fencepost_points(area: InspectedArea, epsilon: float = 1.0) -> np.ndarray:
    """Eight auxiliary seeds guaranteeing finite interior cells.

    Two points per diagonal direction, at distances ``3r`` and ``3r + epsilon``
    from the area center, where ``r`` is the area circumradius. The doubled
    points per direction make the convex hull consist of the four outer posts
    alone, so every inner post (and a fortiori every interior seed) gets a
    finite cell. Distance 3r keeps fencepost cells strictly outside the area:
    any area pixel is within r of the center, so an interior seed is always
    nearer than a post.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    cx, cy = area.center
    r = area.circumradius
    out = []
    for dx, dy in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
        ux, uy = dx / math.sqrt(2.0), dy / math.sqrt(2.0)
        for dist in (3.0 * r, 3.0 * r + epsilon):
            out.append((cx + dist * ux, cy + dist * uy))
    return np.array(out, dtype=np.float64)


@dataclass(frozen=True)
class SeedSet:
    """Interior seeds plus the fencepost seeds that close their cells."""

    interior: np.ndarray  # (n, 2) float64, inside the area
    fenceposts: np.ndarray  # (8, 2) float64

    def __post_init__(self) -> None:
        interior = np.asarray(self.interior, dtype=np.float64)
        if interior.ndim != 2 or interior.shape[1] != 2 or interior.shape[0] < 1:
            raise ValueError(f"interior seeds must be (n>=1, 2), got {interior.shape}")
        object.__setattr__(self, "interior", interior)
        object.__setattr__(self, "fenceposts", np.asarray(self.fenceposts, dtype=np.float64))

    @property
    def n_interior(self) -> int:
        return int(self.interior.shape[0])

    @property
    def all_points(self) -> np.ndarray:
        """Interior seeds first (indices 0..n-1), fenceposts after (n..n+7)."""
        return np.concatenate([self.interior, self.fenceposts], axis=0)


def generate_seeds(
    n: int, area: InspectedArea, master_seed: int, mesh_index: int = 0
) -> SeedSet:
    """Sample ``n`` interior seeds uniformly over the area.

    The stream is keyed by ``(master_seed, mesh_index)`` so a batch of meshes
    can be built in any order, or in parallel, with identical results.
    """
    if n < 1:
        raise ValueError(f"need at least one interior seed, got {n}")
    rng = derive_rng(master_seed, DOMAIN_SEEDS, mesh_index)
    pts = np.empty((n, 2), dtype=np.float64)
    pts[:, 0] = rng.uniform(0.0, area.width, size=n)
    pts[:, 1] = rng.uniform(0.0, area.height, size=n)
    return SeedSet(interior=pts, fenceposts=fencepost_points(area))


def grid_seed_points(side: int, area: InspectedArea) -> SeedSet:
    """Seeds at the centers of a regular side x side grid of cells.

    A mesh built from these seeds tiles the area into near-rectangular cells,
    which makes Voronoi rendering directly comparable with grid-based masks.
    """
    if side < 1:
        raise ValueError(f"grid side must be >= 1, got {side}")
    xs = (np.arange(side) + 0.5) * (area.width / side)
    ys = (np.arange(side) + 0.5) * (area.height / side)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    return SeedSet(interior=pts, fenceposts=fencepost_points(area))


def polygon_area(vertices: np.ndarray) -> float:
    """Unsigned shoelace area of a simple polygon (k, 2)."""
    v = np.asarray(vertices, dtype=np.float64)
    if v.shape[0] < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _cut_x(a: tuple[float, float], b: tuple[float, float], x: float) -> tuple[float, float]:
    t = (x - a[0]) / (b[0] - a[0])
    return (x, a[1] + t * (b[1] - a[1]))


def _cut_y(a: tuple[float, float], b: tuple[float, float], y: float) -> tuple[float, float]:
    t = (y - a[1]) / (b[1] - a[1])
    return (a[0] + t * (b[0] - a[0]), y)


def clip_polygon_to_rect(
    vertices: np.ndarray, width: float, height: float
) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex polygon against [0,W] x [0,H].

    Returns the clipped vertex loop, possibly empty when the polygon lies
    entirely outside the rectangle.
    """
    poly = [tuple(map(float, p)) for p in np.asarray(vertices, dtype=np.float64)]

    edges = (
        lambda p: p[0] >= 0.0,
        lambda p: p[0] <= width,
        lambda p: p[1] >= 0.0,
        lambda p: p[1] <= height,
    )
    cuts = (
        lambda a, b: _cut_x(a, b, 0.0),
        lambda a, b: _cut_x(a, b, width),
        lambda a, b: _cut_y(a, b, 0.0),
        lambda a, b: _cut_y(a, b, height),
    )
    for inside, cut in zip(edges, cuts):
        if not poly:
            break
        nxt: list[tuple[float, float]] = []
        for i, cur in enumerate(poly):
            prev = poly[i - 1]
            cur_in, prev_in = inside(cur), inside(prev)
            if cur_in:
                if not prev_in:
                    nxt.append(cut(prev, cur))
                nxt.append(cur)
            elif prev_in:
                nxt.append(cut(prev, cur))
        poly = nxt
    return np.array(poly, dtype=np.float64).reshape(-1, 2)


@dataclass
class VoronoiMesh:
    """A Voronoi tessellation restricted to an inspected area.

    ``cells[i]`` is the polygon of interior seed i clipped to the area
    rectangle (fencepost cells are not represented; they never reach the
    area). ``ownership`` maps each pixel to the interior seed index owning it.
    """

    area: InspectedArea
    seeds: SeedSet
    cells: list[np.ndarray] = field(repr=False)
    ownership: np.ndarray = field(repr=False)  # (H, W) int32, values in [0, n)

    @property
    def n_cells(self) -> int:
        return self.seeds.n_interior

    def cell_areas(self) -> np.ndarray:
        return np.array([polygon_area(c) for c in self.cells], dtype=np.float64)

    def pixel_counts(self) -> np.ndarray:
        """Pixels owned per cell; sums to H*W."""
        return np.bincount(self.ownership.ravel(), minlength=self.n_cells).astype(np.int64)


def _ownership_map(points: np.ndarray, n_interior: int, area: InspectedArea) -> np.ndarray:
    """Nearest-seed index per pixel center, exactly per the rasterization rule.

    Chunked brute force over all seeds: squared distances in float64,
    ``argmin`` row-wise. ``argmin`` returns the first minimum, which IS the
    lowest-index tie rule, so no epsilon fudging is involved.
    """
    h, w = area.shape
    sx = points[:, 0]
    sy = points[:, 1]
    xs = np.arange(w, dtype=np.float64) + 0.5
    ys = np.arange(h, dtype=np.float64) + 0.5
    dx2 = (xs[:, None] - sx[None, :]) ** 2  # (W, S), shared by every row
    owner = np.empty((h, w), dtype=np.int32)
    rows = max(1, _CHUNK_ELEMENTS // max(1, w * points.shape[0]))
    for y0 in range(0, h, rows):
        y1 = min(y0 + rows, h)
        dy2 = (ys[y0:y1, None] - sy[None, :]) ** 2  # (rows, S)
        d2 = dy2[:, None, :] + dx2[None, :, :]  # (rows, W, S)
        owner[y0:y1] = np.argmin(d2, axis=2).astype(np.int32)
    if owner.max() >= n_interior:
        raise AssertionError("fencepost seed owns an area pixel; geometry invariant broken")
    return owner


def build_mesh(seeds: SeedSet, area: InspectedArea) -> VoronoiMesh:
    """Tessellate and rasterize. Raises ValueError on duplicate seed points."""
    points = seeds.all_points
    # Qhull degenerates on coincident sites; reject them up front.
    _, counts = np.unique(points, axis=0, return_counts=True)
    if np.any(counts > 1):
        raise ValueError("duplicate seed points are not allowed")

    vor = Voronoi(points)
    n = seeds.n_interior
    cells: list[np.ndarray] = []
    for i in range(n):
        region = vor.regions[vor.point_region[i]]
        if -1 in region or len(region) == 0:
            # The fencepost construction makes this impossible for interior
            # seeds; reaching it means the seed set violated its contract.
            raise AssertionError(f"interior seed {i} produced an unbounded cell")
        poly = vor.vertices[region]
        cells.append(clip_polygon_to_rect(poly, float(area.width), float(area.height)))

    ownership = _ownership_map(points, n, area)
    return VoronoiMesh(area=area, seeds=seeds, cells=cells, ownership=ownership)


def build_random_mesh(
    n: int, area: InspectedArea, master_seed: int, mesh_index: int = 0
) -> VoronoiMesh:
    return build_mesh(generate_seeds(n, area, master_seed, mesh_index), area)


def build_meshes(
    count: int, n: int, area: InspectedArea, master_seed: int
) -> list[VoronoiMesh]:
    """The mesh pool for a run; mesh m is keyed by (master_seed, m)."""
    return [build_random_mesh(n, area, master_seed, m) for m in range(count)]


def rasterize_cells(mesh: VoronoiMesh, selected: np.ndarray) -> np.ndarray:
    """Render a cell-selection vector to a binary (H, W) image.

    ``selected`` holds one flag per interior cell; pixels of cells with a
    truthy flag become 1, the rest 0.
    """
    sel = np.asarray(selected)
    if sel.shape != (mesh.n_cells,):
        raise ValueError(
            f"selection must have one entry per cell ({mesh.n_cells}), got shape {sel.shape}"
        )
    lut = (sel != 0).astype(np.uint8)
    return lut[mesh.ownership]
