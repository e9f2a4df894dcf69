"""Turning binary selections into soft occlusion masks.

Two mask families share this module:

* Grid masks: a small binary grid is bilinearly upsampled past the target
  size and cropped at a random sub-cell indent, yielding smooth masks whose
  cells are exactly ``(C_H, C_W)`` pixels.
* Mesh masks: selected Voronoi cells are rendered at native resolution and
  softened with a Gaussian blur.

Both produce float32 images in [0, 1]. 1 means "visible".
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from .geometry import InspectedArea, VoronoiMesh, rasterize_cells
from .gridgen import OcclusionSelector
from .rng import DOMAIN_SHIFT, derive_rng

__all__ = [
    "Mask",
    "BlurSpec",
    "kernel_edge_length",
    "gaussian_kernel",
    "gaussian_blur",
    "bilinear_upsample",
    "edge_pad",
    "rise_mask",
    "mesh_mask",
]


def kernel_edge_length(sigma: float) -> int:
    """Blur kernel size for a given strength: ``round(8*sigma + 1 - fmod(sigma, 2))``,
    incremented to the next odd number when the rounding lands on an even one.

    Hand anchors: sigma 0.1 -> 3, 3 -> 25, 6 -> 49, 9 -> 73, 12 -> 97,
    15 -> 121, 18 -> 145.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    # floor(x + 0.5): arithmetic half-up rounding, not banker's.
    length = math.floor(8.0 * sigma + 1.0 - math.fmod(sigma, 2.0) + 0.5)
    if length % 2 == 0:
        length += 1
    return max(1, length)


def gaussian_kernel(sigma: float, length: int | None = None) -> np.ndarray:
    """Normalized 1-D Gaussian taps of the configured odd length (float64)."""
    if length is None:
        length = kernel_edge_length(sigma)
    if length % 2 == 0 or length < 1:
        raise ValueError(f"kernel length must be odd and positive, got {length}")
    half = length // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * sigma * sigma))
    return k / k.sum()


@dataclass(frozen=True)
class BlurSpec:
    """Blur strength plus its derived kernel size."""

    sigma: float
    kernel_edge: int

    @classmethod
    def from_sigma(cls, sigma: float) -> "BlurSpec":
        if sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {sigma}")
        edge = 0 if sigma == 0 else kernel_edge_length(sigma)
        return cls(sigma=float(sigma), kernel_edge=edge)


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflected borders, clamped to [0, 1].

    sigma = 0 is the identity. Works on (H, W) or (H, W, C) arrays; channels
    are blurred independently. Border handling reflects without repeating the
    edge sample, so a constant image stays exactly constant.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim not in (2, 3):
        raise ValueError(f"expected (H, W) or (H, W, C), got shape {img.shape}")
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img.copy()
    taps = gaussian_kernel(sigma)
    out = img.astype(np.float64)
    out = convolve1d(out, taps, axis=0, mode="mirror")
    out = convolve1d(out, taps, axis=1, mode="mirror")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def edge_pad(grid: np.ndarray) -> np.ndarray:
    """Clone the last row and column, turning (s, s) into (s+1, s+1)."""
    g = np.asarray(grid)
    return np.pad(g, ((0, 1), (0, 1)), mode="edge")


def bilinear_upsample(image: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel-aligned sampling and edge clamping.

    Output pixel centers map to input coordinates via
    ``x_in = (x_out + 0.5) * (W_in / W_out) - 0.5``; samples beyond the first
    or last input center clamp to it, so corners are preserved under integer
    scale factors.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {img.shape}")
    h_in, w_in = img.shape
    h_out, w_out = out_shape
    if h_out < 1 or w_out < 1:
        raise ValueError(f"output shape must be positive, got {out_shape}")

    def axis_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        lo = np.clip(np.floor(src).astype(np.int64), 0, n_in - 1)
        hi = np.clip(lo + 1, 0, n_in - 1)
        frac = np.clip(src - np.floor(src), 0.0, 1.0)
        # Past the last center the floor equals the clamp target; zero the
        # fraction so the sample reads the edge value exactly.
        frac = np.where(src <= 0.0, 0.0, frac)
        frac = np.where(src >= n_in - 1, 0.0, frac)
        return lo, hi, frac

    ylo, yhi, fy = axis_coords(h_in, h_out)
    xlo, xhi, fx = axis_coords(w_in, w_out)
    top = img[ylo][:, xlo] * (1 - fx)[None, :] + img[ylo][:, xhi] * fx[None, :]
    bot = img[yhi][:, xlo] * (1 - fx)[None, :] + img[yhi][:, xhi] * fx[None, :]
    return (top * (1 - fy)[:, None] + bot * fy[:, None]).astype(np.float32)


@dataclass(frozen=True)
class MaskProvenance:
    """Where a mask came from; enough to reproduce it exactly."""

    source: str  # "grid" or "mesh"
    draw_index: int
    mesh_index: int | None = None
    indent: tuple[int, int] | None = None  # (row, col) for grid masks


@dataclass(frozen=True)
class Mask:
    """A soft occlusion mask over the inspected area."""

    pixels: np.ndarray  # (H, W) float32 in [0, 1]
    fill_rate: float  # mean pixel value, after any smoothing
    provenance: MaskProvenance | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "pixels", np.ascontiguousarray(self.pixels, dtype=np.float32))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def apply(self, image: np.ndarray) -> np.ndarray:
        """Element-wise occlusion of an (H, W) or (H, W, C) image."""
        img = np.asarray(image, dtype=np.float32)
        if img.shape[:2] != self.pixels.shape:
            raise ValueError(f"image {img.shape} does not match mask {self.pixels.shape}")
        if img.ndim == 3:
            return img * self.pixels[:, :, None]
        return img * self.pixels


def rise_mask(
    selector: OcclusionSelector,
    side: int,
    area: InspectedArea,
    master_seed: int,
    draw_index: int = 0,
    indent: tuple[int, int] | None = None,
) -> Mask:
    """Upsample-and-crop mask from a square binary grid.

    With cell sizes ``C_H = floor(H/side)`` and ``C_W = floor(W/side)``, the
    grid is edge-padded to (side+1, side+1), bilinearly upsampled by exactly
    (C_H, C_W), and cropped to (H, W) at a random indent drawn uniformly from
    the cell size (keyed by draw index). Each grid cell therefore spans
    exactly C pixels and a zero indent reproduces the upsampled-padded grid's
    top-left corner verbatim.
    """
    grid = selector.as_grid(side)
    h, w = area.shape
    if side > h or side > w:
        raise ValueError(f"grid side {side} exceeds area {w}x{h}")
    c_h, c_w = h // side, w // side
    up = bilinear_upsample(edge_pad(grid).astype(np.float64), ((side + 1) * c_h, (side + 1) * c_w))

    # For areas divisible by side the indent ranges over the full cell; for
    # ragged sizes the range shrinks so the crop stays in bounds.
    max_row = min(c_h, (side + 1) * c_h - h + 1)
    max_col = min(c_w, (side + 1) * c_w - w + 1)
    if indent is None:
        rng = derive_rng(master_seed, DOMAIN_SHIFT, draw_index)
        indent = (int(rng.integers(0, max_row)), int(rng.integers(0, max_col)))
    row, col = indent
    if not (0 <= row < max_row and 0 <= col < max_col):
        raise ValueError(f"indent {indent} outside [0,{max_row}) x [0,{max_col})")

    pixels = up[row : row + h, col : col + w]
    return Mask(
        pixels=pixels,
        fill_rate=float(pixels.mean(dtype=np.float64)),
        provenance=MaskProvenance(source="grid", draw_index=draw_index, indent=(row, col)),
    )


def mesh_mask(
    mesh: VoronoiMesh,
    selector: OcclusionSelector,
    sigma: float,
    draw_index: int = 0,
    mesh_index: int | None = None,
) -> Mask:
    """Render selected Voronoi cells at native resolution and blur.

    The fill rate is measured on the final soft mask (after blurring), which
    is what the weighting stage divides by.
    """
    hard = rasterize_cells(mesh, selector.bits).astype(np.float32)
    soft = gaussian_blur(hard, sigma)
    return Mask(
        pixels=soft,
        fill_rate=float(soft.mean(dtype=np.float64)),
        provenance=MaskProvenance(source="mesh", draw_index=draw_index, mesh_index=mesh_index),
    )
