"""Face-density maps: adaptive Gaussian rendering, counting, and the NFMD file format.

A density map is a grid of non-negative values whose sum is a face count.
Ground truth is rendered by placing one Gaussian per annotated face center,
with a standard deviation that adapts to local crowding (sigma = beta times
the mean distance to the k nearest other faces). Each face's kernel is
truncated, clipped to the image, and renormalized so it contributes exactly
mass 1, which keeps counting-by-integration exact.

NFMD file format (binary, little-endian):
    magic bytes ``NFMD``,
    u32 width, u32 height, u32 downscale factor,
    then width*height IEEE-754 f32 values, row-major.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataFormatError

_NFMD_MAGIC = b"NFMD"
_NFMD_HEADER = struct.Struct("<III")

# Below this sigma the truncation window can miss every cell center, so the
# face degenerates to a unit deposit in its nearest cell.
_DELTA_SIGMA = 1e-6


@dataclass(frozen=True, slots=True)
class KernelSpec:
    """Parameters of the geometry-adaptive Gaussian kernel."""

    beta: float = 0.3
    k: int = 3
    sigma_default: float = 4.0  # fallback for a lone face (no neighbors)
    truncation_radius: float = 3.0  # in multiples of sigma

    def __post_init__(self) -> None:
        if not (self.beta > 0.0):
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not (self.sigma_default > 0.0):
            raise ValueError(f"sigma_default must be positive, got {self.sigma_default}")
        if not (self.truncation_radius > 0.0):
            raise ValueError(
                f"truncation_radius must be positive, got {self.truncation_radius}"
            )


@dataclass(frozen=True)
class PointSet:
    """Face-center points inside an image of the given pixel dimensions."""

    points: tuple[tuple[float, float], ...]
    image_width: int
    image_height: int

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "points", tuple((float(x), float(y)) for x, y in self.points)
        )
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image dimensions must be positive")
        for x, y in self.points:
            if not (math.isfinite(x) and math.isfinite(y)):
                raise ValueError(f"point coordinates must be finite, got ({x}, {y})")
            if not (0.0 <= x < self.image_width and 0.0 <= y < self.image_height):
                raise ValueError(
                    f"point ({x}, {y}) outside [0, {self.image_width}) x "
                    f"[0, {self.image_height})"
                )

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class DensityMap:
    """A (height, width) grid of face density at 1/downscale of image resolution."""

    values: np.ndarray
    downscale: int = 1

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"density values must be 2-D, got shape {self.values.shape}")
        if self.downscale < 1:
            raise ValueError(f"downscale must be >= 1, got {self.downscale}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("density values must be finite")
        if np.any(self.values < 0.0):
            raise ValueError("density values must be non-negative")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def scale(self) -> float:
        """Cells per image pixel."""
        return 1.0 / self.downscale


def adaptive_sigmas(pts: PointSet, spec: KernelSpec = KernelSpec()) -> list[float]:
    """Per-point Gaussian sigma: beta times the mean distance to the nearest neighbors.

    Uses the min(k, N-1) nearest other points. A single isolated point falls
    back to ``spec.sigma_default``.
    """
    n = len(pts)
    if n == 0:
        raise ValueError("adaptive_sigmas requires a non-empty point set")
    if n == 1:
        return [spec.sigma_default]
    coords = np.asarray(pts.points, dtype=np.float64)
    n_neighbors = min(spec.k, n - 1)
    tree = cKDTree(coords)
    # query includes the point itself at distance 0 in column 0
    dists, _ = tree.query(coords, k=n_neighbors + 1)
    mean_dist = dists[:, 1:].mean(axis=1)
    return [spec.beta * d for d in mean_dist]


def render_density(pts: PointSet, spec: KernelSpec = KernelSpec()) -> DensityMap:
    """Render a full-resolution density map; each face contributes exactly mass 1.

    The Gaussian for face i is sampled at cell centers, truncated at
    ``truncation_radius * sigma_i`` per axis, clipped to the image, and then
    renormalized over the surviving cells. Contributions are accumulated in
    input order, so the result is bit-reproducible. An empty point set yields
    an all-zero map.
    """
    h, w = pts.image_height, pts.image_width
    values = np.zeros((h, w), dtype=np.float64)
    if len(pts) == 0:
        return DensityMap(values)

    sigmas = adaptive_sigmas(pts, spec)
    for (x, y), sigma in zip(pts.points, sigmas):
        _add_face(values, x, y, sigma, spec.truncation_radius)
    return DensityMap(values)


def _add_face(values: np.ndarray, x: float, y: float, sigma: float, trunc: float) -> None:
    h, w = values.shape
    if sigma > _DELTA_SIGMA:
        r = trunc * sigma
        # cells whose centers (c + 0.5) fall within +-r of the face center
        c0 = max(0, math.ceil(x - r - 0.5))
        c1 = min(w - 1, math.floor(x + r - 0.5))
        r0 = max(0, math.ceil(y - r - 0.5))
        r1 = min(h - 1, math.floor(y + r - 0.5))
        if c0 <= c1 and r0 <= r1:
            cx = np.arange(c0, c1 + 1, dtype=np.float64) + 0.5 - x
            cy = np.arange(r0, r1 + 1, dtype=np.float64) + 0.5 - y
            g = np.exp(-(cy[:, None] ** 2 + cx[None, :] ** 2) / (2.0 * sigma * sigma))
            total = g.sum()
            if total > 0.0:
                values[r0 : r1 + 1, c0 : c1 + 1] += g / total
                return
    # degenerate kernel: all mass into the cell containing the point
    values[min(h - 1, int(y)), min(w - 1, int(x))] += 1.0


def integrate_count(density: DensityMap) -> float:
    """The face count represented by a map: the sum of all cells."""
    return float(density.values.sum())


def downsample_sum_preserving(density: DensityMap, factor: int) -> DensityMap:
    """Reduce resolution by an integer factor; each output cell sums its block.

    Dimensions that are not multiples of the factor are zero-padded on the
    right/bottom first, so the total sum is preserved exactly.
    """
    if not isinstance(factor, (int, np.integer)) or factor <= 0:
        raise ValueError(f"downsampling factor must be a positive integer, got {factor}")
    if factor == 1:
        return DensityMap(density.values.copy(), density.downscale)
    h, w = density.values.shape
    ph = (-h) % factor
    pw = (-w) % factor
    padded = np.pad(density.values, ((0, ph), (0, pw)))
    hh, ww = padded.shape
    blocks = padded.reshape(hh // factor, factor, ww // factor, factor)
    return DensityMap(blocks.sum(axis=(1, 3)), density.downscale * factor)


def euclidean_loss(pred: Sequence[DensityMap], gt: Sequence[DensityMap]) -> float:
    """Half the mean (over the batch) of the squared L2 distance between map pairs."""
    if len(pred) != len(gt):
        raise ValueError(f"batch lengths differ: {len(pred)} vs {len(gt)}")
    if len(pred) == 0:
        raise ValueError("euclidean_loss requires at least one map pair")
    total = 0.0
    for i, (p, g) in enumerate(zip(pred, gt)):
        if p.values.shape != g.values.shape:
            raise ValueError(
                f"map pair {i} has mismatched shapes: "
                f"{p.values.shape} vs {g.values.shape}"
            )
        diff = p.values - g.values
        total += float(np.sum(diff * diff))
    return total / (2.0 * len(pred))


def write_density(density: DensityMap, path) -> None:
    """Write a map as an NFMD file (f32 payload; see module docstring)."""
    payload = np.ascontiguousarray(density.values, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(_NFMD_MAGIC)
        f.write(_NFMD_HEADER.pack(density.width, density.height, density.downscale))
        f.write(payload)


def read_density(path) -> DensityMap:
    """Read an NFMD file; rejects bad magic, truncated payloads, and invalid values."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _NFMD_MAGIC:
        raise DataFormatError(f"{path}: not an NFMD file (bad magic {data[:4]!r})")
    if len(data) < 4 + _NFMD_HEADER.size:
        raise DataFormatError(f"{path}: truncated NFMD header")
    width, height, downscale = _NFMD_HEADER.unpack_from(data, 4)
    expected = 4 + _NFMD_HEADER.size + 4 * width * height
    if len(data) != expected:
        raise DataFormatError(
            f"{path}: expected {expected} bytes for {width}x{height} map, got {len(data)}"
        )
    if downscale < 1:
        raise DataFormatError(f"{path}: downscale factor must be >= 1, got {downscale}")
    values = np.frombuffer(data, dtype="<f4", offset=4 + _NFMD_HEADER.size)
    values = values.reshape(height, width).astype(np.float64)
    try:
        return DensityMap(values, downscale)
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
