"""Salient feature extraction: saliency-weighted keypoint sampling plus a
128-byte gradient-histogram descriptor.

Keypoint sampling draws 8x8 patches with probability proportional to their
mean gradient magnitude and refines each drawn patch with a three-level
subdivision selector. Descriptors histogram gradient orientations of a 16x16
region (sixteen 4x4 blocks, 8 bins each), smooth each histogram with a
periodic Catmull-Rom kernel, and min-max quantize to bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    SALIENT_DESCRIPTOR_LENGTH,
    FeatureFamily,
    FrameFeatures,
    GradientField,
    Heatmap,
    Keypoint,
)

PATCH_SIZE = 8
REGION_SIZE = 16  # descriptor support region, REGION_SIZE x REGION_SIZE
BLOCK_SIZE = 4
NUM_BINS = 8
BIN_WIDTH = math.pi / 4.0
SMOOTH_WEIGHT = 0.3
NORM_EPS = 1e-12

_TWO_PI = 2.0 * math.pi


def gaussian_kernel(radius: int, sigma: float) -> np.ndarray:
    """Sampled 1-D Gaussian of 2*radius+1 taps, normalized to sum 1."""
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(image: np.ndarray, radius: int = 2, sigma: float = 1.0) -> np.ndarray:
    """Separable Gaussian blur with clamp-to-edge boundary handling."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale grid, got shape {img.shape}")
    k = gaussian_kernel(radius, sigma)
    padded = np.pad(img, radius, mode="edge")
    rows = np.zeros_like(img)
    for t in range(2 * radius + 1):
        rows += k[t] * padded[t : t + img.shape[0], radius : radius + img.shape[1]]
    padded = np.pad(rows, radius, mode="edge")
    out = np.zeros_like(img)
    for t in range(2 * radius + 1):
        out += k[t] * padded[radius : radius + img.shape[0], t : t + img.shape[1]]
    return out


def gradient_field(grid) -> GradientField:
    """Finite-difference gradient of a heatmap or grayscale image.

    Central differences in the interior, one-sided at the borders.
    Orientation is atan2(gy, gx) mapped into [0, 2*pi); zero-magnitude
    pixels get orientation 0 by convention.
    """
    values = grid.values if isinstance(grid, Heatmap) else np.asarray(grid, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"expected a 2-D grid, got shape {values.shape}")
    if values.shape[0] < 2 or values.shape[1] < 2:
        raise ValueError(f"grid must be at least 2x2 for finite differences, got {values.shape}")
    gy = np.gradient(values.astype(np.float64), axis=0)
    gx = np.gradient(values.astype(np.float64), axis=1)
    magnitude = np.hypot(gx, gy)
    orientation = np.arctan2(gy, gx) % _TWO_PI
    # the modulo can land exactly on 2*pi for tiny negative angles
    orientation[orientation >= _TWO_PI] = 0.0
    orientation[magnitude == 0.0] = 0.0
    return GradientField(magnitude=magnitude, orientation=orientation)


@dataclass(frozen=True)
class PatchWeightTable:
    """Per-patch mean gradient magnitude and the sampling distribution."""

    weights: np.ndarray
    probabilities: np.ndarray
    patch_size: int = PATCH_SIZE

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        p = np.array(self.probabilities, dtype=np.float64)
        if w.ndim != 2 or w.shape != p.shape or w.size == 0:
            raise ValueError("weights and probabilities must be matching non-empty 2-D grids")
        if np.any(w < 0):
            raise ValueError("patch weights must be >= 0")
        if np.any(p < 0):
            raise ValueError("patch probabilities must be >= 0")
        if abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"patch probabilities must sum to 1, got {p.sum()!r}")
        total = w.sum()
        if total > 0 and not np.allclose(p, w / total, rtol=1e-9, atol=1e-15):
            raise ValueError("probabilities must be proportional to weights")
        w.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "probabilities", p)

    @property
    def grid_shape(self) -> tuple:
        return self.weights.shape


@dataclass(frozen=True)
class OrientationHistogram:
    """Raw 8-bin orientation histogram (magnitude mass per direction octant)."""

    bins: np.ndarray

    def __post_init__(self):
        b = np.array(self.bins, dtype=np.float64)
        if b.shape != (NUM_BINS,):
            raise ValueError(f"histogram must have exactly {NUM_BINS} bins, got {b.shape}")
        if not np.all(np.isfinite(b)) or np.any(b < 0):
            raise ValueError("histogram bins must be finite and >= 0")
        b.setflags(write=False)
        object.__setattr__(self, "bins", b)


def patch_weights(grad: GradientField) -> PatchWeightTable:
    """Mean gradient magnitude per 8x8 patch, normalized to a distribution.

    Trailing rows/columns that do not fill a whole patch are dropped. An
    all-zero gradient yields the uniform distribution.
    """
    h, w = grad.shape
    nr, nc = h // PATCH_SIZE, w // PATCH_SIZE
    if nr == 0 or nc == 0:
        raise ValueError(f"gradient grid {grad.shape} smaller than one {PATCH_SIZE}x{PATCH_SIZE} patch")
    cropped = grad.magnitude[: nr * PATCH_SIZE, : nc * PATCH_SIZE]
    weights = cropped.reshape(nr, PATCH_SIZE, nc, PATCH_SIZE).sum(axis=(1, 3))
    weights /= PATCH_SIZE * PATCH_SIZE
    total = weights.sum()
    if total > 0:
        probabilities = weights / total
    else:
        probabilities = np.full_like(weights, 1.0 / weights.size)
    return PatchWeightTable(weights=weights, probabilities=probabilities)


def sample_patches(table: PatchWeightTable, count: int, seed) -> np.ndarray:
    """Draw `count` flat patch indices i.i.d. from the table's distribution."""
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    rng = np.random.default_rng(seed)
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    return rng.choice(table.probabilities.size, size=count, p=table.probabilities.ravel())


def _subdivision_points(mag: np.ndarray, r0: int, c0: int, g: float) -> list:
    """Candidate pixels of one 8x8 patch; thresholds rise per level."""
    patch = mag[r0 : r0 + PATCH_SIZE, c0 : c0 + PATCH_SIZE]
    picks = []
    for level, (size, threshold) in enumerate(((8, g), (4, 1.5 * g), (2, 2.0 * g))):
        for br in range(0, PATCH_SIZE, size):
            for bc in range(0, PATCH_SIZE, size):
                block = patch[br : br + size, bc : bc + size]
                flat = int(np.argmax(block))
                if block.flat[flat] > threshold:
                    picks.append((r0 + br + flat // size, c0 + bc + flat % size))
    seen = set()
    unique = []
    for p in picks:
        if p not in seen:
            seen.add(p)
            unique.append(p)
    return unique


def sample_keypoints(grad: GradientField, table: PatchWeightTable, count: int, seed) -> list:
    """Sample up to `count` keypoints, weighted by patch saliency.

    Patches are drawn i.i.d. from the table; each drawn patch contributes its
    subdivision candidates. Output keypoints are unique pixels in first
    emission order, truncated at `count`; a drawn patch may contribute none.
    """
    h, w = grad.shape
    nr, nc = table.grid_shape
    if nr * table.patch_size > h or nc * table.patch_size > w:
        raise ValueError("weight table does not fit the gradient grid")
    draws = sample_patches(table, count, seed)
    g = float(grad.magnitude.mean())
    cache: dict = {}
    seen = set()
    out = []
    for patch in draws:
        if len(out) >= count:
            break
        patch = int(patch)
        if patch not in cache:
            r0 = (patch // nc) * table.patch_size
            c0 = (patch % nc) * table.patch_size
            cache[patch] = _subdivision_points(grad.magnitude, r0, c0, g)
        for r, c in cache[patch]:
            if (r, c) not in seen:
                seen.add((r, c))
                out.append(Keypoint(x=float(c), y=float(r)))
                if len(out) >= count:
                    break
    return out


def _catmull_rom_periodic(values: np.ndarray, x: float) -> float:
    """Catmull-Rom cubic through the control points, wrapped periodically."""
    n = len(values)
    x = x % n
    i1 = int(math.floor(x))
    t = x - i1
    p0, p1, p2, p3 = (values[(i1 + k - 1) % n] for k in range(4))
    return 0.5 * (
        2.0 * p1
        + (p2 - p0) * t
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t * t
        + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t * t * t
    )


def _build_smoothing_matrix(w: float = SMOOTH_WEIGHT) -> np.ndarray:
    """Matrix form of the histogram smoothing H'[i] = (c(i-w) + c(i+w)) / 2.

    The smoothing is linear in the histogram, so evaluating the interpolant
    on each unit basis vector yields an exact 8x8 operator.
    """
    mat = np.zeros((NUM_BINS, NUM_BINS))
    for j in range(NUM_BINS):
        basis = np.zeros(NUM_BINS)
        basis[j] = 1.0
        for i in range(NUM_BINS):
            mat[i, j] = 0.5 * (
                _catmull_rom_periodic(basis, i - w) + _catmull_rom_periodic(basis, i + w)
            )
    mat.setflags(write=False)
    return mat


SMOOTHING_MATRIX = _build_smoothing_matrix()


def smooth_histogram(hist) -> np.ndarray:
    """Apply the periodic cubic smoothing to one or many 8-bin histograms."""
    bins = hist.bins if isinstance(hist, OrientationHistogram) else np.asarray(hist, np.float64)
    if bins.shape[-1] != NUM_BINS:
        raise ValueError(f"histograms must have {NUM_BINS} bins, got shape {bins.shape}")
    return bins @ SMOOTHING_MATRIX.T


def _descriptor_grids(image: np.ndarray) -> GradientField:
    blurred = gaussian_blur(np.asarray(image, dtype=np.float64), radius=2, sigma=1.0)
    return gradient_field(blurred)


def block_histograms(field: GradientField, keypoints: np.ndarray) -> np.ndarray:
    """Raw per-block orientation histograms, shape (N, 16, 8).

    Each keypoint's 16x16 region (clamped at image borders) is split into
    sixteen 4x4 blocks; every pixel adds its gradient magnitude to the bin
    floor(orientation / (pi/4)) of its block.
    """
    kps = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    h, w = field.shape
    n = kps.shape[0]
    if n == 0:
        return np.zeros((0, REGION_SIZE, NUM_BINS), dtype=np.float64)
    if np.any(kps[:, 0] >= w) or np.any(kps[:, 1] >= h) or np.any(kps < 0):
        raise ValueError("keypoint outside image bounds")

    centers = np.floor(kps + 0.5).astype(np.int64)
    offsets = np.arange(-REGION_SIZE // 2, REGION_SIZE // 2)
    rows = np.clip(centers[:, 1, None] + offsets, 0, h - 1)
    cols = np.clip(centers[:, 0, None] + offsets, 0, w - 1)
    mag = field.magnitude[rows[:, :, None], cols[:, None, :]]
    ori = field.orientation[rows[:, :, None], cols[:, None, :]]

    bins = np.clip(np.floor(ori / BIN_WIDTH).astype(np.int64), 0, NUM_BINS - 1)
    rr, cc = np.meshgrid(np.arange(REGION_SIZE), np.arange(REGION_SIZE), indexing="ij")
    block = (rr // BLOCK_SIZE) * (REGION_SIZE // BLOCK_SIZE) + (cc // BLOCK_SIZE)
    cell = block[None, :, :] * NUM_BINS + bins  # (N, 16, 16) -> flat 128 per keypoint
    flat = (np.arange(n)[:, None, None] * (REGION_SIZE * NUM_BINS) + cell).ravel()
    hist = np.bincount(flat, weights=mag.ravel(), minlength=n * REGION_SIZE * NUM_BINS)
    return hist.reshape(n, REGION_SIZE, NUM_BINS)


def _quantize(raw: np.ndarray) -> np.ndarray:
    """Min-max normalize each 128-vector and round half-up into bytes."""
    flat = raw.reshape(raw.shape[0], -1)
    lo = flat.min(axis=1, keepdims=True)
    hi = flat.max(axis=1, keepdims=True)
    scaled = (flat - lo) / (hi - lo + NORM_EPS) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def salient_descriptors(image: np.ndarray, keypoints: np.ndarray) -> np.ndarray:
    """Descriptors for many keypoints of one image, shape (N, 128) uint8."""
    field = _descriptor_grids(image)
    raw = block_histograms(field, keypoints)
    smoothed = smooth_histogram(raw)
    if raw.shape[0] == 0:
        return np.zeros((0, SALIENT_DESCRIPTOR_LENGTH), dtype=np.uint8)
    return _quantize(smoothed)


def salient_descriptor(image: np.ndarray, k: Keypoint):
    """Single-keypoint convenience wrapper around salient_descriptors."""
    from .core import SalDescriptor

    values = salient_descriptors(image, np.array([[k.x, k.y]]))[0]
    return SalDescriptor(values=values)


def salient_frame_features(image, heatmap: Heatmap, frame_id: int, count: int, seed) -> FrameFeatures:
    """Full salient pipeline for one frame: sample from the heatmap gradient,
    describe from the blurred image gradient."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape != (heatmap.height, heatmap.width):
        raise ValueError(
            f"image shape {img.shape} does not match heatmap "
            f"({heatmap.height}, {heatmap.width})"
        )
    grad = gradient_field(heatmap)
    table = patch_weights(grad)
    kps = sample_keypoints(grad, table, count, seed)
    pts = np.array([[k.x, k.y] for k in kps], dtype=np.float32).reshape(-1, 2)
    descs = salient_descriptors(img, pts)
    return FrameFeatures(
        frame_id=frame_id,
        family=FeatureFamily.SALIENT,
        keypoints=pts,
        descriptors=descs,
    )
