"""Core domain types for the loop-closure toolkit.

Everything here is immutable after construction and validates its own
invariants up front; downstream modules assume the checks have already run.
Arrays are copied in and marked read-only, so a constructed value can be
shared between threads freely.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

# Salient descriptors are fixed-length by construction (16 blocks x 8 bins).
SALIENT_DESCRIPTOR_LENGTH = 128
# Default geometric descriptor width; runs may configure a different one.
DEFAULT_GEOM_DESCRIPTOR_LENGTH = 256

_TWO_PI = 2.0 * math.pi


class FeatureFamily(enum.IntEnum):
    """Descriptor family tag. The integer value doubles as the on-disk byte."""

    GEOMETRIC = 0
    SALIENT = 1


def _readonly(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Keypoint:
    """Pixel location (x = column, y = row); sub-pixel values allowed."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("keypoint coordinates must be finite")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"keypoint coordinates must be >= 0, got ({self.x}, {self.y})")


@dataclass(frozen=True)
class GeomDescriptor:
    """Geometric feature descriptor: a finite float vector."""

    values: np.ndarray

    def __post_init__(self):
        arr = _readonly(self.values, np.float32)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("descriptor must be a non-empty 1-D vector")
        if not np.all(np.isfinite(arr)):
            raise ValueError("descriptor values must be finite")
        object.__setattr__(self, "values", arr)

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class SalDescriptor:
    """Salient feature descriptor: 128 integers in [0, 255]."""

    values: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.values)
        if raw.ndim != 1 or raw.shape[0] != SALIENT_DESCRIPTOR_LENGTH:
            raise ValueError(
                f"salient descriptor must have length {SALIENT_DESCRIPTOR_LENGTH}, "
                f"got shape {raw.shape}"
            )
        if not np.issubdtype(raw.dtype, np.integer):
            if not np.all(np.isfinite(raw)) or np.any(raw != np.floor(raw)):
                raise ValueError("salient descriptor values must be integers")
        if np.any(raw < 0) or np.any(raw > 255):
            raise ValueError("salient descriptor values must lie in [0, 255]")
        object.__setattr__(self, "values", _readonly(raw, np.uint8))

    def __len__(self) -> int:
        return SALIENT_DESCRIPTOR_LENGTH


@dataclass(frozen=True)
class FrameFeatures:
    """Keypoints plus parallel descriptors for one frame, one family.

    keypoints is (N, 2) float32 in (x, y) order; descriptors is (N, D) with
    float32 rows for the geometric family and uint8 rows of length 128 for
    the salient family. Rows correspond index-for-index.
    """

    frame_id: int
    family: FeatureFamily
    keypoints: np.ndarray
    descriptors: np.ndarray

    def __post_init__(self):
        if not isinstance(self.frame_id, (int, np.integer)) or isinstance(self.frame_id, bool):
            raise ValueError("frame_id must be an integer")
        if self.frame_id < 0 or self.frame_id >= 2**64:
            raise ValueError(f"frame_id out of range: {self.frame_id}")
        family = FeatureFamily(self.family)

        kps = _readonly(self.keypoints, np.float32)
        if kps.ndim != 2 or kps.shape[1] != 2:
            raise ValueError(f"keypoints must be (N, 2), got {kps.shape}")
        if not np.all(np.isfinite(kps)):
            raise ValueError("keypoint coordinates must be finite")
        if kps.size and np.any(kps < 0):
            raise ValueError("keypoint coordinates must be >= 0")

        desc = np.asarray(self.descriptors)
        if desc.ndim != 2:
            raise ValueError(f"descriptors must be (N, D), got shape {desc.shape}")
        if desc.shape[0] != kps.shape[0]:
            raise ValueError(
                f"keypoint/descriptor count mismatch: {kps.shape[0]} vs {desc.shape[0]}"
            )
        if family is FeatureFamily.SALIENT:
            if desc.shape[1] != SALIENT_DESCRIPTOR_LENGTH:
                raise ValueError(
                    f"salient descriptors must have length {SALIENT_DESCRIPTOR_LENGTH}, "
                    f"got {desc.shape[1]}"
                )
            if np.any(desc < 0) or np.any(desc > 255):
                raise ValueError("salient descriptor values must lie in [0, 255]")
            desc = _readonly(desc, np.uint8)
        else:
            if desc.shape[1] == 0:
                raise ValueError("geometric descriptors must be non-empty vectors")
            desc = _readonly(desc, np.float32)
            if not np.all(np.isfinite(desc)):
                raise ValueError("descriptor values must be finite")

        object.__setattr__(self, "frame_id", int(self.frame_id))
        object.__setattr__(self, "family", family)
        object.__setattr__(self, "keypoints", kps)
        object.__setattr__(self, "descriptors", desc)

    def __len__(self) -> int:
        return self.keypoints.shape[0]

    @property
    def descriptor_length(self) -> int:
        return self.descriptors.shape[1]

    def keypoint(self, i: int) -> Keypoint:
        x, y = self.keypoints[i]
        return Keypoint(float(x), float(y))


@dataclass(frozen=True)
class Heatmap:
    """Dense per-pixel saliency in [0, 1], shape (height, width)."""

    values: np.ndarray

    def __post_init__(self):
        arr = _readonly(self.values, np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"heatmap must be a non-empty 2-D grid, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("heatmap values must be finite")
        if np.any(arr < 0.0) or np.any(arr > 1.0):
            raise ValueError("heatmap values must lie in [0, 1]")
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class GradientField:
    """Per-pixel gradient magnitude (>= 0) and orientation in [0, 2*pi)."""

    magnitude: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        mag = _readonly(self.magnitude, np.float64)
        ori = _readonly(self.orientation, np.float64)
        if mag.ndim != 2 or mag.shape != ori.shape:
            raise ValueError(
                f"magnitude/orientation shapes must match, got {mag.shape} vs {ori.shape}"
            )
        if not (np.all(np.isfinite(mag)) and np.all(np.isfinite(ori))):
            raise ValueError("gradient values must be finite")
        if np.any(mag < 0):
            raise ValueError("gradient magnitude must be >= 0")
        if np.any(ori < 0) or np.any(ori >= _TWO_PI):
            raise ValueError("orientation must lie in [0, 2*pi)")
        object.__setattr__(self, "magnitude", mag)
        object.__setattr__(self, "orientation", ori)

    @property
    def shape(self) -> tuple:
        return self.magnitude.shape


@dataclass(frozen=True)
class DedupParams:
    """Keypoint de-duplication knobs.

    T: squared pixel-distance neighborhood threshold.
    N: neighbor count above which similarity is consulted.
    s_min: mean-cosine cutoff; crowded keypoints above it are dropped.
    """

    T: float = 50.0
    N: int = 10
    s_min: float = 0.6

    def __post_init__(self):
        if not (math.isfinite(self.T) and self.T > 0):
            raise ValueError(f"T must be a positive finite number, got {self.T}")
        if not isinstance(self.N, (int, np.integer)) or isinstance(self.N, bool) or self.N < 0:
            raise ValueError(f"N must be an integer >= 0, got {self.N}")
        if not (-1.0 <= self.s_min <= 1.0):
            raise ValueError(f"s_min must lie in [-1, 1], got {self.s_min}")


@dataclass(frozen=True)
class FusionParams:
    """Similarity fusion knobs: family weights, loop threshold, frame gap."""

    w_s: float = 0.3
    w_g: float = 0.7
    s_th: float = 0.82
    min_frame_gap: int = 10

    def __post_init__(self):
        if not (math.isfinite(self.w_s) and self.w_s >= 0):
            raise ValueError(f"w_s must be >= 0, got {self.w_s}")
        if not (math.isfinite(self.w_g) and self.w_g >= 0):
            raise ValueError(f"w_g must be >= 0, got {self.w_g}")
        if not (0.0 < self.s_th < 1.0):
            raise ValueError(f"s_th must lie in (0, 1), got {self.s_th}")
        if (
            not isinstance(self.min_frame_gap, (int, np.integer))
            or isinstance(self.min_frame_gap, bool)
            or self.min_frame_gap < 0
        ):
            raise ValueError(f"min_frame_gap must be an integer >= 0, got {self.min_frame_gap}")


@dataclass(frozen=True)
class SimilarityScore:
    """Fused similarity s in [0, 1] plus the two BoW distances behind it."""

    s: float
    d_s: float
    d_g: float
    candidate_frame: int

    def __post_init__(self):
        if not (math.isfinite(self.s) and 0.0 <= self.s <= 1.0):
            raise ValueError(f"s must lie in [0, 1], got {self.s}")
        if not (math.isfinite(self.d_s) and self.d_s >= 0):
            raise ValueError(f"d_s must be >= 0, got {self.d_s}")
        if not (math.isfinite(self.d_g) and self.d_g >= 0):
            raise ValueError(f"d_g must be >= 0, got {self.d_g}")
        if (
            not isinstance(self.candidate_frame, (int, np.integer))
            or isinstance(self.candidate_frame, bool)
            or self.candidate_frame < 0
        ):
            raise ValueError(f"candidate_frame must be an integer >= 0")
