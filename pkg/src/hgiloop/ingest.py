"""Dataset ingestion: sequence manifests, the binary feature interchange
format, PGM heatmaps, classical fallback feature backends, and a synthetic
loop-closure sequence generator for desk-scale testing.

File formats (all little-endian unless stated):

Feature file, magic "HGIF":
  header: magic 4s, version u32 (=1), family u8 (0 geometric / 1 salient),
          frame_id u64, keypoint count u32, descriptor length u32,
          descriptor element type u8 (0 = f32, 1 = u8)
  body:   count * (f32 x, f32 y), then count descriptor rows of
          length * elem_size bytes, row-major.

Heatmap: binary PGM (P5), 8-bit or 16-bit; 16-bit rasters are big-endian
per the PGM convention. Values scale to [0, 1] by the header maxval.
ASCII PGM (P2) is rejected.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy.ndimage import maximum_filter

from .core import (
    DEFAULT_GEOM_DESCRIPTOR_LENGTH,
    FeatureFamily,
    FrameFeatures,
    Heatmap,
)
from .evalkit import (
    LoopLabelSet,
    Trajectory,
    derive_loop_labels,
    write_loop_labels,
    write_trajectory,
)
from .sal_features import gaussian_blur, gradient_field, salient_descriptors

HARRIS_K = 0.04
HARRIS_NMS_RADIUS = 4
HARRIS_REL_THRESHOLD = 0.01
IMAGE_SUFFIXES = (".png", ".pgm")


class FeatureFileError(ValueError):
    """Base class for malformed feature files."""


class BadMagicError(FeatureFileError):
    pass


class VersionMismatchError(FeatureFileError):
    pass


class TruncatedBodyError(FeatureFileError):
    pass


class SizeMismatchError(FeatureFileError):
    pass


class HeatmapFormatError(ValueError):
    """Raised when a heatmap file is not a valid binary PGM."""


_HGIF_MAGIC = b"HGIF"
_HGIF_VERSION = 1
_HGIF_HEADER = struct.Struct("<4sIBQIIB")
_ELEM_F32 = 0
_ELEM_U8 = 1


def write_feature_file(path, frame: FrameFeatures) -> None:
    """Serialize one frame's features; geometric rows as f32, salient as u8."""
    if frame.family is FeatureFamily.SALIENT:
        elem = _ELEM_U8
        desc = np.ascontiguousarray(frame.descriptors, dtype=np.uint8)
    else:
        elem = _ELEM_F32
        desc = np.ascontiguousarray(frame.descriptors, dtype="<f4")
    kps = np.ascontiguousarray(frame.keypoints, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(
            _HGIF_HEADER.pack(
                _HGIF_MAGIC,
                _HGIF_VERSION,
                int(frame.family),
                frame.frame_id,
                len(frame),
                frame.descriptor_length,
                elem,
            )
        )
        fh.write(kps.tobytes())
        fh.write(desc.tobytes())


def read_feature_file(path) -> FrameFeatures:
    """Parse a feature file back into FrameFeatures, bit-exactly."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HGIF_HEADER.size:
        raise TruncatedBodyError(f"{path}: shorter than the fixed header")
    magic, version, family, frame_id, count, length, elem = _HGIF_HEADER.unpack_from(data, 0)
    if magic != _HGIF_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != _HGIF_VERSION:
        raise VersionMismatchError(f"{path}: unsupported version {version}")
    try:
        fam = FeatureFamily(family)
    except ValueError:
        raise FeatureFileError(f"{path}: unknown family byte {family}") from None
    if elem not in (_ELEM_F32, _ELEM_U8):
        raise FeatureFileError(f"{path}: unknown element type {elem}")
    expected_elem = _ELEM_U8 if fam is FeatureFamily.SALIENT else _ELEM_F32
    if elem != expected_elem:
        raise SizeMismatchError(
            f"{path}: family {fam.name} requires element type {expected_elem}, got {elem}"
        )
    elem_size = 4 if elem == _ELEM_F32 else 1
    body = len(data) - _HGIF_HEADER.size
    expected = count * (8 + length * elem_size)
    if body < expected:
        raise TruncatedBodyError(f"{path}: body has {body} bytes, header implies {expected}")
    if body > expected:
        raise SizeMismatchError(f"{path}: {body - expected} trailing bytes beyond the header's count")

    off = _HGIF_HEADER.size
    kps = np.frombuffer(data, dtype="<f4", count=2 * count, offset=off).reshape(count, 2).copy()
    off += 8 * count
    dtype = "<f4" if elem == _ELEM_F32 else np.uint8
    desc = (
        np.frombuffer(data, dtype=dtype, count=count * length, offset=off)
        .reshape(count, length)
        .copy()
    )
    return FrameFeatures(frame_id=frame_id, family=fam, keypoints=kps, descriptors=desc)


def _pnm_header(data: bytes, path) -> tuple:
    """Parse 'P5 <w> <h> <maxval>' honoring '#' comments; returns fields plus
    the raster offset."""
    if data[:2] == b"P2":
        raise HeatmapFormatError(f"{path}: ASCII PGM (P2) is not supported, use binary P5")
    if data[:2] != b"P5":
        raise HeatmapFormatError(f"{path}: not a binary PGM (magic {data[:2]!r})")
    fields = []
    pos = 2
    while len(fields) < 3:
        if pos >= len(data):
            raise HeatmapFormatError(f"{path}: truncated PGM header")
        c = data[pos : pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise HeatmapFormatError(f"{path}: unterminated comment in header")
            pos = nl + 1
        elif c.isdigit():
            start = pos
            while pos < len(data) and data[pos : pos + 1].isdigit():
                pos += 1
            fields.append(int(data[start:pos]))
        else:
            raise HeatmapFormatError(f"{path}: unexpected byte {c!r} in header")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise HeatmapFormatError(f"{path}: missing whitespace before raster")
    pos += 1
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise HeatmapFormatError(f"{path}: bad dimensions {width}x{height}")
    if not 0 < maxval < 65536:
        raise HeatmapFormatError(f"{path}: maxval {maxval} out of range")
    return width, height, maxval, pos


def _read_pgm_raster(path) -> tuple:
    data = Path(path).read_bytes()
    width, height, maxval, pos = _pnm_header(data, path)
    two_byte = maxval > 255
    need = width * height * (2 if two_byte else 1)
    raster = data[pos:]
    if len(raster) < need:
        raise HeatmapFormatError(f"{path}: raster has {len(raster)} bytes, expected {need}")
    if len(raster) > need:
        raise HeatmapFormatError(f"{path}: {len(raster) - need} trailing bytes after raster")
    dtype = ">u2" if two_byte else np.uint8  # 16-bit PGM is big-endian
    values = np.frombuffer(raster, dtype=dtype).reshape(height, width)
    return values, maxval


def read_heatmap(path) -> Heatmap:
    """Load a binary PGM heatmap, scaled to [0, 1] by its maxval."""
    values, maxval = _read_pgm_raster(path)
    return Heatmap(values=values.astype(np.float64) / maxval)


def write_heatmap(path, heatmap: Heatmap, maxval: int = 65535) -> None:
    if not 0 < maxval < 65536:
        raise ValueError(f"maxval must be in [1, 65535], got {maxval}")
    quant = np.floor(heatmap.values * maxval + 0.5)
    dtype = ">u2" if maxval > 255 else np.uint8
    raster = quant.astype(dtype)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{heatmap.width} {heatmap.height}\n{maxval}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(raster).tobytes())


def write_image_pgm(path, image: np.ndarray) -> None:
    """Write an 8-bit grayscale image as binary PGM."""
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("expected a 2-D uint8 image")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def load_image(path) -> np.ndarray:
    """Load a grayscale image (8-bit PGM or PNG; color PNG by luminance)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        values, maxval = _read_pgm_raster(path)
        if maxval > 255:
            raise ValueError(f"{path}: image PGM must be 8-bit (maxval <= 255)")
        return values.astype(np.uint8)
    if suffix == ".png":
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    raise ValueError(f"{path}: unsupported image format {suffix!r}")


@dataclass(frozen=True)
class SequenceManifest:
    """Ordered monocular image list plus optional sibling artifacts."""

    root: Path
    entries: tuple  # ((frame_id, relative path), ...) dense from 0
    heatmap_dir: Optional[Path] = None
    feature_dir: Optional[Path] = None
    gt_pose_file: Optional[Path] = None

    def __post_init__(self):
        ids = [fid for fid, _ in self.entries]
        if ids != list(range(len(ids))):
            raise ValueError("manifest frame ids must be dense from 0")
        for _, rel in self.entries:
            if not (self.root / rel).is_file():
                raise ValueError(f"manifest references missing file {self.root / rel}")

    def __len__(self) -> int:
        return len(self.entries)

    def image_path(self, frame_id: int) -> Path:
        return self.root / self.entries[frame_id][1]


def _list_images(directory: Path) -> list:
    return [p.name for p in directory.iterdir()
            if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES]


def read_sequence(root, layout: str = "flat") -> SequenceManifest:
    """Build a manifest for a dataset directory.

    layout "kitti_like" reads root/image_0 (never image_1: the pipeline is
    monocular), "euroc_like" reads root/cam0/data ordered by the numeric
    timestamp in each file name, "flat" reads image files in root itself,
    lexicographically. Optional conventions picked up when present:
    root/heatmaps, root/features, root/poses.txt.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"sequence root {root} does not exist")
    if layout == "kitti_like":
        image_dir = root / "image_0"
    elif layout == "euroc_like":
        image_dir = root / "cam0" / "data"
    elif layout == "flat":
        image_dir = root
    else:
        raise ValueError(f"unknown layout {layout!r}")
    if not image_dir.is_dir():
        raise FileNotFoundError(f"image directory {image_dir} does not exist")

    names = _list_images(image_dir)
    if not names:
        raise ValueError(f"no images found in {image_dir}")
    if layout == "euroc_like":
        try:
            names.sort(key=lambda n: int(Path(n).stem))
        except ValueError as e:
            raise ValueError(f"euroc_like layout needs numeric timestamp file names: {e}") from None
    else:
        names.sort()

    rel_dir = image_dir.relative_to(root)
    entries = tuple((i, str(rel_dir / n)) for i, n in enumerate(names))
    heatmap_dir = root / "heatmaps"
    feature_dir = root / "features"
    poses = root / "poses.txt"
    return SequenceManifest(
        root=root,
        entries=entries,
        heatmap_dir=heatmap_dir if heatmap_dir.is_dir() else None,
        feature_dir=feature_dir if feature_dir.is_dir() else None,
        gt_pose_file=poses if poses.is_file() else None,
    )


def feature_file_name(frame_id: int, family: FeatureFamily) -> str:
    tag = "sal" if family is FeatureFamily.SALIENT else "geom"
    return f"{frame_id:06d}.{tag}.hgif"


def heatmap_file_name(frame_id: int) -> str:
    return f"{frame_id:06d}.pgm"


def fallback_geometric(
    image: np.ndarray,
    frame_id: int = 0,
    max_keypoints: int = 500,
    geom_length: int = DEFAULT_GEOM_DESCRIPTOR_LENGTH,
) -> FrameFeatures:
    """Harris-corner stand-in for a learned geometric frontend.

    Corner response R = det(M) - k*trace(M)^2 over Gaussian-smoothed gradient
    products; keeps local maxima (radius 4 px) above 1% of the peak response,
    strongest first. Descriptors reuse the salient descriptor routine on the
    image, zero-padded to the configured geometric length. Deterministic.
    """
    if geom_length < 128:
        raise ValueError(f"geometric length must be >= 128, got {geom_length}")
    img = np.asarray(image, dtype=np.float64)
    gy = np.gradient(img, axis=0)
    gx = np.gradient(img, axis=1)
    ixx = gaussian_blur(gx * gx, radius=2, sigma=1.0)
    iyy = gaussian_blur(gy * gy, radius=2, sigma=1.0)
    ixy = gaussian_blur(gx * gy, radius=2, sigma=1.0)
    response = (ixx * iyy - ixy * ixy) - HARRIS_K * (ixx + iyy) ** 2

    peak = response.max()
    empty = (
        np.zeros((0, 2), dtype=np.float32),
        np.zeros((0, geom_length), dtype=np.float32),
    )
    if peak <= 0:
        return FrameFeatures(frame_id, FeatureFamily.GEOMETRIC, *empty)
    size = 2 * HARRIS_NMS_RADIUS + 1
    local_max = response == maximum_filter(response, size=size, mode="constant", cval=-np.inf)
    ys, xs = np.nonzero(local_max & (response > HARRIS_REL_THRESHOLD * peak))
    if ys.size == 0:
        return FrameFeatures(frame_id, FeatureFamily.GEOMETRIC, *empty)
    order = np.lexsort((xs, ys, -response[ys, xs]))[:max_keypoints]
    kps = np.stack([xs[order], ys[order]], axis=1).astype(np.float32)

    desc = salient_descriptors(img, kps).astype(np.float32)
    padded = np.zeros((desc.shape[0], geom_length), dtype=np.float32)
    padded[:, : desc.shape[1]] = desc
    return FrameFeatures(frame_id, FeatureFamily.GEOMETRIC, kps, padded)


def fallback_saliency(image: np.ndarray) -> Heatmap:
    """Gradient-energy stand-in for a learned saliency network: blurred
    gradient magnitude, min-max normalized (flat image -> all zeros)."""
    img = np.asarray(image, dtype=np.float64)
    grad = gradient_field(img)
    energy = gaussian_blur(grad.magnitude, radius=6, sigma=2.0)
    lo, hi = energy.min(), energy.max()
    if hi > lo:
        values = (energy - lo) / (hi - lo)
    else:
        values = np.zeros_like(energy)
    return Heatmap(values=values)


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic loop sequence.

    The camera window slides along a boustrophedon path over a textured
    world (stride_px per frame, rows window_px + 16 apart), so frames more
    than window_px/stride_px apart share no pixels and only the planted
    revisits bring the camera back to a previously seen location. Each loop
    pair (i, j) replays frames i..i+revisit_len-1 at times j..j+revisit_len-1
    with per-frame integer jitter of at most jitter_px pixels.
    """

    length: int = 300
    loops: tuple = ()
    seed: int = 0
    jitter_px: float = 1.0
    window_px: int = 64
    stride_px: int = 8
    revisit_len: int = 6
    meters_per_px: float = 0.05
    label_radius_m: float = 1.0
    label_min_gap: int = 50

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("length must be >= 1")
        if self.window_px % 8 or self.window_px < 16:
            raise ValueError("window_px must be a multiple of 8, at least 16")
        if self.stride_px < 1 or self.revisit_len < 1 or self.jitter_px < 0:
            raise ValueError("stride_px/revisit_len must be >= 1, jitter_px >= 0")
        loops = tuple((int(i), int(j)) for i, j in self.loops)
        spans = []
        for i, j in loops:
            if i < 0 or j + self.revisit_len > self.length or i + self.revisit_len > self.length:
                raise ValueError(f"loop ({i}, {j}) does not fit in {self.length} frames")
            if j - i < self.label_min_gap + self.revisit_len:
                raise ValueError(
                    f"loop ({i}, {j}) too close: needs gap >= "
                    f"{self.label_min_gap + self.revisit_len}"
                )
            spans.append((j, j + self.revisit_len))
        for a, b in zip(sorted(spans), sorted(spans)[1:]):
            if b[0] < a[1]:
                raise ValueError(f"revisit segments {a} and {b} overlap")
        object.__setattr__(self, "loops", loops)


def _synth_world(spec: SynthSpec, rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    base = gaussian_blur(rng.normal(0.0, 1.0, size=(height, width)), radius=6, sigma=2.0)
    lo, hi = base.min(), base.max()
    world = (base - lo) / (hi - lo + 1e-12) * 120.0 + 60.0
    # Rectangle density tuned so any window-sized crop holds a dozen or more
    # strong, repeatable corner responses.
    n_blobs = max(40, (width * height) // 300)
    for _ in range(n_blobs):
        bw = int(rng.integers(4, 13))
        bh = int(rng.integers(4, 13))
        r = int(rng.integers(0, height - bh))
        c = int(rng.integers(0, width - bw))
        world[r : r + bh, c : c + bw] = float(rng.uniform(0.0, 255.0))
    return np.clip(world, 0, 255).astype(np.uint8)


def synth_loop_sequence(spec: SynthSpec, out_dir) -> SequenceManifest:
    """Render the synthetic sequence into out_dir.

    Emits {frame:06d}.pgm images (flat layout), poses.txt (frame_id x y z in
    meters), and labels.tsv derived from the emitted poses with the spec's
    radius and min gap. Deterministic down to the bytes for a fixed spec.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    cols = max(2, math.isqrt(spec.length - 1) + 1)
    rows = (spec.length + cols - 1) // cols
    margin = 8
    row_gap = spec.window_px + 16
    width = 2 * margin + (cols - 1) * spec.stride_px + spec.window_px
    height = 2 * margin + (rows - 1) * row_gap + spec.window_px
    world = _synth_world(spec, rng, width, height)

    pos = np.zeros((spec.length, 2), dtype=np.int64)  # (x, y) of window corner
    for t in range(spec.length):
        r, c = divmod(t, cols)
        if r % 2:
            c = cols - 1 - c
        pos[t] = (margin + c * spec.stride_px, margin + r * row_gap)
    for i, j in spec.loops:
        for t in range(spec.revisit_len):
            jit = rng.integers(-round(spec.jitter_px), round(spec.jitter_px) + 1, size=2)
            pos[j + t] = pos[i + t] + jit
    pos[:, 0] = np.clip(pos[:, 0], 0, width - spec.window_px)
    pos[:, 1] = np.clip(pos[:, 1], 0, height - spec.window_px)

    for t in range(spec.length):
        x, y = pos[t]
        crop = world[y : y + spec.window_px, x : x + spec.window_px]
        write_image_pgm(out / f"{t:06d}.pgm", crop)

    positions = np.zeros((spec.length, 3), dtype=np.float64)
    positions[:, 0] = pos[:, 0] * spec.meters_per_px
    positions[:, 1] = pos[:, 1] * spec.meters_per_px
    traj = Trajectory(frame_ids=np.arange(spec.length), positions=positions)
    write_trajectory(out / "poses.txt", traj)

    labels = derive_loop_labels(traj, spec.label_radius_m, spec.label_min_gap)
    write_loop_labels(out / "labels.tsv", labels)
    return read_sequence(out, layout="flat")
