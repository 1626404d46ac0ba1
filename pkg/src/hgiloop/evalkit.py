"""Evaluation utilities: ground-truth loop labels, precision/recall,
similarity-aligned trajectory error, and the cross-family descriptor
similarity histogram.

All functions here are pure; trajectories and label sets are immutable.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .core import FeatureFamily, FrameFeatures


@dataclass(frozen=True)
class Trajectory:
    """Per-frame positions in meters; frame ids strictly increasing."""

    frame_ids: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        ids = np.array(self.frame_ids, dtype=np.int64)
        pos = np.array(self.positions, dtype=np.float64)
        if ids.ndim != 1 or pos.shape != (ids.shape[0], 3):
            raise ValueError(f"expected (N,) ids and (N, 3) positions, got {ids.shape} / {pos.shape}")
        if ids.size and np.any(np.diff(ids) <= 0):
            raise ValueError("frame_ids must be strictly increasing")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions must be finite")
        ids.setflags(write=False)
        pos.setflags(write=False)
        object.__setattr__(self, "frame_ids", ids)
        object.__setattr__(self, "positions", pos)

    def __len__(self) -> int:
        return self.frame_ids.shape[0]


@dataclass(frozen=True)
class PRCounts:
    tp: int
    fp: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "fp", "fn"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v!r}")


@dataclass(frozen=True)
class LoopLabelSet:
    """Unordered ground-truth loop pairs plus the parameters that made them."""

    pairs: frozenset
    r: float
    min_gap: int

    def __post_init__(self):
        norm = set()
        for a, b in self.pairs:
            a, b = int(a), int(b)
            lo, hi = min(a, b), max(a, b)
            if hi - lo < self.min_gap:
                raise ValueError(f"pair ({a}, {b}) closer than min_gap={self.min_gap}")
            norm.add((lo, hi))
        object.__setattr__(self, "pairs", frozenset(norm))

    def __contains__(self, pair) -> bool:
        a, b = pair
        return (min(a, b), max(a, b)) in self.pairs

    def __len__(self) -> int:
        return len(self.pairs)


def derive_loop_labels(gt: Trajectory, r: float, min_gap: int) -> LoopLabelSet:
    """Label pair (i, j) iff the positions are within r meters and the frame
    ids at least min_gap apart."""
    if not (r > 0):
        raise ValueError(f"radius must be > 0, got {r}")
    ids = gt.frame_ids
    pos = gt.positions
    pairs = set()
    for a in range(len(gt)):
        gap_ok = np.flatnonzero(ids - ids[a] >= min_gap)
        if gap_ok.size == 0:
            continue
        d = np.linalg.norm(pos[gap_ok] - pos[a], axis=1)
        for b in gap_ok[d <= r]:
            pairs.add((int(ids[a]), int(ids[b])))
    return LoopLabelSet(pairs=frozenset(pairs), r=float(r), min_gap=int(min_gap))


def _detection_pairs(detections) -> np.ndarray:
    out = []
    for det in detections:
        if hasattr(det, "query_frame"):
            out.append((det.query_frame, det.candidate_frame))
        else:
            q, c = det[0], det[1]
            out.append((int(q), int(c)))
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def precision_recall(detections, labels: LoopLabelSet, tol: int):
    """Match detections to labels with endpoint tolerance `tol` (frames).

    A detection matches a label when both endpoints are within tol of the
    labeled pair (either orientation). TP counts matched detections, FP the
    rest, FN the labels no detection matched. Empty denominators give
    precision/recall 1 by convention.
    """
    if tol < 0:
        raise ValueError(f"tol must be >= 0, got {tol}")
    dets = _detection_pairs(detections)
    lab = np.array(sorted(labels.pairs), dtype=np.int64).reshape(-1, 2)
    k, m = dets.shape[0], lab.shape[0]
    if k and m:
        dq = np.abs(dets[:, None, 0] - lab[None, :, 0]) <= tol
        dc = np.abs(dets[:, None, 1] - lab[None, :, 1]) <= tol
        sq = np.abs(dets[:, None, 0] - lab[None, :, 1]) <= tol
        sc = np.abs(dets[:, None, 1] - lab[None, :, 0]) <= tol
        match = (dq & dc) | (sq & sc)  # (K, M)
        det_matched = match.any(axis=1)
        lab_matched = match.any(axis=0)
    else:
        det_matched = np.zeros(k, dtype=bool)
        lab_matched = np.zeros(m, dtype=bool)
    tp = int(det_matched.sum())
    counts = PRCounts(tp=tp, fp=k - tp, fn=int(m - lab_matched.sum()))
    precision = counts.tp / (counts.tp + counts.fp) if k else 1.0
    recall = counts.tp / (counts.tp + counts.fn) if m else 1.0
    return counts, precision, recall


def _correspondences(pred: Trajectory, gt: Trajectory):
    common, pi, gi = np.intersect1d(pred.frame_ids, gt.frame_ids, return_indices=True)
    if common.size != len(pred) or common.size != len(gt):
        warnings.warn(
            f"frame id mismatch: using {common.size} common frames "
            f"of {len(pred)} predicted / {len(gt)} ground truth",
            stacklevel=3,
        )
    return common, pred.positions[pi], gt.positions[gi]


def align_sim3(pred: Trajectory, gt: Trajectory) -> Trajectory:
    """Least-squares similarity alignment (scale, rotation, translation) of
    pred onto gt over their common frame ids; returns pred transformed."""
    common, src, dst = _correspondences(pred, gt)
    if common.size < 3:
        raise ValueError(f"similarity alignment needs >= 3 correspondences, got {common.size}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    x = src - mu_s
    y = dst - mu_d
    var_s = float((x * x).sum()) / common.size
    if var_s == 0:
        raise ValueError("degenerate geometry: predicted positions coincide")
    cov = y.T @ x / common.size
    u, d, vt = np.linalg.svd(cov)
    if d[1] <= d[0] * 1e-9:
        raise ValueError("degenerate geometry: correspondences are collinear")
    sign = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2, 2] = -1.0
    rot = u @ sign @ vt
    scale = float(np.trace(np.diag(d) @ sign)) / var_s
    t = mu_d - scale * rot @ mu_s
    aligned = (scale * (rot @ pred.positions.T)).T + t
    return Trajectory(frame_ids=pred.frame_ids, positions=aligned)


def ate_rmse(pred: Trajectory, gt: Trajectory, align: bool = True) -> float:
    """Root-mean-square position error over the common frames, optionally
    after similarity alignment."""
    if align:
        pred = align_sim3(pred, gt)
    common, p, g = _correspondences(pred, gt)
    if common.size == 0:
        raise ValueError("trajectories share no frame ids")
    err = p - g
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


@dataclass(frozen=True)
class SimilarityHistogram:
    """Histogram of cross-family cosine similarities over [-1, 1]."""

    bin_edges: np.ndarray
    counts: np.ndarray
    skipped: int

    def __post_init__(self):
        edges = np.array(self.bin_edges, dtype=np.float64)
        counts = np.array(self.counts, dtype=np.int64)
        if edges.ndim != 1 or counts.shape != (edges.shape[0] - 1,):
            raise ValueError("bin_edges must have one more entry than counts")
        if np.any(counts < 0) or self.skipped < 0:
            raise ValueError("counts must be >= 0")
        edges.setflags(write=False)
        counts.setflags(write=False)
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "counts", counts)

    @property
    def bin_centers(self) -> np.ndarray:
        return (self.bin_edges[:-1] + self.bin_edges[1:]) / 2.0

    def normalized(self) -> np.ndarray:
        """Counts rescaled so the fullest bin equals 1 (zeros stay zeros)."""
        peak = self.counts.max() if self.counts.size else 0
        if peak == 0:
            return np.zeros_like(self.counts, dtype=np.float64)
        return self.counts / float(peak)


def _resample_rows(rows: np.ndarray, target_len: int) -> np.ndarray:
    """Linearly resample each row to target_len samples."""
    src_len = rows.shape[1]
    if src_len == target_len:
        return rows
    x = np.linspace(0.0, src_len - 1.0, target_len)
    left = np.floor(x).astype(np.int64)
    right = np.minimum(left + 1, src_len - 1)
    frac = x - left
    return rows[:, left] * (1.0 - frac) + rows[:, right] * frac


def feature_similarity_histogram(geom: FrameFeatures, sal: FrameFeatures,
                                 bins: int = 100) -> SimilarityHistogram:
    """Cosine similarity of every geometric-salient descriptor pair.

    The longer descriptor family is linearly resampled down to the shorter
    length before the cosine. Zero-norm descriptors are skipped and counted.
    """
    if geom.family is not FeatureFamily.GEOMETRIC or sal.family is not FeatureFamily.SALIENT:
        raise ValueError("expected a geometric frame and a salient frame, in that order")
    if len(geom) == 0 or len(sal) == 0:
        raise ValueError("both frames must be nonempty")
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")

    g = geom.descriptors.astype(np.float64)
    s = sal.descriptors.astype(np.float64)
    target = min(g.shape[1], s.shape[1])
    g = _resample_rows(g, target)
    s = _resample_rows(s, target)

    gn = np.linalg.norm(g, axis=1)
    sn = np.linalg.norm(s, axis=1)
    g_ok = gn > 0
    s_ok = sn > 0
    skipped = int((~g_ok).sum() + (~s_ok).sum())
    edges = np.linspace(-1.0, 1.0, bins + 1)
    if not (g_ok.any() and s_ok.any()):
        return SimilarityHistogram(edges, np.zeros(bins, dtype=np.int64), skipped)
    gu = g[g_ok] / gn[g_ok, None]
    su = s[s_ok] / sn[s_ok, None]
    sims = np.clip(gu @ su.T, -1.0, 1.0).ravel()
    counts, _ = np.histogram(sims, bins=edges)
    return SimilarityHistogram(edges, counts.astype(np.int64), skipped)


def read_trajectory(path) -> Trajectory:
    """Parse a pose file: per line `frame_id x y z` or `frame_id` + 12 floats
    of a row-major 3x4 pose (positions at columns 3, 7, 11)."""
    ids = []
    pos = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            if len(tok) == 4:
                p = [float(tok[1]), float(tok[2]), float(tok[3])]
            elif len(tok) == 13:
                vals = [float(t) for t in tok[1:]]
                p = [vals[3], vals[7], vals[11]]
            else:
                raise ValueError(
                    f"{path}:{lineno}: expected frame_id + 3 or + 12 floats, got {len(tok)} tokens"
                )
            ids.append(int(tok[0]))
            pos.append(p)
    return Trajectory(frame_ids=np.array(ids, dtype=np.int64),
                      positions=np.array(pos, dtype=np.float64).reshape(-1, 3))


def write_trajectory(path, traj: Trajectory, header_lines=()) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        for fid, p in zip(traj.frame_ids, traj.positions):
            fh.write(f"{int(fid)} {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")


def write_loop_labels(path, labels: LoopLabelSet) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# r={float(labels.r)!r} min_gap={int(labels.min_gap)}\n")
        for a, b in sorted(labels.pairs):
            fh.write(f"{a}\t{b}\n")


def read_loop_labels(path) -> LoopLabelSet:
    r = None
    min_gap = None
    pairs = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    if tok.startswith("r="):
                        r = float(tok[2:])
                    elif tok.startswith("min_gap="):
                        min_gap = int(tok[8:])
                continue
            a, b = line.split("\t")
            pairs.add((int(a), int(b)))
    if r is None or min_gap is None:
        raise ValueError(f"{path}: missing '# r=... min_gap=...' header")
    return LoopLabelSet(pairs=frozenset(pairs), r=r, min_gap=min_gap)


def format_metrics(metrics: dict) -> str:
    """Plain-text key=value rendering, one per line, insertion order."""
    return "\n".join(f"{k}={v}" for k, v in metrics.items())
