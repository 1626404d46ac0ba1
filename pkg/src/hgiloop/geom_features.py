"""Geometric keypoint post-processing: crowding de-duplication and the
three-frame descriptor merge.

Both operations work on whole frames and treat the keypoint list with set
semantics: decisions depend only on geometry and descriptor content, never
on list order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DedupParams, FeatureFamily, FrameFeatures


@dataclass(frozen=True)
class NeighborSet:
    """Indices of keypoints crowding a center keypoint (center excluded)."""

    center_index: int
    member_indices: frozenset

    def __post_init__(self):
        members = frozenset(int(i) for i in self.member_indices)
        if self.center_index in members:
            raise ValueError("center index cannot be its own neighbor")
        object.__setattr__(self, "member_indices", members)

    def __len__(self) -> int:
        return len(self.member_indices)


def _require_geometric(frame: FrameFeatures, op: str) -> None:
    if frame.family is not FeatureFamily.GEOMETRIC:
        raise ValueError(f"{op} expects geometric features, got {frame.family.name}")


def _squared_distances(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    diff = points.astype(np.float64) - center.astype(np.float64)
    return np.einsum("ij,ij->i", diff, diff)


def neighbor_set(frame: FrameFeatures, i: int, params: DedupParams) -> NeighborSet:
    """Keypoints within squared pixel distance T of keypoint i (excluding i)."""
    _require_geometric(frame, "neighbor_set")
    if not 0 <= i < len(frame):
        raise IndexError(f"keypoint index {i} out of range for frame of {len(frame)}")
    d2 = _squared_distances(frame.keypoints, frame.keypoints[i])
    members = np.flatnonzero(d2 < params.T)
    members = members[members != i]
    return NeighborSet(center_index=i, member_indices=frozenset(int(j) for j in members))


def _unit_rows(desc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalized copy plus a mask of rows whose norm was zero."""
    d = desc.astype(np.float64)
    norms = np.linalg.norm(d, axis=1)
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    return d / safe[:, None], zero


def mean_cosine_similarity(frame: FrameFeatures, i: int, neighbors: NeighborSet) -> float:
    """Mean cosine between descriptor i and each neighbor's descriptor.

    Raises if the neighbor set is empty or any involved descriptor has zero
    norm (its cosine is undefined).
    """
    _require_geometric(frame, "mean_cosine_similarity")
    if len(neighbors) == 0:
        raise ValueError("mean cosine similarity is undefined for an empty neighbor set")
    idx = sorted(neighbors.member_indices)
    if not all(0 <= j < len(frame) for j in idx):
        raise IndexError("neighbor index out of range")
    block = frame.descriptors[[i] + idx].astype(np.float64)
    norms = np.linalg.norm(block, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("cosine similarity is undefined for a zero-norm descriptor")
    unit = block / norms[:, None]
    return float(np.mean(unit[1:] @ unit[0]))


def dedup_keypoints(frame: FrameFeatures, params: DedupParams) -> FrameFeatures:
    """Drop keypoints that are both crowded and redundant.

    Batch semantics: every keypoint is judged against the original frame.
    Keypoint i survives if it has at most N neighbors (squared distance < T),
    or if the mean cosine similarity to its neighbors is <= s_min. Pairs
    involving a zero-norm descriptor contribute cosine 0.0 (no similarity
    evidence), so this operation itself never raises on valid frames.
    """
    _require_geometric(frame, "dedup_keypoints")
    n = len(frame)
    if n == 0:
        return frame

    pts = frame.keypoints.astype(np.float64)
    d2 = (
        np.sum(pts * pts, axis=1)[:, None]
        + np.sum(pts * pts, axis=1)[None, :]
        - 2.0 * (pts @ pts.T)
    )
    # the expansion can go slightly negative for coincident points
    np.maximum(d2, 0.0, out=d2)
    adjacency = d2 < params.T
    np.fill_diagonal(adjacency, False)
    counts = adjacency.sum(axis=1)

    keep = counts <= params.N
    crowded = np.flatnonzero(~keep)
    if crowded.size:
        unit, _ = _unit_rows(frame.descriptors)
        cos = unit[crowded] @ unit.T
        mean_cos = np.array(
            [cos[r, adjacency[i]].mean() for r, i in enumerate(crowded)]
        )
        keep[crowded] = mean_cos <= params.s_min

    return FrameFeatures(
        frame_id=frame.frame_id,
        family=frame.family,
        keypoints=frame.keypoints[keep],
        descriptors=frame.descriptors[keep],
    )


def merge_triplet(
    prev: FrameFeatures,
    center: FrameFeatures,
    nxt: FrameFeatures,
    params: DedupParams,
) -> FrameFeatures:
    """Overlay three consecutive frames and thin cross-frame duplicates.

    Keypoints from all three frames are pooled, then members of the most
    similar cross-frame descriptor pair are removed one at a time until the
    pool is back to the center frame's size. The removed member is the
    non-center one when possible; ties prefer the earlier frame, then the
    lower index. The result carries the center frame's id. Pairs involving a
    zero-norm descriptor rank below every real pair.
    """
    for f in (prev, center, nxt):
        _require_geometric(f, "merge_triplet")
    if center.frame_id != prev.frame_id + 1 or nxt.frame_id != center.frame_id + 1:
        raise ValueError(
            "merge_triplet expects consecutive frame ids, got "
            f"{prev.frame_id}, {center.frame_id}, {nxt.frame_id}"
        )
    widths = {f.descriptor_length for f in (prev, center, nxt) if len(f)}
    if len(widths) > 1:
        raise ValueError(f"descriptor lengths differ across the triplet: {sorted(widths)}")

    frames = (prev, center, nxt)
    src = np.concatenate([np.full(len(f), t) for t, f in enumerate(frames)])
    idx_in_src = np.concatenate([np.arange(len(f)) for f in frames])
    if src.size == 0:
        return FrameFeatures(center.frame_id, FeatureFamily.GEOMETRIC,
                             center.keypoints, center.descriptors)
    kps = np.concatenate([f.keypoints for f in frames if len(f)] or
                         [np.zeros((0, 2), np.float32)])
    descs = np.concatenate([f.descriptors for f in frames if len(f)])

    unit, zero_norm = _unit_rows(descs)
    sim = unit @ unit.T
    sim[src[:, None] == src[None, :]] = -np.inf  # same-frame pairs never merge
    sim[zero_norm, :] = -np.inf
    sim[:, zero_norm] = -np.inf

    # removal preference order: earlier frame first, then lower index
    rank = src.astype(np.int64) * (int(idx_in_src.max(initial=0)) + 1) + idx_in_src

    alive = np.ones(src.size, dtype=bool)
    remaining = int(alive.sum())
    target = len(center)
    while remaining > target:
        best = sim.max()
        candidates = set()
        if best > -np.inf:
            for a, b in zip(*np.nonzero(sim == best)):
                non_center = [j for j in (a, b) if src[j] != 1]
                candidates.update(non_center if non_center else (a, b))
        else:
            # no cross-frame pair left; fall back to plain preference order
            live = np.flatnonzero(alive)
            candidates.update(int(j) for j in live if src[j] != 1)
            if not candidates:
                candidates.update(int(j) for j in live)
        drop = min(candidates, key=lambda j: rank[j])
        alive[drop] = False
        sim[drop, :] = -np.inf
        sim[:, drop] = -np.inf
        remaining -= 1

    keep = np.flatnonzero(alive)
    return FrameFeatures(
        frame_id=center.frame_id,
        family=FeatureFamily.GEOMETRIC,
        keypoints=kps[keep],
        descriptors=descs[keep],
    )
