"""Loop detection: fuse the two bag-of-words distances into one similarity,
gate by frame distance and already-closed regions, and maintain the gated
keyframe store.

Pipeline contract (see LoopDetector): every processed frame is added to both
frame indexes so the candidate search covers the whole history, while the
KeyframeStore keeps the sparser gated subset (similarity vs the last stored
frame below s_th/2) for downstream consumers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

from .core import FusionParams, SimilarityScore
from .vocab import BowVector, FrameIndex, l1_distance


def squash(x: float) -> float:
    """1 - exp(-1/x) for x > 0, extended continuously with squash(0) = 1.

    Strictly decreasing on [0, inf) with range (0, 1].
    """
    if not (isinstance(x, (int, float)) and math.isfinite(x)):
        raise ValueError(f"squash expects a finite number, got {x!r}")
    if x < 0:
        raise ValueError(f"squash is undefined for negative input, got {x}")
    if x == 0:
        return 1.0
    return 1.0 - math.exp(-1.0 / x)


def fuse(d_s: float, d_g: float, p: FusionParams = FusionParams()) -> float:
    """Fused similarity of a frame pair from its two BoW distances.

    s = squash(|d_s - d_g|) * squash(d_s * w_s + d_g * w_g): the first factor
    rewards the two feature families agreeing, the second rewards small
    weighted distance.
    """
    if d_s < 0 or d_g < 0:
        raise ValueError(f"distances must be >= 0, got d_s={d_s}, d_g={d_g}")
    return squash(abs(d_s - d_g)) * squash(d_s * p.w_s + d_g * p.w_g)


@dataclass(frozen=True)
class LoopDetection:
    query_frame: int
    candidate_frame: int
    score: SimilarityScore

    def __post_init__(self):
        if self.query_frame < 0 or self.candidate_frame < 0:
            raise ValueError("frame ids must be >= 0")
        if self.query_frame == self.candidate_frame:
            raise ValueError("a frame cannot close a loop with itself")
        if self.score.candidate_frame != self.candidate_frame:
            raise ValueError("score.candidate_frame does not match candidate_frame")


@dataclass(frozen=True)
class KeyframeRecord:
    frame_id: int
    bow_s: BowVector
    bow_g: BowVector


class KeyframeStore:
    """Ordered gated keyframe records; mutated only through maybe_store."""

    def __init__(self):
        self.records: list = []
        self.audit: list = []  # (frame_id, similarity vs previous last_added or None)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def last_added(self) -> Optional[KeyframeRecord]:
        return self.records[-1] if self.records else None

    def replay_similarities(self, p: FusionParams) -> list:
        """Recompute the insertion-time gate value for each consecutive pair."""
        out = []
        for prev, cur in zip(self.records, self.records[1:]):
            d_s = l1_distance(cur.bow_s, prev.bow_s)
            d_g = l1_distance(cur.bow_g, prev.bow_g)
            out.append(fuse(d_s, d_g, p))
        return out


def maybe_store(frame_id: int, bow_s: BowVector, bow_g: BowVector,
                store: KeyframeStore, p: FusionParams) -> bool:
    """Admit the frame iff it is dissimilar enough from the last stored one.

    The gate compares against last_added only (not the whole store) and
    admits when the fused similarity is below s_th/2; an empty store always
    admits. Returns whether the frame was stored.
    """
    last = store.last_added
    if last is None:
        store.records.append(KeyframeRecord(frame_id, bow_s, bow_g))
        store.audit.append((frame_id, None))
        return True
    s = fuse(l1_distance(bow_s, last.bow_s), l1_distance(bow_g, last.bow_g), p)
    if s < p.s_th / 2.0:
        store.records.append(KeyframeRecord(frame_id, bow_s, bow_g))
        store.audit.append((frame_id, s))
        return True
    return False


def _region_closed(query: int, candidate: int, closed, gap: int) -> bool:
    return any(abs(query - q) <= gap and abs(candidate - c) <= gap for q, c in closed)


def detect(frame_id: int, bow_s: BowVector, bow_g: BowVector, store: KeyframeStore,
           index_s: FrameIndex, index_g: FrameIndex, p: FusionParams,
           closed: set) -> Optional[LoopDetection]:
    """Query both indexes and emit a loop detection if the fused score clears
    the threshold.

    Frames within min_frame_gap of the query are never candidates. When the
    two indexes nominate different frames, the fused score is evaluated for
    both (each using that candidate's distances in BOTH indexes) and the
    higher one wins, ties to the lower frame id. A detection is suppressed
    when a previously emitted pair lies within min_frame_gap of both
    endpoints; emitted pairs are added to `closed`.
    """
    if len(store) == 0:
        return None
    nominations = []
    for index, vec in ((index_s, bow_s), (index_g, bow_g)):
        hit = index.query(vec, frame_id, p.min_frame_gap)
        if hit is not None:
            nominations.append(hit[0])
    if not nominations:
        return None

    best = None  # (s, -candidate) maximized; tie -> lower frame id
    for c in sorted(set(nominations)):
        d_s = l1_distance(bow_s, index_s.vector(c))
        d_g = l1_distance(bow_g, index_g.vector(c))
        s = fuse(d_s, d_g, p)
        if best is None or (s, -c) > (best[0], -best[1]):
            best = (s, c, d_s, d_g)

    s, candidate, d_s, d_g = best
    if s <= p.s_th:
        return None
    if _region_closed(frame_id, candidate, closed, p.min_frame_gap):
        return None
    detection = LoopDetection(
        query_frame=frame_id,
        candidate_frame=candidate,
        score=SimilarityScore(s=s, d_s=d_s, d_g=d_g, candidate_frame=candidate),
    )
    closed.add((frame_id, candidate))
    return detection


@dataclass
class LoopDetector:
    """Single-writer pipeline driver; feed frames in increasing id order.

    Each processed frame is queried against the full indexed history, then
    offered to the keyframe store, then indexed itself (both families).
    """

    params: FusionParams = field(default_factory=FusionParams)

    def __post_init__(self):
        self.store = KeyframeStore()
        self.index_s = FrameIndex()
        self.index_g = FrameIndex()
        self.closed: set = set()
        self.detections: list = []
        self._last_id = -1

    def process(self, frame_id: int, bow_s: BowVector, bow_g: BowVector) -> Optional[LoopDetection]:
        if frame_id <= self._last_id:
            raise ValueError(f"frames must arrive in increasing id order "
                             f"(got {frame_id} after {self._last_id})")
        self._last_id = frame_id
        det = detect(frame_id, bow_s, bow_g, self.store,
                     self.index_s, self.index_g, self.params, self.closed)
        maybe_store(frame_id, bow_s, bow_g, self.store, self.params)
        self.index_s.add(frame_id, bow_s)
        self.index_g.add(frame_id, bow_g)
        if det is not None:
            self.detections.append(det)
        return det


def format_detection(det: LoopDetection) -> str:
    """One tab-separated line: query, candidate, s, d_s, d_g."""
    sc = det.score
    return (f"{det.query_frame}\t{det.candidate_frame}\t"
            f"{float(sc.s)!r}\t{float(sc.d_s)!r}\t{float(sc.d_g)!r}")


def write_detections(path, detections, header_lines=()) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        for det in detections:
            fh.write(format_detection(det) + "\n")


def read_detections(path) -> list:
    """Parse a detections stream back into LoopDetection values.

    Blank lines and lines starting with '#' are ignored.
    """
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields")
            q, c = int(parts[0]), int(parts[1])
            s, d_s, d_g = (float(x) for x in parts[2:])
            out.append(LoopDetection(q, c, SimilarityScore(s, d_s, d_g, c)))
    return out
