"""Bag-of-visual-words vocabularies, frame indexing, and nearest-frame
queries.

One vocabulary per feature family: a hierarchical k-means tree (k-means++
seeding, Lloyd refinement) whose leaves are visual words weighted by idf over
the training frames. Frames quantize to L1-normalized tf-idf vectors; frame
lookup runs over an inverted index and scores with L1 distance in [0, 2].
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .core import FeatureFamily, FrameFeatures

DEFAULT_BRANCHING = 10
DEFAULT_DEPTH = 3
KMEANS_TOL = 1e-6
KMEANS_MAX_ITER = 50

_MAGIC = b"HGIV"
_VERSION = 1
_HEADER = struct.Struct("<4sIBHHI")
_NODE_HEAD = struct.Struct("<II")
_F32 = struct.Struct("<f")
_ROOT_PARENT = 0xFFFFFFFF


class VocabularyFileError(ValueError):
    """Raised when a vocabulary file is malformed."""


class _Node:
    __slots__ = ("centroid", "children", "word_id", "idf", "child_matrix")

    def __init__(self, centroid: np.ndarray):
        self.centroid = centroid.astype(np.float32)
        self.children: list = []
        self.word_id: int = -1
        self.idf: float = 0.0
        self.child_matrix = None

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def finalize(self):
        if self.children:
            self.child_matrix = np.stack([c.centroid for c in self.children]).astype(np.float64)


def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator):
    """Seeded k-means++ plus Lloyd iterations; may return fewer than k
    centroids when the data cannot support k distinct clusters."""
    n = points.shape[0]
    first = int(rng.integers(n))
    centers = [points[first]]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for _ in range(1, min(k, n)):
        total = d2.sum()
        if total <= 0:
            break
        idx = int(rng.choice(n, p=d2 / total))
        centers.append(points[idx])
        d2 = np.minimum(d2, np.sum((points - centers[-1]) ** 2, axis=1))
    centers = np.array(centers, dtype=np.float64)

    for _ in range(KMEANS_MAX_ITER):
        dists = (
            np.sum(points * points, axis=1)[:, None]
            + np.sum(centers * centers, axis=1)[None, :]
            - 2.0 * points @ centers.T
        )
        assign = dists.argmin(axis=1)
        new_centers = []
        for c in range(centers.shape[0]):
            members = assign == c
            if np.any(members):
                new_centers.append(points[members].mean(axis=0))
        new_centers = np.array(new_centers, dtype=np.float64)
        if new_centers.shape[0] != centers.shape[0]:
            centers = new_centers  # dropped an empty cluster; keep iterating
            continue
        shift = float(np.max(np.linalg.norm(new_centers - centers, axis=1)))
        centers = new_centers
        if shift < KMEANS_TOL:
            break

    dists = (
        np.sum(points * points, axis=1)[:, None]
        + np.sum(centers * centers, axis=1)[None, :]
        - 2.0 * points @ centers.T
    )
    return centers, dists.argmin(axis=1)


@dataclass
class Vocabulary:
    """Immutable after training; concurrent quantization is safe."""

    family: FeatureFamily
    k: int
    L: int
    root: _Node
    word_count: int
    leaf_idf: np.ndarray

    def words_of(self, descriptors: np.ndarray) -> np.ndarray:
        """Leaf word id for every descriptor row (greedy nearest-child
        descent; exact distance ties go to the earliest child)."""
        descs = np.asarray(descriptors, dtype=np.float64)
        n = descs.shape[0]
        words = np.empty(n, dtype=np.int64)
        if n == 0:
            return words
        stack = [(self.root, np.arange(n))]
        while stack:
            node, idx = stack.pop()
            if node.is_leaf:
                words[idx] = node.word_id
                continue
            cents = node.child_matrix
            sub = descs[idx]
            d2 = (
                np.sum(sub * sub, axis=1)[:, None]
                + np.sum(cents * cents, axis=1)[None, :]
                - 2.0 * sub @ cents.T
            )
            choice = d2.argmin(axis=1)
            for ci, child in enumerate(node.children):
                members = idx[choice == ci]
                if members.size:
                    stack.append((child, members))
        return words


def _build_node(points: np.ndarray, depth: int, k: int, L: int, rng) -> _Node:
    node = _Node(points.mean(axis=0))
    if depth >= L or points.shape[0] < 2:
        return node
    centers, assign = _kmeans(points, k, rng)
    if centers.shape[0] < 2:
        return node  # indivisible cluster (identical points)
    for c in range(centers.shape[0]):
        child = _build_node(points[assign == c], depth + 1, k, L, rng)
        node.children.append(child)
    node.finalize()
    return node


def _index_tree(root: _Node):
    """Assign word ids to leaves in left-to-right depth-first order."""
    word = 0
    stack = [root]
    order = []
    while stack:
        node = stack.pop()
        order.append(node)
        stack.extend(reversed(node.children))
    for node in order:  # preorder; leaves appear left-to-right
        if node.is_leaf:
            node.word_id = word
            word += 1
    return word


def _coerce_frames(frames) -> list:
    mats = []
    for f in frames:
        arr = f.descriptors if isinstance(f, FrameFeatures) else np.asarray(f)
        if arr.ndim != 2:
            raise ValueError(f"each frame must be an (N, D) descriptor matrix, got {arr.shape}")
        mats.append(arr.astype(np.float64))
    return mats


def train(frames, k: int = DEFAULT_BRANCHING, L: int = DEFAULT_DEPTH, seed=0) -> Vocabulary:
    """Train a vocabulary from per-frame descriptor matrices.

    `frames` is a sequence whose elements are (N_i, D) arrays (or
    FrameFeatures); the corpus for clustering is their concatenation and idf
    is computed over the frames. Deterministic given the seed.
    """
    if k < 2:
        raise ValueError(f"branching factor must be >= 2, got {k}")
    if L < 1:
        raise ValueError(f"depth must be >= 1, got {L}")
    frames = list(frames)
    mats = _coerce_frames(frames)
    families = {f.family for f in frames if isinstance(f, FrameFeatures)}
    if len(families) > 1:
        raise ValueError("training frames mix feature families")
    family = families.pop() if families else FeatureFamily.GEOMETRIC
    nonempty = [m for m in mats if m.shape[0]]
    if not nonempty:
        raise ValueError("training corpus is empty")
    corpus = np.concatenate(nonempty, axis=0)

    rng = np.random.default_rng(seed)
    root = _build_node(corpus, 0, k, L, rng)
    word_count = _index_tree(root)

    vocab = Vocabulary(
        family=family,
        k=k,
        L=L,
        root=root,
        word_count=word_count,
        leaf_idf=np.zeros(word_count),
    )
    doc_freq = np.zeros(word_count, dtype=np.int64)
    n_frames = len(mats)
    for m in mats:
        if m.shape[0]:
            doc_freq[np.unique(vocab.words_of(m))] += 1
    idf = np.zeros(word_count)
    hit = doc_freq > 0
    idf[hit] = np.log(n_frames / doc_freq[hit])  # unseen words keep weight 0
    vocab.leaf_idf = idf
    _write_leaf_idf(root, idf)
    return vocab


def _write_leaf_idf(root: _Node, idf: np.ndarray):
    stack = [root]
    while stack:
        node = stack.pop()
        if node.is_leaf:
            node.idf = float(idf[node.word_id])
        else:
            stack.extend(node.children)


@dataclass(frozen=True)
class BowVector:
    """Sparse L1-normalized tf-idf vector: word_id -> weight > 0."""

    weights: dict

    def __post_init__(self):
        w = dict(self.weights)
        for word, value in w.items():
            if not isinstance(word, (int, np.integer)) or word < 0:
                raise ValueError(f"word ids must be integers >= 0, got {word!r}")
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"weights must be finite and > 0, got {value!r}")
        if w and abs(sum(w.values()) - 1.0) > 1e-9:
            raise ValueError(f"nonempty BowVector must be L1-normalized, sum={sum(w.values())!r}")
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def is_empty(self) -> bool:
        return not self.weights


def l1_distance(a: BowVector, b: BowVector) -> float:
    """L1 distance over the union of supports; in [0, 2] for normalized
    vectors (0 and 1 degenerate cases for empty operands)."""
    d = 0.0
    for w, x in a.weights.items():
        d += abs(x - b.weights.get(w, 0.0))
    for w, y in b.weights.items():
        if w not in a.weights:
            d += y
    return d


def quantize(v: Vocabulary, frame: FrameFeatures) -> BowVector:
    """Project a frame onto the vocabulary: tf times idf, L1-normalized.

    Words whose idf is zero drop out; a frame with no descriptors (or only
    zero-weight words) quantizes to the empty vector.
    """
    if frame.family is not v.family:
        raise ValueError(f"frame family {frame.family.name} does not match vocabulary "
                         f"{v.family.name}")
    if len(frame) == 0:
        return BowVector({})
    words = v.words_of(frame.descriptors.astype(np.float64))
    counts = np.bincount(words, minlength=v.word_count).astype(np.float64)
    raw = counts * v.leaf_idf
    total = raw.sum()
    if total <= 0:
        return BowVector({})
    support = np.flatnonzero(raw)
    return BowVector({int(w): float(raw[w] / total) for w in support})


class FrameIndex:
    """Per-frame BowVector store with an inverted word index.

    Concurrency contract: one writer inserting frames in strictly increasing
    id order (enforced); readers may query concurrently with each other once
    writes have quiesced. Mixing a writer with readers needs external
    synchronization.
    """

    def __init__(self):
        self._vectors: dict = {}
        self._postings: dict = {}
        self._empty_ids: list = []
        self._last_id = -1

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, frame_id: int) -> bool:
        return frame_id in self._vectors

    @property
    def frame_ids(self) -> list:
        return sorted(self._vectors)

    def vector(self, frame_id: int) -> BowVector:
        return self._vectors[frame_id]

    def add(self, frame_id: int, vec: BowVector) -> None:
        if frame_id <= self._last_id:
            raise ValueError(
                f"frames must be inserted in increasing id order "
                f"(got {frame_id} after {self._last_id})"
            )
        self._vectors[frame_id] = vec
        self._last_id = frame_id
        if vec.is_empty:
            self._empty_ids.append(frame_id)
        for w in vec.weights:
            self._postings.setdefault(w, []).append(frame_id)

    def query(self, q: BowVector, query_frame_id: int, exclude_within: int):
        """Closest stored frame by L1 distance, or None.

        Frames with |frame - query_frame_id| < exclude_within are skipped;
        exact distance ties resolve to the lowest frame id.
        """

        def excluded(f: int) -> bool:
            return abs(f - query_frame_id) < exclude_within

        candidates = [f for f in self._vectors if not excluded(f)]
        if not candidates:
            return None

        best = None  # (distance, frame_id)
        if q.is_empty:
            for f in sorted(candidates):
                d = 0.0 if self._vectors[f].is_empty else 1.0
                if best is None or (d, f) < best:
                    best = (d, f)
            return best[1], best[0]

        # L1(q, v) = 2 - 2 * sum over common words of min(q_w, v_w)
        overlap: dict = {}
        for w, qw in q.weights.items():
            for f in self._postings.get(w, ()):
                if excluded(f):
                    continue
                vw = self._vectors[f].weights[w]
                overlap[f] = overlap.get(f, 0.0) + min(qw, vw)
        for f in sorted(overlap):
            d = max(2.0 - 2.0 * overlap[f], 0.0)
            if best is None or (d, f) < best:
                best = (d, f)
        untouched_empty = [f for f in self._empty_ids if not excluded(f)]
        if untouched_empty:
            f = min(untouched_empty)
            if best is None or (1.0, f) < best:
                best = (1.0, f)
        untouched = [f for f in candidates if f not in overlap and not self._vectors[f].is_empty]
        if untouched:
            f = min(untouched)
            if best is None or (2.0, f) < best:
                best = (2.0, f)
        return best[1], best[0]


def _emit_postorder(root: _Node) -> list:
    order = []

    def walk(node):
        for child in node.children:
            walk(child)
        order.append(node)

    walk(root)
    return order


def save_vocabulary(vocab: Vocabulary, path) -> None:
    """Serialize to the binary vocabulary format.

    Little-endian throughout. Header: magic "HGIV", version u32, family u8,
    k u16, L u16, node count u32. Then one record per node in depth-first
    POSTORDER (every child precedes its parent; sibling order preserved;
    root last): parent record index u32 (0xFFFFFFFF for the root), centroid
    length u32, centroid f32s, and, for leaves only, idf f32. Postorder makes
    the conditional idf field streamable: record i is a leaf iff no earlier
    record named i as its parent.
    """
    order = _emit_postorder(vocab.root)
    pos = {id(node): i for i, node in enumerate(order)}
    parent_of = {}
    for node in order:
        for child in node.children:
            parent_of[id(child)] = pos[id(node)]

    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, int(vocab.family), vocab.k, vocab.L, len(order)))
        for node in order:
            parent = parent_of.get(id(node), _ROOT_PARENT)
            centroid = np.ascontiguousarray(node.centroid, dtype="<f4")
            fh.write(_NODE_HEAD.pack(parent, centroid.shape[0]))
            fh.write(centroid.tobytes())
            if node.is_leaf:
                fh.write(_F32.pack(node.idf))


def load_vocabulary(path) -> Vocabulary:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise VocabularyFileError("vocabulary file shorter than its header")
    magic, version, family, k, L, count = _HEADER.unpack_from(data, 0)
    if magic != _MAGIC:
        raise VocabularyFileError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise VocabularyFileError(f"unsupported vocabulary version {version}")
    if count == 0:
        raise VocabularyFileError("vocabulary has no nodes")

    offset = _HEADER.size
    nodes: list = []
    parents: list = []
    seen_as_parent = set()
    for i in range(count):
        if offset + _NODE_HEAD.size > len(data):
            raise VocabularyFileError("vocabulary file truncated in a node header")
        parent, clen = _NODE_HEAD.unpack_from(data, offset)
        offset += _NODE_HEAD.size
        end = offset + 4 * clen
        if end > len(data):
            raise VocabularyFileError("vocabulary file truncated in a centroid")
        centroid = np.frombuffer(data[offset:end], dtype="<f4").copy()
        offset = end
        node = _Node(centroid)
        if i not in seen_as_parent:  # leaf: children always precede parents
            if offset + 4 > len(data):
                raise VocabularyFileError("vocabulary file truncated in an idf value")
            (node.idf,) = _F32.unpack_from(data, offset)
            if node.idf < 0:
                raise VocabularyFileError(f"negative idf {node.idf}")
            offset += 4
        nodes.append(node)
        parents.append(parent)
        if parent != _ROOT_PARENT:
            if parent <= i or parent >= count:
                raise VocabularyFileError(f"node {i} has invalid parent {parent}")
            seen_as_parent.add(parent)
    if offset != len(data):
        raise VocabularyFileError(f"{len(data) - offset} trailing bytes after the last node")

    roots = [i for i, p in enumerate(parents) if p == _ROOT_PARENT]
    if len(roots) != 1:
        raise VocabularyFileError(f"expected exactly one root node, found {len(roots)}")
    for i, p in enumerate(parents):
        if p != _ROOT_PARENT:
            nodes[p].children.append(nodes[i])
    root = nodes[roots[0]]
    for node in nodes:
        node.finalize()

    word_count = _index_tree(root)
    if word_count > k**L:
        raise VocabularyFileError(f"leaf count {word_count} exceeds k^L = {k ** L}")

    def _depth(node, d=0):
        return d if node.is_leaf else max(_depth(c, d + 1) for c in node.children)

    if _depth(root) > L:
        raise VocabularyFileError(f"tree deeper than declared depth {L}")
    idf = np.zeros(word_count)
    for node in nodes:
        if node.is_leaf:
            idf[node.word_id] = node.idf
    return Vocabulary(
        family=FeatureFamily(family),
        k=k,
        L=L,
        root=root,
        word_count=word_count,
        leaf_idf=idf,
    )
