"""Keypoint dedup and triple-frame merge, checked against brute-force
reimplementations written directly from the documented decision rules."""

import numpy as np
import pytest

from hgiloop.core import DedupParams, FeatureFamily, FrameFeatures
from hgiloop.geom_features import (
    dedup_keypoints,
    mean_cosine_similarity,
    merge_triplet,
    neighbor_set,
)


def make_frame(keypoints, descriptors, frame_id=0):
    return FrameFeatures(
        frame_id=frame_id,
        family=FeatureFamily.GEOMETRIC,
        keypoints=np.asarray(keypoints, dtype=np.float64),
        descriptors=np.asarray(descriptors, dtype=np.float64),
    )


def random_frame(rng, n, dim=16, extent=60.0, frame_id=0):
    return make_frame(
        rng.uniform(0, extent, size=(n, 2)),
        rng.normal(size=(n, dim)),
        frame_id=frame_id,
    )


# --- independent oracles -------------------------------------------------

def brute_neighbors(kps, i, T):
    """All j != i with squared distance < T, by direct enumeration."""
    out = set()
    for j in range(len(kps)):
        if j == i:
            continue
        dx = float(kps[i][0]) - float(kps[j][0])
        dy = float(kps[i][1]) - float(kps[j][1])
        if dx * dx + dy * dy < T:
            out.add(j)
    return out


def brute_cosine(a, b):
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def brute_dedup_keep(frame, params):
    """Per-keypoint keep/drop decisions with batch semantics."""
    kps = frame.keypoints.astype(np.float64)
    desc = frame.descriptors.astype(np.float64)
    keep = []
    for i in range(len(frame)):
        members = brute_neighbors(kps, i, params.T)
        if len(members) <= params.N:
            keep.append(i)
            continue
        mean = np.mean([brute_cosine(desc[i], desc[j]) for j in sorted(members)])
        if mean <= params.s_min:
            keep.append(i)
    return keep


def brute_merge(prev, center, nxt, params):
    """Iterative most-similar-pair removal, transcribed from the documented
    tie rules: drop the non-center member when possible, preferring the
    earlier source frame, then the lower within-frame index."""
    frames = (prev, center, nxt)
    pool = []  # (source frame, index within source, descriptor)
    for t, f in enumerate(frames):
        for j in range(len(f)):
            pool.append([t, j, f.descriptors[j].astype(np.float64)])
    target = len(center)
    alive = list(range(len(pool)))
    while len(alive) > target:
        best_sim = -np.inf
        for a in alive:
            for b in alive:
                if a >= b or pool[a][0] == pool[b][0]:
                    continue
                if np.linalg.norm(pool[a][2]) == 0 or np.linalg.norm(pool[b][2]) == 0:
                    continue
                best_sim = max(best_sim, brute_cosine(pool[a][2], pool[b][2]))
        candidates = set()
        if best_sim > -np.inf:
            for a in alive:
                for b in alive:
                    if a >= b or pool[a][0] == pool[b][0]:
                        continue
                    if np.linalg.norm(pool[a][2]) == 0 or np.linalg.norm(pool[b][2]) == 0:
                        continue
                    if brute_cosine(pool[a][2], pool[b][2]) == best_sim:
                        non_center = [j for j in (a, b) if pool[j][0] != 1]
                        candidates.update(non_center if non_center else (a, b))
        else:
            candidates.update(j for j in alive if pool[j][0] != 1)
            if not candidates:
                candidates.update(alive)
        drop = min(candidates, key=lambda j: (pool[j][0], pool[j][1]))
        alive.remove(drop)
    return [(pool[j][0], pool[j][1]) for j in alive]


# --- neighbor_set ---------------------------------------------------------

class TestNeighborSet:
    def test_close_pair_far_singleton(self):
        f = make_frame([(0, 0), (3, 0), (100, 100)], np.eye(3))
        ns = neighbor_set(f, 0, DedupParams(T=50.0))
        assert ns.member_indices == {1}

    def test_single_keypoint_has_no_neighbors(self):
        f = make_frame([(5, 5)], [[1.0, 0.0]])
        assert len(neighbor_set(f, 0, DedupParams())) == 0

    def test_identical_keypoints_are_neighbors(self):
        f = make_frame([(5, 5), (5, 5)], np.eye(2))
        assert neighbor_set(f, 0, DedupParams(T=50.0)).member_indices == {1}

    def test_index_out_of_range(self):
        f = make_frame([(5, 5)], [[1.0]])
        with pytest.raises(IndexError):
            neighbor_set(f, 1, DedupParams())

    def test_matches_brute_force_and_is_symmetric(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            f = random_frame(rng, int(rng.integers(1, 40)), extent=25.0)
            params = DedupParams(T=float(rng.uniform(1, 120)))
            sets = [neighbor_set(f, i, params).member_indices for i in range(len(f))]
            for i in range(len(f)):
                assert sets[i] == brute_neighbors(f.keypoints, i, params.T)
                for j in sets[i]:
                    assert i in sets[j]

    def test_threshold_is_strict_on_squared_distance(self):
        # squared distance exactly T (5^2 + 5^2 = 50, exact in floats) must
        # not count as a neighbor
        f = make_frame([(0, 0), (5, 5)], np.eye(2))
        assert len(neighbor_set(f, 0, DedupParams(T=50.0))) == 0
        assert len(neighbor_set(f, 0, DedupParams(T=50.0 + 1e-9))) == 1


class TestMeanCosineSimilarity:
    def test_identical_descriptors_give_one(self):
        f = make_frame([(0, 0), (1, 0), (2, 0)], np.ones((3, 4)))
        ns = neighbor_set(f, 0, DedupParams())
        assert mean_cosine_similarity(f, 0, ns) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_neighbor_gives_zero(self):
        f = make_frame([(0, 0), (1, 0)], [[1.0, 0.0], [0.0, 1.0]])
        ns = neighbor_set(f, 0, DedupParams())
        assert mean_cosine_similarity(f, 0, ns) == pytest.approx(0.0, abs=1e-12)

    def test_half_from_one_aligned_one_orthogonal(self):
        f = make_frame(
            [(0, 0), (1, 0), (0, 1)],
            [[1.0, 0.0], [2.0, 0.0], [0.0, 3.0]],
        )
        ns = neighbor_set(f, 0, DedupParams())
        assert ns.member_indices == {1, 2}
        assert mean_cosine_similarity(f, 0, ns) == pytest.approx(0.5, abs=1e-12)

    def test_empty_neighbors_rejected(self):
        f = make_frame([(0, 0), (100, 100)], np.eye(2))
        with pytest.raises(ValueError):
            mean_cosine_similarity(f, 0, neighbor_set(f, 0, DedupParams()))

    def test_zero_norm_descriptor_rejected(self):
        f = make_frame([(0, 0), (1, 0)], [[1.0, 0.0], [0.0, 0.0]])
        ns = neighbor_set(f, 0, DedupParams())
        with pytest.raises(ValueError):
            mean_cosine_similarity(f, 0, ns)

    def test_result_in_unit_interval_symmetric(self):
        rng = np.random.default_rng(42)
        f = random_frame(rng, 30, extent=10.0)
        for i in range(len(f)):
            ns = neighbor_set(f, i, DedupParams(T=200.0))
            if len(ns) == 0:
                continue
            v = mean_cosine_similarity(f, i, ns)
            assert -1.0 - 1e-12 <= v <= 1.0 + 1e-12


class TestDedupKeypoints:
    def test_coincident_identical_all_discarded(self):
        # 12 coincident keypoints, identical descriptors: each has 11 > N
        # neighbors with mean similarity 1.0 > s_min, so none survive.
        f = make_frame(np.full((12, 2), 5.0), np.ones((12, 6)))
        out = dedup_keypoints(f, DedupParams(T=50.0, N=10, s_min=0.6))
        assert len(out) == 0

    def test_coincident_orthogonal_all_kept(self):
        f = make_frame(np.full((12, 2), 5.0), np.eye(12))
        out = dedup_keypoints(f, DedupParams(T=50.0, N=10, s_min=0.6))
        assert len(out) == 12

    def test_small_frames_pass_through(self):
        rng = np.random.default_rng(42)
        params = DedupParams()
        for n in range(0, params.N + 2):
            f = random_frame(rng, n, extent=1.0)
            out = dedup_keypoints(f, params)
            assert np.array_equal(out.keypoints, f.keypoints)
            assert np.array_equal(out.descriptors, f.descriptors)

    def test_survivors_preserve_input_order(self):
        rng = np.random.default_rng(42)
        f = random_frame(rng, 80, extent=12.0)
        out = dedup_keypoints(f, DedupParams(T=60.0, N=3, s_min=0.0))
        keep = brute_dedup_keep(f, DedupParams(T=60.0, N=3, s_min=0.0))
        assert np.array_equal(out.keypoints, f.keypoints[keep])
        assert np.array_equal(out.descriptors, f.descriptors[keep])

    def test_matches_brute_force_exactly(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            n = int(rng.integers(0, 120))
            f = random_frame(rng, n, extent=20.0)
            params = DedupParams(
                T=float(rng.uniform(5, 100)),
                N=int(rng.integers(0, 8)),
                s_min=float(rng.uniform(-0.5, 0.9)),
            )
            out = dedup_keypoints(f, params)
            keep = brute_dedup_keep(f, params)
            assert np.array_equal(out.keypoints, f.keypoints[keep])
            assert np.array_equal(out.descriptors, f.descriptors[keep])

    def test_decisions_invariant_under_permutation(self):
        rng = np.random.default_rng(42)
        f = random_frame(rng, 60, extent=15.0)
        params = DedupParams(T=80.0, N=4, s_min=0.3)
        kept = dedup_keypoints(f, params)
        kept_set = {tuple(k) for k in kept.keypoints.tolist()}
        for _ in range(5):
            perm = rng.permutation(len(f))
            g = make_frame(f.keypoints[perm], f.descriptors[perm])
            kept_perm = dedup_keypoints(g, params)
            assert {tuple(k) for k in kept_perm.keypoints.tolist()} == kept_set

    def test_idempotent_and_never_grows(self):
        rng = np.random.default_rng(42)
        for _ in range(10):
            f = random_frame(rng, 70, extent=14.0)
            params = DedupParams(T=70.0, N=3, s_min=0.2)
            once = dedup_keypoints(f, params)
            assert len(once) <= len(f)
            twice = dedup_keypoints(once, params)
            assert np.array_equal(once.keypoints, twice.keypoints)

    def test_zero_norm_descriptors_do_not_raise(self):
        f = make_frame(np.full((13, 2), 2.0), np.zeros((13, 4)))
        out = dedup_keypoints(f, DedupParams(T=50.0, N=10, s_min=0.6))
        # zero-norm pairs contribute cosine 0.0 <= s_min, so all survive
        assert len(out) == 13

    def test_requires_geometric_family(self):
        f = FrameFeatures(0, FeatureFamily.SALIENT,
                          keypoints=np.zeros((1, 2)),
                          descriptors=np.zeros((1, 128), dtype=np.uint8))
        with pytest.raises(ValueError):
            dedup_keypoints(f, DedupParams())


class TestMergeTriplet:
    def test_count_contract_identical_frames(self):
        kps = [(i * 10.0, 0.0) for i in range(5)]
        desc = np.eye(5)
        frames = [make_frame(kps, desc, frame_id=i) for i in range(3)]
        out = merge_triplet(*frames, DedupParams())
        assert len(out) == 5
        assert out.frame_id == 1

    def test_empty_neighbors_return_center(self):
        empty0 = make_frame(np.zeros((0, 2)), np.zeros((0, 4)), frame_id=0)
        empty2 = make_frame(np.zeros((0, 2)), np.zeros((0, 4)), frame_id=2)
        center = random_frame(np.random.default_rng(42), 7, dim=4, frame_id=1)
        out = merge_triplet(empty0, center, empty2, DedupParams())
        assert np.array_equal(out.keypoints, center.keypoints)
        assert np.array_equal(out.descriptors, center.descriptors)
        assert out.frame_id == 1

    def test_cross_frame_duplicate_removed_first(self):
        # one descriptor duplicated between prev and next: its pair has
        # cosine 1.0, so a member of that pair is removed first and the
        # output returns to the center's size of 2.
        dup = [1.0, 0.0, 0.0, 0.0]
        prev = make_frame([(0, 0), (1, 0)], [dup, [0, 1, 0, 0]], frame_id=0)
        center = make_frame([(2, 0), (3, 0)], [[0, 0, 1, 0], [0, 0, 0, 1]], frame_id=1)
        nxt = make_frame([(4, 0), (5, 0)], [dup, [1, 1, 1, 1]], frame_id=2)
        out = merge_triplet(prev, center, nxt, DedupParams())
        assert len(out) == 2
        expected = brute_merge(prev, center, nxt, DedupParams())
        assert len(expected) == 2

    def test_matches_brute_force(self):
        rng = np.random.default_rng(42)
        for _ in range(15):
            sizes = rng.integers(0, 9, size=3)
            frames = [random_frame(rng, int(sizes[t]), dim=6, frame_id=t) for t in range(3)]
            out = merge_triplet(*frames, DedupParams())
            expected = brute_merge(*frames, DedupParams())
            got = []
            pool_kps = [f.keypoints for f in frames]
            for t, j in expected:
                got.append(pool_kps[t][j])
            if got:
                assert np.array_equal(out.keypoints, np.stack(got))
            else:
                assert len(out) == 0

    def test_matches_brute_force_with_ties(self):
        # small integer descriptors force exact cosine ties
        rng = np.random.default_rng(42)
        for _ in range(15):
            sizes = rng.integers(1, 6, size=3)
            frames = [
                make_frame(
                    rng.uniform(0, 10, size=(int(sizes[t]), 2)),
                    rng.integers(0, 2, size=(int(sizes[t]), 3)).astype(float),
                    frame_id=t,
                )
                for t in range(3)
            ]
            out = merge_triplet(*frames, DedupParams())
            expected = brute_merge(*frames, DedupParams())
            assert len(out) == len(expected) == len(frames[1])
            got = [tuple(frames[t].keypoints[j]) for t, j in expected]
            assert [tuple(k) for k in out.keypoints] == got

    def test_center_keypoints_preferred(self):
        # duplicate between center and prev: the prev member is dropped
        dup = [1.0, 0.0]
        prev = make_frame([(0, 0)], [dup], frame_id=0)
        center = make_frame([(9, 9)], [dup], frame_id=1)
        nxt = make_frame(np.zeros((0, 2)), np.zeros((0, 2)), frame_id=2)
        out = merge_triplet(prev, center, nxt, DedupParams())
        assert len(out) == 1
        assert tuple(out.keypoints[0]) == (9.0, 9.0)

    def test_requires_consecutive_ids(self):
        f0 = make_frame([(0, 0)], [[1.0]], frame_id=0)
        f1 = make_frame([(0, 0)], [[1.0]], frame_id=1)
        f5 = make_frame([(0, 0)], [[1.0]], frame_id=5)
        with pytest.raises(ValueError):
            merge_triplet(f0, f1, f5, DedupParams())

    def test_mismatched_descriptor_lengths_rejected(self):
        f0 = make_frame([(0, 0)], [[1.0, 0.0]], frame_id=0)
        f1 = make_frame([(0, 0)], [[1.0]], frame_id=1)
        f2 = make_frame([(0, 0)], [[1.0, 0.0]], frame_id=2)
        with pytest.raises(ValueError):
            merge_triplet(f0, f1, f2, DedupParams())
