import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from codebook import (
    AssignmentStore,
    ClusterCodebook,
    assign_batch,
    assign_item,
    kmeans,
    load_assignments,
    load_codebook,
    persist_assignments,
    refit_codebook,
    reseed_dead_clusters,
    save_codebook,
    update_codebook_ema,
    update_codebook_ema_batch,
)
from errors import InvalidInputError, MalformedRecordError


def make_codebook(primary, secondary, decay=0.99):
    primary = np.asarray(primary, dtype=np.float64)
    secondary = np.asarray(secondary, dtype=np.float64)
    return ClusterCodebook(primary, secondary, np.zeros(len(primary)), np.zeros(len(secondary)), decay)


def brute_force(embedding, centroids):
    best, best_dist = 0, None
    for i, c in enumerate(centroids):
        dist = float(np.sum((embedding - c) ** 2))
        if best_dist is None or dist < best_dist:
            best, best_dist = i, dist
    return best


finite = st.floats(min_value=-50, max_value=50, allow_nan=False, allow_infinity=False)


class TestAssignItem:
    def test_exact_centroid_match(self, rng):
        cb = ClusterCodebook.random(16, 512, 8, rng)
        v = cb.primary_centroids[7].copy()
        cb.secondary_centroids[300] = v
        assert assign_item(v, cb) == (7, 300)

    def test_two_dimensional_example(self):
        cb = make_codebook([(0, 0), (10, 10)], [(0, 1), (9, 9)])
        assert assign_item(np.array([1.0, 1.0]), cb) == (0, 0)

    def test_tie_breaks_to_lowest_index(self):
        cb = make_codebook([(9, 9), (9, 9), (-1, 0), (8, 8), (8, 8), (1, 0)], [(0, 0)])
        assert assign_item(np.array([0.0, 0.0]), cb)[0] == 2

    def test_dimension_mismatch(self, rng):
        cb = ClusterCodebook.random(4, 8, 3, rng)
        with pytest.raises(InvalidInputError):
            assign_item(np.zeros(4), cb)

    def test_non_finite_embedding(self, rng):
        cb = ClusterCodebook.random(4, 8, 3, rng)
        with pytest.raises(InvalidInputError):
            assign_item(np.array([0.0, np.nan, 1.0]), cb)

    @given(
        st.integers(min_value=1, max_value=6).flatmap(
            lambda d: st.tuples(
                arrays(np.float64, (d,), elements=finite),
                arrays(np.float64, (5, d), elements=finite),
                arrays(np.float64, (9, d), elements=finite),
            )
        )
    )
    def test_matches_exhaustive_scan(self, case):
        embedding, primary, secondary = case
        cb = make_codebook(primary, secondary)
        assert assign_item(embedding, cb) == (brute_force(embedding, primary), brute_force(embedding, secondary))

    def test_oracle_on_many_random_cases(self):
        rng = np.random.default_rng(99)
        for _ in range(200):
            d = int(rng.integers(1, 9))
            cb = ClusterCodebook.random(int(rng.integers(1, 20)), int(rng.integers(1, 60)), d, rng)
            v = rng.normal(size=d)
            assert assign_item(v, cb) == (
                brute_force(v, cb.primary_centroids),
                brute_force(v, cb.secondary_centroids),
            )

    def test_batch_agrees_with_single(self, rng):
        cb = ClusterCodebook.random(8, 32, 4, rng)
        vectors = rng.normal(size=(50, 4))
        primary, secondary = assign_batch(vectors, cb)
        assert [assign_item(v, cb) for v in vectors] == list(zip(primary.tolist(), secondary.tolist()))

    def test_repeated_calls_bit_exact(self, rng):
        cb = ClusterCodebook.random(8, 32, 4, rng)
        v = rng.normal(size=4)
        assert assign_item(v, cb) == assign_item(v.copy(), cb)


class TestEmaUpdate:
    def test_empty_assignments_leave_codebook(self, rng):
        cb = ClusterCodebook.random(4, 8, 3, rng)
        assert update_codebook_ema(cb, []) is cb

    def test_zero_decay_replaces_centroid(self, rng):
        cb = ClusterCodebook.random(4, 8, 3, rng, ema_decay=0.0)
        v = np.array([1.0, 2.0, 3.0])
        updated = update_codebook_ema(cb, [(v, 3, 5)])
        np.testing.assert_array_equal(updated.primary_centroids[3], v)
        np.testing.assert_array_equal(updated.secondary_centroids[5], v)

    def test_converges_to_repeated_embedding(self, rng):
        cb = ClusterCodebook.random(4, 8, 3, rng, ema_decay=0.9)
        v = np.array([0.5, -1.0, 2.0])
        for _ in range(100):
            cb = update_codebook_ema(cb, [(v, 1, 2)])
        np.testing.assert_allclose(cb.primary_centroids[1], v, atol=1e-4)
        np.testing.assert_allclose(cb.secondary_centroids[2], v, atol=1e-4)

    def test_untouched_clusters_bit_identical(self, rng):
        cb = ClusterCodebook.random(4, 8, 3, rng)
        updated = update_codebook_ema(cb, [(np.ones(3), 0, 0), (np.zeros(3), 0, 1)])
        np.testing.assert_array_equal(updated.primary_centroids[1:], cb.primary_centroids[1:])
        np.testing.assert_array_equal(updated.secondary_centroids[2:], cb.secondary_centroids[2:])
        assert updated.dim == cb.dim

    def test_moves_toward_batch_mean(self, rng):
        cb = ClusterCodebook.random(2, 2, 2, rng, ema_decay=0.5)
        a, b = np.array([2.0, 0.0]), np.array([0.0, 2.0])
        updated = update_codebook_ema(cb, [(a, 0, 0), (b, 0, 0)])
        np.testing.assert_allclose(updated.primary_centroids[0], 0.5 * cb.primary_centroids[0] + 0.5 * np.array([1.0, 1.0]))
        assert updated.primary_counts[0] == pytest.approx(1.0)

    def test_original_snapshot_unchanged(self, rng):
        cb = ClusterCodebook.random(4, 8, 3, rng)
        before = cb.primary_centroids.copy()
        update_codebook_ema_batch(cb, np.ones((2, 3)), [0, 1], [0, 1])
        np.testing.assert_array_equal(cb.primary_centroids, before)

    def test_out_of_range_cluster(self, rng):
        cb = ClusterCodebook.random(4, 8, 3, rng)
        with pytest.raises(InvalidInputError):
            update_codebook_ema(cb, [(np.ones(3), 4, 0)])
        with pytest.raises(InvalidInputError):
            update_codebook_ema(cb, [(np.ones(3), 0, -1)])


class TestCodebookFitting:
    def test_refit_separates_blobs(self, rng):
        centers = np.array([[10.0, 0.0], [-10.0, 0.0], [0.0, 10.0]])
        points = np.concatenate([c + rng.normal(scale=0.1, size=(30, 2)) for c in centers])
        cb = refit_codebook(ClusterCodebook.random(3, 3, 2, rng), points, 10, rng)
        _, secondary = assign_batch(points, cb)
        for blob in range(3):
            assert len(set(secondary[blob * 30:(blob + 1) * 30].tolist())) == 1
        assert len(set(secondary.tolist())) == 3

    def test_restarts_never_raise_inertia(self, rng):
        points = np.concatenate([c + rng.normal(scale=0.5, size=(25, 3)) for c in rng.normal(scale=4.0, size=(6, 3))])

        def inertia(centers):
            return float(np.sum(np.min(((points[:, None, :] - centers[None]) ** 2).sum(axis=2), axis=1)))

        # the first restart draws exactly what a single run draws
        single, _ = kmeans(points, 6, 10, np.random.default_rng(9))
        best, counts = kmeans(points, 6, 10, np.random.default_rng(9), restarts=8)
        assert inertia(best) <= inertia(single) + 1e-9
        assert counts.sum() == len(points)

    def test_dead_clusters_move_to_items(self, rng):
        cb = ClusterCodebook.random(3, 4, 2, rng)
        embeddings = rng.normal(size=(10, 2))
        updated, n = reseed_dead_clusters(cb, np.array([5, 0, 1]), np.array([1, 1, 1, 0]), embeddings, rng)
        assert n == 2
        assert any(np.array_equal(updated.primary_centroids[1], e) for e in embeddings)
        assert any(np.array_equal(updated.secondary_centroids[3], e) for e in embeddings)
        np.testing.assert_array_equal(updated.primary_centroids[0], cb.primary_centroids[0])

    def test_no_dead_clusters(self, rng):
        cb = ClusterCodebook.random(2, 2, 2, rng)
        assert reseed_dead_clusters(cb, np.ones(2), np.ones(2), np.ones((3, 2)), rng) == (cb, 0)

    def test_invalid_decay_rejected(self):
        with pytest.raises(InvalidInputError):
            make_codebook([(0, 0)], [(0, 0)], decay=1.0)


class TestAssignmentStore:
    def test_exclusive_assignment(self):
        store = AssignmentStore(4, 8)
        store.set(1, 0, 0)
        store.set(1, 2, 3)
        assert len(store) == 1
        assert store[1] == (2, 3)

    def test_range_checked(self):
        store = AssignmentStore(4, 8)
        with pytest.raises(InvalidInputError):
            store.set(1, 4, 0)
        with pytest.raises(InvalidInputError):
            store.set(1, 0, 8)

    def test_members_of_secondary(self, small_store):
        assert small_store.members_of_secondary(2) == [5, 6]
        assert small_store.members_of_secondary(7) == []
        assert small_store.items_per_secondary() == {0: 2, 1: 2, 2: 2}

    def test_shape_of_loaded_store(self):
        store = AssignmentStore()
        store.set(1, 3, 9)
        assert store.shape == (4, 10)
        assert AssignmentStore().shape == (0, 0)


class TestAssignmentPersistence:
    def test_empty_store_round_trip(self, tmp_path):
        path = tmp_path / "assignments.tsv"
        persist_assignments(AssignmentStore(), path)
        assert path.read_text(encoding="utf-8") == "#trinity-assignments v1\n"
        assert load_assignments(path) == AssignmentStore()

    def test_single_record(self, tmp_path):
        path = tmp_path / "assignments.tsv"
        store = AssignmentStore()
        store.set(42, 7, 300)
        persist_assignments(store, path)
        assert path.read_text(encoding="utf-8").splitlines()[1] == "42\t7\t300"
        assert load_assignments(path) == store

    def test_large_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        items = rng.choice(10**6, size=10_000, replace=False)
        store = AssignmentStore.from_arrays(items, rng.integers(128, size=10_000), rng.integers(1024, size=10_000), 128, 1024)
        path = tmp_path / "assignments.tsv"
        persist_assignments(store, path)
        assert load_assignments(path, 128, 1024) == store

    def test_malformed_line_reports_number(self, tmp_path):
        path = tmp_path / "assignments.tsv"
        path.write_text("#trinity-assignments v1\n1\t2\t3\n2\tx\t3\n", encoding="utf-8")
        with pytest.raises(MalformedRecordError) as exc:
            load_assignments(path)
        assert exc.value.line_number == 3

    def test_duplicate_item_rejected(self, tmp_path):
        path = tmp_path / "assignments.tsv"
        path.write_text("#trinity-assignments v1\n1\t2\t3\n1\t2\t4\n", encoding="utf-8")
        with pytest.raises(MalformedRecordError, match="duplicate"):
            load_assignments(path)

    def test_wrong_header(self, tmp_path):
        path = tmp_path / "assignments.tsv"
        path.write_text("#something-else v1\n", encoding="utf-8")
        with pytest.raises(MalformedRecordError) as exc:
            load_assignments(path)
        assert exc.value.line_number == 1


def test_codebook_dump_round_trip(tmp_path, rng):
    cb = ClusterCodebook.random(3, 5, 4, rng, ema_decay=0.95)
    cb = update_codebook_ema(cb, [(rng.normal(size=4), 1, 2)])
    path = tmp_path / "codebook.tsv"
    save_codebook(cb, path)
    loaded = load_codebook(path)
    np.testing.assert_array_equal(loaded.primary_centroids, cb.primary_centroids)
    np.testing.assert_array_equal(loaded.secondary_centroids, cb.secondary_centroids)
    np.testing.assert_array_equal(loaded.secondary_counts, cb.secondary_counts)
    assert loaded.ema_decay == cb.ema_decay
