import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from llpco.datagen import PatchRaster, gen_blobs
from llpco.metrics import (
    accuracies,
    ari,
    confusion_matrix,
    hungarian_match,
    kmeans,
    knn_classify,
    nmi,
    predict_map,
)
from llpco.model import ModelConfig, ModelState, normalize_rows
from oracles import (
    accuracy_recount,
    ari_pairs,
    best_permutation_bruteforce,
    kmeans_1d_two_cluster_best,
    knn_naive,
    nmi_scalar,
)

labels_strategy = st.lists(st.integers(0, 3), min_size=2, max_size=12)


def test_hungarian_identity_dominant():
    np.testing.assert_array_equal(hungarian_match(np.diag([10, 10, 10])), [0, 1, 2])


def test_hungarian_anti_diagonal():
    M = np.fliplr(np.diag([5, 7, 9]))
    np.testing.assert_array_equal(hungarian_match(M), [2, 1, 0])


def test_hungarian_tie_break_is_lexicographic():
    # Every permutation is optimal; the smallest one is the identity.
    np.testing.assert_array_equal(hungarian_match(np.ones((4, 4), dtype=int)), [0, 1, 2, 3])


def test_hungarian_rejects_non_square():
    with pytest.raises(ValueError):
        hungarian_match(np.ones((2, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_hungarian_matches_bruteforce(seed, K):
    M = np.random.default_rng(seed).integers(0, 20, size=(K, K))
    perm = hungarian_match(M)
    best_val, best_perm = best_permutation_bruteforce(M)
    assert int(M[perm, np.arange(K)].sum()) == best_val
    np.testing.assert_array_equal(perm, best_perm)


def test_accuracies_perfect_assignment():
    acc_p, acc_h, perm = accuracies([0, 1, 2, 0], [0, 1, 2, 0], 3)
    assert acc_p == acc_h == 1.0
    np.testing.assert_array_equal(perm, [0, 1, 2])


def test_accuracies_pure_relabeling():
    acc_p, acc_h, perm = accuracies([0, 0, 1, 1], [1, 1, 0, 0], 2)
    assert acc_p == 0.0
    assert acc_h == 1.0
    np.testing.assert_array_equal(perm, [1, 0])


def test_accuracies_match_naive_recount():
    rng = np.random.default_rng(0)
    t = rng.integers(0, 4, 200)
    a = rng.integers(0, 4, 200)
    acc_p, acc_h, perm = accuracies(t, a, 4)
    ref_p, ref_h = accuracy_recount(t, a, perm)
    assert acc_p == pytest.approx(ref_p)
    assert acc_h == pytest.approx(ref_h)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_acc_h_never_below_acc_p(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 40))
    K = int(rng.integers(2, 5))
    t = rng.integers(0, K, n)
    a = rng.integers(0, K, n)
    acc_p, acc_h, _ = accuracies(t, a, K)
    assert acc_h >= acc_p


def test_nmi_identical_partitions():
    assert nmi([0, 1, 0, 1, 2], [0, 1, 0, 1, 2]) == pytest.approx(1.0)


def test_nmi_independent_partitions():
    assert nmi([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(0.0, abs=1e-12)


def test_nmi_trivial_edge_rules():
    assert nmi([0, 0, 0], [1, 1, 1]) == 1.0
    assert nmi([0, 0, 0], [0, 1, 2]) == 0.0


@settings(max_examples=60, deadline=None)
@given(labels_strategy, labels_strategy)
def test_nmi_matches_scalar_formula(u, v):
    n = min(len(u), len(v))
    u, v = u[:n], v[:n]
    assert nmi(u, v) == pytest.approx(min(1.0, max(0.0, nmi_scalar(u, v))), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(labels_strategy, labels_strategy)
def test_nmi_symmetric_and_relabel_invariant(u, v):
    n = min(len(u), len(v))
    u, v = u[:n], v[:n]
    assert nmi(u, v) == pytest.approx(nmi(v, u), abs=1e-12)
    relabeled = [3 - x for x in v]
    assert nmi(u, v) == pytest.approx(nmi(u, relabeled), abs=1e-12)


def test_ari_identical_partitions():
    assert ari([0, 0, 1, 2], [0, 0, 1, 2]) == 1.0


def test_ari_crossed_pairs_example():
    assert ari([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(-0.5)


@settings(max_examples=60, deadline=None)
@given(labels_strategy, labels_strategy)
def test_ari_matches_pair_count_oracle(u, v):
    n = min(len(u), len(v))
    u, v = u[:n], v[:n]
    assert ari(u, v) == pytest.approx(ari_pairs(u, v), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(labels_strategy, labels_strategy)
def test_ari_symmetric(u, v):
    n = min(len(u), len(v))
    u, v = u[:n], v[:n]
    assert ari(u, v) == pytest.approx(ari(v, u), abs=1e-12)


def _unit_rows(rng, n, d):
    return normalize_rows(rng.normal(size=(n, d)))


def test_knn_exact_match_with_k1():
    rng = np.random.default_rng(1)
    train = _unit_rows(rng, 10, 4)
    labels = np.arange(10) % 3
    pred = knn_classify(train, labels, train[[4]], k=1)
    assert pred[0] == labels[4]


def test_knn_separated_blobs_are_perfect():
    ds = gen_blobs(2, 6, [0.5, 0.5], centers_separation=50.0, sigma=0.1, n=200, seed=2)
    Z = normalize_rows(ds.features.astype(np.float64) + 1e-9)
    pred = knn_classify(Z[:150], ds.labels[:150], Z[150:], k=5)
    assert np.all(pred == ds.labels[150:])


def test_knn_matches_naive_scan():
    rng = np.random.default_rng(3)
    train = _unit_rows(rng, 50, 5)
    labels = rng.integers(0, 3, 50)
    test = _unit_rows(rng, 10, 5)
    for k in (1, 7, 25):
        np.testing.assert_array_equal(
            knn_classify(train, labels, test, k=k), knn_naive(train, labels, test, k)
        )


def test_knn_rotation_invariance():
    rng = np.random.default_rng(4)
    train = _unit_rows(rng, 30, 6)
    labels = rng.integers(0, 2, 30)
    test = _unit_rows(rng, 8, 6)
    Q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    np.testing.assert_array_equal(
        knn_classify(train, labels, test, k=9),
        knn_classify(train @ Q, labels, test @ Q, k=9),
    )


def test_knn_rejects_bad_k():
    rng = np.random.default_rng(5)
    train = _unit_rows(rng, 5, 3)
    with pytest.raises(ValueError):
        knn_classify(train, np.zeros(5, dtype=int), train, k=6)


def test_kmeans_recovers_separated_blobs_every_seed():
    ds = gen_blobs(3, 4, [0.4, 0.4, 0.2], centers_separation=40.0, sigma=0.2, n=120, seed=6)
    result = kmeans(ds.features.astype(np.float64), 3, seeds=(0, 1, 2, 3, 4))
    for assign, _ in result.per_seed:
        _, acc_h, _ = accuracies(ds.labels, assign, 3)
        assert acc_h == 1.0


def test_kmeans_k_equals_n_zero_inertia():
    rng = np.random.default_rng(7)
    Z = rng.normal(size=(6, 3))
    result = kmeans(Z, 6, seeds=(0,))
    assert result.inertia == pytest.approx(0.0, abs=1e-20)


def test_kmeans_matches_1d_exhaustive_split():
    rng = np.random.default_rng(8)
    z = np.concatenate([rng.normal(0, 1, 10), rng.normal(9, 1, 10)])[:, None]
    result = kmeans(z, 2, seeds=(0, 1, 2, 3, 4))
    assert result.inertia == pytest.approx(kmeans_1d_two_cluster_best(z[:, 0]), rel=1e-9)


def _two_class_raster_and_model():
    # Signatures far apart, tiny texture: a linear encoder that projects
    # onto the two signature directions classifies perfectly.
    H = W = 31
    labels = np.zeros((H, W), dtype=np.int32)
    labels[:, 16:] = 1
    sig = np.array([[4.0, 0.0], [0.0, 4.0]])
    values = sig[labels].transpose(2, 0, 1).astype(np.float32)
    raster = PatchRaster(values=values, labels=labels, class_count=2, patch_size=21)
    d = 2 * 21 * 21
    cfg = ModelConfig(input_dim=d, hidden_dims=(), embed_dim=2, cluster_count=2)
    W0 = np.zeros((d, 2), dtype=np.float64)
    W0[: d // 2, 0] = 1.0  # channel 0 mass
    W0[d // 2 :, 1] = 1.0  # channel 1 mass
    state = ModelState(
        config=cfg,
        weights=[W0],
        biases=[np.zeros(2)],
        prototypes=np.eye(2),
    )
    return raster, state


def test_predict_map_constant_interior_and_border():
    raster, state = _two_class_raster_and_model()
    grid = predict_map(state, raster)
    assert np.all(grid[:10, :] == -1)
    assert np.all(grid[:, :10] == -1)
    assert np.all(grid[-10:, :] == -1)
    interior = grid[10:-10, 10:-10]
    assert np.all(interior >= 0)


def test_predict_map_agrees_with_patch_level_accuracy():
    raster, state = _two_class_raster_and_model()
    grid = predict_map(state, raster)
    interior = grid[10:-10, 10:-10]
    truth = raster.labels[10:-10, 10:-10]
    # the hand-built model is exact, so the map matches the labels
    assert np.mean(interior == truth) == 1.0


def test_predict_map_applies_permutation():
    raster, state = _two_class_raster_and_model()
    swapped = predict_map(state, raster, permutation=np.array([1, 0]))
    plain = predict_map(state, raster)
    interior = slice(10, -10)
    assert np.all(swapped[interior, interior] == 1 - plain[interior, interior])


def test_confusion_matrix_counts():
    conf = confusion_matrix([0, 0, 1], [0, 1, 1], 2)
    np.testing.assert_array_equal(conf, [[1, 1], [0, 1]])
