import numpy as np
import pytest

from sepdiar.cluster import (
    AffinityMatrix,
    ClusterError,
    OracleOverlapDetector,
    centroid,
    cluster_centroids,
    cluster_purity,
    cosine_affinity,
    extract_windows,
    overlap_filter,
    spectral_cluster,
    windows_for_duration,
)
from sepdiar.embed import SpeakerEmbedding
from sepdiar.signal import Waveform

SR = 16000


def unit(vec):
    return SpeakerEmbedding.from_raw(np.asarray(vec, dtype=float))


def blob(rng, center, n, sigma=0.05):
    return [unit(center + sigma * rng.normal(size=len(center))) for _ in range(n)]


# --- windows --------------------------------------------------------------------


def test_windows_exact_multiple():
    assert windows_for_duration(6.0) == [(0.0, 2.0), (2.0, 4.0), (4.0, 6.0)]


def test_windows_partial_kept_at_one_second():
    assert windows_for_duration(5.0) == [(0.0, 2.0), (2.0, 4.0), (4.0, 5.0)]


def test_windows_partial_dropped_below_one_second():
    assert windows_for_duration(4.5) == [(0.0, 2.0), (2.0, 4.0)]


def test_extract_windows_from_waveform():
    x = Waveform(np.zeros(SR * 5))
    assert extract_windows(x) == [(0.0, 2.0), (2.0, 4.0), (4.0, 5.0)]


# --- overlap filter ---------------------------------------------------------------


class StubDetector:
    def __init__(self, codes_by_window):
        self.codes_by_window = codes_by_window

    def classify_window(self, start_s, end_s):
        return np.asarray(self.codes_by_window[(start_s, end_s)])


def test_overlap_filter_all_single_keeps_all():
    wins = [(0.0, 2.0), (2.0, 4.0)]
    det = StubDetector({w: [1] * 10 for w in wins})
    assert overlap_filter(wins, det) == wins


def test_overlap_filter_all_multi_drops_all():
    wins = [(0.0, 2.0), (2.0, 4.0)]
    det = StubDetector({w: [2] * 10 for w in wins})
    assert overlap_filter(wins, det) == []


def test_overlap_filter_majority_rule():
    wins = [(0.0, 2.0), (2.0, 4.0), (4.0, 6.0)]
    det = StubDetector(
        {
            wins[0]: [1] * 6 + [2] * 4,  # majority single: kept
            wins[1]: [1] * 4 + [2] * 6,  # majority multi: dropped
            wins[2]: [1] * 5 + [0] * 5,  # tie is not a strict majority: dropped
        }
    )
    assert overlap_filter(wins, det) == [wins[0]]


def test_oracle_detector_on_mixture(toy_mixture):
    det = OracleOverlapDetector(toy_mixture)
    codes = det.classify_window(0.0, toy_mixture.duration_s)
    assert len(codes) == toy_mixture.activity.shape[1]
    counts = toy_mixture.activity.sum(axis=0)
    np.testing.assert_array_equal(codes == 2, counts >= 2)
    np.testing.assert_array_equal(codes == 0, counts == 0)


def test_oracle_filter_matches_label_count(toy_mixture):
    """The filter keeps exactly the windows whose single-speaker frame share
    is a strict majority, recomputed directly from the activity grid."""
    det = OracleOverlapDetector(toy_mixture)
    wins = extract_windows(toy_mixture.mix)
    kept = overlap_filter(wins, det)
    fps = SR / toy_mixture.stft_config.hop
    expected = []
    counts = toy_mixture.activity.sum(axis=0)
    for w0, w1 in wins:
        t0 = int(np.ceil(w0 * fps - 1e-9))
        t1 = min(int(np.ceil(w1 * fps - 1e-9)), len(counts))
        single = np.count_nonzero(counts[t0:t1] == 1)
        if single * 2 > (t1 - t0):
            expected.append((w0, w1))
    assert kept == expected


# --- affinity and clustering -------------------------------------------------------


def test_affinity_validation():
    with pytest.raises(ClusterError):
        AffinityMatrix(np.array([[1.0, 0.5], [0.4, 1.0]]))  # asymmetric
    with pytest.raises(ClusterError):
        AffinityMatrix(np.array([[0.9, 0.5], [0.5, 1.0]]))  # diagonal != 1


def test_cosine_affinity_properties(rng):
    embs = blob(rng, np.eye(6)[0], 4) + blob(rng, np.eye(6)[3], 4)
    a = cosine_affinity(embs).values
    assert a.shape == (8, 8)
    assert np.all(np.diag(a) == 1.0)
    assert np.max(np.abs(a - a.T)) == 0.0


def test_two_blobs_perfect_partition(rng):
    c1, c2 = np.zeros(10), np.zeros(10)
    c1[0] = 1.0
    c2[5] = 1.0
    embs = blob(rng, c1, 10) + blob(rng, c2, 10)
    got = spectral_cluster(embs)
    assert got.k_est == 2
    truth = np.array([0] * 10 + [1] * 10)
    assert cluster_purity(truth, got.labels) == 1.0


def test_identical_embeddings_single_cluster():
    e = unit(np.ones(4))
    got = spectral_cluster([e] * 6)
    assert got.k_est == 1
    assert np.all(got.labels == 0)


def test_requires_two_embeddings():
    with pytest.raises(ClusterError):
        spectral_cluster([unit(np.ones(3))])


def test_permutation_equivariance(rng):
    c1, c2 = np.zeros(8), np.zeros(8)
    c1[0] = 1.0
    c2[4] = 1.0
    embs = blob(rng, c1, 6) + blob(rng, c2, 6)
    base = spectral_cluster(embs, k=2, seed=0)
    perm = rng.permutation(len(embs))
    permuted = spectral_cluster([embs[i] for i in perm], k=2, seed=0)
    # partitions must agree up to relabeling
    for i in range(len(embs)):
        for j in range(len(embs)):
            same_base = base.labels[perm[i]] == base.labels[perm[j]]
            same_perm = permuted.labels[i] == permuted.labels[j]
            assert same_base == same_perm


def test_affinity_scale_invariance(rng):
    """Uniform positive scaling of the affinity leaves the partition alone."""
    from sepdiar.cluster import _kmeans

    c1, c2 = np.zeros(6), np.zeros(6)
    c1[0], c2[3] = 1.0, 1.0
    embs = blob(rng, c1, 5) + blob(rng, c2, 5)
    a = np.clip(cosine_affinity(embs).values, 0.0, None)

    def partition(mat, k=2):
        d = mat.sum(axis=1)
        inv = 1.0 / np.sqrt(np.maximum(d, 1e-12))
        lap = np.eye(len(mat)) - inv[:, None] * mat * inv[None, :]
        vals, vecs = np.linalg.eigh(lap)
        u = vecs[:, :k]
        u = u / np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-12)
        labels, _ = _kmeans(u, k, np.random.default_rng(0))
        return labels

    base = partition(a)
    scaled = partition(7.3 * a)
    assert np.array_equal(base, scaled) or np.array_equal(base, 1 - scaled)


def test_known_k_populates_all_clusters(rng):
    c1, c2, c3 = np.zeros(9), np.zeros(9), np.zeros(9)
    c1[0], c2[3], c3[6] = 1.0, 1.0, 1.0
    embs = blob(rng, c1, 5) + blob(rng, c2, 5) + blob(rng, c3, 5)
    got = spectral_cluster(embs, k=3, seed=0)
    assert got.k_est == 3
    assert len(np.unique(got.labels)) == 3


def test_underpopulated_clusters_warn(rng, caplog):
    import logging

    embs = blob(rng, np.eye(4)[0], 6, sigma=0.01)
    with caplog.at_level(logging.WARNING):
        got = spectral_cluster(embs, k=4, seed=0)
    # one tight blob cannot fill 4 clusters
    if len(np.unique(got.labels)) < 4:
        assert "populated" in caplog.text


# --- centroids ----------------------------------------------------------------------


def test_centroid_singleton():
    e = unit(np.array([0.0, 1.0, 0.0]))
    np.testing.assert_array_equal(centroid([e]).values, e.values)


def test_centroid_symmetric_pair_is_axis():
    a = unit(np.array([1.0, 0.2]))
    b = unit(np.array([1.0, -0.2]))
    c = centroid([a, b])
    np.testing.assert_allclose(c.values, [1.0, 0.0], atol=1e-12)


def test_centroid_empty_rejected():
    with pytest.raises(ClusterError):
        centroid([])


def test_centroid_of_noisy_copies_recovers_direction():
    """Monte-Carlo oracle: 100 noisy copies at sigma=0.05 per coordinate."""
    rng = np.random.default_rng(99)
    e = np.zeros(20)
    e[7] = 1.0
    noisy = [unit(e + 0.05 * rng.normal(size=20)) for _ in range(100)]
    c = centroid(noisy)
    assert float(np.dot(c.values, e)) > 0.99


def test_cluster_centroids_per_cluster(rng):
    c1, c2 = np.zeros(6), np.zeros(6)
    c1[0], c2[3] = 1.0, 1.0
    embs = blob(rng, c1, 4) + blob(rng, c2, 4)
    got = spectral_cluster(embs, k=2, seed=0)
    cents = cluster_centroids(embs, got)
    assert len(cents) == 2
    dots = sorted(abs(float(np.dot(c.values, c1))) for c in cents)
    assert dots[1] > 0.95  # one centroid aligned with each blob


def test_cluster_purity_bounds():
    assert cluster_purity([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert cluster_purity([0, 1, 0, 1], [0, 0, 0, 0]) == 0.5
    with pytest.raises(ClusterError):
        cluster_purity([], [])
