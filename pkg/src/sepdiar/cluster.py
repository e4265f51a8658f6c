"""Enrollment-free target identification.

Fixed 2-second windows are cut from a recording, encoded, filtered down to
windows dominated by a single active speaker, grouped by spectral clustering
on the cosine affinity (normalized-Laplacian embedding + seeded k-means),
and summarized by per-cluster centroid embeddings.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .embed import SpeakerEmbedding, mean_embed, stack_embeddings
from .mixture import Mixture
from .signal import Waveform

logger = logging.getLogger(__name__)

NONSPEECH, SINGLE, MULTI = 0, 1, 2


class ClusterError(ValueError):
    pass


@dataclass(frozen=True)
class AffinityMatrix:
    """Symmetric cosine-similarity matrix with unit diagonal."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ClusterError(f"affinity must be square, got {v.shape}")
        if np.max(np.abs(v - v.T)) > 1e-9:
            raise ClusterError("affinity is not symmetric")
        if np.max(np.abs(np.diag(v) - 1.0)) > 1e-9:
            raise ClusterError("affinity diagonal must be 1")
        if v.min() < -1.0 - 1e-9 or v.max() > 1.0 + 1e-9:
            raise ClusterError("affinity entries must lie in [-1, 1]")


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray
    k_est: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        if labels.size and (labels.min() < 0 or labels.max() >= self.k_est):
            raise ClusterError("labels out of range for k_est")


def extract_windows(
    x: Waveform, win_s: float = 2.0, keep_partial_s: float = 1.0
) -> list[tuple[float, float]]:
    """Contiguous non-overlapping windows; a final partial is kept if long enough."""
    return windows_for_duration(x.duration_s, win_s, keep_partial_s)


def windows_for_duration(
    duration_s: float, win_s: float = 2.0, keep_partial_s: float = 1.0
) -> list[tuple[float, float]]:
    out = []
    start = 0.0
    while start + win_s <= duration_s + 1e-9:
        out.append((start, start + win_s))
        start += win_s
    if duration_s - start >= keep_partial_s - 1e-9 and duration_s - start > 1e-9:
        out.append((start, duration_s))
    return out


class OracleOverlapDetector:
    """Frame classification from a mixture's ground-truth activity grid."""

    def __init__(self, m: Mixture):
        self.frame_period_s = m.stft_config.hop / m.mix.sample_rate
        counts = m.activity.sum(axis=0)
        self.codes = np.where(counts == 0, NONSPEECH, np.where(counts == 1, SINGLE, MULTI))

    def classify_window(self, start_s: float, end_s: float) -> np.ndarray:
        """Codes of the frames whose centers fall in [start_s, end_s)."""
        t0 = int(np.ceil(start_s / self.frame_period_s - 1e-9))
        t1 = int(np.ceil(end_s / self.frame_period_s - 1e-9))
        t0 = max(0, min(t0, len(self.codes)))
        t1 = max(0, min(t1, len(self.codes)))
        return self.codes[t0:t1]


def overlap_filter(windows, detector) -> list[tuple[float, float]]:
    """Keep windows where the strict majority of frames is single-speaker."""
    kept = []
    for start_s, end_s in windows:
        codes = detector.classify_window(start_s, end_s)
        if len(codes) and np.count_nonzero(codes == SINGLE) * 2 > len(codes):
            kept.append((start_s, end_s))
    return kept


def cosine_affinity(embeddings: list[SpeakerEmbedding]) -> AffinityMatrix:
    e = stack_embeddings(embeddings)
    a = np.clip(e @ e.T, -1.0, 1.0)
    np.fill_diagonal(a, 1.0)
    return AffinityMatrix(a)


def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator, n_iter: int = 100):
    """Single seeded k-means run with k-means++ init; returns (labels, inertia)."""
    n = len(points)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    closest = np.full(n, np.inf)
    for c in range(1, k):
        d = np.sum((points - centers[c - 1]) ** 2, axis=1)
        closest = np.minimum(closest, d)
        total = closest.sum()
        if total <= 0:
            centers[c:] = points[rng.integers(n, size=k - c)]
            break
        centers[c] = points[rng.choice(n, p=closest / total)]
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(n_iter):
        d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(d2, axis=1)  # ties break to the lowest index
        for c in range(k):
            member = new_labels == c
            if member.any():
                centers[c] = points[member].mean(axis=0)
            else:
                # Reseed an empty cluster on the point farthest from its center.
                worst = int(np.argmax(d2[np.arange(n), new_labels]))
                centers[c] = points[worst]
                new_labels[worst] = c
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    inertia = float(np.sum((points - centers[labels]) ** 2))
    return labels, inertia


def spectral_cluster(
    embeddings: list[SpeakerEmbedding],
    k: int | None = None,
    k_max: int = 8,
    seed: int = 0,
    n_restarts: int = 50,
) -> ClusterAssignment:
    """Normalized-Laplacian spectral clustering on cosine affinity.

    With ``k`` absent the cluster count is the largest eigengap position
    among the smallest ``k_max`` Laplacian eigenvalues.
    """
    if len(embeddings) < 2:
        raise ClusterError("need at least 2 embeddings to cluster")
    affinity = cosine_affinity(embeddings).values
    n = len(affinity)
    if np.ptp(affinity) < 1e-12:
        return ClusterAssignment(np.zeros(n, dtype=np.int64), 1)

    a = np.clip(affinity, 0.0, None)  # Laplacian needs non-negative weights
    d = a.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(np.maximum(d, 1e-12))
    lap = np.eye(n) - inv_sqrt[:, None] * a * inv_sqrt[None, :]
    eigvals, eigvecs = np.linalg.eigh(lap)

    if k is None:
        upper = min(k_max, n)
        gaps = np.diff(eigvals[:upper])
        if len(gaps) == 0:
            k = 1
        else:
            k = int(np.argmax(gaps)) + 1
    k = max(1, min(int(k), n))
    if k == 1:
        return ClusterAssignment(np.zeros(n, dtype=np.int64), 1)

    u = eigvecs[:, :k]
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    u = u / np.maximum(norms, 1e-12)

    rng = np.random.default_rng(seed)
    best_labels, best_inertia = None, np.inf
    for _ in range(n_restarts):
        labels, inertia = _kmeans(u, k, rng)
        if inertia < best_inertia - 1e-15:
            best_labels, best_inertia = labels, inertia
    n_filled = len(np.unique(best_labels))
    if n_filled < k:
        logger.warning("requested %d clusters but only %d are populated", k, n_filled)
    return ClusterAssignment(best_labels, k)


def centroid(members: list[SpeakerEmbedding]) -> SpeakerEmbedding:
    """Unit-normalized mean of a cluster's member embeddings."""
    if not members:
        raise ClusterError("cannot take the centroid of an empty cluster")
    return mean_embed(members)


def cluster_centroids(
    embeddings: list[SpeakerEmbedding], assignment: ClusterAssignment
) -> list[SpeakerEmbedding]:
    out = []
    for c in range(assignment.k_est):
        members = [e for e, l in zip(embeddings, assignment.labels) if l == c]
        if members:
            out.append(centroid(members))
    return out


def cluster_purity(true_labels, pred_labels) -> float:
    """Fraction of points whose cluster's majority true label matches theirs."""
    true_labels = np.asarray(true_labels)
    pred_labels = np.asarray(pred_labels)
    if len(true_labels) != len(pred_labels) or len(true_labels) == 0:
        raise ClusterError("label arrays must be equal-length and non-empty")
    total = 0
    for c in np.unique(pred_labels):
        member_true = true_labels[pred_labels == c]
        _, counts = np.unique(member_true, return_counts=True)
        total += counts.max()
    return total / len(true_labels)
