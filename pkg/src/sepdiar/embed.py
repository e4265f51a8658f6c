"""Speaker encoder abstraction and noisy embedding sampling.

Training-time embeddings for a speaker are drawn with one of four strategies:

* ``V1`` -- oracle: encode the speaker's clean utterances.
* ``V2`` -- encode the speaker's solo (non-overlapped) sub-segments, audio
  taken from the mixture (identical to the clean source there).
* ``V3`` -- as V2 but each sub-segment is padded with silence before
  encoding.
* ``V4`` -- as V2 but each sub-segment is extended with mixture audio from
  the speaker's overlapped regions, totalling a configured fraction of the
  sub-segment's duration.
* ``UNIFORM_MIX`` -- one of V1..V4 uniformly per (mixture, speaker).

The toy encoder is a deterministic log-mel envelope feature, good enough to
tell apart the band-limited toy voices; any object with ``dim`` and
``encode(Waveform)`` can replace it, including precomputed embedding files.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mixture import Mixture, SegmentLabel
from .signal import StftConfig, Waveform, block_rms, stft

logger = logging.getLogger(__name__)

VARIANTS = ("V1", "V2", "V3", "V4")
UNIFORM_MIX = "UNIFORM_MIX"

_SILENCE_FLOOR_RMS = 1e-4  # absolute; toy silence is exactly zero


class EmbeddingError(ValueError):
    pass


@dataclass(frozen=True)
class SpeakerEmbedding:
    """Unit L2-norm real vector."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.ndim != 1:
            raise EmbeddingError(f"embedding must be 1-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise EmbeddingError("embedding has non-finite values")
        norm = np.linalg.norm(v)
        if abs(norm - 1.0) > 1e-6:
            raise EmbeddingError(f"embedding norm {norm} is not 1")

    @property
    def dim(self) -> int:
        return len(self.values)

    @classmethod
    def from_raw(cls, values: np.ndarray) -> "SpeakerEmbedding":
        v = np.asarray(values, dtype=np.float64)
        norm = np.linalg.norm(v)
        if norm < 1e-9:
            raise EmbeddingError("degenerate mean: zero vector cannot be normalized")
        return cls(v / norm)


def cosine(a: SpeakerEmbedding, b: SpeakerEmbedding) -> float:
    return float(np.dot(a.values, b.values))


def mean_embed(embeddings: list[SpeakerEmbedding]) -> SpeakerEmbedding:
    """Arithmetic mean re-normalized to unit length."""
    if not embeddings:
        raise EmbeddingError("cannot average an empty embedding list")
    dims = {e.dim for e in embeddings}
    if len(dims) != 1:
        raise EmbeddingError(f"mixed embedding dimensions {sorted(dims)}")
    return SpeakerEmbedding.from_raw(np.mean([e.values for e in embeddings], axis=0))


def stack_embeddings(embeddings: list[SpeakerEmbedding]) -> np.ndarray:
    return np.stack([e.values for e in embeddings])


# ---------------------------------------------------------------------------
# Toy encoder
# ---------------------------------------------------------------------------


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_bins: int, sr: int, fmin: float = 50.0) -> np.ndarray:
    """Triangular mel filter bank, shape (n_mels, n_bins)."""
    fmax = sr / 2.0
    mel_pts = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    freqs = np.linspace(0.0, fmax, n_bins)
    fb = np.zeros((n_mels, n_bins))
    for i in range(n_mels):
        lo, mid, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (freqs - lo) / max(mid - lo, 1e-9)
        down = (hi - freqs) / max(hi - mid, 1e-9)
        fb[i] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


class ToyEncoder:
    """Deterministic envelope encoder: centered log-mel power over voiced frames."""

    def __init__(self, dim: int = 40, cfg: StftConfig | None = None):
        self.dim = dim
        self.cfg = cfg or StftConfig()
        self._fb_cache: dict[tuple[int, int], np.ndarray] = {}

    def _filterbank(self, sr: int) -> np.ndarray:
        key = (self.cfg.n_bins, sr)
        if key not in self._fb_cache:
            self._fb_cache[key] = mel_filterbank(self.dim, self.cfg.n_bins, sr)
        return self._fb_cache[key]

    def encode(self, x: Waveform) -> SpeakerEmbedding:
        voiced = block_rms(
            x.samples, self.cfg.hop, n_frames=1 + len(x) // self.cfg.hop
        ) > _SILENCE_FLOOR_RMS
        if not voiced.any():
            raise EmbeddingError("no voiced frames in encoder input")
        spec = stft(x, self.cfg)
        power = np.abs(spec.bins[voiced]) ** 2
        mel = power @ self._filterbank(x.sample_rate).T
        envelope = np.log(mel.mean(axis=0) + 1e-10)
        envelope -= envelope.mean()
        return SpeakerEmbedding.from_raw(envelope)


def toy_encode(x: Waveform, dim: int = 40) -> SpeakerEmbedding:
    return ToyEncoder(dim=dim).encode(x)


# ---------------------------------------------------------------------------
# Sampling strategies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplingStrategy:
    variant: str = "V1"
    overlap_fraction: float = 0.10
    silence_range_ms: tuple[float, float] = (200.0, 1000.0)

    def __post_init__(self):
        if self.variant not in VARIANTS + (UNIFORM_MIX,):
            raise EmbeddingError(f"unknown sampling variant {self.variant!r}")
        if not (0.0 <= self.overlap_fraction <= 0.5):
            raise EmbeddingError(
                f"overlap_fraction must be in [0, 0.5], got {self.overlap_fraction}"
            )
        lo, hi = self.silence_range_ms
        if not (0.0 <= lo <= hi):
            raise EmbeddingError(f"bad silence range {self.silence_range_ms}")


def resolve_variant(strategy: SamplingStrategy, rng: np.random.Generator) -> str:
    if strategy.variant == UNIFORM_MIX:
        return VARIANTS[rng.integers(len(VARIANTS))]
    return strategy.variant


def _slice(w: Waveform, start_s: float, end_s: float) -> np.ndarray:
    sr = w.sample_rate
    return w.samples[int(round(start_s * sr)) : int(round(end_s * sr))]


def _encode_each(encoder, sr: int, clips: list[np.ndarray]) -> SpeakerEmbedding:
    return mean_embed([encoder.encode(Waveform(c, sr)) for c in clips])


def _oracle_embedding(m: Mixture, speaker_id: str, encoder) -> SpeakerEmbedding:
    src = m.source_for(speaker_id)
    clips = [
        _slice(src, s0, s1)
        for spk, _, s0, s1 in m.utterance_spans()
        if spk == speaker_id
    ]
    if not clips:
        raise EmbeddingError(f"speaker {speaker_id!r} has no labeled segments")
    return _encode_each(encoder, src.sample_rate, clips)


def _solo_subsegments(m: Mixture, speaker_id: str) -> list[SegmentLabel]:
    return [l for l in m.labels_for(speaker_id) if not l.overlapped]


def _overlapped_ring(m: Mixture, speaker_id: str) -> np.ndarray:
    """Mixture audio of the speaker's overlapped sub-segments, concatenated."""
    parts = [
        _slice(m.mix, l.start_s, l.end_s)
        for l in m.labels_for(speaker_id)
        if l.overlapped
    ]
    return np.concatenate(parts) if parts else np.empty(0)


def _seed_entropy(seed, spk_idx: int) -> list:
    entropy = list(seed) if isinstance(seed, (list, tuple)) else [seed]
    return entropy + [spk_idx]


def resolved_variant(m: Mixture, speaker_id: str, strategy: SamplingStrategy, seed=0) -> str:
    """The variant :func:`sample_embedding` will use for this draw.

    The variant choice consumes its own RNG stream, so audits can replay it
    without disturbing the audio-level draws.
    """
    entropy = _seed_entropy(seed, m.speaker_index(speaker_id))
    return resolve_variant(strategy, np.random.default_rng(entropy + [0]))


def sample_embedding(
    m: Mixture,
    speaker_id: str,
    strategy: SamplingStrategy,
    encoder,
    seed=0,
) -> SpeakerEmbedding:
    """Draw one training embedding for a speaker of a mixture.

    Deterministic given (seed, speaker position in the mixture); ``seed`` may
    be an int or a sequence of ints. Speakers with no solo sub-segments fall
    back to the oracle variant with a warning.
    """
    spk_idx = m.speaker_index(speaker_id)
    entropy = _seed_entropy(seed, spk_idx)
    variant = resolve_variant(strategy, np.random.default_rng(entropy + [0]))
    rng = np.random.default_rng(entropy + [1])
    if variant == "V1":
        return _oracle_embedding(m, speaker_id, encoder)

    solos = _solo_subsegments(m, speaker_id)
    if not solos:
        logger.warning(
            "speaker %s fully overlapped; falling back to oracle embedding", speaker_id
        )
        return _oracle_embedding(m, speaker_id, encoder)

    sr = m.mix.sample_rate
    clips = [_slice(m.mix, l.start_s, l.end_s) for l in solos]
    if variant == "V2":
        return _encode_each(encoder, sr, clips)

    if variant == "V3":
        lo_ms, hi_ms = strategy.silence_range_ms
        padded = []
        for c in clips:
            pattern = rng.integers(3)  # 0: lead, 1: trail, 2: both
            lead = pattern in (0, 2)
            trail = pattern in (1, 2)
            parts = []
            if lead:
                parts.append(np.zeros(int(round(rng.uniform(lo_ms, hi_ms) * sr / 1000.0))))
            parts.append(c)
            if trail:
                parts.append(np.zeros(int(round(rng.uniform(lo_ms, hi_ms) * sr / 1000.0))))
            padded.append(np.concatenate(parts))
        return _encode_each(encoder, sr, padded)

    # V4: extend each solo clip with overlapped-region mixture audio.
    ring = _overlapped_ring(m, speaker_id)
    extended = []
    for c in clips:
        extra = int(round(strategy.overlap_fraction * len(c)))
        if extra == 0 or len(ring) == 0:
            extended.append(c)
            continue
        start = int(rng.integers(len(ring)))
        take = np.concatenate([ring, ring])[start : start + min(extra, len(ring))]
        extended.append(np.concatenate([c, take]))
    return _encode_each(encoder, sr, extended)


# ---------------------------------------------------------------------------
# Precomputed embedding files: raw little-endian vectors + JSON sidecar
# ---------------------------------------------------------------------------


def _sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def write_embedding_file(path, vectors: np.ndarray, segments=None) -> None:
    """Write per-segment embedding vectors as little-endian float32."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise EmbeddingError(f"expected (count, dim) vectors, got {vectors.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(np.ascontiguousarray(vectors, dtype="<f4").tobytes())
    sidecar = {
        "dim": int(vectors.shape[1]),
        "count": int(vectors.shape[0]),
        "dtype": "<f4",
        "segments": [[float(a), float(b)] for a, b in segments] if segments else None,
    }
    with open(_sidecar_path(path), "w") as f:
        json.dump(sidecar, f, indent=2)
        f.write("\n")


def read_embedding_file(path) -> tuple[np.ndarray, dict]:
    with open(_sidecar_path(path)) as f:
        meta = json.load(f)
    raw = np.fromfile(path, dtype=meta["dtype"])
    expected = meta["count"] * meta["dim"]
    if raw.size != expected:
        raise EmbeddingError(
            f"{path}: payload has {raw.size} floats, sidecar promises {expected}"
        )
    return raw.astype(np.float64).reshape(meta["count"], meta["dim"]), meta


class FileEncoder:
    """Replays precomputed per-segment embeddings in window order.

    Stands in for an external speaker encoder: call ``encode`` once per
    extracted window, in the order the sidecar's segment list documents.
    """

    def __init__(self, path):
        self.vectors, self.meta = read_embedding_file(path)
        self.dim = self.meta["dim"]
        self._next = 0

    def reset(self) -> None:
        self._next = 0

    def encode(self, x: Waveform) -> SpeakerEmbedding:
        if self._next >= len(self.vectors):
            raise EmbeddingError("precomputed embeddings exhausted")
        v = self.vectors[self._next]
        self._next += 1
        return SpeakerEmbedding.from_raw(v)
