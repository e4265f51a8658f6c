"""Enrollment-free inference.

The protocol: a 30 ms framed energy VAD marks speech; contiguous speech
frames form segments; adjacent segments closer than 0.8 s merge; segments
shorter than 0.5 s are dropped; survivors get 0.01 s of protective padding.
The voiced segments are concatenated into one stream which is clustered for
speaker centroids, separated by the mask network, and re-interleaved with
the removed silence to full length. Diarization comes from thresholding the
per-frame mask energy, smoothed by the same merge/discard rules.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import cluster as cluster_mod
from .embed import SpeakerEmbedding, stack_embeddings
from .network import TsNetParams, forward_sep, log_mag_features
from .signal import Mask, StftConfig, Waveform, apply_mask, istft, rms, stft

VAD_FRAME_S = 0.03
MERGE_GAP_S = 0.8
MIN_SEGMENT_S = 0.5
PAD_S = 0.01


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class VadFrames:
    decisions: np.ndarray  # {0, 1} per frame
    total_s: float
    frame_s: float = VAD_FRAME_S

    def __post_init__(self):
        d = np.asarray(self.decisions, dtype=np.int8)
        object.__setattr__(self, "decisions", d)


@dataclass(frozen=True)
class SpeechSegment:
    start_s: float
    end_s: float

    def __post_init__(self):
        if not self.end_s > self.start_s:
            raise PipelineError(
                f"segment end {self.end_s} must exceed start {self.start_s}"
            )

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


@dataclass(frozen=True)
class SilenceMap:
    """Where each kept segment sits in the original and concatenated streams."""

    entries: tuple[tuple[float, float, float], ...]  # (orig_start, orig_end, concat_start)
    sample_rate: int

    def __post_init__(self):
        pos = 0
        for orig_start, orig_end, concat_start in self.entries:
            s0 = int(round(orig_start * self.sample_rate))
            s1 = int(round(orig_end * self.sample_rate))
            c0 = int(round(concat_start * self.sample_rate))
            if c0 != pos:
                raise PipelineError("concatenated positions must be contiguous")
            pos += s1 - s0
        object.__setattr__(self, "_concat_samples", pos)

    @property
    def concat_samples(self) -> int:
        return self._concat_samples

    def to_original_intervals(self, start_s: float, end_s: float) -> list[tuple[float, float]]:
        """Map a concatenated-stream interval back to original-time intervals."""
        out = []
        for orig_start, orig_end, concat_start in self.entries:
            seg_len = orig_end - orig_start
            lo = max(start_s, concat_start)
            hi = min(end_s, concat_start + seg_len)
            if hi > lo + 1e-12:
                off = orig_start - concat_start
                out.append((lo + off, hi + off))
        return out


def frame_vad(x: Waveform, threshold_db: float = -40.0) -> VadFrames:
    """30 ms framed energy gate, threshold relative to the whole-signal RMS."""
    frame_len = int(round(VAD_FRAME_S * x.sample_rate))
    n_frames = int(np.ceil(len(x) / frame_len)) if len(x) else 0
    level = rms(x.samples)
    gate = level * 10.0 ** (threshold_db / 20.0)
    decisions = np.zeros(n_frames, dtype=np.int8)
    if level > 0:
        for l in range(n_frames):
            block = x.samples[l * frame_len : (l + 1) * frame_len]
            decisions[l] = 1 if rms(block) > gate else 0
    return VadFrames(decisions, total_s=len(x) / x.sample_rate)


def segments_from_frames(v: VadFrames) -> list[SpeechSegment]:
    out = []
    d = v.decisions
    start = None
    for l, flag in enumerate(d):
        if flag and start is None:
            start = l
        elif not flag and start is not None:
            out.append(SpeechSegment(start * v.frame_s, l * v.frame_s))
            start = None
    if start is not None:
        out.append(SpeechSegment(start * v.frame_s, min(len(d) * v.frame_s, v.total_s)))
    return out


def merge_segments(segs: list[SpeechSegment], gap_s: float = MERGE_GAP_S) -> list[SpeechSegment]:
    """Transitively merge adjacent segments whose gap is strictly below ``gap_s``."""
    if not segs:
        return []
    segs = sorted(segs, key=lambda s: s.start_s)
    merged = [segs[0]]
    for seg in segs[1:]:
        prev = merged[-1]
        if seg.start_s - prev.end_s < gap_s:
            merged[-1] = SpeechSegment(prev.start_s, max(prev.end_s, seg.end_s))
        else:
            merged.append(seg)
    return merged


def discard_short(segs: list[SpeechSegment], min_s: float = MIN_SEGMENT_S) -> list[SpeechSegment]:
    return [s for s in segs if not s.duration_s < min_s]


def pad_segments(
    segs: list[SpeechSegment], total_s: float, pad_s: float = PAD_S
) -> list[SpeechSegment]:
    return [
        SpeechSegment(max(0.0, s.start_s - pad_s), min(total_s, s.end_s + pad_s))
        for s in segs
    ]


def group_and_merge(v: VadFrames) -> list[SpeechSegment]:
    """Frames -> segments with the merge, discard, and padding rules applied."""
    segs = merge_segments(segments_from_frames(v))
    return pad_segments(discard_short(segs), v.total_s)


def concatenate_voiced(
    x: Waveform, segs: list[SpeechSegment]
) -> tuple[Waveform, SilenceMap]:
    """Splice the voiced segments into one stream plus an invertible map."""
    sr = x.sample_rate
    prev_end = -1
    pieces = []
    entries = []
    pos = 0
    for s in sorted(segs, key=lambda s: s.start_s):
        s0 = int(round(s.start_s * sr))
        s1 = int(round(s.end_s * sr))
        if s0 < prev_end:
            raise PipelineError(f"overlapping segments at {s.start_s:.3f}s")
        prev_end = s1
        pieces.append(x.samples[s0:s1])
        entries.append((s0 / sr, s1 / sr, pos / sr))
        pos += s1 - s0
    stream = np.concatenate(pieces) if pieces else np.empty(0)
    return Waveform(stream, sr), SilenceMap(tuple(entries), sr)


def reinterleave(
    separated: list[Waveform], silence_map: SilenceMap, total_len: int
) -> list[Waveform]:
    """Place separated stream audio back at original positions, silence between."""
    sr = silence_map.sample_rate
    out = []
    for w in separated:
        if len(w) != silence_map.concat_samples:
            raise PipelineError(
                f"separated length {len(w)} != concatenated length {silence_map.concat_samples}"
            )
        full = np.zeros(total_len)
        for orig_start, orig_end, concat_start in silence_map.entries:
            s0 = int(round(orig_start * sr))
            s1 = int(round(orig_end * sr))
            c0 = int(round(concat_start * sr))
            full[s0:s1] = w.samples[c0 : c0 + (s1 - s0)]
        out.append(Waveform(full, sr))
    return out


# ---------------------------------------------------------------------------
# End-to-end orchestration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    vad_threshold_db: float = -40.0
    window_s: float = 2.0
    num_speakers: int | None = None
    k_max: int = 8
    mask_active_threshold: float = 0.5
    seed: int = 0
    stft: StftConfig | None = None  # defaults to a config matching the net width


@dataclass
class PipelineResult:
    separated: list[Waveform]
    annotation: list[tuple[str, float, float]]  # (speaker, start_s, end_s)
    embeddings: list[SpeakerEmbedding]
    masks: np.ndarray | None = None  # (K, T, F) on the concatenated stream
    details: dict = field(default_factory=dict)


def _mask_to_tracks(
    masks: np.ndarray,
    frame_period_s: float,
    silence_map: SilenceMap,
    total_s: float,
    threshold: float,
) -> list[tuple[str, float, float]]:
    """Per-speaker activity from mean mask energy, smoothed like the VAD path."""
    tracks = []
    for k in range(masks.shape[0]):
        active = masks[k].mean(axis=1) > threshold
        stream_segs = []
        start = None
        for t, flag in enumerate(active):
            if flag and start is None:
                start = t
            elif not flag and start is not None:
                stream_segs.append(SpeechSegment(start * frame_period_s, t * frame_period_s))
                start = None
        if start is not None:
            stream_segs.append(
                SpeechSegment(start * frame_period_s, len(active) * frame_period_s)
            )
        original = []
        for seg in stream_segs:
            for lo, hi in silence_map.to_original_intervals(seg.start_s, seg.end_s):
                original.append(SpeechSegment(lo, hi))
        smoothed = pad_segments(
            discard_short(merge_segments(original)), total_s
        )
        tracks.extend((f"spk{k}", s.start_s, s.end_s) for s in smoothed)
    return tracks


def run_pipeline(
    mix: Waveform,
    sep_params: TsNetParams,
    encoder,
    detector=None,
    cfg: PipelineConfig | None = None,
) -> PipelineResult:
    """Separate and diarize one recording without enrollment.

    ``detector`` is an optional overlap detector (``classify_window``); when
    absent every window is used for clustering. Raises
    :class:`PipelineError` when no speech or no clusters are found.
    """
    cfg = cfg or PipelineConfig()
    t_start = time.perf_counter()
    if sep_params.head_kind != "mask":
        raise PipelineError("inference requires stage-2 parameters with a mask head")

    vad = frame_vad(mix, cfg.vad_threshold_db)
    segs = group_and_merge(vad)
    if not segs:
        raise PipelineError("no speakers detected: VAD found no usable speech")
    stream, silence_map = concatenate_voiced(mix, segs)

    windows = cluster_mod.extract_windows(stream, cfg.window_s)
    if detector is not None:
        # Detector timelines are in original time; map each window through.
        kept = []
        for w0, w1 in windows:
            codes = []
            for lo, hi in silence_map.to_original_intervals(w0, w1):
                codes.append(detector.classify_window(lo, hi))
            codes = np.concatenate(codes) if codes else np.empty(0, dtype=int)
            if len(codes) and np.count_nonzero(codes == cluster_mod.SINGLE) * 2 > len(codes):
                kept.append((w0, w1))
        filtered = kept if kept else windows  # never cluster on nothing
    else:
        filtered = windows
    if not filtered:
        raise PipelineError("no speakers detected: no usable windows")

    window_embeddings = [
        encoder.encode(Waveform(stream.samples[int(round(w0 * stream.sample_rate)) : int(round(w1 * stream.sample_rate))], stream.sample_rate))
        for w0, w1 in filtered
    ]
    if len(window_embeddings) == 1:
        assignment = cluster_mod.ClusterAssignment(np.zeros(1, dtype=np.int64), 1)
    else:
        assignment = cluster_mod.spectral_cluster(
            window_embeddings, k=cfg.num_speakers, k_max=cfg.k_max, seed=cfg.seed
        )
    centroids = cluster_mod.cluster_centroids(window_embeddings, assignment)
    if not centroids:
        raise PipelineError("no speakers detected: clustering produced no centroids")
    if len(centroids) > sep_params.dims.max_speakers:
        centroids = centroids[: sep_params.dims.max_speakers]

    stft_cfg = cfg.stft or default_stft_for_net(sep_params)
    if stft_cfg.n_bins != sep_params.dims.n_freq:
        raise PipelineError(
            f"STFT has {stft_cfg.n_bins} bins but the network expects {sep_params.dims.n_freq}"
        )
    spec = stft(stream, stft_cfg)
    feats = log_mag_features(spec)
    masks = forward_sep(sep_params, feats, stack_embeddings(centroids))
    separated = [
        istft(apply_mask(Mask(masks[k]), spec), length=len(stream))
        for k in range(masks.shape[0])
    ]
    full = reinterleave(separated, silence_map, total_len=len(mix))

    frame_period_s = spec.config.hop / stream.sample_rate
    annotation = _mask_to_tracks(
        masks, frame_period_s, silence_map, mix.duration_s, cfg.mask_active_threshold
    )

    details = {
        "vad_segments": [[s.start_s, s.end_s] for s in segs],
        "windows": [[w0, w1] for w0, w1 in windows],
        "windows_kept": [[w0, w1] for w0, w1 in filtered],
        "k_est": assignment.k_est,
        "cluster_labels": assignment.labels.tolist(),
        "n_speakers_out": len(full),
        "elapsed_s": time.perf_counter() - t_start,
    }
    return PipelineResult(full, annotation, centroids, masks, details)


def default_stft_for_net(params: TsNetParams) -> StftConfig:
    """STFT config whose bin count matches the network's input width."""
    window_len = 2 * (params.dims.n_freq - 1)
    return StftConfig(window_len=window_len, hop=max(1, window_len // 4))
