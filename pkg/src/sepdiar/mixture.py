"""Overlapped multi-speaker mixture synthesis with ground truth.

Mixtures are built JSALT-style: utterances are laid out sequentially and each
one starts before the previous ends by a fraction (drawn in [0, max_overlap])
of the shorter of the two. Ground-truth activity labels come from a frame
energy gate on the clean sources, evaluated on hop-length blocks centered on
STFT frame times so labels align with spectrogram frames. Each utterance
segment is decomposed into sub-segments at every instant the set of active
speakers changes; sub-segments with two or more active speakers are flagged
overlapped.

The toy corpus generator produces "speakers" as band-limited noise with
speaker-specific spectral envelopes plus slow amplitude modulation, loud
enough structure for the deterministic toy speaker encoder to separate.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .signal import (
    DEFAULT_SAMPLE_RATE,
    StftConfig,
    Waveform,
    block_rms,
    frame_count,
    read_wav,
    rms,
    write_wav,
)

TARGET_RMS_DB = -23.0
DEFAULT_VAD_THRESHOLD_DB = -40.0


class MixtureError(ValueError):
    pass


@dataclass(frozen=True)
class Utterance:
    speaker_id: str
    audio: Waveform
    transcript: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.speaker_id:
            raise MixtureError("utterance needs a non-empty speaker id")
        if len(self.audio) == 0:
            raise MixtureError("utterance needs non-empty audio")


@dataclass(frozen=True)
class SegmentLabel:
    """One sub-segment of a speaker's utterance.

    ``seg`` indexes the speaker's utterances within the mixture, ``sub``
    indexes the sub-segments of that utterance in time order.
    """

    speaker_id: str
    start_s: float
    end_s: float
    seg: int
    sub: int
    overlapped: bool

    def __post_init__(self):
        if not (0.0 <= self.start_s < self.end_s):
            raise MixtureError(
                f"bad segment interval [{self.start_s}, {self.end_s}]"
            )

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


@dataclass(frozen=True)
class Mixture:
    mix: Waveform
    speakers: tuple[str, ...]
    sources: tuple[Waveform, ...]
    labels: tuple[SegmentLabel, ...]
    activity: np.ndarray  # (K, T) in {0, 1}
    stft_config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        if len(self.speakers) != len(self.sources):
            raise MixtureError("speakers and sources must align")
        if len(set(self.speakers)) != len(self.speakers):
            raise MixtureError("duplicate speaker ids")
        n = len(self.mix)
        for s in self.sources:
            if len(s) != n:
                raise MixtureError("every source must match the mixture length")
        total = np.sum([s.samples for s in self.sources], axis=0)
        if n and np.max(np.abs(total - self.mix.samples)) > 1e-6:
            raise MixtureError("sources do not sum to the mixture")
        t = frame_count(n, self.stft_config)
        if self.activity.shape != (len(self.speakers), t):
            raise MixtureError(
                f"activity grid {self.activity.shape} misaligned with K={len(self.speakers)}, T={t}"
            )
        label_speakers = {l.speaker_id for l in self.labels}
        if not label_speakers <= set(self.speakers):
            raise MixtureError("labels reference unknown speakers")

    @property
    def n_speakers(self) -> int:
        return len(self.speakers)

    @property
    def duration_s(self) -> float:
        return self.mix.duration_s

    def speaker_index(self, speaker_id: str) -> int:
        try:
            return self.speakers.index(speaker_id)
        except ValueError:
            raise MixtureError(f"unknown speaker {speaker_id!r}") from None

    def source_for(self, speaker_id: str) -> Waveform:
        return self.sources[self.speaker_index(speaker_id)]

    def labels_for(self, speaker_id: str) -> list[SegmentLabel]:
        return [l for l in self.labels if l.speaker_id == speaker_id]

    def utterance_spans(self) -> list[tuple[str, int, float, float]]:
        """(speaker, seg, start, end) extents of each utterance, time order."""
        spans: dict[tuple[str, int], list[float]] = {}
        for l in self.labels:
            key = (l.speaker_id, l.seg)
            if key not in spans:
                spans[key] = [l.start_s, l.end_s]
            else:
                spans[key][0] = min(spans[key][0], l.start_s)
                spans[key][1] = max(spans[key][1], l.end_s)
        out = [(spk, seg, se[0], se[1]) for (spk, seg), se in spans.items()]
        out.sort(key=lambda x: (x[2], x[0], x[1]))
        return out


def normalize_rms(x: np.ndarray, target_db: float = TARGET_RMS_DB) -> np.ndarray:
    level = rms(x)
    if level <= 0:
        return x.copy()
    return x * (10.0 ** (target_db / 20.0) / level)


# ---------------------------------------------------------------------------
# Activity labels
# ---------------------------------------------------------------------------


def _activity_row(
    source: np.ndarray,
    spans: list[tuple[float, float]],
    sr: int,
    cfg: StftConfig,
    threshold_db: float,
) -> np.ndarray:
    n_frames = frame_count(len(source), cfg)
    ref_samples = []
    for s0, s1 in spans:
        ref_samples.append(source[int(round(s0 * sr)) : int(round(s1 * sr))])
    ref = rms(np.concatenate(ref_samples)) if ref_samples else rms(source)
    if ref <= 0:
        return np.zeros(n_frames, dtype=np.int8)
    gate = ref * 10.0 ** (threshold_db / 20.0)
    return (block_rms(source, cfg.hop, n_frames) > gate).astype(np.int8)


def compute_activity_labels(
    m: Mixture,
    cfg: StftConfig | None = None,
    threshold_db: float = DEFAULT_VAD_THRESHOLD_DB,
) -> np.ndarray:
    """Frame activity per speaker from the clean sources, shape K x T.

    A frame is active when its hop-length block RMS exceeds ``threshold_db``
    below the speaker's utterance-level RMS.
    """
    cfg = cfg or m.stft_config
    sr = m.mix.sample_rate
    rows = []
    for k, spk in enumerate(m.speakers):
        spans = [(l.start_s, l.end_s) for l in m.labels_for(spk)]
        rows.append(_activity_row(m.sources[k].samples, spans, sr, cfg, threshold_db))
    return np.stack(rows) if rows else np.zeros((0, frame_count(len(m.mix), cfg)), dtype=np.int8)


# ---------------------------------------------------------------------------
# Sub-segment decomposition
# ---------------------------------------------------------------------------


def _decompose_spans(
    spans: list[tuple[str, int, float, float]]
) -> list[SegmentLabel]:
    """Split utterance spans wherever the set of active speakers changes."""
    if not spans:
        return []
    boundaries = sorted({t for _, _, s0, s1 in spans for t in (s0, s1)})
    labels = []
    for spk, seg, s0, s1 in spans:
        cuts = [s0] + [b for b in boundaries if s0 < b < s1] + [s1]
        sub = 0
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            mid = 0.5 * (lo + hi)
            active = {
                s
                for s, _, a0, a1 in spans
                if a0 <= mid < a1
            }
            labels.append(
                SegmentLabel(spk, lo, hi, seg, sub, overlapped=len(active) >= 2)
            )
            sub += 1
    labels.sort(key=lambda l: (l.start_s, l.speaker_id, l.sub))
    return labels


def segment_decomposition(m: Mixture) -> list[SegmentLabel]:
    """Recompute the overlap-aware sub-segment decomposition from the labels."""
    if not m.labels:
        raise MixtureError("mixture has no labels to decompose")
    return _decompose_spans(m.utterance_spans())


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------


def synthesize_mixture(
    pool: list[Utterance],
    n_speakers: int,
    max_overlap: float = 0.8,
    min_len_s: float = 60.0,
    seed: int = 0,
    stft_cfg: StftConfig | None = None,
    forced_overlap: float | None = None,
    vad_threshold_db: float = DEFAULT_VAD_THRESHOLD_DB,
) -> Mixture:
    """Lay out utterances with randomized adjacent overlap and mix them.

    Deterministic given ``seed``. Every utterance is gain-normalized before
    mixing. A speaker never overlaps their own earlier utterance; the start
    of a new utterance is clamped past that speaker's previous end, which in
    rare high-overlap layouts reduces the drawn overlap fraction.
    """
    if not (0.0 <= max_overlap < 1.0):
        raise MixtureError(f"max_overlap must be in [0, 1), got {max_overlap}")
    cfg = stft_cfg or StftConfig()
    by_speaker: dict[str, list[Utterance]] = {}
    for u in pool:
        by_speaker.setdefault(u.speaker_id, []).append(u)
    if len(by_speaker) < n_speakers:
        raise MixtureError(
            f"pool has {len(by_speaker)} speakers, need {n_speakers}"
        )
    rng = np.random.default_rng(seed)
    speakers = sorted(by_speaker)
    chosen = [speakers[i] for i in rng.choice(len(speakers), n_speakers, replace=False)]
    sr = pool[0].audio.sample_rate

    cursors = {s: 0 for s in chosen}
    order = {s: rng.permutation(len(by_speaker[s])) for s in chosen}

    def next_utterance(spk: str) -> Utterance:
        utts = by_speaker[spk]
        u = utts[order[spk][cursors[spk] % len(utts)]]
        cursors[spk] += 1
        return u

    # Speaker sequence: one permutation of all chosen speakers, then draws
    # that never repeat the previous speaker.
    sequence = [chosen[i] for i in rng.permutation(n_speakers)]
    placements = []  # (speaker, seg_index, start_sample, samples)
    seg_counter = {s: 0 for s in chosen}
    last_end = {s: 0 for s in chosen}
    prev_end = 0
    prev_len = 0
    i = 0
    while True:
        if i < len(sequence):
            spk = sequence[i]
        else:
            if prev_end >= int(min_len_s * sr):
                break
            if n_speakers == 1:
                spk = chosen[0]
            else:
                others = [s for s in chosen if s != placements[-1][0]]
                spk = others[rng.integers(len(others))]
        u = next_utterance(spk)
        samples = normalize_rms(u.audio.samples)
        if i == 0:
            start = 0
        else:
            frac = forced_overlap if forced_overlap is not None else rng.uniform(0.0, max_overlap)
            ov = int(round(frac * min(len(samples), prev_len)))
            start = max(prev_end - ov, last_end[spk], 0)
        placements.append((spk, seg_counter[spk], start, samples))
        seg_counter[spk] += 1
        prev_end = start + len(samples)
        prev_len = len(samples)
        last_end[spk] = prev_end
        i += 1

    total = max(start + len(s) for _, _, start, s in placements)
    source_arr = np.zeros((n_speakers, total))
    spans = []
    for spk, seg, start, samples in placements:
        k = chosen.index(spk)
        source_arr[k, start : start + len(samples)] += samples
        spans.append((spk, seg, start / sr, (start + len(samples)) / sr))
    labels = _decompose_spans(spans)

    mix = np.sum(source_arr, axis=0)
    activity = np.stack(
        [
            _activity_row(
                source_arr[k],
                [(s0, s1) for spk, _, s0, s1 in spans if spk == chosen[k]],
                sr,
                cfg,
                vad_threshold_db,
            )
            for k in range(n_speakers)
        ]
    )
    return Mixture(
        mix=Waveform(mix, sr),
        speakers=tuple(chosen),
        sources=tuple(Waveform(source_arr[k], sr) for k in range(n_speakers)),
        labels=tuple(labels),
        activity=activity,
        stft_config=cfg,
    )


def chunk(m: Mixture, len_s: float, seed: int = 0, offset_s: float | None = None) -> Mixture:
    """Contiguous hop-aligned slice of a mixture with clipped labels."""
    sr = m.mix.sample_rate
    hop = m.stft_config.hop
    n_chunk = int(round(len_s * sr))
    if n_chunk > len(m.mix):
        raise MixtureError(
            f"chunk of {len_s} s exceeds mixture of {m.duration_s:.2f} s"
        )
    if offset_s is None:
        max_hops = (len(m.mix) - n_chunk) // hop
        off = int(np.random.default_rng(seed).integers(0, max_hops + 1)) * hop
    else:
        off = int(round(offset_s * sr / hop)) * hop
        if off + n_chunk > len(m.mix):
            raise MixtureError("chunk offset past end of mixture")
    off_s = off / sr
    end_s = (off + n_chunk) / sr

    labels = []
    for l in m.labels:
        lo = max(l.start_s, off_s) - off_s
        hi = min(l.end_s, end_s) - off_s
        if hi - lo > 1e-9:
            labels.append(replace(l, start_s=lo, end_s=hi))

    t0 = off // hop
    t1 = t0 + frame_count(n_chunk, m.stft_config)
    return Mixture(
        mix=Waveform(m.mix.samples[off : off + n_chunk], sr),
        speakers=m.speakers,
        sources=tuple(Waveform(s.samples[off : off + n_chunk], sr) for s in m.sources),
        labels=tuple(labels),
        activity=m.activity[:, t0:t1],
        stft_config=m.stft_config,
    )


# ---------------------------------------------------------------------------
# Toy corpus
# ---------------------------------------------------------------------------

N_BAND_SLOTS = 8
_BAND_LO_HZ = 300.0
_BAND_HI_HZ = 7000.0


def band_slot_edges(sr: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """Log-spaced edges of the toy voice band slots."""
    return np.geomspace(_BAND_LO_HZ, min(_BAND_HI_HZ, sr / 2), N_BAND_SLOTS + 1)


@dataclass(frozen=True)
class ToyVoice:
    """Synthetic speaker: noise through a fixed band envelope plus slow AM."""

    speaker_id: str
    bands: tuple[int, ...]
    am_rate_hz: float = 4.0

    def __post_init__(self):
        if not self.bands or any(not (0 <= b < N_BAND_SLOTS) for b in self.bands):
            raise MixtureError(f"bands must index slots [0, {N_BAND_SLOTS})")


def toy_utterance(
    voice: ToyVoice,
    duration_s: float,
    seed: int,
    sr: int = DEFAULT_SAMPLE_RATE,
    transcript: tuple[str, ...] | None = None,
) -> Utterance:
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sr))
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    edges = band_slot_edges(sr)
    envelope = np.full(len(freqs), 1e-3)
    for b in voice.bands:
        envelope[(freqs >= edges[b]) & (freqs < edges[b + 1])] = 1.0
    spec = (rng.normal(size=len(freqs)) + 1j * rng.normal(size=len(freqs))) * envelope
    x = np.fft.irfft(spec, n=n)
    t = np.arange(n) / sr
    am = 1.0 + 0.5 * np.sin(2.0 * np.pi * voice.am_rate_hz * t + rng.uniform(0, 2 * np.pi))
    x = normalize_rms(x * am)
    return Utterance(voice.speaker_id, Waveform(x, sr), transcript=transcript)


def make_toy_voices(n_speakers: int, seed: int = 0) -> list[ToyVoice]:
    """Voices with distinct two-slot band combinations."""
    combos = [
        (i, j) for i in range(N_BAND_SLOTS) for j in range(i + 1, N_BAND_SLOTS)
    ]
    if n_speakers > len(combos):
        raise MixtureError(f"at most {len(combos)} distinct toy voices")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(combos), n_speakers, replace=False)
    return [
        ToyVoice(f"spk{i:02d}", combos[p], am_rate_hz=float(2.0 + 1.5 * i))
        for i, p in enumerate(picks)
    ]


def make_toy_pool(
    n_speakers: int,
    utts_per_speaker: int,
    seed: int = 0,
    duration_range_s: tuple[float, float] = (3.0, 8.0),
    sr: int = DEFAULT_SAMPLE_RATE,
) -> list[Utterance]:
    """Deterministic toy utterance pool; transcripts are synthetic word lists."""
    voices = make_toy_voices(n_speakers, seed)
    rng = np.random.default_rng(seed + 1)
    pool = []
    for v_idx, voice in enumerate(voices):
        for u in range(utts_per_speaker):
            dur = float(rng.uniform(*duration_range_s))
            words = tuple(
                f"w{v_idx:02d}{u:02d}{i:02d}" for i in range(max(2, int(dur)))
            )
            pool.append(
                toy_utterance(
                    voice, dur, seed=int(rng.integers(2**31)), sr=sr, transcript=words
                )
            )
    return pool


# ---------------------------------------------------------------------------
# Manifest persistence
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(65536), b""):
            h.update(block)
    return h.hexdigest()


def save_mixture(out_dir, name: str, m: Mixture, vad_threshold_db: float = DEFAULT_VAD_THRESHOLD_DB) -> Path:
    """Write WAVs plus a JSON manifest; returns the manifest path.

    The mix WAV is regenerated from the quantized sources so that on reload
    the sources still sum to the mix sample-exactly.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sr = m.mix.sample_rate

    quantized = []
    src_entries = []
    for spk, src in zip(m.speakers, m.sources):
        path = out_dir / f"{name}_src_{spk}.wav"
        write_wav(path, src)
        q = read_wav(path).samples
        quantized.append(q)
        src_entries.append({"speaker": spk, "wav": path.name})
    mix_path = out_dir / f"{name}_mix.wav"
    write_wav(mix_path, Waveform(np.clip(np.sum(quantized, axis=0), -1.0, 32767.0 / 32768.0), sr))

    manifest = {
        "name": name,
        "sample_rate": sr,
        "n_samples": len(m.mix),
        "mix_wav": mix_path.name,
        "sources": src_entries,
        "labels": [
            {
                "speaker": l.speaker_id,
                "start_s": l.start_s,
                "end_s": l.end_s,
                "seg": l.seg,
                "sub": l.sub,
                "overlapped": l.overlapped,
            }
            for l in m.labels
        ],
        "stft": {
            "window_len": m.stft_config.window_len,
            "hop": m.stft_config.hop,
            "window": m.stft_config.window,
        },
        "vad_threshold_db": vad_threshold_db,
        "wav_sha256": {p.name: _sha256(p) for p in [mix_path] + [out_dir / e["wav"] for e in src_entries]},
    }
    manifest_path = out_dir / f"{name}.json"
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    write_reference_rttm(out_dir / f"{name}.rttm", m, file_id=name)
    return manifest_path


def write_reference_rttm(path, m: Mixture, file_id: str = "rec") -> None:
    """Utterance spans as RTTM SPEAKER lines."""
    from .metrics import DiarAnnotation, write_rttm

    write_rttm(
        path,
        DiarAnnotation(
            tuple((spk, s0, s1) for spk, s0, s1 in reference_annotation(m)),
            file_id=file_id,
        ),
    )


def load_mixture(manifest_path) -> Mixture:
    manifest_path = Path(manifest_path)
    with open(manifest_path) as f:
        doc = json.load(f)
    base = manifest_path.parent
    cfg = StftConfig(**doc["stft"])
    mix = read_wav(base / doc["mix_wav"])
    speakers = tuple(e["speaker"] for e in doc["sources"])
    sources = tuple(read_wav(base / e["wav"]) for e in doc["sources"])
    labels = tuple(
        SegmentLabel(
            e["speaker"], e["start_s"], e["end_s"], e["seg"], e["sub"], e["overlapped"]
        )
        for e in doc["labels"]
    )
    sr = mix.sample_rate
    activity = np.stack(
        [
            _activity_row(
                sources[k].samples,
                [(l.start_s, l.end_s) for l in labels if l.speaker_id == speakers[k]],
                sr,
                cfg,
                doc["vad_threshold_db"],
            )
            for k in range(len(speakers))
        ]
    )
    return Mixture(
        mix=mix,
        speakers=speakers,
        sources=sources,
        labels=labels,
        activity=activity,
        stft_config=cfg,
    )


def reference_annotation(m: Mixture) -> list[tuple[str, float, float]]:
    """Per-utterance (speaker, start, end) spans for RTTM export."""
    return [(spk, s0, s1) for spk, _, s0, s1 in m.utterance_spans()]


def load_utterance_pool(root) -> list[Utterance]:
    """Real-audio ingestion: one subdirectory of WAV files per speaker.

    Layout: ``<root>/<speaker_id>/*.wav`` with 16 kHz mono 16-bit PCM files.
    Transcripts, if any, sit next to each WAV as ``<name>.txt`` (whitespace
    separated words).
    """
    root = Path(root)
    if not root.is_dir():
        raise MixtureError(f"utterance pool directory {root} does not exist")
    pool = []
    for spk_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for wav in sorted(spk_dir.glob("*.wav")):
            txt = wav.with_suffix(".txt")
            transcript = tuple(txt.read_text().split()) if txt.exists() else None
            pool.append(Utterance(spk_dir.name, read_wav(wav), transcript=transcript))
    if not pool:
        raise MixtureError(f"no speaker subdirectories with WAV files under {root}")
    return pool
