"""Scoring: diarization error rate, signal-to-distortion ratio, and
concatenated minimum-permutation word error rate, plus RTTM I/O.

DER follows the overlap-aware convention: reference time where two speakers
talk counts twice, a collar around every reference boundary is excluded from
scoring entirely, and hypothesis speakers are mapped to reference speakers
by a min-cost assignment on co-active durations. SDR is the plain energy
ratio (no decomposition, not scale-invariant).
"""

from __future__ import annotations

import re
import string
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .signal import Waveform


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class DiarAnnotation:
    """Speaker activity tracks for one recording."""

    tracks: tuple[tuple[str, float, float], ...]  # (speaker, start_s, end_s)
    file_id: str = "rec"

    def __post_init__(self):
        for spk, start, end in self.tracks:
            if not spk:
                raise MetricError("empty speaker id in annotation")
            if not end > start:
                raise MetricError(f"track [{start}, {end}] has non-positive duration")

    def speakers(self) -> list[str]:
        seen = []
        for spk, _, _ in self.tracks:
            if spk not in seen:
                seen.append(spk)
        return seen

    def speaker_intervals(self, spk: str) -> list[tuple[float, float]]:
        """Merged activity intervals of one speaker."""
        ivs = sorted((s, e) for who, s, e in self.tracks if who == spk)
        merged: list[list[float]] = []
        for s, e in ivs:
            if merged and s <= merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], e)
            else:
                merged.append([s, e])
        return [(s, e) for s, e in merged]

    def extent(self) -> float:
        return max((e for _, _, e in self.tracks), default=0.0)


# ---------------------------------------------------------------------------
# DER
# ---------------------------------------------------------------------------


def _scored_regions(ref: DiarAnnotation, collar_s: float, t_max: float) -> list[tuple[float, float]]:
    """Complement of the collar zones around reference boundaries in [0, t_max]."""
    cuts = []
    for spk in ref.speakers():
        for s, e in ref.speaker_intervals(spk):
            cuts.append((max(0.0, s - collar_s), min(t_max, s + collar_s)))
            cuts.append((max(0.0, e - collar_s), min(t_max, e + collar_s)))
    cuts.sort()
    scored = []
    pos = 0.0
    for s, e in cuts:
        if s > pos:
            scored.append((pos, s))
        pos = max(pos, e)
    if pos < t_max:
        scored.append((pos, t_max))
    return scored


def _clip_intervals(
    ivs: list[tuple[float, float]], regions: list[tuple[float, float]]
) -> list[tuple[float, float]]:
    out = []
    for s, e in ivs:
        for r0, r1 in regions:
            lo, hi = max(s, r0), min(e, r1)
            if hi > lo:
                out.append((lo, hi))
    return out


def der(ref: DiarAnnotation, hyp: DiarAnnotation, collar_s: float = 0.25) -> float:
    """Diarization error rate with collar and optimal speaker mapping."""
    if not ref.tracks:
        raise MetricError("undefined DER: empty reference")
    t_max = max(ref.extent(), hyp.extent())
    regions = _scored_regions(ref, collar_s, t_max)

    ref_spks = ref.speakers()
    hyp_spks = hyp.speakers()
    ref_ivs = {r: _clip_intervals(ref.speaker_intervals(r), regions) for r in ref_spks}
    hyp_ivs = {h: _clip_intervals(hyp.speaker_intervals(h), regions) for h in hyp_spks}

    total_ref = sum(e - s for ivs in ref_ivs.values() for s, e in ivs)
    if total_ref <= 0:
        raise MetricError("undefined DER: no scored reference speech")

    # Elementary intervals between consecutive boundaries of any clipped track.
    bounds = sorted(
        {t for ivs in list(ref_ivs.values()) + list(hyp_ivs.values()) for iv in ivs for t in iv}
    )
    if len(bounds) < 2:
        return 0.0

    def active_in(ivs, lo, hi):
        return any(s <= lo and hi <= e for s, e in ivs)

    # Optimal mapping maximizes co-active time between ref and hyp speakers.
    overlap = np.zeros((len(ref_spks), len(hyp_spks)))
    cells = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        if hi - lo <= 0:
            continue
        r_active = [r for r in ref_spks if active_in(ref_ivs[r], lo, hi)]
        h_active = [h for h in hyp_spks if active_in(hyp_ivs[h], lo, hi)]
        if not r_active and not h_active:
            continue
        cells.append((hi - lo, r_active, h_active))
        for r in r_active:
            for h in h_active:
                overlap[ref_spks.index(r), hyp_spks.index(h)] += hi - lo
    mapping: dict[str, str] = {}
    if ref_spks and hyp_spks:
        rows, cols = linear_sum_assignment(-overlap)
        mapping = {ref_spks[i]: hyp_spks[j] for i, j in zip(rows, cols)}

    err = 0.0
    for dur, r_active, h_active in cells:
        n_ref, n_hyp = len(r_active), len(h_active)
        n_correct = sum(1 for r in r_active if mapping.get(r) in h_active)
        err += dur * (max(n_ref, n_hyp) - n_correct)
    return err / total_ref


# ---------------------------------------------------------------------------
# SDR
# ---------------------------------------------------------------------------


def sdr(y: Waveform, y_hat: Waveform, floor: float = 1e-12) -> float:
    """10 log10 of reference energy over error energy, in dB."""
    if len(y) != len(y_hat):
        raise MetricError(f"length mismatch: {len(y)} vs {len(y_hat)}")
    ref_energy = float(np.sum(y.samples**2))
    if ref_energy <= 0:
        raise MetricError("undefined SDR: all-zero reference")
    err_energy = float(np.sum((y.samples - y_hat.samples) ** 2))
    return 10.0 * np.log10(ref_energy / max(floor, err_energy))


# ---------------------------------------------------------------------------
# cpWER
# ---------------------------------------------------------------------------

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


def edit_distance(a: list[str], b: list[str]) -> int:
    """Word-level Levenshtein distance."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, wa in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, wb in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (wa != wb))
        prev = cur
    return prev[-1]


def cpwer(ref: dict[str, list[str]], hyp: dict[str, list[str]]) -> float:
    """Concatenated minimum-permutation WER.

    ``ref`` maps speakers to word sequences, ``hyp`` maps output channels to
    word sequences. Unpaired reference speakers count as deletions, unpaired
    hypothesis channels as insertions; the speaker-to-channel assignment
    minimizing total edit distance is found by min-cost matching, which is
    optimal because per-pair costs are additive.
    """
    if not ref:
        raise MetricError("undefined cpWER: empty reference set")
    ref_keys = sorted(ref)
    hyp_keys = sorted(hyp)
    total_ref_words = sum(len(ref[r]) for r in ref_keys)
    if total_ref_words == 0:
        raise MetricError("undefined cpWER: reference has no words")
    n = max(len(ref_keys), len(hyp_keys))
    cost = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i < len(ref_keys) and j < len(hyp_keys):
                cost[i, j] = edit_distance(list(ref[ref_keys[i]]), list(hyp[hyp_keys[j]]))
            elif i < len(ref_keys):
                cost[i, j] = len(ref[ref_keys[i]])  # deletion of the whole speaker
            elif j < len(hyp_keys):
                cost[i, j] = len(hyp[hyp_keys[j]])  # insertion of the whole channel
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum()) / total_ref_words


# ---------------------------------------------------------------------------
# RTTM
# ---------------------------------------------------------------------------


def write_rttm(path, annotation: DiarAnnotation) -> None:
    with open(path, "w") as f:
        for spk, start, end in annotation.tracks:
            f.write(
                f"SPEAKER {annotation.file_id} 1 {start:.6f} {end - start:.6f} "
                f"<NA> <NA> {spk} <NA> <NA>\n"
            )


def read_rttm(path) -> DiarAnnotation:
    tracks = []
    file_id = None
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            fields = re.split(r"\s+", line)
            if len(fields) != 10 or fields[0] != "SPEAKER":
                raise MetricError(f"{path}:{lineno}: malformed RTTM line")
            try:
                start = float(fields[3])
                dur = float(fields[4])
            except ValueError:
                raise MetricError(f"{path}:{lineno}: non-numeric time fields") from None
            if dur <= 0:
                raise MetricError(f"{path}:{lineno}: non-positive duration {dur}")
            if file_id is None:
                file_id = fields[1]
            elif fields[1] != file_id:
                raise MetricError(f"{path}:{lineno}: multiple file ids in one RTTM")
            tracks.append((fields[7], start, start + dur))
    if file_id is None:
        raise MetricError(f"{path}: no SPEAKER lines found")
    return DiarAnnotation(tuple(tracks), file_id=file_id)
