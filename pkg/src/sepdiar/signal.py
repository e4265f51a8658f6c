"""Waveform and time-frequency primitives: STFT/iSTFT, masking, WAV I/O.

Frames are centered: the signal is zero-padded by ``window_len // 2`` on both
sides so that frame ``t`` is centered on sample ``t * hop``. This keeps the
frame <-> time mapping exact for label alignment. Reconstruction divides by
the overlap-added window-product envelope, so any config that passes the
COLA check at construction round-trips to float precision.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np

DEFAULT_SAMPLE_RATE = 16000

_COLA_TOL = 1e-8
_ENVELOPE_TINY = 1e-10


class SignalError(ValueError):
    pass


def _as_float_array(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise SignalError(f"expected mono 1-D samples, got shape {x.shape}")
    return x


@dataclass(frozen=True)
class Waveform:
    """Mono waveform with amplitudes nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        object.__setattr__(self, "samples", _as_float_array(self.samples))
        if self.sample_rate <= 0:
            raise SignalError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise SignalError("waveform contains NaN or Inf samples")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


def _window_values(name: str, length: int) -> np.ndarray:
    # Periodic windows so shifted copies tile exactly.
    n = np.arange(length)
    hann = 0.5 * (1.0 - np.cos(2.0 * np.pi * n / length))
    if name == "sqrt_hann":
        return np.sqrt(hann)
    if name == "hann":
        return hann
    if name == "rect":
        return np.ones(length)
    raise SignalError(f"unknown window {name!r}")


@dataclass(frozen=True)
class StftConfig:
    """Analysis/synthesis configuration. Non-COLA combinations are rejected here."""

    window_len: int = 1024
    hop: int = 256
    window: str = "sqrt_hann"

    def __post_init__(self):
        if not (0 < self.hop <= self.window_len):
            raise SignalError(
                f"need 0 < hop <= window_len, got hop={self.hop} window_len={self.window_len}"
            )
        w = _window_values(self.window, self.window_len)
        env = _ola_envelope(w * w, self.hop, n_frames=4 * (self.window_len // self.hop) + 4)
        # Interior of the envelope must be constant for perfect reconstruction.
        interior = env[self.window_len : -self.window_len]
        if interior.size == 0 or np.ptp(interior) > _COLA_TOL * np.max(interior):
            raise SignalError(
                f"window {self.window!r} with hop {self.hop} does not satisfy COLA"
            )

    @property
    def n_bins(self) -> int:
        return self.window_len // 2 + 1

    def window_array(self) -> np.ndarray:
        return _window_values(self.window, self.window_len)

    def frame_rate(self, sample_rate: int) -> float:
        return sample_rate / self.hop


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    """Sum frame rows into a stream at ``hop`` spacing.

    Frames whose indices differ by window_len//hop or more never overlap, so
    each congruence class can be written with one reshaped addition.
    """
    n_frames, win = frames.shape
    out = np.zeros((n_frames - 1) * hop + win)
    if win % hop == 0:
        q = win // hop
        for r in range(q):
            sub = frames[r::q]
            if len(sub):
                view = out[r * hop : r * hop + sub.size].reshape(len(sub), win)
                view += sub
    else:
        for t in range(n_frames):
            out[t * hop : t * hop + win] += frames[t]
    return out


def _ola_envelope(win_prod: np.ndarray, hop: int, n_frames: int) -> np.ndarray:
    return _overlap_add(np.broadcast_to(win_prod, (n_frames, len(win_prod))).copy(), hop)


@dataclass(frozen=True)
class Spectrogram:
    """Complex T x F grid. ``n_samples`` remembers the pre-padding signal length."""

    bins: np.ndarray
    config: StftConfig
    sample_rate: int = DEFAULT_SAMPLE_RATE
    n_samples: int | None = None

    def __post_init__(self):
        b = np.asarray(self.bins, dtype=np.complex128)
        object.__setattr__(self, "bins", b)
        if b.ndim != 2:
            raise SignalError(f"spectrogram must be T x F, got shape {b.shape}")
        if b.shape[1] != self.config.n_bins:
            raise SignalError(
                f"expected F={self.config.n_bins} bins, got {b.shape[1]}"
            )
        if not np.all(np.isfinite(b)):
            raise SignalError("spectrogram contains non-finite entries")

    @property
    def n_frames(self) -> int:
        return self.bins.shape[0]

    @property
    def frame_rate(self) -> float:
        return self.config.frame_rate(self.sample_rate)

    def magnitude(self) -> np.ndarray:
        return np.abs(self.bins)


@dataclass(frozen=True)
class Mask:
    """Real T x F grid with every value in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.ndim != 2:
            raise SignalError(f"mask must be T x F, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise SignalError("mask contains non-finite values")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise SignalError("mask values must lie in [0, 1]")


def frame_count(n_samples: int, cfg: StftConfig) -> int:
    """Number of centered frames for a signal of ``n_samples`` samples."""
    padded = max(n_samples + 2 * (cfg.window_len // 2), cfg.window_len)
    return 1 + (padded - cfg.window_len) // cfg.hop


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x)))) if len(x) else 0.0


def block_rms(x: np.ndarray, hop: int, n_frames: int) -> np.ndarray:
    """RMS over hop-length blocks centered on frame times t*hop."""
    half = hop // 2
    out = np.zeros(n_frames)
    for t in range(n_frames):
        lo = max(0, t * hop - half)
        hi = min(len(x), t * hop + hop - half)
        if hi > lo:
            out[t] = rms(x[lo:hi])
    return out


def stft(x: Waveform, cfg: StftConfig) -> Spectrogram:
    """Centered short-time Fourier transform of a mono waveform."""
    pad = cfg.window_len // 2
    sig = np.concatenate([np.zeros(pad), x.samples, np.zeros(pad)])
    if len(sig) < cfg.window_len:
        sig = np.concatenate([sig, np.zeros(cfg.window_len - len(sig))])
    n_frames = 1 + (len(sig) - cfg.window_len) // cfg.hop
    win = cfg.window_array()
    idx = cfg.hop * np.arange(n_frames)[:, None] + np.arange(cfg.window_len)[None, :]
    frames = sig[idx] * win
    bins = np.fft.rfft(frames, n=cfg.window_len, axis=1)
    return Spectrogram(bins, cfg, sample_rate=x.sample_rate, n_samples=len(x))


_ENVELOPE_CACHE: dict[tuple, np.ndarray] = {}


def _synthesis_envelope(cfg: StftConfig, n_frames: int) -> np.ndarray:
    key = (cfg.window_len, cfg.hop, cfg.window, n_frames)
    env = _ENVELOPE_CACHE.get(key)
    if env is None:
        win = cfg.window_array()
        env = _ola_envelope(win * win, cfg.hop, n_frames)
        if len(_ENVELOPE_CACHE) > 64:
            _ENVELOPE_CACHE.clear()
        _ENVELOPE_CACHE[key] = env
    return env


def istft(spec: Spectrogram, length: int | None = None) -> Waveform:
    """Overlap-add inverse STFT, exact inverse of :func:`stft` on its range.

    ``length`` overrides the stored ``n_samples``; with neither, the output
    spans ``(T - 1) * hop`` samples.
    """
    cfg = spec.config
    n_frames = spec.n_frames
    if length is None:
        length = spec.n_samples if spec.n_samples is not None else (n_frames - 1) * cfg.hop
    win = cfg.window_array()
    frames = np.fft.irfft(spec.bins, n=cfg.window_len, axis=1) * win
    y = _overlap_add(frames, cfg.hop)
    env = _synthesis_envelope(cfg, n_frames)
    nz = env > _ENVELOPE_TINY
    y[nz] /= env[nz]
    pad = cfg.window_len // 2
    out = y[pad : pad + length]
    if len(out) < length:
        out = np.concatenate([out, np.zeros(length - len(out))])
    return Waveform(out, sample_rate=spec.sample_rate)


def istft_adjoint(grad_y: np.ndarray, cfg: StftConfig, n_frames: int) -> np.ndarray:
    """Adjoint of :func:`istft` as a real-linear map.

    Given d(loss)/d(istft output), returns the complex T x F array ``A`` such
    that d(loss) = sum(Re(A) * Re(dS) + Im(A) * Im(dS)) for a spectrogram
    perturbation dS. Used to backpropagate time-domain losses into masks.
    """
    pad = cfg.window_len // 2
    total = (n_frames - 1) * cfg.hop + cfg.window_len
    g = np.zeros(total)
    g[pad : pad + len(grad_y)] = grad_y
    env = _synthesis_envelope(cfg, n_frames)
    nz = env > _ENVELOPE_TINY
    g[nz] /= env[nz]
    g[~nz] = 0.0
    win = cfg.window_array()
    idx = cfg.hop * np.arange(n_frames)[:, None] + np.arange(cfg.window_len)[None, :]
    gframes = g[idx] * win
    spec = np.fft.rfft(gframes, n=cfg.window_len, axis=1)
    scale = np.full(cfg.n_bins, 2.0 / cfg.window_len)
    scale[0] = 1.0 / cfg.window_len
    if cfg.window_len % 2 == 0:
        scale[-1] = 1.0 / cfg.window_len
    return spec * scale


def apply_mask(mask: Mask, spec: Spectrogram) -> Spectrogram:
    """Hadamard product of a [0,1] mask with a complex spectrogram."""
    if mask.values.shape != spec.bins.shape:
        raise SignalError(
            f"mask shape {mask.values.shape} != spectrogram shape {spec.bins.shape}"
        )
    return Spectrogram(
        mask.values * spec.bins,
        spec.config,
        sample_rate=spec.sample_rate,
        n_samples=spec.n_samples,
    )


def read_wav(path) -> Waveform:
    """Read 16-bit PCM mono 16 kHz WAV; any other layout is rejected."""
    with wave.open(str(path), "rb") as f:
        n_channels = f.getnchannels()
        sampwidth = f.getsampwidth()
        rate = f.getframerate()
        if n_channels != 1:
            raise SignalError(f"{path}: expected mono WAV, got {n_channels} channels")
        if sampwidth != 2:
            raise SignalError(
                f"{path}: expected 16-bit PCM, got {8 * sampwidth}-bit samples"
            )
        if rate != DEFAULT_SAMPLE_RATE:
            raise SignalError(
                f"{path}: expected {DEFAULT_SAMPLE_RATE} Hz, got {rate} Hz"
            )
        raw = f.readframes(f.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, sample_rate=rate)


def write_wav(path, x: Waveform) -> None:
    """Write 16-bit PCM mono WAV, clipping to [-1, 1)."""
    clipped = np.clip(x.samples, -1.0, 32767.0 / 32768.0)
    ints = np.round(clipped * 32768.0).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(x.sample_rate)
        f.writeframes(ints.tobytes())
