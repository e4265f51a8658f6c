"""Desk-scale enrollment-free target-speech separation and diarization."""

from .signal import (
    Mask,
    Spectrogram,
    StftConfig,
    Waveform,
    apply_mask,
    istft,
    read_wav,
    stft,
    write_wav,
)

__version__ = "0.1.0"

__all__ = [
    "Mask",
    "Spectrogram",
    "StftConfig",
    "Waveform",
    "apply_mask",
    "istft",
    "read_wav",
    "stft",
    "write_wav",
    "__version__",
]
