"""Training objectives: VAD cross-entropy, time-domain reconstruction loss,
overlap-weighted spectral loss, and their weighted combination.

Each objective comes in two forms: a plain scalar evaluator, and a
``*_grad_wrt_masks`` / ``*_grad`` variant returning the analytic gradient
with respect to the network output. Spectral differences are taken on
magnitudes, and the overlap weight is computed from ground-truth magnitudes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .signal import Spectrogram, istft, istft_adjoint

BCE_CLAMP = 1e-7
L_SEP_FLOOR = 1e-8
LN10 = float(np.log(10.0))


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class OslConfig:
    """Spectral-loss settings: norm order, denominator guard, combination weight."""

    p: int = 1
    epsilon: float = 1e-8
    weight: float = 0.08

    def __post_init__(self):
        if self.p not in (1, 2):
            raise LossError(f"norm order must be 1 or 2, got {self.p}")
        if self.epsilon <= 0:
            raise LossError("epsilon must be positive")
        if self.weight < 0:
            raise LossError("combination weight must be non-negative")


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise LossError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def bce_vad(v_pred: np.ndarray, v_gt: np.ndarray) -> float:
    """Mean binary cross entropy over all K x T frame decisions."""
    v_pred = np.asarray(v_pred, dtype=np.float64)
    v_gt = np.asarray(v_gt, dtype=np.float64)
    _check_same_shape(v_pred, v_gt, "bce_vad")
    p = np.clip(v_pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return float(np.mean(-(v_gt * np.log(p) + (1.0 - v_gt) * np.log(1.0 - p))))


def bce_vad_grad(v_pred: np.ndarray, v_gt: np.ndarray) -> tuple[float, np.ndarray]:
    """BCE value and its gradient with respect to the predictions."""
    v_pred = np.asarray(v_pred, dtype=np.float64)
    v_gt = np.asarray(v_gt, dtype=np.float64)
    _check_same_shape(v_pred, v_gt, "bce_vad")
    p = np.clip(v_pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    loss = float(np.mean(-(v_gt * np.log(p) + (1.0 - v_gt) * np.log(1.0 - p))))
    grad = (-(v_gt / p) + (1.0 - v_gt) / (1.0 - p)) / v_pred.size
    # Clamped entries sit on a flat region of the loss.
    grad[(v_pred < BCE_CLAMP) | (v_pred > 1.0 - BCE_CLAMP)] = 0.0
    return loss, grad


def l_sep(
    y_hat: np.ndarray, y: np.ndarray, floor: float = L_SEP_FLOOR
) -> float:
    """log10 mean absolute time-domain reconstruction error over K signals."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_same_shape(y_hat, y, "l_sep")
    mean_abs = np.mean(np.abs(y_hat - y))
    return float(np.log10(max(floor, mean_abs)))


def overlap_weight(y_mags: np.ndarray, epsilon: float = 1e-8) -> np.ndarray:
    """Per-bin weight: summed speaker magnitude over the loudest speaker's.

    Close to the number of simultaneously energetic speakers at each bin,
    zero where all speakers are silent.
    """
    y_mags = np.asarray(y_mags, dtype=np.float64)
    if y_mags.ndim != 3:
        raise LossError(f"expected K x T x F magnitudes, got shape {y_mags.shape}")
    if y_mags.size and y_mags.min() < 0:
        raise LossError("magnitudes must be non-negative")
    return y_mags.sum(axis=0) / (y_mags.max(axis=0) + epsilon)


def osl(y_hat_mag: np.ndarray, y_mag: np.ndarray, cfg: OslConfig | None = None) -> float:
    """Overlap-weighted spectral loss on K x T x F magnitude grids."""
    cfg = cfg or OslConfig()
    y_hat_mag = np.asarray(y_hat_mag, dtype=np.float64)
    y_mag = np.asarray(y_mag, dtype=np.float64)
    _check_same_shape(y_hat_mag, y_mag, "osl")
    w = overlap_weight(y_mag, cfg.epsilon)
    diff = np.abs(y_hat_mag - y_mag) ** cfg.p
    k = y_mag.shape[0]
    return float(np.sum(w[None, :, :] * diff) / k)


def combined_sep_loss(
    y_hat: np.ndarray,
    y: np.ndarray,
    y_hat_mag: np.ndarray,
    y_mag: np.ndarray,
    cfg: OslConfig | None = None,
    floor: float = L_SEP_FLOOR,
) -> float:
    """Reconstruction loss plus ``cfg.weight`` times the spectral loss."""
    cfg = cfg or OslConfig()
    return l_sep(y_hat, y, floor) + cfg.weight * osl(y_hat_mag, y_mag, cfg)


def separated_spectrograms(masks: np.ndarray, mix_spec: Spectrogram) -> list[Spectrogram]:
    """Masked copies of the mixture spectrogram, one per speaker."""
    return [
        Spectrogram(
            masks[k] * mix_spec.bins,
            mix_spec.config,
            sample_rate=mix_spec.sample_rate,
            n_samples=mix_spec.n_samples,
        )
        for k in range(masks.shape[0])
    ]


def l_sep_grad_wrt_masks(
    masks: np.ndarray,
    mix_spec: Spectrogram,
    y_refs: np.ndarray,
    floor: float = L_SEP_FLOOR,
) -> tuple[float, np.ndarray]:
    """Reconstruction loss and its gradient with respect to the K x T x F masks.

    The forward path is mask -> Hadamard product with the mixture ->
    inverse STFT -> mean absolute error -> log10; the gradient chains back
    through the iSTFT adjoint.
    """
    k_spk = masks.shape[0]
    y_refs = np.asarray(y_refs, dtype=np.float64)
    n = y_refs.shape[1]
    y_hats = np.empty_like(y_refs)
    specs = separated_spectrograms(masks, mix_spec)
    for k in range(k_spk):
        y_hats[k] = istft(specs[k], length=n).samples
    diff = y_hats - y_refs
    mean_abs = np.mean(np.abs(diff))
    if mean_abs <= floor:
        return float(np.log10(floor)), np.zeros_like(masks)
    loss = float(np.log10(mean_abs))
    coeff = 1.0 / (mean_abs * LN10 * diff.size)
    grad = np.empty_like(masks)
    conj_x = np.conj(mix_spec.bins)
    for k in range(k_spk):
        adj = istft_adjoint(coeff * np.sign(diff[k]), mix_spec.config, mix_spec.n_frames)
        grad[k] = np.real(adj * conj_x)
    return loss, grad


def osl_grad_wrt_masks(
    masks: np.ndarray,
    mix_mag: np.ndarray,
    y_ref_mag: np.ndarray,
    cfg: OslConfig | None = None,
) -> tuple[float, np.ndarray]:
    """Spectral loss and gradient w.r.t. masks; |masked| = mask * |mixture|."""
    cfg = cfg or OslConfig()
    y_hat_mag = masks * mix_mag[None, :, :]
    _check_same_shape(y_hat_mag, y_ref_mag, "osl")
    w = overlap_weight(y_ref_mag, cfg.epsilon)
    k = masks.shape[0]
    err = y_hat_mag - y_ref_mag
    if cfg.p == 1:
        loss = float(np.sum(w[None] * np.abs(err)) / k)
        grad = (w[None] * np.sign(err)) * mix_mag[None] / k
    else:
        loss = float(np.sum(w[None] * err**2) / k)
        grad = (w[None] * 2.0 * err) * mix_mag[None] / k
    return loss, grad


def combined_grad_wrt_masks(
    masks: np.ndarray,
    mix_spec: Spectrogram,
    y_refs: np.ndarray,
    y_ref_mag: np.ndarray,
    cfg: OslConfig | None = None,
    floor: float = L_SEP_FLOOR,
) -> tuple[float, np.ndarray, dict]:
    """Combined separation objective; returns (loss, d loss / d masks, components)."""
    cfg = cfg or OslConfig()
    sep_loss, sep_grad = l_sep_grad_wrt_masks(masks, mix_spec, y_refs, floor)
    if cfg.weight == 0.0:
        return sep_loss, sep_grad, {"l_sep": sep_loss, "osl": 0.0}
    mix_mag = mix_spec.magnitude()
    osl_loss, osl_grad = osl_grad_wrt_masks(masks, mix_mag, y_ref_mag, cfg)
    total = sep_loss + cfg.weight * osl_loss
    return total, sep_grad + cfg.weight * osl_grad, {"l_sep": sep_loss, "osl": osl_loss}


def write_loss_curve(path, rows: list[dict]) -> None:
    """Emit a training loss curve as CSV with one row per step."""
    if not rows:
        raise LossError("no loss rows to write")
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def _maybe_float(v: str):
    try:
        return float(v)
    except ValueError:
        return v


def read_loss_curve(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: _maybe_float(v) for k, v in row.items()} for row in csv.DictReader(f)]
