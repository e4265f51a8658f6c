"""Matplotlib report figures, rendered to files next to the CSV/JSON output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_COMPONENT_KEYS = ("loss", "bce", "l_sep", "osl")


def save_loss_curve(rows: list[dict], path, title: str = "training loss") -> Path:
    """Line plot of loss components over steps from loss-curve CSV rows."""
    path = Path(path)
    steps = [r["step"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in _COMPONENT_KEYS:
        if rows and key in rows[0]:
            ax.plot(steps, [r[key] for r in rows], label=key, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_variant_cosines(cosines: dict[str, list[float]], path, title: str = "embedding similarity to oracle") -> Path:
    """Box plot of per-variant cosine similarity to the oracle embedding."""
    path = Path(path)
    names = [k for k in ("V2", "V3", "V4") if k in cosines] or sorted(cosines)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.boxplot([cosines[n] for n in names], tick_labels=names)
    ax.set_ylabel("cosine to oracle embedding")
    ax.set_title(title)
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_diarization_timeline(
    ref_tracks: list[tuple[str, float, float]],
    hyp_tracks: list[tuple[str, float, float]],
    path,
    title: str = "diarization",
) -> Path:
    """Reference vs hypothesis speaker activity as horizontal bars."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(9, 4))
    lanes: list[tuple[str, list[tuple[float, float]], str]] = []
    for prefix, tracks, color in (("ref", ref_tracks, "tab:blue"), ("hyp", hyp_tracks, "tab:orange")):
        speakers = sorted({spk for spk, _, _ in tracks})
        for spk in speakers:
            spans = [(s, e - s) for who, s, e in tracks if who == spk]
            lanes.append((f"{prefix}:{spk}", spans, color))
    for i, (label, spans, color) in enumerate(lanes):
        ax.broken_barh(spans, (i - 0.4, 0.8), facecolors=color, alpha=0.8)
    ax.set_yticks(range(len(lanes)))
    ax.set_yticklabels([label for label, _, _ in lanes])
    ax.set_xlabel("time (s)")
    ax.set_title(title)
    ax.grid(alpha=0.3, axis="x")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_mask_image(masks: np.ndarray, path, title: str = "separation masks") -> Path:
    """Per-speaker time-frequency masks as stacked images."""
    path = Path(path)
    k = masks.shape[0]
    fig, axes = plt.subplots(k, 1, figsize=(8, 2.2 * k), squeeze=False)
    for i in range(k):
        ax = axes[i, 0]
        ax.imshow(
            masks[i].T, origin="lower", aspect="auto", cmap="magma", vmin=0.0, vmax=1.0
        )
        ax.set_ylabel(f"spk{i}\nfreq bin")
    axes[-1, 0].set_xlabel("frame")
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
