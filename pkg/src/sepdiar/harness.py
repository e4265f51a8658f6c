"""Experiment orchestration shared by the CLI and the acceptance experiments:
corpus building, stage plans, training-example assembly with per-epoch
embedding sampling, held-out evaluation, and the embedding study.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cluster as cluster_mod
from . import mixture as mixture_mod
from .config import ConfigError, sha256_file
from .embed import SamplingStrategy, sample_embedding, stack_embeddings
from .losses import OslConfig
from .mixture import Mixture
from .network import (
    HEAD_MASK,
    HEAD_VAD,
    LossSpec,
    NetDims,
    OptimizerSpec,
    SepExample,
    TsNetParams,
    VadExample,
    evaluate_loss,
    init_params,
    init_stage2,
    load_checkpoint,
    train,
)
from .signal import StftConfig, stft

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StagePlan:
    """One training stage: task, sampling strategy, init source, optimizer."""

    stage: str  # "vad" or "sep"
    sampling: SamplingStrategy
    steps: int
    lr: float
    seed: int
    momentum: float = 0.9
    init_from: str | None = None
    random_init: bool = False
    osl: OslConfig = field(default_factory=lambda: OslConfig(weight=0.0))
    freeze_sampling: bool = False

    def __post_init__(self):
        if self.stage not in ("vad", "sep"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.stage == "sep" and self.init_from is None and not self.random_init:
            raise ConfigError(
                "separation stage needs init_from or an explicit random_init flag"
            )
        if not (0.0 <= self.osl.weight <= 0.2):
            raise ConfigError(f"osl weight {self.osl.weight} outside [0, 0.2]")


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------


def build_toy_corpus(corpus_cfg: dict, stft_cfg: StftConfig, out_dir, seed: int) -> Path:
    """Synthesize and persist a corpus; returns the corpus index path.

    The utterance pool is the deterministic toy generator unless
    ``corpus_cfg["source_dir"]`` points at a directory of real WAVs
    (one subdirectory per speaker).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if corpus_cfg.get("source_dir"):
        pool = mixture_mod.load_utterance_pool(corpus_cfg["source_dir"])
    else:
        pool = mixture_mod.make_toy_pool(
            corpus_cfg["pool_speakers"],
            corpus_cfg["utts_per_speaker"],
            seed=seed,
            duration_range_s=tuple(corpus_cfg["utt_duration_range_s"]),
        )
    names = []
    for i in range(corpus_cfg["n_mixtures"]):
        m = mixture_mod.synthesize_mixture(
            pool,
            corpus_cfg["speakers_per_mixture"],
            max_overlap=corpus_cfg["max_overlap"],
            min_len_s=corpus_cfg["min_len_s"],
            seed=[seed, i],
            stft_cfg=stft_cfg,
            vad_threshold_db=corpus_cfg["vad_threshold_db"],
        )
        if corpus_cfg["chunk_s"]:
            m = mixture_mod.chunk(m, corpus_cfg["chunk_s"], seed=[seed, i, 1])
        name = f"mix{i:03d}"
        mixture_mod.save_mixture(
            out_dir, name, m, vad_threshold_db=corpus_cfg["vad_threshold_db"]
        )
        names.append(name)
    index = {
        "mixtures": names,
        "seed": seed,
        "corpus_config": corpus_cfg,
        "hash": corpus_hash(out_dir, names),
    }
    index_path = out_dir / "corpus.json"
    with open(index_path, "w") as f:
        json.dump(index, f, indent=2, sort_keys=True)
        f.write("\n")
    return index_path


def corpus_hash(corpus_dir, names: list[str]) -> str:
    """Order-stable combined hash of every manifest and WAV in the corpus."""
    import hashlib

    corpus_dir = Path(corpus_dir)
    h = hashlib.sha256()
    for name in names:
        for path in sorted(corpus_dir.glob(f"{name}*")):
            if path.suffix in (".json", ".wav"):
                h.update(path.name.encode())
                h.update(sha256_file(path).encode())
    return h.hexdigest()


def load_corpus(corpus_dir) -> tuple[list[Mixture], dict]:
    corpus_dir = Path(corpus_dir)
    with open(corpus_dir / "corpus.json") as f:
        index = json.load(f)
    mixtures = [
        mixture_mod.load_mixture(corpus_dir / f"{name}.json")
        for name in index["mixtures"]
    ]
    return mixtures, index


def split_corpus(mixtures: list[Mixture], holdout: int) -> tuple[list[Mixture], list[Mixture]]:
    if holdout >= len(mixtures):
        raise ConfigError(
            f"holdout of {holdout} leaves no training mixtures out of {len(mixtures)}"
        )
    return mixtures[: len(mixtures) - holdout], mixtures[len(mixtures) - holdout :]


# ---------------------------------------------------------------------------
# Training data
# ---------------------------------------------------------------------------


class TrainingData:
    """Per-mixture tensors computed once; embeddings resampled every epoch."""

    def __init__(
        self,
        mixtures: list[Mixture],
        stft_cfg: StftConfig,
        encoder,
        plan: StagePlan,
    ):
        self.mixtures = mixtures
        self.stft_cfg = stft_cfg
        self.encoder = encoder
        self.plan = plan
        self._static = [self._precompute(m) for m in mixtures]

    def _precompute(self, m: Mixture) -> dict:
        from .network import log_mag_features

        spec = stft(m.mix, self.stft_cfg)
        static = {
            "spec": spec,
            "feats": log_mag_features(spec),
            "targets": m.activity.astype(np.float64),
        }
        if self.plan.stage == "sep":
            static["y_refs"] = np.stack([s.samples for s in m.sources])
            static["y_ref_mag"] = np.stack(
                [np.abs(stft(s, self.stft_cfg).bins) for s in m.sources]
            )
        return static

    def _embeddings(self, m: Mixture, mix_idx: int, epoch: int) -> np.ndarray:
        key = 0 if self.plan.freeze_sampling else epoch
        embs = [
            sample_embedding(
                m, spk, self.plan.sampling, self.encoder, seed=[self.plan.seed, mix_idx, key]
            )
            for spk in m.speakers
        ]
        return stack_embeddings(embs)

    def __call__(self, epoch: int, rng) -> list:
        out = []
        for i, (m, static) in enumerate(zip(self.mixtures, self._static)):
            embeds = self._embeddings(m, i, epoch)
            if self.plan.stage == "vad":
                out.append(VadExample(static["feats"], embeds, static["targets"]))
            else:
                out.append(
                    SepExample(
                        static["feats"],
                        embeds,
                        static["spec"],
                        static["y_refs"],
                        static["y_ref_mag"],
                    )
                )
        return out


def planned_variant_counts(
    plan: StagePlan, mixtures: list[Mixture], epochs: int
) -> dict[str, int]:
    """How often each sampling variant will be drawn over a training run."""
    from .embed import resolved_variant

    counts: dict[str, int] = {}
    for epoch in range(epochs):
        key = 0 if plan.freeze_sampling else epoch
        for i, m in enumerate(mixtures):
            for spk in m.speakers:
                v = resolved_variant(m, spk, plan.sampling, seed=[plan.seed, i, key])
                counts[v] = counts.get(v, 0) + 1
    return counts


def initial_params(
    plan: StagePlan, dims: NetDims, smooth_alpha: float = 0.5
) -> TsNetParams:
    if plan.stage == "vad":
        return init_params(dims, plan.seed, HEAD_VAD, smooth_alpha)
    if plan.init_from is not None:
        stage1, _ = load_checkpoint(plan.init_from)
        if stage1.head_kind == HEAD_VAD:
            return init_stage2(stage1)
        return stage1  # resuming an existing mask-head checkpoint
    return init_params(dims, plan.seed, HEAD_MASK, smooth_alpha)


def run_stage(
    plan: StagePlan,
    mixtures: list[Mixture],
    stft_cfg: StftConfig,
    encoder,
    model_cfg: dict,
    checkpoint_dir=None,
) -> tuple[TsNetParams, list[dict]]:
    dims = NetDims(
        n_freq=stft_cfg.n_bins,
        embed_dim=encoder.dim,
        latent_dim=model_cfg["latent_dim"],
        max_speakers=model_cfg["max_speakers"],
    )
    params = initial_params(plan, dims, model_cfg["smooth_alpha"])
    data = TrainingData(mixtures, stft_cfg, encoder, plan)
    loss_spec = (
        LossSpec(kind="bce") if plan.stage == "vad" else LossSpec(kind="sep", osl=plan.osl)
    )
    optimizer = OptimizerSpec(lr=plan.lr, momentum=plan.momentum, steps=plan.steps)
    return train(
        params,
        data,
        loss_spec,
        optimizer,
        seed=plan.seed,
        checkpoint_dir=checkpoint_dir,
        checkpoint_meta={"stage": 1 if plan.stage == "vad" else 2},
    )


def heldout_sep_loss(
    params: TsNetParams,
    mixtures: list[Mixture],
    stft_cfg: StftConfig,
    encoder,
    eval_strategy: SamplingStrategy,
    seed: int,
    osl: OslConfig | None = None,
) -> float:
    """Mean separation loss on held-out mixtures with sampled eval embeddings."""
    plan = StagePlan(
        stage="sep",
        sampling=eval_strategy,
        steps=0,
        lr=0.0,
        seed=seed,
        random_init=True,
        osl=osl or OslConfig(weight=0.0),
        freeze_sampling=True,
    )
    data = TrainingData(mixtures, stft_cfg, encoder, plan)
    examples = data(0, None)
    return evaluate_loss(params, examples, LossSpec(kind="sep", osl=plan.osl))


def separated_magnitudes(
    params: TsNetParams, m: Mixture, stft_cfg: StftConfig, encoder, seed: int,
    eval_strategy: SamplingStrategy,
) -> np.ndarray:
    """Masked mixture magnitudes (K, T, F) for analysis of one mixture."""
    from .network import forward_sep, log_mag_features

    spec = stft(m.mix, stft_cfg)
    feats = log_mag_features(spec)
    embs = stack_embeddings(
        [
            sample_embedding(m, spk, eval_strategy, encoder, seed=[seed, 0])
            for spk in m.speakers
        ]
    )
    masks = forward_sep(params, feats, embs)
    return masks * spec.magnitude()[None]


def boundary_jump_statistic(
    sep_mags: np.ndarray, boundary_times_s: list[float], frame_rate: float
) -> float:
    """Mean magnitude jump between the frames adjacent to each boundary."""
    t_max = sep_mags.shape[1]
    jumps = []
    for b in boundary_times_s:
        t = int(round(b * frame_rate))
        if 1 <= t < t_max:
            jumps.append(np.mean(np.abs(sep_mags[:, t, :] - sep_mags[:, t - 1, :])))
    if not jumps:
        raise ConfigError("no interior boundaries to evaluate")
    return float(np.mean(jumps))


def subsegment_boundaries(m: Mixture) -> list[float]:
    """Times where the set of active speakers changes, excluding the edges."""
    times = sorted({t for l in m.labels for t in (l.start_s, l.end_s)})
    return [t for t in times if 1e-6 < t < m.duration_s - 1e-6]


# ---------------------------------------------------------------------------
# Embedding study
# ---------------------------------------------------------------------------


def embed_study(
    mixtures: list[Mixture], encoder, seed: int = 0, overlap_fraction: float = 0.1
) -> tuple[list[dict], dict]:
    """Per-speaker cosine of each sampling variant to the oracle, plus
    cluster purity with and without overlap filtering."""
    from .embed import cosine

    rows = []
    purity_with = []
    purity_without = []
    for i, m in enumerate(mixtures):
        embs = {}
        for variant in ("V1", "V2", "V3", "V4"):
            strategy = SamplingStrategy(variant, overlap_fraction=overlap_fraction)
            for spk in m.speakers:
                embs[(variant, spk)] = sample_embedding(
                    m, spk, strategy, encoder, seed=[seed, i]
                )
        for spk in m.speakers:
            rows.append(
                {
                    "mixture": i,
                    "speaker": spk,
                    "cos_v2_v1": cosine(embs[("V2", spk)], embs[("V1", spk)]),
                    "cos_v3_v1": cosine(embs[("V3", spk)], embs[("V1", spk)]),
                    "cos_v4_v1": cosine(embs[("V4", spk)], embs[("V1", spk)]),
                }
            )
        pw, po = window_purity(m, encoder, seed=[seed, i])
        if pw is not None:
            purity_with.append(pw)
            purity_without.append(po)
    summary = {
        "mean_cos_v2_v1": float(np.mean([r["cos_v2_v1"] for r in rows])),
        "mean_cos_v3_v1": float(np.mean([r["cos_v3_v1"] for r in rows])),
        "mean_cos_v4_v1": float(np.mean([r["cos_v4_v1"] for r in rows])),
        "mean_purity_filtered": float(np.mean(purity_with)) if purity_with else None,
        "mean_purity_unfiltered": float(np.mean(purity_without)) if purity_without else None,
        "n_mixtures": len(mixtures),
        "n_rows": len(rows),
    }
    return rows, summary


def _window_true_speaker(m: Mixture, w0: float, w1: float) -> str | None:
    """Dominant speaker of a window by ground-truth active time."""
    best, best_time = None, 0.0
    for k, spk in enumerate(m.speakers):
        fps = m.mix.sample_rate / m.stft_config.hop
        t0 = int(np.ceil(w0 * fps - 1e-9))
        t1 = min(int(np.ceil(w1 * fps - 1e-9)), m.activity.shape[1])
        active = float(m.activity[k, t0:t1].sum())
        if active > best_time:
            best, best_time = spk, active
    return best


def window_purity(m: Mixture, encoder, seed=0) -> tuple[float | None, float | None]:
    """Cluster purity over 2 s windows, with and without the oracle overlap filter."""
    windows = cluster_mod.extract_windows(m.mix)
    detector = cluster_mod.OracleOverlapDetector(m)

    def purity_of(wins):
        usable = [
            (w, _window_true_speaker(m, *w))
            for w in wins
        ]
        usable = [(w, spk) for w, spk in usable if spk is not None]
        if len(usable) < 2:
            return None
        embs = []
        for (w0, w1), _ in usable:
            sr = m.mix.sample_rate
            clip = m.mix.samples[int(round(w0 * sr)) : int(round(w1 * sr))]
            from .signal import Waveform

            embs.append(encoder.encode(Waveform(clip, sr)))
        k_true = len({spk for _, spk in usable})
        if k_true < 1:
            return None
        assignment = cluster_mod.spectral_cluster(embs, k=max(k_true, 1), seed=0)
        return cluster_mod.cluster_purity(
            [spk for _, spk in usable], assignment.labels
        )

    filtered = cluster_mod.overlap_filter(windows, detector)
    p_with = purity_of(filtered)
    p_without = purity_of(windows)
    if p_with is None or p_without is None:
        return None, None
    return p_with, p_without
