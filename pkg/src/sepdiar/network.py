"""Speaker-conditioned two-stage network.

Topology: a speaker-independent trunk (two per-frame feed-forward layers with
tanh plus a causal exponential-smoothing temporal mixer), concatenation of a
speaker embedding onto the trunk latent, two speaker-dependent feed-forward
layers shared across speakers, and a swappable head. Stage 1 uses a frame
activity head (latent -> 1); stage 2 widens it to a mask head (latent -> F)
by replicating the activity head's weights once per frequency row, so right
after the switch every mask row reproduces the stage-1 activity output.

Gradients are computed analytically by hand; ``tests`` verify them against
central finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.signal
from scipy.special import expit

from . import losses
from .losses import OslConfig
from .signal import Spectrogram, istft

HEAD_VAD = "vad"
HEAD_MASK = "mask"

_ARRAY_FIELDS = (
    "trunk_w1",
    "trunk_b1",
    "trunk_w2",
    "trunk_b2",
    "spk_w1",
    "spk_b1",
    "spk_w2",
    "spk_b2",
    "head_w",
    "head_b",
)


class NetworkError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class NetDims:
    n_freq: int
    embed_dim: int
    latent_dim: int
    max_speakers: int = 8

    def validate(self):
        if min(self.n_freq, self.embed_dim, self.latent_dim, self.max_speakers) < 1:
            raise NetworkError(f"invalid dims {self}")


@dataclass(frozen=True)
class TsNetParams:
    dims: NetDims
    head_kind: str
    smooth_alpha: float
    trunk_w1: np.ndarray  # (R, F)
    trunk_b1: np.ndarray  # (R,)
    trunk_w2: np.ndarray  # (R, R)
    trunk_b2: np.ndarray  # (R,)
    spk_w1: np.ndarray  # (R, R+E)
    spk_b1: np.ndarray  # (R,)
    spk_w2: np.ndarray  # (R, R)
    spk_b2: np.ndarray  # (R,)
    head_w: np.ndarray  # (1, R) for vad, (F, R) for mask
    head_b: np.ndarray  # (1,) or (F,)

    def __post_init__(self):
        self.dims.validate()
        if self.head_kind not in (HEAD_VAD, HEAD_MASK):
            raise NetworkError(f"unknown head kind {self.head_kind!r}")
        rows = 1 if self.head_kind == HEAD_VAD else self.dims.n_freq
        if self.head_w.shape != (rows, self.dims.latent_dim) or self.head_b.shape != (rows,):
            raise NetworkError(
                f"head arrays {self.head_w.shape}/{self.head_b.shape} inconsistent "
                f"with {self.head_kind!r} head of {rows} rows"
            )
        for name in _ARRAY_FIELDS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise NetworkError(f"non-finite values in parameter {name}")

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _ARRAY_FIELDS}

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays().values()])

    def with_vector(self, vec: np.ndarray) -> "TsNetParams":
        out = {}
        offset = 0
        for name, a in self.arrays().items():
            out[name] = vec[offset : offset + a.size].reshape(a.shape).copy()
            offset += a.size
        if offset != vec.size:
            raise NetworkError(f"vector of {vec.size} values, expected {offset}")
        return replace(self, **out)

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays().values())


def init_params(
    dims: NetDims,
    seed: int,
    head_kind: str = HEAD_VAD,
    smooth_alpha: float = 0.5,
) -> TsNetParams:
    """Seeded Gaussian init, scaled by 1/sqrt(fan-in)."""
    rng = np.random.default_rng(seed)
    r, f, e = dims.latent_dim, dims.n_freq, dims.embed_dim

    def w(shape):
        return rng.normal(0.0, 1.0 / np.sqrt(shape[-1]), size=shape)

    rows = 1 if head_kind == HEAD_VAD else f
    return TsNetParams(
        dims=dims,
        head_kind=head_kind,
        smooth_alpha=smooth_alpha,
        trunk_w1=w((r, f)),
        trunk_b1=np.zeros(r),
        trunk_w2=w((r, r)),
        trunk_b2=np.zeros(r),
        spk_w1=w((r, r + e)),
        spk_b1=np.zeros(r),
        spk_w2=w((r, r)),
        spk_b2=np.zeros(r),
        head_w=w((rows, r)),
        head_b=np.zeros(rows),
    )


def log_mag_features(spec: Spectrogram, eps: float = 1e-8) -> np.ndarray:
    """Network input features: mean/variance-normalized log magnitude, T x F."""
    feats = np.log(spec.magnitude() + eps)
    mu = feats.mean()
    sigma = feats.std()
    return (feats - mu) / max(sigma, eps)


@dataclass
class ForwardTrace:
    """Intermediate activations cached for the backward pass."""

    params: TsNetParams
    feats: np.ndarray
    embeds: np.ndarray
    h1: np.ndarray  # (T, R) trunk layer 1, post tanh
    h2: np.ndarray  # (T, R) trunk layer 2, post tanh
    smooth: np.ndarray  # (T, R) temporal mixer output
    spk_in: np.ndarray  # (K, T, R+E)
    g1: np.ndarray  # (K, T, R)
    g2: np.ndarray  # (K, T, R)
    out: np.ndarray  # (K, T) or (K, T, F)


def _check_inputs(p: TsNetParams, feats: np.ndarray, embeds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    feats = np.asarray(feats, dtype=np.float64)
    embeds = np.asarray(embeds, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != p.dims.n_freq:
        raise NetworkError(
            f"features must be T x {p.dims.n_freq}, got shape {feats.shape}"
        )
    if embeds.ndim != 2 or embeds.shape[1] != p.dims.embed_dim:
        raise NetworkError(
            f"embeddings must be K x {p.dims.embed_dim}, got shape {embeds.shape}"
        )
    if embeds.shape[0] > p.dims.max_speakers:
        raise NetworkError(
            f"{embeds.shape[0]} speakers exceed max of {p.dims.max_speakers}"
        )
    return feats, embeds


def _causal_smooth(h: np.ndarray, alpha: float) -> np.ndarray:
    # s[t] = alpha * h[t] + (1 - alpha) * s[t-1], warm-started at s[-1] = h[0]
    # so a time-constant input passes through unchanged.
    zi = (1.0 - alpha) * h[0:1]
    out, _ = scipy.signal.lfilter([alpha], [1.0, -(1.0 - alpha)], h, axis=0, zi=zi)
    return out


def _forward(p: TsNetParams, feats: np.ndarray, embeds: np.ndarray) -> ForwardTrace:
    feats, embeds = _check_inputs(p, feats, embeds)
    h1 = np.tanh(feats @ p.trunk_w1.T + p.trunk_b1)
    h2 = np.tanh(h1 @ p.trunk_w2.T + p.trunk_b2)
    smooth = _causal_smooth(h2, p.smooth_alpha)

    k, t = embeds.shape[0], feats.shape[0]
    spk_in = np.empty((k, t, p.dims.latent_dim + p.dims.embed_dim))
    spk_in[:, :, : p.dims.latent_dim] = smooth[None, :, :]
    spk_in[:, :, p.dims.latent_dim :] = embeds[:, None, :]
    g1 = np.tanh(spk_in @ p.spk_w1.T + p.spk_b1)
    g2 = np.tanh(g1 @ p.spk_w2.T + p.spk_b2)

    z = g2 @ p.head_w.T + p.head_b  # (K, T, rows)
    out = expit(z[:, :, 0]) if p.head_kind == HEAD_VAD else expit(z)
    return ForwardTrace(p, feats, embeds, h1, h2, smooth, spk_in, g1, g2, out)


def forward_vad(
    p: TsNetParams, feats: np.ndarray, embeds: np.ndarray, want_trace: bool = False
):
    """Per-speaker frame activity probabilities, shape K x T."""
    if p.head_kind != HEAD_VAD:
        raise NetworkError("forward_vad requires an activity head")
    trace = _forward(p, feats, embeds)
    return (trace.out, trace) if want_trace else trace.out


def forward_sep(
    p: TsNetParams, feats: np.ndarray, embeds: np.ndarray, want_trace: bool = False
):
    """Per-speaker separation masks, shape K x T x F with values in (0, 1)."""
    if p.head_kind != HEAD_MASK:
        raise NetworkError("forward_sep requires a mask head")
    trace = _forward(p, feats, embeds)
    return (trace.out, trace) if want_trace else trace.out


def init_stage2(vad_params: TsNetParams) -> TsNetParams:
    """Widen the activity head to a mask head by replicating its single row F times."""
    if vad_params.head_kind != HEAD_VAD:
        raise NetworkError("init_stage2 expects stage-1 parameters with an activity head")
    f = vad_params.dims.n_freq
    return replace(
        vad_params,
        head_kind=HEAD_MASK,
        head_w=np.tile(vad_params.head_w[0], (f, 1)),
        head_b=np.full(f, vad_params.head_b[0]),
    )


def backward(p: TsNetParams, trace: ForwardTrace, grad_out: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients for the loss whose output-gradient is ``grad_out``.

    ``grad_out`` matches the forward output shape (K x T for the activity
    head, K x T x F for the mask head).
    """
    if trace.params is not p:
        raise NetworkError("stale trace: backward called with mismatched parameters")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != trace.out.shape:
        raise NetworkError(
            f"grad shape {grad_out.shape} does not match output {trace.out.shape}"
        )

    dz = grad_out * trace.out * (1.0 - trace.out)
    if p.head_kind == HEAD_VAD:
        dz = dz[:, :, None]  # (K, T, 1)
    g = {}
    g["head_w"] = np.einsum("ktf,ktr->fr", dz, trace.g2)
    g["head_b"] = dz.sum(axis=(0, 1))
    dg2 = dz @ p.head_w  # (K, T, R)

    db2 = dg2 * (1.0 - trace.g2**2)
    g["spk_w2"] = np.einsum("ktr,kts->rs", db2, trace.g1)
    g["spk_b2"] = db2.sum(axis=(0, 1))
    dg1 = db2 @ p.spk_w2

    db1 = dg1 * (1.0 - trace.g1**2)
    g["spk_w1"] = np.einsum("ktr,kts->rs", db1, trace.spk_in)
    g["spk_b1"] = db1.sum(axis=(0, 1))
    dsmooth = (db1 @ p.spk_w1)[:, :, : p.dims.latent_dim].sum(axis=0)  # (T, R)

    # Causal smoothing adjoint: the same recursion run backwards in time;
    # the warm start routes the full initial-state weight onto h[0].
    alpha = p.smooth_alpha
    carry = scipy.signal.lfilter(
        [1.0], [1.0, -(1.0 - alpha)], dsmooth[::-1], axis=0
    )[::-1]
    dh2 = alpha * carry
    dh2[0] = carry[0]

    da2 = dh2 * (1.0 - trace.h2**2)
    g["trunk_w2"] = da2.T @ trace.h1
    g["trunk_b2"] = da2.sum(axis=0)
    dh1 = da2 @ p.trunk_w2

    da1 = dh1 * (1.0 - trace.h1**2)
    g["trunk_w1"] = da1.T @ trace.feats
    g["trunk_b1"] = da1.sum(axis=0)
    return g


def grads_to_vector(p: TsNetParams, grads: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([grads[name].ravel() for name in _ARRAY_FIELDS])


# ---------------------------------------------------------------------------
# Training examples and loop
# ---------------------------------------------------------------------------


@dataclass
class VadExample:
    feats: np.ndarray  # (T, F)
    embeds: np.ndarray  # (K, E)
    targets: np.ndarray  # (K, T) in {0, 1}


@dataclass
class SepExample:
    feats: np.ndarray  # (T, F)
    embeds: np.ndarray  # (K, E)
    mix_spec: Spectrogram
    y_refs: np.ndarray  # (K, N) clean time-domain references
    y_ref_mag: np.ndarray  # (K, T, F) clean magnitude references


@dataclass(frozen=True)
class LossSpec:
    kind: str  # "bce" or "sep"
    osl: OslConfig = field(default_factory=lambda: OslConfig(weight=0.0))
    floor: float = losses.L_SEP_FLOOR

    def __post_init__(self):
        if self.kind not in ("bce", "sep"):
            raise NetworkError(f"unknown loss kind {self.kind!r}")


@dataclass(frozen=True)
class OptimizerSpec:
    lr: float = 0.05
    momentum: float = 0.9
    steps: int = 200


def example_loss_and_grad(
    p: TsNetParams, example, loss_spec: LossSpec
) -> tuple[float, dict[str, np.ndarray], dict]:
    """Loss, parameter gradients, and per-component values for one example."""
    if loss_spec.kind == "bce":
        if p.head_kind != HEAD_VAD:
            raise NetworkError("bce loss requires an activity head")
        out, trace = forward_vad(p, example.feats, example.embeds, want_trace=True)
        loss, dout = losses.bce_vad_grad(out, example.targets)
        comps = {"bce": loss}
    else:
        if p.head_kind != HEAD_MASK:
            raise NetworkError("separation loss requires a mask head")
        out, trace = forward_sep(p, example.feats, example.embeds, want_trace=True)
        loss, dout, comps = losses.combined_grad_wrt_masks(
            out,
            example.mix_spec,
            example.y_refs,
            example.y_ref_mag,
            loss_spec.osl,
            loss_spec.floor,
        )
    return loss, backward(p, trace, dout), comps


def evaluate_loss(p: TsNetParams, examples, loss_spec: LossSpec) -> float:
    """Mean loss over examples, no gradients."""
    total = 0.0
    for ex in examples:
        if loss_spec.kind == "bce":
            out = forward_vad(p, ex.feats, ex.embeds)
            total += losses.bce_vad(out, ex.targets)
        else:
            masks = forward_sep(p, ex.feats, ex.embeds)
            specs = losses.separated_spectrograms(masks, ex.mix_spec)
            y_hat = np.stack(
                [istft(s, length=ex.y_refs.shape[1]).samples for s in specs]
            )
            total += losses.combined_sep_loss(
                y_hat,
                ex.y_refs,
                masks * ex.mix_spec.magnitude()[None],
                ex.y_ref_mag,
                loss_spec.osl,
                loss_spec.floor,
            )
    return total / len(examples)


def train(
    p: TsNetParams,
    dataset,
    loss_spec: LossSpec,
    optimizer: OptimizerSpec,
    seed: int,
    checkpoint_dir=None,
    checkpoint_meta: dict | None = None,
) -> tuple[TsNetParams, list[dict]]:
    """Momentum gradient descent, one example per step, deterministic per seed.

    ``dataset`` is either a list of examples or a callable
    ``(epoch, rng) -> list`` so embeddings can be resampled every epoch.
    Checkpoints are written once per epoch when ``checkpoint_dir`` is given.
    Raises :class:`TrainingDiverged` on a non-finite loss.
    """
    rng = np.random.default_rng(seed)
    vec = p.to_vector()
    velocity = np.zeros_like(vec)
    params = p
    curve: list[dict] = []
    step = 0
    epoch = 0
    while step < optimizer.steps:
        examples = dataset(epoch, rng) if callable(dataset) else dataset
        if not examples:
            raise NetworkError("empty training dataset")
        order = rng.permutation(len(examples))
        for i in order:
            if step >= optimizer.steps:
                break
            loss, grads, comps = example_loss_and_grad(params, examples[i], loss_spec)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss} at step {step} (epoch {epoch}, example {i})"
                )
            gvec = grads_to_vector(params, grads)
            velocity = optimizer.momentum * velocity - optimizer.lr * gvec
            vec = vec + velocity
            params = params.with_vector(vec)
            step += 1
            curve.append({"step": step, "loss": loss, **comps})
        epoch += 1
        if checkpoint_dir is not None:
            meta = dict(checkpoint_meta or {})
            meta.update({"seed": seed, "step": step})
            save_checkpoint(
                Path(checkpoint_dir) / f"epoch_{epoch:04d}.ckpt", params, **meta
            )
    return params, curve


# ---------------------------------------------------------------------------
# Checkpoint format: one JSON header line, then flat little-endian float64
# arrays concatenated in header order.
# ---------------------------------------------------------------------------


def save_checkpoint(path, p: TsNetParams, **meta) -> None:
    header = {
        "format": "sepdiar-checkpoint-v1",
        "dims": {
            "n_freq": p.dims.n_freq,
            "embed_dim": p.dims.embed_dim,
            "latent_dim": p.dims.latent_dim,
            "max_speakers": p.dims.max_speakers,
        },
        "head": p.head_kind,
        "smooth_alpha": p.smooth_alpha,
        "dtype": "<f8",
        "arrays": [
            {"name": name, "shape": list(a.shape)} for name, a in p.arrays().items()
        ],
    }
    header.update(meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for a in p.arrays().values():
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[TsNetParams, dict]:
    with open(path, "rb") as f:
        header_line = f.readline()
        blob = f.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format") != "sepdiar-checkpoint-v1":
        raise NetworkError(f"{path}: not a sepdiar checkpoint")
    dims = NetDims(**header["dims"])
    arrays = {}
    offset = 0
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(
            blob, dtype="<f8", count=size, offset=offset
        ).reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64)
        offset += size * 8
    if offset != len(blob):
        raise NetworkError(f"{path}: trailing bytes in checkpoint payload")
    params = TsNetParams(
        dims=dims,
        head_kind=header["head"],
        smooth_alpha=float(header["smooth_alpha"]),
        **arrays,
    )
    meta = {
        k: v
        for k, v in header.items()
        if k not in ("format", "dims", "head", "smooth_alpha", "dtype", "arrays")
    }
    return params, meta
