"""Experiment configuration and replayable run manifests.

The config is one JSON document; unknown keys anywhere are rejected so typos
fail fast. Every CLI command writes a manifest recording its config snapshot,
input content hashes, seeds, and numeric results; re-running a command from
its manifest must reproduce the results bit-exactly.
"""

from __future__ import annotations

import copy
import hashlib
import json
import time
from pathlib import Path


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG: dict = {
    "corpus": {
        "pool_speakers": 4,
        "utts_per_speaker": 4,
        "n_mixtures": 6,
        "speakers_per_mixture": 2,
        "max_overlap": 0.5,
        "min_len_s": 16.0,
        "chunk_s": None,
        "utt_duration_range_s": [3.0, 6.0],
        "vad_threshold_db": -40.0,
        "holdout_mixtures": 2,
        "source_dir": None,
    },
    "stft": {"window_len": 256, "hop": 64, "window": "sqrt_hann"},
    "encoder": {"dim": 24},
    "model": {"latent_dim": 16, "max_speakers": 8, "smooth_alpha": 0.5},
    "stage1": {
        "sampling": "UNIFORM_MIX",
        "overlap_fraction": 0.1,
        "steps": 150,
        "lr": 0.2,
        "momentum": 0.9,
    },
    "stage2": {
        "sampling": "V1",
        "overlap_fraction": 0.1,
        "init_from": None,
        "random_init": False,
        "steps": 150,
        "lr": 0.05,
        "momentum": 0.9,
        "osl_weight": 0.08,
        "osl_p": 1,
        "osl_epsilon": 1e-8,
    },
    "infer": {
        "vad_threshold_db": -40.0,
        "window_s": 2.0,
        "num_speakers": None,
        "k_max": 8,
        "mask_active_threshold": 0.5,
        "oracle_overlap_filter": True,
    },
    "score": {"der_collar_s": 0.25},
}


def _check_keys(config: dict, reference: dict, path: str = "") -> None:
    for key, value in config.items():
        if key not in reference:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(reference[key], dict) and isinstance(value, dict):
            _check_keys(value, reference[key], path=f"{path}{key}.")


def merge_config(overrides: dict | None) -> dict:
    """Defaults overlaid with ``overrides``; unknown keys are rejected."""
    merged = copy.deepcopy(DEFAULT_CONFIG)
    if overrides:
        _check_keys(overrides, DEFAULT_CONFIG)
        for section, values in overrides.items():
            if isinstance(values, dict):
                merged[section].update(values)
            else:
                merged[section] = values
    _validate(merged)
    return merged


def _validate(cfg: dict) -> None:
    corpus = cfg["corpus"]
    if corpus["speakers_per_mixture"] > 8:
        raise ConfigError("speakers_per_mixture exceeds the 8-speaker cap")
    if not (0.0 <= corpus["max_overlap"] < 1.0):
        raise ConfigError("corpus.max_overlap must be in [0, 1)")
    for stage in ("stage1", "stage2"):
        s = cfg[stage]
        if s["steps"] < 0 or s["lr"] < 0:
            raise ConfigError(f"{stage}: steps and lr must be non-negative")
    w = cfg["stage2"]["osl_weight"]
    if not (0.0 <= w <= 0.2):
        raise ConfigError(f"stage2.osl_weight must be in [0, 0.2], got {w}")


def load_config(path=None) -> dict:
    if path is None:
        return merge_config(None)
    with open(path) as f:
        try:
            overrides = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON config: {exc}") from None
    return merge_config(overrides)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(65536), b""):
            h.update(block)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_manifest(
    path,
    command: str,
    config: dict,
    seed: int,
    inputs: dict[str, str],
    results: dict,
    extra: dict | None = None,
) -> Path:
    """Persist everything needed to replay a run and check its results."""
    doc = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": inputs,
        "results": results,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        doc.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_manifest(path) -> dict:
    with open(path) as f:
        return json.load(f)
