import json

import numpy as np
import pytest

from sepdiar.config import ConfigError, load_config, merge_config
from sepdiar.embed import SamplingStrategy
from sepdiar.harness import (
    StagePlan,
    TrainingData,
    build_toy_corpus,
    corpus_hash,
    embed_study,
    heldout_sep_loss,
    load_corpus,
    run_stage,
    split_corpus,
    subsegment_boundaries,
)
from sepdiar.losses import OslConfig
from sepdiar.network import HEAD_MASK, HEAD_VAD, save_checkpoint

MODEL_CFG = {"latent_dim": 8, "max_speakers": 8, "smooth_alpha": 0.5}


# --- config ------------------------------------------------------------------


def test_default_config_valid():
    cfg = merge_config(None)
    assert cfg["stage2"]["osl_weight"] == 0.08


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        merge_config({"corpus": {"n_mixtures": 3, "typo_key": 1}})
    with pytest.raises(ConfigError, match="unknown config key"):
        merge_config({"not_a_section": {}})


def test_osl_weight_range_enforced():
    with pytest.raises(ConfigError, match="osl_weight"):
        merge_config({"stage2": {"osl_weight": 0.5}})


def test_speaker_cap_enforced():
    with pytest.raises(ConfigError, match="cap"):
        merge_config({"corpus": {"speakers_per_mixture": 9}})


def test_load_config_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{"stage1": {"steps": 7}}')
    cfg = load_config(path)
    assert cfg["stage1"]["steps"] == 7
    assert cfg["stage1"]["lr"] > 0  # defaults preserved


def test_load_config_invalid_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(path)


# --- stage plans ----------------------------------------------------------------


def test_sep_plan_requires_init_or_flag():
    with pytest.raises(ConfigError, match="init_from"):
        StagePlan("sep", SamplingStrategy("V1"), steps=10, lr=0.1, seed=0)
    StagePlan("sep", SamplingStrategy("V1"), steps=10, lr=0.1, seed=0, random_init=True)


def test_plan_osl_weight_cap():
    with pytest.raises(ConfigError, match="osl"):
        StagePlan(
            "sep",
            SamplingStrategy("V1"),
            steps=1,
            lr=0.1,
            seed=0,
            random_init=True,
            osl=OslConfig(weight=0.21),
        )


# --- corpus ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory, stft_cfg):
    out = tmp_path_factory.mktemp("corpus")
    corpus_cfg = {
        "pool_speakers": 3,
        "utts_per_speaker": 3,
        "n_mixtures": 4,
        "speakers_per_mixture": 2,
        "max_overlap": 0.5,
        "min_len_s": 8.0,
        "chunk_s": None,
        "utt_duration_range_s": [2.5, 4.0],
        "vad_threshold_db": -40.0,
        "holdout_mixtures": 1,
    }
    build_toy_corpus(corpus_cfg, stft_cfg, out, seed=13)
    return out


def test_corpus_build_and_load(small_corpus):
    mixtures, index = load_corpus(small_corpus)
    assert len(mixtures) == 4
    assert index["hash"] == corpus_hash(small_corpus, index["mixtures"])
    for m in mixtures:
        assert m.n_speakers == 2
        assert m.duration_s >= 8.0


def test_corpus_hash_is_seed_deterministic(tmp_path, stft_cfg, small_corpus):
    corpus_cfg = {
        "pool_speakers": 3,
        "utts_per_speaker": 3,
        "n_mixtures": 4,
        "speakers_per_mixture": 2,
        "max_overlap": 0.5,
        "min_len_s": 8.0,
        "chunk_s": None,
        "utt_duration_range_s": [2.5, 4.0],
        "vad_threshold_db": -40.0,
        "holdout_mixtures": 1,
    }
    build_toy_corpus(corpus_cfg, stft_cfg, tmp_path, seed=13)
    with open(tmp_path / "corpus.json") as f:
        again = json.load(f)
    with open(small_corpus / "corpus.json") as f:
        first = json.load(f)
    assert again["hash"] == first["hash"]


def test_split_corpus_holdout(small_corpus):
    mixtures, _ = load_corpus(small_corpus)
    train, held = split_corpus(mixtures, 1)
    assert len(train) == 3 and len(held) == 1
    with pytest.raises(ConfigError):
        split_corpus(mixtures, 4)


# --- training data ----------------------------------------------------------------


def test_training_data_shapes(small_corpus, stft_cfg, toy_encoder):
    mixtures, _ = load_corpus(small_corpus)
    plan = StagePlan("vad", SamplingStrategy("UNIFORM_MIX"), steps=1, lr=0.1, seed=3)
    data = TrainingData(mixtures[:2], stft_cfg, toy_encoder, plan)
    examples = data(0, None)
    assert len(examples) == 2
    ex = examples[0]
    assert ex.feats.shape[1] == stft_cfg.n_bins
    assert ex.embeds.shape == (2, toy_encoder.dim)
    assert ex.targets.shape == (2, ex.feats.shape[0])


def test_training_data_resamples_per_epoch(small_corpus, stft_cfg, toy_encoder):
    mixtures, _ = load_corpus(small_corpus)
    plan = StagePlan("vad", SamplingStrategy("UNIFORM_MIX"), steps=1, lr=0.1, seed=3)
    data = TrainingData(mixtures[:1], stft_cfg, toy_encoder, plan)
    e0 = data(0, None)[0].embeds
    e0_again = data(0, None)[0].embeds
    e1 = data(1, None)[0].embeds
    np.testing.assert_array_equal(e0, e0_again)
    assert not np.array_equal(e0, e1)


def test_freeze_sampling_fixes_epoch_draws(small_corpus, stft_cfg, toy_encoder):
    mixtures, _ = load_corpus(small_corpus)
    plan = StagePlan(
        "vad", SamplingStrategy("UNIFORM_MIX"), steps=1, lr=0.1, seed=3, freeze_sampling=True
    )
    data = TrainingData(mixtures[:1], stft_cfg, toy_encoder, plan)
    np.testing.assert_array_equal(data(0, None)[0].embeds, data(5, None)[0].embeds)


# --- stages --------------------------------------------------------------------


def test_run_stage_vad_then_sep(small_corpus, stft_cfg, toy_encoder, tmp_path):
    mixtures, _ = load_corpus(small_corpus)
    plan1 = StagePlan("vad", SamplingStrategy("V1"), steps=8, lr=0.05, seed=0)
    p1, curve1 = run_stage(plan1, mixtures[:2], stft_cfg, toy_encoder, MODEL_CFG)
    assert p1.head_kind == HEAD_VAD
    assert len(curve1) == 8

    ckpt = tmp_path / "s1.ckpt"
    save_checkpoint(ckpt, p1, stage=1)
    plan2 = StagePlan(
        "sep", SamplingStrategy("V1"), steps=4, lr=0.01, seed=1, init_from=str(ckpt)
    )
    p2, curve2 = run_stage(plan2, mixtures[:2], stft_cfg, toy_encoder, MODEL_CFG)
    assert p2.head_kind == HEAD_MASK
    assert len(curve2) == 4
    assert all("l_sep" in row for row in curve2)

    held = heldout_sep_loss(
        p2, mixtures[2:], stft_cfg, toy_encoder, SamplingStrategy("V4"), seed=7
    )
    assert np.isfinite(held)


def test_subsegment_boundaries_interior_only(toy_mixture):
    bounds = subsegment_boundaries(toy_mixture)
    assert all(0 < b < toy_mixture.duration_s for b in bounds)
    assert bounds == sorted(bounds)


def test_v1_plan_embeddings_bit_equal_oracle(small_corpus, stft_cfg, toy_encoder):
    """A V1-only plan feeds exactly the oracle embeddings to training."""
    from sepdiar.embed import SamplingStrategy as S
    from sepdiar.embed import sample_embedding

    mixtures, _ = load_corpus(small_corpus)
    plan = StagePlan("vad", S("V1"), steps=1, lr=0.1, seed=9)
    data = TrainingData(mixtures[:2], stft_cfg, toy_encoder, plan)
    examples = data(0, None)
    for i, (m, ex) in enumerate(zip(mixtures[:2], examples)):
        for k, spk in enumerate(m.speakers):
            oracle = sample_embedding(m, spk, S("V1"), toy_encoder, seed=[9, i, 0])
            np.testing.assert_array_equal(ex.embeds[k], oracle.values)


def test_planned_variant_counts_match_training_draws(small_corpus, stft_cfg, toy_encoder):
    """The audit helper reproduces the variants actually used per epoch."""
    from collections import Counter

    from sepdiar.embed import SamplingStrategy as S
    from sepdiar.embed import resolved_variant
    from sepdiar.harness import planned_variant_counts

    mixtures, _ = load_corpus(small_corpus)
    plan = StagePlan("vad", S("UNIFORM_MIX"), steps=1, lr=0.1, seed=4)
    counts = planned_variant_counts(plan, mixtures, epochs=6)
    assert sum(counts.values()) == 6 * sum(m.n_speakers for m in mixtures)
    manual = Counter()
    for epoch in range(6):
        for i, m in enumerate(mixtures):
            for spk in m.speakers:
                manual[resolved_variant(m, spk, plan.sampling, seed=[4, i, epoch])] += 1
    assert counts == dict(manual)


def test_resolved_variant_predicts_sample_embedding(small_corpus, toy_encoder):
    """For a clean mixture the V1/V2 draws are distinguishable bit-exactly."""
    from sepdiar.embed import SamplingStrategy as S
    from sepdiar.embed import resolved_variant, sample_embedding

    mixtures, _ = load_corpus(small_corpus)
    m = mixtures[0]
    spk = m.speakers[0]
    strategy = S("UNIFORM_MIX")
    for seed in range(8):
        predicted = resolved_variant(m, spk, strategy, seed=seed)
        drawn = sample_embedding(m, spk, strategy, toy_encoder, seed=seed)
        concrete = sample_embedding(m, spk, S(predicted), toy_encoder, seed=seed)
        np.testing.assert_array_equal(drawn.values, concrete.values)


def test_load_utterance_pool_from_wav_dirs(tmp_path):
    from sepdiar.mixture import MixtureError, load_utterance_pool, make_toy_pool
    from sepdiar.signal import write_wav

    pool = make_toy_pool(2, 2, seed=0, duration_range_s=(1.0, 2.0))
    for i, u in enumerate(pool):
        d = tmp_path / u.speaker_id
        d.mkdir(exist_ok=True)
        write_wav(d / f"utt{i}.wav", u.audio)
        (d / f"utt{i}.txt").write_text(" ".join(u.transcript))
    loaded = load_utterance_pool(tmp_path)
    assert len(loaded) == len(pool)
    assert {u.speaker_id for u in loaded} == {u.speaker_id for u in pool}
    assert all(u.transcript for u in loaded)
    with pytest.raises(MixtureError):
        load_utterance_pool(tmp_path / "missing")


def test_build_corpus_from_source_dir(tmp_path, stft_cfg):
    from sepdiar.mixture import make_toy_pool
    from sepdiar.signal import write_wav

    pool = make_toy_pool(3, 2, seed=1, duration_range_s=(2.0, 3.0))
    src = tmp_path / "wavs"
    for i, u in enumerate(pool):
        d = src / u.speaker_id
        d.mkdir(parents=True, exist_ok=True)
        write_wav(d / f"u{i}.wav", u.audio)
    corpus_cfg = {
        "pool_speakers": 3,
        "utts_per_speaker": 2,
        "n_mixtures": 2,
        "speakers_per_mixture": 2,
        "max_overlap": 0.3,
        "min_len_s": 4.0,
        "chunk_s": None,
        "utt_duration_range_s": [2.0, 3.0],
        "vad_threshold_db": -40.0,
        "holdout_mixtures": 1,
        "source_dir": str(src),
    }
    build_toy_corpus(corpus_cfg, stft_cfg, tmp_path / "corpus", seed=0)
    mixtures, _ = load_corpus(tmp_path / "corpus")
    assert len(mixtures) == 2


# --- embed study -----------------------------------------------------------------


def test_embed_study_rows_and_summary(small_corpus, toy_encoder):
    mixtures, _ = load_corpus(small_corpus)
    rows, summary = embed_study(mixtures[:2], toy_encoder, seed=0)
    assert len(rows) == 4  # 2 mixtures x 2 speakers
    for r in rows:
        for key in ("cos_v2_v1", "cos_v3_v1", "cos_v4_v1"):
            assert -1.0 <= r[key] <= 1.0 + 1e-9
    assert summary["n_rows"] == 4
    assert summary["mean_cos_v4_v1"] <= summary["mean_cos_v2_v1"] + 0.05
