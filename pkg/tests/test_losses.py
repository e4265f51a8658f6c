import math

import numpy as np
import pytest

from sepdiar.losses import (
    LossError,
    OslConfig,
    bce_vad,
    bce_vad_grad,
    combined_sep_loss,
    l_sep,
    l_sep_grad_wrt_masks,
    osl,
    osl_grad_wrt_masks,
    overlap_weight,
    read_loss_curve,
    write_loss_curve,
)
from sepdiar.signal import StftConfig, Waveform, stft


def test_osl_config_validation():
    with pytest.raises(LossError):
        OslConfig(p=3)
    with pytest.raises(LossError):
        OslConfig(epsilon=0.0)
    with pytest.raises(LossError):
        OslConfig(weight=-0.01)


# --- BCE -------------------------------------------------------------------


def test_bce_perfect_prediction_is_clamp_scale():
    v = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert bce_vad(v, v) < 2e-7


def test_bce_uniform_half_is_ln2_for_any_target(rng):
    v_gt = (rng.uniform(size=(3, 7)) > 0.4).astype(float)
    assert abs(bce_vad(np.full((3, 7), 0.5), v_gt) - math.log(2.0)) < 1e-12


def test_bce_matches_scalar_recomputation(rng):
    """Oracle: elementwise scalar bce, recomputed independently."""
    p = rng.uniform(0.05, 0.95, size=(2, 3))
    v = (rng.uniform(size=(2, 3)) > 0.5).astype(float)
    expected = 0.0
    for i in range(2):
        for j in range(3):
            expected += -(v[i, j] * math.log(p[i, j]) + (1 - v[i, j]) * math.log(1 - p[i, j]))
    expected /= 6.0
    assert abs(bce_vad(p, v) - expected) < 1e-12


def test_bce_shape_mismatch():
    with pytest.raises(LossError):
        bce_vad(np.zeros((2, 3)), np.zeros((3, 2)))


def test_bce_grad_matches_finite_difference(rng):
    p = rng.uniform(0.1, 0.9, size=(2, 4))
    v = (rng.uniform(size=(2, 4)) > 0.5).astype(float)
    _, grad = bce_vad_grad(p, v)
    h = 1e-7
    for i in range(2):
        for j in range(4):
            pp = p.copy()
            pp[i, j] += h
            pm = p.copy()
            pm[i, j] -= h
            fd = (bce_vad(pp, v) - bce_vad(pm, v)) / (2 * h)
            assert abs(fd - grad[i, j]) < 1e-6 * max(abs(fd), 1.0)


# --- L_SEP ------------------------------------------------------------------


def test_l_sep_uniform_error_is_minus_one():
    y = np.zeros((2, 16))
    y_hat = np.full((2, 16), 0.1)
    assert l_sep(y_hat, y) == -1.0


def test_l_sep_perfect_hits_floor():
    y = np.ones((2, 10))
    assert l_sep(y, y) == -8.0


def test_l_sep_matches_bruteforce_double_sum(rng):
    y = rng.normal(size=(2, 16))
    y_hat = rng.normal(size=(2, 16))
    acc = 0.0
    for k in range(2):
        for n in range(16):
            acc += abs(y_hat[k, n] - y[k, n])
    expected = math.log10(acc / 32.0)
    assert abs(l_sep(y_hat, y) - expected) < 1e-12


def test_l_sep_length_mismatch():
    with pytest.raises(LossError):
        l_sep(np.zeros((2, 5)), np.zeros((2, 6)))


# --- overlap weight ----------------------------------------------------------


def test_overlap_weight_canonical_bins():
    eps = 1e-8
    mags = np.zeros((2, 1, 3))
    mags[:, 0, 0] = [1.0, 1.0]  # two equally loud speakers
    mags[:, 0, 1] = [1.0, 0.0]  # one speaker
    # bin 2: silence
    w = overlap_weight(mags, eps)
    assert abs(w[0, 0] - 2.0) < 1e-6
    assert abs(w[0, 1] - 1.0) < 1e-6
    assert w[0, 2] == 0.0


def test_overlap_weight_range(rng):
    k = 4
    mags = rng.uniform(0.0, 3.0, size=(k, 5, 6))
    w = overlap_weight(mags)
    assert np.all(w >= 0.0)
    assert np.all(w < k + 1.0)


def test_overlap_weight_counts_equal_speakers():
    for m in (1, 2, 3, 5):
        mags = np.ones((m, 1, 1))
        assert abs(overlap_weight(mags)[0, 0] - m) < 1e-6


def test_overlap_weight_rejects_negative():
    with pytest.raises(LossError):
        overlap_weight(np.array([[[-0.1]]]))


# --- OSL ---------------------------------------------------------------------


def test_osl_zero_when_equal(rng):
    y = rng.uniform(0.0, 2.0, size=(3, 4, 5))
    assert osl(y, y) == 0.0


def test_osl_single_bin_hand_case():
    cfg = OslConfig(p=1, epsilon=1e-16)
    y = np.ones((2, 1, 1))
    y_hat = np.full((2, 1, 1), 1.5)  # per-speaker magnitude error 0.5, weight 2
    assert abs(osl(y_hat, y, cfg) - 1.0) < 1e-12


def test_osl_matches_bruteforce_triple_sum(rng):
    cfg = OslConfig(p=1, epsilon=1e-8)
    y = rng.uniform(0.0, 2.0, size=(2, 4, 5))
    y_hat = rng.uniform(0.0, 2.0, size=(2, 4, 5))
    acc = 0.0
    for k in range(2):
        for t in range(4):
            for f in range(5):
                w = sum(y[kk, t, f] for kk in range(2)) / (
                    max(y[kk, t, f] for kk in range(2)) + cfg.epsilon
                )
                acc += w * abs(y_hat[k, t, f] - y[k, t, f])
    assert abs(osl(y_hat, y, cfg) - acc / 2.0) < 1e-12


def test_osl_p2_matches_bruteforce(rng):
    cfg = OslConfig(p=2, epsilon=1e-8)
    y = rng.uniform(0.0, 2.0, size=(2, 3, 3))
    y_hat = rng.uniform(0.0, 2.0, size=(2, 3, 3))
    w = overlap_weight(y, cfg.epsilon)
    expected = float(np.sum(w[None] * (y_hat - y) ** 2) / 2.0)
    assert abs(osl(y_hat, y, cfg) - expected) < 1e-12


def test_osl_monotone_in_single_bin_error(rng):
    cfg = OslConfig()
    y = rng.uniform(0.5, 1.0, size=(2, 3, 4))
    y_hat = y.copy()
    base = osl(y_hat, y, cfg)
    y_hat[1, 2, 3] += 0.5
    worse = osl(y_hat, y, cfg)
    assert worse >= base
    y_hat[1, 2, 3] += 0.5
    assert osl(y_hat, y, cfg) >= worse


# --- combination -------------------------------------------------------------


def test_combined_weight_zero_equals_l_sep(rng):
    y = rng.normal(size=(2, 64))
    y_hat = rng.normal(size=(2, 64))
    mags = rng.uniform(0.0, 1.0, size=(2, 4, 5))
    mags_hat = rng.uniform(0.0, 1.0, size=(2, 4, 5))
    cfg = OslConfig(weight=0.0)
    assert combined_sep_loss(y_hat, y, mags_hat, mags, cfg) == l_sep(y_hat, y)


def test_combined_affine_in_weight(rng):
    y = rng.normal(size=(2, 64))
    y_hat = rng.normal(size=(2, 64))
    mags = rng.uniform(0.0, 1.0, size=(2, 4, 5))
    mags_hat = rng.uniform(0.0, 1.0, size=(2, 4, 5))
    at = {
        w: combined_sep_loss(y_hat, y, mags_hat, mags, OslConfig(weight=w))
        for w in (0.05, 0.1)
    }
    osl_val = osl(mags_hat, mags, OslConfig())
    assert abs((at[0.1] - at[0.05]) - 0.05 * osl_val) < 1e-12


def test_default_weight_is_paper_best():
    assert OslConfig().weight == 0.08


# --- gradients through masks -------------------------------------------------


def test_mask_gradients_match_finite_differences(rng):
    cfg = StftConfig(16, 4)
    n = 60
    x = Waveform(rng.normal(size=n) * 0.2)
    spec = stft(x, cfg)
    k, t, f = 2, spec.n_frames, cfg.n_bins
    masks = rng.uniform(0.2, 0.8, size=(k, t, f))
    y_refs = rng.normal(size=(k, n)) * 0.1
    y_ref_mag = np.abs(
        np.stack([stft(Waveform(y_refs[i]), cfg).bins for i in range(k)])
    )

    _, g_sep = l_sep_grad_wrt_masks(masks, spec, y_refs)
    _, g_osl = osl_grad_wrt_masks(masks, spec.magnitude(), y_ref_mag)

    from sepdiar.losses import separated_spectrograms
    from sepdiar.signal import istft

    def eval_sep(mk):
        y_hat = np.stack(
            [istft(s, length=n).samples for s in separated_spectrograms(mk, spec)]
        )
        return l_sep(y_hat, y_refs)

    def eval_osl(mk):
        return osl(mk * spec.magnitude()[None], y_ref_mag)

    h = 1e-6
    rng2 = np.random.default_rng(0)
    for _ in range(8):
        i = tuple(rng2.integers(d) for d in masks.shape)
        for grad, fn in ((g_sep, eval_sep), (g_osl, eval_osl)):
            mp = masks.copy()
            mp[i] += h
            mm = masks.copy()
            mm[i] -= h
            fd = (fn(mp) - fn(mm)) / (2 * h)
            assert abs(fd - grad[i]) < 1e-4 * max(abs(fd), 1e-3)


def test_loss_curve_csv_roundtrip(tmp_path):
    rows = [
        {"step": 1, "loss": 0.5, "l_sep": -1.0, "osl": 2.0},
        {"step": 2, "loss": 0.4, "l_sep": -1.1, "osl": 1.9},
    ]
    path = tmp_path / "curve.csv"
    write_loss_curve(path, rows)
    back = read_loss_curve(path)
    assert back == [
        {"step": 1.0, "loss": 0.5, "l_sep": -1.0, "osl": 2.0},
        {"step": 2.0, "loss": 0.4, "l_sep": -1.1, "osl": 1.9},
    ]
