import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layersplit import metrics
from layersplit.errors import InvalidInputError
from layersplit.metrics import (
    PSNR_CAP,
    TABLE_COLUMNS,
    EvalReport,
    RandomProjectionFeatures,
    evaluate_backgrounds,
    fid,
    fid_from_features,
    psnr,
    ssim,
)
from oracles import psnr_loop, ssim_constant_pair

# column header of the published comparison table; arrows mark the better direction
PUBLISHED_HEADER = "PSNR ↑ SSIM ↑ LPIPS ↑ FID ↓"


def _img(seed, shape=(16, 16, 3)):
    return np.random.default_rng(seed).random(shape)


# -- PSNR ----------------------------------------------------------------------

def test_psnr_identical_is_capped():
    a = _img(0)
    assert psnr(a, a) == PSNR_CAP == 99.0


def test_psnr_constant_offset_closed_form():
    a = np.full((8, 8, 3), 0.3)
    assert abs(psnr(a, a + 0.1) - 20.0) < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_psnr_symmetric_and_matches_loop(seed):
    a, b = _img(seed, (6, 5, 3)), _img(seed + 1, (6, 5, 3))
    assert psnr(a, b) == psnr(b, a)
    assert psnr(a, b) == pytest.approx(psnr_loop(a, b), abs=1e-9)


def test_psnr_decreases_with_noise():
    rng = np.random.default_rng(1)
    a = _img(2, (32, 32, 3))
    noise = rng.standard_normal(a.shape)
    vals = [psnr(a, a + amp * noise) for amp in (0.01, 0.05, 0.1)]
    assert vals[0] > vals[1] > vals[2]


def test_psnr_masked_and_errors():
    a = np.zeros((4, 4, 3))
    b = a.copy()
    b[0, 0] = 1.0
    keep = np.ones((4, 4), bool)
    keep[0, 0] = False
    assert psnr(a, b, keep) == PSNR_CAP
    with pytest.raises(InvalidInputError):
        psnr(a, np.zeros((4, 5, 3)))
    with pytest.raises(InvalidInputError):
        psnr(a, b, np.zeros((4, 4), bool))


# -- SSIM ----------------------------------------------------------------------

def test_ssim_self_is_exactly_one():
    for seed in range(5):
        a = _img(seed, (12, 10, 3))
        assert ssim(a, a) == 1.0


def test_ssim_black_vs_white_closed_form():
    zero, one = np.zeros((8, 8, 3)), np.ones((8, 8, 3))
    expected = ssim_constant_pair(0.0, 1.0)
    assert ssim(zero, one) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(1e-4 / (1 + 1e-4), rel=1e-12)


def test_ssim_symmetric_and_bounded():
    for seed in range(5):
        a, b = _img(seed), _img(seed + 10)
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-12
        assert -1 <= ssim(a, b) <= 1


def test_ssim_grayscale_and_too_small():
    a = _img(3, (9, 9))
    assert ssim(a, a) == 1.0
    with pytest.raises(InvalidInputError):
        ssim(np.zeros((7, 16, 3)), np.zeros((7, 16, 3)))


# -- FID -----------------------------------------------------------------------

def test_fid_self_zero_and_symmetric():
    corpus = [_img(s) for s in range(40)]
    other = [_img(s) * 0.5 for s in range(100, 140)]
    assert fid(corpus, corpus) < 1e-6
    assert abs(fid(corpus, other) - fid(other, corpus)) < 1e-6
    assert fid(corpus, other) > 0


def test_fid_mean_offset_closed_form():
    rng = np.random.default_rng(0)
    m = np.array([1.0, -2.0, 0.5, 3.0])
    fa = rng.standard_normal((4000, 4))
    # shared covariance: the trace term cancels exactly
    assert fid_from_features(fa, fa + m) == pytest.approx(m @ m, rel=1e-6)
    # independent unit-variance samples: covariances agree up to sampling noise
    fb = rng.standard_normal((40000, 4)) + m
    fa = rng.standard_normal((40000, 4))
    assert fid_from_features(fa, fb) == pytest.approx(m @ m, rel=0.01)


def test_fid_warns_and_regularises(monkeypatch):
    real = metrics.linalg.sqrtm
    calls = []

    def flaky(mat, disp=False):
        calls.append(1)
        if len(calls) == 1:
            return np.full_like(mat, np.nan), 0.0
        return real(mat, disp=disp)

    monkeypatch.setattr(metrics.linalg, "sqrtm", flaky)
    fa = np.random.default_rng(1).standard_normal((50, 3))
    with pytest.warns(RuntimeWarning, match="1e-06"):
        val = fid_from_features(fa, fa)
    assert val < 1e-4 and len(calls) == 2


def test_fid_small_corpus_is_regularised_not_rejected():
    fa = np.random.default_rng(2).standard_normal((5, 8))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert np.isfinite(fid_from_features(fa, fa[::-1]))
    with pytest.raises(InvalidInputError):
        fid_from_features(fa[:1], fa)


def test_random_projection_features_deterministic():
    imgs = [_img(s, (32, 32, 3)) for s in range(3)]
    f = RandomProjectionFeatures(dim=8, size=16, seed=4)
    assert np.array_equal(f(imgs), RandomProjectionFeatures(dim=8, size=16, seed=4)(imgs))
    assert f(imgs).shape == (3, 8)
    assert "not comparable" in f.describe()
    with pytest.raises(InvalidInputError):
        f([np.zeros((20, 20, 3))])


# -- report --------------------------------------------------------------------

def test_table_column_order_matches_published_header():
    published = tuple(tok for tok in PUBLISHED_HEADER.split() if tok not in ("↑", "↓"))
    assert TABLE_COLUMNS == published
    rep = EvalReport(psnr=[20.0, 30.0], ssim=[0.5, 0.7], fid=1.25, feature_extractor="x")
    header, row = rep.table().splitlines()
    assert header.split()[1:] == list(TABLE_COLUMNS)
    assert row.split() == ["ours", "25.00", "0.600", "n/a", "1.250"]
    assert "LPIPS omitted" in rep.note


def test_evaluate_backgrounds_aggregates():
    ref = [_img(s, (16, 16, 3)) for s in range(6)]
    rep = evaluate_backgrounds(ref, ref, RandomProjectionFeatures(dim=4, size=8))
    assert rep.count == 6 and rep.mean_psnr == PSNR_CAP and rep.mean_ssim == 1.0 and rep.fid < 1e-6
    d = rep.to_dict()
    assert d["count"] == 6 and len(d["psnr"]) == 6
    with pytest.raises(InvalidInputError):
        evaluate_backgrounds(ref, ref[:2])
    with pytest.raises(InvalidInputError):
        evaluate_backgrounds([], [])
