import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from retouchdet.errors import EmptyTrainingSet, LengthMismatch, MixedKinds
from retouchdet.pipeline import (FeatureVector, apply_normalizer, feature_kind, fit_normalizer,
                                 make_differential_feature, make_single_feature)


def fv(values, kind="dfr_single"):
    return FeatureVector(np.asarray(values, dtype=float), kind)


def pad(values, n=512):
    out = np.zeros(n)
    out[:len(values)] = values
    return out


def test_single_wrap():
    assert make_single_feature(np.zeros(4096), "td_single").kind == "td_single"
    assert len(make_single_feature(np.ones(512), "dfr_single")) == 512
    with pytest.raises(LengthMismatch):
        make_single_feature(np.zeros(100), "td_single")


def test_feature_kind_names():
    assert feature_kind("td", "differential") == "td_diff"
    assert feature_kind("dfr", "single") == "dfr_single"


def test_differential_examples():
    rng = np.random.default_rng(0)
    a = rng.standard_normal(512)
    assert not make_differential_feature(a, a, "dfr_diff").values.any()
    b = rng.standard_normal(512)
    d = make_differential_feature(a, b, "dfr_diff").values
    assert [float(v) for v in d] == [a[i] - b[i] for i in range(512)]
    np.testing.assert_array_equal(d + make_differential_feature(b, a, "dfr_diff").values, 0)
    with pytest.raises(LengthMismatch):
        make_differential_feature(a, b[:100], "dfr_diff")


def test_td_difference_bounded():
    rng = np.random.default_rng(1)
    h = rng.random((2, 16, 256))
    h /= h.sum(axis=2, keepdims=True)
    d = make_differential_feature(h[0].ravel(), h[1].ravel(), "td_diff").values
    assert d.min() >= -1 and d.max() <= 1


def test_fit_simple():
    norm = fit_normalizer([fv(pad([0, 0])), fv(pad([2, 2]))])
    np.testing.assert_array_equal(norm.mean[:2], [1, 1])
    np.testing.assert_array_equal(norm.std[:2], [1, 1])


def test_constant_column_floor():
    feats = [fv(pad([5, 1])), fv(pad([5, 2]))]
    norm = fit_normalizer(feats)
    assert norm.std[0] == 1.0
    assert apply_normalizer(norm, feats[0]).values[0] == 0.0
    assert (norm.std > 0).all()


def test_fit_errors():
    with pytest.raises(EmptyTrainingSet):
        fit_normalizer([fv(np.zeros(512))])
    with pytest.raises(EmptyTrainingSet):
        fit_normalizer([])
    with pytest.raises(MixedKinds):
        fit_normalizer([fv(np.zeros(512)), fv(np.zeros(512), "dfr_diff")])


def test_random_set_statistics():
    rng = np.random.default_rng(2)
    feats = [fv(rng.normal(3, 2, 512)) for _ in range(100)]
    norm = fit_normalizer(feats)
    z = np.vstack([apply_normalizer(norm, f).values for f in feats])
    assert np.abs(z.mean(axis=0)).max() < 1e-9
    assert np.abs(z.std(axis=0) - 1).max() < 1e-9


def test_apply_examples():
    rng = np.random.default_rng(3)
    norm = fit_normalizer([fv(rng.standard_normal(512)) for _ in range(10)])
    assert not apply_normalizer(norm, fv(norm.mean)).values.any()
    np.testing.assert_allclose(apply_normalizer(norm, fv(norm.mean + norm.std)).values, 1, atol=1e-12)
    x = rng.standard_normal(512)
    out = apply_normalizer(norm, fv(x)).values
    assert [float(v) for v in out] == [(x[i] - norm.mean[i]) / norm.std[i] for i in range(512)]
    assert apply_normalizer(norm, fv(x, "dfr_diff")).kind == "dfr_diff"
    with pytest.raises(LengthMismatch):
        norm.transform(np.zeros(4096))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (6, 512), elements=st.floats(-1e3, 1e3)))
def test_zscores_recomputed(x):
    feats = [fv(r) for r in x]
    norm = fit_normalizer(feats)
    for row in x[:2]:
        got = apply_normalizer(norm, fv(row)).values
        for i in range(0, 512, 97):
            col = x[:, i]
            m = sum(col) / len(col)
            s = (sum((c - m) ** 2 for c in col) / len(col)) ** 0.5
            s = 1.0 if s < 1e-8 else s
            assert got[i] == pytest.approx((row[i] - m) / s, rel=1e-9, abs=1e-6)


def test_fingerprint_stable_and_sensitive():
    rng = np.random.default_rng(4)
    feats = [fv(rng.standard_normal(512)) for _ in range(5)]
    a, b = fit_normalizer(feats), fit_normalizer(feats)
    assert a.fingerprint() == b.fingerprint()
    assert fit_normalizer(feats[:4]).fingerprint() != a.fingerprint()
