import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hs3bench.core import LabelMap, Sample, SpectralCube, builtin_descriptor
from hs3bench.dataset_io import FixtureSpec, class_means, fixture_arrays, fixture_descriptor
from hs3bench.errors import DegenerateSpectra, InvalidBand, SchemaMismatch
from hs3bench.preprocessing import (
    AugmentationPolicy, ChannelExtrema, PcaModel, VariantTransform, apply_pca1, augment, compute_extrema,
    fit_pca1, fit_variant, normalize_minmax, synthesize_prgb,
)


def cube(*rows):
    return np.asarray(rows, dtype=np.float64)


def pca_oracle(pixels):
    """Leading eigenvector of the sample covariance, built with explicit loops."""
    x = np.asarray(pixels, dtype=np.float64)
    n, c = x.shape
    mu = [sum(x[i, j] for i in range(n)) / n for j in range(c)]
    cov = np.zeros((c, c))
    for a in range(c):
        for b in range(c):
            cov[a, b] = sum((x[i, a] - mu[a]) * (x[i, b] - mu[b]) for i in range(n)) / (n - 1)
    u, s, _ = np.linalg.svd(cov)
    v = u[:, 0]
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    return v if v[nz[0]] > 0 else -v


# --------------------------------------------------------------------------
# extrema and min-max


def test_extrema_single_cube():
    e = compute_extrema([np.array([[[3.0], [7.0]]])])
    assert e.p_min.tolist() == [3.0] and e.p_max.tolist() == [7.0]


def test_extrema_over_cubes():
    e = compute_extrema([np.array([[[0.0], [1.0]]]), np.array([[[-1.0], [2.0]]])])
    assert e.p_min.tolist() == [-1.0] and e.p_max.tolist() == [2.0]


def test_extrema_mixed_channels():
    with pytest.raises(SchemaMismatch):
        compute_extrema([np.zeros((1, 1, 2)), np.zeros((1, 1, 3))])


def test_extrema_on_noiseless_fixture_match_generator():
    spec = FixtureSpec(n_images=4, channels=6, K=3, noise_sigma=0.0)
    e = compute_extrema([c for c, _ in fixture_arrays(spec)])
    m = class_means(spec).astype(np.float32)
    np.testing.assert_array_equal(e.p_min, m.min(axis=0))
    np.testing.assert_array_equal(e.p_max, m.max(axis=0))


def test_minmax_worked_values():
    e = ChannelExtrema(np.array([2.0]), np.array([6.0]), "whole_dataset")
    out = normalize_minmax(np.array([[[2.0], [4.0], [6.0]]]), e)
    assert out.ravel().tolist() == [0.0, 0.5, 1.0]


def test_minmax_unclipped_outside_scope():
    e = ChannelExtrema(np.array([0.0]), np.array([1.0]), "train_split")
    assert normalize_minmax(np.array([[[2.0], [-1.0]]]), e).ravel().tolist() == [2.0, -1.0]


def test_minmax_constant_channel_is_zero():
    e = ChannelExtrema(np.array([5.0, 0.0]), np.array([5.0, 1.0]), "whole_dataset")
    out = normalize_minmax(np.array([[[5.0, 0.5], [7.0, 1.0]]]), e)
    assert np.all(out[..., 0] == 0.0)


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 30), st.integers(1, 5)), elements=finite))
def test_minmax_properties(pixels):
    e = compute_extrema([pixels[None]])
    out = normalize_minmax(pixels, e)
    span = e.p_max - e.p_min
    for j in range(pixels.shape[1]):
        col, o = pixels[:, j], out[:, j]
        if span[j] == 0:
            assert np.all(o == 0)
            continue
        assert np.all((o >= 0) & (o <= 1))
        assert o[col.argmin()] == 0.0
        assert abs(o[col.argmax()] - 1.0) <= 1e-12
        order = np.argsort(col, kind="stable")
        assert np.all(np.diff(o[order]) >= 0)


# --------------------------------------------------------------------------
# pseudo-RGB


def test_prgb_selects_hcv_bands():
    desc = builtin_descriptor("hcv")
    v = np.tile(np.arange(128, dtype=np.float32), (2, 2, 1))
    v[1, 1] *= 2
    e = compute_extrema([v])
    out = synthesize_prgb(v, desc, e).values
    assert out.shape == (2, 2, 3)
    # band b takes values {b, 2b}; normalized: 0 except the doubled pixel -> 1
    assert out[1, 1].tolist() == [1.0, 1.0, 1.0]
    assert out[0, 0].tolist() == [0.0, 0.0, 0.0]


def test_prgb_hsidrive_bands():
    desc = builtin_descriptor("hsidrive")
    v = np.random.default_rng(0).random((3, 3, 25))
    e = compute_extrema([v])
    out = synthesize_prgb(v, desc, e).values
    np.testing.assert_allclose(out, normalize_minmax(v[..., [2, 1, 0]], e.select([2, 1, 0])), atol=1e-7)


def test_prgb_constant_red_band():
    desc = builtin_descriptor("hcv")
    v = np.random.default_rng(0).random((4, 4, 128))
    v[..., 63] = 5.0
    out = synthesize_prgb(v, desc, compute_extrema([v])).values
    assert np.all(out[..., 0] == 0)


def test_prgb_invalid_band():
    desc = builtin_descriptor("hcv")
    with pytest.raises(InvalidBand, match="invalid band"):
        synthesize_prgb(np.zeros((2, 2, 20)), desc, ChannelExtrema(np.zeros(3), np.ones(3), "whole_dataset"))


# --------------------------------------------------------------------------
# PCA1


def test_pca_correlated_pixels():
    m = fit_pca1([cube([[0, 0], [1, 1], [2, 2]])], max_pixels=None)
    np.testing.assert_allclose(m.component, [2 ** -0.5, 2 ** -0.5], atol=1e-12)


def test_pca_single_channel_variance():
    m = fit_pca1([cube([[0, 0], [1, 0], [2, 0]])], max_pixels=None)
    np.testing.assert_allclose(m.component, [1.0, 0.0], atol=1e-12)


def test_pca_matches_oracle_200_pixels(rng):
    x = rng.normal(size=(200, 5)) @ rng.normal(size=(5, 5))
    m = fit_pca1([x[None]], max_pixels=None)
    np.testing.assert_allclose(m.component, pca_oracle(x), atol=1e-6)


def test_pca_streaming_equals_single_batch(rng):
    x = rng.normal(size=(300, 4)) * [1, 2, 3, 4] + 10
    one = fit_pca1([x[None]], max_pixels=None)
    many = fit_pca1([x[i:i + 37][None] for i in range(0, 300, 37)], max_pixels=None)
    np.testing.assert_allclose(one.component, many.component, atol=1e-10)
    np.testing.assert_allclose(one.mean, many.mean, atol=1e-10)


def test_pca_degenerate():
    with pytest.raises(DegenerateSpectra, match="degenerate spectra"):
        fit_pca1([np.ones((4, 4, 3))], max_pixels=None)


def test_pca_subsampling_is_seeded(rng):
    x = rng.normal(size=(50, 50, 3))
    a = fit_pca1([x], max_pixels=500, seed=1)
    b = fit_pca1([x], max_pixels=500, seed=1)
    assert a.n_pixels < 2500
    np.testing.assert_array_equal(a.component, b.component)


def test_apply_pca_centering_and_projection():
    m = PcaModel(np.array([0.0, 0.0]), np.array([1.0, 0.0]), "train_split")
    assert apply_pca1(cube([[3, 9]]), m).values.item() == 3.0
    m2 = PcaModel(np.array([1.0, 2.0]), np.array([0.6, 0.8]), "train_split")
    assert np.all(apply_pca1(np.broadcast_to([1.0, 2.0], (3, 3, 2)), m2).values == 0)


def test_pca_separates_fixture_classes():
    spec = FixtureSpec(n_images=4, channels=8, K=3, noise_sigma=0.0)
    data = fixture_arrays(spec)
    m = fit_pca1([c for c, _ in data], max_pixels=None)
    means = [np.mean([apply_pca1(c, m).values[lab == k].mean() for c, lab in data]) for k in range(3)]
    assert min(abs(a - b) for i, a in enumerate(means) for b in means[i + 1:]) > 0.1


# --------------------------------------------------------------------------
# variant bundles


def _cubes(n=4):
    return [c for c, _ in fixture_arrays(FixtureSpec(n_images=n, channels=6, noise_sigma=0.05))]


@pytest.mark.parametrize("variant,channels", [("hsi", 6), ("pca1", 1), ("prgb", 3)])
def test_fit_variant_and_sidecar(tmp_path, variant, channels):
    desc = fixture_descriptor(FixtureSpec(channels=6), tmp_path)
    cubes = _cubes()
    t = fit_variant(variant, desc, train_cubes=lambda: cubes[:2], all_cubes=lambda: cubes)
    assert t.out_channels == channels
    assert t(cubes[0]).values.shape == (16, 16, channels)
    t.save(tmp_path / "t.json")
    back = VariantTransform.load(tmp_path / "t.json")
    np.testing.assert_array_equal(back(cubes[3]).values, t(cubes[3]).values)


def test_hsi_train_scope_ignores_test_cubes(tmp_path):
    desc = fixture_descriptor(FixtureSpec(channels=6), tmp_path)
    cubes = _cubes()
    outlier = cubes[3] * 100
    t = fit_variant("hsi", desc, train_cubes=lambda: cubes[:2], all_cubes=lambda: cubes[:3] + [outlier])
    np.testing.assert_array_equal(t.extrema.p_max, compute_extrema(cubes[:2]).p_max)


def test_pca_variant_fits_normalized_pixels(tmp_path):
    desc = fixture_descriptor(FixtureSpec(channels=6), tmp_path)
    cubes = _cubes()
    t = fit_variant("pca1", desc, train_cubes=lambda: cubes, max_pixels=None)
    ref = fit_pca1([normalize_minmax(c, t.extrema) for c in cubes], max_pixels=None)
    np.testing.assert_allclose(t.pca.component, ref.component, atol=1e-12)


# --------------------------------------------------------------------------
# augmentation


def _sample(rng):
    return Sample(SpectralCube(rng.random((4, 5, 3))), LabelMap(rng.integers(0, 3, (4, 5))), "x")


def test_augment_probability_zero_is_identity(rng):
    s = _sample(rng)
    for _ in range(20):
        assert augment(s, AugmentationPolicy(0.0), rng) is s


def test_hflip_pairs_cube_and_labels(rng):
    s = _sample(rng)
    out = augment(s, AugmentationPolicy(1.0, ("hflip",)), rng)
    np.testing.assert_array_equal(out.cube.values, s.cube.values[:, ::-1])
    np.testing.assert_array_equal(out.labels.labels, s.labels.labels[:, ::-1])


def test_hflip_is_an_involution(rng):
    s = _sample(rng)
    p = AugmentationPolicy(1.0, ("hflip",))
    twice = augment(augment(s, p, rng, force=True), p, rng, force=True)
    np.testing.assert_array_equal(twice.cube.values, s.cube.values)
    np.testing.assert_array_equal(twice.labels.labels, s.labels.labels)
