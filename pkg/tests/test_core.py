import numpy as np
import pytest

from hs3bench.core import (
    IGNORE, ClassCatalog, DatasetDescriptor, LabelMap, Sample, SpectralCube, builtin_descriptor,
    validate_sample,
)
from hs3bench.errors import ValidationError


def small_descriptor(channels=3, K=10):
    cat = ClassCatalog(tuple((f"c{i}", True) for i in range(K)))
    return DatasetDescriptor(name="toy", catalog=cat, expected_channels=channels, prgb_bands=(2, 1, 0),
                             split_fractions=(0.5, 0.25, 0.25), split_seed=0, root_path=".")


def test_valid_sample_has_no_violations():
    s = Sample(SpectralCube(np.zeros((4, 4, 3))), LabelMap(np.zeros((4, 4))), "a")
    assert validate_sample(s, small_descriptor()).ok


def test_shape_mismatch_reported():
    s = Sample(SpectralCube(np.zeros((4, 4, 3))), LabelMap(np.zeros((4, 5))), "a")
    rep = validate_sample(s, small_descriptor())
    assert any("shape mismatch" in v for v in rep.violations)


def test_invalid_class_index_reported():
    lab = np.zeros((4, 4))
    lab[0, 0] = 99
    s = Sample(SpectralCube(np.zeros((4, 4, 3))), LabelMap(lab), "a")
    rep = validate_sample(s, small_descriptor(K=10))
    assert any("invalid class index" in v for v in rep.violations)


def test_ignore_label_is_valid():
    lab = np.full((2, 2), IGNORE)
    assert LabelMap(lab).violations(2) == []


def test_cube_is_float32_and_read_only():
    c = SpectralCube(np.ones((2, 2, 2), dtype=np.float64))
    assert c.values.dtype == np.float32
    with pytest.raises(ValueError):
        c.values[0, 0, 0] = 3.0


def test_nonfinite_cube_flagged():
    v = np.zeros((2, 2, 1))
    v[0, 0, 0] = np.nan
    assert SpectralCube(v).violations()


def test_catalog_drops_unevaluated_classes():
    cat = ClassCatalog((("road", True), ("water", False), ("sky", True)))
    assert cat.K == 2
    assert cat.names == ["road", "sky"]
    lut = cat.raw_lookup()
    assert lut[0] == 0 and lut[1] == IGNORE and lut[2] == 1
    assert lut[200] == IGNORE


@pytest.mark.parametrize("name,K,C,bands", [
    ("hyko2", 10, 15, (14, 7, 0)),
    ("hcv", 19, 128, (63, 19, 1)),
    ("hsidrive", 9, 25, (2, 1, 0)),
])
def test_builtin_descriptors(name, K, C, bands):
    d = builtin_descriptor(name, root="/nonexistent")
    assert d.K == K
    assert d.expected_channels == C
    assert tuple(d.prgb_bands) == bands


def test_hsidrive_water_is_ignored():
    d = builtin_descriptor("hsidrive")
    assert "water" in d.catalog.ignored_names


def test_descriptor_round_trip(tmp_path):
    d = builtin_descriptor("hyko2", root=tmp_path)
    d.save(tmp_path / "d.yaml")
    back = DatasetDescriptor.load(tmp_path / "d.yaml")
    assert back.to_dict() == d.to_dict()


def test_descriptor_rejects_bad_fractions():
    cat = ClassCatalog((("a", True), ("b", True)))
    with pytest.raises(ValidationError):
        DatasetDescriptor(name="x", catalog=cat, expected_channels=3, prgb_bands=(2, 1, 0),
                          split_fractions=(0.5, 0.5, 0.5), split_seed=0, root_path=".")
