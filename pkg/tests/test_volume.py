import json

import numpy as np
import pytest

from gcnv import volume as V
from gcnv.tensor import Tensor


def _vol(arr, scheme="MRI_UNMASKED", **stats):
    return V.DenseVolume(Tensor(arr), V.Normalization(scheme, **stats))


def test_ct_background_constant():
    vol = _vol(np.zeros((2, 2, 2, 1)), "CT", mean=(0.0,), std=(500.0,), p005=(-1000.0,))
    np.testing.assert_array_equal(V.derive_background_constant(vol), [-2.0])


def test_ct_requires_stats():
    with pytest.raises(ValueError, match="CT"):
        V.derive_background_constant(_vol(np.zeros((2, 2, 2, 1)), "CT", mean=(0.0,)))


def test_masked_mri_background_is_zero():
    vol = _vol(np.random.default_rng(0).normal(size=(3, 3, 3, 2)), "MRI_MASKED")
    np.testing.assert_array_equal(V.derive_background_constant(vol), [0.0, 0.0])


def test_unmasked_mri_mode_recovers_dominant_value():
    rng = np.random.default_rng(1)
    n = 1000
    vals = np.where(rng.random(n) < 0.7, np.float32(-1.3), rng.uniform(-1, 3, n).astype(np.float32)).astype(np.float64)
    vol = _vol(vals.reshape(10, 10, 10, 1))
    b = V.derive_background_constant(vol)
    assert b[0] == np.float64(np.float32(-1.3))
    assert b[0] == pytest.approx(-1.3, abs=1e-6)


def test_mode_invariant_to_voxel_order():
    rng = np.random.default_rng(2)
    vals = np.round(rng.normal(size=512), 1)
    a = V.derive_background_constant(_vol(vals.reshape(8, 8, 8, 1)))
    b = V.derive_background_constant(_vol(rng.permutation(vals).reshape(8, 8, 8, 1)))
    assert a.tolist() == b.tolist()


def test_unknown_scheme_rejected():
    with pytest.raises(V.VolumeFormatError):
        V.Normalization("PET")


def test_phantom_without_background_is_all_nonzero():
    ph = V.generate_phantom(0, (8, 8, 8), background_fraction=0.0)
    assert np.all(ph.volume.array != 0)
    assert ph.achieved_background_fraction == 0.0


def test_phantom_is_deterministic():
    a = V.generate_phantom(5, (12, 10, 9), background_fraction=0.4, modalities=2)
    b = V.generate_phantom(5, (12, 10, 9), background_fraction=0.4, modalities=2)
    assert a.volume.array.tobytes() == b.volume.array.tobytes()
    assert np.array_equal(a.labels, b.labels)


@pytest.mark.parametrize("fraction", [0.1, 0.2, 0.5, 0.8, 0.95])
@pytest.mark.parametrize("background", [0.0, -0.7])
def test_phantom_fraction_margin_and_label_consistency(fraction, background):
    ph = V.generate_phantom(3, (16, 16, 16), background_fraction=fraction, background=background, modalities=2)
    assert abs(ph.achieved_background_fraction - fraction) <= 0.02
    data, bg = ph.volume.array, ph.background
    is_bg = np.all(data == bg, axis=3)
    np.testing.assert_array_equal(is_bg, ph.labels == 0)
    fg = data[ph.labels > 0]
    assert np.all(np.abs(fg - bg) >= 0.1)
    np.testing.assert_array_equal(V.derive_background_constant(ph.volume), bg)


def test_sphere_voxel_count_bracket():
    ph = V.generate_phantom(0, (16, 16, 16), shapes=[V.Sphere((7.5, 7.5, 7.5), 4.0)])
    n = int((ph.labels > 0).sum())
    assert 4 / 3 * np.pi * 3.5**3 <= n <= 4 / 3 * np.pi * 4.5**3


def test_geometry_that_does_not_fit_is_rejected():
    with pytest.raises(ValueError, match="does not fit"):
        V.generate_phantom(0, (8, 8, 8), shapes=[V.Sphere((4, 4, 4), 6.0)])
    with pytest.raises(ValueError, match="does not fit"):
        V.generate_phantom(0, (8, 8, 8), shapes=[V.Box((0, 0, 0), (9, 2, 2))])


def test_shapes_far_from_requested_fraction_rejected():
    with pytest.raises(ValueError, match="background fraction"):
        V.generate_phantom(0, (8, 8, 8), background_fraction=0.2, shapes=[V.Box((0, 0, 0), (2, 2, 2))])


def test_roundtrip_preserves_values_and_metadata(tmp_path):
    rng = np.random.default_rng(4)
    arr = rng.normal(size=(4, 4, 4, 2)).astype(np.float32).astype(np.float64)
    vol = _vol(arr, "CT", mean=(1.0, 2.0), std=(3.0, 4.0), p005=(-5.0, -6.0))
    V.write_volume(vol, tmp_path / "v")
    back = V.read_volume(tmp_path / "v.json")
    assert back.array.tobytes() == arr.tobytes()
    assert back.norm == vol.norm
    header = json.loads((tmp_path / "v.json").read_text())
    assert header["extents"] == [4, 4, 4] and header["modalities"] == 2 and header["scheme"] == "CT"


def test_one_serialises_to_ieee_single_little_endian(tmp_path):
    V.write_volume(_vol(np.ones((1, 1, 1, 1)), "MRI_MASKED"), tmp_path / "one")
    assert (tmp_path / "one.raw").read_bytes() == bytes([0x00, 0x00, 0x80, 0x3F])


def test_payload_size_mismatch(tmp_path):
    V.write_volume(_vol(np.zeros((2, 2, 2, 1)), "MRI_MASKED"), tmp_path / "v")
    raw = tmp_path / "v.raw"
    raw.write_bytes(raw.read_bytes()[:-4])
    with pytest.raises(V.VolumeFormatError, match="8 floats"):
        V.read_volume(tmp_path / "v")


def test_unknown_scheme_in_header(tmp_path):
    V.write_volume(_vol(np.zeros((2, 2, 2, 1)), "MRI_MASKED"), tmp_path / "v")
    meta = tmp_path / "v.json"
    meta.write_text(meta.read_text().replace("MRI_MASKED", "XRAY"))
    with pytest.raises(V.VolumeFormatError, match="XRAY"):
        V.read_volume(tmp_path / "v")


def test_tensor_container_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    ts = {"a.w": rng.normal(size=(2, 3)), "b": rng.normal(size=4), "s": np.array(2.5)}
    V.write_tensors(ts, tmp_path / "w")
    back = V.read_tensors(tmp_path / "w")
    assert set(back) == set(ts)
    for k in ts:
        assert back[k].tobytes() == ts[k].tobytes()
