import json

import numpy as np
import pytest

from voxelfm.volume import (OrganSpec, PhantomSpec, Volume, VolumeError,
                            VolumeFormatError, WindowSpec,
                            default_phantom_spec, generate_phantom,
                            load_mask, load_volume, normalize_hu, resample,
                            save_mask, save_volume, window, window_concat)


def test_volume_invariants():
    with pytest.raises(VolumeError):
        Volume(np.zeros((2, 2)))
    with pytest.raises(VolumeError):
        Volume(np.zeros((2, 2, 2)), spacing_mm=(0.0, 1.0, 1.0))
    bad = np.zeros((2, 2, 2))
    bad[0, 0, 0] = np.nan
    with pytest.raises(VolumeError):
        Volume(bad)


def test_volume_data_immutable():
    v = Volume(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1.0


def test_save_load_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    v = Volume(rng.normal(0, 500, size=(5, 3, 7)).astype(np.float32),
               spacing_mm=(2.0, 0.5, 1.25), origin_mm=(1.0, -2.0, 3.0))
    save_volume(v, tmp_path / "vol")
    v2 = load_volume(tmp_path / "vol")
    assert np.array_equal(v.data, v2.data)
    assert v2.spacing_mm == v.spacing_mm
    assert v2.origin_mm == v.origin_mm


def test_save_single_voxel_is_four_zero_bytes(tmp_path):
    save_volume(Volume(np.zeros((1, 1, 1))), tmp_path / "one")
    assert (tmp_path / "one.raw").read_bytes() == b"\x00\x00\x00\x00"


def test_save_ramp_layout_x_fastest(tmp_path):
    # 2x2x2 ramp 0..7 must serialize in x-fastest order.
    v = Volume(np.arange(8, dtype=np.float32).reshape(2, 2, 2))
    save_volume(v, tmp_path / "ramp")
    raw = np.frombuffer((tmp_path / "ramp.raw").read_bytes(), dtype="<f4")
    assert np.array_equal(raw, np.arange(8, dtype=np.float32))


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path / "absent")


def test_load_shape_byte_mismatch(tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({
        "shape": [2, 2, 2], "spacing_mm": [1, 1, 1], "origin_mm": [0, 0, 0],
        "dtype": "f32le", "kind": "hu"}))
    (tmp_path / "bad.raw").write_bytes(b"\x00" * (7 * 4))
    with pytest.raises(VolumeFormatError):
        load_volume(tmp_path / "bad")


def test_load_invalid_spacing(tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({
        "shape": [1, 1, 1], "spacing_mm": [0, 1, 1], "origin_mm": [0, 0, 0],
        "dtype": "f32le", "kind": "hu"}))
    (tmp_path / "bad.raw").write_bytes(b"\x00" * 4)
    with pytest.raises(VolumeError):
        load_volume(tmp_path / "bad")


def test_load_nonfinite_rejected(tmp_path):
    (tmp_path / "nf.json").write_text(json.dumps({
        "shape": [1, 1, 1], "spacing_mm": [1, 1, 1], "origin_mm": [0, 0, 0],
        "dtype": "f32le", "kind": "hu"}))
    (tmp_path / "nf.raw").write_bytes(np.array([np.inf], dtype="<f4").tobytes())
    with pytest.raises(VolumeError):
        load_volume(tmp_path / "nf")


def test_save_unwritable_dir(tmp_path):
    with pytest.raises(OSError):
        save_volume(Volume(np.zeros((1, 1, 1))), tmp_path / "nodir" / "vol")


def test_mask_round_trip(tmp_path):
    from voxelfm.volume import SegmentationMask

    mask = SegmentationMask(np.arange(8, dtype=np.int32).reshape(2, 2, 2))
    save_mask(mask, tmp_path / "m")
    m2 = load_mask(tmp_path / "m")
    assert np.array_equal(mask.labels, m2.labels)
    with pytest.raises(VolumeFormatError):
        load_volume(tmp_path / "m")


# -- resample


def test_resample_identity_spacing():
    rng = np.random.default_rng(1)
    v = Volume(rng.normal(size=(6, 5, 4)).astype(np.float32),
               spacing_mm=(2.0, 1.5, 1.0))
    out = resample(v, v.spacing_mm)
    assert out.shape == v.shape
    assert np.max(np.abs(out.data - v.data)) <= 1e-6


def test_resample_constant_volume():
    v = Volume(np.full((4, 4, 4), 123.0), spacing_mm=(1.0, 1.0, 1.0))
    out = resample(v, (0.7, 1.3, 2.9))
    assert np.max(np.abs(out.data - 123.0)) <= 1e-6


def test_resample_linear_ramp_halved_spacing():
    # f(x) = x along x with spacing 1 -> interior values are 0.5 * index.
    k = 8
    ramp = np.tile(np.arange(k, dtype=np.float32), (3, 3, 1))
    out = resample(Volume(ramp), (1.0, 1.0, 0.5))
    assert out.shape == (3, 3, 2 * k)
    interior = out.data[1, 1, : 2 * k - 2]
    expected = 0.5 * np.arange(2 * k - 2)
    assert np.max(np.abs(interior - expected)) <= 1e-6


def test_resample_shape_rule_and_errors():
    v = Volume(np.zeros((10, 10, 10)), spacing_mm=(1.0, 1.0, 1.0))
    assert resample(v, (3.0, 3.0, 3.0)).shape == (3, 3, 3)
    assert resample(v, (100.0, 100.0, 100.0)).shape == (1, 1, 1)
    with pytest.raises(VolumeError):
        resample(v, (0.0, 1.0, 1.0))


# -- windowing


def test_window_blood_midpoint():
    v = Volume(np.full((1, 1, 1), 40.0))
    assert window(v, WindowSpec(40, 80)).data.ravel()[0] == pytest.approx(0.5)


def test_window_clamps():
    v = Volume(np.array([[[-500.0, 2100.0]]]))
    out = window(v, WindowSpec(40, 80)).data.ravel()
    assert out[0] == 0.0
    assert out[1] == 1.0


def test_window_bone_upper_bound():
    # Bone window spans -900..2100 HU, so 2100 maps exactly to 1.0.
    v = Volume(np.full((1, 1, 1), 2100.0))
    assert window(v, WindowSpec(600, 3000)).data.ravel()[0] == pytest.approx(1.0)


def test_window_monotone_and_bounded():
    hu = np.linspace(-2000, 3000, 101).reshape(1, 1, -1)
    out = window(Volume(hu), WindowSpec(25, 300)).data.ravel()
    assert np.all(out >= 0.0) and np.all(out <= 1.0)
    assert np.all(np.diff(out) >= 0.0)


def test_window_invalid_width():
    with pytest.raises(VolumeError):
        WindowSpec(40, 0)


def test_window_concat_four_presets():
    rng = np.random.default_rng(2)
    v = Volume(rng.uniform(-1000, 2000, size=(48, 32, 32)).astype(np.float32))
    specs = [WindowSpec.preset(p) for p in ("blood", "subdural", "stroke", "bone")]
    out = window_concat(v, specs)
    assert out.shape == (48, 32, 128)
    # First x-segment equals the blood window alone.
    blood = window(v, WindowSpec(40, 80))
    assert np.array_equal(out.data[:, :, :32], blood.data)


def test_window_concat_degenerate_and_empty():
    v = Volume(np.zeros((2, 2, 2)))
    one = window_concat(v, [WindowSpec(40, 80)])
    assert np.array_equal(one.data, window(v, WindowSpec(40, 80)).data)
    with pytest.raises(VolumeError):
        window_concat(v, [])


# -- normalize_hu


@pytest.mark.parametrize("hu,expected", [(-1024.0, 0.0), (2048.0, 1.0),
                                         (512.0, 0.5), (-5000.0, 0.0),
                                         (9999.0, 1.0)])
def test_normalize_hu_values(hu, expected):
    v = Volume(np.full((1, 1, 1), hu))
    assert normalize_hu(v).data.ravel()[0] == pytest.approx(expected)


# -- phantoms


def test_phantom_no_organs_constant():
    spec = PhantomSpec(shape=(8, 8, 8), organs=(), background_hu=-1000.0,
                       noise_sigma=0.0)
    vol, mask = generate_phantom(spec, seed=0)
    assert np.all(vol.data == -1000.0)
    assert not mask.labels.any()


def test_phantom_sphere_voxel_count():
    spec = PhantomSpec(
        shape=(32, 32, 32),
        organs=(OrganSpec(1, "ellipsoid", (0.5, 0.5, 0.5),
                          (0.25, 0.25, 0.25), 40.0, 0.0),),
        noise_sigma=0.0,
    )
    _vol, mask = generate_phantom(spec, seed=0)
    count = int((mask.labels == 1).sum())
    analytic = 4.0 / 3.0 * np.pi * 8.0 ** 3  # radius 0.25 * 32 = 8 voxels
    assert abs(count - analytic) / analytic < 0.10


def test_phantom_deterministic():
    spec = default_phantom_spec((16, 16, 16))
    v1, m1 = generate_phantom(spec, seed=42)
    v2, m2 = generate_phantom(spec, seed=42)
    assert np.array_equal(v1.data, v2.data)
    assert np.array_equal(m1.labels, m2.labels)
    v3, _ = generate_phantom(spec, seed=43)
    assert not np.array_equal(v1.data, v3.data)


def test_phantom_overlap_later_organ_wins():
    spec = PhantomSpec(
        shape=(16, 16, 16),
        organs=(
            OrganSpec(1, "ellipsoid", (0.5, 0.5, 0.5), (0.4, 0.4, 0.4), 40.0),
            OrganSpec(2, "ellipsoid", (0.5, 0.5, 0.5), (0.2, 0.2, 0.2), 300.0),
        ),
        noise_sigma=0.0,
    )
    _vol, mask = generate_phantom(spec, seed=0)
    center = mask.labels[8, 8, 8]
    assert center == 2


def test_phantom_duplicate_labels_rejected():
    with pytest.raises(VolumeError):
        PhantomSpec(organs=(
            OrganSpec(1, "ellipsoid", (0.5, 0.5, 0.5), (0.1, 0.1, 0.1), 0.0),
            OrganSpec(1, "tube", (0.5, 0.5, 0.5), (0.1, 0.1, 0.1), 0.0),
        ))
