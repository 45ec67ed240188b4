import numpy as np
import pytest

from sambd.volume import (
    DataError,
    PhantomConfig,
    TrainingSample,
    Volume,
    augment,
    coverage_counts,
    extract_windows,
    gen_phantom,
    hu_window,
    read_svol,
    resample_z,
    resize_bilinear,
    resize_nearest,
    write_svol,
)


def rand_volume(shape=(4, 4, 4), seed=0, spacing=(1.0, 1.0, 1.0)):
    rng = np.random.default_rng(seed)
    return Volume(voxels=rng.normal(size=shape).astype(np.float32), spacing=spacing)


# -- svol io -----------------------------------------------------------------------


def test_svol_round_trip_f32_bit_exact(tmp_path):
    vol = rand_volume(spacing=(0.7, 0.7, 2.5))
    path = tmp_path / "v.svol"
    write_svol(vol, path)
    back = read_svol(path)
    np.testing.assert_array_equal(back.voxels, vol.voxels)
    assert back.spacing == vol.spacing
    assert back.voxels.dtype == np.float32


def test_svol_round_trip_u8(tmp_path):
    labels = Volume(voxels=np.random.default_rng(1).integers(0, 3, size=(3, 4, 5)).astype(np.uint8), spacing=(1, 1, 4))
    path = tmp_path / "l.svol"
    write_svol(labels, path)
    back = read_svol(path)
    np.testing.assert_array_equal(back.voxels, labels.voxels)
    assert back.voxels.dtype == np.uint8


def test_svol_file_round_trip_is_byte_identical(tmp_path):
    vol = rand_volume(seed=2)
    a, b = tmp_path / "a.svol", tmp_path / "b.svol"
    write_svol(vol, a)
    write_svol(read_svol(a), b)
    assert a.read_bytes() == b.read_bytes()


def test_svol_payload_is_x_fastest(tmp_path):
    vox = np.arange(24, dtype=np.float32).reshape(2, 3, 4)  # (Z, Y, X)
    path = tmp_path / "o.svol"
    write_svol(Volume(voxels=vox, spacing=(1, 1, 1)), path)
    raw = path.read_bytes()
    payload = raw[raw.index(b"\n") + 1 :]
    flat = np.frombuffer(payload, dtype="<f4")
    # voxel (x, y, z) sits at index x + X*(y + Y*z)
    assert flat[1] == vox[0, 0, 1]
    assert flat[4] == vox[0, 1, 0]
    assert flat[12] == vox[1, 0, 0]


def test_svol_truncated_payload_rejected(tmp_path):
    path = tmp_path / "t.svol"
    write_svol(rand_volume(), path)
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(DataError):
        read_svol(path)


def test_svol_bad_magic_rejected(tmp_path):
    path = tmp_path / "m.svol"
    path.write_bytes(b"WHAT dims=1,1,1 spacing=1,1,1 dtype=f32\n" + b"\x00" * 4)
    with pytest.raises(DataError):
        read_svol(path)


def test_label_volume_rejects_out_of_range_values(tmp_path):
    path = tmp_path / "x.svol"
    path.write_bytes(b"SVOL1 dims=1,1,1 spacing=1.0,1.0,1.0 dtype=u8\n" + bytes([3]))
    with pytest.raises(DataError):
        read_svol(path)


# -- windowing ----------------------------------------------------------------------


def test_hu_window_pins():
    vol = Volume(voxels=np.array([[[-300.0, 25.0, 250.0]]], dtype=np.float32), spacing=(1, 1, 1))
    out = hu_window(vol)
    np.testing.assert_array_equal(out.voxels.ravel(), [0.0, 0.5, 1.0])


def test_hu_window_monotone_and_bounded():
    rng = np.random.default_rng(3)
    values = np.sort(rng.uniform(-500, 500, size=64)).astype(np.float32)
    out = hu_window(Volume(voxels=values.reshape(1, 1, -1), spacing=(1, 1, 1))).voxels.ravel()
    assert np.all(np.diff(out) >= 0)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_hu_window_idempotent_on_unit_range():
    vol = rand_volume(seed=4)
    once = hu_window(vol)
    twice = hu_window(once, lo=0.0, hi=1.0)
    np.testing.assert_array_equal(once.voxels, twice.voxels)


def test_hu_window_rejects_bad_range():
    with pytest.raises(ValueError):
        hu_window(rand_volume(), lo=10.0, hi=10.0)


# -- z resampling ---------------------------------------------------------------------


def test_resample_identity_at_equal_spacing():
    vol = rand_volume(seed=5, spacing=(1, 1, 2.0))
    out = resample_z(vol, 2.0)
    np.testing.assert_array_equal(out.voxels, vol.voxels)
    assert out.spacing == vol.spacing


def test_resample_hand_values_two_to_one_mm():
    vol = Volume(voxels=np.array([0.0, 10.0]).reshape(2, 1, 1).astype(np.float32), spacing=(1, 1, 2.0))
    out = resample_z(vol, 1.0)
    np.testing.assert_allclose(out.voxels.ravel(), [0.0, 5.0, 10.0], rtol=1e-6)
    assert out.spacing[2] == 1.0


def test_resample_labels_nearest_no_fractions():
    labels = Volume(voxels=np.array([0, 1, 1, 0], dtype=np.uint8).reshape(4, 1, 1), spacing=(1, 1, 2.0))
    out = resample_z(labels, 1.0)
    assert out.voxels.dtype == np.uint8
    assert set(np.unique(out.voxels)) <= {0, 1}
    assert out.voxels.shape[0] == 7


def test_resample_preserves_bounds():
    vol = rand_volume(shape=(9, 3, 3), seed=6, spacing=(1, 1, 3.0))
    out = resample_z(vol, 1.0)
    assert out.voxels.min() >= vol.voxels.min() - 1e-6
    assert out.voxels.max() <= vol.voxels.max() + 1e-6
    # endpoints preserved on the node-centered grid
    np.testing.assert_allclose(out.voxels[0], vol.voxels[0], rtol=1e-6)
    np.testing.assert_allclose(out.voxels[-1], vol.voxels[-1], rtol=1e-6)


def test_resample_rejects_nonpositive_target():
    with pytest.raises(ValueError):
        resample_z(rand_volume(), 0.0)


# -- window extraction -------------------------------------------------------------------


def test_window_coverage_hand_enumeration():
    assert coverage_counts(10, 5) == [1, 2, 3, 3, 3, 3, 3, 3, 2, 1]


def test_window_count_with_padding():
    intensity = rand_volume(shape=(10, 16, 16), seed=7)
    labels = Volume(voxels=np.zeros((10, 16, 16), dtype=np.uint8), spacing=(1, 1, 1))
    samples = extract_windows(intensity, labels, c_in=5, pad=True)
    assert len(samples) == 8
    starts = [s.z0 for s in samples]
    assert starts == list(range(0, 8))


def test_single_window_without_padding():
    intensity = rand_volume(shape=(5, 8, 8), seed=8)
    labels = Volume(voxels=np.zeros((5, 8, 8), dtype=np.uint8), spacing=(1, 1, 1))
    samples = extract_windows(intensity, labels, c_in=5, pad=False)
    assert len(samples) == 1
    np.testing.assert_array_equal(samples[0].stack, intensity.voxels)


def test_targets_are_central_slices():
    z = 8
    intensity = Volume(voxels=np.arange(z, dtype=np.float32).reshape(z, 1, 1).repeat(4, 1).repeat(4, 2), spacing=(1, 1, 1))
    labelvox = (np.arange(z) % 3).astype(np.uint8).reshape(z, 1, 1).repeat(4, 1).repeat(4, 2)
    labels = Volume(voxels=labelvox, spacing=(1, 1, 1))
    for s in extract_windows(intensity, labels, c_in=5, pad=False):
        np.testing.assert_array_equal(s.labels, labelvox[s.z0 : s.z0 + 3])
        np.testing.assert_array_equal(s.stack[1:4], intensity.voxels[s.z0 : s.z0 + 3])


def test_coverage_matches_closed_form():
    for nz, c_in in [(10, 5), (12, 7), (5, 5), (3, 5), (20, 3)]:
        c_out = c_in - 2
        counts = coverage_counts(nz, c_in)
        n_windows = nz + 2 - c_in + 1
        want = [
            min(k, nz - 1 - k, n_windows - 1, c_out - 1) + 1 if n_windows > 0 else 0
            for k in range(nz)
        ]
        assert counts == want, (nz, c_in)


def test_windows_reject_too_thin_volume():
    intensity = rand_volume(shape=(2, 8, 8))
    labels = Volume(voxels=np.zeros((2, 8, 8), dtype=np.uint8), spacing=(1, 1, 1))
    with pytest.raises(DataError):
        extract_windows(intensity, labels, c_in=5, pad=False)


def test_one_hot_targets():
    sample = TrainingSample(
        stack=np.zeros((5, 2, 2), dtype=np.float32),
        labels=np.array([[[0, 1], [2, 0]]] * 3, dtype=np.uint8),
        z0=0,
    )
    oh = sample.one_hot()
    assert oh.shape == (3, 3, 2, 2)
    np.testing.assert_array_equal(oh.sum(axis=1), 1.0)
    assert oh[0, 1, 0, 1] == 1.0 and oh[0, 2, 1, 0] == 1.0


# -- augmentation ---------------------------------------------------------------------------


def sample_for_augment(h=80, w=80, seed=9):
    rng = np.random.default_rng(seed)
    return TrainingSample(
        stack=rng.normal(size=(5, h, w)).astype(np.float32),
        labels=rng.integers(0, 3, size=(3, h, w)).astype(np.uint8),
        z0=0,
    )


def test_augment_shape_contract():
    rng = np.random.default_rng(10)
    for _ in range(10):
        out = augment(sample_for_augment(), rng, crop=64)
        assert out.stack.shape == (5, 64, 64)
        assert out.labels.shape == (3, 64, 64)
        assert out.labels.dtype == np.uint8


def test_augment_unit_scale_is_a_crop():
    sample = sample_for_augment()

    class FixedRng:
        def uniform(self, lo, hi):
            return 1.0

        def integers(self, lo, hi):
            return (hi - 1 + lo) // 2  # centered

    out = augment(sample, FixedRng(), crop=64)
    oy = ox = (80 - 64) // 2
    np.testing.assert_array_equal(out.stack, sample.stack[:, oy : oy + 64, ox : ox + 64])
    np.testing.assert_array_equal(out.labels, sample.labels[:, oy : oy + 64, ox : ox + 64])


def test_augment_seeded_reproducibility():
    sample = sample_for_augment()
    a = augment(sample, np.random.default_rng(11), crop=64)
    b = augment(sample, np.random.default_rng(11), crop=64)
    np.testing.assert_array_equal(a.stack, b.stack)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_augment_rejects_oversized_crop():
    with pytest.raises(ValueError):
        augment(sample_for_augment(h=48, w=48), np.random.default_rng(0), crop=64)


def test_resize_helpers_identity_at_same_size():
    rng = np.random.default_rng(12)
    img = rng.normal(size=(2, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(resize_bilinear(img, 8, 8), img)
    lab = rng.integers(0, 3, size=(2, 8, 8)).astype(np.uint8)
    np.testing.assert_array_equal(resize_nearest(lab, 8, 8), lab)


# -- phantoms ----------------------------------------------------------------------------------


def test_phantom_seeded_determinism():
    cfg = PhantomConfig(seed=17)
    a = gen_phantom(cfg)
    b = gen_phantom(cfg)
    np.testing.assert_array_equal(a.intensity.voxels, b.intensity.voxels)
    np.testing.assert_array_equal(a.label.voxels, b.label.voxels)
    assert a.thickness_mm == b.thickness_mm


def test_phantom_tumor_inside_organ_support():
    for seed in range(6):
        ph = gen_phantom(PhantomConfig(seed=seed))
        zz, yy, xx = np.nonzero(ph.label.voxels == 2)
        assert len(zz) > 0
        sx, sy, sz = ph.label.spacing
        centers = np.column_stack([(xx + 0.5) * sx, (yy + 0.5) * sy, (zz + 0.5) * sz])
        rel = (centers - ph.organ_center_mm) / ph.organ_axes_mm
        assert np.all((rel**2).sum(axis=1) <= 1.0 + 1e-9), seed


def test_phantom_thickness_decimation_arithmetic():
    thin = gen_phantom(PhantomConfig(thickness_choices=(1,), seed=3))
    thick = gen_phantom(PhantomConfig(thickness_choices=(4,), seed=3))
    assert thin.label.voxels.shape[0] == 4 * thick.label.voxels.shape[0]
    assert thick.intensity.spacing[2] == 4.0


def test_phantom_labels_only_expected_values():
    ph = gen_phantom(PhantomConfig(seed=5))
    assert set(np.unique(ph.label.voxels)) <= {0, 1, 2}
    assert (ph.label.voxels == 1).sum() > 0


def test_phantom_rejects_oversized_tumors():
    cfg = PhantomConfig(tumor_radius_mm=(30.0, 31.0), seed=0)
    with pytest.raises(ValueError):
        gen_phantom(cfg)


def test_phantom_config_validation():
    with pytest.raises(ValueError):
        gen_phantom(PhantomConfig(thickness_choices=(), seed=0))
    with pytest.raises(ValueError):
        gen_phantom(PhantomConfig(dims=(80, 80, 42), thickness_choices=(4,), seed=0))
