import numpy as np
import pytest
from scipy import stats

from sslseg.volumes import (Case, DataError, Patch, SegLabel, Volume, clip_normalize,
                            generate_synthetic_case, load_case, resample,
                            resample_label, sample_patch, save_case)


def make_case(shape=(8, 8, 8), labeled=True, seed=0, num_classes=3, cid="c0"):
    rng = np.random.default_rng(seed)
    vol = Volume(rng.normal(size=shape).astype(np.float32), (1.0, 1.0, 1.0))
    label = None
    if labeled:
        label = SegLabel(rng.integers(0, num_classes, size=shape).astype(np.uint8), num_classes)
    return Case(volume=vol, label=label, id=cid)


class TestTypes:
    def test_volume_rejects_nan(self):
        data = np.zeros((4, 4, 4), dtype=np.float32)
        data[0, 0, 0] = np.nan
        with pytest.raises(DataError):
            Volume(data, (1, 1, 1))

    def test_volume_rejects_bad_spacing(self):
        with pytest.raises(DataError):
            Volume(np.zeros((4, 4, 4), np.float32), (1, 0, 1))

    def test_label_range_checked(self):
        data = np.full((4, 4, 4), 5, dtype=np.uint8)
        with pytest.raises(DataError):
            SegLabel(data, num_classes=3)

    def test_case_shape_mismatch(self):
        vol = Volume(np.zeros((8, 8, 8), np.float32), (1, 1, 1))
        lab = SegLabel(np.zeros((8, 8, 4), np.uint8), 2)
        with pytest.raises(DataError):
            Case(volume=vol, label=lab, id="bad")


class TestIO:
    def test_round_trip_bit_exact(self, tmp_path):
        case = make_case()
        path = save_case(case, tmp_path)
        loaded = load_case(path)
        assert np.array_equal(loaded.volume.data, case.volume.data)
        assert loaded.volume.spacing == case.volume.spacing
        assert np.array_equal(loaded.label.data, case.label.data)
        assert loaded.label.num_classes == case.label.num_classes
        assert loaded.id == case.id

    def test_unlabeled_case(self, tmp_path):
        case = make_case(labeled=False)
        path = save_case(case, tmp_path)
        loaded = load_case(path)
        assert loaded.label is None
        assert not loaded.is_labeled

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_case(tmp_path / "nothere.vol.raw")


class TestResample:
    def test_extent_formula(self):
        vol = Volume(np.zeros((100, 8, 8), np.float32), (0.5, 1.0, 1.0))
        out = resample(vol, (0.25, 1.0, 1.0))
        assert out.shape == (200, 8, 8)

    def test_identity(self):
        case = make_case()
        out = resample(case.volume, case.volume.spacing)
        assert np.array_equal(out.data, case.volume.data)

    def test_round_trip_extents(self):
        vol = Volume(np.random.default_rng(0).normal(size=(40, 30, 20)).astype(np.float32),
                     (1.0, 1.0, 1.0))
        down = resample(vol, (2.0, 1.5, 1.25))
        back = resample(down, (1.0, 1.0, 1.0))
        assert back.shape == vol.shape

    def test_label_nearest(self):
        lab = SegLabel(np.random.default_rng(1).integers(0, 3, (16, 16, 16)).astype(np.uint8), 3)
        out = resample_label(lab, (1, 1, 1), (0.5, 0.5, 0.5))
        assert out.shape == (32, 32, 32)
        assert set(np.unique(out.data)) <= set(np.unique(lab.data))


class TestClipNormalize:
    def test_zero_mean_unit_std(self):
        case = make_case(shape=(16, 16, 16))
        out = clip_normalize(case.volume)
        assert abs(out.data.mean()) < 1e-5
        assert abs(out.data.std() - 1) < 1e-5

    def test_outlier_clipped(self):
        rng = np.random.default_rng(2)
        data = rng.normal(size=(16, 16, 16)).astype(np.float32)
        data[0, 0, 0] = 1e6
        # brute-force percentile on the voxel multiset
        hi = np.percentile(data, 99.5)
        out = clip_normalize(Volume(data, (1, 1, 1)))
        clipped = np.clip(data, np.percentile(data, 0.5), hi)
        expected = (clipped - clipped.mean()) / clipped.std()
        assert np.allclose(out.data, expected, atol=1e-4)
        assert out.data.max() < 10  # outlier no longer dominates

    def test_constant_volume(self):
        out = clip_normalize(Volume(np.full((8, 8, 8), 3.0, np.float32), (1, 1, 1)))
        assert np.all(out.data == 0)

    def test_idempotent(self):
        case = make_case(shape=(16, 16, 16))
        once = clip_normalize(case.volume, 0, 100)
        twice = clip_normalize(once, 0, 100)
        assert np.allclose(once.data, twice.data, atol=1e-5)


class TestSamplePatch:
    def test_single_foreground_voxel_always_inside(self):
        label = np.zeros((16, 16, 16), dtype=np.uint8)
        label[5, 6, 7] = 1
        case = Case(volume=Volume(np.zeros((16, 16, 16), np.float32), (1, 1, 1)),
                    label=SegLabel(label, 2), id="fg")
        rng = np.random.default_rng(0)
        for _ in range(50):
            patch = sample_patch(case, (8, 8, 8), foreground_bias=1.0, rng=rng)
            assert patch.label.sum() >= 1

    def test_uniform_offsets_chi_square(self):
        case = make_case(shape=(16, 16, 16), labeled=False)
        rng = np.random.default_rng(3)
        counts = np.zeros(9)
        n = 10000
        for _ in range(n):
            patch = sample_patch(case, (8, 8, 8), foreground_bias=0.0, rng=rng)
            counts[patch.source_offset[0]] += 1
        chi2, p = stats.chisquare(counts)
        assert p > 1e-3

    def test_foreground_rate_at_bias(self):
        case = generate_synthetic_case(seed=5, extent=(24, 24, 24), num_teeth=2, num_classes=3)
        rng = np.random.default_rng(4)
        hits = sum(
            sample_patch(case, (8, 8, 8), foreground_bias=0.33, rng=rng).label.max() > 0
            for _ in range(10000)
        )
        assert hits / 10000 >= 0.33

    def test_no_foreground_falls_back(self):
        label = SegLabel(np.zeros((16, 16, 16), np.uint8), 2)
        case = Case(volume=Volume(np.zeros((16, 16, 16), np.float32), (1, 1, 1)),
                    label=label, id="empty")
        patch = sample_patch(case, (8, 8, 8), foreground_bias=1.0,
                             rng=np.random.default_rng(0))
        assert patch.data.shape == (8, 8, 8)

    def test_deterministic(self):
        case = make_case(shape=(16, 16, 16))
        p1 = sample_patch(case, (8, 8, 8), rng=np.random.default_rng(9))
        p2 = sample_patch(case, (8, 8, 8), rng=np.random.default_rng(9))
        assert np.array_equal(p1.data, p2.data)
        assert p1.source_offset == p2.source_offset


class TestSyntheticCases:
    def test_deterministic(self):
        a = generate_synthetic_case(seed=7, extent=(20, 20, 20), num_teeth=2, num_classes=3)
        b = generate_synthetic_case(seed=7, extent=(20, 20, 20), num_teeth=2, num_classes=3)
        assert np.array_equal(a.volume.data, b.volume.data)
        assert np.array_equal(a.label.data, b.label.data)

    def test_pulp_inside_tooth(self):
        case = generate_synthetic_case(seed=8, extent=(32, 32, 32), num_teeth=3, num_classes=3)
        pulp = case.label.data == 2
        assert pulp.any()
        # every pulp voxel was carved out of a tooth ellipsoid; its face
        # neighborhood is tooth or pulp, never raw background at distance 2
        from scipy import ndimage
        dilated = ndimage.binary_dilation(pulp)
        assert np.all(case.label.data[dilated] > 0)

    def test_zero_teeth_all_background(self):
        case = generate_synthetic_case(seed=9, extent=(16, 16, 16), num_teeth=0, num_classes=3)
        assert case.label.data.max() == 0

    def test_extent_validated(self):
        with pytest.raises(ValueError):
            generate_synthetic_case(seed=0, extent=(8, 16, 16), num_teeth=1, num_classes=3)
        with pytest.raises(ValueError):
            generate_synthetic_case(seed=0, extent=(16, 16, 16), num_teeth=1, num_classes=2)
