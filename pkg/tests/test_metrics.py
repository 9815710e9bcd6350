import math

import numpy as np
import pytest

from sslseg.metrics import (MetricReport, average_score, boundary_voxels, dsc,
                            evaluate_cases, ia, miou, nsd)
from sslseg.volumes import SegLabel


def random_label(seed, shape=(8, 8, 8), num_classes=3):
    rng = np.random.default_rng(seed)
    return SegLabel(rng.integers(0, num_classes, size=shape).astype(np.uint8), num_classes)


# ---------------------------------------------------------------------------
# Loop-based scalar oracles
# ---------------------------------------------------------------------------

def oracle_overlap(pred, gt, c):
    inter = na = nb = 0
    for idx in np.ndindex(pred.shape):
        a = pred.data[idx] == c
        b = gt.data[idx] == c
        inter += a and b
        na += a
        nb += b
    return inter, na, nb


def oracle_boundary(mask):
    out = np.zeros_like(mask)
    for idx in np.ndindex(mask.shape):
        if not mask[idx]:
            continue
        for axis in range(3):
            for step in (-1, 1):
                n = list(idx)
                n[axis] += step
                if not (0 <= n[axis] < mask.shape[axis]) or not mask[tuple(n)]:
                    out[idx] = True
    return out


def oracle_nsd_class(pred, gt, c, tol, spacing=(1.0, 1.0, 1.0)):
    p = pred.data == c
    g = gt.data == c
    if not p.any() or not g.any():
        return 0.0
    bp = np.argwhere(oracle_boundary(p)).astype(float) * spacing
    bg = np.argwhere(oracle_boundary(g)).astype(float) * spacing
    close_p = sum(1 for v in bp if min(np.linalg.norm(v - w) for w in bg) <= tol)
    close_g = sum(1 for w in bg if min(np.linalg.norm(w - v) for v in bp) <= tol)
    return (close_p + close_g) / (len(bp) + len(bg))


class TestDsc:
    def test_perfect(self):
        lab = random_label(0)
        per, mean = dsc(lab, lab)
        assert all(v == 1.0 for v in per.values())
        assert mean == 1.0

    def test_disjoint(self):
        a = SegLabel(np.zeros((4, 4, 4), np.uint8), 2)
        a.data[:2] = 1
        b = SegLabel(np.zeros((4, 4, 4), np.uint8), 2)
        b.data[2:] = 1
        per, _ = dsc(a, b)
        assert per[1] == 0.0

    def test_half_overlap(self):
        a = SegLabel(np.zeros((4, 4, 4), np.uint8), 2)
        b = SegLabel(np.zeros((4, 4, 4), np.uint8), 2)
        a.data[0, 0, :4] = 1
        a.data[0, 1, :4] = 1          # |A| = 8
        b.data[0, 1, :4] = 1
        b.data[0, 2, :4] = 1          # |B| = 8, intersection 4
        per, _ = dsc(a, b)
        assert per[1] == pytest.approx(0.5)

    def test_absent_from_one_scores_zero(self):
        a = SegLabel(np.zeros((4, 4, 4), np.uint8), 3)
        b = SegLabel(np.zeros((4, 4, 4), np.uint8), 3)
        b.data[0, 0, 0] = 2
        per, _ = dsc(a, b)
        assert per[2] == 0.0
        assert 1 not in per   # absent from both: excluded

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_oracle(self, seed):
        pred, gt = random_label(seed), random_label(seed + 1000)
        per, _ = dsc(pred, gt)
        for c, v in per.items():
            inter, na, nb = oracle_overlap(pred, gt, c)
            assert v == pytest.approx(2 * inter / (na + nb), abs=1e-9)

    def test_symmetric(self):
        a, b = random_label(5), random_label(6)
        assert dsc(a, b)[1] == pytest.approx(dsc(b, a)[1])


class TestMiou:
    @pytest.mark.parametrize("seed", range(20))
    def test_matches_oracle(self, seed):
        pred, gt = random_label(seed), random_label(seed + 2000)
        per, _ = miou(pred, gt)
        for c, v in per.items():
            inter, na, nb = oracle_overlap(pred, gt, c)
            assert v == pytest.approx(inter / (na + nb - inter), abs=1e-9)

    def test_known_value(self):
        a = SegLabel(np.zeros((4, 4, 4), np.uint8), 2)
        b = SegLabel(np.zeros((4, 4, 4), np.uint8), 2)
        a.data[0, 0, :4] = 1
        a.data[0, 1, :4] = 1          # |A| = 8
        b.data[0, 1, :4] = 1
        b.data[0, 2, :4] = 1          # |B| = 8, inter = 4, union = 12
        per, _ = miou(a, b)
        assert per[1] == pytest.approx(1 / 3)

    @pytest.mark.parametrize("seed", range(10))
    def test_dice_iou_identity(self, seed):
        pred, gt = random_label(seed), random_label(seed + 3000)
        d_per, _ = dsc(pred, gt)
        i_per, _ = miou(pred, gt)
        for c in d_per:
            assert d_per[c] == pytest.approx(2 * i_per[c] / (1 + i_per[c]), abs=1e-9)


class TestNsd:
    def test_perfect(self):
        lab = random_label(1)
        per, mean = nsd(lab, lab, 1.0)
        assert mean == 1.0

    def test_parallel_slabs(self):
        a = SegLabel(np.zeros((8, 8, 8), np.uint8), 2)
        b = SegLabel(np.zeros((8, 8, 8), np.uint8), 2)
        a.data[3] = 1
        b.data[4] = 1   # unit-spaced flat slabs
        per_wide, _ = nsd(a, b, 1.5)
        per_tight, _ = nsd(a, b, 0.5)
        assert per_wide[1] == 1.0
        assert per_tight[1] == 0.0

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        pred = SegLabel(rng.integers(0, 2, size=(12, 12, 12)).astype(np.uint8), 2)
        gt = SegLabel(rng.integers(0, 2, size=(12, 12, 12)).astype(np.uint8), 2)
        per, _ = nsd(pred, gt, 2.0)
        assert per[1] == pytest.approx(oracle_nsd_class(pred, gt, 1, 2.0), abs=1e-6)

    def test_boundary_matches_oracle(self):
        rng = np.random.default_rng(9)
        mask = rng.random((10, 10, 10)) < 0.3
        assert np.array_equal(boundary_voxels(mask), oracle_boundary(mask))


class TestIa:
    def test_all_perfect(self):
        assert ia([{1: 1.0, 2: 1.0}, {1: 1.0}]) == 1.0

    def test_reported_example(self):
        assert ia([{1: 0.6, 2: 0.4}, {1: 0.9}]) == pytest.approx(0.75)

    def test_strict_inequality(self):
        assert ia([{1: 0.5}]) == 0.0

    def test_empty_case_excluded(self):
        assert ia([{}, {1: 1.0}]) == 1.0


class TestReport:
    def test_average_score(self):
        report = MetricReport(mean_dsc=1.0, mean_nsd=1.0, mean_miou=1.0, ia=1.0)
        assert average_score(report) == 1.0
        report = MetricReport(mean_dsc=0.0, mean_nsd=1.0, mean_miou=1.0, ia=1.0)
        assert average_score(report) == 0.75

    def test_reported_validation_aggregates(self):
        report = MetricReport(mean_dsc=0.969, mean_nsd=0.998, mean_miou=0.940, ia=0.806)
        assert average_score(report) == pytest.approx(0.92825)

    def test_evaluate_perfect_cases(self):
        labs = {f"c{i}": random_label(i) for i in range(3)}
        report = evaluate_cases(labs, labs)
        assert report.mean_dsc == 1.0
        assert report.average_score == 1.0

    def test_missing_prediction_raises(self):
        gt = {"a": random_label(0), "b": random_label(1)}
        with pytest.raises(ValueError, match="b"):
            evaluate_cases({"a": gt["a"]}, gt)

    def test_csv_and_json(self, tmp_path):
        labs = {"c0": random_label(0)}
        report = evaluate_cases(labs, labs)
        report.write_csv(tmp_path / "m.csv")
        assert "average_score" in (tmp_path / "m.csv").read_text()
        assert "aggregates" in report.to_json()

    def test_relabeling_invariance(self):
        pred, gt = random_label(11), random_label(12)
        perm = {0: 0, 1: 2, 2: 1}
        pred2 = SegLabel(np.vectorize(perm.get)(pred.data).astype(np.uint8), 3)
        gt2 = SegLabel(np.vectorize(perm.get)(gt.data).astype(np.uint8), 3)
        assert dsc(pred, gt)[1] == pytest.approx(dsc(pred2, gt2)[1])
        assert miou(pred, gt)[1] == pytest.approx(miou(pred2, gt2)[1])
