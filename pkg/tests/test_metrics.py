import itertools

import numpy as np
import pytest

from seqflow.data import rotation_matrix
from seqflow.metrics import (FlowStats, ade_fde, chamfer,
                             emd, emd_assignment, flow_stats,
                             sinkhorn_correspondence, sinkhorn_distance,
                             sinkhorn_normalize)


class TestFlowStats:
    def test_perfect(self, rng):
        gt = rng.normal(size=(10, 3))
        st = flow_stats(gt.copy(), gt, [np.ones(10, bool)])
        assert st.epe3d == 0.0
        assert st.acc3ds == st.acc3dr == 1.0
        assert st.outliers3d == st.rect_outliers3d == 0.0
        assert st.valid_count == 10

    def test_hand_thresholds_large_gt(self):
        gt = np.array([[1.0, 0, 0]])
        pred = np.array([[1.2, 0, 0]])  # error 0.2, relative 20%
        st = flow_stats(pred, gt, [np.ones(1, bool)])
        assert st.epe3d == pytest.approx(0.2)
        assert st.acc3ds == 0.0 and st.acc3dr == 0.0
        assert st.outliers3d == 1.0 and st.rect_outliers3d == 1.0

    def test_rectified_small_gt(self):
        # gt norm 0.05 < 0.1: the relative rule is dropped for the
        # rectified fraction, so a 0.2 m error is not a rectified outlier
        gt = np.array([[0.05, 0, 0]])
        pred = np.array([[0.25, 0, 0]])
        st = flow_stats(pred, gt, [np.ones(1, bool)])
        assert st.outliers3d == 1.0
        assert st.rect_outliers3d == 0.0

    def test_paper_threshold_constants(self):
        from seqflow import metrics
        assert metrics.ACC_STRICT_ABS == 0.05
        assert metrics.ACC_RELAX_ABS == 0.1
        assert metrics.OUTLIER_ABS == 0.3
        assert metrics.ACC_STRICT_REL == 0.05
        assert metrics.ACC_RELAX_REL == 0.1
        assert metrics.OUTLIER_REL == 0.1
        assert metrics.RECT_NORM_CUTOFF == 0.1

    def test_strict_never_exceeds_relaxed(self, rng):
        for _ in range(20):
            gt = rng.normal(size=(30, 3)) * 0.2
            pred = gt + rng.normal(size=(30, 3)) * 0.1
            st = flow_stats(pred, gt, [np.ones(30, bool)])
            assert st.acc3ds <= st.acc3dr
            for v in (st.acc3ds, st.acc3dr, st.outliers3d, st.rect_outliers3d):
                assert 0.0 <= v <= 1.0

    def test_mask_selects(self, rng):
        gt = np.zeros((2, 3))
        pred = np.array([[0.5, 0, 0], [0.0, 0, 0]])
        st = flow_stats(pred, gt, [np.array([False, True])])
        assert st.epe3d == 0.0 and st.valid_count == 1

    def test_no_valid_points(self):
        with pytest.raises(ValueError, match="no valid"):
            flow_stats(np.zeros((2, 3)), np.zeros((2, 3)),
                       [np.zeros(2, bool)])

    def test_multi_step_aggregation(self, rng):
        gt = [np.zeros((2, 3)), np.zeros((2, 3))]
        pred = [np.zeros((2, 3)), np.full((2, 3), 1.0)]
        st = flow_stats(pred, gt, [np.ones(2, bool)] * 2)
        assert st.epe3d == pytest.approx(np.sqrt(3.0) / 2)


class TestAdeFde:
    def test_perfect(self, rng):
        frames = [rng.normal(size=(5, 3)) for _ in range(3)]
        ade, fde = ade_fde(frames, [f.copy() for f in frames],
                           [np.ones(5, bool)] * 3)
        assert ade == 0.0 and fde == 0.0

    def test_hand_values(self):
        gt = [np.zeros((1, 3)), np.zeros((1, 3))]
        pred = [np.array([[0.1, 0, 0]]), np.array([[0.3, 0, 0]])]
        ade, fde = ade_fde(pred, gt, [np.ones(1, bool)] * 2)
        assert ade == pytest.approx(0.2)
        assert fde == pytest.approx(0.3)

    def test_masked_final_step_errors(self):
        gt = [np.zeros((1, 3)), np.zeros((1, 3))]
        pred = [np.array([[0.1, 0, 0]]), np.array([[0.3, 0, 0]])]
        masks = [np.ones(1, bool), np.zeros(1, bool)]
        with pytest.raises(ValueError, match="final"):
            ade_fde(pred, gt, masks)


def factorial_emd(a, b):
    n = len(a)
    best = np.inf
    for perm in itertools.permutations(range(n)):
        cost = sum(np.sum((a[i] - b[perm[i]]) ** 2) for i in range(n))
        best = min(best, cost)
    return best / n


class TestEmd:
    def test_identical(self, rng):
        a = rng.normal(size=(6, 3))
        assert emd(a, a.copy()) == pytest.approx(0.0, abs=1e-12)

    def test_cross_assignment(self):
        a = np.array([[0.0, 0, 0], [1.0, 0, 0]])
        b = np.array([[1.0, 0, 0], [0.0, 0, 0]])
        assert emd(a, b) == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_array_equal(emd_assignment(a, b), [1, 0])

    @pytest.mark.parametrize("seed", range(6))
    def test_against_factorial_oracle(self, seed):
        r = np.random.default_rng(seed)
        n = int(r.integers(2, 8))
        a, b = r.normal(size=(n, 3)), r.normal(size=(n, 3))
        assert emd(a, b) == pytest.approx(factorial_emd(a, b), abs=1e-9)

    def test_unequal_sizes_rejected(self, rng):
        with pytest.raises(ValueError, match="equal-size"):
            emd(rng.normal(size=(3, 3)), rng.normal(size=(4, 3)))

    def test_zero_iff_permutation(self, rng):
        a = rng.normal(size=(7, 3))
        perm = rng.permutation(7)
        assert emd(a, a[perm]) == pytest.approx(0.0, abs=1e-12)
        assert emd(a, a + [[0.01, 0, 0]]) > 0.0

    def test_assignment_is_bijection(self, rng):
        a, b = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
        mapping = emd_assignment(a, b)
        assert sorted(mapping.tolist()) == list(range(20))


class TestSinkhorn:
    def test_identity_well_separated(self, rng):
        a = rng.uniform(-1, 1, (12, 3))
        res = sinkhorn_correspondence(a, a.copy())
        np.testing.assert_array_equal(res.mapping, np.arange(12))
        assert sinkhorn_distance(a, a.copy()) <= 1e-12

    def test_tie_breaks_to_lowest_column(self):
        # every pairwise distance equals sqrt(2): argmax ties resolve to
        # column 0, whose squared distance is the reported value
        a = np.array([[-1.0, 0, 0], [1.0, 0, 0]])
        b = np.array([[0.0, -1.0, 0], [0.0, 1.0, 0]])
        res = sinkhorn_correspondence(a, b)
        np.testing.assert_array_equal(res.mapping, [0, 0])
        assert sinkhorn_distance(a, b) == pytest.approx(2.0)

    def test_normalization_sums(self, rng):
        mat = np.ones((6, 8))
        mat[:5, :7] = np.exp(rng.uniform(0, 4, (5, 7)))
        trace = []
        sinkhorn_normalize(mat, 5, trace=trace)
        assert len(trace) == 10
        for i, m in enumerate(trace):
            if i % 2 == 0:  # row pass: non-slack rows sum to one
                np.testing.assert_allclose(m[:5, :].sum(axis=1), 1.0,
                                           atol=1e-9)
            else:  # column pass: non-slack columns sum to one
                np.testing.assert_allclose(m[:, :7].sum(axis=0), 1.0,
                                           atol=1e-9)

    def test_outlier_goes_to_slack(self, rng):
        base = rng.uniform(0, 1, (20, 3))
        a = base.copy()
        a[5] = [50.0, 50.0, 50.0]
        res = sinkhorn_correspondence(a, base)
        assert res.mapping[5] == -1
        assert res.valid.sum() == 19
        assert sinkhorn_distance(a, base) <= 1e-12  # outlier excluded

    def test_degenerate_matching_errors(self, rng):
        near = rng.uniform(0, 0.1, (5, 3))
        far = rng.uniform(100, 100.1, (6, 3))
        with pytest.raises(ValueError, match="degenerate matching"):
            sinkhorn_distance(near, far)

    def test_coincident_points_finite(self):
        # distance zero drives the affinity exponent to its clamp; values
        # must stay finite and the map correct
        a = np.zeros((1, 3))
        res = sinkhorn_correspondence(a, a.copy())
        assert res.mapping[0] == 0


class TestInvariances:
    def test_independent_permutations(self, rng):
        a, b = rng.normal(size=(9, 3)), rng.normal(size=(9, 3))
        pa, pb = rng.permutation(9), rng.permutation(9)
        assert chamfer(a, b) == pytest.approx(chamfer(a[pa], b[pb]), abs=1e-12)
        assert emd(a, b) == pytest.approx(emd(a[pa], b[pb]), abs=1e-9)
        assert sinkhorn_distance(a, b) == pytest.approx(
            sinkhorn_distance(a[pa], b[pb]), abs=1e-9)

    def test_common_rigid_motion(self, rng):
        a, b = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
        rot = rotation_matrix([0.3, -1.0, 0.7], 0.9)
        shift = np.array([0.4, -2.0, 1.1])
        ra, rb = a @ rot.T + shift, b @ rot.T + shift
        assert chamfer(ra, rb) == pytest.approx(chamfer(a, b), abs=1e-9)
        assert emd(ra, rb) == pytest.approx(emd(a, b), abs=1e-9)
        assert sinkhorn_distance(ra, rb) == pytest.approx(
            sinkhorn_distance(a, b), abs=1e-9)

    def test_corresponded_metrics_simultaneous_permutation(self, rng):
        pred = rng.normal(size=(10, 3))
        gt = rng.normal(size=(10, 3))
        mask = rng.random(10) > 0.2
        perm = rng.permutation(10)
        a = flow_stats(pred, gt, [mask])
        b = flow_stats(pred[perm], gt[perm], [mask[perm]])
        assert a.epe3d == pytest.approx(b.epe3d, abs=1e-12)
        assert a.acc3ds == b.acc3ds and a.outliers3d == b.outliers3d
