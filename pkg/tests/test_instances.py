from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fixtures import random_rotation, two_blobs
from hierparts.instances import (MIN_CONFIDENCE, Instance, InstanceSet, MeanShiftClustering, MeanShiftParams,
                                 extract_instances, instances_from_labels, mean_shift)

seeds = st.integers(0, 2 ** 32 - 1)


def same_partition(a, b):
    pairs = set(zip(a.tolist(), b.tolist()))
    return len(pairs) == len(set(a.tolist())) == len(set(b.tolist()))


class TestMeanShift:
    def test_single_point(self):
        assert mean_shift(np.ones((1, 4))).tolist() == [1]

    def test_identical_points(self):
        labels, modes = mean_shift(np.full((30, 3), 2.5), MeanShiftParams(max_iters=1), return_modes=True)
        assert set(labels.tolist()) == {1}
        assert np.allclose(modes, [[2.5, 2.5, 2.5]])

    @pytest.mark.parametrize("seed", range(5))
    def test_two_blobs(self, seed):
        p = MeanShiftParams()
        X, truth = two_blobs(np.random.default_rng(seed), p.bandwidth)
        labels = mean_shift(X, p)
        assert len(set(labels.tolist())) == 2
        assert same_partition(labels, truth)

    def test_params(self):
        with pytest.raises(ValueError):
            MeanShiftParams(bandwidth=0)
        with pytest.raises(ValueError):
            MeanShiftParams(bandwidth=1.0, merge_radius=2.0)
        assert MeanShiftParams(bandwidth=1.0).radius == 0.5

    def test_empty(self):
        with pytest.raises(ValueError):
            mean_shift(np.zeros((0, 3)))

    def test_ids_follow_smallest_key(self):
        X = np.array([[10.0, 0], [0.0, 0], [10.1, 0]])
        assert mean_shift(X).tolist() == [1, 2, 1]
        assert mean_shift(X, keys=[[5, 0, 0], [1, 0, 0], [7, 0, 0]]).tolist() == [2, 1, 2]

    @given(seeds)
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(40, 2)) * 1.5
        keys = np.arange(40)
        perm = rng.permutation(40)
        a = mean_shift(X, keys=keys)
        b = mean_shift(X[perm], keys=keys[perm])
        assert np.array_equal(a[perm], b)

    @given(seeds)
    def test_isometry_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        p = MeanShiftParams(bandwidth=0.6)
        X = np.vstack([c + rng.normal(size=(15, 3)) * 0.1 for c in rng.uniform(-3, 3, size=(3, 3))])
        Y = X @ random_rotation(rng).T + rng.normal(size=3)
        assert same_partition(mean_shift(X, p), mean_shift(Y, p))

    def test_estimator(self):
        X, truth = two_blobs(np.random.default_rng(9), 0.75)
        est = MeanShiftClustering().fit(X)
        assert est.n_clusters_ == 2
        assert np.array_equal(est.predict(X), est.labels_)
        assert est.get_params()["bandwidth"] == 0.75
        assert np.array_equal(est.fit_predict(X), est.labels_)


class TestExtract:
    def test_threshold_constant(self):
        assert MIN_CONFIDENCE == 0.25

    def test_pure_cluster(self):
        out = extract_instances([1, 1, 1], [4, 4, 4])
        assert len(out) == 1
        inst = out.instances[0]
        assert (inst.class_id, inst.confidence, inst.voxels) == (4, 1.0, frozenset({(0,), (1,), (2,)}))

    def test_five_way_split_dropped(self):
        assert len(extract_instances([1] * 5, [1, 2, 3, 4, 5])) == 0
        assert len(extract_instances([1] * 4, [1, 2, 3, 4])) == 1

    def test_background_cluster_dropped(self):
        assert len(extract_instances([1, 1, 2], [0, 0, 3])) == 1

    def test_tie_smallest_class(self):
        assert extract_instances([1, 1], [7, 3]).instances[0].class_id == 3

    @given(seeds)
    def test_counting_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 60))
        clusters = rng.integers(1, 6, n)
        sem = rng.integers(0, 4, n)
        keys = rng.permutation(1000)[:n]
        out = extract_instances(clusters, sem, keys=keys)
        expected = []
        for c in sorted(set(clusters.tolist())):
            hist = Counter(s for cl, s in zip(clusters.tolist(), sem.tolist()) if cl == c)
            cls = min(hist, key=lambda s: (-hist[s], s))
            conf = hist[cls] / sum(hist.values())
            if cls > 0 and conf >= 0.25:
                expected.append((cls, conf, frozenset((int(k),) for k, cl in zip(keys, clusters) if cl == c)))
        assert [(i.class_id, i.confidence, i.voxels) for i in out] == expected
        assert [i.id for i in out] == list(range(1, len(expected) + 1))

    def test_from_labels(self):
        gt = instances_from_labels([0, 2, 2, 5], [0, 3, 3, 6], keys=[[0, 0, 0], [0, 0, 1], [0, 0, 2], [1, 0, 0]])
        assert [(i.id, i.class_id, len(i.voxels)) for i in gt] == [(2, 3, 2), (5, 6, 1)]


class TestInstanceSet:
    def test_disjoint(self):
        with pytest.raises(ValueError):
            InstanceSet((Instance(1, 1, 1.0, frozenset({(0,)})), Instance(2, 1, 1.0, frozenset({(0,)}))))

    def test_finite_confidence(self):
        with pytest.raises(ValueError):
            InstanceSet((Instance(1, 1, float("nan"), frozenset()),))

    def test_sorted_by_id(self):
        s = InstanceSet((Instance(3, 1, 1.0), Instance(1, 1, 1.0)))
        assert [i.id for i in s] == [1, 3]
