import itertools
import logging

import numpy as np
import pytest
import scipy.sparse as sp

from topksdca.data import (CircleSpec, DataError, Dataset, circle_bayes_topk_error,
                           circle_posterior, gen_circle, largest_label_filter,
                           linear_gram, make_folds, rbf_gram, read_csv, read_gram,
                           read_libsvm, write_gram, write_libsvm)


def write(tmp_path, text, name="data.txt"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestLibsvm:
    def test_single_line(self, tmp_path):
        ds = read_libsvm(write(tmp_path, "3 1:0.5 4:-2\n"))
        assert ds.classes == ["3"] and ds.labels.tolist() == [0]
        np.testing.assert_array_equal(ds.features.toarray(), [[0.5, 0, 0, -2]])

    def test_multilabel_line(self, tmp_path):
        ds = read_libsvm(write(tmp_path, "1,5 2:1\n7 1:1\n"), multilabel=True)
        assert ds.classes == ["1", "5", "7"]
        assert [y.tolist() for y in ds.labels] == [[0, 1], [2]]

    def test_numeric_class_order(self, tmp_path):
        ds = read_libsvm(write(tmp_path, "10 1:1\n2 1:1\n"))
        assert ds.classes == ["2", "10"] and ds.labels.tolist() == [1, 0]

    def test_round_trip_is_bit_exact(self, tmp_path, rng):
        X = rng.normal(size=(20, 5)) * 10.0 ** rng.integers(-20, 20, size=(20, 5))
        X[X < 0.1] = 0.0
        ds = Dataset(sp.csr_matrix(X), rng.integers(0, 3, 20), ["a", "b", "c"])
        path = tmp_path / "rt.libsvm"
        write_libsvm(ds, path)
        back = read_libsvm(path, n_features=5, classes=ds.classes)
        np.testing.assert_array_equal(back.features.toarray(), X)
        np.testing.assert_array_equal(back.labels, ds.labels)

    @pytest.mark.parametrize("text, msg", [
        ("1 1:0.5 1:2\n", "duplicate"),
        ("1 1:0.5\n1 a:b\n", ":2"),
        ("1 0:3\n", ">= 1"),
        ("", "no examples"),
        ("1,2 1:1\n", "exactly one label"),
    ])
    def test_errors(self, tmp_path, text, msg):
        with pytest.raises(DataError, match=msg):
            read_libsvm(write(tmp_path, text))

    def test_unknown_class_in_fixed_map(self, tmp_path):
        with pytest.raises(DataError, match="not in the class map"):
            read_libsvm(write(tmp_path, "9 1:1\n"), classes=["1", "2"])


class TestCsv:
    def test_dense_read(self, tmp_path):
        ds = read_csv(write(tmp_path, "a,label,b\n1.5,x,2\n0,y,-1\n", "d.csv"))
        np.testing.assert_array_equal(ds.features, [[1.5, 2], [0, -1]])
        assert ds.classes == ["x", "y"]

    def test_multilabel_sets(self, tmp_path):
        ds = read_csv(write(tmp_path, "label,f\nx;y,1\n", "d.csv"), multilabel=True)
        assert ds.labels[0].tolist() == [0, 1]

    def test_missing_label_column(self, tmp_path):
        with pytest.raises(DataError):
            read_csv(write(tmp_path, "a,b\n1,2\n", "d.csv"))


class TestGram:
    def test_round_trip(self, tmp_path, rng):
        K = rng.normal(size=(6, 4))
        write_gram(tmp_path / "k.bin", K)
        np.testing.assert_array_equal(read_gram(tmp_path / "k.bin"), K)

    def test_checksum_mismatch(self, tmp_path):
        write_gram(tmp_path / "k.bin", np.eye(2))
        (tmp_path / "k.bin").write_bytes(np.zeros((2, 2), "<f8").tobytes())
        with pytest.raises(DataError, match="checksum"):
            read_gram(tmp_path / "k.bin")

    def test_missing_sidecar(self, tmp_path):
        (tmp_path / "k.bin").write_bytes(b"\0" * 8)
        with pytest.raises(DataError, match="sidecar"):
            read_gram(tmp_path / "k.bin")


class TestKernels:
    def test_rbf_matches_pairwise(self, rng):
        X = rng.normal(size=(15, 4))
        K = rbf_gram(X, 0.7)
        direct = np.array([[np.exp(-0.7 * np.sum((a - b) ** 2)) for b in X] for a in X])
        np.testing.assert_allclose(K, direct, atol=1e-12, rtol=0)
        np.testing.assert_array_equal(np.diag(K), 1.0)
        np.testing.assert_array_equal(K, K.T)
        assert np.linalg.eigvalsh(K).min() > -1e-10

    def test_rbf_small_theta_is_all_ones(self, rng):
        X = rng.uniform(-3, 3, size=(10, 3))
        np.testing.assert_allclose(rbf_gram(X, 1e-12), 1.0, atol=1e-9, rtol=0)

    def test_rbf_rejects_nonpositive_theta(self):
        with pytest.raises(ValueError):
            rbf_gram(np.eye(2), 0.0)

    def test_linear_sparse_and_dense_agree(self, rng):
        X = rng.normal(size=(8, 5))
        np.testing.assert_allclose(linear_gram(sp.csr_matrix(X)), X @ X.T, atol=1e-14)


class TestCircle:
    def test_points_on_unit_circle(self):
        tr, va, te = gen_circle(CircleSpec(n_test=1000))
        for ds in (tr, va, te):
            np.testing.assert_allclose(np.linalg.norm(ds.features, axis=1), 1.0,
                                       atol=1e-12)

    def test_split_sizes_and_balance(self):
        tr, va, te = gen_circle(CircleSpec(n_train=200, n_val=100, n_test=301))
        assert (tr.n, va.n, te.n) == (200, 100, 301)
        np.testing.assert_array_equal(np.bincount(te.labels), [101, 100, 100])
        np.testing.assert_array_equal(np.bincount(tr.labels), [67, 67, 66])

    def test_class3_never_in_zero_weight_segments(self):
        _, _, te = gen_circle(CircleSpec(n_test=20_000))
        seg = te.meta["segment"][te.labels == 2]
        assert not np.isin(seg, [0, 1, 3]).any()

    def test_segment_frequencies_within_3_sigma(self):
        spec = CircleSpec(n_test=200_000, seed=5)
        _, _, te = gen_circle(spec)
        probs = spec.segment_probs
        for c in range(3):
            seg = te.meta["segment"][te.labels == c]
            freq = np.bincount(seg, minlength=5) / seg.size
            sigma = np.sqrt(probs[c] * (1 - probs[c]) / seg.size)
            assert np.all(np.abs(freq - probs[c]) <= 3 * sigma + 1e-15)

    def test_positions_inside_their_segment(self):
        spec = CircleSpec(n_test=5000)
        _, _, te = gen_circle(spec)
        lo, hi = spec.bounds
        seg, pos = te.meta["segment"], te.meta["position"]
        assert np.all((lo[seg] <= pos) & (pos <= hi[seg]))

    def test_same_seed_same_bytes(self, tmp_path):
        for run in ("a", "b"):
            for ds, name in zip(gen_circle(CircleSpec(n_test=500, seed=11)),
                                ("tr", "va", "te")):
                write_libsvm(ds, tmp_path / f"{run}_{name}")
        for name in ("tr", "va", "te"):
            assert (tmp_path / f"a_{name}").read_bytes() == (tmp_path / f"b_{name}").read_bytes()

    def test_different_seed_differs(self):
        a = gen_circle(CircleSpec(n_test=10, seed=1))[0].features
        b = gen_circle(CircleSpec(n_test=10, seed=2))[0].features
        assert not np.array_equal(a, b)

    def test_invalid_weights(self):
        with pytest.raises(ValueError):
            CircleSpec(weights=((0, 0, 0, 0, 0), (1, 0, 0, 0, 0), (0, 1, 0, 0, 0)))

    def test_posterior_by_counting(self):
        # independent check: class-conditional mass per segment by hand
        w = np.array([(0, 1, .4, .3, 0), (1, 0, .1, .7, 0), (0, 0, .5, 0, 1)])
        mass = w / w.sum(axis=1, keepdims=True) / 3
        post = circle_posterior()
        for s in range(5):
            np.testing.assert_allclose(post[s], mass[:, s] / mass[:, s].sum(), atol=1e-15)

    def test_bayes_error_by_enumeration(self):
        w = np.array([(0, 1, .4, .3, 0), (1, 0, .1, .7, 0), (0, 0, .5, 0, 1)])
        mass = w / w.sum(axis=1, keepdims=True) / 3
        for k in (1, 2, 3):
            # best k-subset per segment keeps the k heaviest classes
            kept = sum(max(sum(mass[c, s] for c in subset)
                           for subset in itertools.combinations(range(3), k))
                       for s in range(5))
            assert circle_bayes_topk_error(k) == pytest.approx(1 - kept, abs=1e-15)


class TestFolds:
    def test_leave_one_out(self):
        f = make_folds(7, 7, seed=0)
        assert sorted(f.tolist()) == list(range(7))

    def test_every_class_in_every_fold(self, rng):
        y = np.repeat(np.arange(4), [12, 10, 15, 11])
        f = make_folds(y, 5, seed=3)
        for c in range(4):
            assert set(f[y == c]) == set(range(5))
        counts = np.bincount(f)
        assert counts.max() - counts.min() <= 1

    def test_deterministic(self):
        y = np.arange(30) % 3
        np.testing.assert_array_equal(make_folds(y, 4, 9), make_folds(y, 4, 9))

    def test_small_class_falls_back(self, caplog):
        y = np.array([0] * 10 + [1])
        with caplog.at_level(logging.WARNING):
            f = make_folds(y, 3, 0)
        assert "unstratified" in caplog.text
        assert np.bincount(f).tolist() == [4, 4, 3]

    def test_rejects_one_fold(self):
        with pytest.raises(ValueError):
            make_folds(5, 1)


class TestLargestLabelFilter:
    def test_keeps_known_max(self, rng):
        n, m = 50, 6
        sets, sizes, expected = [], [], []
        for _ in range(n):
            ys = np.sort(rng.choice(m, size=int(rng.integers(1, 4)), replace=False))
            sz = rng.permutation(ys.size) + 1.0
            sets.append(ys)
            sizes.append(sz)
            expected.append(ys[np.argmax(sz)])
        ds = Dataset(np.zeros((n, 1)), sets, [str(c) for c in range(m)], multilabel=True)
        out = largest_label_filter(ds, sizes)
        assert not out.multilabel
        np.testing.assert_array_equal(out.labels, expected)

    def test_ties_go_to_smaller_index(self):
        ds = Dataset(np.zeros((1, 1)), [np.array([1, 3])], ["a", "b", "c", "d"],
                     multilabel=True)
        assert largest_label_filter(ds, [[2.0, 2.0]]).labels.tolist() == [1]

    def test_requires_multilabel(self):
        ds = Dataset(np.zeros((1, 1)), [0], ["a"])
        with pytest.raises(DataError):
            largest_label_filter(ds, [[1.0]])


class TestValidate:
    def test_empty_label_set(self):
        ds = Dataset(np.zeros((1, 1)), [np.array([], dtype=int)], ["a"], multilabel=True)
        with pytest.raises(DataError, match="empty label set"):
            ds.validate()

    def test_non_finite(self):
        with pytest.raises(DataError, match="non-finite"):
            Dataset(np.array([[np.nan]]), [0], ["a"]).validate()
