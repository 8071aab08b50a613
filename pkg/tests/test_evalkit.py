import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from harpipe import datakit, evalkit
from harpipe import model as md
from harpipe.errors import DataError, DimensionError


def per_class_f1_oracle(true, pred, k):
    """Direct enumeration of per-class precision/recall/F1."""
    out = []
    for c in range(k):
        tp = sum(1 for t, p in zip(true, pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(true, pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(true, pred) if t == c and p != c)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        out.append((f1, sum(1 for t in true if t == c)))
    return out


class TestF1:
    def test_perfect_predictions(self):
        y = np.array([0, 1, 2, 1, 0])
        assert evalkit.weighted_f1(y, y, 3) == 1.0
        assert evalkit.macro_f1(y, y, 3) == 1.0

    def test_binary_hand_computed(self):
        # TP=1, FP=1, FN=1, TN=1 for class 1 -> both per-class F1 = 0.5
        true = np.array([1, 0, 1, 0])
        pred = np.array([1, 1, 0, 0])
        assert evalkit.weighted_f1(true, pred, 2) == pytest.approx(0.5)
        assert evalkit.macro_f1(true, pred, 2) == pytest.approx(0.5)

    @given(st.integers(min_value=0, max_value=1000))
    @settings(max_examples=30, deadline=None)
    def test_matches_enumeration_oracle(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 6))
        n = int(rng.integers(5, 60))
        true = rng.integers(0, k, n)
        pred = rng.integers(0, k, n)
        oracle = per_class_f1_oracle(true, pred, k)
        total = sum(s for _, s in oracle)
        expected_w = sum(f * s for f, s in oracle) / total
        present = [f for f, s in oracle if s > 0]
        expected_m = sum(present) / len(present)
        assert evalkit.weighted_f1(true, pred, k) == pytest.approx(expected_w, abs=1e-12)
        assert evalkit.macro_f1(true, pred, k) == pytest.approx(expected_m, abs=1e-12)

    def test_equal_support_weighted_equals_macro(self):
        rng = np.random.default_rng(7)
        true = np.repeat(np.arange(4), 25)
        pred = rng.integers(0, 4, 100)
        assert evalkit.weighted_f1(true, pred, 4) == pytest.approx(
            evalkit.macro_f1(true, pred, 4), abs=1e-12)

    def test_absent_class_excluded_from_macro(self):
        true = np.array([0, 0, 1, 1])
        pred = np.array([0, 0, 1, 2])  # class 2 predicted but never true
        oracle = per_class_f1_oracle(true, pred, 3)
        expected = (oracle[0][0] + oracle[1][0]) / 2
        assert evalkit.macro_f1(true, pred, 3) == pytest.approx(expected, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            evalkit.weighted_f1(np.array([0, 1]), np.array([0]), 2)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(8)
        true = rng.integers(0, 3, 40)
        pred = rng.integers(0, 3, 40)
        perm = rng.permutation(40)
        assert evalkit.weighted_f1(true, pred, 3) == pytest.approx(
            evalkit.weighted_f1(true[perm], pred[perm], 3), abs=1e-12)


class TestKappa:
    def test_perfect(self):
        y = np.array([0, 1, 2, 0])
        assert evalkit.cohens_kappa(y, y, 3) == pytest.approx(1.0)

    def test_independent_balanced_near_zero(self):
        rng = np.random.default_rng(9)
        true = rng.integers(0, 2, 20000)
        pred = rng.integers(0, 2, 20000)
        assert abs(evalkit.cohens_kappa(true, pred, 2)) < 0.03

    @given(st.integers(min_value=0, max_value=500))
    @settings(max_examples=25, deadline=None)
    def test_formula_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 50))
        true = rng.integers(0, 3, n)
        pred = rng.integers(0, 3, n)
        counts = evalkit.confusion_matrix(true, pred, 3)
        p_o = np.trace(counts) / n
        p_e = float((counts.sum(1) * counts.sum(0)).sum()) / n ** 2
        if p_e == 1.0:
            assert evalkit.cohens_kappa(true, pred, 3) == 0.0
        else:
            assert evalkit.cohens_kappa(true, pred, 3) == pytest.approx(
                (p_o - p_e) / (1 - p_e), abs=1e-12)

    def test_one_iff_diagonal(self):
        diag = evalkit.cohens_kappa(np.array([0, 1, 0, 1]), np.array([0, 1, 0, 1]), 2)
        assert diag == pytest.approx(1.0)
        off = evalkit.cohens_kappa(np.array([0, 1, 0, 1]), np.array([0, 1, 1, 1]), 2)
        assert off < 1.0

    def test_degenerate_agreement_returns_zero(self):
        y = np.zeros(5, dtype=int)
        assert evalkit.cohens_kappa(y, y, 2) == 0.0


class TestBootstrap:
    def test_all_correct_degenerate_interval(self):
        y = np.arange(3).repeat(10)
        lo, hi = evalkit.bootstrap_ci(y, y, lambda t, p: evalkit.weighted_f1(t, p, 3),
                                      n_resamples=200, seed=0)
        assert (lo, hi) == (1.0, 1.0)

    def test_same_seed_identical(self):
        rng = np.random.default_rng(10)
        true = rng.integers(0, 3, 50)
        pred = rng.integers(0, 3, 50)
        metric = lambda t, p: evalkit.weighted_f1(t, p, 3)
        a = evalkit.bootstrap_ci(true, pred, metric, n_resamples=100, seed=4)
        b = evalkit.bootstrap_ci(true, pred, metric, n_resamples=100, seed=4)
        assert a == b

    def test_matches_independent_percentile_recheck(self):
        # replay the per-resample index streams and recompute the percentile
        # endpoints with the hand-written linear-interpolation definition
        rng = np.random.default_rng(11)
        true = rng.integers(0, 2, 20)
        pred = rng.integers(0, 2, 20)
        metric = lambda t, p: evalkit.weighted_f1(t, p, 2)
        n_resamples, seed = 50, 6
        lo, hi = evalkit.bootstrap_ci(true, pred, metric,
                                      n_resamples=n_resamples, seed=seed)

        values = []
        for i in range(n_resamples):
            stream = np.random.default_rng([seed, i])
            idx = stream.integers(0, 20, size=20)
            values.append(metric(true[idx], pred[idx]))
        values = np.sort(values)

        def percentile(sorted_vals, q):
            pos = q / 100.0 * (len(sorted_vals) - 1)
            low = int(np.floor(pos))
            high = min(low + 1, len(sorted_vals) - 1)
            return sorted_vals[low] + (pos - low) * (sorted_vals[high] - sorted_vals[low])

        assert lo == pytest.approx(percentile(values, 2.5), abs=1e-12)
        assert hi == pytest.approx(percentile(values, 97.5), abs=1e-12)

    def test_interval_contains_point_estimate(self):
        for seed in range(5):
            rng = np.random.default_rng(100 + seed)
            true = rng.integers(0, 3, 150)
            pred = np.where(rng.random(150) < 0.7, true, rng.integers(0, 3, 150))
            point = evalkit.weighted_f1(true, pred, 3)
            lo, hi = evalkit.bootstrap_ci(
                true, pred, lambda t, p: evalkit.weighted_f1(t, p, 3),
                n_resamples=300, seed=seed)
            assert lo - 1e-9 <= point <= hi + 1e-9

    def test_empty_input_rejected(self):
        with pytest.raises(DataError):
            evalkit.bootstrap_ci(np.array([]), np.array([]), lambda t, p: 0.0)


class TestDeltaConfusion:
    def test_equal_matrices_zero(self):
        a = np.array([[3, 1], [0, 2]])
        assert np.array_equal(evalkit.delta_confusion(a, a), np.zeros((2, 2)))

    def test_antisymmetric(self):
        a = np.array([[3, 1], [0, 2]])
        b = np.array([[2, 2], [1, 1]])
        assert np.array_equal(evalkit.delta_confusion(a, b),
                              -evalkit.delta_confusion(b, a))

    def test_row_sum_linearity_and_spot_value(self):
        a = np.array([[5, 0, 1], [2, 3, 0], [0, 0, 4]])
        b = np.array([[4, 1, 1], [0, 5, 0], [1, 0, 3]])
        delta = evalkit.delta_confusion(a, b)
        assert np.array_equal(delta.sum(axis=1), a.sum(axis=1) - b.sum(axis=1))
        assert delta[1, 0] == 2


class TestReports:
    def test_report_schema(self):
        rng = np.random.default_rng(12)
        true = rng.integers(0, 3, 40)
        pred = rng.integers(0, 3, 40)
        report = evalkit.evaluate_predictions(true, pred, 3, n_resamples=50, seed=1)
        data = report.to_dict()
        for metric in ("weighted_f1", "macro_f1", "kappa"):
            entry = data[metric]
            assert set(entry) == {"point", "ci_lo", "ci_hi"}
        assert np.array(data["confusion"]).shape == (3, 3)
        assert data["n_test"] == 40
        assert data["n_resamples"] == 50

    def test_confusion_total_equals_n(self):
        rng = np.random.default_rng(13)
        true = rng.integers(0, 4, 33)
        pred = rng.integers(0, 4, 33)
        assert evalkit.confusion_matrix(true, pred, 4).sum() == 33


def tiny_labeled_dataset(n, classes=3, seed=0, steps=60):
    rng = np.random.default_rng(seed)
    return datakit.Dataset(
        values=rng.normal(size=(n, steps, 3)),
        user_ids=np.array([f"u{i % 3}" for i in range(n)], dtype=object),
        labels=(np.arange(n) % classes).astype(np.int64),
        label_vocabulary=[f"a{c}" for c in range(classes)],
    )


class TestLinearEvaluate:
    def test_core_frozen_head_trained(self):
        from harpipe import pipeline

        arch = md.Architecture(conv_filters=(4, 5, 6), conv_kernels=(7, 5, 3),
                               har_hidden=8, td_hidden=6)
        core = md.build_har_model(3, seed=0, arch=arch)
        core_before = {n: core.tensors[n].copy() for n in md.core_tensor_names(core)}
        train = tiny_labeled_dataset(24, seed=1)
        val = tiny_labeled_dataset(9, seed=2)
        test = tiny_labeled_dataset(9, seed=3)
        schedule = pipeline.TrainingSchedule(finetune_epochs=2, batch_size=8)
        report, params, history = evalkit.linear_evaluate(core, train, val, test,
                                                          schedule=schedule,
                                                          n_resamples=20)
        for name in md.core_tensor_names(params):
            assert np.array_equal(params.tensors[name], core_before[name])
        init = md.build_linear_model(core, 3, seed=0)
        assert not np.array_equal(params.tensors["linear/W"], init.tensors["linear/W"])
        assert 0.0 <= report.weighted_f1 <= 1.0


class TestEmbeddings:
    def test_export_shape_and_determinism(self, tmp_path):
        params = md.build_har_model(3, seed=0)
        ds = tiny_labeled_dataset(5, steps=400)
        a = tmp_path / "emb_a.csv"
        b = tmp_path / "emb_b.csv"
        evalkit.export_embeddings(params, ds, a)
        evalkit.export_embeddings(params, ds, b)
        lines = a.read_text().splitlines()
        assert len(lines) == 6  # header + one row per window
        header = lines[0].split(",")
        assert len(header) == 2 + 96
        assert a.read_bytes() == b.read_bytes()
