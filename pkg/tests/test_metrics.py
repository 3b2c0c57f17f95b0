import json
import math

import numpy as np
import pytest

from flowgen.metrics import (EvalReport, MetricsError, compare, evaluate,
                             median_heuristic_bandwidths, mmd_per_region,
                             point_metrics, region_vectors, smape)

MMD_HAND_VALUE = math.exp(-0.5) - 1.0  # {0,1} vs {0,1}, sigma=1


def brute_force_mmd(gen, real, sigmas):
    total = 0.0
    n, m = len(gen), len(real)
    for sigma in sigmas:
        k = lambda x, y: math.exp(-float(np.sum((x - y) ** 2)) / (2 * sigma ** 2))
        t1 = sum(k(gen[i], gen[j]) for i in range(n) for j in range(n) if j != i)
        t2 = sum(k(gen[i], real[j]) for i in range(n) for j in range(m))
        t3 = sum(k(real[i], real[j]) for i in range(m) for j in range(m) if j != i)
        total += t1 / (n * (n - 1)) - 2.0 * t2 / (m * n) + t3 / (m * (m - 1))
    return total


class TestPointMetrics:
    def test_hand_example(self):
        gen = np.array([[2.0, 4.0]])
        real = np.array([[1.0, 5.0]])
        mae, rmse, _ = point_metrics(gen, real)
        assert mae == pytest.approx(1.0)
        assert rmse == pytest.approx(1.0)

    def test_identical_means_zero(self, rng):
        data = rng.normal(size=(5, 3, 4))
        mae, rmse, sm = point_metrics(data, data.copy())
        assert (mae, rmse, sm) == (0.0, 0.0, 0.0)

    def test_smape_single_element(self):
        assert smape(np.array([1.0]), np.array([3.0])) == pytest.approx(1.0, rel=1e-6)

    def test_smape_range(self, rng):
        a, b = np.abs(rng.normal(size=50)), np.abs(rng.normal(size=50))
        assert 0.0 <= smape(a, b) <= 2.0

    def test_scalar_loop_oracle(self, rng):
        gen = rng.normal(size=(4, 2, 3))
        real = rng.normal(size=(6, 2, 3))
        mae, rmse, sm = point_metrics(gen, real)
        g, r = gen.mean(axis=0).ravel(), real.mean(axis=0).ravel()
        mae_o = np.mean([abs(x - y) for x, y in zip(g, r)])
        rmse_o = math.sqrt(np.mean([(x - y) ** 2 for x, y in zip(g, r)]))
        sm_o = np.mean([2 * abs(x - y) / (abs(x) + abs(y) + 1e-8)
                        for x, y in zip(g, r)])
        assert mae == pytest.approx(mae_o, abs=1e-12)
        assert rmse == pytest.approx(rmse_o, abs=1e-12)
        assert sm == pytest.approx(sm_o, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(MetricsError):
            point_metrics(np.zeros((2, 3)), np.zeros((2, 4)))

    def test_empty_rejected(self):
        with pytest.raises(MetricsError):
            point_metrics(np.zeros((0, 3)), np.zeros((2, 3)))

    def test_sample_order_invariant(self, rng):
        gen = rng.normal(size=(5, 4))
        real = rng.normal(size=(7, 4))
        shuffled = gen[rng.permutation(5)]
        assert point_metrics(gen, real) == point_metrics(shuffled, real)


class TestMMD:
    def test_hand_derived_value(self):
        gen = np.array([[0.0], [1.0]])
        real = np.array([[0.0], [1.0]])
        value = mmd_per_region(gen, real, bandwidths=[1.0])
        assert value == pytest.approx(MMD_HAND_VALUE, abs=5e-5)
        assert value == pytest.approx(-0.3935, abs=5e-5)

    def test_far_clusters_positive(self):
        gen = np.full((4, 2), 0.0)
        real = np.full((4, 2), 100.0)
        value = mmd_per_region(gen, real, bandwidths=[1.0])
        assert value == pytest.approx(2.0, rel=1e-6)  # term1 + term3, cross term gone

    def test_self_mmd_nonpositive(self, rng):
        data = rng.normal(size=(10, 3))
        assert mmd_per_region(data, data.copy(), bandwidths=[1.0]) <= 0.0

    def test_symmetry(self, rng):
        a = rng.normal(size=(6, 2))
        b = rng.normal(size=(9, 2)) + 0.5
        bw = [0.7, 1.3]
        assert mmd_per_region(a, b, bw) == pytest.approx(
            mmd_per_region(b, a, bw), rel=1e-12)

    def test_same_distribution_small(self):
        rng = np.random.default_rng(42)
        a = rng.normal(size=(200, 4))
        b = rng.normal(size=(200, 4))
        bw = median_heuristic_bandwidths(a, b, num=1)
        assert abs(mmd_per_region(a, b, bw)) < 0.05

    def test_brute_force_oracle(self, rng):
        for _ in range(5):
            gen = rng.normal(size=(4, 3))
            real = rng.normal(size=(5, 3))
            bw = [0.5, 1.0, 2.0]
            assert mmd_per_region(gen, real, bw) == pytest.approx(
                brute_force_mmd(gen, real, bw), abs=1e-9)

    def test_too_few_samples(self):
        with pytest.raises(MetricsError):
            mmd_per_region(np.zeros((1, 2)), np.zeros((5, 2)), [1.0])
        with pytest.raises(MetricsError):
            mmd_per_region(np.zeros((5, 2)), np.zeros((1, 2)), [1.0])

    def test_bandwidth_list_geometric(self, rng):
        a, b = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
        bw = median_heuristic_bandwidths(a, b, num=5, factor=2.0)
        assert len(bw) == 5
        ratios = [bw[i + 1] / bw[i] for i in range(4)]
        assert np.allclose(ratios, 2.0)


class TestRegionVectors:
    def test_layout(self, rng):
        samples = rng.normal(size=(3, 2, 4, 2))
        vecs = region_vectors(samples)
        assert vecs.shape == (2, 3, 8)
        assert np.array_equal(vecs[1, 2], samples[2, 1].ravel())


class TestCompareAndEvaluate:
    def test_identical_data_report(self, rng):
        data = np.abs(rng.normal(size=(6, 3, 5, 1)))
        report = compare(data, data.copy(), ["a", "b", "c"])
        assert report.mae == 0.0 and report.rmse == 0.0 and report.smape == 0.0
        assert report.mmd <= 0.0
        assert all(row["mmd"] <= 0.0 for row in report.per_region)

    def test_empty_split_rejected(self, rng):
        data = rng.normal(size=(3, 0, 5, 1))
        with pytest.raises(MetricsError, match="empty test split"):
            compare(data, data.copy(), [])

    def test_mismatched_regions_rejected(self, rng):
        with pytest.raises(MetricsError):
            compare(rng.normal(size=(3, 2, 4, 1)), rng.normal(size=(3, 3, 4, 1)),
                    ["a", "b"])

    def test_evaluate_writes_reports(self, tmp_path, rng):
        from flowgen.data import make_synthetic
        from flowgen.diffusion import save_samples

        city = make_synthetic(num_regions=6, num_days=6, seed=2)
        dataset = city.dataset()
        rows = dataset.rows_for(dataset.test_ids)
        fake = dataset.flow[:, rows] * rng.uniform(0.9, 1.1, size=(6, 1, 1, 1))
        save_samples(tmp_path / "samples.npz", fake,
                     {"seed": 0, "region_ids": dataset.test_ids})
        report = evaluate(tmp_path, dataset)
        payload = json.loads((tmp_path / "metrics.json").read_text())
        assert payload["mae"] == pytest.approx(report.mae)
        table = (tmp_path / "per_region.csv").read_text().strip().splitlines()
        assert table[0] == "region_id,mae,rmse,smape,mmd"
        assert len(table) == 1 + len(dataset.test_ids)

    def test_evaluate_requires_samples(self, tmp_path):
        from flowgen.data import make_synthetic

        dataset = make_synthetic(num_regions=4, num_days=4, seed=1).dataset()
        with pytest.raises(MetricsError, match="samples not found"):
            evaluate(tmp_path, dataset)

    def test_evaluate_unknown_region_listed(self, tmp_path, rng):
        from flowgen.data import make_synthetic
        from flowgen.diffusion import save_samples

        dataset = make_synthetic(num_regions=4, num_days=4, seed=1).dataset()
        fake = rng.normal(size=(4, 1, 24, 1))
        save_samples(tmp_path / "samples.npz", fake,
                     {"seed": 0, "region_ids": ["RXX"]})
        with pytest.raises(MetricsError, match="RXX"):
            evaluate(tmp_path, dataset)

    def test_plot_emitter_writes_png(self, tmp_path, rng):
        from flowgen.metrics import plot_region_curves

        generated = np.abs(rng.normal(size=(3, 5, 24, 1)))
        real = np.abs(rng.normal(size=(4, 5, 24, 1)))
        path = tmp_path / "curves.png"
        plot_region_curves(generated, real, [f"R{k}" for k in range(5)], path)
        assert path.exists() and path.stat().st_size > 0
