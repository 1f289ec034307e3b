import numpy as np
import pytest
import torch

from onetok.errors import DegenerateNumericsError
from onetok.metrics import (
    GaussianStats,
    MetricRow,
    frechet_distance,
    gaussian_stats,
    matrix_sqrt_psd,
    psnr,
    ssim,
    write_metrics_csv,
)


class TestPsnr:
    def test_identical_batches_hit_the_cap(self):
        x = torch.randn(2, 1, 8, 8).clamp(-1, 1)
        assert psnr(x, x.clone()) == 100.0

    def test_known_mse(self):
        # unit-scale difference of 0.1 everywhere -> MSE 0.01 -> 20 dB
        a = torch.full((1, 1, 4, 4), -1.0, dtype=torch.float64)
        b = torch.full((1, 1, 4, 4), -0.8, dtype=torch.float64)
        assert psnr(a, b) == pytest.approx(20.0, rel=1e-9)

    def test_full_range_error_is_zero_db(self):
        a = torch.full((1, 1, 4, 4), -1.0)
        b = torch.full((1, 1, 4, 4), 1.0)
        assert psnr(a, b) == pytest.approx(0.0, abs=1e-9)

    def test_strictly_decreasing_under_growing_noise(self):
        g = torch.Generator().manual_seed(0)
        x = torch.rand(4, 1, 16, 16, generator=g) * 2 - 1
        noise = torch.randn(x.shape, generator=g)
        values = [psnr(x, (x + s * noise).clamp(-1, 1)) for s in (0.01, 0.05, 0.1)]
        assert values[0] > values[1] > values[2]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))


class TestSsim:
    def test_identical_is_exactly_one(self):
        x = torch.rand(2, 1, 9, 9, generator=torch.Generator().manual_seed(1)) * 2 - 1
        assert ssim(x, x.clone()) == 1.0

    def test_negative_image_below_one(self):
        x = torch.rand(1, 1, 12, 12, generator=torch.Generator().manual_seed(2)) * 2 - 1
        assert ssim(x, -x) < 1.0

    def test_symmetric(self):
        g = torch.Generator().manual_seed(3)
        a = torch.rand(1, 1, 10, 10, generator=g) * 2 - 1
        b = torch.rand(1, 1, 10, 10, generator=g) * 2 - 1
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_too_small(self):
        with pytest.raises(ValueError, match="window"):
            ssim(torch.zeros(1, 1, 6, 6), torch.zeros(1, 1, 6, 6))

    def test_single_window_scalar_oracle(self):
        g = torch.Generator().manual_seed(4)
        a = torch.rand(1, 1, 7, 7, generator=g, dtype=torch.float64) * 2 - 1
        b = torch.rand(1, 1, 7, 7, generator=g, dtype=torch.float64) * 2 - 1
        # independent scalar computation on the single 7x7 window
        x = ((a + 1) / 2).numpy().reshape(-1)
        y = ((b + 1) / 2).numpy().reshape(-1)
        mx, my = x.mean(), y.mean()
        vx, vy = ((x - mx) ** 2).mean(), ((y - my) ** 2).mean()
        cxy = ((x - mx) * (y - my)).mean()
        c1, c2 = 0.01**2, 0.03**2
        expected = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
        assert ssim(a, b) == pytest.approx(expected, abs=1e-6)


class TestGaussianStats:
    def test_two_point_hand_computation(self):
        stats = gaussian_stats(np.array([[0.0, 0.0], [2.0, 2.0]]))
        assert np.allclose(stats.mu, [1.0, 1.0])
        assert np.allclose(stats.sigma, [[2.0, 2.0], [2.0, 2.0]])
        assert stats.n == 2

    def test_constant_rows(self):
        stats = gaussian_stats(np.ones((5, 3)))
        assert np.allclose(stats.sigma, 0.0)

    def test_standard_normal_monte_carlo(self):
        rng = np.random.RandomState(0)
        stats = gaussian_stats(rng.randn(1000, 4))
        assert np.abs(stats.sigma - np.eye(4)).max() < 0.15

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            gaussian_stats(np.ones((1, 3)))

    def test_accepts_torch(self):
        stats = gaussian_stats(torch.tensor([[0.0, 0.0], [2.0, 2.0]]))
        assert np.allclose(stats.mu, [1.0, 1.0])


class TestMatrixSqrt:
    def test_identity(self):
        assert np.allclose(matrix_sqrt_psd(np.eye(3)), np.eye(3))

    def test_diagonal(self):
        assert np.allclose(matrix_sqrt_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))

    def test_defining_property_random_spd(self):
        rng = np.random.RandomState(1)
        for d in (4, 32, 128):
            a = rng.randn(d, d)
            spd = a @ a.T + 0.1 * np.eye(d)
            root = matrix_sqrt_psd(spd)
            rel = np.linalg.norm(root @ root - spd) / np.linalg.norm(spd)
            assert rel < 1e-5, f"d={d}: relative Frobenius error {rel}"

    def test_negative_eigenvalue_rejected(self):
        with pytest.raises(DegenerateNumericsError):
            matrix_sqrt_psd(np.diag([1.0, -0.5]))

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError, match="symmetric"):
            matrix_sqrt_psd(np.array([[1.0, 0.5], [0.0, 1.0]]))


class TestFrechet:
    def test_identical_stats_near_zero(self):
        rng = np.random.RandomState(2)
        stats = gaussian_stats(rng.randn(64, 8))
        assert frechet_distance(stats, stats) < 1e-6

    def test_identity_covariance_mean_term_only(self):
        p = GaussianStats(mu=np.zeros(2), sigma=np.eye(2), n=10)
        q = GaussianStats(mu=np.array([3.0, 4.0]), sigma=np.eye(2), n=10)
        assert frechet_distance(p, q) == pytest.approx(25.0, abs=1e-9)

    def test_one_dimensional_closed_form(self):
        p = GaussianStats(mu=np.zeros(1), sigma=np.array([[1.0]]), n=10)
        q = GaussianStats(mu=np.zeros(1), sigma=np.array([[4.0]]), n=10)
        assert frechet_distance(p, q) == pytest.approx(1.0, abs=1e-9)

    def test_symmetric_in_arguments(self):
        rng = np.random.RandomState(3)
        p = gaussian_stats(rng.randn(50, 6))
        q = gaussian_stats(rng.randn(50, 6) * 2 + 1)
        assert frechet_distance(p, q) == pytest.approx(frechet_distance(q, p), abs=1e-6)

    def test_dim_mismatch(self):
        p = GaussianStats(mu=np.zeros(2), sigma=np.eye(2), n=5)
        q = GaussianStats(mu=np.zeros(3), sigma=np.eye(3), n=5)
        with pytest.raises(ValueError):
            frechet_distance(p, q)


class TestMetricCsv:
    def test_exact_schema(self, tmp_path):
        path = tmp_path / "m.csv"
        write_metrics_csv(path, [MetricRow(5, "psnr", 12.25, "heldout")])
        text = path.read_bytes().decode("utf-8")
        assert text == "step,metric,value,split\n5,psnr,12.25,heldout\n"
