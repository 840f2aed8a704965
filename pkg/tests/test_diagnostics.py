import math

import numpy as np
import pytest
import torch

from selfalign.diagnostics import (
    ProbeCell,
    ProbeConfig,
    ProbeReport,
    covariance_sqrt_product,
    extract_features,
    frechet_gaussian_distance,
    frechet_proxy,
    gaussian_stats,
    linear_probe,
    pca_project,
    probe_grid,
    random_projection,
)
from selfalign.rng import make_generator


class TestFrechet:
    def test_identical_sets_zero(self):
        g = torch.Generator().manual_seed(0)
        a = torch.randn(300, 8, generator=g, dtype=torch.float64)
        assert frechet_gaussian_distance(a, a.clone()) <= 1e-8

    def test_mean_shift_returns_squared_norm(self):
        g = torch.Generator().manual_seed(1)
        a = torch.randn(400, 6, generator=g, dtype=torch.float64)
        shift = torch.zeros(6, dtype=torch.float64)
        shift[0], shift[1] = 3.0 * math.cos(0.7), 3.0 * math.sin(0.7)  # norm exactly 3
        b = a + shift
        assert frechet_gaussian_distance(a, b) == pytest.approx(9.0, abs=1e-8)

    def test_one_dimensional_matches_scalar_closed_form(self):
        g = torch.Generator().manual_seed(2)
        a = (torch.randn(500, 1, generator=g, dtype=torch.float64) * 1.7 + 0.3)
        b = (torch.randn(400, 1, generator=g, dtype=torch.float64) * 0.6 - 1.1)
        sa = float(a.std(unbiased=True))
        sb = float(b.std(unbiased=True))
        oracle = (float(a.mean()) - float(b.mean())) ** 2 + (sa - sb) ** 2
        assert frechet_gaussian_distance(a, b) == pytest.approx(oracle, abs=1e-8)

    def test_symmetry(self):
        g = torch.Generator().manual_seed(3)
        a = torch.randn(300, 5, generator=g, dtype=torch.float64)
        b = torch.randn(280, 5, generator=g, dtype=torch.float64) * 1.4 + 0.2
        assert frechet_gaussian_distance(a, b) == pytest.approx(
            frechet_gaussian_distance(b, a), abs=1e-8
        )

    def test_nonnegative_and_dim_check(self):
        g = torch.Generator().manual_seed(4)
        a = torch.randn(50, 3, generator=g, dtype=torch.float64)
        b = torch.randn(50, 3, generator=g, dtype=torch.float64)
        assert frechet_gaussian_distance(a, b) >= 0.0
        with pytest.raises(ValueError, match="dims differ"):
            frechet_gaussian_distance(a, torch.randn(50, 4, dtype=torch.float64))

    def test_matrix_sqrt_squares_back(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            m1 = rng.normal(size=(6, 6))
            m2 = rng.normal(size=(6, 6))
            cov_a = m1 @ m1.T + 0.1 * np.eye(6)
            cov_b = m2 @ m2.T + 0.1 * np.eye(6)
            root = covariance_sqrt_product(cov_a, cov_b)
            product = cov_a @ cov_b
            rel = np.linalg.norm(root @ root - product) / np.linalg.norm(product)
            assert rel < 1e-6

    def test_stats_require_enough_samples(self):
        with pytest.raises(ValueError, match="num >= 2"):
            gaussian_stats(torch.zeros(1, 4))


class TestPca:
    def test_rank_one_explains_everything(self):
        g = torch.Generator().manual_seed(6)
        direction = torch.randn(10, generator=g, dtype=torch.float64)
        coeffs = torch.randn(50, 1, generator=g, dtype=torch.float64)
        data = coeffs @ direction.reshape(1, -1)
        _, _, ratios = pca_project(data, 1)
        assert float(ratios[0]) == pytest.approx(1.0, abs=1e-10)

    def test_isotropic_two_dims(self):
        g = torch.Generator().manual_seed(7)
        data = torch.randn(20_000, 2, generator=g, dtype=torch.float64)
        _, _, ratios = pca_project(data, 2)
        assert float(ratios[0]) == pytest.approx(0.5, abs=0.02)
        assert float(ratios[1]) == pytest.approx(0.5, abs=0.02)
        assert float(ratios.sum()) == pytest.approx(1.0, abs=1e-10)

    def test_matches_eigendecomposition_oracle_up_to_sign(self):
        g = torch.Generator().manual_seed(8)
        data = torch.randn(5, 10, generator=g, dtype=torch.float64)
        k = 3
        comps, projected, ratios = pca_project(data, k)
        centered = (data - data.mean(0)).numpy()
        evals, evecs = np.linalg.eigh(centered.T @ centered)
        order = np.argsort(evals)[::-1]
        for i in range(k):
            oracle_dir = evecs[:, order[i]]
            dot = abs(float(np.dot(comps[i].numpy(), oracle_dir)))
            assert dot == pytest.approx(1.0, abs=1e-8)
        oracle_ratios = evals[order][:k] / evals.sum()
        assert np.allclose(ratios.numpy(), oracle_ratios, atol=1e-10)

    def test_ratios_nonincreasing_and_reconstruction(self):
        g = torch.Generator().manual_seed(9)
        basis = torch.randn(3, 12, generator=g, dtype=torch.float64)
        coeffs = torch.randn(40, 3, generator=g, dtype=torch.float64)
        data = coeffs @ basis  # exact rank 3
        comps, projected, ratios = pca_project(data, 3)
        assert bool((ratios[1:] <= ratios[:-1] + 1e-12).all())
        recon = projected @ comps
        centered = (data - data.mean(0)).double()
        assert float((recon - centered).abs().max()) < 1e-8

    def test_k_out_of_range(self):
        with pytest.raises(ValueError, match="outside"):
            pca_project(torch.zeros(5, 4, dtype=torch.float64), 5)


class TestLinearProbe:
    def test_separable_features_reach_high_accuracy(self):
        labels = torch.arange(400) % 4
        features = torch.nn.functional.one_hot(labels, 4).float() * 3.0
        acc = linear_probe(features, labels, ProbeConfig(epochs=20), make_generator(0, "p"))
        assert acc >= 0.99

    def test_noise_features_sit_at_chance(self):
        accs = []
        for seed in range(5):
            g = make_generator(seed, "noise")
            features = torch.randn(1000, 16, generator=g)
            labels = torch.arange(1000) % 4
            accs.append(linear_probe(features, labels, ProbeConfig(epochs=5), make_generator(seed, "p")))
        mean_acc = sum(accs) / len(accs)
        assert 0.15 <= mean_acc <= 0.35

    def test_duplicated_dimensions_leave_accuracy_unchanged(self):
        g = torch.Generator().manual_seed(10)
        labels = torch.arange(240) % 3
        centers = torch.randn(3, 6, generator=g) * 2.0
        features = centers[labels] + 0.8 * torch.randn(240, 6, generator=g)
        cfg = ProbeConfig(epochs=60, batch_size=64)
        acc_orig = linear_probe(features, labels, cfg, make_generator(3, "p"))
        acc_dup = linear_probe(torch.cat([features, features], dim=1), labels, cfg, make_generator(3, "p"))
        assert acc_dup == pytest.approx(acc_orig, abs=1e-12)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="two classes"):
            linear_probe(torch.randn(10, 4), torch.zeros(10, dtype=torch.long),
                         ProbeConfig(), make_generator(0, "p"))

    def test_deterministic_given_generator(self):
        g = torch.Generator().manual_seed(11)
        features = torch.randn(200, 8, generator=g)
        labels = torch.arange(200) % 2
        a = linear_probe(features, labels, ProbeConfig(epochs=3), make_generator(4, "p"))
        b = linear_probe(features, labels, ProbeConfig(epochs=3), make_generator(4, "p"))
        assert a == b


class TestExtractFeatures:
    class _ConstantTap:
        """Duck-typed model whose tap is a constant token field."""

        class _Cfg:
            null_class_id = 2

        config = _Cfg()

        def __init__(self, value):
            self.value = value

        def parameters(self):
            yield torch.zeros(1)

        def forward_with_taps(self, x, t, ids, tap_layers=(), stop_after_layer=None, tap_point="post_block"):
            b = x.shape[0]
            tap = torch.full((b, 7, 3), self.value)
            return None, {tap_layers[0]: tap}

    def test_constant_tap_gives_constant_features(self):
        model = self._ConstantTap(0.625)
        images = torch.randn(9, 1, 4, 4, generator=torch.Generator().manual_seed(0))
        feats = extract_features(model, images, 1, 0.5, lambda x0, e, t: x0, make_generator(0, "f"), batch_size=4)
        assert feats.shape == (9, 3)
        assert bool((feats == 0.625).all())

    def test_real_model_shapes_and_determinism(self):
        from selfalign.backbone import ModelConfig, build_model
        from selfalign.process import interpolant_sample, make_interpolant

        cfg = ModelConfig(input_height=8, input_width=8, depth=2, hidden_dim=16, num_heads=2, num_classes=2)
        model = build_model(cfg, seed=1)
        interp = make_interpolant("linear")
        noiser = lambda x0, e, t: interpolant_sample(interp, x0, e, t)
        images = torch.randn(10, 1, 8, 8, generator=torch.Generator().manual_seed(1))
        a = extract_features(model, images, 2, 0.25, noiser, make_generator(5, "f"))
        b = extract_features(model, images, 2, 0.25, noiser, make_generator(5, "f"))
        assert a.shape == (10, 16)
        assert torch.equal(a, b)


class TestProxyAndReport:
    def test_frechet_proxy_zero_on_identical(self):
        g = torch.Generator().manual_seed(12)
        imgs = torch.randn(300, 1, 8, 8, generator=g)
        scores = frechet_proxy(imgs, imgs.clone())
        assert set(scores) == {"pixel", "projected"}
        assert scores["pixel"] <= 1e-6 and scores["projected"] <= 1e-6

    def test_random_projection_fixed_by_seed(self):
        g = torch.Generator().manual_seed(13)
        flat = torch.randn(20, 32, generator=g)
        assert torch.equal(random_projection(flat, 8, seed=3), random_projection(flat, 8, seed=3))
        assert not torch.equal(random_projection(flat, 8, seed=3), random_projection(flat, 8, seed=4))

    def test_report_csv_round_trip(self, tmp_path):
        report = ProbeReport([
            ProbeCell("student", 2, 0.25, 0.8125),
            ProbeCell("teacher", 4, 0.25, 0.90625),
        ])
        path = tmp_path / "r.csv"
        report.to_csv(path)
        again = ProbeReport.from_csv(path)
        assert again.accuracy("student", 2, 0.25) == 0.8125
        assert again.accuracy("teacher", 4, 0.25) == 0.90625
        with pytest.raises(KeyError):
            again.accuracy("student", 9, 0.25)

    def test_probe_grid_over_small_model(self):
        from selfalign.backbone import ModelConfig, build_model
        from selfalign.process import interpolant_sample, make_interpolant

        cfg = ModelConfig(input_height=8, input_width=8, depth=2, hidden_dim=16, num_heads=2, num_classes=2)
        model = build_model(cfg, seed=2)
        interp = make_interpolant("linear")
        noiser = lambda x0, e, t: interpolant_sample(interp, x0, e, t)
        images = torch.randn(60, 1, 8, 8, generator=torch.Generator().manual_seed(3))
        labels = torch.arange(60) % 2
        report, pca = probe_grid(
            {"student": model}, images, labels, (1, 2), (0.25,), noiser,
            ProbeConfig(epochs=2), seed=0, collect_pca=2,
        )
        assert len(report.cells) == 2
        assert {c.layer for c in report.cells} == {1, 2}
        assert "student.layer1.t0.25.components" in pca
        assert all(0.0 <= c.accuracy <= 1.0 for c in report.cells)

    def test_empty_layer_set_gives_empty_report(self):
        report, pca = probe_grid({}, torch.zeros(4, 1, 8, 8), torch.zeros(4, dtype=torch.long),
                                 (), (), lambda x0, e, t: x0, ProbeConfig(epochs=1), seed=0)
        assert report.cells == [] and pca == {}
