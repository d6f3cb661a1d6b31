import numpy as np
import pytest
from scipy.special import logsumexp

from flowreg import (
    ConfigurationError,
    get_target,
    ground_truth,
    make_gaussian,
    make_lumpy,
    make_mixture5,
    make_rosenbrock_gaussian,
    wrap_noisy,
)
from flowreg.targets import (
    _ridge,
    _sample_ridge_block,
    _rosenbrock_gaussian_logp,
    rosenbrock_gaussian_block_log_norms,
)


class TestRosenbrockGaussian:
    def test_density_factorizes_over_blocks(self):
        rng = np.random.default_rng(0)
        x = rng.normal(0, 2, (20, 6))
        total = _rosenbrock_gaussian_logp(x)
        block_a = _ridge(x[:, 0], x[:, 1]) - 0.5 * np.sum(x[:, :2] ** 2, axis=1) / 9 \
            - np.log(2 * np.pi * 9)
        block_b = _ridge(x[:, 2], x[:, 3]) - 0.5 * np.sum(x[:, 2:4] ** 2, axis=1) / 9 \
            - np.log(2 * np.pi * 9)
        block_c = (-0.5 * np.sum(x[:, 4:] ** 2, axis=1) - np.log(2 * np.pi)
                   - 0.5 * np.sum(x[:, 4:] ** 2, axis=1) / 9 - np.log(2 * np.pi * 9))
        assert np.allclose(total, block_a + block_b + block_c, atol=1e-12)

    def test_quadrature_converged_between_refinements(self):
        coarse = rosenbrock_gaussian_block_log_norms(801)
        fine = rosenbrock_gaussian_block_log_norms(1601)
        assert abs(coarse[0] - fine[0]) < 1e-6

    def test_log_norm_against_importance_sampling(self):
        target = make_rosenbrock_gaussian()
        truth = ground_truth(target)
        rng = np.random.default_rng(1)
        n = 400_000
        xs = rng.normal(0, 3.5, (n, 6))
        log_q = -0.5 * np.sum(xs**2, axis=1) / 3.5**2 - 3 * np.log(2 * np.pi * 3.5**2)
        log_w = target.log_density(xs) - log_q
        estimate = logsumexp(log_w) - np.log(n)
        w = np.exp(log_w - logsumexp(log_w))
        se = np.sqrt(np.sum(w**2))  # relative standard error of the mean weight
        assert abs(estimate - truth.log_norm) < 3 * max(se, 0.01)

    def test_rejection_sampler_acceptance_rate(self):
        rng = np.random.default_rng(2)
        proposal = rng.normal(0, 3.0, (50_000, 2))
        accept = np.log(rng.uniform(size=50_000)) < _ridge(proposal[:, 0], proposal[:, 1])
        assert accept.mean() > 0.01

    def test_samples_match_importance_moments(self):
        target = make_rosenbrock_gaussian()
        s = ground_truth(target).sample(100_000, 0)
        assert s.shape == (100_000, 6)
        rng = np.random.default_rng(3)
        xs = rng.normal(0, 3.5, (400_000, 6))
        log_q = -0.5 * np.sum(xs**2, axis=1) / 3.5**2 - 3 * np.log(2 * np.pi * 3.5**2)
        log_w = target.log_density(xs) - log_q
        w = np.exp(log_w - logsumexp(log_w))
        mean_is = w @ xs
        se_is = np.sqrt((w**2) @ (xs - mean_is) ** 2)
        assert (np.abs(s.mean(axis=0) - mean_is) < 3 * se_is + 0.01).all()

    def test_sampler_deterministic(self):
        target = make_rosenbrock_gaussian()
        a = ground_truth(target).sample(100, 5)
        b = ground_truth(target).sample(100, 5)
        assert np.array_equal(a, b)


class TestLumpy:
    def test_log_norm_is_zero(self):
        assert ground_truth(make_lumpy()).log_norm == 0.0

    def test_density_lower_bound_at_component_mean(self):
        from flowreg.targets import _make_mixture

        target, means = _make_mixture("lumpy", 10, 12, 0, 0.6, 2.0, 3.0)
        floor = -np.log(12) - 0.5 * 10 * np.log(2 * np.pi * 0.36)
        for mean in means:
            assert target.log_density(mean) >= floor - 1e-12

    def test_ancestral_moments_match_closed_form(self):
        from flowreg.targets import _make_mixture

        target, means = _make_mixture("lumpy", 10, 12, 0, 0.6, 2.0, 3.0)
        n = 1_000_000
        s = ground_truth(target).sample(n, 1)
        mix_mean = means.mean(axis=0)
        centered = means - mix_mean
        mix_cov = 0.36 * np.eye(10) + centered.T @ centered / 12
        se_mean = np.sqrt(np.diag(mix_cov) / n)
        assert (np.abs(s.mean(axis=0) - mix_mean) < 3 * se_mean + 1e-3).all()
        cov_err = np.abs(np.cov(s, rowvar=False) - mix_cov)
        assert cov_err.max() < 0.01

    def test_importance_sampling_log_norm(self):
        target = make_lumpy()
        rng = np.random.default_rng(4)
        n = 500_000
        xs = rng.normal(0, 2.5, (n, 10))
        log_q = -0.5 * np.sum(xs**2, axis=1) / 2.5**2 - 5 * np.log(2 * np.pi * 2.5**2)
        log_w = target.log_density(xs) - log_q
        estimate = logsumexp(log_w) - np.log(n)
        w = np.exp(log_w - logsumexp(log_w))
        assert abs(estimate) < 3 * max(np.sqrt(np.sum(w**2)), 0.01)

    def test_fixed_instance(self):
        a, b = make_lumpy(), make_lumpy()
        x = np.random.default_rng(5).normal(0, 1, (10, 10))
        assert np.array_equal(a.log_density(x), b.log_density(x))


class TestNoisyWrapper:
    def test_noise_level(self):
        target = wrap_noisy(make_gaussian(2), 3.0, rng=0)
        x = np.zeros((10_000, 2))
        values = target.log_density(x)
        assert values.std() == pytest.approx(3.0, abs=0.1)
        assert values.mean() == pytest.approx(make_gaussian(2).log_density(np.zeros(2)), abs=0.1)

    def test_noise_std_reported(self):
        target = wrap_noisy(make_gaussian(2), 3.0, rng=0)
        assert np.all(target.noise_std(np.zeros((5, 2))) == 3.0)
        assert make_gaussian(2).noise_std(np.zeros(2)) == 0.0

    def test_exact_reference_preserved(self):
        base = make_gaussian(3)
        noisy = wrap_noisy(base, 3.0, rng=1)
        assert noisy.exact is base
        assert noisy.ground_truth is base.ground_truth

    def test_deterministic_given_seed_and_order(self):
        a = wrap_noisy(make_gaussian(1), 2.0, rng=7)
        b = wrap_noisy(make_gaussian(1), 2.0, rng=7)
        xs = np.random.default_rng(0).normal(0, 1, (50, 1))
        va = np.concatenate([np.atleast_1d(a.log_density(xs[:30])), np.atleast_1d(a.log_density(xs[30:]))])
        vb = np.concatenate([np.atleast_1d(b.log_density(xs[:30])), np.atleast_1d(b.log_density(xs[30:]))])
        assert np.array_equal(va, vb)


class TestRegistry:
    def test_known_names(self):
        assert get_target("lumpy").dim == 10
        assert get_target("rosenbrock-gaussian").dim == 6
        assert get_target("mixture-5").dim == 5
        assert get_target("gaussian-4").dim == 4

    def test_unknown_name(self):
        with pytest.raises(ConfigurationError, match="unknown target"):
            get_target("cauchy")

    def test_noise_wrapping(self):
        target = get_target("mixture-5", noise_std=3.0, noise_seed=0)
        assert target.noise == 3.0
        assert target.exact.name == "mixture-5"

    def test_ground_truth_missing(self):
        from flowreg.targets import TargetDensity
        from flowreg import unbounded_space

        bare = TargetDensity("bare", unbounded_space([-1.0], [1.0]), lambda x: 0.0)
        with pytest.raises(ConfigurationError, match="ground truth"):
            ground_truth(bare)

    def test_gaussian_truth(self):
        target = make_gaussian(2)
        truth = ground_truth(target)
        assert truth.log_norm == 0.0
        s = truth.sample(50_000, 0)
        assert np.abs(s.mean(axis=0)).max() < 0.02
        assert np.abs(s.std(axis=0) - 1).max() < 0.02


def test_mixture5_is_five_dimensional_mixture():
    target = make_mixture5()
    assert target.dim == 5
    assert ground_truth(target).log_norm == 0.0
