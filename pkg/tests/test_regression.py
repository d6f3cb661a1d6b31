import numpy as np
import pytest

from flowreg import (
    BaseDistribution,
    ConfigurationError,
    EvalDataset,
    FlowConfig,
    FlowModel,
    LikelihoodConfig,
    NoiseShapingConfig,
    NumericError,
    RegressionObjective,
    SIGMA2_MIN,
    compute_y_low,
    default_shaping,
    noise_shaping,
    observation_log_likelihood,
    temper_dataset,
)
from flowreg.made import ConditionerStack

_LOG_2PI = np.log(2 * np.pi)


def make_objective(dim=2, n=40, seed=0, kind="tobit", shaping_enabled=True,
                   use_flow_prior=True, sigma2=0.5, prior_scale=0.1):
    rng = np.random.default_rng(seed)
    base = BaseDistribution(np.zeros(dim), np.ones(dim))
    cfg = FlowConfig(dim=dim)
    stack = ConditionerStack(dim, cfg.width, cfg.n_layers)
    params = stack.sample_prior(rng, prior_scale)
    flow = FlowModel(cfg, base, params)
    x = rng.normal(0, 1, (n, dim))
    y = base.log_density(x) + rng.normal(0, 0.3, n) + 1.5
    ds = EvalDataset(x, y, np.full(n, sigma2))
    like = LikelihoodConfig(kind=kind, shaping=default_shaping(dim),
                            shaping_enabled=shaping_enabled)
    return RegressionObjective(flow, ds, like, use_flow_prior=use_flow_prior), params


class TestNoiseShaping:
    def test_zero_below_start(self):
        cfg = NoiseShapingConfig(slope=0.05, start_gap=50, cap_gap=250)
        assert noise_shaping(0.0, cfg) == 0.0
        assert noise_shaping(49.9, cfg) == 0.0

    def test_linear_region_and_cap(self):
        # slope 0.05 between gaps 50 and 250 caps at 10
        cfg = NoiseShapingConfig(slope=0.05, start_gap=50, cap_gap=250)
        assert noise_shaping(250.0, cfg) == pytest.approx(10.0)
        assert noise_shaping(1e6, cfg) == pytest.approx(10.0)
        assert noise_shaping(150.0, cfg) == pytest.approx(5.0)

    def test_invalid_config(self):
        with pytest.raises(ConfigurationError):
            NoiseShapingConfig(start_gap=50, cap_gap=10)


class TestYLow:
    def test_single_noiseless_point(self):
        ds = EvalDataset(np.zeros((1, 1)), [0.0], [SIGMA2_MIN])
        cfg = NoiseShapingConfig(start_gap=100, cap_gap=500)
        assert compute_y_low(ds, cfg) == pytest.approx(-500 - 1.96 * np.sqrt(1e-3))

    def test_max_over_noise_adjusted(self):
        ds = EvalDataset(np.zeros((2, 1)), [10.0, 0.0], [SIGMA2_MIN, 100.0])
        cfg = NoiseShapingConfig(start_gap=10, cap_gap=100)
        assert compute_y_low(ds, cfg) == pytest.approx(10 - 1.96 * np.sqrt(1e-3) - 100)

    def test_low_points_do_not_move_it(self):
        cfg = NoiseShapingConfig(start_gap=10, cap_gap=100)
        ds1 = EvalDataset(np.zeros((2, 1)), [5.0, 0.0], [SIGMA2_MIN] * 2)
        ds2 = EvalDataset(np.zeros((4, 1)), [5.0, 0.0, -20.0, -50.0], [SIGMA2_MIN] * 4)
        assert compute_y_low(ds1, cfg) == compute_y_low(ds2, cfg)


class TestObservationLikelihood:
    def test_gaussian_peak(self):
        cfg = LikelihoodConfig(kind="tobit", y_low=-100.0, shaping_enabled=False)
        ll = observation_log_likelihood(0.0, 1.0, 0.0, cfg, y_max=0.0)
        assert ll == pytest.approx(-0.5 * _LOG_2PI)

    def test_censored_at_floor_is_log_half(self):
        cfg = LikelihoodConfig(kind="tobit", y_low=-5.0, shaping_enabled=False)
        ll = observation_log_likelihood(-7.0, 1.0, -5.0, cfg, y_max=0.0)
        assert ll == pytest.approx(np.log(0.5))

    def test_gaussian_equals_uncensored_tobit(self):
        rng = np.random.default_rng(0)
        shaping = NoiseShapingConfig()
        gauss = LikelihoodConfig(kind="gaussian", shaping=shaping, shaping_enabled=False)
        tobit = LikelihoodConfig(kind="tobit", y_low=-np.inf, shaping=shaping,
                                 shaping_enabled=False)
        for _ in range(100):
            y = rng.normal(0, 10)
            s2 = rng.uniform(SIGMA2_MIN, 4.0)
            f = rng.normal(0, 10)
            y_max = y + abs(rng.normal(0, 5))
            a = observation_log_likelihood(y, s2, f, gauss, y_max)
            b = observation_log_likelihood(y, s2, f, tobit, y_max)
            assert a == pytest.approx(b, abs=1e-12)

    def test_uncensored_maximized_at_observation(self):
        cfg = LikelihoodConfig(kind="tobit", y_low=-50.0, shaping_enabled=False)
        y = 2.0
        best = observation_log_likelihood(y, 1.0, y, cfg, y_max=y)
        for f in [-3.0, 0.0, 1.9, 2.1, 5.0]:
            assert observation_log_likelihood(y, 1.0, f, cfg, y_max=y) <= best

    def test_shaped_variance_never_below_plain(self):
        cfg = LikelihoodConfig(kind="gaussian", shaping=NoiseShapingConfig(), shaping_enabled=True)
        y_max = 0.0
        for y in [-0.5, -20.0, -80.0]:
            with_shaping = observation_log_likelihood(y, 1.0, y, cfg, y_max)
            assert with_shaping <= -0.5 * _LOG_2PI + 1e-12

    def test_stable_log_cdf_far_tail(self):
        # prediction far above the floor: densely censored branch must stay finite
        cfg = LikelihoodConfig(kind="tobit", y_low=0.0, shaping_enabled=False)
        ll = observation_log_likelihood(-10.0, 1.0, 40.0, cfg, y_max=0.0)
        assert np.isfinite(ll)
        assert ll == pytest.approx(-0.5 * 40.0**2 - 0.5 * _LOG_2PI - np.log(40.0), rel=1e-3)

    def test_non_finite_prediction_raises(self):
        cfg = LikelihoodConfig(kind="gaussian", shaping_enabled=False)
        with pytest.raises(NumericError):
            observation_log_likelihood(0.0, 1.0, np.nan, cfg, y_max=0.0)


class TestTempering:
    @pytest.fixture
    def setup(self):
        rng = np.random.default_rng(1)
        base = BaseDistribution(np.zeros(2), np.ones(2))
        x = rng.normal(0, 1, (30, 2))
        y = base.log_density(x) + 2.0
        return base, EvalDataset(x, y, np.full(30, 4.0))

    def test_beta_zero(self, setup):
        base, ds = setup
        out = temper_dataset(ds, 0.0, base)
        assert np.allclose(out.y, base.log_density(ds.x))
        assert np.allclose(out.sigma2, SIGMA2_MIN)

    def test_beta_one(self, setup):
        base, ds = setup
        out = temper_dataset(ds, 1.0, base)
        assert np.array_equal(out.y, ds.y)
        assert np.array_equal(out.sigma2, np.maximum(ds.sigma2, SIGMA2_MIN))

    def test_beta_half(self, setup):
        base, ds = setup
        out = temper_dataset(ds, 0.5, base)
        assert np.allclose(out.y, base.log_density(ds.x) + 1.0)
        assert np.allclose(out.sigma2, 1.0)

    def test_inputs_unchanged(self, setup):
        base, ds = setup
        out = temper_dataset(ds, 0.3, base)
        assert out.x is ds.x


class TestObjective:
    def test_perfect_fit_of_base(self):
        rng = np.random.default_rng(2)
        dim = 2
        base = BaseDistribution(np.zeros(dim), np.ones(dim))
        cfg = FlowConfig(dim=dim)
        stack = ConditionerStack(dim, cfg.width, cfg.n_layers)
        flow = FlowModel(cfg, base, np.zeros(stack.n_params))
        x = rng.normal(0, 1, (50, dim))
        y = base.log_density(x)
        ds = EvalDataset(x, y, np.full(50, SIGMA2_MIN))
        like = LikelihoodConfig(kind="tobit", shaping=default_shaping(dim))
        obj = RegressionObjective(flow, ds, like)
        value = obj.value(obj.pack(np.zeros(stack.n_params), 0.0))
        from flowreg import log_prior
        from flowreg.regression import shaped_variance
        v = shaped_variance(y, ds.sigma2, y.max(), obj.likelihood)
        expected = np.sum(-0.5 * np.log(2 * np.pi * v)) + log_prior(cfg, np.zeros(stack.n_params))
        assert value == pytest.approx(expected, rel=1e-12)

    def test_constant_gradient_weighted_residuals(self):
        obj, params = make_objective(kind="gaussian", shaping_enabled=False, sigma2=0.7)
        psi = obj.pack(params, 0.3)
        _, grad = obj.value_and_grad(psi)
        _, f, _ = obj.flow._density_pass(params, obj.dataset.x, keep_cache=False)
        expected = np.sum((obj.dataset.y - f - 0.3) / obj.dataset.sigma2)
        assert grad[-1] == pytest.approx(expected, rel=1e-10)

    @pytest.mark.parametrize("kind,shaping", [("tobit", True), ("gaussian", False)])
    def test_gradient_matches_finite_differences(self, kind, shaping):
        obj, params = make_objective(kind=kind, shaping_enabled=shaping, seed=4)
        rng = np.random.default_rng(5)
        psi = obj.pack(params * 0.7, -0.4)
        value, grad = obj.value_and_grad(psi)
        assert np.isfinite(value)
        h = 1e-6
        checked = 0
        for i in rng.choice(psi.size, 40, replace=False).tolist() + [psi.size - 1]:
            if abs(grad[i]) <= 1e-6:
                continue
            pp, pm = psi.copy(), psi.copy()
            pp[i] += h
            pm[i] -= h
            fd = (obj.value(pp) - obj.value(pm)) / (2 * h)
            assert grad[i] == pytest.approx(fd, rel=1e-4)
            checked += 1
        assert checked > 10

    def test_gradient_covers_censored_branch(self):
        # push half the observations below the floor
        rng = np.random.default_rng(6)
        dim = 2
        base = BaseDistribution(np.zeros(dim), np.ones(dim))
        cfg = FlowConfig(dim=dim)
        stack = ConditionerStack(dim, cfg.width, cfg.n_layers)
        params = stack.sample_prior(rng, 0.1)
        flow = FlowModel(cfg, base, params)
        x = rng.normal(0, 1, (30, dim))
        y = base.log_density(x)
        y[::2] -= 500.0
        ds = EvalDataset(x, y, np.full(30, 1.0))
        like = LikelihoodConfig(kind="tobit", shaping=NoiseShapingConfig(start_gap=20, cap_gap=100))
        obj = RegressionObjective(flow, ds, like)
        assert (ds.y <= obj.likelihood.y_low).any()
        psi = obj.pack(params, 0.1)
        _, grad = obj.value_and_grad(psi)
        h = 1e-6
        for i in [psi.size - 1, 0, 7]:
            if abs(grad[i]) <= 1e-8:
                continue
            pp, pm = psi.copy(), psi.copy()
            pp[i] += h
            pm[i] -= h
            fd = (obj.value(pp) - obj.value(pm)) / (2 * h)
            assert grad[i] == pytest.approx(fd, rel=1e-4)

    def test_no_flow_prior_drops_term(self):
        obj_with, params = make_objective(use_flow_prior=True)
        obj_without, _ = make_objective(use_flow_prior=False)
        from flowreg import log_prior
        psi = obj_with.pack(params, 0.0)
        diff = obj_with.value(psi) - obj_without.value(psi)
        assert diff == pytest.approx(log_prior(obj_with.flow.config, params))

    def test_dataset_floor_enforced(self):
        with pytest.raises(ConfigurationError):
            EvalDataset(np.zeros((2, 1)), [0.0, 0.0], [1e-5, 1.0])

    def test_non_finite_observation_rejected(self):
        with pytest.raises(ConfigurationError):
            EvalDataset(np.zeros((2, 1)), [np.inf, 0.0], [1.0, 1.0])
