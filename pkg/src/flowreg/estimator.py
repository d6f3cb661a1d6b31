"""Scikit-learn style estimator wrapping the flow regression pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array, check_consistent_length

from .flow import FlowConfig
from .optimize import FitOptions, fit_flow_regression
from .regression import SIGMA2_MIN, EvalDataset, LikelihoodConfig, NoiseShapingConfig
from .spaces import (
    ParameterSpace,
    from_inference,
    log_abs_det_jacobian,
    to_inference,
    unbounded_space,
)


class NormalizingFlowRegressor(RegressorMixin, BaseEstimator):
    """Fit a normalized density and log normalizing constant to log-density
    observations of an unnormalized target.

    Training data are points ``X`` in the target's original space with
    observed unnormalized log densities ``y`` (optionally noisy, with
    per-observation variances passed to :meth:`fit`). The fitted model is a
    masked autoregressive flow; its density is available through
    :meth:`score_samples` and :meth:`sample`, the regression prediction of
    the observed values through :meth:`predict`, and the estimated log
    normalizing constant through ``log_norm_constant_``.

    Parameters
    ----------
    space : ParameterSpace, optional
        Bounds and plausible ranges. When omitted, an unbounded space with
        plausible ranges spanning the observed data is derived at fit time.
    n_layers, hidden_width, max_scale, max_shift, prior_std
        Flow architecture and parameter-prior settings.
    likelihood : {"tobit", "gaussian"}
        Observation model for the log-density values.
    noise_shaping : bool
        Inflate the noise of low-density observations.
    shaping_slope, shaping_start_gap, shaping_cap_gap
        Noise-shaping curve; the gaps default to 10 * dim and 50 * dim.
    use_flow_prior : bool
        Disable to drop the Gaussian prior over flow parameters.
    t_end, t_max
        Tempering schedule length and total optimization iterations.
    lbfgs_max_iters, lbfgs_max_fevals, grad_tol, loss_window_tol
        Inner optimizer settings.
    random_state : int
        Seed for the flow initialization.

    Attributes
    ----------
    flow_ : FlowModel
        Fitted flow (inference space).
    log_norm_constant_ : float
        Estimated log normalizing constant of the target.
    result_ : FitResult
        Full optimization trace.
    space_ : ParameterSpace
        Space used during fitting.
    """

    def __init__(
        self,
        space: ParameterSpace | None = None,
        n_layers: int = 11,
        hidden_width: int | None = None,
        max_scale: float = 1.5,
        max_shift: float = 1.0,
        prior_std: float = 0.2,
        likelihood: str = "tobit",
        noise_shaping: bool = True,
        shaping_slope: float = 0.05,
        shaping_start_gap: float | None = None,
        shaping_cap_gap: float | None = None,
        use_flow_prior: bool = True,
        t_end: int = 20,
        t_max: int = 30,
        lbfgs_max_iters: int = 500,
        lbfgs_max_fevals: int = 2000,
        grad_tol: float = 1e-5,
        loss_window_tol: float = 1e-5,
        random_state: int = 0,
    ):
        self.space = space
        self.n_layers = n_layers
        self.hidden_width = hidden_width
        self.max_scale = max_scale
        self.max_shift = max_shift
        self.prior_std = prior_std
        self.likelihood = likelihood
        self.noise_shaping = noise_shaping
        self.shaping_slope = shaping_slope
        self.shaping_start_gap = shaping_start_gap
        self.shaping_cap_gap = shaping_cap_gap
        self.use_flow_prior = use_flow_prior
        self.t_end = t_end
        self.t_max = t_max
        self.lbfgs_max_iters = lbfgs_max_iters
        self.lbfgs_max_fevals = lbfgs_max_fevals
        self.grad_tol = grad_tol
        self.loss_window_tol = loss_window_tol
        self.random_state = random_state

    def _resolve_space(self, x: np.ndarray) -> ParameterSpace:
        if self.space is not None:
            return self.space
        lo = x.min(axis=0)
        hi = x.max(axis=0)
        pad = np.maximum(0.05 * (hi - lo), 1e-6)
        return unbounded_space(lo - pad, hi + pad)

    def fit(self, X, y, sigma2=None):
        """Fit the flow to observations ``y`` of the target log density at ``X``.

        ``sigma2`` holds per-observation noise variances; omitted or
        sub-floor entries are set to the noiseless floor of 1e-3.
        """
        x = check_array(X, dtype=float)
        y = np.asarray(y, dtype=float).ravel()
        check_consistent_length(x, y)
        if sigma2 is None:
            sigma2 = np.full(y.size, SIGMA2_MIN)
        else:
            sigma2 = np.maximum(np.asarray(sigma2, dtype=float).ravel(), SIGMA2_MIN)
            check_consistent_length(y, sigma2)
        space = self._resolve_space(x)
        dim = space.dim
        z = to_inference(space, x)
        dataset = EvalDataset(z, y + log_abs_det_jacobian(space, z), sigma2)
        shaping = NoiseShapingConfig(
            slope=self.shaping_slope,
            start_gap=self.shaping_start_gap if self.shaping_start_gap is not None else 10.0 * dim,
            cap_gap=self.shaping_cap_gap if self.shaping_cap_gap is not None else 50.0 * dim,
        )
        result = fit_flow_regression(
            dataset,
            flow_config=FlowConfig(
                dim=dim,
                n_layers=self.n_layers,
                hidden_width=self.hidden_width,
                max_scale=self.max_scale,
                max_shift=self.max_shift,
                prior_std=self.prior_std,
            ),
            likelihood=LikelihoodConfig(
                kind=self.likelihood,
                shaping=shaping,
                shaping_enabled=self.noise_shaping,
            ),
            options=FitOptions(
                t_end=self.t_end,
                t_max=self.t_max,
                lbfgs_max_iters=self.lbfgs_max_iters,
                lbfgs_max_fevals=self.lbfgs_max_fevals,
                grad_tol=self.grad_tol,
                loss_window_tol=self.loss_window_tol,
                seed=self.random_state,
            ),
            use_flow_prior=self.use_flow_prior,
        )
        self.flow_ = result.flow
        self.log_norm_constant_ = result.log_norm_constant
        self.result_ = result
        self.space_ = space
        self.n_features_in_ = dim
        return self

    def _check_fitted(self):
        if not hasattr(self, "flow_"):
            raise NotFittedError("this NormalizingFlowRegressor instance is not fitted yet")

    def score_samples(self, X) -> np.ndarray:
        """Normalized flow log density at original-space points."""
        self._check_fitted()
        x = check_array(X, dtype=float)
        z = to_inference(self.space_, x)
        return self.flow_.log_density(z) - log_abs_det_jacobian(self.space_, z)

    def predict(self, X) -> np.ndarray:
        """Predicted unnormalized target log density (the regression view)."""
        self._check_fitted()
        return self.score_samples(X) + self.log_norm_constant_

    def sample(self, n_samples: int = 1, random_state=None) -> np.ndarray:
        """Draw original-space samples from the fitted density."""
        self._check_fitted()
        seed = self.random_state if random_state is None else random_state
        z = self.flow_.sample(n_samples, np.random.default_rng(seed))
        return from_inference(self.space_, z)
