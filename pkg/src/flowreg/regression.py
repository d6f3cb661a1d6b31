"""Regression objective on log-density observations.

Observations are scored either with a plain Gaussian likelihood or with a
censored (Tobit-style) likelihood that only asks predictions for very low
observed values to stay below a data-derived floor. Noise shaping inflates
the observation noise of low-density points, added in quadrature, so they
inform the fit without dominating it. Tempering blends observations toward
the base distribution. The objective couples the flow log-density with a
free log-normalizing-constant offset and carries exact reverse-mode
gradients for both.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import log_ndtr

from .exceptions import ConfigurationError, NumericError
from .flow import BaseDistribution, FlowModel, log_prior, log_prior_gradient

SIGMA2_MIN = 1e-3
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class EvalDataset:
    """Inference-space training data: points, log-density values, noise."""

    x: np.ndarray
    y: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        y = np.asarray(self.y, dtype=float).ravel()
        sigma2 = np.asarray(self.sigma2, dtype=float).ravel()
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "sigma2", sigma2)
        if x.shape[0] != y.size or y.size != sigma2.size:
            raise ConfigurationError("x, y and sigma2 must have matching lengths")
        if y.size == 0:
            raise ConfigurationError("dataset is empty")
        if not np.isfinite(x).all():
            raise ConfigurationError("non-finite input locations")
        if not np.isfinite(y).all():
            raise ConfigurationError("non-finite observations; filter them during ingestion")
        if (sigma2 < SIGMA2_MIN - 1e-15).any():
            raise ConfigurationError(f"observation variances must be >= {SIGMA2_MIN}")

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def dim(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class NoiseShapingConfig:
    """Piecewise-linear growth of artificial noise with log-density gap."""

    slope: float = 0.05
    start_gap: float = 10.0
    cap_gap: float = 50.0

    def __post_init__(self):
        if not (0.0 <= self.start_gap < self.cap_gap):
            raise ConfigurationError("need 0 <= start_gap < cap_gap")
        if self.slope < 0.0:
            raise ConfigurationError("slope must be >= 0")


def default_shaping(dim: int, slope: float = 0.05) -> NoiseShapingConfig:
    """Default thresholds grow linearly with dimension."""
    return NoiseShapingConfig(slope=slope, start_gap=10.0 * dim, cap_gap=50.0 * dim)


@dataclass(frozen=True)
class LikelihoodConfig:
    """Observation model: kind, censoring floor and noise shaping."""

    kind: str = "tobit"
    y_low: float | None = None
    shaping: NoiseShapingConfig = NoiseShapingConfig()
    shaping_enabled: bool = True

    def __post_init__(self):
        if self.kind not in ("tobit", "gaussian"):
            raise ConfigurationError(f"unknown likelihood kind {self.kind!r}")

    def resolved(self, dataset: EvalDataset) -> "LikelihoodConfig":
        """Bind the censoring floor to a dataset (tobit only)."""
        if self.kind == "tobit" and self.y_low is None:
            return replace(self, y_low=compute_y_low(dataset, self.shaping))
        return self


def noise_shaping(gap, cfg: NoiseShapingConfig):
    """Artificial noise standard deviation for a log-density gap >= 0."""
    gap = np.asarray(gap, dtype=float)
    out = cfg.slope * (np.clip(gap, cfg.start_gap, cfg.cap_gap) - cfg.start_gap)
    return float(out) if out.ndim == 0 else out


def compute_y_low(dataset: EvalDataset, cfg: NoiseShapingConfig) -> float:
    """Censoring floor: the best noise-adjusted observation minus cap_gap."""
    return float(np.max(dataset.y - 1.96 * np.sqrt(dataset.sigma2)) - cfg.cap_gap)


def shaped_variance(y, sigma2, y_max: float, cfg: LikelihoodConfig):
    """Total observation variance, shaping noise added in quadrature."""
    if not cfg.shaping_enabled:
        return np.asarray(sigma2, dtype=float)
    s = noise_shaping(y_max - np.asarray(y, dtype=float), cfg.shaping)
    return np.asarray(sigma2, dtype=float) + s * s


def _loglik_terms(y, sigma2, f_pred, cfg: LikelihoodConfig, y_max: float):
    """Per-observation log-likelihood and its derivative w.r.t. f_pred."""
    y = np.asarray(y, dtype=float)
    f_pred = np.asarray(f_pred, dtype=float)
    v = shaped_variance(y, sigma2, y_max, cfg)
    resid = y - f_pred
    ll = -0.5 * (_LOG_2PI + np.log(v)) - 0.5 * resid * resid / v
    dll = resid / v
    if cfg.kind == "tobit":
        if cfg.y_low is None:
            raise ConfigurationError("tobit likelihood requires a censoring floor y_low")
        censored = y <= cfg.y_low
        if censored.any():
            sd = np.sqrt(v[censored])
            z = (cfg.y_low - f_pred[censored]) / sd
            ll[censored] = log_ndtr(z)
            # d logPhi(z)/df = -phi(z)/Phi(z)/sd, stable far in the tail
            log_pdf = -0.5 * (_LOG_2PI + z * z)
            dll[censored] = -np.exp(log_pdf - log_ndtr(z)) / sd
    return ll, dll


def observation_log_likelihood(y, sigma2, f_pred, cfg: LikelihoodConfig, y_max: float):
    """Log-likelihood of observing log-density values y given predictions."""
    f_arr = np.asarray(f_pred, dtype=float)
    if not np.isfinite(f_arr).all():
        raise NumericError("non-finite prediction passed to observation likelihood")
    scalar = f_arr.ndim == 0
    ll, _ = _loglik_terms(
        np.atleast_1d(y), np.atleast_1d(sigma2), np.atleast_1d(f_arr), cfg, y_max
    )
    return float(ll[0]) if scalar else ll


def temper_dataset(dataset: EvalDataset, beta: float, base: BaseDistribution) -> EvalDataset:
    """Blend observations toward the base distribution at inverse temperature beta."""
    if not 0.0 <= beta <= 1.0:
        raise ConfigurationError("beta must lie in [0, 1]")
    log_p0 = base.log_density(dataset.x)
    y = (1.0 - beta) * log_p0 + beta * dataset.y
    sigma2 = np.maximum(beta * beta * dataset.sigma2, SIGMA2_MIN)
    return EvalDataset(dataset.x, y, sigma2)


class RegressionObjective:
    """Log-joint of the regression model over one (possibly tempered) dataset.

    The packed state vector is ``psi = [flow params..., log_norm_constant]``.
    The flow-parameter prior is omitted when ``use_flow_prior`` is false; the
    prior on the constant is flat either way.
    """

    def __init__(
        self,
        flow: FlowModel,
        dataset: EvalDataset,
        likelihood: LikelihoodConfig,
        use_flow_prior: bool = True,
    ):
        self.flow = flow
        self.dataset = dataset
        self.likelihood = likelihood.resolved(dataset)
        self.use_flow_prior = use_flow_prior
        self.y_max = float(dataset.y.max())

    @property
    def n_params(self) -> int:
        return self.flow.n_params + 1

    def pack(self, params: np.ndarray, c: float) -> np.ndarray:
        return np.concatenate([params, [c]])

    def unpack(self, psi: np.ndarray) -> tuple[np.ndarray, float]:
        return psi[:-1], float(psi[-1])

    def _raise_worst(self, ll):
        finite = np.isfinite(ll)
        if finite.all():
            worst = int(np.argmin(ll))
        else:
            worst = int(np.flatnonzero(~finite)[0])
        raise NumericError(
            f"non-finite regression objective; worst observation index {worst} "
            f"(y={self.dataset.y[worst]:.6g}, sigma2={self.dataset.sigma2[worst]:.6g})"
        )

    def value_and_grad(self, psi: np.ndarray) -> tuple[float, np.ndarray]:
        params, c = self.unpack(np.asarray(psi, dtype=float))
        ds = self.dataset
        u, f, cache = self.flow.forward_cached(params, ds.x)
        ll, dll = _loglik_terms(ds.y, ds.sigma2, f + c, self.likelihood, self.y_max)
        total = float(np.sum(ll))
        if not np.isfinite(total):
            self._raise_worst(ll)
        grad_params = self.flow.backward_pass(cache, u, dll)
        if self.use_flow_prior:
            total += log_prior(self.flow.config, params)
            grad_params = grad_params + log_prior_gradient(self.flow.config, params)
        grad = np.concatenate([grad_params, [float(np.sum(dll))]])
        if not np.isfinite(grad).all():
            raise NumericError("non-finite gradient of the regression objective")
        return total, grad

    def value(self, psi: np.ndarray) -> float:
        params, c = self.unpack(np.asarray(psi, dtype=float))
        ds = self.dataset
        _, f, _ = self.flow._density_pass(params, ds.x, keep_cache=False)
        ll, _ = _loglik_terms(ds.y, ds.sigma2, f + c, self.likelihood, self.y_max)
        total = float(np.sum(ll))
        if not np.isfinite(total):
            self._raise_worst(ll)
        if self.use_flow_prior:
            total += log_prior(self.flow.config, params)
        return total

    def constant_profile(self, params: np.ndarray):
        """Objective restricted to the constant, with flow values cached once."""
        ds = self.dataset
        _, f, _ = self.flow._density_pass(np.asarray(params, dtype=float), ds.x, keep_cache=False)
        if not np.isfinite(f).all():
            self._raise_worst(f)
        prior = log_prior(self.flow.config, params) if self.use_flow_prior else 0.0

        def profile(c: float) -> float:
            ll, _ = _loglik_terms(ds.y, ds.sigma2, f + c, self.likelihood, self.y_max)
            return float(np.sum(ll)) + prior

        return profile
