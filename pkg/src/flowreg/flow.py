"""The masked autoregressive flow used as the regression model.

The flow standardizes inference-space points against a diagonal Gaussian
base distribution and then applies a stack of bounded affine autoregressive
layers, each followed by a reverse permutation. With all parameters at zero
every layer is the identity and the flow density equals the base density
exactly. Scales are capped to [1/max_scale, max_scale] and shifts to
(-max_shift, max_shift), so draws from the parameter prior stay close to
the base distribution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .exceptions import ConfigurationError, NumericError
from .made import ConditionerStack, default_hidden_width
from .spaces import ParameterSpace

_LOG_2PI = np.log(2.0 * np.pi)

FLOW_DOC_VERSION = 1


@dataclass(frozen=True)
class FlowConfig:
    """Architecture and prior settings of the flow."""

    dim: int
    n_layers: int = 11
    hidden_width: int | None = None
    max_scale: float = 1.5
    max_shift: float = 1.0
    prior_std: float = 0.2

    def __post_init__(self):
        if self.dim < 1 or self.n_layers < 1:
            raise ConfigurationError("dim and n_layers must be positive")
        if self.max_scale <= 1.0 or self.max_shift <= 0.0 or self.prior_std < 0.0:
            raise ConfigurationError("need max_scale > 1, max_shift > 0, prior_std >= 0")
        if self.hidden_width is not None and self.hidden_width < 1:
            raise ConfigurationError("hidden_width must be positive")

    @property
    def width(self) -> int:
        return self.hidden_width if self.hidden_width is not None else default_hidden_width(self.dim)

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "n_layers": self.n_layers,
            "hidden_width": self.hidden_width,
            "max_scale": self.max_scale,
            "max_shift": self.max_shift,
            "prior_std": self.prior_std,
        }


@dataclass(frozen=True)
class BaseDistribution:
    """Diagonal Gaussian base distribution in inference space."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        std = np.atleast_1d(np.asarray(self.std, dtype=float))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)
        if mean.shape != std.shape or mean.ndim != 1:
            raise ConfigurationError("mean and std must be 1-d arrays of equal length")
        if not (std > 0).all():
            raise ConfigurationError("base std must be positive elementwise")

    @property
    def dim(self) -> int:
        return self.mean.size

    def log_density(self, x) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        z = (pts - self.mean) / self.std
        out = -0.5 * np.sum(z * z, axis=1) - np.sum(np.log(self.std)) - 0.5 * self.dim * _LOG_2PI
        return float(out[0]) if np.asarray(x).ndim == 1 else out

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal((n, self.dim))


def estimate_base(dataset, start_gap: float) -> BaseDistribution:
    """Moment-match the base distribution to the high-density observations.

    Keeps points whose noise-adjusted value ``y - 1.96 sigma`` lies within
    ``start_gap`` of the best such value; if fewer than dim + 2 qualify,
    falls back to the top ceil(N/10) points. Standard deviations are floored
    at 1e-3 (plausible widths are 1 in inference space).
    """
    adj = dataset.y - 1.96 * np.sqrt(dataset.sigma2)
    keep = adj >= adj.max() - start_gap
    dim = dataset.x.shape[1]
    if keep.sum() < dim + 2:
        top = int(np.ceil(dataset.y.size / 10))
        keep = np.zeros(dataset.y.size, dtype=bool)
        keep[np.argsort(adj)[-top:]] = True
    if keep.sum() < 2:
        raise ConfigurationError(
            f"only {int(keep.sum())} high-density points available for base estimation"
        )
    pts = dataset.x[keep]
    mean = pts.mean(axis=0)
    std = pts.std(axis=0, ddof=1)
    if (std == 0).any():
        bad = int(np.flatnonzero(std == 0)[0])
        raise ConfigurationError(f"zero variance among selected points in dimension {bad}")
    return BaseDistribution(mean, np.maximum(std, 1e-3))


@dataclass(frozen=True)
class FlowParameters:
    """Flat parameter vector plus the (layer, role) -> slice layout."""

    vector: np.ndarray
    layout: dict = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "vector", np.asarray(self.vector, dtype=float))


class FlowModel:
    """A fitted or freshly initialized flow: config + base + parameters."""

    def __init__(self, config: FlowConfig, base: BaseDistribution, params: np.ndarray):
        if base.dim != config.dim:
            raise ConfigurationError("base distribution dimension does not match config")
        self.config = config
        self.base = base
        self.stack = ConditionerStack(config.dim, config.width, config.n_layers)
        params = np.asarray(params, dtype=float)
        if params.shape != (self.stack.n_params,):
            raise ConfigurationError(
                f"expected {self.stack.n_params} parameters, got {params.shape}"
            )
        self.params = params

    @property
    def n_params(self) -> int:
        return self.stack.n_params

    @property
    def parameters(self) -> FlowParameters:
        return FlowParameters(self.params, self.stack.layout)

    @cached_property
    def _log_max_scale(self) -> float:
        return float(np.log(self.config.max_scale))

    # ----- density (data -> latent, one parallel conditioner pass per layer)

    def _density_pass(self, params: np.ndarray, x: np.ndarray, keep_cache: bool):
        cfg = self.config
        v = (x - self.base.mean) / self.base.std
        f = np.full(x.shape[0], -np.sum(np.log(self.base.std)))
        cache = [] if keep_cache else None
        for layer in range(cfg.n_layers):
            weights = self.stack.layer_weights(params, layer)
            h, raw_scale, raw_shift = self.stack.forward(weights, v)
            t_scale = np.tanh(raw_scale)
            t_shift = np.tanh(raw_shift)
            log_s = self._log_max_scale * t_scale
            s = np.exp(log_s)
            m = cfg.max_shift * t_shift
            u = (v - m) / s
            f -= log_s.sum(axis=1)
            if keep_cache:
                cache.append((v, h, t_scale, t_shift, s, u, weights))
            # reverse permutation between layers only
            v = u[:, ::-1].copy() if layer < cfg.n_layers - 1 else u
        f += -0.5 * np.sum(v * v, axis=1) - 0.5 * cfg.dim * _LOG_2PI
        return v, f, cache

    def _density_pass_checked(self, params, x):
        """Slow path reporting the first layer that produced non-finite values."""
        cfg = self.config
        v = (x - self.base.mean) / self.base.std
        for layer in range(cfg.n_layers):
            weights = self.stack.layer_weights(params, layer)
            h, raw_scale, raw_shift = self.stack.forward(weights, v)
            s = np.exp(self._log_max_scale * np.tanh(raw_scale))
            u = (v - cfg.max_shift * np.tanh(raw_shift)) / s
            if not np.isfinite(u).all():
                raise NumericError(f"non-finite intermediate in flow layer {layer}")
            v = u[:, ::-1].copy() if layer < cfg.n_layers - 1 else u

    def log_density_and_latent(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Latent points u = T^{-1}(x) and flow log-density, both vectorized."""
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        u, f, _ = self._density_pass(self.params, pts, keep_cache=False)
        if not (np.isfinite(u).all() and np.isfinite(f).all()):
            self._density_pass_checked(self.params, pts)
            raise NumericError("non-finite flow log-density")
        if np.asarray(x).ndim == 1:
            return u[0], float(f[0])
        return u, f

    def log_density(self, x) -> np.ndarray:
        return self.log_density_and_latent(x)[1]

    def forward_cached(self, params: np.ndarray, x: np.ndarray):
        """Density pass keeping the per-layer intermediates for a backward pass."""
        return self._density_pass(params, x, keep_cache=True)

    def backward_pass(self, cache, u: np.ndarray, weight: np.ndarray) -> np.ndarray:
        """d(sum_n weight_n * f_n)/d params by reverse accumulation.

        `cache` and `u` come from :meth:`forward_cached`; `weight` holds the
        per-observation sensitivities of the scalar loss.
        """
        grad = np.zeros(self.stack.n_params)
        g = -u * weight[:, None]
        for layer in range(self.config.n_layers - 1, -1, -1):
            if layer < self.config.n_layers - 1:
                g = g[:, ::-1]
            v, h, t_scale, t_shift, s, u_layer, weights = cache[layer]
            d_log_s = -g * u_layer - weight[:, None]
            d_raw_scale = d_log_s * self._log_max_scale * (1.0 - t_scale * t_scale)
            d_m = -g / s
            d_raw_shift = d_m * self.config.max_shift * (1.0 - t_shift * t_shift)
            dv = self.stack.backward(weights, v, h, d_raw_scale, d_raw_shift, grad, layer)
            g = g / s + dv
        return grad

    def gradient_pass(self, params: np.ndarray, x: np.ndarray, weight: np.ndarray):
        """Convenience wrapper: forward then backward in one call."""
        u, f, cache = self.forward_cached(params, x)
        return f, self.backward_pass(cache, u, weight)

    # ----- sampling (latent -> data, sequential per-dimension passes)

    def transform_from_latent(self, u) -> np.ndarray:
        cfg = self.config
        v = np.atleast_2d(np.asarray(u, dtype=float)).copy()
        for layer in range(cfg.n_layers - 1, -1, -1):
            weights = self.stack.layer_weights(self.params, layer)
            x = np.zeros_like(v)
            for i in range(cfg.dim):
                _, raw_scale, raw_shift = self.stack.forward(weights, x)
                s_i = np.exp(self._log_max_scale * np.tanh(raw_scale[:, i]))
                m_i = cfg.max_shift * np.tanh(raw_shift[:, i])
                x[:, i] = s_i * v[:, i] + m_i
            v = x[:, ::-1] if layer > 0 else x
        out = self.base.mean + self.base.std * v
        return out[0] if np.asarray(u).ndim == 1 else out

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise ConfigurationError("need n >= 1 samples")
        u = rng.standard_normal((n, self.config.dim))
        return self.transform_from_latent(u)

    # ----- serialization

    def to_dict(self, space: ParameterSpace | None = None, extra: dict | None = None) -> dict:
        layout = {k: [v[0], v[1], list(v[2])] for k, v in self.stack.layout.items()}
        doc = {
            "format_version": FLOW_DOC_VERSION,
            "config": self.config.to_dict(),
            "base": {"mean": self.base.mean.tolist(), "std": self.base.std.tolist()},
            "params": self.params.tolist(),
            "layout": layout,
            "space": space.to_dict() if space is not None else None,
        }
        if extra:
            doc.update(extra)
        return doc

    def save(self, path, space: ParameterSpace | None = None, extra: dict | None = None):
        with open(path, "w") as fh:
            json.dump(self.to_dict(space=space, extra=extra), fh, indent=1)
            fh.write("\n")

    @classmethod
    def from_dict(cls, doc: dict) -> tuple["FlowModel", ParameterSpace | None]:
        if doc.get("format_version") != FLOW_DOC_VERSION:
            raise ConfigurationError(f"unsupported flow document version {doc.get('format_version')}")
        cfg = FlowConfig(**doc["config"])
        base = BaseDistribution(np.array(doc["base"]["mean"]), np.array(doc["base"]["std"]))
        model = cls(cfg, base, np.array(doc["params"], dtype=float))
        space = ParameterSpace.from_dict(doc["space"]) if doc.get("space") else None
        return model, space

    @classmethod
    def load(cls, path) -> tuple["FlowModel", ParameterSpace | None]:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def log_prior(config: FlowConfig, params: np.ndarray) -> float:
    """Gaussian log prior over flow parameters, constants included."""
    if config.prior_std == 0.0:
        raise ConfigurationError("log prior undefined for prior_std = 0")
    params = np.asarray(params, dtype=float)
    var = config.prior_std**2
    return float(-0.5 * params.size * np.log(2.0 * np.pi * var) - 0.5 * params @ params / var)


def log_prior_gradient(config: FlowConfig, params: np.ndarray) -> np.ndarray:
    return -np.asarray(params, dtype=float) / config.prior_std**2


def initialize_flow(config: FlowConfig, base: BaseDistribution, rng: np.random.Generator) -> FlowModel:
    """Flow with damped fan-in initialization, starting close to the base."""
    stack = ConditionerStack(config.dim, config.width, config.n_layers)
    return FlowModel(config, base, stack.init_params(rng))


def draw_prior_flow(config: FlowConfig, base: BaseDistribution, rng: np.random.Generator) -> FlowModel:
    """Flow with parameters drawn from the Gaussian prior (prior predictive)."""
    stack = ConditionerStack(config.dim, config.width, config.n_layers)
    if config.prior_std == 0.0:
        return FlowModel(config, base, np.zeros(stack.n_params))
    return FlowModel(config, base, stack.sample_prior(rng, config.prior_std))
