"""Synthetic benchmark targets with ground-truth normalizing constants and
posterior samples, plus a wrapper that adds observation noise to log-density
evaluations.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .exceptions import ConfigurationError
from .spaces import ParameterSpace, unbounded_space

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GroundTruth:
    log_norm: float
    sample: Callable[[int, int], np.ndarray]  # (n, seed) -> (n, dim)


@dataclass(frozen=True)
class TargetDensity:
    """Evaluatable unnormalized log density over a parameter space.

    `log_density` accepts (n, dim) arrays (or a single point) and returns the
    observed value, which for noisy targets includes the observation noise.
    `noise_std` reports the per-point observation noise so traces can record
    honest uncertainties. `noiseless` points back at the exact target for
    wrappers.
    """

    name: str
    space: ParameterSpace
    log_density: Callable[[np.ndarray], np.ndarray]
    noise: float = 0.0
    ground_truth: GroundTruth | None = None
    noiseless: "TargetDensity | None" = None

    @property
    def dim(self) -> int:
        return self.space.dim

    def noise_std(self, x) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.full(pts.shape[0], float(self.noise))
        return float(out[0]) if np.asarray(x).ndim == 1 else out

    @property
    def exact(self) -> "TargetDensity":
        return self.noiseless if self.noiseless is not None else self


def ground_truth(target: TargetDensity) -> GroundTruth:
    if target.ground_truth is None:
        raise ConfigurationError(f"target {target.name!r} has no ground truth")
    return target.ground_truth


def wrap_noisy(target: TargetDensity, noise_std: float, rng) -> TargetDensity:
    """Additive zero-mean Gaussian noise on every log-density observation.

    Deterministic given the generator seed and the call order.
    """
    if noise_std <= 0:
        raise ConfigurationError("noise_std must be positive")
    generator = np.random.default_rng(rng)
    exact = target.exact

    def observe(x):
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        values = np.atleast_1d(exact.log_density(pts))
        noisy = values + generator.normal(0.0, noise_std, values.shape)
        return float(noisy[0]) if np.asarray(x).ndim == 1 else noisy

    return TargetDensity(
        name=f"{target.name}+noise{noise_std:g}",
        space=target.space,
        log_density=observe,
        noise=noise_std,
        ground_truth=target.ground_truth,
        noiseless=exact,
    )


# ---------------------------------------------------------------------------
# standard Gaussian


def make_gaussian(dim: int) -> TargetDensity:
    """Standard normal in `dim` dimensions; plausible range is +-1 sigma."""

    def logp(x):
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        out = -0.5 * np.sum(pts * pts, axis=1) - 0.5 * dim * _LOG_2PI
        return float(out[0]) if np.asarray(x).ndim == 1 else out

    def sample(n, seed):
        return np.random.default_rng(seed).standard_normal((n, dim))

    return TargetDensity(
        name=f"gaussian-{dim}",
        space=unbounded_space(np.full(dim, -1.0), np.full(dim, 1.0)),
        log_density=logp,
        ground_truth=GroundTruth(0.0, sample),
    )


# ---------------------------------------------------------------------------
# Rosenbrock-Gaussian (dim 6): two curved ridges, a Gaussian pair, and an
# overall isotropic Gaussian factor with standard deviation 3.

_PRIOR_STD = 3.0
_QUAD_LIMIT = 10.0


def _ridge(a, b):
    return -((a * a - b) ** 2) - (a - 1.0) ** 2 / 100.0


def _rosenbrock_gaussian_logp(x):
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    out = _ridge(pts[:, 0], pts[:, 1]) + _ridge(pts[:, 2], pts[:, 3])
    out += -0.5 * np.sum(pts[:, 4:6] ** 2, axis=1) - _LOG_2PI
    out += -0.5 * np.sum(pts * pts, axis=1) / _PRIOR_STD**2 - 3.0 * np.log(
        2.0 * np.pi * _PRIOR_STD**2
    )
    return float(out[0]) if np.asarray(x).ndim == 1 else out


def _ridge_block_log_integrand(a, b):
    prior = -0.5 * (a * a + b * b) / _PRIOR_STD**2 - np.log(2.0 * np.pi * _PRIOR_STD**2)
    return _ridge(a, b) + prior


def _ridge_block_log_norm(nodes: int) -> float:
    grid = np.linspace(-_QUAD_LIMIT, _QUAD_LIMIT, nodes)
    aa, bb = np.meshgrid(grid, grid, indexing="ij")
    values = np.exp(_ridge_block_log_integrand(aa, bb))
    return float(np.log(np.trapezoid(np.trapezoid(values, grid, axis=1), grid)))


@lru_cache(maxsize=None)
def rosenbrock_gaussian_block_log_norms(nodes: int = 1601) -> tuple[float, float]:
    """(ridge-block, Gaussian-block) log normalizers via tensor-grid quadrature.

    The quadrature is refined once; the two estimates must agree to 1e-6.
    """
    coarse = _ridge_block_log_norm((nodes + 1) // 2)
    fine = _ridge_block_log_norm(nodes)
    if abs(fine - coarse) > 1e-6:
        raise ConfigurationError(
            f"ridge-block quadrature did not converge: {coarse} vs {fine}"
        )
    # product of two centered Gaussians: N(x;0,1) N(x;0,s^2) integrates to
    # N(0;0,1+s^2) per dimension
    gauss_block = 2.0 * (-0.5 * np.log(2.0 * np.pi * (1.0 + _PRIOR_STD**2)))
    return fine, float(gauss_block)


def _sample_ridge_block(rng: np.random.Generator, n: int) -> np.ndarray:
    """Rejection sampling: envelope N(0, 3^2 I), acceptance prob exp(ridge)."""
    out = np.empty((0, 2))
    while out.shape[0] < n:
        m = max(int((n - out.shape[0]) / 0.05), 1000)
        proposal = rng.normal(0.0, _PRIOR_STD, (m, 2))
        accept = np.log(rng.uniform(size=m)) < _ridge(proposal[:, 0], proposal[:, 1])
        out = np.vstack([out, proposal[accept]])
    return out[:n]


def make_rosenbrock_gaussian() -> TargetDensity:
    """Six-dimensional target with two curved ridges and Gaussian factors."""
    ridge_ln, gauss_ln = rosenbrock_gaussian_block_log_norms()
    log_norm = 2.0 * ridge_ln + gauss_ln
    pair_std = np.sqrt(1.0 / (1.0 + 1.0 / _PRIOR_STD**2))

    def sample(n, seed):
        rng = np.random.default_rng(seed)
        block_a = _sample_ridge_block(rng, n)
        block_b = _sample_ridge_block(rng, n)
        block_c = rng.normal(0.0, pair_std, (n, 2))
        return np.hstack([block_a, block_b, block_c])

    return TargetDensity(
        name="rosenbrock-gaussian",
        space=unbounded_space(np.full(6, -4.5), np.full(6, 4.5)),
        log_density=_rosenbrock_gaussian_logp,
        ground_truth=GroundTruth(log_norm, sample),
    )


# ---------------------------------------------------------------------------
# Gaussian mixtures ("lumpy" style): equal-weight normalized components, so
# the log normalizing constant is exactly zero.


def _make_mixture(name, dim, n_components, seed, component_std, means_halfwidth, plausible):
    means = np.random.default_rng(seed).uniform(
        -means_halfwidth, means_halfwidth, (n_components, dim)
    )
    var = component_std**2
    log_weight = -np.log(n_components)
    norm_const = -0.5 * dim * np.log(2.0 * np.pi * var)

    def logp(x):
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        d2 = (
            np.sum(pts * pts, axis=1)[:, None]
            - 2.0 * pts @ means.T
            + np.sum(means * means, axis=1)[None, :]
        )
        out = logsumexp(-0.5 * d2 / var + norm_const + log_weight, axis=1)
        return float(out[0]) if np.asarray(x).ndim == 1 else out

    def sample(n, sample_seed):
        rng = np.random.default_rng(sample_seed)
        comp = rng.integers(n_components, size=n)
        return means[comp] + rng.normal(0.0, component_std, (n, dim))

    target = TargetDensity(
        name=name,
        space=unbounded_space(np.full(dim, -plausible), np.full(dim, plausible)),
        log_density=logp,
        ground_truth=GroundTruth(0.0, sample),
    )
    return target, means


def make_lumpy(seed: int = 0) -> TargetDensity:
    """Ten-dimensional mixture of 12 partially overlapping Gaussians."""
    target, _ = _make_mixture(
        "lumpy", dim=10, n_components=12, seed=seed,
        component_std=0.6, means_halfwidth=2.0, plausible=3.0,
    )
    return target


def make_mixture5(seed: int = 0) -> TargetDensity:
    """Five-dimensional Gaussian mixture used for robustness studies."""
    target, _ = _make_mixture(
        "mixture-5", dim=5, n_components=6, seed=seed,
        component_std=0.6, means_halfwidth=2.0, plausible=3.0,
    )
    return target


_REGISTRY: dict[str, Callable[[], TargetDensity]] = {
    "rosenbrock-gaussian": make_rosenbrock_gaussian,
    "lumpy": make_lumpy,
    "mixture-5": make_mixture5,
}

_GAUSSIAN_RE = re.compile(r"^gaussian-(\d+)$")


def available_targets() -> list[str]:
    return sorted(_REGISTRY) + ["gaussian-<dim>"]


def get_target(name: str, noise_std: float = 0.0, noise_seed: int = 0) -> TargetDensity:
    """Look up a target by registry name, optionally wrapping it with noise."""
    match = _GAUSSIAN_RE.match(name)
    if match:
        target = make_gaussian(int(match.group(1)))
    elif name in _REGISTRY:
        target = _REGISTRY[name]()
    else:
        raise ConfigurationError(
            f"unknown target {name!r}; available: {', '.join(available_targets())}"
        )
    if noise_std > 0:
        target = wrap_noisy(target, noise_std, noise_seed)
    return target
