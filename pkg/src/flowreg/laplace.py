"""Laplace-approximation baseline: Gaussian posterior from a numerical
Hessian at the MAP point, with the implied log-evidence estimate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import LaplaceError, NumericError
from .spaces import ParameterSpace, from_inference, log_abs_det_jacobian, to_inference
from .targets import TargetDensity
from .traces import TraceRecord, run_cma_es

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class LaplaceResult:
    """Gaussian approximation in inference space plus its evidence estimate."""

    mode: np.ndarray
    cov: np.ndarray
    log_norm: float

    def sample(self, n: int, seed) -> np.ndarray:
        rng = np.random.default_rng(seed)
        chol = np.linalg.cholesky(self.cov)
        return self.mode + rng.standard_normal((n, self.mode.size)) @ chol.T


def _hessian_once(f, x, step):
    dim = x.size
    h = np.broadcast_to(np.asarray(step, dtype=float), (dim,)).astype(float)
    hess = np.empty((dim, dim))
    f0 = f(x)
    for i in range(dim):
        ei = np.zeros(dim)
        ei[i] = h[i]
        hess[i, i] = (f(x + ei) - 2.0 * f0 + f(x - ei)) / h[i] ** 2
        for j in range(i + 1, dim):
            ej = np.zeros(dim)
            ej[j] = h[j]
            cross = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4.0 * h[i] * h[j])
            hess[i, j] = cross
            hess[j, i] = cross
    if not np.isfinite(hess).all():
        raise NumericError("non-finite value in the Hessian stencil")
    return hess


def numerical_hessian(f, x, step=1e-3, refine: bool = True, instability_tol: float = 0.5):
    """Central-difference Hessian, symmetrized, with one Richardson refinement.

    The two step sizes double as a consistency check: if the half-step
    estimate disagrees wildly with the full-step one (relative Frobenius
    difference above `instability_tol`), the function is too rough or noisy
    for differentiation and a LaplaceError is raised.
    """
    x = np.asarray(x, dtype=float)
    coarse = _hessian_once(f, x, step)
    coarse = 0.5 * (coarse + coarse.T)
    if not refine:
        return coarse
    fine = _hessian_once(f, x, np.asarray(step, dtype=float) / 2.0)
    fine = 0.5 * (fine + fine.T)
    scale = max(np.linalg.norm(fine), 1e-12)
    if np.linalg.norm(fine - coarse) > instability_tol * scale:
        raise LaplaceError(
            "numerical Hessian unstable under step refinement; "
            "the target may be noisy or non-smooth"
        )
    return (4.0 * fine - coarse) / 3.0


def laplace_fit(log_density, mode, step=1e-3) -> LaplaceResult:
    """Gaussian fit at a mode of an inference-space log density.

    log_norm = f(mode) + dim/2 log(2 pi) - 1/2 log det(-H).
    """
    mode = np.asarray(mode, dtype=float)
    hess = numerical_hessian(log_density, mode, step=step)
    neg = -hess
    try:
        chol = np.linalg.cholesky(neg)
    except np.linalg.LinAlgError:
        raise LaplaceError("Hessian at the MAP point is not negative definite") from None
    dim = mode.size
    log_det = 2.0 * np.sum(np.log(np.diag(chol)))
    cov = np.linalg.inv(neg)
    cov = 0.5 * (cov + cov.T)
    log_norm = float(log_density(mode)) + 0.5 * dim * _LOG_2PI - 0.5 * log_det
    return LaplaceResult(mode=mode, cov=cov, log_norm=log_norm)


def laplace_from_traces(
    target: TargetDensity,
    records: list[TraceRecord],
    space: ParameterSpace | None = None,
    polish_evals: int = 500,
    seed: int = 0,
) -> LaplaceResult:
    """Laplace baseline seeded by the best trace record.

    The best recorded point is polished with a short local CMA-ES run in the
    original space, then the Hessian is computed in inference space where the
    evidence estimate is parameterization-consistent.
    """
    space = space or target.space
    best = max(records, key=lambda r: r.y)
    rng = np.random.default_rng(seed)
    polish = run_cma_es(target, polish_evals, best.x, rng, run_id=-1, sigma0=0.02)
    candidates = [best] + polish
    mode_orig = max(candidates, key=lambda r: r.y).x
    mode_inf = to_inference(space, mode_orig)

    def log_density_inf(z):
        return float(target.log_density(from_inference(space, z)) + log_abs_det_jacobian(space, z))

    return laplace_fit(log_density_inf, mode_inf)
