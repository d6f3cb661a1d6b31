"""Posterior-approximation metrics and diagnostics.

Provides the absolute log-marginal-likelihood error, the mean marginal total
variation distance between sample sets, the symmetrized KL divergence between
moment-matched Gaussians, the generalized-Pareto tail diagnostic of
importance ratios, and a corner-plot data export with a hallucination score.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import ConfigurationError, NumericError

DLML_THRESHOLD = 1.0
MMTV_THRESHOLD = 0.2
GSKL_THRESHOLD = 1.0 / 8.0


def delta_lml(estimate: float, truth: float) -> float:
    """Absolute error of the estimated log marginal likelihood."""
    if not (np.isfinite(estimate) and np.isfinite(truth)):
        raise NumericError("delta_lml requires finite inputs")
    return abs(float(estimate) - float(truth))


def _check_samples(samples_p, samples_q, min_each):
    p = np.atleast_2d(np.asarray(samples_p, dtype=float))
    q = np.atleast_2d(np.asarray(samples_q, dtype=float))
    if p.shape[1] != q.shape[1]:
        raise ConfigurationError(f"dimension mismatch: {p.shape[1]} vs {q.shape[1]}")
    if p.shape[0] < min_each or q.shape[0] < min_each:
        raise ConfigurationError(f"need at least {min_each} samples per set")
    return p, q


def marginal_tv_contributions(samples_p, samples_q) -> np.ndarray:
    """Per-dimension total variation between histogram marginals.

    Histograms share bins spanning the pooled range with
    ceil(2 * n**(1/3)) bins, n being the smaller sample count.
    """
    p, q = _check_samples(samples_p, samples_q, 1000)
    n = min(p.shape[0], q.shape[0])
    n_bins = int(np.ceil(2.0 * n ** (1.0 / 3.0)))
    out = np.empty(p.shape[1])
    for d in range(p.shape[1]):
        lo = min(p[:, d].min(), q[:, d].min())
        hi = max(p[:, d].max(), q[:, d].max())
        if hi <= lo:
            out[d] = 0.0
            continue
        edges = np.linspace(lo, hi, n_bins + 1)
        hp, _ = np.histogram(p[:, d], bins=edges)
        hq, _ = np.histogram(q[:, d], bins=edges)
        out[d] = 0.5 * np.abs(hp / p.shape[0] - hq / q.shape[0]).sum()
    return out


def mmtv(samples_p, samples_q) -> float:
    """Mean over dimensions of the marginal total variation distance."""
    return float(marginal_tv_contributions(samples_p, samples_q).mean())


def gskl_from_moments(mean_p, cov_p, mean_q, cov_q) -> float:
    """Symmetrized Gaussian KL divergence from moments, averaged over 2*dim."""
    mean_p = np.atleast_1d(np.asarray(mean_p, dtype=float))
    mean_q = np.atleast_1d(np.asarray(mean_q, dtype=float))
    cov_p = np.atleast_2d(np.asarray(cov_p, dtype=float))
    cov_q = np.atleast_2d(np.asarray(cov_q, dtype=float))
    dim = mean_p.size

    def kl(m1, s1, m2, s2):
        solved = np.linalg.solve(s2, s1)
        diff = m2 - m1
        maha = diff @ np.linalg.solve(s2, diff)
        _, logdet1 = np.linalg.slogdet(s1)
        _, logdet2 = np.linalg.slogdet(s2)
        return 0.5 * (np.trace(solved) + maha - dim + logdet2 - logdet1)

    return float((kl(mean_p, cov_p, mean_q, cov_q) + kl(mean_q, cov_q, mean_p, cov_p)) / (2.0 * dim))


def gskl(samples_p, samples_q) -> float:
    """Moment-matched symmetrized Gaussian KL between two sample sets."""
    p, q = _check_samples(samples_p, samples_q, 2)
    dim = p.shape[1]
    if p.shape[0] < dim + 2 or q.shape[0] < dim + 2:
        raise ConfigurationError(f"need at least dim + 2 = {dim + 2} samples per set")

    def moments(s):
        cov = np.cov(s, rowvar=False, ddof=1).reshape(dim, dim)
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            warnings.warn("singular sample covariance; adding trace jitter")
            cov = cov + 1e-10 * np.trace(cov) * np.eye(dim)
        return s.mean(axis=0), cov

    mean_p, cov_p = moments(p)
    mean_q, cov_q = moments(q)
    if np.array_equal(p, q):
        return 0.0
    return gskl_from_moments(mean_p, cov_p, mean_q, cov_q)


@dataclass(frozen=True)
class MetricsReport:
    """Headline metrics with pass flags against the standard thresholds."""

    delta_lml: float
    mmtv: float
    gskl: float
    tv_per_dimension: tuple
    passed_delta_lml: bool
    passed_mmtv: bool
    passed_gskl: bool

    @property
    def passed(self) -> bool:
        return self.passed_delta_lml and self.passed_mmtv and self.passed_gskl

    def to_dict(self) -> dict:
        return {
            "delta_lml": self.delta_lml,
            "mmtv": self.mmtv,
            "gskl": self.gskl,
            "tv_per_dimension": list(self.tv_per_dimension),
            "passed": {
                "delta_lml": self.passed_delta_lml,
                "mmtv": self.passed_mmtv,
                "gskl": self.passed_gskl,
                "all": self.passed,
            },
            "thresholds": {
                "delta_lml": DLML_THRESHOLD,
                "mmtv": MMTV_THRESHOLD,
                "gskl": GSKL_THRESHOLD,
            },
        }


def compute_report(approx_samples, true_samples, log_norm_estimate, log_norm_true) -> MetricsReport:
    tv = marginal_tv_contributions(approx_samples, true_samples)
    dlml = delta_lml(log_norm_estimate, log_norm_true)
    g = gskl(approx_samples, true_samples)
    m = float(tv.mean())
    return MetricsReport(
        delta_lml=dlml,
        mmtv=m,
        gskl=g,
        tv_per_dimension=tuple(float(v) for v in tv),
        passed_delta_lml=dlml < DLML_THRESHOLD,
        passed_mmtv=m < MMTV_THRESHOLD,
        passed_gskl=g < GSKL_THRESHOLD,
    )


# ---------------------------------------------------------------------------
# PSIS shape diagnostic


@dataclass(frozen=True)
class PsisResult:
    khat: float
    n_samples: int
    n_tail: int
    max_weight_fraction: float
    ess_fraction: float

    @property
    def good(self) -> bool:
        return self.khat <= 0.7

    def to_dict(self) -> dict:
        return {
            "khat": self.khat,
            "n_samples": self.n_samples,
            "n_tail": self.n_tail,
            "max_weight_fraction": self.max_weight_fraction,
            "ess_fraction": self.ess_fraction,
            "good": bool(self.good),
        }


def _fit_generalized_pareto(exceedances: np.ndarray) -> tuple[float, float]:
    """Profile-likelihood shape/scale estimate (Zhang-Stephens style) with the
    weak shape prior used by standard PSIS implementations."""
    z = np.sort(exceedances)
    n = z.size
    if n < 5 or z[-1] <= 0:
        return -np.inf, 0.0
    m = 30 + int(np.sqrt(n))
    b = 1.0 - np.sqrt(m / (np.arange(1, m + 1, dtype=float) - 0.5))
    b = b / (3.0 * z[max(int(n / 4 + 0.5) - 1, 0)]) + 1.0 / z[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.mean(np.log1p(-b[:, None] * z), axis=1)
        log_lik = n * (np.log(-b / k) - k - 1.0)
        weights = 1.0 / np.exp(log_lik - log_lik[:, None]).sum(axis=1)
    b_post = float(np.sum(b * weights))
    k_post = float(np.mean(np.log1p(-b_post * z)))
    sigma = -k_post / b_post
    khat = (n * k_post + 10.0 * 0.5) / (n + 10.0)
    return float(khat), float(sigma)


def psis_khat(flow, target_log_density, n: int, rng) -> PsisResult:
    """Generalized-Pareto tail diagnostic of flow-vs-target importance ratios.

    Draws n flow samples, forms log ratios against the (noiseless) target
    log density in inference space, and fits the largest
    min(ceil(0.2 n), ceil(3 sqrt(n))) ratios. khat <= 0.7 indicates a good
    approximation. Samples with non-finite target values are excluded; more
    than 1% of them is an error.
    """
    if n < 100:
        raise ConfigurationError("need at least 100 proposal samples")
    rng = np.random.default_rng(rng)
    x = flow.sample(n, rng)
    log_q = flow.log_density(x)
    log_p = np.atleast_1d(np.asarray(target_log_density(x), dtype=float))
    finite = np.isfinite(log_p)
    if (~finite).sum() > 0.01 * n:
        raise NumericError(
            f"{int((~finite).sum())} of {n} target evaluations non-finite during PSIS"
        )
    log_r = log_p[finite] - log_q[finite]
    n_kept = log_r.size
    n_tail = min(int(np.ceil(0.2 * n_kept)), int(np.ceil(3.0 * np.sqrt(n_kept))))
    order = np.argsort(log_r)
    ratios = np.exp(log_r - log_r.max())
    threshold = ratios[order[n_kept - n_tail - 1]]
    tail = ratios[order[n_kept - n_tail:]]
    khat, sigma = _fit_generalized_pareto(tail - threshold)

    weights = ratios.copy()
    if np.isfinite(khat) and sigma > 0:
        # replace tail weights by smoothed quantiles of the fitted distribution
        ranks = np.arange(1, n_tail + 1)
        quantiles = threshold + sigma / khat * ((1.0 - (ranks - 0.5) / n_tail) ** (-khat) - 1.0) \
            if khat != 0 else threshold - sigma * np.log(1.0 - (ranks - 0.5) / n_tail)
        weights[order[n_kept - n_tail:]] = np.minimum(quantiles, ratios.max())
    norm = weights / weights.sum()
    return PsisResult(
        khat=float(khat),
        n_samples=n_kept,
        n_tail=n_tail,
        max_weight_fraction=float(norm.max()),
        ess_fraction=float(1.0 / (n_kept * np.sum(norm**2))),
    )


# ---------------------------------------------------------------------------
# corner-plot data export


def hallucination_score(flow_samples, train_x, threshold: float = 3.0) -> float:
    """Fraction of flow samples farther than `threshold` standardized units
    from their nearest training point."""
    flow_samples = np.atleast_2d(np.asarray(flow_samples, dtype=float))
    train_x = np.atleast_2d(np.asarray(train_x, dtype=float))
    mean = train_x.mean(axis=0)
    std = np.maximum(train_x.std(axis=0), 1e-12)
    tree = cKDTree((train_x - mean) / std)
    dist, _ = tree.query((flow_samples - mean) / std, k=1)
    return float(np.mean(dist > threshold))


def export_corner_data(flow_samples, train_x, path, threshold: float = 3.0,
                       meta: dict | None = None) -> float:
    """Write labeled corner-plot data (source, coordinates) as CSV and return
    the hallucination score, which is also embedded in the header comment."""
    flow_samples = np.atleast_2d(np.asarray(flow_samples, dtype=float))
    train_x = np.atleast_2d(np.asarray(train_x, dtype=float))
    if flow_samples.shape[1] != train_x.shape[1]:
        raise ConfigurationError("flow samples and training points disagree on dimension")
    score = hallucination_score(flow_samples, train_x, threshold)
    dim = flow_samples.shape[1]
    header_meta = {"hallucination_score": score, "distance_threshold": threshold}
    if meta:
        header_meta.update(meta)
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(header_meta) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["source"] + [f"x{i + 1}" for i in range(dim)])
        for row in flow_samples:
            writer.writerow(["flow"] + [repr(float(v)) for v in row])
        for row in train_x:
            writer.writerow(["train"] + [repr(float(v)) for v in row])
    return score
