"""Generation and ingestion of MAP-optimization evaluation traces.

A built-in (mu/mu_w, lambda)-CMA-ES maximizes the target log density in the
original space, recording every evaluation. Traces round-trip through a
JSON-lines file whose header carries the dimension and parameter-space
metadata, and ingest into an inference-space ``EvalDataset`` with Jacobian
corrections and noise-variance flooring.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError, DomainError
from .regression import SIGMA2_MIN, EvalDataset
from .spaces import ParameterSpace, log_abs_det_jacobian, to_inference
from .targets import TargetDensity

logger = logging.getLogger(__name__)

TRACE_FORMAT = "flowreg-trace"
TRACE_VERSION = 1


@dataclass(frozen=True)
class TraceRecord:
    """One log-density evaluation in the original space."""

    x: np.ndarray
    y: float
    sigma: float
    run_id: int
    eval_index: int

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        if self.sigma < 0:
            raise ConfigurationError("sigma must be >= 0")


@dataclass(frozen=True)
class TraceFile:
    records: list[TraceRecord]
    space: ParameterSpace | None
    meta: dict
    n_dropped: int = 0


def population_size(dim: int) -> int:
    return 4 + int(np.floor(3.0 * np.log(dim)))


def _reflect(z, lo, hi):
    """Reflect coordinates into [lo, hi]; infinite bounds pass through."""
    out = z.copy()
    for _ in range(100):
        below = out < lo
        above = out > hi
        if not (below.any() or above.any()):
            return out
        out = np.where(below, 2 * lo - out, out)
        out = np.where(above, 2 * hi - out, out)
    return np.clip(out, lo, hi)


def run_cma_es(
    target: TargetDensity,
    budget: int,
    start: np.ndarray,
    rng: np.random.Generator,
    run_id: int = 0,
    sigma0: float = 0.3,
) -> list[TraceRecord]:
    """Maximize the target log density, recording every evaluation.

    Standard tutorial constants; the search runs in coordinates scaled by the
    plausible widths, so ``sigma0`` is a fraction of the plausible range. Box
    constraints are handled by reflection and the reflected (i.e. actually
    evaluated) point is recorded. Stops after exactly `budget` evaluations.
    """
    space = target.space
    dim = space.dim
    lam = population_size(dim)
    if budget < lam:
        raise ConfigurationError(f"budget {budget} below population size {lam}")
    width = space.plausible_hi - space.plausible_lo
    to_scaled = lambda x: (x - space.plausible_lo) / width
    to_orig = lambda z: space.plausible_lo + z * width
    z_lo = (space.lower - space.plausible_lo) / width
    z_hi = (space.upper - space.plausible_lo) / width

    mu = lam // 2
    raw = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    weights = raw / raw.sum()
    mu_eff = 1.0 / np.sum(weights**2)
    c_sigma = (mu_eff + 2.0) / (dim + mu_eff + 5.0)
    d_sigma = 1.0 + 2.0 * max(0.0, np.sqrt((mu_eff - 1.0) / (dim + 1.0)) - 1.0) + c_sigma
    c_c = (4.0 + mu_eff / dim) / (dim + 4.0 + 2.0 * mu_eff / dim)
    c_1 = 2.0 / ((dim + 1.3) ** 2 + mu_eff)
    c_mu = min(1.0 - c_1, 2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((dim + 2.0) ** 2 + mu_eff))
    chi_n = np.sqrt(dim) * (1.0 - 1.0 / (4.0 * dim) + 1.0 / (21.0 * dim**2))

    mean = to_scaled(np.asarray(start, dtype=float))
    sigma = sigma0
    cov = np.eye(dim)
    p_sigma = np.zeros(dim)
    p_c = np.zeros(dim)
    records: list[TraceRecord] = []
    used = 0
    gen = 0
    while used < budget:
        eigvals, eigvecs = np.linalg.eigh(cov)
        eigvals = np.maximum(eigvals, 1e-20)
        sqrt_d = np.sqrt(eigvals)
        n_eval = min(lam, budget - used)
        normals = rng.standard_normal((n_eval, dim))
        steps = normals * sqrt_d @ eigvecs.T
        z = _reflect(mean + sigma * steps, z_lo, z_hi)
        x = to_orig(z)
        y = np.atleast_1d(target.log_density(x))
        noise = np.atleast_1d(target.noise_std(x))
        for i in range(n_eval):
            records.append(TraceRecord(x[i], float(y[i]), float(noise[i]), run_id, used + i))
        used += n_eval
        if n_eval < lam:
            break  # budget exhausted mid-generation, no update possible
        order = np.argsort(-y)
        elite = z[order[:mu]]
        old_mean = mean
        mean = weights @ elite
        shift = (mean - old_mean) / sigma
        inv_sqrt = eigvecs * (1.0 / sqrt_d) @ eigvecs.T
        p_sigma = (1.0 - c_sigma) * p_sigma + np.sqrt(
            c_sigma * (2.0 - c_sigma) * mu_eff
        ) * (inv_sqrt @ shift)
        gen += 1
        h_sig = float(
            np.linalg.norm(p_sigma) / np.sqrt(1.0 - (1.0 - c_sigma) ** (2.0 * gen))
            < (1.4 + 2.0 / (dim + 1.0)) * chi_n
        )
        p_c = (1.0 - c_c) * p_c + h_sig * np.sqrt(c_c * (2.0 - c_c) * mu_eff) * shift
        elite_steps = (elite - old_mean) / sigma
        rank_mu = (weights[:, None] * elite_steps).T @ elite_steps
        cov = (
            (1.0 - c_1 - c_mu) * cov
            + c_1 * (np.outer(p_c, p_c) + (1.0 - h_sig) * c_c * (2.0 - c_c) * cov)
            + c_mu * rank_mu
        )
        sigma *= np.exp((c_sigma / d_sigma) * (np.linalg.norm(p_sigma) / chi_n - 1.0))
        sigma = min(sigma, 1e6)
    return records


def generate_training_set(
    target: TargetDensity,
    total_budget: int | None = None,
    n_runs: int = 10,
    seed: int = 0,
    budget_multiplier: float = 3000.0,
) -> list[TraceRecord]:
    """Multi-start CMA-ES traces totaling exactly `total_budget` evaluations.

    Defaults to the 3000 * dim budget split evenly across runs started
    uniformly inside the plausible box.
    """
    if n_runs < 1:
        raise ConfigurationError("need n_runs >= 1")
    space = target.space
    if total_budget is None:
        total_budget = int(round(budget_multiplier * space.dim))
    per_run = total_budget // n_runs
    remainder = total_budget - per_run * n_runs
    if per_run < population_size(space.dim):
        raise ConfigurationError(
            f"budget {total_budget} over {n_runs} runs is below the population size"
        )
    root = np.random.SeedSequence(seed)
    seeds = root.spawn(n_runs + 1)
    start_rng = np.random.default_rng(seeds[0])
    records: list[TraceRecord] = []
    for run in range(n_runs):
        budget = per_run + (1 if run < remainder else 0)
        start = start_rng.uniform(space.plausible_lo, space.plausible_hi)
        rng = np.random.default_rng(seeds[run + 1])
        run_records = run_cma_es(target, budget, start, rng, run_id=run)
        best = max(r.y for r in run_records)
        logger.info("trace run %d: %d evals, best log-density %.4f", run, budget, best)
        records.extend(run_records)
    return records


# ---------------------------------------------------------------------------
# file format


def write_trace(path, records: list[TraceRecord], space: ParameterSpace | None = None,
                meta: dict | None = None) -> None:
    if not records:
        raise ConfigurationError("refusing to write an empty trace")
    dim = records[0].x.size
    header = {
        "format": TRACE_FORMAT,
        "version": TRACE_VERSION,
        "dim": dim,
        "space": space.to_dict() if space is not None else None,
        "meta": meta or {},
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in records:
            row = {
                "run": rec.run_id,
                "i": rec.eval_index,
                "x": rec.x.tolist(),
                "y": rec.y,
                "sigma": rec.sigma,
            }
            fh.write(json.dumps(row) + "\n")


def read_trace(path) -> TraceFile:
    """Parse a trace file, validating structure and dropping non-finite rows.

    Raises on malformed lines (with the line number), non-monotone
    eval_index within a run, or non-finite coordinates. Rows with non-finite
    y are dropped and counted.
    """
    records: list[TraceRecord] = []
    n_dropped = 0
    with open(path) as fh:
        first = fh.readline()
        try:
            header = json.loads(first)
            if header.get("format") != TRACE_FORMAT:
                raise ValueError("missing trace header")
            dim = int(header["dim"])
        except (ValueError, KeyError, TypeError) as err:
            raise ConfigurationError(f"{path}: line 1: invalid trace header ({err})") from err
        space = ParameterSpace.from_dict(header["space"]) if header.get("space") else None
        last_index: dict[int, int] = {}
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                x = np.asarray(row["x"], dtype=float)
                y = float(row["y"])
                sigma = float(row["sigma"])
                run_id = int(row["run"])
                eval_index = int(row["i"])
            except (ValueError, KeyError, TypeError) as err:
                raise ConfigurationError(f"{path}: line {lineno}: malformed record ({err})") from err
            if x.shape != (dim,):
                raise ConfigurationError(f"{path}: line {lineno}: expected {dim} coordinates")
            if not np.isfinite(x).all():
                raise ConfigurationError(f"{path}: line {lineno}: non-finite coordinates")
            if run_id in last_index and eval_index <= last_index[run_id]:
                raise ConfigurationError(
                    f"{path}: line {lineno}: eval_index not strictly increasing within run {run_id}"
                )
            last_index[run_id] = eval_index
            if not np.isfinite(y):
                n_dropped += 1
                continue
            records.append(TraceRecord(x, y, sigma, run_id, eval_index))
    if n_dropped:
        warnings.warn(f"{path}: dropped {n_dropped} rows with non-finite log density")
    return TraceFile(records=records, space=space, meta=header.get("meta", {}), n_dropped=n_dropped)


# ---------------------------------------------------------------------------
# ingestion


def build_dataset(records: list[TraceRecord], space: ParameterSpace) -> EvalDataset:
    """Inference-space dataset: transformed points, Jacobian-corrected values,
    floored noise variances. Points sitting exactly on a finite bound are
    nudged inward by 1e-10 of the bound width with a warning."""
    if not records:
        raise ConfigurationError("no trace records to ingest")
    x = np.array([r.x for r in records], dtype=float)
    y = np.array([r.y for r in records], dtype=float)
    sigma2 = np.maximum(np.array([r.sigma for r in records], dtype=float) ** 2, SIGMA2_MIN)
    keep = np.isfinite(y)
    if not keep.all():
        warnings.warn(f"dropping {int((~keep).sum())} non-finite observations at ingestion")
        x, y, sigma2 = x[keep], y[keep], sigma2[keep]
    finite = np.isfinite(space.lower) & np.isfinite(space.upper)
    if finite.any():
        nudge = 1e-10 * (space.upper - space.lower)
        on_lo = finite & (x <= space.lower)
        on_hi = finite & (x >= space.upper)
        if on_lo.any() or on_hi.any():
            warnings.warn(
                f"nudging {int(on_lo.sum() + on_hi.sum())} boundary coordinates inward"
            )
            x = np.where(on_lo, space.lower + nudge, x)
            x = np.where(on_hi, space.upper - nudge, x)
    try:
        z = to_inference(space, x)
    except DomainError as err:
        raise DomainError(f"trace contains points outside the space: {err}") from err
    y_inf = y + log_abs_det_jacobian(space, z)
    return EvalDataset(z, y_inf, sigma2)


def load_dataset(path, space: ParameterSpace | None = None) -> tuple[EvalDataset, ParameterSpace]:
    """Read a trace file and ingest it; the space may come from the header."""
    trace = read_trace(path)
    space = space or trace.space
    if space is None:
        raise ConfigurationError(f"{path} carries no space metadata; provide one explicitly")
    return build_dataset(trace.records, space), space
