"""Annealed two-stage fitting of the flow regression model.

Each outer iteration tempers the observations, refits the scalar constant
with a bracketed Brent search (reusing one cached flow evaluation per data
point), then jointly maximizes the objective over all parameters with an
L-BFGS two-loop recursion and a strong-Wolfe line search. Termination follows
a directional-derivative threshold, a loss-change window, and iteration /
evaluation caps.
"""

from __future__ import annotations

import logging
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brent as scipy_brent

from .exceptions import ConfigurationError, NumericError
from .flow import FlowConfig, FlowModel, estimate_base, initialize_flow
from .regression import (
    EvalDataset,
    LikelihoodConfig,
    RegressionObjective,
    default_shaping,
    temper_dataset,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitOptions:
    """Schedules and termination settings for the annealed fit."""

    t_end: int = 20
    t_max: int = 30
    lbfgs_max_iters: int = 500
    lbfgs_max_fevals: int = 2000
    grad_tol: float = 1e-5
    loss_window_tol: float = 1e-5
    loss_window: int = 5
    history: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.t_end <= self.t_max:
            raise ConfigurationError("need 0 <= t_end <= t_max")
        if self.history < 1 or self.loss_window < 1:
            raise ConfigurationError("history and loss_window must be positive")


@dataclass(frozen=True)
class FitTraceRow:
    iteration: int
    beta: float
    loss: float
    grad_norm: float
    log_norm_constant: float
    lbfgs_reason: str
    lbfgs_iters: int
    lbfgs_fevals: int


@dataclass
class FitResult:
    """Final state of a fit plus its per-iteration trace."""

    flow: FlowModel
    log_norm_constant: float
    trace: list[FitTraceRow]
    termination: str

    def trace_csv(self) -> str:
        lines = ["iteration,beta,loss,grad_norm,C"]
        for row in self.trace:
            lines.append(
                f"{row.iteration},{row.beta!r},{row.loss!r},{row.grad_norm!r},"
                f"{row.log_norm_constant!r}"
            )
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# 1-d refit of the constant


def optimize_constant_1d(profile, c0: float, half_width: float = 5.0, max_doublings: int = 60) -> float:
    """Maximize a concave-ish scalar profile around c0 by bracketed Brent.

    The initial bracket is [c0 - half_width, c0 + half_width], expanded
    geometrically in the improving direction. If no strict bracket appears
    (e.g. the profile plateaus), the best evaluated point is returned with
    a warning. Never returns a point worse than c0.
    """
    evaluated: dict[float, float] = {}

    def f(c: float) -> float:
        c = float(c)
        if c not in evaluated:
            evaluated[c] = float(profile(c))
        return evaluated[c]

    a, b, c = c0 - half_width, float(c0), c0 + half_width
    fa, fb, fc = f(a), f(b), f(c)
    step = half_width
    found = False
    for _ in range(max_doublings):
        if fb > fa and fb > fc:
            found = True
            break
        if fb >= fa and fb >= fc:
            break  # plateau: middle ties an end, Brent needs strict ordering
        step *= 2.0
        if fa > fc:
            c, fc = b, fb
            b, fb = a, fa
            a = b - step
            fa = f(a)
        else:
            a, fa = b, fb
            b, fb = c, fc
            c = b + step
            fc = f(c)
    if found:
        c_star = float(scipy_brent(lambda c_: -f(c_), brack=(a, b, c), tol=1e-10, maxiter=200))
        f(c_star)
    else:
        warnings.warn("no strict bracket for the constant refit; keeping best evaluated value")
    return float(max(evaluated, key=evaluated.get))


# ---------------------------------------------------------------------------
# L-BFGS with strong Wolfe line search (internally minimizes the negated loss)


@dataclass
class LbfgsResult:
    x: np.ndarray
    loss: float  # maximized objective value
    grad: np.ndarray = field(repr=False)
    reason: str = ""
    n_iters: int = 0
    n_fevals: int = 0


class _Evaluator:
    """Counts evaluations and flips the sign so we can minimize."""

    def __init__(self, value_and_grad, max_fevals):
        self.value_and_grad = value_and_grad
        self.max_fevals = max_fevals
        self.count = 0

    @property
    def exhausted(self):
        return self.count >= self.max_fevals

    def __call__(self, x):
        self.count += 1
        try:
            value, grad = self.value_and_grad(x)
        except NumericError:
            return np.inf, None
        if not np.isfinite(value):
            return np.inf, None
        return -float(value), -np.asarray(grad, dtype=float)


def _two_loop(grad, s_hist, y_hist, rho_hist):
    q = grad.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if s_hist:
        gamma = (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
        q *= gamma
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q  # approximates H * grad


def _interp_quadratic(lo, f_lo, d_lo, hi, f_hi):
    denom = f_hi - f_lo - d_lo * (hi - lo)
    if denom <= 0 or not np.isfinite(denom):
        return None
    return lo - 0.5 * d_lo * (hi - lo) ** 2 / denom


def _zoom(evaluate, x, d, f0, d0, lo, f_lo, d_lo, hi, f_hi, c1, c2):
    """Algorithm-style zoom between a low point (with derivative) and a high end."""
    result = None
    for _ in range(50):
        if evaluate.exhausted:
            break
        span = hi - lo
        trial = _interp_quadratic(lo, f_lo, d_lo, hi, f_hi) if np.isfinite(f_hi) else None
        left, right = (lo, hi) if span > 0 else (hi, lo)
        margin = 0.1 * abs(span)
        if trial is None or not (left + margin <= trial <= right - margin):
            trial = lo + 0.5 * span
        f_t, g_t = evaluate(x + trial * d)
        d_t = np.nan if g_t is None else float(g_t @ d)
        if f_t > f0 + c1 * trial * d0 or f_t >= f_lo or g_t is None:
            hi, f_hi = trial, f_t
        else:
            if abs(d_t) <= -c2 * d0:
                result = (trial, f_t, g_t)
                break
            if d_t * span >= 0:
                hi, f_hi = lo, f_lo
            lo, f_lo, d_lo = trial, f_t, d_t
        if abs(hi - lo) <= 1e-14 * max(1.0, abs(lo)):
            break
    return result


def _strong_wolfe(evaluate, x, d, f0, g0, alpha0, c1=1e-4, c2=0.9, max_expansions=25):
    """Strong-Wolfe search along d from x; returns (alpha, f, grad) or None."""
    d0 = float(g0 @ d)
    if d0 >= 0:
        return None
    alpha_prev, f_prev, d_prev = 0.0, f0, d0
    alpha = alpha0
    for i in range(max_expansions):
        if evaluate.exhausted:
            return None
        f_a, g_a = evaluate(x + alpha * d)
        d_a = np.nan if g_a is None else float(g_a @ d)
        if f_a > f0 + c1 * alpha * d0 or (i > 0 and f_a >= f_prev) or g_a is None:
            return _zoom(evaluate, x, d, f0, d0, alpha_prev, f_prev, d_prev, alpha, f_a, c1, c2)
        if abs(d_a) <= -c2 * d0:
            return alpha, f_a, g_a
        if d_a >= 0:
            return _zoom(evaluate, x, d, f0, d0, alpha, f_a, d_a, alpha_prev, f_prev, c1, c2)
        alpha_prev, f_prev, d_prev = alpha, f_a, d_a
        alpha = min(alpha * 2.0, 1e10)
    return None


def lbfgs_maximize(value_and_grad, x0, options: FitOptions) -> LbfgsResult:
    """Maximize a smooth objective with two-loop L-BFGS and strong Wolfe steps.

    Termination reasons: ``directional_derivative`` (post-step |grad . d|
    below grad_tol), ``loss_window`` (loss changes over the last window all
    below loss_window_tol), ``max_iterations``, ``max_fevals``, and
    ``line_search_failure`` after one steepest-descent restart.
    """
    evaluate = _Evaluator(value_and_grad, options.lbfgs_max_fevals)
    x = np.asarray(x0, dtype=float).copy()
    f, g = evaluate(x)
    if g is None:
        raise NumericError("objective not finite at the initial point")
    best_f, best_x, best_g = f, x.copy(), g.copy()
    losses = deque([f], maxlen=options.loss_window + 1)
    s_hist: deque = deque(maxlen=options.history)
    y_hist: deque = deque(maxlen=options.history)
    rho_hist: deque = deque(maxlen=options.history)
    reason = "max_iterations"
    restarted = False
    n_iters = 0

    while n_iters < options.lbfgs_max_iters:
        n_iters += 1
        if len(losses) == options.loss_window + 1:
            diffs = np.abs(np.diff(np.asarray(losses)))
            if diffs.max() < options.loss_window_tol:
                reason = "loss_window"
                break
        if evaluate.exhausted:
            reason = "max_fevals"
            break
        d = -_two_loop(g, s_hist, y_hist, rho_hist)
        if g @ d >= 0:  # not a descent direction, drop the history
            s_hist.clear(), y_hist.clear(), rho_hist.clear()
            d = -g
        if not np.any(d):
            losses.append(f)
            continue
        alpha0 = 1.0 if s_hist else min(1.0, 1.0 / max(np.abs(g).sum(), 1e-12))
        hit = _strong_wolfe(evaluate, x, d, f, g, alpha0)
        if hit is None:
            if evaluate.exhausted:
                reason = "max_fevals"
                break
            if not restarted:
                restarted = True
                s_hist.clear(), y_hist.clear(), rho_hist.clear()
                d = -g
                hit = _strong_wolfe(evaluate, x, d, f, g, min(1.0, 1.0 / max(np.abs(g).sum(), 1e-12)))
            if hit is None:
                reason = "max_fevals" if evaluate.exhausted else "line_search_failure"
                break
        alpha, f_new, g_new = hit
        s = alpha * d
        yv = g_new - g
        sy = s @ yv
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(yv):
            s_hist.append(s)
            y_hist.append(yv)
            rho_hist.append(1.0 / sy)
        x = x + s
        f, g = f_new, g_new
        losses.append(f)
        if f < best_f:
            best_f, best_x, best_g = f, x.copy(), g.copy()
        if abs(g @ d) < options.grad_tol:
            reason = "directional_derivative"
            break
    return LbfgsResult(
        x=best_x,
        loss=-best_f,
        grad=-best_g,
        reason=reason,
        n_iters=n_iters,
        n_fevals=evaluate.count,
    )


# ---------------------------------------------------------------------------
# fit driver


def linear_schedule(t: int, t_end: int) -> float:
    if t_end == 0:
        return 1.0
    return min(t / t_end, 1.0)


def fit_flow_regression(
    dataset: EvalDataset,
    flow_config: FlowConfig | None = None,
    likelihood: LikelihoodConfig | None = None,
    options: FitOptions | None = None,
    use_flow_prior: bool = True,
    schedule=None,
    callback=None,
) -> FitResult:
    """Fit a flow and log-normalizing-constant to log-density observations.

    Runs the annealed two-stage loop: for each iteration the observations are
    tempered, the constant is refit with Brent, then all parameters are
    jointly maximized with L-BFGS. After the schedule reaches beta = 1 the
    loop stops early once outer losses stabilize. `schedule` may override the
    default linear tempering with any callable t -> beta in [0, 1].
    """
    options = options or FitOptions()
    flow_config = flow_config or FlowConfig(dim=dataset.dim)
    likelihood = likelihood or LikelihoodConfig(shaping=default_shaping(dataset.dim))
    if flow_config.dim != dataset.dim:
        raise ConfigurationError("flow config dimension does not match the dataset")
    if dataset.n < dataset.dim + 2:
        raise ConfigurationError(
            f"need at least dim + 2 = {dataset.dim + 2} observations, got {dataset.n}"
        )
    rng = np.random.default_rng(options.seed)
    base = estimate_base(dataset, likelihood.shaping.start_gap)
    engine = initialize_flow(flow_config, base, rng)
    params = engine.params.copy()
    c = 0.0
    rows: list[FitTraceRow] = []
    post_anneal_losses: deque = deque(maxlen=options.loss_window + 1)
    termination = "t_max_reached"
    for t in range(options.t_max + 1):
        beta = schedule(t) if schedule is not None else linear_schedule(t, options.t_end)
        if not 0.0 <= beta <= 1.0:
            raise ConfigurationError(f"schedule produced beta={beta} outside [0, 1]")
        try:
            tempered = temper_dataset(dataset, beta, base)
            objective = RegressionObjective(engine, tempered, likelihood, use_flow_prior)
            c = optimize_constant_1d(objective.constant_profile(params), c)
            res = lbfgs_maximize(objective.value_and_grad, objective.pack(params, c), options)
        except NumericError as err:
            raise NumericError(f"iteration {t} (beta={beta:.3f}): {err}") from err
        params, c = objective.unpack(res.x)
        row = FitTraceRow(
            iteration=t,
            beta=beta,
            loss=res.loss,
            grad_norm=float(np.linalg.norm(res.grad)),
            log_norm_constant=c,
            lbfgs_reason=res.reason,
            lbfgs_iters=res.n_iters,
            lbfgs_fevals=res.n_fevals,
        )
        rows.append(row)
        logger.info(
            "iter %d beta=%.3f loss=%.4f C=%.4f (%s, %d fevals)",
            t, beta, res.loss, c, res.reason, res.n_fevals,
        )
        if callback is not None:
            callback(row)
        if beta >= 1.0:
            post_anneal_losses.append(res.loss)
            if len(post_anneal_losses) == options.loss_window + 1:
                diffs = np.abs(np.diff(np.asarray(post_anneal_losses)))
                if diffs.max() < options.loss_window_tol:
                    termination = "outer_loss_window"
                    break
    return FitResult(
        flow=FlowModel(flow_config, base, params),
        log_norm_constant=c,
        trace=rows,
        termination=termination,
    )
