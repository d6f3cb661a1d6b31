"""Mapping between the user's (possibly bounded) parameter space and the
unbounded, plausibly-standardized coordinates in which all fitting happens.

Bounded coordinates pass through a scaled logit, half-bounded ones through
log/exp, and every coordinate is then rescaled so the plausible interval
lands on [-0.5, 0.5]. Log-density values move between the two spaces via
``log_abs_det_jacobian``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import expit

from .exceptions import ConfigurationError, DomainError

# per-dimension kinds
_UNBOUNDED = 0
_LOWER = 1
_UPPER = 2
_BOTH = 3


def _as_1d(values, dim, name):
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        arr = np.full(dim, float(arr))
    if arr.shape != (dim,):
        raise ConfigurationError(f"{name} must have shape ({dim},), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class ParameterSpace:
    """Box domain with finite plausible ranges.

    Parameters
    ----------
    lower, upper : array-like of shape (dim,)
        Hard bounds; entries may be ``-inf`` / ``+inf``.
    plausible_lo, plausible_hi : array-like of shape (dim,)
        Finite plausible interval per dimension, strictly inside the bounds.
        These map exactly onto [-0.5, 0.5] in inference space.
    """

    lower: np.ndarray
    upper: np.ndarray
    plausible_lo: np.ndarray
    plausible_hi: np.ndarray

    def __post_init__(self):
        dim = np.asarray(self.plausible_lo).size
        if dim < 1:
            raise ConfigurationError("space must have at least one dimension")
        for name in ("lower", "upper", "plausible_lo", "plausible_hi"):
            object.__setattr__(self, name, _as_1d(getattr(self, name), dim, name))
        if not (np.isfinite(self.plausible_lo).all() and np.isfinite(self.plausible_hi).all()):
            raise ConfigurationError("plausible ranges must be finite")
        ok = (
            (self.lower < self.plausible_lo)
            & (self.plausible_lo < self.plausible_hi)
            & (self.plausible_hi < self.upper)
        )
        if not ok.all():
            bad = int(np.flatnonzero(~ok)[0])
            raise ConfigurationError(
                f"need lower < plausible_lo < plausible_hi < upper; violated at dimension {bad}"
            )

    @property
    def dim(self) -> int:
        return self.lower.size

    @cached_property
    def _kind(self) -> np.ndarray:
        lo_fin = np.isfinite(self.lower)
        hi_fin = np.isfinite(self.upper)
        kind = np.full(self.dim, _UNBOUNDED, dtype=int)
        kind[lo_fin & ~hi_fin] = _LOWER
        kind[~lo_fin & hi_fin] = _UPPER
        kind[lo_fin & hi_fin] = _BOTH
        return kind

    @cached_property
    def _transformed_plausible(self) -> tuple[np.ndarray, np.ndarray]:
        a = self._raw_forward(self.plausible_lo[None, :])[0]
        b = self._raw_forward(self.plausible_hi[None, :])[0]
        return a, b

    # raw bijection to the real line, before affine standardization
    def _raw_forward(self, x):
        kind = self._kind
        l, u = self.lower, self.upper
        t = np.array(x, dtype=float, copy=True)
        both = kind == _BOTH
        if both.any():
            t[:, both] = np.log(x[:, both] - l[both]) - np.log(u[both] - x[:, both])
        lo = kind == _LOWER
        if lo.any():
            t[:, lo] = np.log(x[:, lo] - l[lo])
        hi = kind == _UPPER
        if hi.any():
            t[:, hi] = -np.log(u[hi] - x[:, hi])
        return t

    def _raw_inverse(self, t):
        kind = self._kind
        l, u = self.lower, self.upper
        x = np.array(t, dtype=float, copy=True)
        both = kind == _BOTH
        if both.any():
            tb = t[:, both]
            width = (u - l)[both]
            # branch on sign so precision is kept near whichever bound is
            # closer; clamp one ulp inside so the range stays the open box
            # even when the logistic saturates in floating point
            x[:, both] = np.clip(
                np.where(tb >= 0.0, u[both] - width * expit(-tb), l[both] + width * expit(tb)),
                np.nextafter(l[both], u[both]),
                np.nextafter(u[both], l[both]),
            )
        lo = kind == _LOWER
        if lo.any():
            x[:, lo] = np.maximum(l[lo] + np.exp(t[:, lo]), np.nextafter(l[lo], np.inf))
        hi = kind == _UPPER
        if hi.any():
            x[:, hi] = np.minimum(u[hi] - np.exp(-t[:, hi]), np.nextafter(u[hi], -np.inf))
        return x

    def to_dict(self) -> dict:
        def enc(arr):
            return [None if not np.isfinite(v) else float(v) for v in arr]

        return {
            "lower": enc(self.lower),
            "upper": enc(self.upper),
            "plausible_lo": [float(v) for v in self.plausible_lo],
            "plausible_hi": [float(v) for v in self.plausible_hi],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ParameterSpace":
        def dec(values, fill):
            return np.array([fill if v is None else float(v) for v in values])

        return cls(
            lower=dec(doc["lower"], -np.inf),
            upper=dec(doc["upper"], np.inf),
            plausible_lo=np.asarray(doc["plausible_lo"], dtype=float),
            plausible_hi=np.asarray(doc["plausible_hi"], dtype=float),
        )


def unbounded_space(plausible_lo, plausible_hi) -> ParameterSpace:
    """Unbounded space with the given plausible interval per dimension."""
    plo = np.atleast_1d(np.asarray(plausible_lo, dtype=float))
    phi = np.atleast_1d(np.asarray(plausible_hi, dtype=float))
    dim = plo.size
    return ParameterSpace(np.full(dim, -np.inf), np.full(dim, np.inf), plo, phi)


def _prep(space, x):
    arr = np.asarray(x, dtype=float)
    squeeze = arr.ndim == 1
    pts = np.atleast_2d(arr)
    if pts.shape[-1] != space.dim:
        raise DomainError(f"expected points of dimension {space.dim}, got shape {arr.shape}")
    return pts, squeeze


def to_inference(space: ParameterSpace, x_orig) -> np.ndarray:
    """Map original-space points to inference space.

    Parameters
    ----------
    space : ParameterSpace
    x_orig : array of shape (dim,) or (n, dim)
        Points strictly inside the bounds on bounded dimensions.

    Returns
    -------
    Array of the same shape in inference space, where the plausible interval
    is [-0.5, 0.5] per dimension.
    """
    pts, squeeze = _prep(space, x_orig)
    below = pts <= space.lower
    above = pts >= space.upper
    if below.any() or above.any():
        bad = int(np.flatnonzero((below | above).any(axis=0))[0])
        raise DomainError(
            f"point on or outside bounds in dimension {bad} "
            f"(bounds [{space.lower[bad]}, {space.upper[bad]}])"
        )
    t = space._raw_forward(pts)
    a, b = space._transformed_plausible
    z = (t - 0.5 * (a + b)) / (b - a)
    return z[0] if squeeze else z


def from_inference(space: ParameterSpace, x_inf) -> np.ndarray:
    """Inverse of :func:`to_inference`; maps finite inference-space points
    back into the open box."""
    pts, squeeze = _prep(space, x_inf)
    a, b = space._transformed_plausible
    t = pts * (b - a) + 0.5 * (a + b)
    x = space._raw_inverse(t)
    return x[0] if squeeze else x


def _softplus(t):
    return np.log1p(np.exp(-np.abs(t))) + np.maximum(t, 0.0)


def log_abs_det_jacobian(space: ParameterSpace, x_inf) -> np.ndarray:
    """log |d x_orig / d x_inf| at inference-space points.

    Adding the returned value to an original-space log density gives the
    log density in inference space:
    ``log p_inf(z) = log p_orig(from_inference(z)) + log_abs_det_jacobian(z)``.
    """
    pts, squeeze = _prep(space, x_inf)
    a, b = space._transformed_plausible
    t = pts * (b - a) + 0.5 * (a + b)
    out = np.full(pts.shape[0], np.sum(np.log(b - a)))
    kind = space._kind
    both = kind == _BOTH
    if both.any():
        tb = t[:, both]
        width = (space.upper - space.lower)[both]
        out += np.sum(np.log(width) - _softplus(tb) - _softplus(-tb), axis=1)
    lo = kind == _LOWER
    if lo.any():
        out += np.sum(t[:, lo], axis=1)
    hi = kind == _UPPER
    if hi.any():
        out += np.sum(-t[:, hi], axis=1)
    return float(out[0]) if squeeze else out
