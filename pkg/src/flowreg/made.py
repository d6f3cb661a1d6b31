"""Masked conditioner networks for autoregressive flows.

Each layer owns one masked single-hidden-layer MLP (tanh) with two output
heads producing the raw per-dimension scale and shift signals. Parameters
for all layers live in one flat vector; the layout maps (layer, role) to a
slice of that vector. Forward and reverse-mode backward passes are written
against raw numpy so a scalar loss can be differentiated exactly.
"""

from __future__ import annotations

import numpy as np

_ROLES = ("w_in", "b_in", "w_scale", "b_scale", "w_shift", "b_shift")


def default_hidden_width(dim: int) -> int:
    return max(8 * dim, 32)


def build_masks(dim: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Input->hidden and hidden->output masks with autoregressive degrees.

    Output i may depend only on inputs 1..i-1; output 1 sees biases only.
    """
    in_deg = np.arange(1, dim + 1)
    if dim == 1:
        hid_deg = np.zeros(width, dtype=int)
    else:
        hid_deg = 1 + (np.arange(width) % (dim - 1))
    mask_in = (hid_deg[:, None] >= in_deg[None, :]).astype(float)  # (width, dim)
    mask_out = (in_deg[:, None] > hid_deg[None, :]).astype(float)  # (dim, width)
    return mask_in, mask_out


class ConditionerStack:
    """Parameter layout and per-layer math for a stack of masked conditioners."""

    def __init__(self, dim: int, width: int, n_layers: int):
        self.dim = dim
        self.width = width
        self.n_layers = n_layers
        self.mask_in, self.mask_out = build_masks(dim, width)
        shapes = {
            "w_in": (width, dim),
            "b_in": (width,),
            "w_scale": (dim, width),
            "b_scale": (dim,),
            "w_shift": (dim, width),
            "b_shift": (dim,),
        }
        self.shapes = shapes
        self.layout: dict[str, tuple[int, int, tuple[int, ...]]] = {}
        offset = 0
        for layer in range(n_layers):
            for role in _ROLES:
                size = int(np.prod(shapes[role]))
                self.layout[f"layer{layer}.{role}"] = (offset, offset + size, shapes[role])
                offset += size
        self.n_params = offset

    def _view(self, params: np.ndarray, layer: int, role: str) -> np.ndarray:
        start, stop, shape = self.layout[f"layer{layer}.{role}"]
        return params[start:stop].reshape(shape)

    def layer_weights(self, params: np.ndarray, layer: int, masked: bool = True):
        w_in = self._view(params, layer, "w_in")
        w_scale = self._view(params, layer, "w_scale")
        w_shift = self._view(params, layer, "w_shift")
        if masked:
            w_in = w_in * self.mask_in
            w_scale = w_scale * self.mask_out
            w_shift = w_shift * self.mask_out
        return (
            w_in,
            self._view(params, layer, "b_in"),
            w_scale,
            self._view(params, layer, "b_scale"),
            w_shift,
            self._view(params, layer, "b_shift"),
        )

    def init_params(self, rng: np.random.Generator, damping: float = 1e-3) -> np.ndarray:
        """Fan-in uniform weights scaled by `damping`, zero biases; masked
        entries set to zero so they never move during optimization."""
        params = np.zeros(self.n_params)
        for layer in range(self.n_layers):
            w_in = self._view(params, layer, "w_in")
            bound = 1.0 / np.sqrt(self.dim)
            w_in[...] = rng.uniform(-bound, bound, w_in.shape) * damping * self.mask_in
            for role in ("w_scale", "w_shift"):
                w = self._view(params, layer, role)
                bound = 1.0 / np.sqrt(self.width)
                w[...] = rng.uniform(-bound, bound, w.shape) * damping * self.mask_out
        return params

    def sample_prior(self, rng: np.random.Generator, std: float) -> np.ndarray:
        params = rng.normal(0.0, std, self.n_params)
        for layer in range(self.n_layers):
            self._view(params, layer, "w_in")[...] *= self.mask_in
            self._view(params, layer, "w_scale")[...] *= self.mask_out
            self._view(params, layer, "w_shift")[...] *= self.mask_out
        return params

    def forward(self, weights, v: np.ndarray):
        """Raw scale/shift signals for inputs v of shape (n, dim)."""
        w_in, b_in, w_scale, b_scale, w_shift, b_shift = weights
        h = np.tanh(v @ w_in.T + b_in)
        raw_scale = h @ w_scale.T + b_scale
        raw_shift = h @ w_shift.T + b_shift
        return h, raw_scale, raw_shift

    def backward(
        self,
        weights,
        v: np.ndarray,
        h: np.ndarray,
        d_raw_scale: np.ndarray,
        d_raw_shift: np.ndarray,
        grad: np.ndarray,
        layer: int,
    ) -> np.ndarray:
        """Accumulate parameter gradients for one layer; returns dL/dv."""
        w_in, _, w_scale, _, w_shift, _ = weights

        def acc(role, value):
            start, stop, shape = self.layout[f"layer{layer}.{role}"]
            grad[start:stop] += value.reshape(-1)

        acc("w_scale", (d_raw_scale.T @ h) * self.mask_out)
        acc("b_scale", d_raw_scale.sum(axis=0))
        acc("w_shift", (d_raw_shift.T @ h) * self.mask_out)
        acc("b_shift", d_raw_shift.sum(axis=0))
        dh = d_raw_scale @ w_scale + d_raw_shift @ w_shift
        da = dh * (1.0 - h * h)
        acc("w_in", (da.T @ v) * self.mask_in)
        acc("b_in", da.sum(axis=0))
        return da @ w_in
