"""Differentiable building blocks with hand-written backward passes.

Every layer is a pair of plain functions: ``*_forward`` returns the output and
a cache, ``*_backward`` takes the upstream gradient and that cache. Arrays
keep the dtype of their inputs, so the same code runs in float32 for training
and float64 for gradient checking.

Tensor layout is ``(batch, maps, electrodes, samples)`` throughout.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    pass


class InvalidKernelError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    pass


class GradientCheckError(RuntimeError):
    pass


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _require_ndim(x, ndim, name):
    if x.ndim != ndim:
        raise DimensionError(f"{name}: expected {ndim} dims, got shape {x.shape}")


# -- temporal convolution ---------------------------------------------------

def temporal_conv_forward(x, weights, bias):
    """Valid 1-D convolution along samples with ``k`` kernels of width ``m1``.

    x: (b, 1, C, T), weights: (k, 1, 1, m1), bias: (k,) -> (b, k, C, T - m1 + 1)
    """
    _require_ndim(x, 4, "temporal_conv input")
    _require_ndim(weights, 4, "temporal_conv weights")
    if x.shape[1] != 1 or weights.shape[1:3] != (1, 1):
        raise DimensionError(
            f"temporal_conv expects one input map, got x {x.shape}, w {weights.shape}")
    k, m1 = weights.shape[0], weights.shape[3]
    if bias.shape != (k,):
        raise DimensionError(f"temporal_conv bias shape {bias.shape} != ({k},)")
    T = x.shape[3]
    if m1 > T:
        raise InvalidKernelError(f"kernel width {m1} exceeds {T} samples")
    windows = sliding_window_view(x[:, 0], m1, axis=-1)       # (b, C, L, m1)
    w2 = weights.reshape(k, m1)
    out = windows @ w2.T                                       # (b, C, L, k)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + bias[None, :, None, None]
    return out, (windows, w2, x.shape)


def temporal_conv_backward(dout, cache, need_dx=True):
    windows, w2, x_shape = cache
    k, m1 = w2.shape
    b, _, C, T = x_shape
    L = T - m1 + 1
    dout_t = dout.transpose(0, 2, 3, 1)                        # (b, C, L, k)
    dw = np.tensordot(dout_t, windows, axes=([0, 1, 2], [0, 1, 2]))  # (k, m1)
    db = dout.sum(axis=(0, 2, 3))
    dx = None
    if need_dx:
        dwin = dout_t @ w2                                     # (b, C, L, m1)
        dx = np.zeros(x_shape, dtype=dout.dtype)
        for j in range(m1):
            dx[:, 0, :, j:j + L] += dwin[..., j]
    return dx, dw.reshape(k, 1, 1, m1), db


# -- average pooling --------------------------------------------------------

def pool_output_length(length, m2, s2):
    return (length - m2) // s2 + 1


def _pool_matrix(length, m2, s2, dtype):
    n_out = pool_output_length(length, m2, s2)
    P = np.zeros((length, n_out), dtype=dtype)
    for i in range(n_out):
        P[i * s2:i * s2 + m2, i] = 1.0 / m2
    return P


def avg_pool_forward(x, m2, s2):
    """Mean over windows of ``m2`` samples taken every ``s2`` samples (no padding)."""
    length = x.shape[-1]
    if m2 > length or m2 < 1:
        raise InvalidKernelError(f"pool width {m2} invalid for {length} samples")
    if s2 < 1:
        raise InvalidKernelError(f"pool stride must be >= 1, got {s2}")
    P = _pool_matrix(length, m2, s2, x.dtype)
    return x @ P, P


def avg_pool_backward(dout, P):
    return dout @ P.T


# -- spatial convolution ----------------------------------------------------

def spatial_conv_forward(x, weights, bias):
    """Convolution whose kernel spans every electrode and every input map.

    x: (b, k, C, L), weights: (k_out, k, C, 1), bias: (k_out,) -> (b, k_out, 1, L)
    """
    _require_ndim(x, 4, "spatial_conv input")
    _require_ndim(weights, 4, "spatial_conv weights")
    b, k, C, L = x.shape
    k_out = weights.shape[0]
    if weights.shape[1:] != (k, C, 1):
        raise DimensionError(
            f"spatial_conv weights {weights.shape} incompatible with input {x.shape}")
    if bias.shape != (k_out,):
        raise DimensionError(f"spatial_conv bias shape {bias.shape} != ({k_out},)")
    x2 = x.reshape(b, k * C, L)
    w2 = weights.reshape(k_out, k * C)
    out = (w2 @ x2) + bias[None, :, None]
    return out[:, :, None, :], (x2, w2, x.shape, weights.shape)


def spatial_conv_backward(dout, cache):
    x2, w2, x_shape, w_shape = cache
    d2 = dout[:, :, 0, :]                                      # (b, k_out, L)
    dw = np.einsum("bgl,bfl->gf", d2, x2, optimize=True)
    db = d2.sum(axis=(0, 2))
    dx = (w2.T @ d2).reshape(x_shape)
    return dx, dw.reshape(w_shape), db


# -- batch normalisation ----------------------------------------------------

def batch_norm_forward(x, gamma, beta, running_mean, running_var, mode="train",
                       eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-map normalisation over (batch, electrode, sample).

    Returns ``(y, cache, (new_running_mean, new_running_var))``; the running
    statistics are returned, never modified in place.
    """
    _require_ndim(x, 4, "batch_norm input")
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if mode == "train":
        if x.shape[0] < 2:
            raise DegenerateBatchError("batch_norm in train mode needs batch >= 2")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        n = x.size // x.shape[1]
        unbiased = var * (n / max(n - 1, 1))
        new_stats = ((1 - momentum) * running_mean + momentum * mean,
                     (1 - momentum) * running_var + momentum * unbiased)
    elif mode == "eval":
        mean, var = running_mean, running_var
        new_stats = (running_mean, running_var)
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    y = gamma.reshape(shape) * xhat + beta.reshape(shape)
    return y, (xhat, inv_std, gamma, mode), new_stats


def batch_norm_backward(dout, cache):
    xhat, inv_std, gamma, mode = cache
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma.reshape(shape)
    if mode == "eval":
        dx = dxhat * inv_std.reshape(shape)
    else:
        # batch statistics depend on x, hence the two centring terms
        dx = inv_std.reshape(shape) * (
            dxhat
            - dxhat.mean(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
    return dx, dgamma, dbeta


# -- activations ------------------------------------------------------------

def elu_forward(x):
    y = np.where(x > 0, x, np.expm1(np.minimum(x, 0)))
    return y, x


def elu_backward(dout, x):
    return dout * np.where(x > 0, 1.0, np.exp(np.minimum(x, 0))).astype(dout.dtype)


def leaky_relu(x, slope=0.2):
    return np.where(x > 0, x, slope * x)


def leaky_relu_grad(x, slope=0.2):
    return np.where(x > 0, 1.0, slope).astype(x.dtype)


# -- dense ------------------------------------------------------------------

def linear_forward(x, W, bias):
    """``x @ W + bias`` for x (b, n), W (n, D)."""
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"linear: cannot multiply {x.shape} by {W.shape}")
    if bias.shape != (W.shape[1],):
        raise DimensionError(f"linear bias shape {bias.shape} != ({W.shape[1]},)")
    return x @ W + bias, (x, W)


def linear_backward(dout, cache):
    x, W = cache
    return dout @ W.T, x.T @ dout, dout.sum(axis=0)


def softmax_rows(m):
    """Row-wise softmax over the last axis, shifted by the row max."""
    z = m - m.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(dout, p):
    return p * (dout - (dout * p).sum(axis=-1, keepdims=True))


# -- finite-difference checker ---------------------------------------------

@dataclass
class GradCheckReport:
    name: str
    max_rel_error: dict[str, float] = field(default_factory=dict)
    n_points: dict[str, int] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def __str__(self):
        parts = ", ".join(f"{k}={v:.2e}" for k, v in self.max_rel_error.items())
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {parts}"


def check_gradients(
    forward: Callable[..., np.ndarray],
    backward: Callable[[np.ndarray], Mapping[str, np.ndarray]],
    inputs: Mapping[str, np.ndarray],
    tolerance: float = 1e-4,
    n_points: int = 10,
    h: float = 1e-5,
    seed: int = 0,
    exclude: Mapping[str, Callable[[np.ndarray], np.ndarray]] | None = None,
    name: str = "layer",
    abs_floor: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``forward(**inputs)`` must return an array; ``backward(dout)`` must return
    gradients keyed like ``inputs`` for the most recent forward call (keys it
    omits are not checked). The scalar being differentiated is
    ``sum(forward(...) * R)`` with a fixed random ``R``.

    ``exclude`` maps an input name to a predicate giving a boolean mask of
    coordinates that must not be sampled (kinks of non-smooth layers).
    The relative error uses ``max(|analytic|, |numeric|, abs_floor)`` as its
    denominator so that gradients which vanish identically (e.g. a bias
    feeding batch normalisation) are not judged on rounding noise.
    """
    rng = np.random.default_rng(seed)
    inputs = {k: np.array(v, dtype=np.float64, copy=True) for k, v in inputs.items()}
    out = np.asarray(forward(**inputs), dtype=np.float64)
    R = rng.standard_normal(out.shape)
    analytic = backward(R)

    def objective():
        return float(np.sum(np.asarray(forward(**inputs), dtype=np.float64) * R))

    report = GradCheckReport(name=name, tolerance=tolerance)
    for key, grad in analytic.items():
        if grad is None or key not in inputs:
            continue
        arr = inputs[key]
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != arr.shape:
            raise GradientCheckError(
                f"{name}: gradient for {key!r} has shape {grad.shape}, expected {arr.shape}")
        if not np.all(np.isfinite(grad)):
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(grad))[0])
            raise GradientCheckError(f"{name}: non-finite gradient for {key!r} at {bad}")
        allowed = np.ones(arr.shape, dtype=bool)
        if exclude and key in exclude:
            allowed &= ~exclude[key](arr)
        candidates = np.flatnonzero(allowed.ravel())
        if candidates.size == 0:
            continue
        picks = rng.choice(candidates, size=min(n_points, candidates.size), replace=False)
        worst = 0.0
        flat = arr.reshape(-1)
        for idx in picks:
            orig = flat[idx]
            step = h * max(1.0, abs(orig))
            flat[idx] = orig + step
            f_plus = objective()
            flat[idx] = orig - step
            f_minus = objective()
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2 * step)
            a = grad.reshape(-1)[idx]
            if not np.isfinite(numeric):
                raise GradientCheckError(f"{name}: non-finite objective near {key!r}[{idx}]")
            rel = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
            worst = max(worst, rel)
        forward(**inputs)  # restore cache state for callers reusing closures
        report.max_rel_error[key] = worst
        report.n_points[key] = len(picks)
    return report
