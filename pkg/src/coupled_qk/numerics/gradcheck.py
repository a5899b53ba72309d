"""Finite-difference oracles and Jacobians."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .tensor import DTYPE, NonFiniteError, Tensor, backward, no_grad


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        v = v.data
    v = float(np.asarray(v).reshape(()))
    if not np.isfinite(v):
        raise NonFiniteError("finite-difference evaluation returned a non-finite value")
    return v


def finite_diff_grad(
    f: Callable, x, h: float = 1e-5, indices: Optional[np.ndarray] = None
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` receives an ndarray of ``x``'s shape. When ``indices`` (flat
    positions) is given only those coordinates are estimated; the rest of the
    returned array is NaN.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    coords = range(flat.size) if indices is None else indices
    if indices is not None:
        grad[:] = np.nan
    with no_grad():
        for i in coords:
            old = flat[i]
            flat[i] = old + h
            fp = _scalar(f(base))
            flat[i] = old - h
            fm = _scalar(f(base))
            flat[i] = old
            grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(base.shape)


def jacobian_of(
    fn: Callable,
    x,
    method: str = "autodiff",
    h: float = 1e-6,
    cross_check: bool = False,
    rtol: float = 1e-6,
) -> np.ndarray:
    """Dense Jacobian ``J[i, j] = d fn(x)_i / d x_j`` of a vector map.

    ``fn`` must accept a 1-D :class:`Tensor` and return a 1-D Tensor (so it
    works with both autodiff and plain evaluation). ``method`` is
    ``"autodiff"`` (one reverse pass per output row) or ``"fd"`` (central
    differences per input column). With ``cross_check`` both are computed
    and a disagreement beyond ``rtol`` (relative to max |J|) raises.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    if x0.ndim != 1:
        raise ValueError("jacobian_of expects a 1-D input")
    with no_grad():
        y0 = fn(Tensor(x0))
    if y0.ndim != 1:
        raise ValueError("jacobian_of expects a 1-D output")
    m, n = y0.shape[0], x0.shape[0]
    if max(m, n) > 128:
        raise ValueError("jacobian_of is limited to dimensions <= 128")

    if method == "autodiff":
        J = _jac_autodiff(fn, x0, m)
    elif method == "fd":
        J = _jac_fd(fn, x0, m, h)
    else:
        raise ValueError(f"unknown jacobian method {method!r}")
    if J.shape != (m, n):
        raise ValueError(f"dimension mismatch: jacobian {J.shape} vs expected {(m, n)}")
    if cross_check:
        other = _jac_fd(fn, x0, m, h) if method == "autodiff" else _jac_autodiff(fn, x0, m)
        scale = max(np.abs(J).max(), 1.0)
        err = np.abs(J - other).max() / scale
        if err > rtol:
            raise AssertionError(f"autodiff and finite-difference Jacobians disagree ({err:.3e})")
    return J


def _jac_autodiff(fn, x0, m):
    rows = []
    for i in range(m):
        xt = Tensor(x0, requires_grad=True)
        y = fn(xt)
        if y.shape[0] != m:
            raise ValueError("dimension mismatch between evaluations")
        if not y.requires_grad:
            rows.append(np.zeros_like(x0))
            continue
        seed = np.zeros(m, dtype=DTYPE)
        seed[i] = 1.0
        backward(y, seed)
        rows.append(xt.grad if xt.grad is not None else np.zeros_like(x0))
    return np.stack(rows)


def _jac_fd(fn, x0, m, h):
    cols = []
    with no_grad():
        for j in range(x0.size):
            xp, xm = x0.copy(), x0.copy()
            xp[j] += h
            xm[j] -= h
            yp, ym = fn(Tensor(xp)).data, fn(Tensor(xm)).data
            if yp.shape[0] != m:
                raise ValueError("dimension mismatch between evaluations")
            cols.append((yp - ym) / (2.0 * h))
    return np.stack(cols, axis=1)


def relative_error(auto: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Max-norm relative error ``max|a - n| / max(max|n|, max|a|)``."""
    auto, numeric = np.asarray(auto), np.asarray(numeric)
    denom = max(np.abs(numeric).max(initial=0.0), np.abs(auto).max(initial=0.0), floor)
    return float(np.abs(auto - numeric).max(initial=0.0) / denom)
