"""Finite-difference gradient oracle.

Central differences are the independent check for every analytic gradient
in the package: they never call ``backward`` and only re-evaluate the
scalar function, so a bug in the reverse pass cannot hide here.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

__all__ = ["finite_diff_grad", "relative_error", "check_gradients"]

ParamDict = dict[str, np.ndarray]


def finite_diff_grad(
    f: Callable[[ParamDict], float],
    params: ParamDict,
    h: float = 1e-5,
    coords: dict[str, np.ndarray] | None = None,
) -> ParamDict:
    """Central-difference gradients (f(x+h) - f(x-h)) / 2h per coordinate.

    `params` is mutated in place during probing and restored afterwards.
    If `coords` maps a name to flat indices, only those coordinates are
    probed for that tensor (the rest stay NaN-free zeros); otherwise every
    coordinate is probed.
    """
    if not (1e-7 <= h <= 1e-4):
        raise ValueError(f"step size h={h} outside [1e-7, 1e-4]")
    grads: ParamDict = {}
    for name, arr in params.items():
        flat = arr.reshape(-1)
        out = np.zeros_like(flat)
        if coords is not None and name in coords:
            indices: Iterable[int] = coords[name]
        else:
            indices = range(flat.size)
        for i in indices:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(params)
            flat[i] = orig - h
            fm = f(params)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(
                    f"non-finite value while probing {name!r} coordinate {i}"
                )
            out[i] = (fp - fm) / (2.0 * h)
        grads[name] = out.reshape(arr.shape)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray,
                   floor: float = 1e-6) -> float:
    """Max elementwise |a - n| / max(|a|, |n|) over entries above `floor`."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    scale = np.maximum(np.abs(a), np.abs(n))
    mask = scale > floor
    if not mask.any():
        return 0.0
    return float((np.abs(a - n)[mask] / scale[mask]).max())


def check_gradients(
    f: Callable[[ParamDict], float],
    params: ParamDict,
    analytic: ParamDict,
    h: float = 1e-5,
    coords: dict[str, np.ndarray] | None = None,
) -> dict[str, float]:
    """Compare analytic gradients against finite differences per tensor.

    Returns the max relative error per parameter name (restricted to the
    probed coordinates when `coords` is given).
    """
    numeric = finite_diff_grad(f, params, h=h, coords=coords)
    errors: dict[str, float] = {}
    for name in params:
        a = analytic[name].reshape(-1)
        n = numeric[name].reshape(-1)
        if coords is not None and name in coords:
            idx = np.asarray(coords[name], dtype=np.int64)
            a = a[idx]
            n = n[idx]
        errors[name] = relative_error(a, n)
    return errors
