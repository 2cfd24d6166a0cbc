"""Exact value functions for two, three and four experts.

The formulas are stated on the ordered sector ``x_1 >= ... >= x_n``; every
evaluation sorts its input first, which extends them to all of R^n by
permutation invariance.
"""

from __future__ import annotations

import numpy as np

SQRT2 = np.sqrt(2.0)
# arctanh(e^z) blows up as z -> 0-, where the sinh product vanishes
ARCTANH_GUARD = -1e-12


def _two(x):
    return x[..., 0] + np.exp(SQRT2 * (x[..., 1] - x[..., 0])) / (2 * SQRT2)


def _three(x):
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    return (
        x1
        + np.exp(SQRT2 * (x2 - x1)) / (2 * SQRT2)
        + np.exp(SQRT2 * (2 * x3 - x2 - x1)) / (6 * SQRT2)
    )


def _four(x):
    x1, x2, x3, x4 = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
    z = (x4 + x3 - x2 - x1) / SQRT2
    a = (x4 - x3 + x2 - x1) / SQRT2
    b = (-x4 + x3 + x2 - x1) / SQRT2
    c = (-x4 - x3 + x2 + x1) / SQRT2
    out = x1 - SQRT2 / 4 * np.sinh(SQRT2 * (x1 - x2))
    out = out + SQRT2 / 2 * np.arctan(np.exp(z)) * np.cosh(a) * np.cosh(b) * np.cosh(c)
    singular = z > ARCTANH_GUARD
    ez = np.where(singular, 0.0, np.exp(np.minimum(z, ARCTANH_GUARD)))
    tail = SQRT2 / 2 * np.arctanh(ez) * np.sinh(a) * np.sinh(b) * np.sinh(c)
    return out + np.where(singular, 0.0, tail)


_FORMULAS = {2: _two, 3: _three, 4: _four}


def exact_solution(n: int, x) -> np.ndarray | float:
    """Value function ``u(x)`` for ``n`` experts; ``x`` has shape ``(..., n)``."""
    if n not in _FORMULAS:
        raise ValueError(f"closed form known only for n in (2, 3, 4), got n={n}")
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != n:
        raise ValueError(f"expected {n} coordinates, got shape {x.shape}")
    xs = -np.sort(-x, axis=-1)
    out = _FORMULAS[n](xs)
    return float(out) if np.ndim(out) == 0 else out


def exact_reduced(n: int, x) -> np.ndarray | float:
    """``w(x) = u(x, 0)`` for a reduced point ``x`` of length ``n - 1``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != n - 1:
        raise ValueError(f"expected {n - 1} coordinates, got shape {x.shape}")
    full = np.concatenate([x, np.zeros(x.shape[:-1] + (1,))], axis=-1)
    return exact_solution(n, full)
