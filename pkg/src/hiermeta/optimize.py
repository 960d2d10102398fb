"""Bounded scalar maximization for variance components."""
from __future__ import annotations

import math
from typing import Callable

import numpy as np
from scipy.optimize import brentq

INV_PHI = (math.sqrt(5) - 1) / 2
INV_PHI2 = (3 - math.sqrt(5)) / 2


def golden_section_max(f: Callable[[float], float], a: float, b: float, tol: float = 1e-10) -> float:
    """Maximizer of a unimodal ``f`` on [a, b] to an interval of width ``tol``.

    ``f`` may return -inf; such points are treated as worse than any finite value.
    """
    a, b = min(a, b), max(a, b)
    h = b - a
    if h <= tol:
        return (a + b) / 2
    n = int(math.ceil(math.log(tol / h) / math.log(INV_PHI)))
    c = a + INV_PHI2 * h
    d = a + INV_PHI * h
    fc, fd = f(c), f(d)
    for _ in range(n - 1):
        if fc > fd:
            b, d, fd = d, c, fc
            h *= INV_PHI
            c = a + INV_PHI2 * h
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            h *= INV_PHI
            d = a + INV_PHI * h
            fd = f(d)
    return (a + d) / 2 if fc > fd else (c + b) / 2


def maximize_on_interval(
    f: Callable[[float], float],
    lo: float,
    hi: float,
    tol: float = 1e-10,
    score: Callable[[float], float] | None = None,
    n_grid: int = 64,
) -> float:
    """Global-ish maximizer of ``f`` on [lo, hi].

    A coarse grid (dense near ``lo``) locates the best cell; golden-section
    search refines within the neighbouring cells. If ``score`` (df/dx) is
    given and changes sign around the result, the root is polished with
    Brent's method, which avoids the sqrt(eps) flatness limit of comparing
    function values.
    """
    if hi <= lo:
        return lo
    grid = np.unique(np.concatenate([
        [lo],
        lo + (hi - lo) * np.geomspace(1e-8, 1.0, n_grid),
        np.linspace(lo, hi, n_grid // 2),
    ]))
    vals = np.array([f(x) for x in grid])
    i = int(np.argmax(vals))
    if not np.isfinite(vals[i]):
        return lo
    a = grid[max(i - 1, 0)]
    b = grid[min(i + 1, len(grid) - 1)]
    x = golden_section_max(f, a, b, tol)
    if score is not None:
        w = max(1e-6 * (1 + abs(x)), 10 * tol)
        l, r = max(lo, x - w), min(hi, x + w)
        try:
            sl, sr = score(l), score(r)
        except ArithmeticError:
            sl = sr = float("nan")
        if np.isfinite(sl) and np.isfinite(sr) and sl > 0 > sr:
            x = brentq(score, l, r, xtol=tol, rtol=4 * np.finfo(float).eps)
    best = max((lo, x, grid[i]), key=f)
    return float(best)
