"""Robust per-column standardization with Huber M-estimates."""

from __future__ import annotations

import numpy as np
from statsmodels.robust.norms import HuberT
from statsmodels.robust.scale import Huber

HUBER_C = 1.345


def huber_location_scale(x, c: float = HUBER_C, tol: float = 1e-10, maxiter: int = 200):
    """Joint Huber location and scale (Huber's proposal 2) of one column.

    Missing values are dropped. Raises ``ValueError`` on fewer than ten
    observed values or a column with zero spread.
    """
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    if x.size < 10:
        raise ValueError("need at least 10 observed values per column")
    if np.ptp(x) == 0:
        raise ValueError("constant column has zero scale")
    est = Huber(c=c, tol=tol, maxiter=maxiter, norm=HuberT(t=c))
    loc, scale = est(x)
    loc, scale = float(np.squeeze(loc)), float(np.squeeze(scale))
    if not scale > 0:
        raise ValueError("constant column has zero scale")
    return loc, scale


def standardize(Y, c: float = HUBER_C):
    """Return ``(Y - loc) / scale`` with per-column Huber estimates.

    Returns
    -------
    Z : ndarray
        Standardized panel; missing entries stay missing.
    loc, scale : ndarray
    """
    Y = np.asarray(Y, dtype=float)
    est = [huber_location_scale(col, c) for col in Y.T]
    loc = np.array([e[0] for e in est])
    scale = np.array([e[1] for e in est])
    return (Y - loc) / scale, loc, scale
