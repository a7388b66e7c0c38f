"""Input checks shared by the estimators."""
from __future__ import annotations

import math

import numpy as np
from sklearn.utils.validation import check_array


def n_concepts_from_width(width: int) -> int:
    """Solve ``L + L(L-1)/2 == width`` for the number of concepts."""
    L = int(round((math.sqrt(1 + 8 * width) - 1) / 2))
    if L < 1 or L + L * (L - 1) // 2 != width:
        raise ValueError(f"{width} structure columns do not match any number of concepts")
    return L


def check_structure_matrix(X) -> np.ndarray:
    """2-D finite float array of marginal features (last column: question id)."""
    X = check_array(X, dtype=np.float64, ensure_2d=True, ensure_all_finite=True)
    if X.shape[1] < 2:
        raise ValueError("need at least one structure column and a question column")
    return X


def check_marginals(values, name: str = "marginals") -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if not np.isfinite(arr).all() or arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
        raise ValueError(f"{name} must lie in [0, 1]")
    return arr
