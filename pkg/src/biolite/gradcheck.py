"""Central finite-difference gradient checking in float64.

The checker only ever calls a scalar function; it never looks at the analytic
backward code, so it stays an independent oracle for it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS = 1e-3
REL_FLOOR = 1e-8


def rel_error(analytic, numeric, floor: float = REL_FLOOR) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def central_difference(f, array: np.ndarray, index, eps: float = EPS) -> float:
    """(f(a + eps e_i) - f(a - eps e_i)) / 2 eps, restoring ``array`` afterwards."""
    old = array[index]
    array[index] = old + eps
    plus = f()
    array[index] = old - eps
    minus = f()
    array[index] = old
    return (plus - minus) / (2 * eps)


@dataclass
class CheckResult:
    name: str
    checked: int
    skipped: int
    max_rel_error: float

    def passed(self, tol: float) -> bool:
        return self.checked > 0 and self.max_rel_error < tol


def check_array(name, f, array, analytic, rng, samples: int = 30, eps: float = EPS, pattern=None) -> CheckResult:
    """Compare ``analytic`` (the gradient of f w.r.t. ``array``) against central differences.

    Samples ``samples`` coordinates without replacement (all of them if the array is small).
    If ``pattern`` is given, it is called at +eps and -eps and coordinates whose perturbation
    changes its value (a ReLU sign flip or a pooling argmax change) are skipped and replaced,
    since the function is not differentiable across such a kink.
    """
    if array.dtype != np.float64:
        raise TypeError("gradient checks run in float64")
    order = rng.permutation(array.size)
    base = pattern() if pattern is not None else None
    errs, skipped = [], 0
    for flat in order:
        if len(errs) >= samples:
            break
        idx = np.unravel_index(flat, array.shape)
        if pattern is not None and not _pattern_stable(array, idx, eps, pattern, base):
            skipped += 1
            continue
        num = central_difference(f, array, idx, eps)
        errs.append(float(rel_error(analytic[idx], num)))
    return CheckResult(name, len(errs), skipped, max(errs) if errs else float("inf"))


def _pattern_stable(array, idx, eps, pattern, base) -> bool:
    old = array[idx]
    try:
        for delta in (eps, -eps):
            array[idx] = old + delta
            if not _same(pattern(), base):
                return False
    finally:
        array[idx] = old
    return True


def _same(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))
