"""Single-step integrators of ``dx/dsigma = f(x; sigma)`` that expose their embedded pair.

Every stepper accepts an optional cached start drift ``f_i`` so a sampler can
reuse the evaluation that completed the previous ERK pair; ``evals_used``
counts only the drift calls made inside the step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ConfigurationError, ERKPair

__all__ = [
    "SOLVERS",
    "StepResult",
    "History",
    "euler_step",
    "heun_step",
    "dpm2s_step",
    "deis_ab2_step",
    "reference_solve",
]

SOLVERS = ("euler", "heun", "dpm2s", "deis")


@dataclass(frozen=True)
class StepResult:
    x_next: np.ndarray
    pair: ERKPair | None
    evals_used: int
    f_start: np.ndarray
    f_second: np.ndarray | None = None


@dataclass(frozen=True)
class History:
    """Previous AB2 node: state, its drift, its level and the step that left it."""

    x: np.ndarray
    f: np.ndarray
    sigma: float
    h: float


def _check_interval(sigma_i, sigma_next):
    if not (sigma_i > sigma_next >= 0):
        raise ConfigurationError(f"need sigma_i > sigma_next >= 0, got {sigma_i!r} -> {sigma_next!r}")


def _start(field, x, sigma_i, f_i):
    if f_i is None:
        return field.drift(x, sigma_i), 1
    return f_i, 0


def euler_step(field, x, sigma_i, sigma_next, f_i=None) -> StepResult:
    _check_interval(sigma_i, sigma_next)
    f_i, evals = _start(field, x, sigma_i, f_i)
    h = sigma_i - sigma_next
    return StepResult(x - h * f_i, None, evals, f_i)


def heun_step(field, x, sigma_i, sigma_next, f_i=None) -> StepResult:
    """Trapezoidal (Heun) step with its embedded Euler predictor.

    The returned pair sits at ``sigma_next`` with ``f_high`` deferred.  When
    ``sigma_next == 0`` the step is Euler-only and carries no pair.
    """
    _check_interval(sigma_i, sigma_next)
    f_i, evals = _start(field, x, sigma_i, f_i)
    h = sigma_i - sigma_next
    x_low = x - h * f_i
    if sigma_next == 0:
        return StepResult(x_low, None, evals, f_i)
    f_low = field.drift(x_low, sigma_next)
    x_next = x - (h / 2) * (f_i + f_low)
    pair = ERKPair(sigma_next, x_high=x_next, x_low=x_low, f_high=None, f_low=f_low)
    return StepResult(x_next, pair, evals + 1, f_i, f_low)


def dpm2s_step(field, x, sigma_i, sigma_next, f_i=None) -> StepResult:
    """Two-stage midpoint step with the intermediate node at ``sqrt(sigma_i sigma_next)``.

    Pair: ``x_high`` is the intermediate state with its drift at the midpoint
    level, ``x_low`` the step's start state with its drift at ``sigma_i``.
    """
    _check_interval(sigma_i, sigma_next)
    f_i, evals = _start(field, x, sigma_i, f_i)
    h = sigma_i - sigma_next
    if sigma_next == 0:
        return StepResult(x - h * f_i, None, evals, f_i)
    sigma_mid = math.sqrt(sigma_i * sigma_next)
    x_mid = x - (sigma_i - sigma_mid) * f_i
    f_mid = field.drift(x_mid, sigma_mid)
    pair = ERKPair(sigma_mid, x_high=x_mid, x_low=x, f_high=f_mid, f_low=f_i, sigma_low=sigma_i)
    return StepResult(x - h * f_mid, pair, evals + 1, f_i, f_mid)


def deis_ab2_step(field, x, sigma_i, sigma_next, prev: History | None = None, f_i=None) -> StepResult:
    """Variable-step Adams-Bashforth-2 in ``sigma``; bootstraps with Heun without history.

    With history the pair is ``{x_i, x_(i-1)}`` carrying each node's own drift.
    """
    _check_interval(sigma_i, sigma_next)
    if prev is None:
        return heun_step(field, x, sigma_i, sigma_next, f_i)
    f_i, evals = _start(field, x, sigma_i, f_i)
    h = sigma_i - sigma_next
    pair = ERKPair(sigma_i, x_high=x, x_low=prev.x, f_high=f_i, f_low=prev.f, sigma_low=prev.sigma)
    if sigma_next == 0:
        return StepResult(x - h * f_i, pair, evals, f_i)
    r = h / (2 * prev.h)
    x_next = x - h * ((1 + r) * f_i - r * prev.f)
    return StepResult(x_next, pair, evals, f_i)


def reference_solve(field, x0, sigma_from, sigma_to, substeps_per_interval: int = 100):
    """Ground-truth proxy: plain Heun over a uniform subdivision of the interval.

    Unlike the sampler, the trapezoidal correction is kept on a substep ending at
    ``sigma = 0`` (the drift there is exactly zero, which the trapezoid uses).
    """
    if substeps_per_interval < 1:
        raise ConfigurationError("substeps_per_interval must be >= 1")
    _check_interval(sigma_from, sigma_to)
    n = int(substeps_per_interval)
    grid = sigma_from + (sigma_to - sigma_from) * (np.arange(n + 1) / n)
    grid[0], grid[-1] = sigma_from, sigma_to
    x = np.asarray(x0, dtype=np.float64)
    f = field.drift(x, grid[0])
    for k in range(n):
        s, sn = float(grid[k]), float(grid[k + 1])
        h = s - sn
        x_low = x - h * f
        f_low = field.drift(x_low, sn)
        x = x - (h / 2) * (f + f_low)
        if k + 1 < n:
            f = field.drift(x, sn)
    return x
