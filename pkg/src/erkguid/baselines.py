"""Comparison samplers: stiffness-triggered step halving and a Heun predictor-corrector."""

from __future__ import annotations

import math

import numpy as np

from .core import ConfigurationError, ERKPair, Schedule, StepTrace, _counter_rng, edm_midpoint, initial_noise
from .estimators import stiffness_estimate
from .sampler import BatchResult, TraceTable, run_chunks
from .solvers import heun_step

__all__ = [
    "adaptive_step_batch",
    "adaptive_step_sample",
    "pc_corrector_step",
    "corrector_move",
    "pc_batch",
    "pc_sample",
]

# Corrector noise streams live under (trajectory, CORRECTOR_KEY, step) so they
# never collide with the initial-noise stream keyed by (trajectory,).
CORRECTOR_KEY = 1


def _norm(a):
    return np.sqrt(np.sum(a * a, axis=-1))


def _check_schedule(schedule):
    if not isinstance(schedule, Schedule):
        raise ConfigurationError("schedule must be a Schedule")


def _heun_or_euler(field, x, s, sn):
    """Heun step (Euler into ``sigma = 0``); returns the state, evaluations and deferred pair."""
    res = heun_step(field, x, s, sn)
    return res.x_next, res.evals_used, res.pair


# --------------------------------------------------------------------------- adaptive halving


def _adaptive_rows(field, schedule: Schedule, x0, tau: float):
    x = np.array(x0, dtype=np.float64)
    batch = x.shape[0]
    cost = field.nfe_cost
    trace = TraceTable.empty(schedule.n_steps, batch)
    nfe = np.zeros(batch, dtype=np.int64)
    pending: ERKPair | None = None
    for i, s, sn in schedule.intervals():
        rho = np.full(batch, np.nan)
        halve = np.zeros(batch, dtype=bool)
        f_i = field.drift(x, s)
        if pending is not None:
            est = stiffness_estimate(pending.completed(x, f_i))
            rho = np.where(est.valid, est.rho_hat, np.nan)
            halve = est.valid & (est.rho_hat > tau)
        x_next = np.empty_like(x)
        low_next = np.empty_like(x)
        f_low_next = np.empty_like(x)
        evals = np.zeros(batch, dtype=np.int64)

        full = ~halve
        if full.any():
            res = heun_step(field, x[full], s, sn, f_i[full])
            x_next[full] = res.x_next
            evals[full] = 1 + res.evals_used
            if res.pair is not None:
                low_next[full], f_low_next[full] = res.pair.x_low, res.pair.f_low
        if halve.any():
            mid = edm_midpoint(s, sn, schedule.rho_exp)
            first = heun_step(field, x[halve], s, mid, f_i[halve])
            second = heun_step(field, first.x_next, mid, sn)
            x_next[halve] = second.x_next
            evals[halve] = 1 + first.evals_used + second.evals_used
            if second.pair is not None:
                low_next[halve], f_low_next[halve] = second.pair.x_low, second.pair.f_low
        nfe += cost * evals
        pending = ERKPair(sn, x_next, low_next, None, f_low_next) if sn > 0 else None

        trace.sigma_in[i] = s
        trace.sigma_out[i] = sn
        trace.rho_hat[i] = rho
        trace.halved[i] = halve
        trace.nfe_cumulative[i] = nfe
        x = x_next
    return x, trace


def _adaptive_worker(args):
    field, schedule, tau, master_seed, indices = args
    x0 = initial_noise(master_seed, indices, field.dim, schedule.sigma_max)
    final, trace = _adaptive_rows(field, schedule, x0, tau)
    return x0, final, trace


def adaptive_step_batch(field, schedule: Schedule, tau: float, master_seed: int = 0, count: int = 1, jobs: int = 1, indices=None) -> BatchResult:
    """Heun sampling that splits ``[sigma_i, sigma_(i+1)]`` in two when the step-start ``rho_hat > tau``.

    The split point is the schedule's own interpolation midpoint; halving is
    single-level.  Step 0 has no pair and is never split.
    """
    _check_schedule(schedule)
    if not (tau > 0):
        raise ConfigurationError("tau must be > 0")
    indices = np.arange(int(count)) if indices is None else np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ConfigurationError("need at least one trajectory")
    parts = run_chunks(_adaptive_worker, (field, schedule, float(tau), int(master_seed)), indices, jobs)
    return BatchResult(
        indices=indices,
        x0=np.concatenate([p[0] for p in parts]),
        endpoints=np.concatenate([p[1] for p in parts]),
        trace=TraceTable.concatenate([p[2] for p in parts]),
    )


def adaptive_step_sample(field, schedule: Schedule, tau: float, seed: int = 0, index: int = 0) -> tuple[np.ndarray, list[StepTrace]]:
    res = adaptive_step_batch(field, schedule, tau, seed, indices=[index])
    return res.endpoints[0], res.trace.rows(0)


# --------------------------------------------------------------------------- predictor-corrector


def pc_corrector_step(field, x, sigma, r: float, stochastic: bool = False, seed=None, noise=None):
    """One Langevin corrector move; see :func:`corrector_move` for the step size."""
    return corrector_move(field, x, sigma, r, stochastic, seed, noise)[0]


def corrector_move(field, x, sigma, r: float, stochastic: bool = False, seed=None, noise=None):
    """Langevin move ``x + eps s (+ sqrt(2 eps) z)`` with ``s = score(x, sigma)``; returns ``(x, eps)``.

    ``eps = 2 (r |z| / |s|)^2`` for the stochastic variant and
    ``eps = 2 (r sqrt(d) / |s|)^2`` for the deterministic one.  Rows with a
    vanishing score are returned unchanged.  Stochastic noise comes from
    ``noise`` if given, else from a generator seeded with ``seed``.
    """
    if not (sigma > 0):
        raise ConfigurationError("corrector needs sigma > 0")
    if not (r >= 0):
        raise ConfigurationError("r must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    score = field.score(x, sigma)
    s_norm = _norm(score)
    if stochastic:
        if noise is None:
            noise = np.random.default_rng(seed).standard_normal(x.shape)
        scale = r * _norm(noise)
    else:
        scale = np.full(s_norm.shape, r * math.sqrt(x.shape[-1]))
    moving = (s_norm > 0) & (scale > 0)
    eps = np.where(moving, 2.0 * (scale / np.where(s_norm > 0, s_norm, 1.0)) ** 2, 0.0)
    step = eps[..., None] * score
    if stochastic:
        step = step + np.sqrt(2.0 * eps)[..., None] * noise
    return np.where(moving[..., None], x + step, x), eps


def _pc_rows(field, schedule: Schedule, x0, r, stochastic, master_seed, indices):
    x = np.array(x0, dtype=np.float64)
    batch = x.shape[0]
    cost = field.nfe_cost
    trace = TraceTable.empty(schedule.n_steps, batch)
    nfe = np.zeros(batch, dtype=np.int64)
    for i, s, sn in schedule.intervals():
        x_next, evals, _ = _heun_or_euler(field, x, s, sn)
        nfe += cost * evals
        eps = np.zeros(batch)
        if sn > 0:
            noise = None
            if stochastic:
                noise = np.stack(
                    [_counter_rng(master_seed, idx, CORRECTOR_KEY, i).standard_normal(x.shape[1]) for idx in indices]
                )
            x_next, eps = corrector_move(field, x_next, sn, r, stochastic, noise=noise)
            nfe += cost
        trace.sigma_in[i] = s
        trace.sigma_out[i] = sn
        trace.corrector_eps[i] = eps
        trace.nfe_cumulative[i] = nfe
        x = x_next
    return x, trace


def _pc_worker(args):
    field, schedule, r, stochastic, master_seed, indices = args
    x0 = initial_noise(master_seed, indices, field.dim, schedule.sigma_max)
    final, trace = _pc_rows(field, schedule, x0, r, stochastic, master_seed, indices)
    return x0, final, trace


def pc_batch(field, schedule: Schedule, r: float, stochastic: bool = False, master_seed: int = 0, count: int = 1, jobs: int = 1, indices=None) -> BatchResult:
    """Heun predictor followed by one corrector move after every update that ends above ``sigma = 0``."""
    _check_schedule(schedule)
    if not (r >= 0):
        raise ConfigurationError("r must be >= 0")
    indices = np.arange(int(count)) if indices is None else np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ConfigurationError("need at least one trajectory")
    parts = run_chunks(_pc_worker, (field, schedule, float(r), bool(stochastic), int(master_seed)), indices, jobs)
    return BatchResult(
        indices=indices,
        x0=np.concatenate([p[0] for p in parts]),
        endpoints=np.concatenate([p[1] for p in parts]),
        trace=TraceTable.concatenate([p[2] for p in parts]),
    )


def pc_sample(field, schedule: Schedule, r: float, stochastic: bool = False, seed: int = 0, index: int = 0):
    res = pc_batch(field, schedule, r, stochastic, seed, indices=[index])
    return res.endpoints[0], res.trace.rows(0)
