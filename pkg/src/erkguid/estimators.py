"""Cost-free stiffness/eigenvector estimates from an ERK pair, and their reference oracles.

The drift difference of the pair is one Jacobian-vector product applied to the
solution difference, ``f(x_high) - f(x_low) ~= J (x_high - x_low)``; its norm
ratio estimates the dominant eigenvalue magnitude and its direction is a
single power-iteration step toward the dominant eigenvector.
"""

from __future__ import annotations

import hashlib
from typing import NamedTuple

import numpy as np

from .core import DENSE_DIM_CAP, CapabilityError, ConfigurationError, ERKPair, StiffnessEstimate

__all__ = [
    "DEGENERACY_EPS",
    "stiffness_estimate",
    "eigenvector_estimate",
    "orient",
    "PowerIterationResult",
    "power_iteration_dominant",
    "power_iteration_seed",
    "dense_dominant_eigenpair",
    "dominant_eigenpair_of",
]

DEGENERACY_EPS = 1e-12


def _norm(a):
    return np.sqrt(np.sum(a * a, axis=-1))


def _require_complete(pair: ERKPair):
    if not pair.complete:
        raise ConfigurationError("ERK pair is missing its high-order drift")


def stiffness_estimate(pair: ERKPair) -> StiffnessEstimate:
    """``rho_hat = |f_high - f_low| / |x_high - x_low|``; tiny ``|dx|`` marks the pair invalid."""
    _require_complete(pair)
    dx_norm = _norm(pair.dx)
    df_norm = _norm(pair.df)
    valid = dx_norm >= DEGENERACY_EPS * (1.0 + _norm(pair.x_high))
    safe = np.where(valid, dx_norm, 1.0)
    rho = np.where(valid, df_norm / safe, 0.0)
    return StiffnessEstimate(rho_hat=rho, v_hat=None, valid=valid)


def orient(v, f_ref):
    """Flip ``v`` into the half-space of ``f_ref``; an exact tie keeps the raw sign."""
    dot = np.sum(v * f_ref, axis=-1)
    return np.where((dot < 0)[..., None], -v, v)


def eigenvector_estimate(pair: ERKPair, f_ref) -> StiffnessEstimate:
    """Normalised drift difference oriented toward ``f_ref``, together with ``rho_hat``."""
    est = stiffness_estimate(pair)
    df = pair.df
    df_norm = _norm(df)
    valid = est.valid & (df_norm > 0)
    safe = np.where(df_norm > 0, df_norm, 1.0)
    v = orient(df / safe[..., None], np.asarray(f_ref, dtype=np.float64))
    v = np.where(valid[..., None], v, 0.0)
    return StiffnessEstimate(rho_hat=np.where(valid, est.rho_hat, 0.0), v_hat=v, valid=valid)


# --------------------------------------------------------------------------- oracles


class PowerIterationResult(NamedTuple):
    lambda_abs: float
    v: np.ndarray | None
    valid: bool
    iterations: int


def power_iteration_seed(master_seed: int, x, sigma_index: int) -> np.random.SeedSequence:
    """RNG stream keyed by (master seed, state bytes, step index); order independent."""
    digest = hashlib.sha256(np.ascontiguousarray(x, dtype=np.float64).tobytes()).digest()
    return np.random.SeedSequence(
        [int(master_seed) & 0xFFFFFFFF, int.from_bytes(digest[:8], "little"), int(sigma_index)]
    )


def power_iteration_dominant(
    field, x, sigma, iters: int = 300, seed=0, tol: float = 1e-12, max_restarts: int = 8
) -> PowerIterationResult:
    """JVP power iteration from a seeded random unit start.

    Stops after ``iters`` products or once the magnitude estimate changes by less
    than ``tol`` relatively.  A vanishing product triggers a fresh random start
    (at most ``max_restarts``), after which the result is reported invalid.
    """
    if iters < 1:
        raise ConfigurationError("iters must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    restarts = 0
    v = None
    while True:
        v = rng.standard_normal(x.shape)
        v /= np.linalg.norm(v)
        lam = np.nan
        done = 0
        degenerate = False
        for done in range(1, iters + 1):
            jv = field.jvp(x, sigma, v)
            new = float(np.linalg.norm(jv))
            if new == 0.0 or not np.isfinite(new):
                degenerate = True
                break
            v = jv / new
            converged = abs(new - lam) <= tol * new
            lam = new
            if converged:
                break
        if not degenerate:
            return PowerIterationResult(lam, v, True, done)
        restarts += 1
        if restarts > max_restarts:
            return PowerIterationResult(0.0, None, False, done)


def _canonical_sign(v):
    nz = np.flatnonzero(v)
    if nz.size and v[nz[0]] < 0:
        return -v
    return v


def _pick_dominant(lams, vecs, rtol=1e-12):
    mags = np.abs(lams)
    top = mags.max()
    candidates = np.flatnonzero(mags >= top * (1 - rtol))
    largest = lams[candidates].max()
    candidates = [k for k in candidates if lams[k] >= largest - rtol * top]
    best = max(candidates, key=lambda k: tuple(np.abs(vecs[:, k])))
    return lams[best], _canonical_sign(vecs[:, best])


def dominant_eigenpair_of(matrix):
    """Eigenpair of maximal ``|lambda|`` of a symmetric matrix (or a stack of them).

    Ties prefer the larger signed eigenvalue, then the eigenvector whose
    absolute entries are lexicographically larger; vectors are returned with
    their first non-zero entry positive.
    """
    m = np.asarray(matrix, dtype=np.float64)
    lams, vecs = np.linalg.eigh(m)
    if m.ndim == 2:
        lam, v = _pick_dominant(lams, vecs)
        return float(lam), v
    flat_l = lams.reshape(-1, lams.shape[-1])
    flat_v = vecs.reshape(-1, *vecs.shape[-2:])
    out_l = np.empty(flat_l.shape[0])
    out_v = np.empty(flat_l.shape)
    for b in range(flat_l.shape[0]):
        out_l[b], out_v[b] = _pick_dominant(flat_l[b], flat_v[b])
    return out_l.reshape(lams.shape[:-1]), out_v.reshape(lams.shape)


def dense_dominant_eigenpair(field, x, sigma):
    """Dense symmetric eigendecomposition of the drift Jacobian at ``(x, sigma)``."""
    if field.dim > DENSE_DIM_CAP:
        raise CapabilityError(f"dense eigendecomposition needs d <= {DENSE_DIM_CAP}")
    return dominant_eigenpair_of(field.jacobian(x, sigma))
