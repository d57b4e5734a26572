"""ERK-Guid correction, its guidance-form rewrite, scaling functions and ERK-Proj."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    DENSE_DIM_CAP,
    CapabilityError,
    ConfigurationError,
    ERKPair,
    GuidanceConfig,
    Scaling,
    StiffnessEstimate,
)
from .estimators import eigenvector_estimate

__all__ = [
    "phi",
    "alpha",
    "scaling_value",
    "erk_guid_terms",
    "erk_guid_correction",
    "gamma_form_correction",
    "guided_estimates",
    "ERKProjConfig",
    "erk_proj_drift",
    "predicted_lte_linearized",
]

PHI_SERIES_BELOW = 1e-5
ALPHA_SERIES_BELOW = 1.0
# alpha(z) = sum_{k>=2} z^k / (k+1)!; 20 terms reach double precision for |z| < 1
_ALPHA_COEFFS = tuple(1.0 / math.factorial(k + 1) for k in range(2, 22))


def _scalar_or_array(out, z):
    return float(out) if np.ndim(z) == 0 else out


def phi(z):
    """``(e^z - 1) / z`` with ``phi(0) = 1``."""
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < PHI_SERIES_BELOW
    safe = np.where(small, 1.0, z)
    out = np.where(small, 1.0 + z / 2 + z * z / 6, np.expm1(safe) / safe)
    return _scalar_or_array(out, z)


def alpha(z):
    """Heun's linearised truncation weight ``phi(z) - 1 - z/2``; ``alpha(0) = 0``."""
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < ALPHA_SERIES_BELOW
    safe = np.where(small, 1.0, z)
    series = np.zeros_like(z)
    for c in reversed(_ALPHA_COEFFS):
        series = series * z + c
    out = np.where(small, series * z * z, np.expm1(safe) / safe - 1.0 - safe / 2)
    return _scalar_or_array(out, z)


def scaling_value(variant, z):
    variant = Scaling.parse(variant)
    if variant is Scaling.ALPHA:
        return alpha(z)
    if variant is Scaling.QUADRATIC:
        return z * z
    return abs(z) if np.ndim(z) == 0 else np.abs(z)


def _dot(a, b):
    return np.sum(a * b, axis=-1)


def erk_guid_terms(f_ref, est: StiffnessEstimate, h: float, cfg: GuidanceConfig):
    """Gate ``beta`` and the displacement ``h * s(z) * <f_ref, v> v`` (before gating)."""
    rho = np.asarray(est.rho_hat, dtype=np.float64)
    valid = np.asarray(est.valid, dtype=bool)
    beta = np.asarray(valid & (rho > cfg.w_con) & bool(cfg.enabled))
    if est.v_hat is None or cfg.w_stiff == 0 or not beta.any():
        return beta, None
    z = cfg.w_stiff * h * rho
    s = scaling_value(cfg.scaling, z)
    coef = h * s * _dot(f_ref, est.v_hat)
    return beta, coef[..., None] * est.v_hat


def erk_guid_correction(x_heun_next, f_ref, est: StiffnessEstimate, h: float, cfg: GuidanceConfig):
    """``x - h beta s(z) <f_ref, v> v`` with ``z = w_stiff h rho_hat``; untouched where the gate is off."""
    beta, delta = erk_guid_terms(f_ref, est, h, cfg)
    if delta is None:
        return x_heun_next
    return np.where(beta[..., None], x_heun_next - delta, x_heun_next)


def gamma_form_correction(
    x_heun_next, pair: ERKPair, est: StiffnessEstimate, h: float, cfg: GuidanceConfig, f_ref=None
):
    """Same update written as ``x - h gamma (f_high - f_low)``.

    ``gamma = beta s(z) <f_ref, df> / |df|^2``, which absorbs the orientation of
    the unit estimate; ``f_ref`` defaults to the pair's high-order drift.
    """
    f_ref = pair.f_high if f_ref is None else f_ref
    rho = np.asarray(est.rho_hat, dtype=np.float64)
    df = pair.df
    df_sq = _dot(df, df)
    beta = np.asarray(np.asarray(est.valid, dtype=bool) & (rho > cfg.w_con) & bool(cfg.enabled) & (df_sq > 0))
    if cfg.w_stiff == 0 or not beta.any():
        return x_heun_next
    z = cfg.w_stiff * h * rho
    gamma = scaling_value(cfg.scaling, z) * _dot(f_ref, df) / np.where(df_sq > 0, df_sq, 1.0)
    return np.where(beta[..., None], x_heun_next - h * gamma[..., None] * df, x_heun_next)


def guided_estimates(pair_w: ERKPair, f_ref=None) -> StiffnessEstimate:
    """Estimates from a pair whose drifts come from a model-guided field ``f^w``.

    The formulas are the unguided ones; only the drift that fed the pair differs.
    """
    return eigenvector_estimate(pair_w, pair_w.f_high if f_ref is None else f_ref)


@dataclass(frozen=True)
class ERKProjConfig:
    w: float
    w_stiff: float = 1.0

    def __post_init__(self):
        if not (self.w_stiff >= 0):
            raise ConfigurationError("ERK-Proj w_stiff must be >= 0")

    def eta(self, rho_hat):
        return np.exp(-self.w_stiff * np.asarray(rho_hat, dtype=np.float64))


def erk_proj_drift(g, est: StiffnessEstimate | None, cfg: ERKProjConfig, f_main):
    """``f_main + (w - 1) g_hat`` with ``g_hat = eta g + (1 - eta) <g, v> v``, ``eta = exp(-w_stiff rho_hat)``.

    Wherever the estimate is invalid or ``eta == 1`` the guidance vector passes
    through untouched, so ``w_stiff = 0`` reproduces plain model guidance bit for bit.
    """
    g = np.asarray(g, dtype=np.float64)
    if est is not None and est.v_hat is not None:
        eta = cfg.eta(est.rho_hat)
        keep = ~np.asarray(est.valid, dtype=bool) | (eta == 1.0)
        if not np.all(keep):
            v = est.v_hat
            projected = eta[..., None] * g + (1.0 - eta)[..., None] * _dot(g, v)[..., None] * v
            g = np.where(keep[..., None], g, projected)
    if cfg.w == 1:
        return f_main
    return f_main + (cfg.w - 1.0) * g


def predicted_lte_linearized(field, x, sigma_i, h):
    """Heun truncation error of the frozen linearisation at ``(x, sigma_i)``.

    ``-h sum_k alpha(z_k) <f, v_k> v_k`` over the full eigenbasis of the drift
    Jacobian, ``z_k = -h lambda_k``.
    """
    if field.dim > DENSE_DIM_CAP:
        raise CapabilityError(f"dense eigendecomposition needs d <= {DENSE_DIM_CAP}")
    x = np.asarray(x, dtype=np.float64)
    lams, vecs = np.linalg.eigh(field.jacobian(x, sigma_i))
    f = field.drift(x, sigma_i)
    coeffs = np.sum(vecs * f[..., :, None], axis=-2)  # <f, v_k>
    weights = alpha(-h * lams) * coeffs
    return -h * np.sum(vecs * weights[..., None, :], axis=-1)
