"""Analytic score fields over isotropic Gaussian mixtures.

Convolving an isotropic component ``N(mu_j, s_j^2 I)`` with ``N(0, sigma^2 I)``
only inflates its variance to ``s_j^2 + sigma^2``, so score, drift, Hessian and
Hessian-vector products of the perturbed density are all closed form.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .core import DENSE_DIM_CAP, CapabilityError, ConfigurationError, array_digest

__all__ = [
    "ScoreField",
    "GaussianMixture",
    "GuidedField",
    "LinearField",
    "build_tree_gmm",
    "build_degraded_field",
    "conditional_field",
    "single_gaussian",
]


def _check_dense(dim: int) -> None:
    if dim > DENSE_DIM_CAP:
        raise CapabilityError(f"dense Jacobian requested for d={dim} > {DENSE_DIM_CAP}")


class ScoreField:
    """Interface shared by every drift field used by the solvers.

    ``drift(x, sigma) = -sigma * score(x, sigma)``; ``x`` may be ``(d,)`` or
    ``(B, d)`` and ``sigma`` is a scalar.  ``nfe_cost`` is the number of
    underlying model evaluations one drift call stands for.
    """

    dim: int
    nfe_cost: int = 1

    def score(self, x, sigma):
        raise NotImplementedError

    def drift(self, x, sigma):
        if sigma == 0:
            return np.zeros_like(np.asarray(x, dtype=np.float64))
        return -sigma * self.score(x, sigma)

    def jacobian(self, x, sigma):
        raise NotImplementedError

    def jvp(self, x, sigma, v):
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class GaussianMixture(ScoreField):
    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        mu = np.array(self.means, dtype=np.float64)
        if mu.ndim == 1:
            mu = mu[:, None]
        s = np.array(self.stds, dtype=np.float64).reshape(-1)
        k = w.size
        if k == 0 or mu.shape[0] != k or s.size != k:
            raise ConfigurationError("weights, means and stds must describe the same components")
        if mu.shape[1] < 1:
            raise ConfigurationError("mixture dimension must be >= 1")
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ConfigurationError("mixture weights must be positive and finite")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ConfigurationError(f"mixture weights sum to {w.sum()!r}, expected 1")
        if np.any(s <= 0) or not np.all(np.isfinite(s)) or not np.all(np.isfinite(mu)):
            raise ConfigurationError("component stds must be positive and means finite")
        labels = None
        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.int64).reshape(-1)
            if labels.size != k:
                raise ConfigurationError("one label per component is required")
            labels.flags.writeable = False
        for a in (w, mu, s):
            a.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "stds", s)
        object.__setattr__(self, "labels", labels)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.size

    # -- internals: everything is expressed through responsibilities r_j and
    #    per-component scores s_j = (mu_j - x) / v_j with v_j = s_j^2 + sigma^2.

    def _components(self, x, sigma):
        x = np.asarray(x, dtype=np.float64)
        var = self.stds**2 + float(sigma) ** 2
        diff = self.means - x[..., None, :]  # (..., K, d)
        sq = np.sum(diff * diff, axis=-1)
        logits = (
            np.log(self.weights)
            - 0.5 * sq / var
            - 0.5 * self.dim * np.log(2.0 * math.pi * var)
        )
        lse = logsumexp(logits, axis=-1, keepdims=True)
        resp = np.exp(logits - lse)
        comp_score = diff / var[:, None]
        return resp, comp_score, var, lse[..., 0]

    def log_density(self, x, sigma):
        return self._components(x, sigma)[3]

    def score(self, x, sigma):
        resp, comp_score, _, _ = self._components(x, sigma)
        return np.sum(resp[..., None] * comp_score, axis=-2)

    def hessian_logp(self, x, sigma):
        resp, comp_score, var, _ = self._components(x, sigma)
        mean = np.sum(resp[..., None] * comp_score, axis=-2)
        centred = comp_score - mean[..., None, :]
        cov = np.sum(resp[..., None, None] * centred[..., :, None] * centred[..., None, :], axis=-3)
        diag = np.sum(resp / var, axis=-1)
        return cov - diag[..., None, None] * np.eye(self.dim)

    def jacobian(self, x, sigma):
        _check_dense(self.dim)
        return -float(sigma) * self.hessian_logp(x, sigma)

    def jvp(self, x, sigma, v):
        resp, comp_score, var, _ = self._components(x, sigma)
        v = np.asarray(v, dtype=np.float64)
        mean = np.sum(resp[..., None] * comp_score, axis=-2)
        centred = comp_score - mean[..., None, :]
        proj = np.sum(centred * v[..., None, :], axis=-1)  # (..., K)
        cov_v = np.sum((resp * proj)[..., None] * centred, axis=-2)
        diag = np.sum(resp / var, axis=-1)
        return -float(sigma) * (cov_v - diag[..., None] * v)

    # -- serialisation

    def to_dict(self) -> dict:
        out = {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
        }
        if self.labels is not None:
            out["labels"] = self.labels.tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianMixture":
        try:
            return cls(data["weights"], data["means"], data["stds"], data.get("labels"))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"malformed mixture document: {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GaussianMixture":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"mixture file is not valid JSON: {exc}") from None

    @classmethod
    def load(cls, path) -> "GaussianMixture":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read mixture file {path}: {exc}") from None
        return cls.from_json(text)

    def digest(self) -> str:
        arrays = [self.weights, self.means, self.stds]
        if self.labels is not None:
            arrays.append(self.labels.astype(np.float64))
        return array_digest(*arrays)


def single_gaussian(mean=(0.0, 0.0), std: float = 1.0) -> GaussianMixture:
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    return GaussianMixture([1.0], mean[None, :], [std])


@dataclass(frozen=True, eq=False)
class GuidedField(ScoreField):
    """Model guidance ``f^w = f_main + (w - 1)(f_main - f_guiding)``.

    The combination is formed in drift space, exactly as a sampler combines
    two network outputs, so ``drift`` matches ``-sigma * score`` only to
    rounding for this class.
    """

    main: ScoreField
    guiding: ScoreField
    w: float

    def __post_init__(self):
        if self.main.dim != self.guiding.dim:
            raise ConfigurationError("main and guiding fields must share a dimension")

    @property
    def dim(self) -> int:
        return self.main.dim

    @property
    def nfe_cost(self) -> int:
        return self.main.nfe_cost + self.guiding.nfe_cost

    @staticmethod
    def combine(a, b, w):
        if w == 1:
            return a
        return a + (w - 1.0) * (a - b)

    def parts(self, x, sigma):
        """Main and guiding drifts (both evaluations a guided step pays for)."""
        return self.main.drift(x, sigma), self.guiding.drift(x, sigma)

    def drift(self, x, sigma):
        f_main, f_guiding = self.parts(x, sigma)
        return self.combine(f_main, f_guiding, self.w)

    def score(self, x, sigma):
        return self.combine(self.main.score(x, sigma), self.guiding.score(x, sigma), self.w)

    def jacobian(self, x, sigma):
        return self.combine(self.main.jacobian(x, sigma), self.guiding.jacobian(x, sigma), self.w)

    def jvp(self, x, sigma, v):
        return self.combine(self.main.jvp(x, sigma, v), self.guiding.jvp(x, sigma, v), self.w)

    def digest(self) -> str:
        text = f"{self.main.digest()}:{self.guiding.digest()}:{float(self.w)!r}"
        return hashlib.sha256(text.encode()).hexdigest()


@dataclass(frozen=True, eq=False)
class LinearField(ScoreField):
    """Autonomous linear drift ``f(x) = A x`` (test fixture; ignores ``sigma``)."""

    matrix: np.ndarray

    def __post_init__(self):
        a = np.atleast_2d(np.array(self.matrix, dtype=np.float64))
        if a.shape[0] != a.shape[1]:
            raise ConfigurationError("linear field needs a square matrix")
        a.flags.writeable = False
        object.__setattr__(self, "matrix", a)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def drift(self, x, sigma):
        x = np.asarray(x, dtype=np.float64)
        return np.sum(self.matrix * x[..., None, :], axis=-1)

    def score(self, x, sigma):
        # only meaningful for sigma > 0; kept so drift = -sigma * score round-trips
        return -self.drift(x, sigma) / sigma

    def jacobian(self, x, sigma):
        x = np.asarray(x, dtype=np.float64)
        return np.broadcast_to(self.matrix, x.shape[:-1] + self.matrix.shape).copy()

    def jvp(self, x, sigma, v):
        return self.drift(v, sigma)

    def digest(self) -> str:
        return array_digest(self.matrix)


def build_tree_gmm(
    branch_count: int = 2,
    modes_per_branch: int = 8,
    mode_std: float = 0.05,
    branch_angle: float = 50.0,
    trunk_length: float = 1.0,
    branch_length: float = 1.0,
) -> GaussianMixture:
    """Tree-shaped 2D mixture: a vertical trunk ending in a junction at the origin
    from which ``branch_count`` straight branches fan out upwards.

    ``branch_angle`` (degrees) is the angle between neighbouring branches; the fan
    is symmetric about the trunk axis.  Trunk modes sit at ``y = -L + jL/m``
    (``j = 0..m-1``) and branch modes at arc length ``jL/m`` (``j = 1..m``), all
    with equal weight.  Label 0 marks the trunk, ``k`` the ``k``-th branch from
    the left.
    """
    if branch_count < 2 or modes_per_branch < 2:
        raise ConfigurationError("a tree needs >= 2 branches and >= 2 modes per branch")
    if not (mode_std > 0):
        raise ConfigurationError("mode_std must be positive")
    m = int(modes_per_branch)
    means = [(0.0, -trunk_length + j * trunk_length / m) for j in range(m)]
    labels = [0] * m
    half = 0.5 * (branch_count - 1)
    for k in range(branch_count):
        theta = math.radians((k - half) * branch_angle)
        dx, dy = math.sin(theta), math.cos(theta)
        for j in range(1, m + 1):
            r = j * branch_length / m
            means.append((r * dx, r * dy))
            labels.append(k + 1)
    n = len(means)
    return GaussianMixture(np.full(n, 1.0 / n), np.array(means), np.full(n, float(mode_std)), labels)


def build_degraded_field(
    gm: GaussianMixture, mean_jitter: float, std_inflation: float, seed: int
) -> GaussianMixture:
    """Weaker copy of ``gm`` standing in for an under-trained guiding model."""
    if std_inflation < 1:
        raise ConfigurationError("std_inflation must be >= 1")
    if mean_jitter < 0:
        raise ConfigurationError("mean_jitter must be >= 0")
    means = gm.means
    if mean_jitter > 0:
        rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
        means = means + mean_jitter * rng.standard_normal(means.shape)
    stds = gm.stds if std_inflation == 1 else gm.stds * std_inflation
    return GaussianMixture(gm.weights, means, stds, gm.labels)


def conditional_field(gm: GaussianMixture, class_id: int) -> GaussianMixture:
    """Renormalised sub-mixture of the components labelled ``class_id``."""
    if gm.labels is None:
        raise ConfigurationError("mixture carries no class labels")
    mask = gm.labels == int(class_id)
    if not mask.any():
        raise ConfigurationError(f"no component carries class {class_id!r}")
    if mask.all():
        return gm
    w = gm.weights[mask]
    return GaussianMixture(w / w.sum(), gm.means[mask], gm.stds[mask], gm.labels[mask])
