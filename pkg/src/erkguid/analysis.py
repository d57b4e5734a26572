"""Measurement harness: local truncation error, eigenbasis projections, alignment
statistics, stiffness maps, convergence orders and endpoint-error sweeps."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .core import (
    DENSE_DIM_CAP,
    GUIDANCE_OFF,
    CapabilityError,
    ConfigurationError,
    ERKPair,
    GuidanceConfig,
    Schedule,
    initial_noise,
    write_rows_csv,
)
from .estimators import _canonical_sign, eigenvector_estimate, orient
from .sampler import integrate_batch
from .solvers import SOLVERS, dpm2s_step, euler_step, reference_solve

__all__ = [
    "ERROR_FLOOR",
    "compute_lte",
    "one_step",
    "project_onto_eigenbasis",
    "projection_ratio",
    "dense_oracle",
    "BinSummary",
    "alignment_by_stiffness_bins",
    "AlignmentSamples",
    "alignment_samples",
    "Heatmap",
    "stiffness_heatmap",
    "LTETableRow",
    "lte_table",
    "estimate_convergence_order",
    "single_gaussian_flow",
    "reference_endpoints",
    "endpoint_errors",
    "endpoint_error_study",
]

ERROR_FLOOR = 1e-13


def _norm(a):
    return np.sqrt(np.sum(a * a, axis=-1))


def _dot(a, b):
    return np.sum(a * b, axis=-1)


def _abs_cos(a, b):
    den = _norm(a) * _norm(b)
    return np.where(den > 0, np.abs(_dot(a, b)) / np.where(den > 0, den, 1.0), np.nan)


def _require_dense(field):
    if field.dim > DENSE_DIM_CAP:
        raise CapabilityError(f"dense eigendecomposition needs d <= {DENSE_DIM_CAP}")


# --------------------------------------------------------------------------- LTE


def one_step(field, x, sigma_i, sigma_next, solver_kind="heun"):
    """A single isolated solver step (Heun keeps its trapezoid even into ``sigma = 0``).

    Multistep DEIS has no history here and therefore takes its Heun bootstrap step.
    """
    if solver_kind not in SOLVERS:
        raise ConfigurationError(f"unknown solver {solver_kind!r}")
    if not (sigma_i > sigma_next >= 0):
        raise ConfigurationError("need sigma_i > sigma_next >= 0")
    x = np.asarray(x, dtype=np.float64)
    if solver_kind == "euler":
        return euler_step(field, x, sigma_i, sigma_next).x_next
    if solver_kind == "dpm2s":
        return dpm2s_step(field, x, sigma_i, sigma_next).x_next
    h = sigma_i - sigma_next
    f_i = field.drift(x, sigma_i)
    f_low = field.drift(x - h * f_i, sigma_next)
    return x - (h / 2) * (f_i + f_low)


def compute_lte(field, x, sigma_i, sigma_next, solver_kind="heun", substeps: int = 100):
    """Reference solution (``substeps`` Heun substeps) minus one solver step from ``x``."""
    ref = reference_solve(field, x, sigma_i, sigma_next, substeps)
    return ref - one_step(field, x, sigma_i, sigma_next, solver_kind)


# --------------------------------------------------------------------------- eigenbasis


def project_onto_eigenbasis(vec, field, x, sigma) -> list[tuple[float, float]]:
    """``(lambda_k, <vec, v_k>)`` over the Jacobian's eigenbasis, sorted by ``|lambda|`` descending."""
    _require_dense(field)
    lams, vecs = np.linalg.eigh(field.jacobian(np.asarray(x, dtype=np.float64), sigma))
    order = np.argsort(-np.abs(lams), kind="stable")
    vec = np.asarray(vec, dtype=np.float64)
    return [(float(lams[k]), float(vec @ _canonical_sign(vecs[:, k]))) for k in order]


def projection_ratio(projection: Sequence[tuple[float, float]]) -> float:
    """``|dominant coefficient| / |subdominant coefficient|``."""
    if len(projection) < 2:
        raise ConfigurationError("need at least two eigen-directions")
    top, sub = abs(projection[0][1]), abs(projection[1][1])
    return float("inf") if sub == 0 else top / sub


def dense_oracle(field, x, sigma):
    """Batched oracle: ``(rho, v)`` with ``rho = max |lambda|`` of the drift Jacobian at each row."""
    _require_dense(field)
    lams, vecs = np.linalg.eigh(field.jacobian(np.asarray(x, dtype=np.float64), sigma))
    pick = np.argmax(np.abs(lams), axis=-1)
    rho = np.take_along_axis(np.abs(lams), pick[..., None], axis=-1)[..., 0]
    v = np.take_along_axis(vecs, pick[..., None, None], axis=-1)[..., 0]
    return rho, v


# --------------------------------------------------------------------------- binning


@dataclass(frozen=True)
class BinSummary:
    lo: float
    hi: float
    count: int
    median: float
    sufficient: bool


def alignment_by_stiffness_bins(samples, bin_edges=None, min_count: int = 10) -> list[BinSummary]:
    """Median cosine per stiffness bin; quartiles of the oracle stiffness by default.

    ``samples`` is a sequence of ``(rho_oracle, cos)`` or an ``(n, 2)`` array.
    Bins are half-open except the last; a bin with fewer than ``min_count``
    samples is reported with ``sufficient=False``.
    """
    arr = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    arr = arr[np.all(np.isfinite(arr), axis=1)]
    rho, cos = arr[:, 0], arr[:, 1]
    if bin_edges is None:
        if rho.size == 0:
            raise ConfigurationError("no finite samples to bin")
        edges = np.quantile(rho, [0.0, 0.25, 0.5, 0.75, 1.0])
    else:
        edges = np.asarray(bin_edges, dtype=np.float64)
        if edges.ndim != 1 or edges.size < 2 or not np.all(np.diff(edges) > 0):
            raise ConfigurationError("bin edges must be strictly increasing")
    out = []
    last = len(edges) - 2
    for k in range(len(edges) - 1):
        lo, hi = edges[k], edges[k + 1]
        mask = (rho >= lo) & ((rho <= hi) if k == last else (rho < hi))
        n = int(mask.sum())
        med = float(np.median(cos[mask])) if n else float("nan")
        out.append(BinSummary(float(lo), float(hi), n, med, n >= min_count))
    return out


# --------------------------------------------------------------------------- alignment samples


ALIGNMENT_COLUMNS = (
    "sample",
    "step",
    "sigma",
    "rho_hat",
    "rho_oracle",
    "cos_vhat",
    "abs_cos_vhat",
    "abs_cos_dx",
    "abs_cos_lte",
)


@dataclass
class AlignmentSamples:
    """One record per completed ERK pair along unguided trajectories.

    Everything is evaluated at the pair's state ``(x_i, sigma_i)``: the oracle
    eigenpair, the estimate from the pair, the pair's solution difference and
    the Heun LTE of the step leaving ``x_i``.
    """

    sample: np.ndarray
    step: np.ndarray
    sigma: np.ndarray
    rho_hat: np.ndarray
    rho_oracle: np.ndarray
    cos_vhat: np.ndarray
    abs_cos_dx: np.ndarray
    abs_cos_lte: np.ndarray

    @property
    def abs_cos_vhat(self):
        return np.abs(self.cos_vhat)

    def __len__(self):
        return self.sample.size

    def rows(self):
        for k in range(len(self)):
            yield (
                int(self.sample[k]),
                int(self.step[k]),
                self.sigma[k],
                self.rho_hat[k],
                self.rho_oracle[k],
                self.cos_vhat[k],
                abs(self.cos_vhat[k]),
                self.abs_cos_dx[k],
                self.abs_cos_lte[k],
            )

    def spearman(self) -> float:
        ok = np.isfinite(self.rho_hat) & np.isfinite(self.rho_oracle)
        return float(stats.spearmanr(self.rho_hat[ok], self.rho_oracle[ok]).statistic)

    def bins(self, column: str, bin_edges=None, min_count: int = 10) -> list[BinSummary]:
        values = getattr(self, column)
        return alignment_by_stiffness_bins(np.stack([self.rho_oracle, values], 1), bin_edges, min_count)


def alignment_samples(field, schedule: Schedule, master_seed: int = 0, count: int = 256, lte_substeps: int = 100) -> AlignmentSamples:
    """Walk unguided Heun trajectories and score every completed pair against the dense oracle."""
    _require_dense(field)
    x = initial_noise(master_seed, range(int(count)), field.dim, schedule.sigma_max)
    idx = np.arange(int(count))
    cols = {k: [] for k in AlignmentSamples.__dataclass_fields__}
    pending = None
    for i, s, sn in schedule.intervals():
        f_i = field.drift(x, s)
        h = s - sn
        if pending is not None:
            x_low, f_low = pending
            pair = ERKPair(s, x, x_low, f_i, f_low)
            est = eigenvector_estimate(pair, f_i)
            rho_o, v_o = dense_oracle(field, x, s)
            v_o = orient(v_o, f_i)
            lte = compute_lte(field, x, s, sn, "heun", lte_substeps)
            valid = est.valid
            cols["sample"].append(idx[valid])
            cols["step"].append(np.full(valid.sum(), i))
            cols["sigma"].append(np.full(valid.sum(), s))
            cols["rho_hat"].append(est.rho_hat[valid])
            cols["rho_oracle"].append(rho_o[valid])
            cols["cos_vhat"].append(_dot(est.v_hat, v_o)[valid])
            cols["abs_cos_dx"].append(_abs_cos(pair.dx, v_o)[valid])
            cols["abs_cos_lte"].append(_abs_cos(lte, v_o)[valid])
        x_low = x - h * f_i
        if sn > 0:
            f_low = field.drift(x_low, sn)
            x = x - (h / 2) * (f_i + f_low)
            pending = (x_low, f_low)
        else:
            x = x_low
            pending = None
    return AlignmentSamples(**{k: np.concatenate(v) if v else np.empty(0) for k, v in cols.items()})


# --------------------------------------------------------------------------- heatmap


@dataclass
class Heatmap:
    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray  # (len(ys), len(xs)), row-major over y then x
    sigma: float

    def argmax_point(self) -> np.ndarray:
        r, c = np.unravel_index(np.argmax(self.values), self.values.shape)
        return np.array([self.xs[c], self.ys[r]])

    def write_csv(self, path: Path) -> None:
        rows = ((self.xs[c], self.ys[r], self.values[r, c]) for r in range(self.ys.size) for c in range(self.xs.size))
        write_rows_csv(path, ("x", "y", "rho_oracle"), rows)

    def write_svg(self, path: Path, cell: int = 6) -> None:
        """Grayscale raster; darker cells are stiffer, top row is the largest ``y``."""
        ny, nx = self.values.shape
        top = float(np.max(self.values)) or 1.0
        parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{nx * cell}" height="{ny * cell}" shape-rendering="crispEdges">'
        ]
        for r in range(ny):
            y = (ny - 1 - r) * cell
            for c in range(nx):
                level = int(round(255 * (1.0 - self.values[r, c] / top)))
                parts.append(f'<rect x="{c * cell}" y="{y}" width="{cell}" height="{cell}" fill="rgb({level},{level},{level})"/>')
        parts.append("</svg>")
        Path(path).write_text("\n".join(parts) + "\n")


def grid_centres(lo: float, hi: float, n: int) -> np.ndarray:
    """Centres of ``n`` equal cells spanning ``[lo, hi]``."""
    if not (hi > lo) or n < 1:
        raise ConfigurationError("grid needs hi > lo and at least one cell")
    return lo + (np.arange(n) + 0.5) * ((hi - lo) / n)


def stiffness_heatmap(field, sigma: float, xlim=(-2.0, 2.0), ylim=(-1.5, 2.0), resolution=(80, 70)) -> Heatmap:
    """Oracle stiffness at cell centres of the rectangle ``xlim x ylim``."""
    if field.dim != 2:
        raise CapabilityError(f"stiffness heatmap needs a 2D field, got d = {field.dim}")
    nx, ny = (resolution, resolution) if np.ndim(resolution) == 0 else resolution
    xs, ys = grid_centres(*xlim, int(nx)), grid_centres(*ylim, int(ny))
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    lams = np.linalg.eigvalsh(field.jacobian(pts, sigma))
    values = np.max(np.abs(lams), axis=-1).reshape(ys.size, xs.size)
    return Heatmap(xs, ys, values, float(sigma))


# --------------------------------------------------------------------------- projection table


@dataclass(frozen=True)
class LTETableRow:
    quantity: str
    lambda_dominant: float
    coeff_dominant: float
    lambda_subdominant: float
    coeff_subdominant: float
    ratio: float


def lte_table(field, sigma_i: float, sigma_next: float, point=None, heatmap: Heatmap | None = None, substeps: int = 100):
    """Project the Heun LTE and the ERK solution difference at the stiffest grid point.

    The point defaults to the argmax of ``heatmap`` (computed at ``sigma_i`` on
    the default grid when not supplied).  Returns ``(point, rows)``.
    """
    if point is None:
        heatmap = heatmap if heatmap is not None else stiffness_heatmap(field, sigma_i)
        point = heatmap.argmax_point()
    x = np.asarray(point, dtype=np.float64)
    h = sigma_i - sigma_next
    lte = compute_lte(field, x, sigma_i, sigma_next, "heun", substeps)
    f_i = field.drift(x, sigma_i)
    x_euler = x - h * f_i
    x_heun = x - (h / 2) * (f_i + field.drift(x_euler, sigma_next))
    rows = []
    for name, vec in (("lte", lte), ("erk_dx", x_heun - x_euler)):
        proj = project_onto_eigenbasis(vec, field, x, sigma_i)
        rows.append(LTETableRow(name, proj[0][0], proj[0][1], proj[1][0], proj[1][1], projection_ratio(proj)))
    return x, rows


# --------------------------------------------------------------------------- convergence


def _uniform_schedule(sigma_start, sigma_end, h):
    n = (sigma_start - sigma_end) / h
    steps = int(round(n))
    if steps < 1 or abs(n - steps) > 1e-9 * max(1.0, n):
        raise ConfigurationError(f"step {h!r} does not divide [{sigma_end!r}, {sigma_start!r}]")
    grid = sigma_start + (sigma_end - sigma_start) * (np.arange(steps + 1) / steps)
    grid[0], grid[-1] = sigma_start, sigma_end
    return Schedule(grid)


def single_gaussian_flow(x0, sigma_from: float, sigma_to: float, mean=0.0, std: float = 1.0):
    """Exact flow of one isotropic Gaussian: ``mu + (x0 - mu) sqrt((s^2 + sigma^2) / (s^2 + sigma_0^2))``."""
    x0 = np.asarray(x0, dtype=np.float64)
    scale = np.sqrt((std**2 + sigma_to**2) / (std**2 + sigma_from**2))
    return mean + (x0 - mean) * scale


def estimate_convergence_order(
    field,
    solver_kind: str,
    h_sequence: Sequence[float],
    x0=None,
    sigma_start: float = 1.5,
    sigma_end: float = 0.5,
    reference=None,
    floor: float = ERROR_FLOOR,
) -> float:
    """Least-squares slope of ``log(error)`` against ``log(h)`` over uniform grids.

    ``reference`` is the exact endpoint for ``x0`` (rows allowed); by default
    it is a Heun solve 100 times finer than the finest grid.  Errors below
    ``floor`` are dropped and at least three points must remain.
    """
    hs = np.asarray(h_sequence, dtype=np.float64)
    if hs.size < 3:
        raise ConfigurationError("need at least three step sizes")
    if not np.allclose(hs[1:] / hs[:-1], 0.5, rtol=1e-9, atol=0):
        raise ConfigurationError("each step size must be half the previous one")
    x0 = np.full((1, field.dim), 1.0) if x0 is None else np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if reference is None:
        fine = _uniform_schedule(sigma_start, sigma_end, hs[-1]).n_steps * 100
        reference = reference_solve(field, x0, sigma_start, sigma_end, fine)
    reference = np.atleast_2d(reference)
    errors = []
    for h in hs:
        end, _ = integrate_batch(field, _uniform_schedule(sigma_start, sigma_end, h), x0, solver_kind, GUIDANCE_OFF)
        errors.append(float(np.max(_norm(end - reference))))
    errors = np.asarray(errors)
    keep = errors >= floor
    if keep.sum() < 3:
        raise ConfigurationError("fewer than three errors above the resolution floor")
    slope, _ = np.polyfit(np.log(hs[keep]), np.log(errors[keep]), 1)
    return float(slope)


# --------------------------------------------------------------------------- endpoint errors


def reference_endpoints(field, schedule: Schedule, x0, substeps: int = 100):
    """Per-row reference trajectory: every schedule interval solved with ``substeps`` Heun substeps."""
    x = np.asarray(x0, dtype=np.float64)
    for _, s, sn in schedule.intervals():
        x = reference_solve(field, x, s, sn, substeps)
    return x


def endpoint_errors(field, schedule: Schedule, guidance: GuidanceConfig, x0, reference, solver_kind="heun"):
    end, trace = integrate_batch(field, schedule, x0, solver_kind, guidance)
    return _norm(end - reference), trace.nfe


SWEEP_COLUMNS = ("w_stiff", "w_con", "scaling", "enabled", "median_error", "mean_error", "nfe")


def endpoint_error_study(
    field,
    schedule: Schedule,
    guidance_sweep: Sequence[GuidanceConfig],
    master_seed: int = 0,
    count: int = 256,
    solver_kind: str = "heun",
    substeps: int = 100,
    min_seeds: int = 256,
) -> list[dict]:
    """Median endpoint error against per-seed reference trajectories for each configuration."""
    if int(count) < min_seeds:
        raise ConfigurationError(f"endpoint-error study needs at least {min_seeds} seeds")
    x0 = initial_noise(master_seed, range(int(count)), field.dim, schedule.sigma_max)
    ref = reference_endpoints(field, schedule, x0, substeps)
    rows = []
    for cfg in guidance_sweep:
        err, nfe = endpoint_errors(field, schedule, cfg, x0, ref, solver_kind)
        rows.append(
            {
                "w_stiff": cfg.w_stiff,
                "w_con": cfg.w_con,
                "scaling": cfg.scaling.value,
                "enabled": cfg.enabled,
                "median_error": float(np.median(err)),
                "mean_error": float(np.mean(err)),
                "nfe": float(np.mean(nfe)),
            }
        )
    return rows
