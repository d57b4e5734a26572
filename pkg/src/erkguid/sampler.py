"""Batched sampling loop with the ERK-Guid hook, NFE accounting and run-directory output.

All trajectories of a batch advance together as rows of a ``(B, d)`` array.
Because every operation reduces over the last axis only, a row's arithmetic
does not depend on the other rows, so chunking or reordering a batch leaves
each trajectory bit-identical.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    ConfigurationError,
    ERKPair,
    GuidanceConfig,
    RunManifest,
    Schedule,
    StepTrace,
    initial_noise,
    write_rows_csv,
    write_trace_csv,
)
from .estimators import eigenvector_estimate
from .fields import GuidedField
from .guidance import ERKProjConfig, erk_guid_terms, erk_proj_drift
from .solvers import SOLVERS, History, deis_ab2_step, dpm2s_step, euler_step, heun_step

__all__ = [
    "TraceTable",
    "BatchResult",
    "integrate_batch",
    "sample_trajectory",
    "sample_batch",
    "write_run_directory",
]


@dataclass
class TraceTable:
    """Per-step, per-trajectory diagnostics stored as ``(n_steps, B)`` arrays."""

    sigma_in: np.ndarray
    sigma_out: np.ndarray
    rho_hat: np.ndarray
    beta: np.ndarray
    correction_norm: np.ndarray
    nfe_cumulative: np.ndarray
    halved: np.ndarray
    corrector_eps: np.ndarray
    mixed_sigma_pair: np.ndarray

    @classmethod
    def empty(cls, n_steps: int, batch: int) -> "TraceTable":
        shape = (n_steps, batch)
        return cls(
            sigma_in=np.zeros(shape),
            sigma_out=np.zeros(shape),
            rho_hat=np.full(shape, np.nan),
            beta=np.zeros(shape, dtype=bool),
            correction_norm=np.zeros(shape),
            nfe_cumulative=np.zeros(shape, dtype=np.int64),
            halved=np.zeros(shape, dtype=bool),
            corrector_eps=np.zeros(shape),
            mixed_sigma_pair=np.zeros(shape, dtype=bool),
        )

    @property
    def batch(self) -> int:
        return self.beta.shape[1]

    @property
    def nfe(self) -> np.ndarray:
        """Total evaluations per trajectory."""
        return self.nfe_cumulative[-1]

    def rows(self, b: int) -> list[StepTrace]:
        return [
            StepTrace(
                index=i,
                sigma_in=float(self.sigma_in[i, b]),
                sigma_out=float(self.sigma_out[i, b]),
                rho_hat=float(self.rho_hat[i, b]),
                beta=int(self.beta[i, b]),
                correction_norm=float(self.correction_norm[i, b]),
                nfe_cumulative=int(self.nfe_cumulative[i, b]),
                halved=int(self.halved[i, b]),
                corrector_eps=float(self.corrector_eps[i, b]),
                mixed_sigma_pair=int(self.mixed_sigma_pair[i, b]),
            )
            for i in range(self.beta.shape[0])
        ]

    @classmethod
    def concatenate(cls, tables: Sequence["TraceTable"]) -> "TraceTable":
        names = cls.__dataclass_fields__.keys()
        return cls(**{n: np.concatenate([getattr(t, n) for t in tables], axis=1) for n in names})


@dataclass
class BatchResult:
    indices: np.ndarray
    x0: np.ndarray
    endpoints: np.ndarray
    trace: TraceTable

    @property
    def count(self) -> int:
        return self.endpoints.shape[0]


def _norm(a):
    return np.sqrt(np.sum(a * a, axis=-1))


class _ProjectedGuidance:
    """Drift view that applies ERK-Proj to a guided field with a fixed estimate.

    ``last_base`` keeps the plain guided drift of the latest evaluation, which
    is what the next ERK pair is built from.
    """

    def __init__(self, field: GuidedField, cfg: ERKProjConfig, est):
        self.field, self.cfg, self.est = field, cfg, est
        self.last_base = None

    def evaluate(self, x, sigma):
        f_main, f_guiding = self.field.parts(x, sigma)
        self.last_base = GuidedField.combine(f_main, f_guiding, self.cfg.w)
        return erk_proj_drift(f_main - f_guiding, self.est, self.cfg, f_main)

    def drift(self, x, sigma):
        return self.evaluate(x, sigma)


def _check_inputs(field, schedule: Schedule, solver_kind: str, proj: ERKProjConfig | None):
    if solver_kind not in SOLVERS:
        raise ConfigurationError(f"unknown solver {solver_kind!r}; choose from {', '.join(SOLVERS)}")
    if not isinstance(schedule, Schedule):
        raise ConfigurationError("schedule must be a Schedule")
    if proj is not None:
        if solver_kind != "heun":
            raise ConfigurationError("ERK-Proj is defined for the Heun sampler only")
        if not isinstance(field, GuidedField):
            raise ConfigurationError("ERK-Proj needs a GuidedField")
        if proj.w != field.w:
            raise ConfigurationError("ERK-Proj weight must match the guided field's w")


def integrate_batch(
    field,
    schedule: Schedule,
    x0: np.ndarray,
    solver_kind: str = "heun",
    guidance: GuidanceConfig = GuidanceConfig(),
    proj: ERKProjConfig | None = None,
) -> tuple[np.ndarray, TraceTable]:
    """Integrate rows of ``x0`` from ``sigma_0`` to ``sigma_N``.

    Step 0 is never guided.  A guided step corrects the solver's output by the
    ERK-Guid displacement computed from the pair available at that step:

    * heun: the pair at ``sigma_i`` left by step ``i - 1``, completed with the
      first evaluation of step ``i``;
    * dpm2s: the step's own (start, intermediate) pair;
    * deis: the states ``x_i`` and ``x_(i-1)`` with their drifts.

    The final step into ``sigma = 0`` is an unguided Euler step for every
    solver.  With ``proj`` set the guided field's guidance vector is projected
    using the step-start estimate and no ERK-Guid correction is applied.
    """
    _check_inputs(field, schedule, solver_kind, proj)
    x = np.array(x0, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != field.dim:
        raise ConfigurationError(f"initial states must have shape (B, {field.dim}), got {x.shape}")
    batch = x.shape[0]
    cost = field.nfe_cost
    trace = TraceTable.empty(schedule.n_steps, batch)
    nfe = np.zeros(batch, dtype=np.int64)
    pending: ERKPair | None = None
    history: History | None = None

    for i, s, sn in schedule.intervals():
        h = s - sn
        est = None
        mixed = False
        if proj is None:
            f_pair = field.drift(x, s)
            step_field = field
        else:
            f_main, f_guiding = field.parts(x, s)
            f_pair = GuidedField.combine(f_main, f_guiding, proj.w)
        nfe += cost

        if solver_kind == "heun" and pending is not None:
            est = eigenvector_estimate(pending.completed(x, f_pair), f_pair)
        elif solver_kind == "deis" and history is not None:
            pair = ERKPair(s, x, history.x, f_pair, history.f, sigma_low=history.sigma)
            est = eigenvector_estimate(pair, f_pair)
            mixed = pair.mixed_sigma

        if proj is None:
            f_i = f_pair
        else:
            step_field = _ProjectedGuidance(field, proj, est)
            f_i = erk_proj_drift(f_main - f_guiding, est, proj, f_main)

        if solver_kind == "euler":
            res = euler_step(step_field, x, s, sn, f_i)
        elif solver_kind == "heun":
            res = heun_step(step_field, x, s, sn, f_i)
        elif solver_kind == "dpm2s":
            res = dpm2s_step(step_field, x, s, sn, f_i)
            if res.pair is not None:
                est = eigenvector_estimate(res.pair, f_i)
                mixed = res.pair.mixed_sigma
        else:
            res = deis_ab2_step(step_field, x, s, sn, history, f_i)
        nfe += cost * res.evals_used
        x_next = res.x_next

        gate = np.zeros(batch, dtype=bool)
        corr = np.zeros(batch)
        if proj is None and i >= 1 and sn > 0 and est is not None:
            gate, delta = erk_guid_terms(f_i, est, h, guidance)
            gate = np.broadcast_to(gate, (batch,))
            if delta is not None:
                guided = np.where(gate[:, None], x_next - delta, x_next)
                corr = _norm(guided - x_next)
                x_next = guided

        if solver_kind == "heun" and res.pair is not None:
            f_low = res.pair.f_low if proj is None else step_field.last_base
            pending = ERKPair(sn, x_next, res.pair.x_low, None, f_low)
        else:
            pending = None
        if solver_kind == "deis":
            history = History(x, f_pair, s, h)

        trace.sigma_in[i] = s
        trace.sigma_out[i] = sn
        if est is not None:
            trace.rho_hat[i] = np.where(est.valid, est.rho_hat, np.nan)
        trace.beta[i] = gate
        trace.correction_norm[i] = corr
        trace.nfe_cumulative[i] = nfe
        trace.mixed_sigma_pair[i] = mixed
        x = x_next

    if not np.all(np.isfinite(x)):
        raise FloatingPointError("sampler produced non-finite states")
    return x, trace


def _chunk_worker(args):
    field, schedule, solver_kind, guidance, proj, master_seed, indices = args
    x0 = initial_noise(master_seed, indices, field.dim, schedule.sigma_max)
    final, trace = integrate_batch(field, schedule, x0, solver_kind, guidance, proj)
    return x0, final, trace


def _split(indices: np.ndarray, parts: int) -> list[np.ndarray]:
    return [c for c in np.array_split(indices, parts) if c.size]


def run_chunks(worker, payload: tuple, indices: np.ndarray, jobs: int = 1) -> list:
    """Apply ``worker(payload + (chunk,))`` over contiguous chunks, in index order."""
    if jobs <= 1 or indices.size < 2:
        return [worker(payload + (indices,))]
    chunks = _split(indices, min(jobs, indices.size))
    with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
        return list(pool.map(worker, [payload + (c,) for c in chunks]))


def sample_batch(
    field,
    schedule: Schedule,
    solver_kind: str = "heun",
    guidance: GuidanceConfig = GuidanceConfig(),
    master_seed: int = 0,
    count: int = 1,
    jobs: int = 1,
    proj: ERKProjConfig | None = None,
    indices: Sequence[int] | None = None,
) -> BatchResult:
    """Sample trajectories ``0 .. count-1`` (or the given ``indices``).

    Trajectory ``i`` draws its initial noise from ``split(master_seed, i)``, so
    results do not depend on ``jobs`` or on the order of ``indices``.
    """
    if indices is None:
        if int(count) < 1:
            raise ConfigurationError("count must be >= 1")
        indices = np.arange(int(count))
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 1 or indices.size == 0:
        raise ConfigurationError("need at least one trajectory index")
    _check_inputs(field, schedule, solver_kind, proj)
    payload = (field, schedule, solver_kind, guidance, proj, int(master_seed))
    parts = run_chunks(_chunk_worker, payload, indices, jobs)
    return BatchResult(
        indices=indices,
        x0=np.concatenate([p[0] for p in parts]),
        endpoints=np.concatenate([p[1] for p in parts]),
        trace=TraceTable.concatenate([p[2] for p in parts]),
    )


def sample_trajectory(
    field,
    schedule: Schedule,
    solver_kind: str = "heun",
    guidance: GuidanceConfig = GuidanceConfig(),
    seed: int = 0,
    index: int = 0,
    proj: ERKProjConfig | None = None,
) -> tuple[np.ndarray, list[StepTrace]]:
    """One trajectory; identical to row ``index`` of :func:`sample_batch` with the same seed."""
    res = sample_batch(field, schedule, solver_kind, guidance, seed, indices=[index], proj=proj)
    return res.endpoints[0], res.trace.rows(0)


def write_run_directory(out: Path, manifest: RunManifest, result: BatchResult) -> Path:
    """``manifest.json``, ``trace.csv`` and ``endpoints.csv`` (one row per sample)."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest.write(out)
    write_trace_csv(out / "trace.csv", [result.trace.rows(b) for b in range(result.count)])
    dim = result.endpoints.shape[1]
    header = ["sample", "master_seed"] + [f"x{k}" for k in range(dim)]
    rows = (
        [int(idx), int(manifest.master_seed)] + list(result.endpoints[b])
        for b, idx in enumerate(result.indices)
    )
    write_rows_csv(out / "endpoints.csv", header, rows)
    return out
