"""Shared types: noise schedule, ERK pairs, estimates, guidance config, traces, manifests.

States are plain float64 ndarrays of shape ``(d,)`` or batched ``(B, d)``; every
vector operation in the package reduces over the last axis only so that a row
of a batch evolves bit-identically to the same row integrated alone.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "ConfigurationError",
    "CapabilityError",
    "DENSE_DIM_CAP",
    "Schedule",
    "build_edm_schedule",
    "edm_midpoint",
    "ERKPair",
    "StiffnessEstimate",
    "Scaling",
    "GuidanceConfig",
    "StepTrace",
    "TRACE_COLUMNS",
    "RunManifest",
    "derive_seed_sequence",
    "initial_noise",
    "array_digest",
    "write_trace_csv",
    "write_rows_csv",
]

DENSE_DIM_CAP = 256


class ConfigurationError(ValueError):
    """Invalid run or object configuration."""


class CapabilityError(RuntimeError):
    """Requested operation exceeds what the implementation supports (e.g. dense d > 256)."""


# --------------------------------------------------------------------------- schedule


@dataclass(frozen=True)
class Schedule:
    """Strictly decreasing noise levels ``sigma_0 > ... > sigma_N >= 0``.

    ``rho_exp`` is kept so that baselines can split an interval at the
    schedule's own interpolation midpoint.
    """

    sigmas: np.ndarray
    rho_exp: float = 7.0

    def __post_init__(self):
        s = np.array(self.sigmas, dtype=np.float64)
        if s.ndim != 1 or s.size < 2:
            raise ConfigurationError("schedule needs at least two noise levels")
        if not np.all(np.isfinite(s)):
            raise ConfigurationError("schedule contains non-finite noise levels")
        if not np.all(np.diff(s) < 0):
            raise ConfigurationError("noise levels must be strictly decreasing")
        if s[-1] < 0:
            raise ConfigurationError("final noise level must be >= 0")
        s.flags.writeable = False
        object.__setattr__(self, "sigmas", s)

    @property
    def n_steps(self) -> int:
        return self.sigmas.size - 1

    @property
    def sigma_max(self) -> float:
        return float(self.sigmas[0])

    @property
    def steps(self) -> np.ndarray:
        return self.sigmas[:-1] - self.sigmas[1:]

    def intervals(self) -> Iterable[tuple[int, float, float]]:
        for i in range(self.n_steps):
            yield i, float(self.sigmas[i]), float(self.sigmas[i + 1])


def build_edm_schedule(
    n_steps: int,
    sigma_min: float = 0.002,
    sigma_max: float = 80.0,
    rho_exp: float = 7.0,
) -> Schedule:
    """EDM (Karras) power-law discretisation with a trailing ``sigma = 0``.

    ``n_steps`` levels are interpolated in ``sigma**(1/rho)`` space and zero is
    appended, giving ``n_steps + 1`` levels and ``n_steps`` integration intervals.
    """
    if int(n_steps) != n_steps or n_steps < 2:
        raise ConfigurationError(f"n_steps must be an integer >= 2, got {n_steps!r}")
    if not (sigma_min > 0):
        raise ConfigurationError(f"sigma_min must be positive, got {sigma_min!r}")
    if not (sigma_max > sigma_min):
        raise ConfigurationError(
            f"sigma_max ({sigma_max!r}) must exceed sigma_min ({sigma_min!r})"
        )
    if not (rho_exp > 0):
        raise ConfigurationError(f"rho_exp must be positive, got {rho_exp!r}")
    n = int(n_steps)
    inv = 1.0 / rho_exp
    lo, hi = sigma_min**inv, sigma_max**inv
    ramp = np.arange(n, dtype=np.float64) / (n - 1)
    sigmas = (hi + ramp * (lo - hi)) ** rho_exp
    # pin the endpoints against pow round-off
    sigmas[0], sigmas[-1] = sigma_max, sigma_min
    return Schedule(np.append(sigmas, 0.0), rho_exp=float(rho_exp))


def edm_midpoint(sigma_hi: float, sigma_lo: float, rho_exp: float) -> float:
    """Midpoint of ``[sigma_lo, sigma_hi]`` in ``sigma**(1/rho)`` space."""
    inv = 1.0 / rho_exp
    return float((0.5 * (sigma_hi**inv + sigma_lo**inv)) ** rho_exp)


# --------------------------------------------------------------------------- pairs


@dataclass(frozen=True)
class ERKPair:
    """Higher/lower-order states with drifts of one field.

    For the Heun embedding both drifts are taken at ``sigma``; a Heun step leaves
    ``f_high`` unset because it is the following step's first evaluation.  Pairs built from
    DPM-Solver-2S or AB2 histories evaluate ``f_low`` at its own level
    ``sigma_low``; those are flagged ``mixed_sigma``.
    """

    sigma: float
    x_high: np.ndarray
    x_low: np.ndarray
    f_high: np.ndarray | None
    f_low: np.ndarray
    sigma_low: float | None = None

    def __post_init__(self):
        members = (self.x_high, self.x_low, self.f_high, self.f_low)
        shapes = {np.shape(a) for a in members if a is not None}
        if len(shapes) != 1:
            raise ConfigurationError(f"ERK pair members disagree in shape: {sorted(shapes)}")

    @property
    def complete(self) -> bool:
        return self.f_high is not None

    def completed(self, x_high: np.ndarray, f_high: np.ndarray) -> "ERKPair":
        """Fill in the deferred high-order drift (the next step's first evaluation)."""
        return dataclasses.replace(self, x_high=x_high, f_high=f_high)

    @property
    def mixed_sigma(self) -> bool:
        return self.sigma_low is not None and self.sigma_low != self.sigma

    @property
    def dx(self) -> np.ndarray:
        return self.x_high - self.x_low

    @property
    def df(self) -> np.ndarray:
        return self.f_high - self.f_low


@dataclass(frozen=True)
class StiffnessEstimate:
    """Estimated stiffness ``rho_hat``, oriented unit direction ``v_hat`` and validity.

    Fields broadcast over a leading batch axis when built from batched pairs.
    Invalid entries must be treated as an inactive guidance gate.
    """

    rho_hat: np.ndarray | float
    v_hat: np.ndarray | None
    valid: np.ndarray | bool


class Scaling(str, enum.Enum):
    ALPHA = "alpha"
    QUADRATIC = "quad"
    ABS = "abs"

    @classmethod
    def parse(cls, value: "Scaling | str") -> "Scaling":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {"alpha": cls.ALPHA, "quad": cls.QUADRATIC, "quadratic": cls.QUADRATIC, "abs": cls.ABS}
        try:
            return aliases[key]
        except KeyError:
            raise ConfigurationError(f"unknown scaling variant {value!r}") from None


@dataclass(frozen=True)
class GuidanceConfig:
    w_stiff: float = 1.0
    w_con: float = 0.5
    scaling: Scaling = Scaling.QUADRATIC
    enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "scaling", Scaling.parse(self.scaling))
        if not (self.w_stiff >= 0 and math.isfinite(self.w_stiff)):
            raise ConfigurationError(f"w_stiff must be finite and >= 0, got {self.w_stiff!r}")
        if not (self.w_con >= 0):
            raise ConfigurationError(f"w_con must be >= 0, got {self.w_con!r}")

    @property
    def active(self) -> bool:
        return self.enabled and self.w_stiff > 0

    def to_dict(self) -> dict:
        return {
            "w_stiff": self.w_stiff,
            "w_con": self.w_con,
            "scaling": self.scaling.value,
            "enabled": self.enabled,
        }


GUIDANCE_OFF = GuidanceConfig(w_stiff=0.0, enabled=False)


# --------------------------------------------------------------------------- traces


@dataclass(frozen=True)
class StepTrace:
    index: int
    sigma_in: float
    sigma_out: float
    rho_hat: float
    beta: int
    correction_norm: float
    nfe_cumulative: int
    halved: int = 0
    corrector_eps: float = 0.0
    mixed_sigma_pair: int = 0


TRACE_COLUMNS = ("sample",) + tuple(f.name for f in dataclasses.fields(StepTrace))


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_trace_csv(path: Path, traces: Sequence[Sequence[StepTrace]]) -> None:
    """One row per (sample, step); header fixed by :data:`TRACE_COLUMNS`."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for sample, rows in enumerate(traces):
            for row in rows:
                writer.writerow([sample] + [_fmt(v) for v in dataclasses.astuple(row)])


def write_rows_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([v if isinstance(v, str) else _fmt(v) for v in row])


# --------------------------------------------------------------------------- seeding


def derive_seed_sequence(master_seed: int, *keys: int) -> np.random.SeedSequence:
    """Split ``master_seed`` along an integer key path (trajectory, step, ...)."""
    return np.random.SeedSequence(int(master_seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(k) for k in keys))


def _counter_rng(master_seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(derive_seed_sequence(master_seed, *keys)))


def initial_noise(master_seed: int, indices: Sequence[int] | np.ndarray, dim: int, sigma_max: float) -> np.ndarray:
    """``x ~ N(0, sigma_max^2 I)`` per trajectory, keyed by (master_seed, index).

    Each trajectory owns a counter-based Philox stream whose ``k``-th normal is
    coordinate ``k``; draws are therefore independent of batching and order.
    """
    out = np.empty((len(indices), dim), dtype=np.float64)
    for row, idx in enumerate(indices):
        out[row] = _counter_rng(master_seed, idx).standard_normal(dim)
    return sigma_max * out


def array_digest(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=np.float64)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------- manifest


@dataclass
class RunManifest:
    """Self-describing record of a run; ``config`` alone reproduces the outputs."""

    command: str
    master_seed: int
    field_hash: str
    schedule: dict
    solver: str
    guidance: dict
    count: int
    tool_version: str
    config: dict = field(default_factory=dict)
    conventions: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    def write(self, directory: Path) -> Path:
        path = Path(directory) / "manifest.json"
        path.write_text(self.to_json())
        return path

    @classmethod
    def read(cls, path: Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))
