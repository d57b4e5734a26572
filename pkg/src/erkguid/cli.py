"""Command-line entry point: ``erkguid <command> [flags]``.

Every command resolves its configuration as built-in defaults, overridden by a
JSON ``--config`` file (a flat mapping or a previous run's manifest), overridden
by explicit flags, and writes a run directory whose ``manifest.json`` records
the resolved configuration.  Passing that manifest back as ``--config``
reproduces the run.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    ALIGNMENT_COLUMNS,
    SWEEP_COLUMNS,
    alignment_samples,
    endpoint_error_study,
    estimate_convergence_order,
    lte_table,
    reference_endpoints,
    single_gaussian_flow,
    stiffness_heatmap,
)
from .baselines import adaptive_step_batch, pc_batch
from .core import (
    GUIDANCE_OFF,
    CapabilityError,
    ConfigurationError,
    GuidanceConfig,
    RunManifest,
    Scaling,
    build_edm_schedule,
    initial_noise,
    write_rows_csv,
)
from .fields import (
    GaussianMixture,
    GuidedField,
    build_degraded_field,
    build_tree_gmm,
    conditional_field,
    single_gaussian,
)
from .guidance import ERKProjConfig
from .sampler import integrate_batch, sample_batch, write_run_directory
from .solvers import SOLVERS

__all__ = ["run", "main", "DEFAULTS", "COMMANDS"]

GUIDES = ("none", "cfg", "ag", "erk", "cfg+erk", "ag+erk", "erk-proj")
COMMANDS = ("sample", "align", "heatmap", "lte-table", "sweep", "converge", "baseline", "ablate-scaling")

DEFAULTS = {
    "steps": 32,
    "sigma_min": 0.002,
    "sigma_max": 80.0,
    "rho_exp": 7.0,
    "solver": "heun",
    "w_stiff": 1.0,
    "w_con": 0.5,
    "scaling": "quad",
    "guide": "erk",
    "w": 2.0,
    "seed": 0,
    "count": 256,
    # toy density
    "branches": 2,
    "modes_per_branch": 8,
    "mode_std": 0.05,
    "branch_angle": 50.0,
    "field_data": None,
    # model-guidance analogs
    "class_id": 1,
    "jitter": 0.05,
    "std_inflation": 1.5,
    "degrade_seed": 0,
    # analysis
    "sigma_index": 28,
    "resolution": 64,
    "grid_pad": 0.15,
    "substeps": 100,
    "w_stiff_grid": "0,0.5,0.75,1,1.5",
    "w_con_grid": "0.5",
    "h_seq": "0.1,0.05,0.025,0.0125",
    "tau": 0.5,
    "pc_r": 0.05,
}

CONVENTIONS = {
    "first_step": "never guided",
    "final_step": "unguided euler into sigma = 0",
    "nfe_unit": "network evaluations (a guided field costs two per drift call)",
    "reference": "heun with 100 uniform substeps per schedule interval",
    "pc_corrector": "one move per heun update above sigma = 0; deterministic variant uses sqrt(d) for |z|",
    "erk_proj": "heun only; base guided drifts feed the pair, step-start estimate projects both evaluations",
    "initial_noise": "philox stream per (master_seed, trajectory index)",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(message)


def _floats(text) -> list[float]:
    try:
        return [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise ConfigurationError(f"expected a comma-separated list of numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    a = common.add_argument
    a("--steps", type=int)
    a("--sigma-min", dest="sigma_min", type=float)
    a("--sigma-max", dest="sigma_max", type=float)
    a("--rho-exp", dest="rho_exp", type=float)
    a("--solver", choices=SOLVERS)
    a("--w-stiff", dest="w_stiff", type=float)
    a("--w-con", dest="w_con", type=float)
    a("--scaling", choices=("alpha", "quad", "abs"))
    a("--guide", choices=GUIDES)
    a("--w", type=float, help="model-guidance weight")
    a("--seed", type=int)
    a("--count", type=int)
    a("--jobs", type=int, help="worker processes (results do not depend on it)")
    a("--out", type=Path, help="run directory")
    a("--config", type=Path, help="JSON config or a previous manifest.json")
    a("--branches", type=int)
    a("--modes-per-branch", dest="modes_per_branch", type=int)
    a("--mode-std", dest="mode_std", type=float)
    a("--branch-angle", dest="branch_angle", type=float)
    a("--field", type=Path, help="mixture JSON replacing the tree density")
    a("--class", dest="class_id", type=int)
    a("--jitter", type=float)
    a("--std-inflation", dest="std_inflation", type=float)
    a("--degrade-seed", dest="degrade_seed", type=int)
    a("--sigma-index", dest="sigma_index", type=int)
    a("--resolution", type=int)
    a("--grid-pad", dest="grid_pad", type=float)
    a("--substeps", type=int)
    a("--w-stiff-grid", dest="w_stiff_grid")
    a("--w-con-grid", dest="w_con_grid")
    a("--h-seq", dest="h_seq")
    a("--tau", type=float)
    a("--pc-r", dest="pc_r", type=float)

    parser = _Parser(prog="erkguid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"erkguid {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "sample": "batch sampling with any solver and guidance",
        "align": "alignment and estimator-fidelity samples by stiffness bin",
        "heatmap": "oracle stiffness map (CSV and SVG)",
        "lte-table": "eigenbasis projections at the stiffest grid point",
        "sweep": "endpoint error over a w_stiff x w_con grid",
        "converge": "convergence-order slope on the single Gaussian",
        "baseline": "adaptive halving and predictor-corrector comparisons",
        "ablate-scaling": "endpoint error for each scaling variant",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name], argument_default=argparse.SUPPRESS)
    return parser


# --------------------------------------------------------------------------- config


def _load_config(path: Path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"config {path} must be a JSON object")
    if "config" in data and "command" in data:
        data = data["config"]
    unknown = sorted(set(data) - set(DEFAULTS))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    return data


def resolve_config(explicit: dict) -> dict:
    cfg = dict(DEFAULTS)
    if "config" in explicit:
        cfg.update(_load_config(explicit["config"]))
    for key, value in explicit.items():
        if key in DEFAULTS:
            cfg[key] = value
    if "field" in explicit:
        cfg["field_data"] = GaussianMixture.load(explicit["field"]).to_dict()
    return cfg


def _density(cfg) -> GaussianMixture:
    if cfg["field_data"] is not None:
        return GaussianMixture.from_dict(cfg["field_data"])
    return build_tree_gmm(cfg["branches"], cfg["modes_per_branch"], cfg["mode_std"], cfg["branch_angle"])


def _schedule(cfg):
    return build_edm_schedule(cfg["steps"], cfg["sigma_min"], cfg["sigma_max"], cfg["rho_exp"])


def _guidance(cfg, w_stiff=None, w_con=None, scaling=None) -> GuidanceConfig:
    return GuidanceConfig(
        w_stiff=cfg["w_stiff"] if w_stiff is None else w_stiff,
        w_con=cfg["w_con"] if w_con is None else w_con,
        scaling=cfg["scaling"] if scaling is None else scaling,
    )


def build_setup(cfg):
    """``(field, guidance, proj)`` for the configured guide mode."""
    gm = _density(cfg)
    guide = cfg["guide"]
    if guide not in GUIDES:
        raise ConfigurationError(f"unknown guide {guide!r}")
    field = gm
    if guide.startswith("cfg"):
        field = GuidedField(conditional_field(gm, cfg["class_id"]), gm, cfg["w"])
    elif guide.startswith("ag") or guide == "erk-proj":
        weak = build_degraded_field(gm, cfg["jitter"], cfg["std_inflation"], cfg["degrade_seed"])
        field = GuidedField(gm, weak, cfg["w"])
    guidance = _guidance(cfg) if guide.endswith("erk") else GUIDANCE_OFF
    proj = ERKProjConfig(cfg["w"], cfg["w_stiff"]) if guide == "erk-proj" else None
    return field, guidance, proj


def _manifest(command, cfg, field, guidance, solver=None) -> RunManifest:
    sch = _schedule(cfg)
    return RunManifest(
        command=command,
        master_seed=int(cfg["seed"]),
        field_hash=field.digest(),
        schedule={
            "kind": "edm",
            "steps": cfg["steps"],
            "sigma_min": cfg["sigma_min"],
            "sigma_max": cfg["sigma_max"],
            "rho_exp": cfg["rho_exp"],
            "sigmas": [float(s) for s in sch.sigmas],
        },
        solver=solver or cfg["solver"],
        guidance=dict(guidance.to_dict(), guide=cfg["guide"], w=cfg["w"]),
        count=int(cfg["count"]),
        tool_version=__version__,
        config=cfg,
        conventions=CONVENTIONS,
    )


def _grid_limits(gm: GaussianMixture, pad: float):
    lo = gm.means.min(axis=0) - pad
    hi = gm.means.max(axis=0) + pad
    return (float(lo[0]), float(hi[0])), (float(lo[1]), float(hi[1]))


def _sigma_level(cfg):
    sch = _schedule(cfg)
    k = cfg["sigma_index"]
    if not (0 <= k < sch.n_steps):
        raise ConfigurationError(f"sigma index must lie in [0, {sch.n_steps - 1}]")
    return float(sch.sigmas[k]), float(sch.sigmas[k + 1])


# --------------------------------------------------------------------------- commands


def cmd_sample(cfg, out: Path, jobs: int):
    field, guidance, proj = build_setup(cfg)
    result = sample_batch(field, _schedule(cfg), cfg["solver"], guidance, cfg["seed"], cfg["count"], jobs, proj)
    write_run_directory(out, _manifest("sample", cfg, field, guidance), result)


def cmd_align(cfg, out: Path, jobs: int):
    gm = _density(cfg)
    samples = alignment_samples(gm, _schedule(cfg), cfg["seed"], cfg["count"], cfg["substeps"])
    write_rows_csv(out / "alignment.csv", ALIGNMENT_COLUMNS, samples.rows())
    rows = []
    for column in ("abs_cos_vhat", "cos_vhat", "abs_cos_dx", "abs_cos_lte"):
        for k, b in enumerate(samples.bins(column)):
            rows.append((column, k, b.lo, b.hi, b.count, b.median, int(b.sufficient)))
    write_rows_csv(out / "bins.csv", ("quantity", "bin", "rho_lo", "rho_hi", "count", "median", "sufficient"), rows)
    write_rows_csv(out / "summary.csv", ("pairs", "spearman_rho_hat_vs_oracle"), [(len(samples), samples.spearman())])
    _manifest("align", cfg, gm, GUIDANCE_OFF, solver="heun").write(out)


def cmd_heatmap(cfg, out: Path, jobs: int):
    gm = _density(cfg)
    sigma, _ = _sigma_level(cfg)
    xlim, ylim = _grid_limits(gm, cfg["grid_pad"])
    hm = stiffness_heatmap(gm, sigma, xlim, ylim, cfg["resolution"])
    hm.write_csv(out / "heatmap.csv")
    hm.write_svg(out / "heatmap.svg")
    _manifest("heatmap", cfg, gm, GUIDANCE_OFF).write(out)


def cmd_lte_table(cfg, out: Path, jobs: int):
    gm = _density(cfg)
    sigma, sigma_next = _sigma_level(cfg)
    xlim, ylim = _grid_limits(gm, cfg["grid_pad"])
    hm = stiffness_heatmap(gm, sigma, xlim, ylim, cfg["resolution"])
    point, rows = lte_table(gm, sigma, sigma_next, heatmap=hm, substeps=cfg["substeps"])
    header = ("quantity", "x0", "x1", "sigma", "lambda_dominant", "coeff_dominant", "lambda_subdominant", "coeff_subdominant", "ratio")
    write_rows_csv(
        out / "lte_table.csv",
        header,
        [
            (r.quantity, point[0], point[1], sigma, r.lambda_dominant, r.coeff_dominant, r.lambda_subdominant, r.coeff_subdominant, r.ratio)
            for r in rows
        ],
    )
    _manifest("lte-table", cfg, gm, GUIDANCE_OFF, solver="heun").write(out)


def _study(cfg, field, configs, solver):
    return endpoint_error_study(field, _schedule(cfg), configs, cfg["seed"], cfg["count"], solver, cfg["substeps"])


def cmd_sweep(cfg, out: Path, jobs: int):
    gm = _density(cfg)
    configs = [GUIDANCE_OFF] + [
        _guidance(cfg, w_stiff=ws, w_con=wc) for ws in _floats(cfg["w_stiff_grid"]) for wc in _floats(cfg["w_con_grid"])
    ]
    rows = _study(cfg, gm, configs, cfg["solver"])
    write_rows_csv(out / "sweep.csv", SWEEP_COLUMNS, ([r[c] for c in SWEEP_COLUMNS] for r in rows))
    _manifest("sweep", cfg, gm, _guidance(cfg)).write(out)


def cmd_ablate(cfg, out: Path, jobs: int):
    gm = _density(cfg)
    configs = [GUIDANCE_OFF] + [
        _guidance(cfg, w_stiff=ws, scaling=sc) for sc in Scaling for ws in _floats(cfg["w_stiff_grid"]) if ws > 0
    ]
    rows = _study(cfg, gm, configs, cfg["solver"])
    write_rows_csv(out / "ablation.csv", SWEEP_COLUMNS, ([r[c] for c in SWEEP_COLUMNS] for r in rows))
    _manifest("ablate-scaling", cfg, gm, _guidance(cfg)).write(out)


def cmd_converge(cfg, out: Path, jobs: int):
    field = single_gaussian(np.zeros(2), 1.0) if cfg["field_data"] is None else _density(cfg)
    hs = _floats(cfg["h_seq"])
    x0 = initial_noise(cfg["seed"], range(4), field.dim, 1.0)
    sigma_start, sigma_end = 1.5, 0.5
    exact = None
    if cfg["field_data"] is None:
        exact = single_gaussian_flow(x0, sigma_start, sigma_end, 0.0, 1.0)
    slope = estimate_convergence_order(field, cfg["solver"], hs, x0, sigma_start, sigma_end, reference=exact)
    write_rows_csv(out / "converge.csv", ("solver", "slope", "h_seq"), [(cfg["solver"], slope, cfg["h_seq"])])
    _manifest("converge", cfg, field, GUIDANCE_OFF).write(out)


def cmd_baseline(cfg, out: Path, jobs: int):
    gm = _density(cfg)
    sch = _schedule(cfg)
    seed, count = cfg["seed"], cfg["count"]
    x0 = initial_noise(seed, range(count), gm.dim, sch.sigma_max)
    ref = reference_endpoints(gm, sch, x0, cfg["substeps"])

    def summary(name, endpoints, nfe):
        err = np.sqrt(np.sum((endpoints - ref) ** 2, axis=-1))
        return (name, float(np.median(err)), float(np.mean(err)), float(np.mean(nfe)))

    rows = []
    for name, guidance in (("heun", GUIDANCE_OFF), ("erk-guid", _guidance(cfg))):
        end, trace = integrate_batch(gm, sch, x0, "heun", guidance)
        rows.append(summary(name, end, trace.nfe))
    adaptive = adaptive_step_batch(gm, sch, cfg["tau"], seed, count, jobs)
    rows.append(summary(f"adaptive(tau={cfg['tau']!r})", adaptive.endpoints, adaptive.trace.nfe))
    for stochastic in (False, True):
        pc = pc_batch(gm, sch, cfg["pc_r"], stochastic, seed, count, jobs)
        kind = "stochastic" if stochastic else "deterministic"
        rows.append(summary(f"pc-{kind}(r={cfg['pc_r']!r})", pc.endpoints, pc.trace.nfe))
    write_rows_csv(out / "baseline.csv", ("method", "median_error", "mean_error", "nfe"), rows)
    _manifest("baseline", cfg, gm, _guidance(cfg), solver="heun").write(out)


HANDLERS = {
    "sample": cmd_sample,
    "align": cmd_align,
    "heatmap": cmd_heatmap,
    "lte-table": cmd_lte_table,
    "sweep": cmd_sweep,
    "converge": cmd_converge,
    "baseline": cmd_baseline,
    "ablate-scaling": cmd_ablate,
}


def run(argv=None) -> int:
    """Parse ``argv`` and execute one command; returns the process exit status."""
    try:
        ns = vars(build_parser().parse_args(argv))
        command = ns.pop("command")
        cfg = resolve_config(ns)
        jobs = int(ns.get("jobs", 1))
        if jobs < 1:
            raise ConfigurationError("--jobs must be >= 1")
        out = Path(ns.get("out", Path(f"erkguid-{command}")))
        out.mkdir(parents=True, exist_ok=True)
        HANDLERS[command](cfg, out, jobs)
    except (ConfigurationError, CapabilityError) as exc:
        print(f"erkguid: error: {str(exc).splitlines()[0] if str(exc) else type(exc).__name__}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return exc.code if isinstance(exc.code, int) else 0
    return 0


def main() -> None:
    sys.exit(run())
