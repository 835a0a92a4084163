"""Command-line pipeline: simulate, features, reconstruct, evaluate, ablate, pipeline.

Every command reads a flat JSON config (``--config``) whose keys can be overridden by
flags of the same name, and writes a ``config.json`` snapshot next to its outputs.
Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.integrate import trapezoid

from . import io
from .ablation import AXES, SweepSettings, median_by_value, run_sweep
from .evaluation import evaluation_report
from .features import (
    FeatureCurve,
    GridMismatchError,
    accumulate_moments,
    analytic_features,
    default_t_grid,
    estimate_features,
    feature_error,
)
from .forward import default_half_width, simulate_stack
from .model import PointSourceModel, Rng, random_model
from .polar_ft import default_cutoff, make_polar_grid
from .recon import (
    DistanceOperators,
    SolverError,
    SolverOptions,
    VoxelGrid,
    build_operators,
    discretize_targets,
    extract_centers,
    restrict_support,
    solve,
)

log = logging.getLogger("uvtomo")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class ExperimentConfig:
    """Flat experiment configuration; lengths are in box units (the box is ``[-0.5, 0.5]^3``)."""

    # model
    K: int = 3
    kernel_sigma: float = 0.05
    min_separation: float | None = None  # default 4 * kernel_sigma
    max_radius: float | None = None
    # acquisition
    L: int = 1000
    M: int | None = None  # default: smallest field of view covering the box diagonal
    delta: float = 0.01
    snr: float = math.inf  # mean clean pixel power / noise variance
    snr_db: float | None = None  # overrides snr when set
    n_calibration: int = 256
    # features
    N_k: int = 200
    N_phi: int = 200
    cutoff: float | None = None  # default pi / (2 delta)
    T: int = 256
    t_max: float = math.sqrt(3.0)
    debias: bool | None = None  # default: on for noisy stacks
    # reconstruction
    M_r: int = 5
    voxel_size: float = 0.1
    delta_t: float | None = None  # default voxel_size
    max_iters: int = 500
    step_size: float = 1.0
    backtrack: float = 0.5
    tolerance: float = 1e-10
    restarts: int = 10
    support_eps: float = 0.0
    # evaluation and bookkeeping
    threshold: float = 10.0
    seed: int = 0
    output: str = "uvtomo-out"
    workers: int = 1
    ablate_seeds: int = 5

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigError(msg)

        need(self.K >= 1, "K must be at least 1")
        need(self.kernel_sigma > 0, "kernel_sigma must be positive")
        need(self.min_separation is None or self.min_separation >= 0, "min_separation must be non-negative")
        need(self.max_radius is None or self.max_radius > 0, "max_radius must be positive")
        need(self.L >= 0, "L must be non-negative")
        need(self.M is None or self.M >= 1, "M must be at least 1")
        need(self.delta > 0, "delta must be positive")
        need(self.snr > 0, "snr must be positive (inf for noiseless)")
        need(self.N_k >= 2 and self.N_phi >= 4, "need N_k >= 2 and N_phi >= 4")
        need(self.cutoff is None or self.cutoff > 0, "cutoff must be positive")
        need(self.T >= 2 and self.t_max > 0, "need T >= 2 and t_max > 0")
        need(self.M_r >= 1 and self.voxel_size > 0, "need M_r >= 1 and voxel_size > 0")
        need(self.delta_t is None or self.delta_t > 0, "delta_t must be positive")
        need(self.restarts >= 1 and self.max_iters >= 1, "restarts and max_iters must be positive")
        need(self.step_size > 0 and 0 < self.backtrack < 1 and self.tolerance >= 0, "invalid solver schedule")
        need(self.support_eps >= 0, "support_eps must be non-negative")
        need(self.threshold > 0, "threshold must be positive")
        need(0 <= self.seed < 2**64, "seed must fit in 64 bits")
        need(self.workers >= 1 and self.ablate_seeds >= 1 and self.n_calibration >= 1, "counts must be positive")

    # derived values
    @property
    def half_width(self) -> int:
        return self.M if self.M is not None else default_half_width(self.delta)

    @property
    def snr_ratio(self) -> float:
        return self.snr if self.snr_db is None else 10.0 ** (self.snr_db / 10.0)

    @property
    def polar_cutoff(self) -> float:
        return self.cutoff if self.cutoff is not None else default_cutoff(self.delta)

    def solver_options(self) -> SolverOptions:
        return SolverOptions(
            max_iters=self.max_iters, step_size=self.step_size, backtrack=self.backtrack,
            tolerance=self.tolerance, restarts=self.restarts, seed=self.seed,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**{k: _coerce(known[k], v) for k, v in d.items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def _coerce(f: dataclasses.Field, value):
    """Convert JSON or command-line text to the field's type."""
    kind = str(f.type)
    if value is None or (isinstance(value, str) and value.lower() in ("none", "null", "auto")):
        if "None" not in kind:
            raise ConfigError(f"{f.name} cannot be empty")
        return None
    if kind.startswith("bool"):
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("1", "true", "yes", "on"):
            return True
        if str(value).lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{f.name}: expected a boolean, got {value!r}")
    try:
        if kind.startswith("int"):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if kind.startswith("float"):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{f.name}: cannot interpret {value!r}") from None
    return str(value)


def load_config(path: str | Path | None, overrides: dict) -> ExperimentConfig:
    base = {}
    if path is not None:
        raw = io.read_json(path)
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        base.update(raw)
    base.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(base)


# ---------------------------------------------------------------------------
# stages


def _outdir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "config.json", cfg.to_dict())
    return out


def make_model(cfg: ExperimentConfig) -> PointSourceModel:
    return random_model(cfg.K, cfg.min_separation, cfg.kernel_sigma, Rng(cfg.seed).child("model"), cfg.max_radius)


def cmd_simulate(cfg: ExperimentConfig, export_frame: int | None = None) -> Path:
    if cfg.L < 1:
        raise ConfigError("simulate needs L >= 1")
    out = _outdir(cfg)
    model = make_model(cfg)
    stack = simulate_stack(
        model, cfg.L, cfg.half_width, cfg.delta, cfg.snr_ratio,
        Rng(cfg.seed).child("simulate"), cfg.n_calibration, cfg.workers,
    )
    stack.seed = cfg.seed
    model.save(out / "model.json")
    io.write_stack(out / "stack.uvts", stack)
    if export_frame is not None:
        if not 0 <= export_frame < stack.L:
            raise ConfigError(f"frame {export_frame} out of range for L={stack.L}")
        io.write_frame_csv(out / f"frame_{export_frame}.csv", stack.images[export_frame], stack.delta)
    print(f"wrote {stack.L} frames of {2 * stack.M + 1}^2 pixels to {out / 'stack.uvts'}")
    print(f"noise sigma: {stack.noise_sigma!r}")
    print(f"empirical SNR: {stack.empirical_snr!r}")
    return out / "stack.uvts"


def _feature_curves(stack_path: Path, cfg: ExperimentConfig):
    header = io.read_stack_header(stack_path)
    grid = make_polar_grid(cfg.N_k, cfg.N_phi, cfg.cutoff if cfg.cutoff is not None else default_cutoff(header["delta"]))
    mom = accumulate_moments(io.iter_stack(stack_path), workers=cfg.workers)
    fs = estimate_features(mom, grid, default_t_grid(cfg.T, cfg.t_max), cfg.debias)
    meta = {
        "L": header["L"], "delta": header["delta"], "M": header["M"], "N_k": cfg.N_k, "N_phi": cfg.N_phi,
        "cutoff": grid.cutoff, "noise_sigma": header["noise_sigma"], "seed": header["seed"],
        "debias": fs.b2.debiased, "noise_bias": fs.b2.noise_bias, "T": cfg.T, "t_max": cfg.t_max,
        "mean_mass": fs.mean.mass, "autocorrelation_mass": fs.autocorrelation.mass,
    }
    return fs, meta


def _reference_curves(path: Path, t_grid: np.ndarray, K_hint: int) -> tuple[FeatureCurve, FeatureCurve, float]:
    """Oracle curves from a model JSON (evaluated on ``t_grid``) or a ``t,mu,c`` CSV."""
    if path.suffix.lower() == ".json":
        model = PointSourceModel.load(path)
        mu, c = analytic_features(model, t_grid)
        return mu, c, model.total_mass
    cols = io.read_columns(path)
    if not {"t", "mu", "c"} <= set(cols):
        raise io.FormatError(f"{path}: reference CSV needs columns t, mu, c")
    mu = FeatureCurve("mean", cols["t"], cols["mu"])
    c = FeatureCurve("autocorrelation", cols["t"], cols["c"])
    if mu.t_grid.shape != t_grid.shape or not np.allclose(mu.t_grid, t_grid, rtol=0, atol=1e-12):
        raise GridMismatchError(f"{path}: reference t-grid differs from the estimated features' t-grid")
    return mu, c, float(K_hint)


def cmd_features(cfg: ExperimentConfig, stack_path: str | Path, analytic: str | Path | None = None) -> Path:
    stack_path = Path(stack_path)
    out = _outdir(cfg)
    fs, meta = _feature_curves(stack_path, cfg)
    g = fs.b1.grid
    io.write_columns(out / "b1.csv", {"k": g.k_nodes, "weight": g.k_weights, "value": fs.b1.values})
    io.write_columns(out / "b2.csv", {"k": g.k_nodes, "weight": g.k_weights, "value": fs.b2.values})
    mu_cols = {"t": fs.mean.t_grid, "value": fs.mean.values}
    c_cols = {"t": fs.autocorrelation.t_grid, "value": fs.autocorrelation.values}
    if analytic is not None:
        mu_ref, c_ref, K = _reference_curves(Path(analytic), fs.mean.t_grid, cfg.K)
        err_mu = feature_error(fs.mean.normalized(K), mu_ref)
        err_c = feature_error(fs.autocorrelation.normalized(K * K), c_ref)
        mu_cols["analytic"] = mu_ref.values
        c_cols["analytic"] = c_ref.values
        meta.update(mu_error=err_mu, c_error=err_c)
        print(f"relative l2 error of mu: {err_mu:.6g}")
        print(f"relative l2 error of C: {err_c:.6g}")
    io.write_columns(out / "mu.csv", mu_cols)
    io.write_columns(out / "c.csv", c_cols)
    io.write_json(out / "features.json", meta)
    print(f"features of {meta['L']} images written to {out}")
    return out


def _load_feature_dir(path: Path) -> tuple[FeatureCurve, FeatureCurve]:
    mu = io.read_columns(path / "mu.csv")
    c = io.read_columns(path / "c.csv")
    return FeatureCurve("mean", mu["t"], mu["value"]), FeatureCurve("autocorrelation", c["t"], c["value"])


def _geometry_warnings(cfg: ExperimentConfig, mu: FeatureCurve, model_path: Path | None) -> list[str]:
    reach = (cfg.M_r + 0.5) * cfg.voxel_size
    notes = []
    if model_path is not None and model_path.exists():
        model = PointSourceModel.load(model_path)
        if np.any(np.abs(model.centers) > reach):
            notes.append(f"true centers fall outside the reconstruction grid (half extent {reach:g})")
    corner = reach * math.sqrt(3.0)
    total = mu.mass
    if total > 0:
        beyond = float(trapezoid(np.where(mu.t_grid > corner, mu.values, 0.0), mu.t_grid)) / total
        if beyond > 0.05:
            notes.append(f"{100 * beyond:.1f}% of the mean feature lies beyond the grid corner radius {corner:g}")
    return notes


def cmd_reconstruct(
    cfg: ExperimentConfig,
    features_dir: str | Path | None = None,
    stack_path: str | Path | None = None,
    model_path: str | Path | None = None,
) -> Path:
    if (features_dir is None) == (stack_path is None):
        raise ConfigError("reconstruct needs exactly one of --features or --stack")
    out = _outdir(cfg)
    if features_dir is not None:
        mu, c = _load_feature_dir(Path(features_dir))
    else:
        fs, _ = _feature_curves(Path(stack_path), cfg)
        mu, c = fs.mean, fs.autocorrelation
    for note in _geometry_warnings(cfg, mu, None if model_path is None else Path(model_path)):
        log.warning("warning: %s", note)
        print(f"warning: {note}", file=sys.stderr)
    grid = VoxelGrid(cfg.M_r, cfg.voxel_size)
    ops = build_operators(grid, cfg.delta_t)
    r, C = discretize_targets(mu, c, ops, cfg.K)
    if cfg.support_eps > 0:
        r = restrict_support(r, cfg.K, cfg.support_eps)
    print(f"radial targets sum to {math.fsum(r)!r} (K = {cfg.K}); pair targets sum to {math.fsum(C)!r}")
    if not math.isclose(r.sum(), cfg.K, rel_tol=1e-12):
        raise FloatingPointError("radial targets lost their normalization")
    res = solve(C, r, ops, cfg.K, cfg.solver_options())
    centers = extract_centers(res.phi, grid, cfg.K)
    io.write_volume(out / "density.uvtv", res.phi, grid.half_width, grid.voxel_size)
    io.write_columns(out / "trace.csv", {
        "iter": np.arange(len(res.trace.objective)),
        "objective": np.array(res.trace.objective),
        "step": np.array(res.trace.step),
    })
    io.write_json(out / "centers.json", {"centers": centers, "voxel_size": grid.voxel_size, "K": cfg.K})
    io.write_json(out / "recon.json", {
        "objective": res.objective,
        "best_restart": res.best_restart,
        "restarts": [{"index": x.index, "objective": x.objective, "error": x.error} for x in res.restarts],
        "r_targets": r, "C_targets": C, "delta_t": ops.delta_t,
    })
    print(f"best objective {res.objective:.6g} from restart {res.best_restart}; centers written to {out / 'centers.json'}")
    return out / "centers.json"


def cmd_evaluate(cfg: ExperimentConfig, centers_path: str | Path, model_path: str | Path) -> dict:
    out = _outdir(cfg)
    est = io.read_json(centers_path)
    est = np.asarray(est["centers"] if isinstance(est, dict) else est, dtype=float)
    model = PointSourceModel.load(model_path)
    report = evaluation_report(est, model.centers, cfg.voxel_size, cfg.threshold)
    io.write_json(out / "report.json", report)
    print(f"rmsd {report['rmsd']:.6g} voxels; success: {str(report['success']).lower()} (threshold {cfg.threshold:g})")
    return report


def cmd_ablate(cfg: ExperimentConfig, axis: str, values: Sequence[float]) -> Path:
    if axis not in AXES:
        raise ConfigError(f"unknown axis {axis!r}; choose from {', '.join(AXES)}")
    out = _outdir(cfg)
    model = make_model(cfg)
    model.save(out / "model.json")
    settings = SweepSettings(
        L=cfg.L, M=cfg.half_width, delta=cfg.delta, snr=cfg.snr_ratio, N_k=cfg.N_k, N_phi=cfg.N_phi,
        cutoff=cfg.cutoff, T=cfg.T, t_max=cfg.t_max, debias=cfg.debias,
        n_calibration=cfg.n_calibration, workers=cfg.workers,
    )
    rows = run_sweep(model, axis, list(values), settings, cfg.ablate_seeds, cfg.seed)
    io.write_columns(out / "ablation.csv", {
        "axis": np.array([r.axis for r in rows]),
        "value": np.array([r.value for r in rows]),
        "seed": np.array([r.seed for r in rows]),
        "mu_error": np.array([r.mu_error for r in rows]),
        "c_error": np.array([r.c_error for r in rows]),
    })
    for v, (em, ec) in median_by_value(rows).items():
        print(f"{axis}={v:g}: median mu error {em:.4g}, median C error {ec:.4g}")
    return out / "ablation.csv"


def cmd_pipeline(cfg: ExperimentConfig) -> dict:
    out = Path(cfg.output)
    stack = cmd_simulate(cfg)
    feats = cmd_features(cfg, stack, out / "model.json")
    centers = cmd_reconstruct(cfg, features_dir=feats, model_path=out / "model.json")
    return cmd_evaluate(cfg, centers, out / "model.json")


# ---------------------------------------------------------------------------
# argument parsing


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its keys")
    for f in fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, dest=f"cfg_{f.name}", default=None, metavar=f.name.upper(), help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uvtomo",
        description="Point-source reconstruction from projections at unknown orientations.",
        epilog="Every ExperimentConfig key is also a flag, e.g. --kernel-sigma 0.05 --N-k 200 --snr-db -6.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a projection stack")
    _add_config_flags(p)
    p.add_argument("--export-frame", type=int, help="also write this frame as CSV")

    p = sub.add_parser("features", help="estimate mean and autocorrelation features from a stack")
    _add_config_flags(p)
    p.add_argument("--stack", required=True)
    p.add_argument("--analytic", help="model JSON or t,mu,c CSV to compare against")

    p = sub.add_parser("reconstruct", help="recover a density and centers from features")
    _add_config_flags(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--features", help="directory holding mu.csv and c.csv")
    src.add_argument("--stack", help="stack file; features are estimated in memory")
    p.add_argument("--model", help="ground-truth model JSON, used only for geometry warnings")

    p = sub.add_parser("evaluate", help="align centers to a model and report the RMSD")
    _add_config_flags(p)
    p.add_argument("--centers", required=True)
    p.add_argument("--model", required=True)

    p = sub.add_parser("ablate", help="sweep one acquisition or grid parameter")
    _add_config_flags(p)
    p.add_argument("--axis", required=True, choices=AXES)
    p.add_argument("--values", required=True, nargs="+", type=float)

    p = sub.add_parser("pipeline", help="simulate, estimate features, reconstruct and evaluate")
    _add_config_flags(p)
    return parser


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return load_config(args.config, overrides)


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = _config_from_args(args)
        if args.command == "simulate":
            cmd_simulate(cfg, args.export_frame)
        elif args.command == "features":
            cmd_features(cfg, args.stack, args.analytic)
        elif args.command == "reconstruct":
            cmd_reconstruct(cfg, args.features, args.stack, args.model)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.centers, args.model)
        elif args.command == "ablate":
            cmd_ablate(cfg, args.axis, args.values)
        else:
            cmd_pipeline(cfg)
    except (SolverError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
