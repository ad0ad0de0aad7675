"""Command-line pipeline: eigenbasis, reduction, optimization, validation.

Subcommands compose through an output directory: `eigen` caches the
spectral basis keyed by the fields that determine it, `optimize` writes
the control and reduced-trajectory artifacts, `validate` replays the
full equation and the particle ensemble and grades the run.  `all` runs
the three in order.  Every artifact is listed in manifest.json with a
content digest; CSV outputs are deterministic for a fixed config and
seed.

Exit codes: 0 ok, 1 config error, 2 eigensolver failure, 3 optimizer
failure, 4 validation gate failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .fields import (
    FLOAT_FMT,
    ScalarField,
    weighted_norm,
    write_scalar_csv,
)
from .problem import (
    ExperimentConfig,
    build_initial_density,
    desired_vorticity,
    reference_problem,
    validate_shape_bcs,
)
from .operators import (
    EigensolverError,
    SpectralBasis,
    assemble_generator,
    eigenbasis,
)
from .reduction import ReducedModel, assemble_reduced_model, project, reconstruct
from .control import (
    ControlTrajectory,
    LineSearchError,
    RolloutBlowupError,
    check_gradient,
    multi_start,
    optimize,
    rollout_state,
    total_variation,
)
from .pde import (
    compute_flux,
    compute_vorticity,
    controlled_operator,
    integrate_fpe,
)
from .particles import (
    angular_momentum,
    estimate_flux,
    histogram_tv_distance,
    sample_initial,
    simulate,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_EIGEN = 2
EXIT_OPTIMIZER = 3
EXIT_VALIDATION = 4


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class RunManifest:
    """Accumulates artifacts, timings and residuals; serialized as JSON."""

    def __init__(self, out_dir: Path, config: ExperimentConfig):
        self.out_dir = out_dir
        self.data = {
            "config_hash": config.config_hash(),
            "eigen_hash": config.eigen_hash(),
            "versions": {
                "python": sys.version.split()[0],
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "fpcirc": __version__,
            },
            "artifacts": {},
            "figures": {},
            "timings": {},
            "residuals": {},
            "gates": {},
        }

    def add_artifact(self, name: str, path: Path, figure: str | None = None) -> None:
        rel = str(Path(path).relative_to(self.out_dir))
        self.data["artifacts"][name] = {"path": rel, "sha256": _sha256(path)}
        if figure:
            self.data["figures"][figure] = rel

    def add_dir_artifact(self, name: str, path: Path) -> None:
        files = sorted(p for p in Path(path).rglob("*") if p.is_file())
        digest = hashlib.sha256()
        for p in files:
            digest.update(p.name.encode())
            digest.update(bytes.fromhex(_sha256(p)))
        self.data["artifacts"][name] = {
            "path": str(Path(path).relative_to(self.out_dir)),
            "sha256": digest.hexdigest(),
            "n_files": len(files),
        }

    def write(self) -> None:
        with open(self.out_dir / "manifest.json", "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)


def _load_config(args) -> ExperimentConfig:
    if args.config is not None:
        text = Path(args.config).read_text()
        cfg = ExperimentConfig.from_json(text)
    else:
        cfg = ExperimentConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), **overrides})
    return cfg


def _basis_dir(out: Path, cfg: ExperimentConfig) -> Path:
    return out / f"basis_{cfg.eigen_hash()[:16]}"


def _get_basis(out: Path, cfg: ExperimentConfig, prob, manifest: RunManifest):
    """Load the cached eigenbasis for this config or compute and cache it."""
    bdir = _basis_dir(out, cfg)
    if (bdir / "manifest.json").exists():
        basis = SpectralBasis.load(bdir)
        manifest.data["timings"]["eigen"] = 0.0
        manifest.data["residuals"]["eigen"] = basis.residuals
        manifest.add_dir_artifact("basis", bdir)
        return basis
    gen = assemble_generator(prob.potential, cfg.D, prob.grid)
    t0 = time.perf_counter()
    basis = eigenbasis(gen, prob.rho_s, cfg.M)
    manifest.data["timings"]["eigen"] = time.perf_counter() - t0
    manifest.data["residuals"]["eigen"] = basis.residuals
    basis.save(bdir)
    manifest.add_dir_artifact("basis", bdir)
    return basis


def _write_field_artifacts(out: Path, prob, manifest: RunManifest) -> None:
    rho_path = out / "rho_s.csv"
    write_scalar_csv(prob.rho_s, rho_path)
    manifest.add_artifact("rho_s", rho_path, figure="fig1")
    om_path = out / "omega_d.csv"
    write_scalar_csv(desired_vorticity(prob.shapes), om_path)
    manifest.add_artifact("omega_d", om_path, figure="fig2")


def cmd_eigen(cfg: ExperimentConfig, out: Path, manifest: RunManifest, args) -> int:
    prob = reference_problem(cfg)
    bc = validate_shape_bcs(prob.shapes)
    manifest.data["residuals"]["shape_bcs"] = {
        "max_alpha_normal": bc.max_alpha_normal,
        "max_phi_perp_normal": bc.max_phi_perp_normal,
        "alpha_ok": bc.alpha_ok,
        "phi_ok": bc.phi_ok,
    }
    try:
        basis = _get_basis(out, cfg, prob, manifest)
    except EigensolverError as exc:
        print(f"eigensolver failed: {exc}", file=sys.stderr)
        return EXIT_EIGEN
    _write_field_artifacts(out, prob, manifest)
    print(f"eigenbasis ({basis.M} modes), residuals "
          f"{json.dumps(basis.residuals, default=str)}")
    print(" m  lambda")
    for m, lam in enumerate(basis.eigenvalues):
        print(f"{m:3d}  {lam: .6f}")
    return EXIT_OK


def _build_model(prob, basis):
    omega_d = desired_vorticity(prob.shapes)
    return assemble_reduced_model(
        basis, prob.shapes, prob.potential, prob.config.D, omega_d
    )


def _write_reduced_states(path: Path, traj: ControlTrajectory, C: np.ndarray) -> None:
    times = np.concatenate([traj.times, [traj.tf]])
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t"] + [f"c{m}" for m in range(C.shape[1])])
        for t, row in zip(times, C):
            wr.writerow([FLOAT_FMT % t] + [FLOAT_FMT % v for v in row])


def cmd_optimize(cfg: ExperimentConfig, out: Path, manifest: RunManifest, args) -> int:
    prob = reference_problem(cfg)
    try:
        basis = _get_basis(out, cfg, prob, manifest)
    except EigensolverError as exc:
        print(f"eigensolver failed: {exc}", file=sys.stderr)
        return EXIT_EIGEN
    model = _build_model(prob, basis)
    rho0 = build_initial_density(prob.initial, prob.grid, prob.w)
    c0 = project(rho0, basis)
    traj0 = ControlTrajectory.from_constant(
        cfg.t0, cfg.tf, cfg.dt, cfg.u1_init, cfg.u2_init
    )

    grad_check = None
    if args.check_grad:
        grad_check = check_gradient(
            model, traj0, c0, cfg.weights, n_directions=20, eps=1e-6, seed=cfg.seed
        )
        print(f"gradient check: max relative error {grad_check:.3e}")

    t0 = time.perf_counter()
    try:
        if args.multi_start > 1:
            report, _all = multi_start(
                model, traj0, c0, cfg.weights,
                n_starts=args.multi_start, seed=cfg.seed,
                gtol=args.gtol, max_iterations=args.max_iters,
            )
        else:
            report = optimize(
                model, traj0, c0, cfg.weights,
                gtol=args.gtol, max_iterations=args.max_iters,
            )
    except (LineSearchError, RolloutBlowupError) as exc:
        print(f"optimizer failed: {exc}", file=sys.stderr)
        return EXIT_OPTIMIZER
    elapsed = time.perf_counter() - t0
    manifest.data["timings"]["optimize"] = elapsed

    traj = report.trajectory
    controls_path = out / "controls.csv"
    traj.write_csv(controls_path)
    manifest.add_artifact("controls", controls_path, figure="fig3")

    model_path = out / "reduced_model.json"
    model.save(model_path)
    manifest.add_artifact("reduced_model", model_path)

    C = rollout_state(model, traj, c0)
    states_path = out / "reduced_states.csv"
    _write_reduced_states(states_path, traj, C)
    manifest.add_artifact("reduced_states", states_path)

    rep = dict(report.summary())
    rep["objective_history"] = report.objective_history
    rep["grad_check_max_rel_error"] = grad_check
    rep["elapsed_seconds"] = elapsed
    rep["total_variation"] = {
        "u1": total_variation(traj.u1),
        "u2": total_variation(traj.u2),
    }
    report_path = out / "report.json"
    with open(report_path, "w") as fh:
        json.dump(rep, fh, indent=2)
    manifest.add_artifact("report", report_path)
    manifest.data["residuals"]["optimizer"] = report.summary()

    print(
        f"optimize: J {report.objective_history[0]:.4f} -> {report.objective:.4f} "
        f"in {report.n_iterations} iterations ({elapsed:.1f}s), "
        f"stationarity {report.stationarity:.3e}"
    )
    return EXIT_OK


def _log_slope(times: np.ndarray, series: np.ndarray, t_min: float) -> float:
    msk = (times >= t_min) & (series > 0.0)
    if int(msk.sum()) < 2:
        return float("nan")
    A = np.vstack([times[msk], np.ones(int(msk.sum()))]).T
    sol, *_ = np.linalg.lstsq(A, np.log(series[msk]), rcond=None)
    return float(sol[0])


def _slowest_surviving(basis: SpectralBasis, c0: np.ndarray) -> float:
    """Most slowly decaying analytic rate actually present in c0."""
    scale = float(np.linalg.norm(c0))
    for m in range(1, basis.M):
        if abs(c0[m]) > 1e-8 * scale:
            return float(basis.eigenvalues[m])
    return float(basis.eigenvalues[-1])


def cmd_validate(cfg: ExperimentConfig, out: Path, manifest: RunManifest, args) -> int:
    prob = reference_problem(cfg)
    try:
        basis = _get_basis(out, cfg, prob, manifest)
    except EigensolverError as exc:
        print(f"eigensolver failed: {exc}", file=sys.stderr)
        return EXIT_EIGEN
    controls_path = out / "controls.csv"
    if not controls_path.exists():
        rc = cmd_optimize(cfg, out, manifest, args)
        if rc != EXIT_OK:
            return rc
    traj = ControlTrajectory.read_csv(controls_path)
    model = _build_model(prob, basis)
    rho0 = build_initial_density(prob.initial, prob.grid, prob.w)
    c0 = project(rho0, basis)
    omega_d = desired_vorticity(prob.shapes)
    _write_field_artifacts(out, prob, manifest)

    op = controlled_operator(prob.grid, prob.potential, cfg.D, prob.shapes, prob.rho_s)
    u_zero = ControlTrajectory.from_constant(cfg.t0, cfg.tf, cfg.dt, 0.0, 0.0)
    init_err = weighted_norm(
        ScalarField(prob.grid, rho0.values - prob.rho_s.values), prob.rho_s, prob.w
    )

    C = rollout_state(model, traj, c0)
    ratios = np.empty(traj.n_steps + 1)

    def track_ratio(k, t, field):
        v = reconstruct(C[k], basis)
        ratios[k] = (
            weighted_norm(
                ScalarField(prob.grid, v.values - field.values), prob.rho_s, prob.w
            )
            / init_err
        )

    t0 = time.perf_counter()
    res_opt = integrate_fpe(
        op, rho0, traj, prob.rho_s, prob.shapes, omega_d, cfg.D,
        snapshot_every=args.snapshot_every,
        snapshot_dir=(out / "snapshots") if args.snapshot_every else None,
        callback=track_ratio,
    )
    res_unc = integrate_fpe(
        op, rho0, u_zero, prob.rho_s, prob.shapes, omega_d, cfg.D
    )
    manifest.data["timings"]["pde"] = time.perf_counter() - t0

    d_opt = out / "diagnostics_optimized.csv"
    res_opt.series.write_csv(d_opt)
    manifest.add_artifact("diagnostics_optimized", d_opt, figure="fig4_optimized")
    d_unc = out / "diagnostics_uncontrolled.csv"
    res_unc.series.write_csv(d_unc)
    manifest.add_artifact("diagnostics_uncontrolled", d_unc, figure="fig4_uncontrolled")

    t0 = time.perf_counter()
    ens_opt = sample_initial(prob.initial, cfg.n_particles, cfg.seed, cfg.L)
    ens_opt, rec_opt = simulate(
        ens_opt, traj, prob.shapes, prob.potential, cfg.D,
        velocity_window=cfg.velocity_window, em_substeps=cfg.em_substeps,
    )
    ens_unc = sample_initial(prob.initial, cfg.n_particles, cfg.seed, cfg.L)
    ens_unc, rec_unc = simulate(
        ens_unc, u_zero, prob.shapes, prob.potential, cfg.D,
        velocity_window=cfg.velocity_window, em_substeps=cfg.em_substeps,
    )
    manifest.data["timings"]["particles"] = time.perf_counter() - t0

    flux_est = estimate_flux(ens_opt, rec_opt, cfg.coarse_nx, cfg.coarse_ny)
    flux_path = out / "flux_estimate.csv"
    flux_est.write_csv(flux_path)
    manifest.add_artifact("flux_estimate", flux_path, figure="fig5")

    am_opt = angular_momentum(rec_opt, 2.0)
    am_unc = angular_momentum(rec_unc, 2.0)
    tv_opt, budget_opt = histogram_tv_distance(
        ens_opt, res_opt.final_density, prob.w, cfg.coarse_nx, cfg.coarse_ny
    )
    tv_unc, budget_unc = histogram_tv_distance(
        ens_unc, res_unc.final_density, prob.w, cfg.coarse_nx, cfg.coarse_ny
    )

    horizon = cfg.tf - cfg.t0
    slope = _log_slope(
        res_unc.series.times, res_unc.series.e_rho, cfg.t0 + 0.3 * horizon
    )
    lam_surv = _slowest_surviving(basis, c0)
    t_win = cfg.t0 + 0.1 * horizon
    k_win = max(1, int(np.ceil((t_win - cfg.t0 - 1e-12) / traj.dt)))

    gates = {
        "mass_optimized": {
            "value": float(np.max(np.abs(res_opt.series.mass - 1.0))),
            "threshold": 1e-10,
            "pass": bool(np.max(np.abs(res_opt.series.mass - 1.0)) <= 1e-10),
        },
        "mass_uncontrolled": {
            "value": float(np.max(np.abs(res_unc.series.mass - 1.0))),
            "threshold": 1e-10,
            "pass": bool(np.max(np.abs(res_unc.series.mass - 1.0)) <= 1e-10),
        },
        "e_rho_final_improves": {
            "value": [float(res_opt.series.e_rho[-1]), float(res_unc.series.e_rho[-1])],
            "pass": bool(res_opt.series.e_rho[-1] < res_unc.series.e_rho[-1]),
        },
        "uncontrolled_decay_rate": {
            "value": slope,
            "target": lam_surv,
            "rel_dev": abs(slope - lam_surv) / abs(lam_surv),
            "pass": bool(abs(slope - lam_surv) <= 0.05 * abs(lam_surv)),
        },
        "reduced_full_consistency": {
            "value": float(np.max(ratios[k_win:])),
            "threshold": 0.05,
            "window_t_min": t_win,
            "initial_truncation_ratio": float(ratios[0]),
            "pass": bool(np.max(ratios[k_win:]) <= 0.05),
        },
        "circulation_optimized": {
            "z": am_opt.z_score,
            "mean": am_opt.mean,
            "se": am_opt.std_error,
            "pass": bool(am_opt.z_score <= -5.0),
        },
        "circulation_uncontrolled": {
            "z": am_unc.z_score,
            "pass": bool(abs(am_unc.z_score) <= 3.0),
        },
        "tv_optimized": {
            "value": tv_opt,
            "budget": budget_opt,
            "pass": bool(tv_opt <= 3.0 * budget_opt),
        },
        "tv_uncontrolled": {
            "value": tv_unc,
            "budget": budget_unc,
            "pass": bool(tv_unc <= 3.0 * budget_unc),
        },
    }
    extras = {
        "e_omega_final_optimized": float(res_opt.series.e_omega[-1]),
        "e_omega_initial_u01": None,  # filled below
        "boundary_flux_ratio_max": res_opt.boundary_flux_ratio_max,
        "n_factorizations": res_opt.n_factorizations,
    }
    om01 = compute_vorticity(
        compute_flux(rho0, 0.0, 1.0, prob.shapes, prob.rho_s, cfg.D)
    )
    e_om01 = weighted_norm(
        ScalarField(prob.grid, om01.values - omega_d.values), prob.rho_s, prob.w
    )
    extras["e_omega_initial_u01"] = float(e_om01)
    extras["e_omega_settling_ratio"] = float(res_opt.series.e_omega[-1] / e_om01)

    manifest.data["gates"] = gates
    summary_path = out / "validation_summary.json"
    with open(summary_path, "w") as fh:
        json.dump({"gates": gates, "extras": extras}, fh, indent=2, sort_keys=True)
    manifest.add_artifact("validation_summary", summary_path)

    failing = [name for name, g in gates.items() if not g["pass"]]
    for name, g in gates.items():
        print(f"  [{'PASS' if g['pass'] else 'FAIL'}] {name}: "
              f"{json.dumps({k: v for k, v in g.items() if k != 'pass'}, default=str)}")
    if failing:
        print(f"validation gates failed: {', '.join(failing)}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fpcirc",
        description="Design and validate circulation-inducing controls for "
        "an overdamped diffusion in a box.",
    )
    p.add_argument("command", choices=["eigen", "optimize", "validate", "all"])
    p.add_argument("--config", help="JSON config path (defaults: reference study)")
    p.add_argument("--out", default="runs/latest", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--check-grad", action="store_true",
                   help="finite-difference check of the adjoint gradient")
    p.add_argument("--multi-start", type=int, default=1, metavar="N",
                   help="optimizer restarts from perturbed initial controls")
    p.add_argument("--gtol", type=float, default=1e-8,
                   help="gradient max-norm tolerance")
    p.add_argument("--max-iters", type=int, default=2000,
                   help="optimizer iteration cap")
    p.add_argument("--snapshot-every", type=int, default=0, metavar="K",
                   help="write density snapshots every K steps during validate")
    p.add_argument("--dump-config", action="store_true",
                   help="print the resolved config and exit")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
    except (OSError, ValueError, TypeError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.dump_config:
        print(cfg.to_json())
        return EXIT_OK

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    manifest = RunManifest(out, cfg)
    manifest.add_artifact("config", out / "config.json")

    steps = {
        "eigen": [cmd_eigen],
        "optimize": [cmd_optimize],
        "validate": [cmd_validate],
        "all": [cmd_eigen, cmd_optimize, cmd_validate],
    }[args.command]
    rc = EXIT_OK
    for step in steps:
        rc = step(cfg, out, manifest, args)
        if rc != EXIT_OK:
            break
    manifest.write()
    return rc


if __name__ == "__main__":
    sys.exit(main())
