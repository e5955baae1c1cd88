"""Command-line driver: ``isokann {run,oracle,compare,export} CONFIG``.

Exit codes: 0 success, 1 bad input (config, checkpoint, paths),
2 iteration budget exhausted without convergence (artifacts still
written), 3 numerical failure (degeneracy, divergence, solver).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import _backend, config as config_mod
from .config import RunConfig, parse_ranges
from .errors import CheckpointError, ConfigError, ConvergenceError, IsokannError
from .io import atomic_write_bytes, write_csv
from .isokann import NEVER, LoopConfig, run_isokann
from .koopman import affine_fit, estimate_points
from .model import OptimizerState, checkpoint_load, checkpoint_save, default_dims, init_model
from .oracle import build_generator, oracle_chi
from .rng import derive_seed
from .sampling import ConstantControl, ZeroControl, optimal_control_from_chi, variance_header, variance_study
from .sde import SimConfig, catalog_potential

log = logging.getLogger("isokann")

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED, EXIT_NUMERICAL = 0, 1, 2, 3


def _system(cfg: RunConfig):
    return catalog_potential(cfg.system.name, sigma=cfg.system.sigma)


def _sim(cfg: RunConfig) -> SimConfig:
    return SimConfig.from_tau(cfg.sim.tau, cfg.sim.dt, cfg.sim.seed)


def _box(text: str, system):
    if not text:
        return None
    ranges = parse_ranges(text)
    if len(ranges) != system.dim:
        raise ConfigError(f"loop.box needs {system.dim} ranges", "loop.box")
    return tuple((lo, hi) for lo, hi, _ in ranges)


def _grid(ranges, default_n: int) -> np.ndarray:
    axes = [np.linspace(lo, hi, n or default_n) for lo, hi, n in ranges]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def _validation_grid(cfg: RunConfig, system) -> np.ndarray:
    box = _box(cfg.loop.box, system) or system.box
    n = cfg.loop.validation_points
    return _grid([(lo, hi, n) for lo, hi in box], n)


def _loop(cfg: RunConfig, system) -> LoopConfig:
    lc = cfg.loop
    return LoopConfig(
        n_outer=lc.n_outer, n_points=lc.n_points, m_shots=lc.m_shots,
        epochs_per_iter=lc.epochs_per_iter,
        is_enabled_after=NEVER if config_mod.is_never(lc.is_enabled_after) else lc.is_enabled_after,
        resample_mode=lc.resample_mode, conv_tol=lc.conv_tol,
        validation_grid=_validation_grid(cfg, system), shift_mode=lc.shift_mode,
        shift_percentile=lc.shift_percentile, control_u_max=lc.u_max,
        time_dependent_control=lc.time_dependent_control, reinit_each_iter=lc.reinit_each_iter,
        box=_box(lc.box, system), min_outer=lc.min_outer,
    )


def _x_header(dim: int) -> list[str]:
    return ["x"] if dim == 1 else [f"x{j}" for j in range(dim)]


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.ini").write_text(config_mod.dumps(cfg), encoding="utf-8")
    return out


REPORT_HEADER = ["iteration", "method", "n_points", "a_shift", "b_shift", "a_fit", "b_fit",
                 "fit_rms", "kappa_fit", "loss", "max_change", "mean_ess"]


def _report_row(rec):
    a = rec.fit.a
    kappa = -math.log(a) / rec.fit.tau if 0 < a < 1 else float("nan")
    return [rec.iteration, rec.method, rec.n_points, rec.shift.a, rec.shift.b, rec.fit.a, rec.fit.b,
            rec.fit.residual_rms, kappa, rec.loss, rec.max_change, rec.mean_ess]


def cmd_run(cfg: RunConfig) -> int:
    system = _system(cfg)
    sim = _sim(cfg)
    loop = _loop(cfg, system)
    out = _out_dir(cfg)
    init_seed = cfg.sim.seed if cfg.model.init_seed is None else cfg.model.init_seed
    model = init_model(default_dims(system.dim, cfg.model.hidden), init_seed)
    opt = OptimizerState.for_model(model, cfg.model.lr, cfg.model.beta1, cfg.model.beta2, cfg.model.eps)
    ckpt_dir = out / "checkpoints"
    records = []
    log_path = out / "report.jsonl"
    log_path.write_text("", encoding="utf-8")

    def on_iteration(it, model, opt, rec):
        atomic_write_bytes(ckpt_dir / f"iter_{it:04d}.chk", checkpoint_save(model, opt))
        records.append(rec)
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({
                "iteration": rec.iteration, "method": rec.method, "a_shift": rec.shift.a,
                "b_shift": rec.shift.b, "a_fit": rec.fit.a, "b_fit": rec.fit.b,
                "fit_rms": rec.fit.residual_rms, "loss": rec.loss, "max_change": rec.max_change,
                "mean_ess": None if math.isnan(rec.mean_ess) else rec.mean_ess,
                "n_points": rec.n_points, "wall_time": rec.wall_time,
            }) + "\n")

    try:
        model, report = run_isokann(system, model, loop, sim, seed=cfg.sim.seed, opt=opt,
                                    on_iteration=on_iteration)
    finally:
        write_csv(out / "report.csv", REPORT_HEADER, [_report_row(r) for r in records])
    atomic_write_bytes(out / "model.chk", checkpoint_save(model, opt))
    grid = loop.validation_grid
    write_csv(out / "chi_final.csv", _x_header(system.dim) + ["chi"],
              [[*x, c] for x, c in zip(grid, model(grid))])
    fitp = report.final_params
    msg = f"final a={fitp.a:.6g} b={fitp.b:.6g}"
    if 0 < fitp.a < 1:
        msg += f" kappa={-math.log(fitp.a) / fitp.tau:.6g}"
    status = "converged" if report.converged else "not converged"
    print(f"{msg} after {len(report.records)} iterations ({status}); outputs in {out}")
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


def cmd_oracle(cfg: RunConfig) -> int:
    system = _system(cfg)
    bounds = None
    if cfg.oracle.bounds:
        bounds = tuple((lo, hi) for lo, hi, _ in parse_ranges(cfg.oracle.bounds))
    op = build_generator(system, bounds=bounds, n_nodes=cfg.oracle.n_nodes or None)
    out = _out_dir(cfg)
    chi, params = oracle_chi(op, cfg.sim.tau, max_iters=cfg.oracle.max_iters, tol=cfg.oracle.tol,
                             n_substeps=cfg.oracle.n_substeps)
    write_csv(out / "oracle.csv", _x_header(system.dim) + ["chi_ref", "a", "b"],
              [[*x, c, params.a, params.b] for x, c in zip(op.points, chi)])
    msg = f"oracle a={params.a:.8g} b={params.b:.8g}"
    if 0 < params.a < 1:
        msg += f" kappa={-math.log(params.a) / cfg.sim.tau:.8g}"
    print(msg)
    return EXIT_OK


def _load_checkpoint(path, system):
    try:
        model, opt = checkpoint_load(Path(path).read_bytes())
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    if model.dim != system.dim:
        raise CheckpointError(f"checkpoint dim {model.dim} does not match system "
                              f"{system.name} (dim {system.dim})")
    return model, opt


def cmd_compare(cfg: RunConfig, checkpoint) -> int:
    system = _system(cfg)
    model, _ = _load_checkpoint(checkpoint, system)
    ranges = parse_ranges(cfg.compare.grid)
    if len(ranges) != system.dim:
        raise ConfigError(f"compare.grid needs {system.dim} ranges", "compare.grid")
    grid = _grid(ranges, 11)
    sim = _sim(cfg)
    m = cfg.compare.m
    params = None
    if cfg.compare.control == "optimal":
        vgrid = _validation_grid(cfg, system)
        fit_cfg = SimConfig(sim.dt, sim.n_steps, derive_seed(cfg.sim.seed, 0xF17))
        est = estimate_points(system, model, vgrid, cfg.compare.fit_shots, fit_cfg)
        params = affine_fit(model(vgrid), est.means, tau=sim.tau)
        control = optimal_control_from_chi(model, params, system.sigma, cfg.loop.u_max,
                                           time_dependent=cfg.compare.time_dependent)
    elif cfg.compare.control == "zero":
        control = ZeroControl()
    else:
        control = ConstantControl(cfg.compare.constant)
    out = _out_dir(cfg)
    study_cfg = SimConfig(sim.dt, sim.n_steps, derive_seed(cfg.sim.seed, 0xC0))
    rows = variance_study(system, model, params, grid, m, study_cfg, control=control)
    write_csv(out / "compare.csv", variance_header(system.dim), [r.as_tuple() for r in rows])
    ratios = np.array([r.ratio for r in rows])
    ess = np.array([r.ess for r in rows])
    med = float(np.median(ratios)) if np.all(np.isfinite(ratios)) else float("nan")
    summary = f"median ratio={med:.6g} min ESS={np.nanmin(ess):.6g} (m={m}, control={cfg.compare.control})"
    if params is not None:
        summary += f" a={params.a:.6g} b={params.b:.6g}"
    if m == 1:
        print("warning: m=1, per-point variances are 0 by convention and ratios are undefined",
              file=sys.stderr)
    print(summary)
    (out / "compare_summary.txt").write_text(summary + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_export(cfg: RunConfig, checkpoint) -> int:
    system = _system(cfg)
    model, _ = _load_checkpoint(checkpoint, system)
    grid = _validation_grid(cfg, system)
    out = _out_dir(cfg)
    chi = model(grid)
    grad = np.asarray(model.grad_input(grid)).reshape(len(grid), system.dim)
    gh = ["dchi_dx"] if system.dim == 1 else [f"dchi_dx{j}" for j in range(system.dim)]
    write_csv(out / "chi_export.csv", _x_header(system.dim) + ["chi"] + gh,
              [[*x, c, *g] for x, c, g in zip(grid, chi, grad)])
    print(f"exported chi on {len(grid)} points to {out / 'chi_export.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isokann", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    specs = {
        "run": "train chi with the ISOKANN power iteration",
        "oracle": "grid reference chi, eigenvalue and rate",
        "compare": "plain vs importance-sampled variance study for a checkpoint",
        "export": "evaluate a checkpoint (chi and its gradient) on the validation grid",
    }
    for name, help_text in specs.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("config", help="INI run configuration")
        if name in ("compare", "export"):
            sp.add_argument("checkpoint", help="model checkpoint written by 'run'")
        sp.add_argument("--seed", type=int, default=None, help="override sim.seed")
        sp.add_argument("--out", default=None, help="override the output directory")
        sp.add_argument("--threads", type=int, default=None,
                        help="numba worker threads (results do not depend on it)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_mod.load(args.config)
        if args.seed is not None:
            cfg.sim.seed = args.seed
        if os.environ.get("ISOKANN_OUT"):
            cfg.output.dir = os.environ["ISOKANN_OUT"]
        if args.out is not None:
            cfg.output.dir = args.out
        threads = args.threads if args.threads is not None else cfg.output.threads
        if threads:
            _backend.set_threads(threads)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "oracle":
            return cmd_oracle(cfg)
        if args.command == "compare":
            return cmd_compare(cfg, args.checkpoint)
        return cmd_export(cfg, args.checkpoint)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConvergenceError as exc:
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except IsokannError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
