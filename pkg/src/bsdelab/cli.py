"""Command-line experiment runner.

Every task reads a JSON config, writes ``<task>-<timestamp>-<seed>.csv``
(plus task-specific companions sharing that stem) and a manifest with the
config echo, package versions and wall time.  Exit status: 0 pass,
2 verification failed, 1 could not run.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import math
import os
import platform
import sys
import time
from importlib import metadata

import numpy as np

from . import bmo_constants as bc
from .catalog import catalog_listing, make_driver, make_model
from .config import TASKS, ConfigError, ExperimentConfig, load_config
from .forward import TimeGrid, simulate_forward, simulate_variational, write_paths_binary
from .errors import ConstantInvalidError
from .io import csv_text
from .regression import BasisSpec

__all__ = ["main", "run", "list_catalog"]

EXIT_PASS, EXIT_ERROR, EXIT_FAILED = 0, 1, 2


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "pydantic"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "unknown"
    return out


class _Ctx:
    """Resolved objects shared by the task runners."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.model = make_model(cfg.model_id, **cfg.model_params)
        self.driver = make_driver(cfg.driver_id, self.model, **cfg.driver_params)
        d = self.model.dim_state
        self.x0 = np.zeros(d) if cfg.x0 is None else np.asarray(cfg.x0, dtype=float)
        if self.x0.shape != (d,):
            raise ConfigError(f"config error at x0: expected {d} entries, got {self.x0.size}")
        self.basis = BasisSpec(cfg.basis.family, cfg.basis.degree, cfg.basis.ridge)
        if cfg.grid is not None:
            self.grid = TimeGrid.uniform(cfg.grid.t0, cfg.grid.T, cfg.grid.K)

    def batch(self, x0=None):
        return simulate_forward(self.model, self.grid, self.cfg.mc.n_paths, self.x0 if x0 is None else x0, self.cfg.mc.seed)

    def scalar_oracle(self):
        """Closed-form ``Y_0`` and ``dY_0/dx`` when the catalog pair admits one, else ``None``."""
        from .quad_bsde import cole_hopf_gradient_oracle, cole_hopf_oracle, gaussian_expectation

        if self.cfg.model_id != "brownian-1d":
            return None
        x, t0, T = float(self.x0[0]), self.grid.t0, self.grid.T
        sech2 = lambda v: 1.0 / np.cosh(v) ** 2  # noqa: E731
        if self.cfg.driver_id == "pure-quadratic-gamma":
            gamma = float(self.cfg.driver_params.get("gamma", 1.0))
            if gamma != 0.0:
                return (
                    cole_hopf_oracle(np.tanh, x, t0, T, gamma),
                    cole_hopf_gradient_oracle(np.tanh, sech2, x, t0, T, gamma),
                )
        if self.cfg.driver_id == "zero" or (
            self.cfg.driver_id == "pure-quadratic-gamma" and float(self.cfg.driver_params.get("gamma", 1.0)) == 0.0
        ):
            return (
                float(gaussian_expectation(np.tanh, x, T - t0)),
                float(gaussian_expectation(sech2, x, T - t0)),
            )
        return None


def _task_simulate(ctx: _Ctx, stem: str, out_dir: str):
    batch = ctx.batch()
    n, K1, d = batch.X.shape
    cols = {
        "path": np.repeat(np.arange(n), K1),
        "step": np.tile(np.arange(K1), n),
        "time": np.tile(ctx.grid.nodes, n),
    }
    for j in range(d):
        cols[f"x_{j}"] = batch.X[:, :, j].reshape(-1)
    write_paths_binary(os.path.join(out_dir, stem + "-paths.bin"), batch)
    summary = {"n_paths": n, "steps": K1 - 1, "terminal_mean": batch.X[:, -1, :].mean(axis=0).tolist()}
    return True, {"": cols}, summary


def _solution_columns(sol, grid, limit):
    n = min(limit, sol.Y.shape[0])
    K = sol.Z.shape[1]
    m = sol.Z.shape[2]
    cols = {
        "path": np.repeat(np.arange(n), K + 1),
        "step": np.tile(np.arange(K + 1), n),
        "time": np.tile(grid.nodes, n),
        "Y": sol.Y[:n].reshape(-1),
    }
    Zp = np.concatenate([sol.Z[:n], np.full((n, 1, m), np.nan)], axis=1)
    for j in range(m):
        cols[f"Z_{j}"] = Zp[:, :, j].reshape(-1)
    return cols


def _task_solve(ctx: _Ctx, stem: str, out_dir: str):
    from .quad_bsde import solve_quadratic_bsde

    batch = ctx.batch()
    sol = solve_quadratic_bsde(ctx.driver, batch, ctx.grid, ctx.basis)
    y0, se = float(sol.y0[0]), float(sol.meta["y0_se"][0])
    oracle = ctx.scalar_oracle()
    tol = ctx.cfg.tolerances.solve
    if oracle is None:
        ref, err, ok = float("nan"), float("nan"), True
    else:
        ref = float(oracle[0])
        err = abs(y0 - ref)
        ok = err <= tol
    main = {
        "t0": [ctx.grid.t0],
        "x0": [" ".join(format(v, ".17g") for v in ctx.x0)],
        "Y_0": [y0],
        "Y_0_se": [se],
        "oracle": [ref],
        "abs_error": [err],
        "budget": [tol],
        "pass": [ok],
        "z_clipped": [sol.meta["z_clipped"]],
    }
    files = {"": main, "-paths": _solution_columns(sol, ctx.grid, ctx.cfg.export_paths)}
    return ok, files, {"Y_0": y0, "oracle": ref, "pass": ok}


def _task_gradient(ctx: _Ctx, stem: str, out_dir: str):
    from .gradient_bsde import (
        assemble_linear_coeffs,
        finite_difference_gradient,
        solve_gradient_girsanov,
        solve_gradient_regression,
    )
    from .quad_bsde import solve_quadratic_bsde

    d = ctx.model.dim_state
    h = np.ones(d) / math.sqrt(d) if ctx.cfg.gradient.h is None else np.asarray(ctx.cfg.gradient.h, float)
    if h.shape != (d,):
        raise ConfigError(f"config error at gradient.h: expected {d} entries")
    batch = ctx.batch()
    sol = solve_quadratic_bsde(ctx.driver, batch, ctx.grid, ctx.basis)
    var = simulate_variational(ctx.model, ctx.grid, batch, h)
    lin = assemble_linear_coeffs(ctx.driver, batch, sol, var, ctx.grid)
    reg = solve_gradient_regression(lin, batch, ctx.grid, ctx.basis)
    gir = solve_gradient_girsanov(lin, batch, ctx.grid, ctx.basis)
    fd = finite_difference_gradient(
        ctx.driver, ctx.model, ctx.grid, ctx.x0, h, ctx.cfg.gradient.eps, ctx.cfg.mc.seed, ctx.basis,
        n_paths=ctx.cfg.mc.n_paths,
    )
    values = {"regression": reg.g0, "girsanov": gir.g0, "finite-difference": fd}
    oracle = ctx.scalar_oracle()
    if oracle is not None:
        values["oracle"] = float(oracle[1]) * float(h[0])
    tol = ctx.cfg.tolerances.gradient
    names = list(values)
    rows = {k: [] for k in ("method_a", "method_b", "value_a", "value_b", "budget", "pass")}
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            rows["method_a"].append(a)
            rows["method_b"].append(b)
            rows["value_a"].append(values[a])
            rows["value_b"].append(values[b])
            rows["budget"].append(tol)
            rows["pass"].append(abs(values[a] - values[b]) <= tol)
    w = gir.weights
    ess = w.sum(axis=0) ** 2 / np.sum(w**2, axis=0)
    nodes = {
        "node": np.arange(ctx.grid.K + 1),
        "time": ctx.grid.nodes,
        "G_mean": reg.G.mean(axis=0),
        "G_sup": np.abs(reg.G).max(axis=0),
        "weight_ess": ess,
    }
    ok = all(rows["pass"])
    return ok, {"": rows, "-nodes": nodes}, {k: float(v) for k, v in values.items()} | {"pass": ok}


def _task_bmo(ctx: _Ctx, stem: str, out_dir: str):
    from .quad_bsde import estimate_bmo_norm, solve_quadratic_bsde

    batch = ctx.batch()
    sol = solve_quadratic_bsde(ctx.driver, batch, ctx.grid, ctx.basis)
    est = estimate_bmo_norm(sol, batch, ctx.grid, ctx.basis)
    cols = {
        "node": np.arange(ctx.grid.K + 1),
        "time": ctx.grid.nodes,
        "tail_energy": est.per_node,
        "sqrt": np.sqrt(est.per_node),
    }
    ok = bool(np.all(est.per_node >= 0.0))
    return ok, {"": cols}, {"bmo_norm": est.value, "pass": ok}


def _task_constants(cfg: ExperimentConfig):
    c = cfg.constants
    params = bc.BmoParams.from_norm(c.N, c.T, c.alpha)
    q_star = params.q_star
    q = c.q if c.q is not None else bc.interior_exponent(q_star)
    rows = [("q_star", float(q_star)), ("p_star", float(params.p_star))]
    if not math.isinf(q_star):
        rows.append(("log_q_star_minus_1", q_star.log_excess))
    rows.append(("q", float(q)))
    rows.append(("phi(q)", bc.phi_reverse_holder(q)))
    try:
        rows.append(("K(q,N)", bc.reverse_holder_constant(q, params)))
    except ConstantInvalidError as exc:
        rows.append(("K(q,N)", float("nan")))
        print(f"note: {exc}", file=sys.stderr)
    rows.append(("eta_bound(p=1)", bc.exp_moment_bound(1.0, params)))
    if c.p is not None and c.p_upper is not None:
        spec = bc.IntegrabilitySpec(c.p_upper, c.data_norm)
        rows.append(("apriori_y_bound", bc.apriori_y_bound(c.p, spec, params)))
    inputs = {"N": c.N, "T": c.T, "alpha": c.alpha, "p": c.p, "p_upper": c.p_upper, "data_norm": c.data_norm}
    cols = {"name": [r[0] for r in rows], "value": [r[1] for r in rows]}
    for k, v in inputs.items():
        cols[k] = ["" if v is None else v for _ in rows]
    for name, value in rows:
        print(f"{name}={format(value, '.17g')}")
    return True, {"": cols}, {r[0]: r[1] for r in rows}


def _solver_config(ctx: _Ctx):
    from .kolmogorov import SolverConfig

    v = ctx.cfg.verify
    return SolverConfig(
        model=ctx.model,
        driver=ctx.driver,
        T=ctx.grid.T,
        K=int(round(ctx.cfg.grid.K * ctx.grid.T / (ctx.grid.T - ctx.grid.t0))),
        n_outer=v.n_outer,
        n_inner=v.n_inner,
        n_quad=v.n_quad,
        n_nested=v.n_nested,
        seed=ctx.cfg.mc.seed,
        basis=BasisSpec(ctx.cfg.basis.family, v.basis_degree, ctx.cfg.basis.ridge),
    )


def _verify_point(ctx):
    v = ctx.cfg.verify
    x = ctx.x0 if v.x is None else np.asarray(v.x, dtype=float)
    return float(v.t), x


def _task_verify_mild(ctx: _Ctx, stem: str, out_dir: str):
    from .kolmogorov import check_mild_formula

    t, x = _verify_point(ctx)
    rep = check_mild_formula(t, x, _solver_config(ctx))
    cols = {
        "point": [f"t={t:g} x=" + " ".join(format(v, ".17g") for v in x)],
        "lhs": [rep.lhs],
        "rhs": [rep.rhs],
        "residual": [rep.residual],
        "budget": [rep.budget],
        "verdict": ["pass" if rep.passed else ("incomplete" if not rep.complete else "fail")],
    }
    print(
        f"mild formula at t={t:g}: lhs={rep.lhs:.6g} rhs={rep.rhs:.6g} residual={rep.residual:.3g} "
        f"budget={rep.budget:.3g} -> {cols['verdict'][0]}"
    )
    return rep.passed, {"": cols}, {"residual": rep.residual, "budget": rep.budget, "pass": rep.passed}


def _task_verify_identification(ctx: _Ctx, stem: str, out_dir: str):
    from .kolmogorov import check_identification

    t, x = _verify_point(ctx)
    rep = check_identification(t, x, _solver_config(ctx))
    keys = ["s", "y_mean_abs", "y_max_abs", "y_budget", "z_mean_abs", "z_max_abs", "z_budget"]
    cols = {k: [n[k] for n in rep.nodes] for k in keys}
    cols["verdict"] = [
        "pass" if (n["y_mean_abs"] <= n["y_budget"] and n["z_mean_abs"] <= n["z_budget"]) else "fail"
        for n in rep.nodes
    ]
    for n, verdict in zip(rep.nodes, cols["verdict"]):
        print(
            f"identification at s={n['s']:g}: |Y-u| mean={n['y_mean_abs']:.3g} (budget {n['y_budget']:.3g}), "
            f"|Z-sigma*grad u| mean={n['z_mean_abs']:.3g} (budget {n['z_budget']:.3g}) -> {verdict}"
        )
    return rep.passed, {"": cols}, {"pass": rep.passed}


_RUNNERS = {
    "simulate": _task_simulate,
    "solve": _task_solve,
    "gradient": _task_gradient,
    "bmo": _task_bmo,
    "verify-mild": _task_verify_mild,
    "verify-identification": _task_verify_identification,
}


def _timestamp() -> str:
    return _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")


def run(cfg: ExperimentConfig, task: str, out_dir: str | None = None) -> tuple:
    """Execute ``task``; returns ``(exit_code, written_paths)``."""
    cfg.check_task(task)
    out_dir = out_dir or cfg.outputs
    os.makedirs(out_dir, exist_ok=True)
    seed = cfg.mc.seed if cfg.mc is not None else 0
    stem = f"{task}-{_timestamp()}-{seed}"
    start = time.perf_counter()
    if task == "constants":
        ok, files, summary = _task_constants(cfg)
    else:
        ctx = _Ctx(cfg)
        ok, files, summary = _RUNNERS[task](ctx, stem, out_dir)
    wall = time.perf_counter() - start
    written = []
    for suffix, cols in files.items():
        path = os.path.join(out_dir, f"{stem}{suffix}.csv")
        with open(path, "w", newline="") as fh:
            fh.write(csv_text(cols))
        written.append(path)
    manifest = {
        "task": task,
        "config": cfg.model_dump(mode="json"),
        "versions": _versions(),
        "wall_time_s": wall,
        "verdict": "pass" if ok else "fail",
        "summary": _jsonable(summary),
        "files": [os.path.basename(p) for p in written],
    }
    mpath = os.path.join(out_dir, f"{stem}.manifest.json")
    with open(mpath, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    written.append(mpath)
    return (EXIT_PASS if ok else EXIT_FAILED), written


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer, np.bool_)):
        return obj.item()
    return obj


def list_catalog() -> dict:
    listing = catalog_listing()
    for m in listing["models"]:
        print(f"model  {m['id']:<22} d={m['dim_state']} m={m['dim_noise']} L={m['L']:.6g}")
    for d in listing["drivers"]:
        print(
            f"driver {d['id']:<22} C={d['C']:g} alpha={d['alpha']:g} "
            f"phi_sup={d['phi_sup']:g} n={d['n']}"
        )
    return listing


def _origin(exc: BaseException) -> str:
    """Name of the innermost package module on the traceback."""
    pkg_dir = os.path.dirname(os.path.abspath(__file__))
    name = "bsdelab"
    tb = exc.__traceback__
    while tb is not None:
        fname = os.path.abspath(tb.tb_frame.f_code.co_filename)
        if os.path.dirname(fname) == pkg_dir:
            name = "bsdelab." + os.path.splitext(os.path.basename(fname))[0]
        tb = tb.tb_next
    return name


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bsdelab", description="Quadratic BSDE numerical laboratory")
    sub = p.add_subparsers(dest="task", required=True)
    for task in TASKS:
        sp = sub.add_parser(task)
        sp.add_argument("--config", required=task != "constants", help="JSON experiment config")
        sp.add_argument("--seed", type=int, help="override mc.seed")
        sp.add_argument("--threads", type=int, help="cap numerical worker threads")
        sp.add_argument("--out", help="output directory (overrides config outputs)")
    sp = sub.add_parser("list-catalog")
    sp.add_argument("--threads", type=int)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    limiter = None
    if getattr(args, "threads", None) is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_ERROR
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=args.threads)
    try:
        if args.task == "list-catalog":
            list_catalog()
            return EXIT_PASS
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            if cfg.mc is not None:
                cfg.mc.seed = args.seed
        code, written = run(cfg, args.task, args.out)
        for path in written:
            print(f"wrote {path}")
        if code == EXIT_FAILED:
            print(f"{args.task}: verification failed", file=sys.stderr)
        return code
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # every failure to run maps to exit 1
        print(f"error [{_origin(exc)}.{type(exc).__name__}]: {exc}", file=sys.stderr)
        return EXIT_ERROR
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
