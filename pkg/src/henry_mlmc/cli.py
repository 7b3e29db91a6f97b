"""Command-line front end: solve | pilot | plan | run | compare | qmc | report."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, RunConfig
from .executor import (SampleStore, all_level_statistics, default_workers, plan_jobs,
                       read_level_stats, run, write_level_costs, write_level_stats)
from .grids import GridError, build_grid, build_time_grid
from .inputs import RandomInput, draw_uniform, material_fields, permeability
from .mlmc import (MlmcError, MlmcPlan, RateFit, compare_costs, estimate, fit_rates_from_stats,
                   make_plan, regime, time_average_E0)
from .qoi import QOI_NAMES, QoiRecorder
from .solver.assembly import build_discretization
from .solver.flow import SolverFailure, State, time_march, vertex_velocity

log = logging.getLogger("henry_mlmc")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _config(args) -> RunConfig:
    over = {"seed": args.seed, "out": args.out, "sampling": args.sampling,
            "workers": args.workers}
    cfg = RunConfig.load(args.config, args.profile, **over)
    if cfg.workers == 1 and args.workers is None:
        cfg.workers = default_workers()
    return cfg


def _outdir(cfg, sub=None) -> Path:
    d = Path(cfg.out) if sub is None else Path(cfg.out) / sub
    d.mkdir(parents=True, exist_ok=True)
    io.write_json(Path(cfg.out) / "config.json", cfg.to_dict())
    return d


def _load_inputs(path):
    """Planning inputs from JSON: alpha, zeta1, beta, zeta2, V, s, E0 (optional gamma, V0)."""
    d = io.read_json(path)
    need = {"alpha", "zeta1", "beta", "zeta2", "V", "s", "E0"}
    missing = need - set(d)
    if missing:
        raise UsageError(f"inputs file lacks {sorted(missing)}")
    rates = RateFit(d["alpha"], d["zeta1"], d["beta"], d["zeta2"], d.get("gamma", 1.0), 0.0)
    return rates, list(d["V"]), list(d["s"]), float(d["E0"]), d.get("V0")


def _pilot_inputs(cfg):
    pdir = Path(cfg.out) / "pilot"
    stats_path = pdir / "level_stats.csv"
    if not stats_path.exists():
        raise UsageError(f"no pilot statistics at {stats_path}; run 'henry-mlmc pilot' first "
                         "or pass --inputs")
    stats = read_level_stats(stats_path, pdir / "level_costs.csv")
    t = cfg.calibration_time
    rates = fit_rates_from_stats(stats, t)
    V = [st.at(t)[1] for st in stats]
    s = [st.s for st in stats]
    E0 = time_average_E0(stats[0])
    return rates, V, s, E0, V[0]


def _inputs(cfg, args):
    return _load_inputs(args.inputs) if args.inputs else _pilot_inputs(cfg)


# ---------------------------------------------------------------- commands

def cmd_solve(cfg, args):
    level = args.level if args.level is not None else 0
    try:
        grid = build_grid(level, cfg.L_max)
    except GridError as exc:
        raise UsageError(str(exc)) from exc
    if args.xi is not None:
        if len(args.xi) != 3:
            raise UsageError("--xi needs three comma-separated values")
        xi = RandomInput.fixed(*args.xi)
    else:
        xi = draw_uniform(cfg.seed, level, args.index)
    params = cfg.physical()
    solver = cfg.solver_config()
    if args.steps is not None:
        solver = type(solver)(**{**solver.to_dict(), "max_steps": args.steps})
    out = _outdir(cfg, f"solve_L{level}")
    r = build_time_grid(level, cfg.L_max).r
    stride = args.vtk_stride or max(1, r // 8)
    mat = material_fields(grid, xi, params, solver.face_permeability)
    disc = build_discretization(grid, mat, params, solver.upwind_weight)
    K_v = permeability(mat.vertex_porosity, params)
    step = [0]

    def snapshot(state: State):
        step[0] += 1
        if step[0] % stride == 0 or step[0] == (args.steps or r):
            io.write_vtk(out / f"snapshot_{step[0]:05d}.vtk", grid,
                         {"c": state.c, "p": state.p, "phi": mat.vertex_porosity, "K": K_v,
                          "q": vertex_velocity(state, disc)})

    rec = QoiRecorder(level, params)
    try:
        tr = time_march(level, xi, solver, params, observers=[rec, snapshot], max_level=cfg.L_max)
    except SolverFailure as exc:
        io.write_json(out / "failure.json", {"error": str(exc), "diagnostics": exc.diagnostics})
        log.error("solve failed: %s", exc)
        return EXIT_FAILED
    rows = [["solve", level, args.index, name, t, float(v)]
            for k, t in enumerate(rec.times) for name, v in zip(QOI_NAMES, rec.rows[k])]
    io.write_csv(out / "qoi.csv", ["run_id", "level", "sample_idx", "qoi", "t", "value"], rows)
    m = tr.metrics
    io.write_json(out / "metrics.json", {
        "xi": xi.to_dict(), **m.summary(),
        "steps": [{"step": s.step, "t": s.t, "newton": s.newton_iters, "linear": s.linear_iters,
                   "mass_balance": s.mass_balance, "residuals": s.residuals} for s in m.steps]})
    print(f"level {level}: {len(m.steps)} steps, {m.total_newton_iters} Newton iterations, "
          f"{m.wall_time:.2f} s; output in {out}")
    return EXIT_OK


def cmd_pilot(cfg, args):
    m = list(cfg.pilot)
    if not m or sum(m) == 0:
        raise UsageError("pilot needs at least one level with samples")
    if any(x == 0 for x in m):
        raise UsageError("pilot levels must be contiguous from 0 with at least one sample each")
    out = _outdir(cfg, "pilot")
    store = SampleStore(cfg.out)
    jobs = plan_jobs(m, "pilot", cfg.seed, store, cfg.sampling)
    run(jobs, store, cfg.workers, cfg.solver_config(), cfg.physical(), Path(cfg.out) / "cache")
    recs = store.load_run("pilot")
    recs = [r for r in recs if r.job.index < m[r.job.level]]
    stats = all_level_statistics(recs, cfg.qoi)
    write_level_stats(out / "level_stats.csv", stats)
    write_level_costs(out / "level_costs.csv", stats)
    for st in stats:
        if not st.variance_available:
            log.warning("level %d: variance unavailable (m = %d)", st.level, st.m)
    if len(stats) >= 3 and all(st.variance_available for st in stats[1:]):
        from .plots import plot_decay
        rates = fit_rates_from_stats(stats, cfg.calibration_time)
        io.write_json(out / "rates.json", rates.to_dict())
        t = cfg.calibration_time
        k = lambda st: int(np.flatnonzero(st.times == t)[0])  # noqa: E731
        plot_decay(out / "decay.svg", [st.level for st in stats],
                   [st.mean_fine[k(st)] for st in stats], [st.mean_diff[k(st)] for st in stats],
                   [st.var_fine[k(st)] for st in stats], [st.V[k(st)] for st in stats], rates,
                   f"{cfg.qoi} at t = {t:g} s")
        print(f"alpha={rates.alpha:.3f} zeta1={rates.zeta1:.3f} beta={rates.beta:.3f} "
              f"zeta2={rates.zeta2:.3f} gamma={rates.gamma:.3f}")
    failed = sum(st.n_failed for st in stats)
    print(f"pilot: m = {[st.m for st in stats]}, failed = {failed}; output in {out}")
    return EXIT_FAILED if failed else EXIT_OK


def cmd_plan(cfg, args):
    rates, V, s, E0, V0 = _inputs(cfg, args)
    eps = args.eps[0] if args.eps else cfg.epsilons[0]
    plan = make_plan(eps, rates, E0, V, s, V0=V0, L_max=cfg.L_max, qoi=cfg.qoi,
                     calibration_time=cfg.calibration_time)
    out = _outdir(cfg)
    io.write_json(out / "plan.json", plan.to_dict())
    if plan.bias_limited:
        print(f"warning: epsilon = {eps} is bias-limited on L_max = {cfg.L_max}")
    print(f"epsilon={eps}: L={plan.L}, m={plan.m}, S={plan.S:.3g}, S_MC={plan.S_MC:.3g}, "
          f"{plan.regime}")
    return EXIT_OK


def cmd_run(cfg, args):
    path = Path(cfg.out) / "plan.json"
    if not path.exists():
        raise UsageError(f"no plan at {path}; run 'henry-mlmc plan' first")
    plan = MlmcPlan.from_dict(io.read_json(path))
    out = _outdir(cfg, "run")
    store = SampleStore(cfg.out)
    m = plan.m[:cfg.L_max + 1]
    jobs = plan_jobs(m, "mlmc", cfg.seed + 1, store, cfg.sampling)
    run(jobs, store, cfg.workers, cfg.solver_config(), cfg.physical(), Path(cfg.out) / "cache")
    recs = [r for r in store.load_run("mlmc") if r.job.index < m[r.job.level]]
    stats = all_level_statistics(recs, plan.qoi or cfg.qoi)
    write_level_stats(out / "level_stats.csv", stats)
    write_level_costs(out / "level_costs.csv", stats)
    res = estimate(stats, plan.regime)
    io.write_json(out / "result.json", {"plan": plan.to_dict(), **res.to_dict()})
    print(f"MLMC estimate on {len(stats)} levels, cost {res.cost:.3g} s, "
          f"failed samples {res.n_failed}; output in {out}")
    return EXIT_FAILED if res.n_failed else EXIT_OK


def cmd_compare(cfg, args):
    rates, V, s, E0, V0 = _inputs(cfg, args)
    eps = args.eps or cfg.epsilons
    rows = compare_costs(eps, rates, V, s, E0, V0=V0, L_max=cfg.L_max)
    out = _outdir(cfg)
    io.write_csv(out / "compare.csv",
                 ["epsilon", "L", "m", "S", "S_MC", "ratio", "regime", "mlmc_exponent",
                  "mc_exponent"],
                 [[r["epsilon"], r["L"], " ".join(map(str, r["m"])), r["S"], r["S_MC"],
                   r["ratio"], r["regime"], r["mlmc_exponent"], r["mc_exponent"]] for r in rows])
    from .plots import plot_costs
    plot_costs(out / "compare.svg", rows)
    for r in rows:
        print(f"eps={r['epsilon']:<6g} L={r['L']} m={r['m']} S={r['S']:.3g} "
              f"S_MC={r['S_MC']:.3g} ratio={r['ratio']:.3g}")
    reg = regime(rates.alpha, rates.beta, rates.gamma, rates.d_hat)
    print(f"{reg['label']}: MLMC exponent {reg['mlmc_exponent']:.2f}, "
          f"MC exponent {reg['mc_exponent']:.2f}")
    return EXIT_OK


def cmd_qmc(cfg, args):
    from .plots import plot_quantiles
    from .qmc import QUANTILES, qmc_study
    level = args.level if args.level is not None else 1
    try:
        grid = build_grid(level, cfg.L_max)
    except GridError as exc:
        raise UsageError(str(exc)) from exc
    if args.n < 2:
        raise UsageError("variance unavailable: qmc needs --n >= 2")
    out = _outdir(cfg, f"qmc_L{level}")
    study = qmc_study(args.n, level, SampleStore(cfg.out), source=cfg.sampling, seed=cfg.seed,
                      workers=cfg.workers, config=cfg.solver_config(), params=cfg.physical(),
                      cache_dir=Path(cfg.out) / "cache")
    io.write_vtk(out / "mean_var.vtk", grid, {"c_mean": study.mean_field,
                                              "c_var": study.var_field})
    rows = []
    for name, fan in study.quantiles.items():
        for k, t in enumerate(study.times):
            rows.append([name, float(t), *[float(fan[j, k]) for j in range(len(QUANTILES))]])
        plot_quantiles(out / f"quantiles_{name}.svg", study.times, fan, name)
    io.write_csv(out / "quantiles.csv", ["qoi", "t", *[f"q{q:g}" for q in QUANTILES]], rows)
    io.write_csv(out / "points.csv", ["point", "t", "mean", "var"],
                 [[f"P_{i + 1}", float(t), float(study.point_mean[k, i]),
                   float(study.point_var[k, i])]
                  for i in range(15) for k, t in enumerate(study.times)])
    print(f"{study.n} samples on level {level} ({cfg.sampling}); failed {study.n_failed}; "
          f"output in {out}")
    return EXIT_FAILED if study.n_failed else EXIT_OK


def cmd_report(cfg, args):
    out = Path(cfg.out)
    lines = ["# henry-mlmc report", ""]
    if (out / "pilot" / "rates.json").exists():
        r = io.read_json(out / "pilot" / "rates.json")
        lines += ["## Pilot rates", "",
                  f"alpha = {r['alpha']:.3f}, zeta1 = {r['zeta1']:.3f}, beta = {r['beta']:.3f}, "
                  f"zeta2 = {r['zeta2']:.3f}, gamma = {r['gamma']:.3f}", ""]
    if (out / "plan.json").exists():
        p = io.read_json(out / "plan.json")
        lines += ["## Plan", "", f"epsilon = {p['epsilon']}, L = {p['L']}, m = {p['m']}, "
                  f"S = {p['S']:.3g}, S_MC = {p['S_MC']:.3g}, regime: {p['regime']}", ""]
    if (out / "run" / "result.json").exists():
        res = io.read_json(out / "run" / "result.json")
        Y = np.array(res["Y"])
        lines += ["## Estimate", "", f"time points: {len(Y)}, cost: {res['cost']:.3g} s, "
                  f"final value: {Y[-1]:.6g}, failed samples: {res['n_failed']}", ""]
    if (out / "compare.csv").exists():
        header, rows = io.read_csv(out / "compare.csv")
        lines += ["## MC vs MLMC", "", "| " + " | ".join(header) + " |",
                  "|" + "---|" * len(header)] + ["| " + " | ".join(r) + " |" for r in rows] + [""]
    if len(lines) == 2:
        lines.append("No results found.")
    text = "\n".join(lines) + "\n"
    io.atomic_write(out / "report.md", text)
    print(text)
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "pilot": cmd_pilot, "plan": cmd_plan, "run": cmd_run,
            "compare": cmd_compare, "qmc": cmd_qmc, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--profile", choices=["desk", "full"])
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int,
                        help="worker processes (default: $HENRY_MLMC_WORKERS or 1)")
    common.add_argument("--sampling", choices=["pseudo", "halton"])
    common.add_argument("--level", type=int)
    common.add_argument("--eps", type=_floats, help="comma-separated tolerances")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="henry-mlmc", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("solve", parents=[common], help="one deterministic trajectory")
    s.add_argument("--xi", type=_floats, help="xi1,xi2,xi3 (default: drawn from --seed)")
    s.add_argument("--index", type=int, default=0, help="sample index for a seeded draw")
    s.add_argument("--steps", type=int, help="stop after this many time steps")
    s.add_argument("--vtk-stride", type=int, help="write a snapshot every k steps")
    sub.add_parser("pilot", parents=[common], help="coupled pilot samples and rate fits")
    for name, text in (("plan", "sample allocation for one tolerance"),
                       ("compare", "MLMC vs MC cost for several tolerances")):
        q = sub.add_parser(name, parents=[common], help=text)
        q.add_argument("--inputs", help="JSON with alpha, zeta1, beta, zeta2, V, s, E0")
    sub.add_parser("run", parents=[common], help="execute plan.json")
    q = sub.add_parser("qmc", parents=[common], help="single-level sampling study")
    q.add_argument("--n", type=int, default=64)
    sub.add_parser("report", parents=[common], help="summarise the output directory")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError, GridError) as exc:
        print(f"henry-mlmc {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MlmcError as exc:
        print(f"henry-mlmc {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
