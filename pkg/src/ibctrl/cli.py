"""``ibctrl`` command line.

Exit codes: 0 success, 1 usage or input error, 2 solver did not converge,
3 runtime failure. Every command that gets as far as knowing its output
directory writes ``manifest.json`` there, including on failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .discrete import DiscreteSystem, SolverOptions, expected_cost as discrete_expected_cost
from .discrete import fonc_residual, solve as solve_discrete, value_iteration
from .experiments import bound as bnd
from .experiments import montecarlo as mc
from .experiments import report
from .experiments.scenarios import LavaScenario, ScenarioError, SlipScenario, builtin_path, scenario_from_dict
from .experiments.sweep import beta_sweep, lava_sweep, slip_sweep
from .lg import LGOptions, expected_cost as lg_expected_cost, fonc_residuals, problem_from_dict, solve_lg
from .lg import trv_singular_values
from .nlg import NLGOptions, solve_nlg
from .probdist import LinearGaussianChannel
from .slip import kernel

log = logging.getLogger("ibctrl")

EXIT_OK, EXIT_USAGE, EXIT_NONCONVERGED, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class NotConverged(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- input

def read_json(ref) -> tuple[dict, Path]:
    """Load a scenario file; bare names ``lava``/``slip``/``lg_*`` resolve to the built-ins."""
    path = Path(ref)
    if not path.exists():
        builtin = builtin_path(str(ref))
        if builtin.exists():
            path = builtin
        else:
            raise UsageError(f"scenario file not found: {ref}")
    try:
        return json.loads(path.read_text()), path
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def _read(run, ref):
    d, path = read_json(ref)
    run.config["scenario_path"] = str(path)
    run.config["scenario_data"] = d
    return d, path


def _kind(d: dict, path) -> str:
    kind = d.get("kind")
    if kind not in ("lava", "slip", "lg", "discrete"):
        raise UsageError(f"{path}: field 'kind' must be one of lava, slip, lg, discrete (got {kind!r})")
    return kind


def _scenario(d: dict, path):
    try:
        return scenario_from_dict(d)
    except (ScenarioError, TypeError, KeyError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from exc


def _overrides(scn, args):
    changes = {}
    if getattr(args, "beta", None) is not None:
        changes["beta"] = args.beta
    if isinstance(scn, LavaScenario):
        if getattr(args, "trv_dim", None) is not None:
            changes["n_trvs"] = args.trv_dim
        if getattr(args, "iters", None) is not None:
            changes["max_iterations"] = args.iters
    if isinstance(scn, SlipScenario):
        if getattr(args, "iters", None) is not None:
            changes["outer_iterations"] = args.iters
        if getattr(args, "tol", None) is not None:
            changes["outer_tol"] = args.tol
    mc_changes = {}
    if getattr(args, "trials", None) is not None:
        mc_changes["n_trials"] = args.trials
    if getattr(args, "seed", None) is not None:
        mc_changes["seed"] = args.seed
    if mc_changes:
        changes["mc"] = dataclasses.replace(scn.mc, **mc_changes)
    try:
        return dataclasses.replace(scn, **changes) if changes else scn
    except (ScenarioError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _lava_options(scn: LavaScenario, args) -> SolverOptions:
    kw = {"max_iterations": scn.max_iterations, "seed": scn.solver_seed}
    if getattr(args, "tol", None) is not None:
        kw["tol"] = args.tol
    return SolverOptions(**kw)


def _slip_options(scn: SlipScenario, args) -> NLGOptions:
    opts = scn.nlg_options()
    if getattr(args, "trv_dim", None) is not None:
        opts = dataclasses.replace(opts, trv_dim=args.trv_dim, lg=dataclasses.replace(opts.lg, trv_dim=args.trv_dim))
    return opts


def _lg_options(args) -> LGOptions:
    kw = {}
    if args.iters is not None:
        kw["max_iterations"] = args.iters
    if args.tol is not None:
        kw["tol"] = args.tol
    if args.trv_dim is not None:
        kw["trv_dim"] = args.trv_dim
    if args.seed is not None:
        kw["seed"] = args.seed
    return LGOptions(**kw)


def _lg_problem(d, path, args):
    try:
        sys_, cost = problem_from_dict(d)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from exc
    if args.beta is not None:
        sys_ = sys_.with_beta(args.beta)
    return sys_, cost


def _lg_sensor(d, path):
    s = d.get("sensor")
    if s is None:
        raise UsageError(f"{path}: field 'sensor' (C, noise_cov) is required for this command")
    try:
        return LinearGaussianChannel(s["C"], s["noise_cov"], s.get("offset"))
    except (KeyError, ValueError) as exc:
        raise UsageError(f"{path}: field 'sensor': {exc}") from exc


# ---------------------------------------------------------------- output helpers

class Run:
    """Collects outputs and writes the manifest."""

    def __init__(self, out: Path, argv, config: dict):
        self.out, self.argv, self.config = out, list(argv), config
        self.files: list[str] = []
        self.results: dict = {}
        self.started = time.time()
        out.mkdir(parents=True, exist_ok=True)

    def json(self, name, obj):
        report.write_json(self.out / name, obj)
        self.files.append(name)

    def text(self, name, text):
        report.write_text(self.out / name, text)
        self.files.append(name)

    def table(self, name, records, fmt: str):
        if fmt == "json":
            rows = [{"trial": r.trial, "policy": r.policy, "total": r.total, "failed": r.failed,
                     "states": r.states, "inputs": r.inputs, "measurements": r.measurements,
                     "diagnostics": r.diagnostics} for r in records]
            self.json(f"{name}.json", rows)
        else:
            self.text(f"{name}.csv", report.records_csv(records))

    def manifest(self, code: int, error: str | None = None):
        canonical = json.dumps(report._jsonable(self.config), sort_keys=True, separators=(",", ":"))
        data = {
            "command": self.argv,
            "config": self.config,
            "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
            "exit_code": code,
            "error": error,
            "files": self.files,
            "results": self.results,
            "elapsed_seconds": round(time.time() - self.started, 3),
            "versions": versions(),
        }
        report.write_json(self.out / "manifest.json", data)


def versions() -> dict:
    import scipy
    return {"ibctrl": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "stance_backend": kernel.BACKEND}


def _threads(args) -> int:
    n = getattr(args, "threads", None)
    return max(1, int(n)) if n is not None else 1


# ---------------------------------------------------------------- commands

def cmd_solve(args, run: Run):
    d, path = _read(run, args.scenario)
    kind = _kind(d, path)
    if args.model == "discrete":
        if kind == "lava":
            scn = _overrides(_scenario(d, path), args)
            sys_, opts = scn.system(), _lava_options(scn, args)
        elif kind == "discrete":
            try:
                sys_ = DiscreteSystem.from_dict(d)
            except (KeyError, ValueError) as exc:
                raise UsageError(f"{path}: {exc}") from exc
            if args.beta is not None:
                sys_ = sys_.with_beta(args.beta)
            if args.trv_dim is not None:
                sys_ = dataclasses.replace(sys_, n_trvs=args.trv_dim)
            opts = SolverOptions(**{k: v for k, v in (("max_iterations", args.iters), ("tol", args.tol),
                                                      ("seed", args.seed)) if v is not None})
        else:
            raise UsageError(f"{path}: 'solve discrete' needs a lava or discrete scenario, got {kind}")
        sol = solve_discrete(sys_, opts)
        run.results.update(status=sol.status, iterations=sol.iterations,
                           objective=sol.objective_trace[-1] if sol.objective_trace else None,
                           expected_cost=discrete_expected_cost(sys_, sol), fonc_residual=fonc_residual(sys_, sol))
        run.json("solution.json", {"problem": sys_.to_dict(), "solution": sol.to_dict(), "summary": run.results})
        ok = sol.converged
    elif args.model == "lg":
        if kind != "lg":
            raise UsageError(f"{path}: 'solve lg' needs an lg scenario, got {kind}")
        sys_, cost = _lg_problem(d, path, args)
        sol = solve_lg(sys_, cost, _lg_options(args))
        res = fonc_residuals(sys_, cost, sol)
        run.results.update(status=sol.status, iterations=sol.iterations, objective=sol.objective_trace[-1],
                           expected_cost=lg_expected_cost(sys_, cost, sol), max_fonc_residual=float(res.max()),
                           singular_values=trv_singular_values(sol))
        run.json("solution.json", {"solution": sol.to_dict(), "summary": run.results})
        ok = sol.converged
    else:
        if kind != "slip":
            raise UsageError(f"{path}: 'solve nlg' needs a slip scenario, got {kind}")
        scn = _overrides(_scenario(d, path), args)
        sol = solve_nlg(scn.model(), scn.cost(), np.array(scn.init_mean), scn.init_cov, scn.beta,
                        opts=_slip_options(scn, args), failure=scn.failures)
        run.results.update(nlg_summary(sol))
        run.json("solution.json", {"nominal": {"states": sol.trajectory.states, "inputs": sol.trajectory.inputs},
                                   "lg_solution": sol.lg_solution.to_dict(), "summary": run.results})
        ok = sol.converged
    if not ok:
        raise NotConverged(f"solver stopped with status {run.results['status']}")


def nlg_summary(sol) -> dict:
    return {"status": sol.status, "iterations": sol.iterations, "cost_trace": sol.cost_trace,
            "delta_trace": sol.delta_trace, "final_state": sol.trajectory.states[-1],
            "inputs": sol.trajectory.inputs.ravel(), "lg_status": sol.lg_solution.status,
            "singular_values": trv_singular_values(sol.lg_solution),
            "expected_cost": lg_expected_cost(sol.lg_system, sol.lg_cost, sol.lg_solution)}


def _box(run: Run, name, records, title, ylabel, **match):
    groups = report.totals_by_policy(records, **match)
    run.text(name, report.box_plot_svg(groups, title, ylabel))


def _lava_mc(scn, run, args, pols=None):
    pols = pols or mc.LavaPolicies.build(scn, solve_discrete(scn.system(), scn.solver_options()))
    records, summary = mc.run_lava_mc(scn, pols, threads=_threads(args))
    ideal, ideal_summary = mc.run_lava_mc(scn, pols, policies=("mdp_mle",), sensor=np.eye(scn.n_cells),
                                          threads=_threads(args))
    V, _ = value_iteration(scn.system())
    summary["noiseless_sensor"] = {"mdp_mle": ideal_summary["mdp_mle"],
                                   "value_iteration_expected_reward": float(-(scn.system().init @ V[0]))}
    run.table("trials", records, args.format)
    run.table("trials_noiseless_sensor", ideal, args.format)
    _box(run, "rewards.svg", records, "Lava: total reward over trials", "total reward")
    return pols, summary


def _slip_mc(scn, run, args, pols=None):
    pols = pols or mc.SlipPolicies.build(scn)
    records, summary = mc.run_slip_mc(scn, pols, conditions=mc.CONDITIONS, threads=_threads(args))
    run.table("trials", records, args.format)
    _box(run, "costs.svg", records, "SLIP: total cost, mismatched sensor noise", "total cost",
         condition="mismatch")
    return pols, summary


def cmd_simulate(args, run: Run):
    d, path = _read(run, args.scenario)
    scn = _overrides(_scenario(d, path), args)
    if isinstance(scn, LavaScenario):
        _, summary = _lava_mc(scn, run, args)
    else:
        pols = mc.SlipPolicies.build(scn)
        if not (pols.nlg.converged and pols.ilqg.converged):
            run.results.update(nlg=pols.nlg.status, ilqg=pols.ilqg.status)
            raise NotConverged(f"nlg {pols.nlg.status}, ilqg {pols.ilqg.status}")
        _, summary = _slip_mc(scn, run, args, pols)
    run.results["summary"] = summary
    run.json("summary.json", summary)


def cmd_sweep(args, run: Run):
    d, path = _read(run, args.scenario)
    kind = _kind(d, path)
    if args.count < 2:
        raise UsageError("--count must be at least 2")
    if kind == "lg":
        sys_, cost = _lg_problem(d, path, args)
        grid = np.linspace(args.interval[0], args.interval[1], args.count) if args.interval else None
        if grid is None:
            raise UsageError("--interval is required for lg scenarios")
        threshold = -np.inf if args.threshold is None else args.threshold
        res = beta_sweep(lambda b: solve_lg(sys_.with_beta(b), cost, _lg_options(args)),
                         lambda s: lg_expected_cost(sys_, cost, s), grid, threshold)
        dump = [s.to_dict() for s in res.solutions]
    else:
        scn = _overrides(_scenario(d, path), args)
        lo, hi = args.interval if args.interval else scn.sweep.interval
        if not 0 < lo <= hi:
            raise UsageError("--interval must be positive and ordered")
        grid = np.linspace(lo, hi, args.count)
        if isinstance(scn, LavaScenario):
            res = lava_sweep(scn, grid, args.threshold)
            dump = [s[1].to_dict() for s in res.solutions]
        else:
            res = slip_sweep(scn, grid, args.threshold)
            dump = [{"summary": nlg_summary(s), "lg_solution": s.lg_solution.to_dict()} for s in res.solutions]
    for i, (b, sd) in enumerate(zip(res.betas, dump)):
        run.json(f"solutions/beta_{i:02d}.json", {"beta": float(b), "solution": sd})
    run.results.update(res.to_dict())
    run.json("selection.json", res.to_dict())


def cmd_bound(args, run: Run):
    d, path = _read(run, args.scenario)
    kind = _kind(d, path)
    if kind == "lava":
        scn = _overrides(_scenario(d, path), args)
        sys_ = scn.system()
        sol = solve_discrete(sys_, _lava_options(scn, args))
        out = {e: bnd.lava_bound(sys_, sol, scn.sensor(), e).to_dict() for e in bnd.ESTIMATORS}
    elif kind == "lg":
        sys_, cost = _lg_problem(d, path, args)
        sol = solve_lg(sys_, cost, _lg_options(args))
        out = {"kalman": bnd.lg_bound(sys_, cost, sol, _lg_sensor(d, path)).to_dict()}
    else:
        raise UsageError(f"{path}: 'bound' supports lava and lg scenarios, got {kind}")
    run.results.update(solver_status=sol.status, bound=out)
    run.json("bound.json", out)
    if not sol.converged:
        raise NotConverged(f"solver stopped with status {sol.status}")


def cmd_repro(args, run: Run):
    d, path = _read(run, args.study)
    scn = _overrides(_scenario(d, path), args)
    if isinstance(scn, LavaScenario):
        sys_ = scn.system()
        sol = solve_discrete(sys_, scn.solver_options())
        pols, summary = _lava_mc(scn, run, args, mc.LavaPolicies.build(scn, sol))
        bounds = {e: bnd.lava_bound(sys_, sol, scn.sensor(), e).to_dict() for e in bnd.ESTIMATORS}
        sweep = lava_sweep(scn)
        out = {"solver": {"status": sol.status, "iterations": sol.iterations,
                          "expected_cost": discrete_expected_cost(sys_, sol), "fonc_residual": fonc_residual(sys_, sol),
                          "policies": sol.policies, "encoders": sol.encoders},
               "monte_carlo": summary, "bound": bounds, "sweep": sweep.to_dict()}
        conv = sol.converged
    else:
        pols = mc.SlipPolicies.build(scn)
        conv = pols.nlg.converged and pols.ilqg.converged
        out = {"solver": nlg_summary(pols.nlg),
               "ilqg": {"status": pols.ilqg.status, "iterations": pols.ilqg.iterations,
                        "cost": pols.ilqg.cost_trace[-1], "gains": pols.ilqg.gains}}
        if conv:
            _, out["monte_carlo"] = _slip_mc(scn, run, args, pols)
    run.results["summary"] = out
    run.json("summary.json", out)
    if not conv:
        raise NotConverged("solver did not converge")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ibctrl", description="Information-bottleneck task-relevant-variable control toolkit")
    p.add_argument("--version", action="version", version=f"ibctrl {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, sim=False):
        sp.add_argument("--out", required=True, type=Path, help="output directory")
        sp.add_argument("--beta", type=float)
        sp.add_argument("--trv-dim", type=int)
        sp.add_argument("--iters", type=int)
        sp.add_argument("--tol", type=float)
        sp.add_argument("--seed", type=int, help="master seed (trials) or solver seed (lg)")
        if sim:
            sp.add_argument("--trials", type=int)
            sp.add_argument("--threads", type=int, default=1)
            sp.add_argument("--format", choices=("csv", "json"), default="csv")

    s = sub.add_parser("solve", help="solve one scenario")
    s.add_argument("model", choices=("discrete", "lg", "nlg"))
    s.add_argument("scenario")
    common(s)
    s = sub.add_parser("simulate", help="Monte-Carlo evaluation of a lava or SLIP scenario")
    s.add_argument("scenario")
    common(s, sim=True)
    s = sub.add_parser("sweep-beta", help="solve over a beta grid and select")
    s.add_argument("scenario")
    s.add_argument("--interval", nargs=2, type=float, metavar=("LO", "HI"))
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--threshold", type=float)
    common(s)
    s = sub.add_parser("bound", help="robustness bound of the filtered TRV controller")
    s.add_argument("scenario")
    common(s)
    s = sub.add_parser("repro", help="reproduce the lava or SLIP study")
    s.add_argument("study", choices=("lava", "slip"))
    common(s, sim=True)
    return p


COMMANDS = {"solve": cmd_solve, "simulate": cmd_simulate, "sweep-beta": cmd_sweep, "bound": cmd_bound,
            "repro": cmd_repro}


def _setup_logging():
    level = os.environ.get("IBCTRL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    if args.command is None:
        build_parser().print_usage(sys.stderr)
        return EXIT_USAGE
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    run = Run(args.out, ["ibctrl", *argv], config)
    code, error = EXIT_OK, None
    try:
        COMMANDS[args.command](args, run)
    except UsageError as exc:
        code, error = EXIT_USAGE, str(exc)
    except NotConverged as exc:
        code, error = EXIT_NONCONVERGED, str(exc)
    except Exception as exc:  # noqa: BLE001 - reported through the exit code
        log.debug("runtime failure", exc_info=True)
        code, error = EXIT_RUNTIME, f"{type(exc).__name__}: {exc}"
    run.manifest(code, error)
    if error:
        print(f"ibctrl {args.command}: {error}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
