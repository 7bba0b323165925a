"""Batch experiment runner.

Usage::

    mfsmp <command> --config FILE [--seed S] [--out DIR]

The config file is a flat JSON object of knobs; see the README for the list.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .adjoint import lq_oracle, solve_adjoint
from .errors import ConfigError, MfsmpError
from .forward import SimConfig, cost, meanfield_convergence, simulate, simulate_any
from .paths import (RelaxedControlPath, SingularControlPath, StrictControlPath, TimeGrid, chattering,
                    embed_strict, path_to_csv, relaxed_from_csv, singular_from_csv, strict_from_csv,
                    weak_distance)
from .problem import BUILTINS, get_builtin, problem_from_dict
from .smp import Tolerances, check_near_optimal, check_relaxed, check_strict, improve
from .tables import Table
from .variation import check_duality, second_variation

EXIT_OK = 0
EXIT_VERDICT = 1
EXIT_USAGE = 2
EXIT_UNKNOWN_BUILTIN = 3
EXIT_BAD_JSON = 4
EXIT_SOLVER = 5

COMMANDS = ("simulate", "cost", "check-strict", "check-relaxed", "check-near", "improve",
            "convergence", "chattering-study", "duality-study")

# commands that can run without an explicit particle count
_N_OPTIONAL = {"chattering-study", "convergence"}

EPILOG = f"""exit codes:
  {EXIT_OK}  success (check commands: every verdict passed)
  {EXIT_VERDICT}  a check command ran but at least one verdict failed
  {EXIT_USAGE}  usage or config error (missing or invalid knob)
  {EXIT_UNKNOWN_BUILTIN}  unknown builtin problem name
  {EXIT_BAD_JSON}  config or problem file is not valid JSON
  {EXIT_SOLVER}  solver failure (non-finite simulation, singular regression, ...)

environment:
  MFSMP_THREADS  number of worker threads for particle stepping (default 1)
"""


class UnknownBuiltin(ConfigError):
    pass


# -- config resolution ----------------------------------------------------------


def _resolve_problem(value, base: Path):
    if isinstance(value, dict):
        name = value.get("builtin")
        if name not in BUILTINS:
            raise UnknownBuiltin(f"unknown builtin problem {name!r}")
        return problem_from_dict(value)
    if not isinstance(value, str):
        raise ConfigError("'problem' must be a builtin name, a problem object or a JSON file path")
    if value.endswith(".json"):
        path = Path(value) if Path(value).is_absolute() else base / value
        doc = json.loads(path.read_text(encoding="utf-8"))
        if doc.get("builtin") not in BUILTINS:
            raise UnknownBuiltin(f"unknown builtin problem {doc.get('builtin')!r}")
        return problem_from_dict(doc)
    if value not in BUILTINS:
        raise UnknownBuiltin(f"unknown builtin problem {value!r}; choose from {sorted(BUILTINS)}")
    return get_builtin(value)


def _read_text(ref: str, base: Path) -> str:
    path = Path(ref) if Path(ref).is_absolute() else base / ref
    return path.read_text(encoding="utf-8")


def _strict_control(spec, grid: TimeGrid, value, base: Path) -> StrictControlPath:
    cs = spec.control_set
    if value is None or value == "zero":
        k = int(np.argmin(np.sum(cs ** 2, axis=1)))
        return StrictControlPath.from_indices(grid, cs, np.full(grid.steps, k))
    if value == "oracle":
        return lq_oracle(spec).control_path(grid, cs)
    if isinstance(value, dict):
        if "constant" in value:
            return StrictControlPath.constant(grid, cs, value["constant"])
        if "alternating" in value:
            n = int(value["alternating"])
            q = RelaxedControlPath.uniform_over(TimeGrid(grid.horizon, 1), cs, [cs[0], cs[-1]])
            return chattering(q, n, 0).resample(grid)
        if "csv" in value:
            return strict_from_csv(_read_text(value["csv"], base), cs).resample(grid)
    raise ConfigError(f"unrecognized control specification {value!r}")


def _singular_path(spec, grid: TimeGrid, value, base: Path) -> SingularControlPath:
    m = spec.singular_dim
    if value is None or value == "zero":
        return SingularControlPath.zero(grid, m)
    if isinstance(value, dict):
        if "jump" in value:
            return SingularControlPath.jump_at_zero(grid, np.broadcast_to(np.asarray(value["jump"], float), (m,)))
        if "csv" in value:
            return singular_from_csv(_read_text(value["csv"], base)).resample(grid)
    raise ConfigError(f"unrecognized singular control specification {value!r}")


def _relaxed_control(spec, grid: TimeGrid, value, base: Path) -> RelaxedControlPath:
    cs = spec.control_set
    if value is None or value == "half-half":
        return RelaxedControlPath.uniform_over(grid, cs, [cs[0], cs[-1]])
    if isinstance(value, dict):
        if "uniform" in value:
            return RelaxedControlPath.uniform_over(grid, cs, np.asarray(value["uniform"], float).reshape(-1, cs.shape[1]))
        if "embed" in value:
            return embed_strict(_strict_control(spec, grid, value["embed"], base))
        if "csv" in value:
            return relaxed_from_csv(_read_text(value["csv"], base)).resample(grid)
    raise ConfigError(f"unrecognized relaxed control specification {value!r}")


def _tolerances(cfg: dict) -> Tolerances:
    raw = cfg.get("tolerances") or {}
    if not isinstance(raw, dict):
        raise ConfigError("'tolerances' must be an object")
    try:
        return Tolerances(**{k: float(v) for k, v in raw.items()})
    except TypeError as exc:
        raise ConfigError(f"bad tolerance knob: {exc}") from None


def _int_list(cfg, key, default=None):
    val = cfg.get(key, default)
    if val is None:
        raise ConfigError(f"missing required knob {key!r}")
    if not isinstance(val, list) or not val:
        raise ConfigError(f"{key!r} must be a nonempty list")
    return [int(v) for v in val]


def _sim_config(cfg: dict, command: str) -> SimConfig:
    if "N" not in cfg:
        if command in _N_OPTIONAL:
            return SimConfig(2, int(cfg["seed"]), bool(cfg.get("antithetic", False)), cfg.get("workers"))
        raise ConfigError(f"missing required knob 'N' for command {command!r}")
    N = cfg["N"]
    if isinstance(N, bool) or not isinstance(N, int) or N < 2:
        raise ConfigError("'N' must be an integer >= 2")
    return SimConfig(N, int(cfg["seed"]), bool(cfg.get("antithetic", False)), cfg.get("workers"))


# -- commands -------------------------------------------------------------------


def _cmd_simulate(ctx):
    spec, grid, cfg, conf, base = ctx["spec"], ctx["grid"], ctx["sim"], ctx["config"], ctx["base"]
    eta = _singular_path(spec, grid, conf.get("eta"), base)
    control = (_relaxed_control(spec, grid, conf["relaxed"], base) if "relaxed" in conf
               else _strict_control(spec, grid, conf.get("control"), base))
    ens = simulate_any(spec, control, eta, cfg)
    rep = cost(spec, ens, control, eta)
    tables = {"summary": ens.summary_table()}
    if conf.get("write_binary"):
        ctx["binary"] = ens
    result = {"mean_T": ens.empirical_mean[-1].tolist(), "cost": _cost_dict(rep)}
    return result, tables, EXIT_OK


def _cost_dict(rep):
    return {"total": rep.total, "running": rep.running, "terminal": rep.terminal,
            "singular": rep.singular, "std_error": rep.std_error}


def _cmd_cost(ctx):
    result, _, code = _cmd_simulate(ctx)
    return {"cost": result["cost"]}, {}, code


def _check_tables(rep):
    ham = Table(["t", "gap", "tolerance"])
    for j in range(rep.steps):
        ham.add(j * rep.dt, float(rep.hamiltonian_gap[j]), float(rep.hamiltonian_tol[j]))
    sign = Table(["slot", "q01", "mean", "tolerance"])
    for s in range(rep.sign_q01.shape[0]):
        sign.add(s, float(rep.sign_q01[s].min()), float(rep.sign_mean[s].min()), float(rep.sign_tol[s].max()))
    return {"hamiltonian": ham, "sign": sign}


def _verdict_code(rep):
    print(rep.summary())
    return EXIT_OK if rep.passed else EXIT_VERDICT


def _cmd_check_strict(ctx):
    spec, grid, cfg, conf, base = ctx["spec"], ctx["grid"], ctx["sim"], ctx["config"], ctx["base"]
    u = _strict_control(spec, grid, conf.get("control"), base)
    eta = _singular_path(spec, grid, conf.get("eta"), base)
    rep = check_strict(spec, u, eta, cfg, _tolerances(conf), int(conf.get("basis_degree", 2)))
    return rep.to_dict(), _check_tables(rep), _verdict_code(rep)


def _cmd_check_relaxed(ctx):
    spec, grid, cfg, conf, base = ctx["spec"], ctx["grid"], ctx["sim"], ctx["config"], ctx["base"]
    q = _relaxed_control(spec, grid, conf.get("relaxed"), base)
    eta = _singular_path(spec, grid, conf.get("eta"), base)
    rep = check_relaxed(spec, q, eta, cfg, _tolerances(conf), int(conf.get("basis_degree", 2)))
    return rep.to_dict(), _check_tables(rep), _verdict_code(rep)


def _cmd_check_near(ctx):
    spec, grid, cfg, conf, base = ctx["spec"], ctx["grid"], ctx["sim"], ctx["config"], ctx["base"]
    u = _strict_control(spec, grid, conf.get("control"), base)
    eta = _singular_path(spec, grid, conf.get("eta"), base)
    if "epsilon_n" not in conf:
        raise ConfigError("missing required knob 'epsilon_n'")
    rep = check_near_optimal(spec, u, eta, cfg, float(conf["epsilon_n"]), float(conf.get("alpha", 1.0)),
                             _tolerances(conf), int(conf.get("basis_degree", 2)))
    return rep.to_dict(), _check_tables(rep), _verdict_code(rep)


def _cmd_improve(ctx):
    spec, grid, cfg, conf, base = ctx["spec"], ctx["grid"], ctx["sim"], ctx["config"], ctx["base"]
    u = _strict_control(spec, grid, conf.get("control"), base)
    eta = _singular_path(spec, grid, conf.get("eta"), base)
    res = improve(spec, u, eta, cfg, iterations=int(conf.get("iterations", 30)),
                  step_damping=float(conf.get("step_damping", 0.5)),
                  relaxation=float(conf.get("relaxation", 0.5)),
                  singular_step=float(conf.get("singular_step", 0.5)),
                  tolerances=_tolerances(conf), basis_degree=int(conf.get("basis_degree", 2)))
    hist = Table(["iteration", "cost", "std_error", "eta_total"])
    for i, (c, se, e) in enumerate(zip(res.costs, res.cost_std_errors, res.etas)):
        hist.add(i, c, se, float(e.total.sum()))
    ctx["paths"] = {"control.csv": path_to_csv(res.control), "eta.csv": path_to_csv(res.eta)}
    print(res.final_report.summary())
    return {"costs": res.costs, "final": res.final_report.to_dict()}, {"history": hist}, EXIT_OK


def _cmd_convergence(ctx):
    spec, grid, conf, base = ctx["spec"], ctx["grid"], ctx["config"], ctx["base"]
    u = _strict_control(spec, grid, conf.get("control"), base)
    eta = _singular_path(spec, grid, conf.get("eta"), base)
    tab = meanfield_convergence(spec, u, eta, _int_list(conf, "particle_counts", [100, 400, 1600]),
                                int(conf.get("reps", 20)), int(conf["seed"]), conf.get("workers"))
    return dict(tab.meta), {"convergence": tab}, EXIT_OK


def _cmd_chattering(ctx):
    spec, grid, cfg, conf, base = ctx["spec"], ctx["grid"], ctx["sim"], ctx["config"], ctx["base"]
    ns = _int_list(conf, "ns", list(range(1, 11)))
    coarse = TimeGrid(grid.horizon, int(conf.get("relaxed_steps", 1)))
    q = _relaxed_control(spec, coarse, conf.get("relaxed"), base)
    eta = _singular_path(spec, grid, conf.get("eta"), base)
    qg = q.resample(grid)
    rel = cost(spec, simulate_any(spec, qg, eta, cfg), qg, eta).total
    tab = Table(["n", "J_chattered", "J_relaxed", "abs_gap", "bound_1_over_n2", "weak_distance"])
    for n in ns:
        un = chattering(q, n, int(conf["seed"]))
        ug = un.resample(grid)
        j = cost(spec, simulate(spec, ug, eta, cfg), ug, eta).total
        tab.add(n, j, rel, abs(j - rel), 1.0 / n ** 2, weak_distance(embed_strict(un), q, 1))
    return {"J_relaxed": rel}, {"chattering": tab}, EXIT_OK


def _cmd_duality(ctx):
    spec, cfg, conf, base = ctx["spec"], ctx["sim"], ctx["config"], ctx["base"]
    Ls = _int_list(conf, "Ls", [64, 256, 1024])
    tab = Table(["L", "lhs", "rhs", "gap", "std_error", "tolerance"])
    for L in Ls:
        grid = TimeGrid(spec.horizon, L)
        u = _strict_control(spec, grid, conf.get("control"), base)
        eta = _singular_path(spec, grid, conf.get("eta"), base)
        xi = _singular_path(spec, grid, conf.get("xi", {"jump": 1.0}), base)
        ens = simulate(spec, u, eta, cfg)
        y2 = second_variation(spec, ens, u, eta, xi, cfg)
        adj = solve_adjoint(spec, ens, u, int(conf.get("basis_degree", 2)), conf.get("cost_sign", "standard"))
        d = check_duality(spec, ens, y2, adj, eta, xi)
        tab.add(L, d.lhs, d.rhs, d.gap, d.std_error, 3 * d.std_error + 5.0 / L * spec.horizon)
    return {}, {"duality": tab}, EXIT_OK


HANDLERS = {
    "simulate": _cmd_simulate,
    "cost": _cmd_cost,
    "check-strict": _cmd_check_strict,
    "check-relaxed": _cmd_check_relaxed,
    "check-near": _cmd_check_near,
    "improve": _cmd_improve,
    "convergence": _cmd_convergence,
    "chattering-study": _cmd_chattering,
    "duality-study": _cmd_duality,
}


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfsmp", description="Mean-field SMP experiment runner.",
                                epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON file with experiment knobs")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="output directory (default: config output_dir or ./mfsmp-out)")
    p.add_argument("--version", action="version", version=f"mfsmp {__version__}")
    return p


def _write_outputs(out: Path, ctx: dict, command: str, result: dict, tables: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    tdir = out / "tables"
    tdir.mkdir(exist_ok=True)
    for name, tab in tables.items():
        tab.to_csv(tdir / f"{name}.csv")
    for name, text in ctx.get("paths", {}).items():
        (out / name).write_text(text, encoding="utf-8", newline="\n")
    if "binary" in ctx:
        ctx["binary"].write_binary(out / "trajectories.bin")
    report = {"command": command, "config": ctx["config"], "result": _plain(result)}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    manifest = {
        "version": __version__,
        "command": command,
        "spec_hash": ctx["spec"].fingerprint(),
        "problem": ctx["spec"].name,
        "seed": ctx["config"]["seed"],
        "grid": {"horizon": ctx["grid"].horizon, "steps": ctx["grid"].steps},
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def run(command: str, config: dict, out: Path | str, base: Path | None = None) -> int:
    """Execute one experiment; returns the process exit status."""
    base = base or Path.cwd()
    conf = dict(config)
    conf.setdefault("seed", 0)
    conf.setdefault("L", 256)
    try:
        if "problem" not in conf:
            raise ConfigError("missing required knob 'problem'")
        spec = _resolve_problem(conf["problem"], base)
        L = conf["L"]
        if isinstance(L, bool) or not isinstance(L, int) or L < 1:
            raise ConfigError("'L' must be a positive integer")
        grid = TimeGrid(spec.horizon, L)
        ctx = {"spec": spec, "grid": grid, "config": conf, "base": base,
               "sim": _sim_config(conf, command)}
        result, tables, code = HANDLERS[command](ctx)
    except UnknownBuiltin as exc:
        print(f"mfsmp: {exc}", file=sys.stderr)
        return EXIT_UNKNOWN_BUILTIN
    except json.JSONDecodeError as exc:
        print(f"mfsmp: malformed JSON: {exc}", file=sys.stderr)
        return EXIT_BAD_JSON
    except (ConfigError, ValueError, KeyError, TypeError, FileNotFoundError) as exc:
        print(f"mfsmp: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MfsmpError as exc:
        print(f"mfsmp: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    _write_outputs(Path(out), ctx, command, result, tables)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    path = Path(args.config)
    try:
        config = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        print(f"mfsmp: config file {path} not found", file=sys.stderr)
        return EXIT_USAGE
    except json.JSONDecodeError as exc:
        print(f"mfsmp: malformed JSON in {path}: {exc}", file=sys.stderr)
        return EXIT_BAD_JSON
    if not isinstance(config, dict):
        print("mfsmp: config must be a JSON object", file=sys.stderr)
        return EXIT_USAGE
    if args.seed is not None:
        config["seed"] = args.seed
    out = args.out or config.get("output_dir") or "mfsmp-out"
    return run(args.command, config, out, base=path.resolve().parent)


if __name__ == "__main__":
    sys.exit(main())
