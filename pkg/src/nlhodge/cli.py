"""Command-line front end.

Every job is a JSON config (optional) merged with command-line flags, flags
winning. Field dumps are CSV with 17 significant digits so that ``verify``
can re-ingest them bit-exactly; the machine-readable report is JSON.

Exit codes: 0 success, 2 sonic guard tripped, 3 non-convergence,
4 config/schema error, 5 domain/range/precondition error from a module.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from math import comb

import jsonschema
import numpy as np

from .backlund import (
    conformal_forward_t,
    conformal_inverse_t,
    conformal_x,
    dual_identity_defect,
    dual_transform,
    verify_dual,
)
from .bvp import BoundaryData, SolverConfig, continuation, solve_dirichlet, solve_neumann, verify_bvp
from .construct import (
    StreamInput,
    aharmonic_check,
    born_infeld_family,
    energy,
    energy_gradient_check,
    from_stream,
    verify_system,
)
from .density import (
    Density,
    EtaMap,
    check_admissible,
    classify,
    dual_density,
    make_branch,
    psi_invert,
)
from .errors import (
    ConfigError,
    DomainError,
    InadmissibleSystem,
    NonConvergence,
    PreconditionError,
    RangeError,
    SonicExceeded,
)
from .expr import FormExpression, parse_form
from .forms import DiscreteForm, Grid, basis, qnorm

COMMANDS = (
    "density-classify",
    "density-dual",
    "density-invert",
    "construct",
    "verify",
    "transform",
    "aharmonic-check",
    "energy",
    "bvp-solve",
    "bvp-continue",
)

PRESETS = {"2d": (2, 33), "3d": (3, 17), "4d": (4, 9)}

_num = {"type": "number"}
_pair = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}
_scalar_fn = {"type": ["string", "number"]}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "command": {"enum": list(COMMANDS)},
        "density": {
            "type": "object",
            "additionalProperties": False,
            "required": ["family"],
            "properties": {
                "family": {"enum": ["constant", "p_power", "minimal", "maximal", "born_infeld", "extremal",
                                    "table", "expression"]},
                "c": _num,
                "p": _num,
                "expr": {"type": "string"},
                "domain": _pair,
                "t": {"type": "array", "items": _num},
                "rho": {"type": "array", "items": _num},
            },
        },
        "branch": _pair,
        "interval": _pair,
        "samples": {"type": "integer", "minimum": 16},
        "r": {"type": "array", "items": _num},
        "points": {"type": "array", "items": _num},
        "sign": {"enum": ["+", "-"]},
        "stream": {"type": "string"},
        "closed": {"type": "string"},
        "form": {"type": "string"},
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "preset": {"enum": list(PRESETS)},
                "n": {"type": "integer", "minimum": 2, "maximum": 4},
                "bounds": {"type": "array", "items": _pair},
                "res": {"type": "array", "items": {"type": "integer", "minimum": 3}},
            },
        },
        "kind": {"enum": ["dual", "conformal_t", "conformal_x"]},
        "direction": {"enum": ["forward", "inverse"]},
        "eta": _scalar_fn,
        "zeta": _scalar_fn,
        "eta_interval": _pair,
        "gamma": {"type": "string"},
        "sigma_form": {"type": "string"},
        "u": {"type": "string"},
        "v": {"type": "string"},
        "phi": {"type": "string"},
        "bound_k": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "t_max": {"type": "number", "exclusiveMinimum": 0},
        "data": {"type": "string"},
        "neumann": {"type": "string"},
        "sigma": {"type": "string"},
        "tau": _num,
        "taus": {"type": "array", "items": _num, "minItems": 1},
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "max_iters": {"type": "integer", "minimum": 1},
                "newton_switch": {"type": "number", "exclusiveMinimum": 0},
                "margin": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "depth": {"type": "integer", "minimum": 0},
        "csv": {"type": "string"},
        "out": {"type": "string"},
        "report": {"type": "string"},
    },
}


# -- argument parsing ---------------------------------------------------------------------------


def _pairs(values, name):
    if values is None:
        return None
    if len(values) % 2:
        raise ConfigError(f"--{name} needs an even number of values")
    return [[values[i], values[i + 1]] for i in range(0, len(values), 2)]


def build_parser():
    parser = argparse.ArgumentParser(prog="nlhodge", description="Nonlinear Hodge and Hodge-Frobenius toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON job file; flags override its entries")
        p.add_argument("--family")
        p.add_argument("--c", type=float)
        p.add_argument("--p", type=float)
        p.add_argument("--expr", help="density expression in t (and x1..xn)")
        p.add_argument("--branch", type=float, nargs=2, metavar=("T1", "T2"))
        p.add_argument("--interval", type=float, nargs=2, metavar=("A", "B"))
        p.add_argument("--samples", type=int)
        p.add_argument("--r", type=float, nargs="+")
        p.add_argument("--points", type=float, nargs="+")
        p.add_argument("--sign", choices=["+", "-"])
        p.add_argument("--stream")
        p.add_argument("--closed")
        p.add_argument("--form")
        p.add_argument("--grid", choices=list(PRESETS))
        p.add_argument("--res", type=int, nargs="+")
        p.add_argument("--bounds", type=float, nargs="+")
        p.add_argument("--kind", choices=["dual", "conformal_t", "conformal_x"])
        p.add_argument("--direction", choices=["forward", "inverse"])
        p.add_argument("--eta")
        p.add_argument("--zeta")
        p.add_argument("--eta-interval", type=float, nargs=2)
        p.add_argument("--gamma")
        p.add_argument("--sigma-form")
        p.add_argument("--u")
        p.add_argument("--v")
        p.add_argument("--phi")
        p.add_argument("--bound-k", type=float)
        p.add_argument("--t-max", type=float)
        p.add_argument("--data")
        p.add_argument("--neumann")
        p.add_argument("--sigma")
        p.add_argument("--tau", type=float)
        p.add_argument("--taus", type=float, nargs="+")
        p.add_argument("--tol", type=float)
        p.add_argument("--max-iters", type=int)
        p.add_argument("--margin", type=float)
        p.add_argument("--depth", type=int)
        p.add_argument("--csv", help="input field dump")
        p.add_argument("--out", help="output CSV path")
        p.add_argument("--report", help="output JSON report path")
    return parser


def _number_or_text(value):
    if value is None:
        return None
    try:
        return float(value)
    except ValueError:
        return value


def load_config(args):
    """Merge the JSON config with flags and validate the result."""
    cfg = {}
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {args.config}: {err}") from None
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
    cfg["command"] = args.command
    dens = dict(cfg.get("density", {}))
    for key in ("family", "c", "p", "expr"):
        val = getattr(args, key)
        if val is not None:
            dens[key] = val
    if args.family is not None and args.family != cfg.get("density", {}).get("family"):
        dens = {k: v for k, v in dens.items() if k in ("family", "c", "p", "expr")}
    if dens:
        cfg["density"] = dens
    grid = dict(cfg.get("grid", {}))
    if args.grid is not None:
        grid = {"preset": args.grid}
    if args.res is not None:
        grid["res"] = args.res
    if args.bounds is not None:
        grid["bounds"] = _pairs(args.bounds, "bounds")
    if grid:
        cfg["grid"] = grid
    solver = dict(cfg.get("solver", {}))
    for key in ("tol", "max_iters", "margin"):
        val = getattr(args, key)
        if val is not None:
            solver[key] = val
    if solver:
        cfg["solver"] = solver
    plain = ("branch", "interval", "samples", "r", "points", "sign", "stream", "closed", "form", "kind",
             "direction", "eta_interval", "gamma", "sigma_form", "u", "v", "phi", "bound_k", "t_max", "data",
             "neumann", "sigma", "tau", "taus", "depth", "csv", "out", "report")
    for key in plain:
        val = getattr(args, key)
        if val is not None:
            cfg[key] = list(val) if isinstance(val, (list, tuple)) else val
    for key in ("eta", "zeta"):
        val = getattr(args, key)
        if val is not None:
            cfg[key] = _number_or_text(val)
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as err:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {err.message}") from None
    return cfg


# -- builders ----------------------------------------------------------------------------------------


def density_from_config(cfg, default="constant"):
    spec = dict(cfg.get("density", {"family": default}))
    return Density.from_spec(spec)


def grid_from_config(cfg, default="2d"):
    spec = cfg.get("grid", {})
    n, res = PRESETS[spec.get("preset", default)]
    n = spec.get("n", n)
    if "bounds" in spec:
        bounds = spec["bounds"]
        if len(bounds) == 1:
            bounds = bounds * n
        n = len(bounds)
    else:
        bounds = [[0.0, 1.0]] * n
    r = spec.get("res", [res])
    if len(r) == 1:
        r = r * n
    if len(r) != n:
        raise ConfigError(f"grid res has {len(r)} entries for n={n}")
    return Grid(tuple(tuple(b) for b in bounds), tuple(r))


def branch_from_config(cfg, rho):
    if "branch" in cfg:
        a, b = cfg["branch"]
        b = np.inf if b < 0 else b
        closed_lo = rho.domain[0] < a or (rho.domain[0] == a and rho.closed[0])
        closed_lo = closed_lo and not any(abs(a - s) < 1e-12 for s in rho.singular)
        return make_branch(rho, (a, b), closed=(closed_lo, False))
    report = classify(rho, n_samples=cfg.get("samples", 256))
    elliptic = report.elliptic()
    return elliptic[0] if elliptic else report.branches[0]


def form_from_config(cfg, grid):
    if "csv" in cfg:
        g, forms = read_csv(cfg["csv"])
        return g, forms["w"]
    if "form" not in cfg:
        raise ConfigError("this command needs --form or --csv")
    return grid, parse_form(cfg["form"]).sample(grid)


def system_from_config(cfg):
    rho = density_from_config(cfg, default="constant")
    eta = cfg.get("eta")
    interval = tuple(cfg.get("eta_interval", (0.0, np.inf)))
    em = EtaMap(eta, interval=interval)
    t_max = cfg.get("t_max")
    top = rho.domain[1] if np.isfinite(rho.domain[1]) else 100.0
    if t_max is not None:
        top = min(top, t_max)
    probes = np.linspace(0.0, top, 1025)[1:]
    return check_admissible(rho, zeta=cfg.get("zeta"), eta=em, t_probe=probes, bound_k=cfg.get("bound_k"))


def solver_config(cfg):
    return SolverConfig(**cfg.get("solver", {}))


# -- CSV ---------------------------------------------------------------------------------------------


def _column_name(prefix, idx):
    return prefix + "_" + "".join(str(i) for i in idx) if idx else prefix


def write_csv(path, grid, forms, scalars=()):
    """Write fields with axis 1 varying fastest; ``forms`` maps prefixes to forms."""
    cols, names = [], []
    for i, c in enumerate(grid.coords):
        names.append(f"x{i + 1}")
        cols.append(c.ravel(order="F"))
    for prefix, form in forms.items():
        if form.k == 0:
            names.append(prefix)
            cols.append(form.coeffs[0].ravel(order="F"))
            continue
        for idx in form.indices:
            names.append(_column_name(prefix, idx))
            cols.append(form[idx].ravel(order="F"))
    for name, arr in scalars:
        names.append(name)
        cols.append(np.asarray(arr).ravel(order="F"))
    table = np.column_stack(cols)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(names) + "\n")
        for row in table:
            fh.write(",".join("%.17g" % v for v in row) + "\n")


def read_csv(path):
    """Inverse of :func:`write_csv`: returns the grid and ``{prefix: form}``."""
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = np.array([[float(v) for v in row] for row in reader])
    except (OSError, StopIteration, ValueError) as err:
        raise ConfigError(f"cannot read field dump {path}: {err}") from None
    coords = [j for j, h in enumerate(header) if h.startswith("x") and h[1:].isdigit()]
    n = len(coords)
    bounds, res = [], []
    for j in coords:
        vals = np.unique(rows[:, j])
        bounds.append((vals[0], vals[-1]))
        res.append(vals.size)
    grid = Grid(tuple(bounds), tuple(res))
    if rows.shape[0] != grid.size:
        raise ConfigError(f"{path} has {rows.shape[0]} rows for a grid of {grid.size} nodes")
    groups = {}
    for j, name in enumerate(header):
        if j in coords or name == "Q":
            continue
        prefix, _, digits = name.partition("_")
        groups.setdefault(prefix, {})[tuple(int(d) for d in digits)] = rows[:, j].reshape(grid.shape, order="F")
    forms = {}
    for prefix, comps in groups.items():
        k = len(next(iter(comps)))
        if len(comps) != comb(n, k):
            continue
        forms[prefix] = DiscreteForm.from_components(grid, k, comps)
    return grid, forms


# -- reports ---------------------------------------------------------------------------------------


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else ("inf" if v > 0 else ("-inf" if v < 0 else "nan"))
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _branch_dict(b):
    return {"t_interval": list(b.t_interval), "r_interval": list(b.r_interval), "regime": b.regime,
            "closed": list(b.closed), "description": str(b)}


def _emit(report, cfg, out=sys.stdout):
    report = _clean(report)
    text = json.dumps(report, indent=2, sort_keys=True)
    if cfg.get("report"):
        with open(cfg["report"], "w") as fh:
            fh.write(text + "\n")
    for key in sorted(report):
        val = report[key]
        if isinstance(val, (dict, list)):
            val = json.dumps(val, sort_keys=True)
        print(f"{key}: {val}", file=out)


# -- commands -------------------------------------------------------------------------------------------


def cmd_density_classify(cfg):
    rho = density_from_config(cfg)
    rep = classify(rho, cfg.get("interval"), cfg.get("samples", 256))
    return {"density": repr(rho), "branches": [_branch_dict(b) for b in rep.branches],
            "sonic_points": rep.sonic_points, "singular_points": rep.singular_points,
            "low_confidence": rep.low_confidence}, 0


def cmd_density_dual(cfg):
    rho = density_from_config(cfg)
    branch = branch_from_config(cfg, rho)
    pair = dual_density(rho, branch)
    lo, hi = branch.eval_bounds()
    hi = hi if np.isfinite(hi) else lo + 50.0
    t = np.linspace(lo, hi - 1e-3 * (hi - lo), cfg.get("samples", 256))
    th = rho.phi(t)
    identity = float(np.max(np.abs(rho(t) * pair.rho_hat(th) - 1.0)))
    inverse = float(np.max(np.abs(pair.rho_hat.phi(th) - t) / np.maximum(1.0, np.abs(t))))
    out = {"density": repr(rho), "branch": _branch_dict(branch), "hat_branch": _branch_dict(pair.hat_branch),
           "identity_defect": identity, "phi_inverse_defect": inverse}
    if cfg.get("points"):
        out["rho_hat"] = pair.rho_hat(np.asarray(cfg["points"])).tolist()
    return out, 0


def cmd_density_invert(cfg):
    rho = density_from_config(cfg)
    branch = branch_from_config(cfg, rho)
    if not cfg.get("r"):
        raise ConfigError("density-invert needs --r values")
    r = np.asarray(cfg["r"], dtype=float)
    t = psi_invert(branch, r)
    return {"density": repr(rho), "branch": _branch_dict(branch), "r": r, "psi": t,
            "phi_residual": np.abs(rho.phi(t) - r)}, 0


def _residual_dict(rep):
    return {"codiff": rep.codiff, "frobenius": rep.frobenius, "integrability": rep.integrability,
            "sonic_nodes": rep.sonic_nodes, "max_q": rep.max_q, "h": list(rep.h)}


def _verify_residuals(w, rho, cfg):
    grid = w.grid
    gamma = parse_form(cfg["gamma"]).sample(grid) if cfg.get("gamma") else None
    sigma = parse_form(cfg["sigma_form"]).sample(grid) if cfg.get("sigma_form") else None
    return _residual_dict(verify_system(w, rho, Gamma=gamma, Sigma=sigma, depth=cfg.get("depth", 0)))


def cmd_construct(cfg):
    grid = grid_from_config(cfg, default="4d")
    if "stream" not in cfg and "closed" not in cfg:
        raise ConfigError("construct needs --stream or --closed")
    family = cfg.get("density", {}).get("family", "born_infeld")
    if family == "born_infeld" and "sign" in cfg and "stream" in cfg and "branch" not in cfg:
        w, rep = born_infeld_family(grid, cfg["stream"], cfg["sign"], depth=cfg.get("depth", 0))
        rho = Density.born_infeld()
    else:
        rho = density_from_config(cfg, default="born_infeld")
        if family == "born_infeld" and "branch" not in cfg:
            cfg = dict(cfg, branch=[0.0, 1.0] if cfg.get("sign", "+") == "+" else [1.0, -1.0])
        branch = branch_from_config(cfg, rho)
        inp = StreamInput(branch, f=cfg.get("stream"), F=cfg.get("closed"))
        w, rep = from_stream(grid, inp, depth=cfg.get("depth", 0))
    out = {"density": repr(rho), "grid": {"bounds": grid.bounds, "res": grid.res}, "degree": w.k,
           "construct": _residual_dict(rep), "residuals": _verify_residuals(w, rho, cfg)}
    if cfg.get("out"):
        write_csv(cfg["out"], grid, {"w": w}, [("Q", qnorm(w))])
    return out, 0


def cmd_verify(cfg):
    if "csv" not in cfg:
        raise ConfigError("verify needs --csv")
    grid, forms = read_csv(cfg["csv"])
    if "w" not in forms:
        raise ConfigError("field dump has no w_* columns")
    rho = density_from_config(cfg, default="constant")
    return {"density": repr(rho), "grid": {"bounds": grid.bounds, "res": grid.res},
            "residuals": _verify_residuals(forms["w"], rho, cfg)}, 0


def cmd_transform(cfg):
    grid, w = form_from_config(cfg, grid_from_config(cfg))
    kind = cfg.get("kind", "dual")
    direction = cfg.get("direction", "forward")
    out = {"kind": kind, "direction": direction, "degree_in": w.k}
    if kind == "dual":
        rho = density_from_config(cfg)
        branch = branch_from_config(cfg, rho) if "branch" in cfg else None
        res, pair, record = dual_transform(w, rho, branch)
        out.update({"density": repr(rho), "dual_density": repr(pair.rho_hat), "regimes": record.regimes,
                    "identity_defect": dual_identity_defect(w, res, pair),
                    "source": _residual_dict(verify_system(w, rho, depth=cfg.get("depth", 0))),
                    "dual": _residual_dict(verify_dual(res, pair, depth=cfg.get("depth", 0)))})
    elif kind == "conformal_t":
        em = EtaMap(cfg.get("eta", 0.0), interval=tuple(cfg.get("eta_interval", (0.0, np.inf))))
        if direction == "forward":
            res = conformal_forward_t(w, em)
            back = conformal_inverse_t(res, em)
        else:
            res = conformal_inverse_t(w, em)
            back = conformal_forward_t(res, em)
        out["round_trip"] = float(np.max(np.abs(back.coeffs - w.coeffs)))
    else:
        res = conformal_x(w, cfg.get("eta", 0.0), direction)
        back = conformal_x(res, cfg.get("eta", 0.0), "inverse" if direction == "forward" else "forward")
        out["round_trip"] = float(np.max(np.abs(back.coeffs - w.coeffs)))
    out["degree_out"] = res.k
    if cfg.get("out"):
        write_csv(cfg["out"], grid, {"w": res}, [("Q", qnorm(res))])
    return out, 0


def cmd_aharmonic(cfg):
    grid = grid_from_config(cfg)
    rho = density_from_config(cfg, default="minimal")
    branch = branch_from_config(cfg, rho)
    if "u" not in cfg:
        raise ConfigError("aharmonic-check needs --u")
    rep = aharmonic_check(rho, branch, u=cfg["u"], v=cfg.get("v"), grid=grid, depth=cfg.get("depth", 0))
    return {"density": repr(rho), **rep}, 0


def cmd_energy(cfg):
    grid, w = form_from_config(cfg, grid_from_config(cfg))
    rho = density_from_config(cfg)
    out = {"density": repr(rho), "energy": energy(w, rho)}
    if cfg.get("phi"):
        phi = parse_form(cfg["phi"]).sample(grid)
        eta = parse_form(cfg["eta"]).sample(grid) if isinstance(cfg.get("eta"), str) else None
        out["gradient_check"] = energy_gradient_check(w, rho, phi, eta=eta)
    return out, 0


def _bvp_data(cfg):
    if cfg.get("neumann"):
        return BoundaryData.neumann(cfg["neumann"], sigma=cfg.get("sigma"))
    if not cfg.get("data"):
        raise ConfigError("bvp commands need --data (Dirichlet potential) or --neumann (flux 1-form)")
    return BoundaryData.dirichlet(cfg["data"], sigma=cfg.get("sigma"))


def _bvp_outputs(sol, cfg):
    out = {"solve": sol.report.as_dict(), "verify": _residual_dict(verify_bvp(sol)),
           "residuals": _verify_residuals(sol.w, sol.system.rho, cfg)}
    out["verify"]["extra"] = verify_bvp(sol).extra
    if cfg.get("out"):
        u = DiscreteForm.scalar(sol.grid, sol.u)
        write_csv(cfg["out"], sol.grid, {"u": u, "w": sol.w, "w0": sol.w0}, [("Q", qnorm(sol.w))])
    return out


def cmd_bvp_solve(cfg):
    system = system_from_config(cfg)
    data = _bvp_data(cfg).scaled(cfg.get("tau", 1.0))
    grid = grid_from_config(cfg)
    solve = solve_dirichlet if data.kind == "dirichlet" else solve_neumann
    sol = solve(system, data, grid, solver_config(cfg))
    return {"Q_s": system.Q_s, "bound_k": system.bound_k, "caveats": system.caveats, **_bvp_outputs(sol, cfg)}, 0


def cmd_bvp_continue(cfg):
    system = system_from_config(cfg)
    data = _bvp_data(cfg)
    grid = grid_from_config(cfg, default="2d")
    taus = cfg.get("taus") or np.linspace(0.0, 1.0, 11).tolist()
    head = {"Q_s": system.Q_s, "bound_k": system.bound_k, "sqrt_Q_s": float(np.sqrt(system.Q_s))}
    try:
        sol, path = continuation(system, data, taus, grid, solver_config(cfg))
    except SonicExceeded as err:
        return {**head, "path": err.report.as_dict(), "sonic_tripped": True}, 2
    out = {**head, "path": path.as_dict(), "sonic_tripped": False}
    if sol is not None:
        out.update(_bvp_outputs(sol, cfg))
    return out, 0


HANDLERS = {
    "density-classify": cmd_density_classify,
    "density-dual": cmd_density_dual,
    "density-invert": cmd_density_invert,
    "construct": cmd_construct,
    "verify": cmd_verify,
    "transform": cmd_transform,
    "aharmonic-check": cmd_aharmonic,
    "energy": cmd_energy,
    "bvp-solve": cmd_bvp_solve,
    "bvp-continue": cmd_bvp_continue,
}


def run(argv=None, out=sys.stdout):
    """Execute one job; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return 4 if err.code else 0
    try:
        cfg = load_config(args)
        report, code = HANDLERS[cfg["command"]](cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 4
    except SonicExceeded as err:
        report = {"error": "sonic guard tripped", "message": str(err), "max_q": err.max_q}
        if err.report is not None:
            report["solve"] = err.report.as_dict()
        _emit(report, {"report": getattr(args, "report", None)}, out)
        return 2
    except NonConvergence as err:
        report = {"error": "no convergence", "message": str(err)}
        if err.report is not None:
            report["solve"] = err.report.as_dict()
        _emit(report, {"report": getattr(args, "report", None)}, out)
        return 3
    except (DomainError, RangeError) as err:
        nodes = err.nodes if err.nodes is not None else []
        _emit({"error": type(err).__name__, "message": str(err), "nodes": list(nodes)[:20]},
              {"report": getattr(args, "report", None)}, out)
        return 5
    except (PreconditionError, InadmissibleSystem) as err:
        extra = {"condition": err.condition, "witness": err.witness} if isinstance(err, InadmissibleSystem) else {}
        _emit({"error": type(err).__name__, "message": str(err), **extra}, {"report": getattr(args, "report", None)}, out)
        return 5
    _emit(report, cfg, out)
    return code


def main(argv=None):
    sys.exit(run(argv))
