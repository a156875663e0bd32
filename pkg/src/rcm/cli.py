"""Command-line entry point: rcm <subcommand> [--config FILE] [--seed N] [--out PATH] [--format csv|json].

Exit status: 0 success, 1 runtime failure, 2 usage or invalid config.
Every output starts with a provenance block (config hash, seed, versions
and the full effective config); feeding the output file back through
--config reproduces it byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import platform
import sys

import numpy as np
import scipy

from . import __version__
from .config import COMMANDS, ExperimentConfig, load_config, validate
from .errors import RCMError

# ---------------------------------------------------------------------------
# subcommands; each returns {"table": [rows]} and/or scalar entries


def _setup(cfg: ExperimentConfig):
    from .env import EnvironmentLaw, LatticeDomain, build_environment

    dom = LatticeDomain.from_dict(cfg.domain)
    law = EnvironmentLaw.from_dict(cfg.law)
    return dom, law, build_environment(law, dom, cfg.seed)


def _vertex(dom, x, default=None):
    if x is None:
        return dom.center if default is None else default
    return dom.index(tuple(int(v) for v in np.atleast_1d(x)))


def _coords_table(dom, columns: dict) -> list:
    c = dom.all_coords
    rows = []
    for i in range(dom.n_vertices):
        row = {f"x{k}": int(c[i, k]) for k in range(dom.d)}
        row.update({name: vals[i] for name, vals in columns.items()})
        rows.append(row)
    return rows


def _method(cfg, default="conjugate_gradient"):
    return default if cfg.method == "auto" else cfg.method


def cmd_gen_env(cfg):
    dom, _, env = _setup(cfg)
    u, v, dirs = dom.edges
    cu, cv = dom.all_coords[u], dom.all_coords[v]
    rows = [{"u": "|".join(map(str, cu[e])), "v": "|".join(map(str, cv[e])), "direction": int(dirs[e]),
             "conductance": float(env.values[e])} for e in range(dom.n_edges)]
    return {"n_edges": dom.n_edges, "mean_conductance": float(env.values.mean()), "table": rows}


def cmd_walk(cfg):
    from .walk import simulate_csrw, simulate_discrete, simulate_vsrw

    dom, _, env = _setup(cfg)
    p = cfg.params
    x0 = _vertex(dom, p["start"])
    if p["kind"] == "discrete":
        path = simulate_discrete(env, x0, int(p["steps"]), cfg.seed, int(p["walk_index"]))
    else:
        sim = simulate_csrw if p["kind"] == "csrw" else simulate_vsrw
        path = sim(env, x0, float(p["t_max"]), cfg.seed, int(p["walk_index"]))
    rows = []
    for k in range(len(path)):
        row = {"step": k}
        if path.times is not None:
            row["time"] = float(path.times[k])
        row.update({f"x{i}": int(path.displacement[k, i]) for i in range(dom.d)})
        rows.append(row)
    return {"absorbed": path.absorbed, "table": rows}


def cmd_resistance(cfg):
    from .potential import effective_resistance

    dom, _, env = _setup(cfg)
    p = cfg.params
    sink = _vertex(dom, p["sink"])  # a single vertex
    R = effective_resistance(env, _vertex(dom, p["source"]), sink, _method(cfg), cfg.tol)
    return {"resistance": R}


def cmd_plate(cfg):
    from .potential import dirichlet_energy, plate_potential

    dom, _, env = _setup(cfg)
    sol = plate_potential(env, int(cfg.params["N"]), _method(cfg), cfg.tol)
    return {"energy": dirichlet_energy(env, sol.values), "residual": sol.residual,
            "table": _coords_table(dom, {"potential": sol.values})}


def cmd_boxcond(cfg):
    from .potential import box_conductance

    _, _, env = _setup(cfg)
    return {"box_conductance": box_conductance(env, int(cfg.params["N"]), _method(cfg), cfg.tol)}


def cmd_embed(cfg):
    from .corrector import harmonic_embedding

    dom, _, env = _setup(cfg)
    psi = harmonic_embedding(env, cfg.tol, cfg.method)
    return {"residual": psi.residual,
            "table": _coords_table(dom, {f"psi{i}": psi.values[:, i] for i in range(dom.d)})}


def cmd_corrector(cfg):
    from .corrector import periodized_corrector

    dom, _, env = _setup(cfg)
    chi = periodized_corrector(env, cfg.tol, cfg.method)
    return {"residual": chi.residual,
            "table": _coords_table(dom, {f"chi{i}": chi.values[:, i] for i in range(dom.d)})}


def cmd_diffmat(cfg):
    from .corrector import estimate_diffusion_matrix
    from .env import EnvironmentLaw, LatticeDomain

    dom = LatticeDomain.from_dict(cfg.domain)
    if len(set(dom.sides)) != 1:
        raise RCMError("diffmat needs a cubic torus")
    dm = estimate_diffusion_matrix(EnvironmentLaw.from_dict(cfg.law), dom.d, dom.sides[0],
                                   int(cfg.params["n_samples"]), cfg.seed, cfg.method)
    return dm.to_dict()


def cmd_heatkernel(cfg):
    from .heatkernel import return_probability_series

    dom, _, env = _setup(cfg)
    p = cfg.params
    res = return_probability_series(env, _vertex(dom, p["start"], 0), int(p["n_max"]), tuple(p["fit_range"]))
    rows = [{"n": int(n), "p2n": float(v)} for n, v in zip(res["n"], res["p2n"])]
    return {"slope": res["slope"], "fit_range": list(res["fit_range"]), "table": rows}


def cmd_isoperimetry(cfg):
    from .heatkernel import isoperimetric_profile, verify_morris_peres

    _, _, env = _setup(cfg)
    p = cfg.params
    prof = isoperimetric_profile(env, int(p["cutoff"]), laziness=float(p["gamma"]))
    checks = {}
    for e in np.atleast_1d(p["eps"]):
        r = verify_morris_peres(env, float(p["gamma"]), float(e), int(p["cutoff"]))
        checks[f"{float(e):g}"] = {k: r[k] for k in ("checked", "vacuous", "worst_ratio", "holds")}
    rows = [{"volume": float(v), "phi": float(f)} for v, f in zip(prof.volumes, prof.values)]
    return {"morris_peres": checks, "table": rows}


def cmd_trap(cfg):
    from .env import EnvironmentLaw, LatticeDomain, build_trap_environment
    from .heatkernel import trap_decay_experiment

    dom = LatticeDomain.from_dict(cfg.domain)
    p = cfg.params
    core = tuple(int(c) for c in p["core"])
    origin = None if p["origin"] is None else tuple(int(c) for c in p["origin"])
    env = build_trap_environment(dom, float(p["strength"]), core, EnvironmentLaw.from_dict(cfg.law), cfg.seed,
                                 direction=int(p["direction"]), origin=origin)
    res = trap_decay_experiment(env, p["n_grid"], core, int(p["direction"]), origin, bool(p["control"]))
    trap = {k: int(v) for k, v in res["trap"].items()}
    return {"path_length": res["path_length"], "trap": trap, "table": res["rows"]}


def cmd_gradfield(cfg):
    from .env import make_rng
    from .gradfield import GradientField, MixtureSpec, gibbs_sweep, sample_gaussian_field

    dom, _, env = _setup(cfg)
    p = cfg.params
    n = int(p["n_samples"])
    cols = {}
    if p["mixture"] is None or int(p["n_sweeps"]) == 0:
        for k, f in enumerate(sample_gaussian_field(env, cfg.seed, p["gauge"], n_samples=n)):
            cols[f"phi{k}"] = f.values
        return {"gauge": p["gauge"], "table": _coords_table(dom, cols)}
    spec = MixtureSpec(tuple(p["mixture"]["atoms"]), tuple(p["mixture"]["weights"]))
    # start from kappa drawn from rho; on a torus phi starts from a draw given
    # kappa, on a box from zero with the outer layer held at zero
    atoms = np.array(spec.atoms)
    kappa = env.with_values(atoms[make_rng(cfg.seed, 40).choice(len(atoms), dom.n_edges, p=spec.weights)])
    if dom.periodic:
        field = sample_gaussian_field(kappa, cfg.seed, p["gauge"], first_index=10**9)
    else:
        field = GradientField(dom, np.zeros(dom.n_vertices), "boundary", None)
    sweeps = int(p["n_sweeps"])
    for s in range(sweeps * n):
        kappa, field = gibbs_sweep(field, spec, kappa, cfg.seed, s)
        if (s + 1) % sweeps == 0:
            cols[f"phi{(s + 1) // sweeps - 1}"] = field.values.copy()
    return {"gauge": field.gauge, "kappa_mean": float(kappa.values.mean()), "table": _coords_table(dom, cols)}


def _profile(d):
    from .fields import MacroscopicProfile

    return MacroscopicProfile.from_dict(d)


def _q(cfg, d):
    from .corrector import estimate_diffusion_matrix
    from .env import EnvironmentLaw, derive_seed

    p = cfg.params
    if p["q"] is not None:
        return np.atleast_2d(np.asarray(p["q"], dtype=float))
    return estimate_diffusion_matrix(EnvironmentLaw.from_dict(cfg.law), d, int(p["q_side"]),
                                     int(p["q_samples"]), derive_seed(cfg.seed, 999)).q


def cmd_gff_scaling(cfg):
    from .env import EnvironmentLaw
    from .gradfield import gff_scaling

    p = cfg.params
    prof = _profile(p["profile"])
    q = _q(cfg, prof.d)
    rows = gff_scaling(EnvironmentLaw.from_dict(cfg.law), p["sides"], prof, float(p["period"]), q,
                       p["n_env"], cfg.seed, int(p["n_draws"]), antithetic=bool(p["antithetic"]))
    return {"q": q.tolist(), "table": rows}


def cmd_homogenize(cfg):
    from .env import EnvironmentLaw
    from .homogenize import homogenization_error

    p = cfg.params
    prof = _profile(p["profile"])
    q = _q(cfg, prof.d)
    rows = homogenization_error(EnvironmentLaw.from_dict(cfg.law), prof, float(p["t"]), p["eps_grid"],
                                float(p["period"]), int(p["n_env"]), cfg.seed, q)
    for r in rows:
        r.pop("errors")
    return {"q": q.tolist(), "table": rows}


def cmd_resolvent(cfg):
    from .env import EnvironmentLaw, LatticeDomain, build_environment, derive_seed
    from .homogenize import resolvent_pairing

    p = cfg.params
    f, g = _profile(p["f"]), _profile(p["g"])
    q = _q(cfg, f.d)
    law = EnvironmentLaw.from_dict(cfg.law)
    rows = []
    for i, eps in enumerate(p["eps_grid"]):
        N = int(round(float(p["period"]) / eps))
        env = build_environment(law, LatticeDomain((N,) * f.d, "periodic"), derive_seed(cfg.seed, i))
        r = resolvent_pairing(env, f, g, float(eps), q, method=_method(cfg, "direct"))
        rows.append({"eps": r["eps"], "side": r["side"], "pairing": r["pairing"], "target": r["target"]})
    return {"q": q.tolist(), "table": rows}


HANDLERS = {
    "gen-env": cmd_gen_env, "walk": cmd_walk, "resistance": cmd_resistance, "plate": cmd_plate,
    "boxcond": cmd_boxcond, "embed": cmd_embed, "corrector": cmd_corrector, "diffmat": cmd_diffmat,
    "heatkernel": cmd_heatkernel, "isoperimetry": cmd_isoperimetry, "trap": cmd_trap,
    "gradfield": cmd_gradfield, "gff-scaling": cmd_gff_scaling, "homogenize": cmd_homogenize,
    "resolvent": cmd_resolvent,
}

# ---------------------------------------------------------------------------
# output


def provenance(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed, "config": cfg.to_dict(),
            "versions": {"rcm": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()}}


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    return x


def render(cfg: ExperimentConfig, result: dict) -> str:
    prov = _plain(provenance(cfg))
    result = _plain(result)
    if cfg.output.get("format", "json") == "json":
        return json.dumps({"provenance": prov, "result": result}, indent=2, sort_keys=True) + "\n"
    buf = io.StringIO()
    buf.write("# rcm output\n")
    for key in ("config_hash", "seed"):
        buf.write(f"# {key}: {prov[key]}\n")
    buf.write(f"# versions: {json.dumps(prov['versions'], sort_keys=True)}\n")
    buf.write(f"# config: {json.dumps(prov['config'], sort_keys=True)}\n")
    scalars = {k: v for k, v in result.items() if k != "table"}
    for k in sorted(scalars):
        buf.write(f"# {k}: {json.dumps(scalars[k], sort_keys=True)}\n")
    table = result.get("table")
    if table is None:
        table = [{"key": k, "value": json.dumps(v, sort_keys=True) if isinstance(v, (dict, list)) else v}
                 for k, v in sorted(scalars.items())]
    if table:
        cols = list(table[0])
        for row in table[1:]:
            cols += [c for c in row if c not in cols]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in table:
            w.writerow({c: ("" if row.get(c) is None else row.get(c)) for c in cols})
    return buf.getvalue()


def run(cfg: ExperimentConfig, out=None) -> tuple:
    """Execute a validated config; returns (status, text written)."""
    result = HANDLERS[cfg.command](cfg)
    text = render(cfg, result)
    path = out if out is not None else cfg.output.get("path")
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return 0, text


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rcm", description="Random conductance model experiments.")
    parser.add_argument("--version", action="version", version=f"rcm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    for name in COMMANDS:
        sp = sub.add_parser(name, help=f"run the {name} experiment")
        sp.add_argument("--config", help="YAML/JSON config, a previous output file, or fixture:NAME")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output path (default: stdout)")
        sp.add_argument("--format", choices=("csv", "json"), help="output format")
        sp.add_argument("--validate-only", action="store_true", help="check the config and exit")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        raw = load_config(args.config) if args.config else {}
    except RCMError as exc:
        print(f"rcm: {exc}", file=sys.stderr)
        return 2
    if raw.get("command") not in (None, args.command):
        print(f"rcm: config is for {raw['command']!r}, not {args.command!r}", file=sys.stderr)
        return 2
    raw = dict(raw, command=args.command)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.format is not None:
        raw["output"] = dict(raw.get("output") or {}, format=args.format)
    findings = validate(raw)
    if findings:
        for f in findings:
            print(f"rcm: invalid config: {f}", file=sys.stderr)
        return 2
    cfg = ExperimentConfig.from_dict(raw)
    if args.validate_only:
        return 0
    try:
        status, _ = run(cfg, args.out)
    except (RCMError, ValueError, ArithmeticError, MemoryError) as exc:
        print(f"rcm: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return status


if __name__ == "__main__":
    sys.exit(main())
