"""Experiment configuration: schema, defaults, validation and file round-trips.

A config is a YAML mapping (JSON is accepted too, being a subset):

    command: resistance          # subcommand name
    seed: 0
    domain: {sides: [4], boundary: periodic}
    law: {kind: constant, c: 1.0}
    method: conjugate_gradient   # linear solver where one is used
    tol: 1.0e-10
    params: {source: [0], sink: [1]}
    output: {format: json}       # or csv; optional path

Missing keys are filled from the per-command defaults below. A file
written by the CLI can itself be passed as a config: its provenance block
carries the full effective config.
"""

from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .env import EnvironmentLaw, LatticeDomain
from .errors import ConstructionError, FormatError
from .fields import MacroscopicProfile

FORMATS = ("json", "csv")
SOLVERS = ("conjugate_gradient", "relaxation", "direct", "auto")

_BUMP2 = {"kind": "dipole", "center": [0.5, 0.5], "width": 1 / 64}

PARAM_DEFAULTS = {
    "gen-env": {},
    "walk": {"kind": "discrete", "start": None, "steps": 100, "t_max": 10.0, "walk_index": 0},
    "resistance": {"source": [0], "sink": [1]},
    "plate": {"N": 8},
    "boxcond": {"N": 8},
    "embed": {},
    "corrector": {},
    "diffmat": {"n_samples": 1},
    "heatkernel": {"start": None, "n_max": 1024, "fit_range": [64, 1024]},
    "isoperimetry": {"cutoff": 18, "gamma": 0.25, "eps": [0.1, 0.01]},
    "trap": {"strength": 1 / 64, "core": [2, 4], "direction": 0, "origin": None,
             "n_grid": [8, 16, 32, 64, 128, 256], "control": True},
    "gradfield": {"gauge": "pinned", "n_samples": 1, "mixture": None, "n_sweeps": 0},
    "gff-scaling": {"sides": [64, 128, 256], "profile": _BUMP2, "period": 1.0, "n_env": 8,
                    "antithetic": True, "q": None, "q_side": 128, "q_samples": 2, "n_draws": 0},
    "homogenize": {"profile": {"kind": "gaussian", "center": [2.0, 2.0], "width": 0.5, "support": 2.0},
                   "t": 1.0, "eps_grid": [0.125, 0.0625, 0.03125, 0.015625], "period": 4.0, "n_env": 2,
                   "q": None, "q_side": 128, "q_samples": 2},
    "resolvent": {"f": {"kind": "dipole", "center": [0.5, 0.5], "width": 0.0625},
                  "g": {"kind": "dipole", "center": [0.5, 0.5], "width": 0.0625},
                  "eps_grid": [0.03125, 0.015625, 0.0078125], "period": 1.0, "q": None,
                  "q_side": 128, "q_samples": 2},
}

_UNIT = {"kind": "constant", "c": 1.0}
SETUP_DEFAULTS = {
    "gen-env": ({"sides": [8, 8], "boundary": "periodic"}, _UNIT),
    "walk": ({"sides": [32, 32], "boundary": "periodic"}, _UNIT),
    "resistance": ({"sides": [4], "boundary": "periodic"}, _UNIT),
    "plate": ({"sides": [17, 17], "boundary": "free"}, _UNIT),
    "boxcond": ({"sides": [17, 17], "boundary": "free"}, _UNIT),
    "embed": ({"sides": [17, 17], "boundary": "free"}, _UNIT),
    "corrector": ({"sides": [64, 64], "boundary": "periodic"},
                  {"kind": "iid", "distribution": {"kind": "uniform", "params": [0.5, 2.0]}}),
    "diffmat": ({"sides": [64, 64], "boundary": "periodic"},
                {"kind": "iid", "distribution": {"kind": "uniform", "params": [0.5, 2.0]}}),
    "heatkernel": ({"sides": [256, 256], "boundary": "periodic"}, _UNIT),
    "isoperimetry": ({"sides": [4, 4], "boundary": "periodic"}, {"kind": "constant", "c": 10.0}),
    "trap": ({"sides": [8, 8], "boundary": "absorbing"}, _UNIT),
    "gradfield": ({"sides": [16, 16], "boundary": "periodic"}, _UNIT),
    "gff-scaling": ({"sides": [64, 64], "boundary": "periodic"},
                    {"kind": "iid", "distribution": {"kind": "two_point", "params": [1.0, 0.5, 2.0]}}),
    "homogenize": ({"sides": [32, 32], "boundary": "periodic"},
                   {"kind": "iid", "distribution": {"kind": "uniform", "params": [0.5, 2.0]}}),
    "resolvent": ({"sides": [32, 32], "boundary": "periodic"},
                  {"kind": "iid", "distribution": {"kind": "uniform", "params": [0.5, 2.0]}}),
}
COMMANDS = tuple(PARAM_DEFAULTS)


@dataclass
class ExperimentConfig:
    command: str
    domain: dict
    law: dict
    seed: int = 0
    method: str = "conjugate_gradient"
    tol: float = 1e-10
    params: dict = field(default_factory=dict)
    output: dict = field(default_factory=lambda: {"format": "json"})

    def to_dict(self) -> dict:
        return {"command": self.command, "seed": self.seed, "domain": self.domain, "law": self.law,
                "method": self.method, "tol": self.tol, "params": self.params, "output": self.output}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = _numbers(dict(d))
        cmd = d.get("command")
        dom_def, law_def = SETUP_DEFAULTS.get(cmd, ({}, {}))
        params = copy.deepcopy(PARAM_DEFAULTS.get(cmd, {}))
        params.update(d.get("params") or {})
        return cls(command=cmd, domain=d.get("domain") or copy.deepcopy(dom_def),
                   law=d.get("law") or copy.deepcopy(law_def), seed=d.get("seed", 0),
                   method=d.get("method", "conjugate_gradient"), tol=d.get("tol", 1e-10),
                   params=params, output=d.get("output") or {"format": "json"})

    def canonical(self) -> str:
        """Key-sorted JSON without the output block; the hash input."""
        d = self.to_dict()
        d.pop("output")
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


_NUM = re.compile(r"^[-+]?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?$")


def _numbers(obj):
    """YAML 1.1 reads '1e-10' as a string; turn numeric strings back into floats."""
    if isinstance(obj, dict):
        return {k: _numbers(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_numbers(v) for v in obj]
    if isinstance(obj, str) and _NUM.match(obj):
        return float(obj)
    return obj


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("rcm") / "data" / f"{name}.yaml"))


def _from_output(text: str) -> dict | None:
    """The config recorded in the provenance block of a CLI output, if any."""
    if text.lstrip().startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError:
            return None
        if isinstance(doc, dict) and "provenance" in doc:
            return doc["provenance"]["config"]
        return None
    for line in text.splitlines():
        if line.startswith("# config: "):
            return json.loads(line[len("# config: "):])
        if not line.startswith("#"):
            break
    return None


def load_config(source: str) -> dict:
    """Raw mapping from a YAML/JSON file, a CLI output, or 'fixture:NAME'."""
    path = fixture_path(source.split(":", 1)[1]) if source.startswith("fixture:") else Path(source)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read config {source}: {exc}") from exc
    rec = _from_output(text)
    if rec is not None:
        return rec
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise FormatError(f"config {source} is not valid YAML: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise FormatError(f"config {source} must be a mapping")
    return doc


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Finding:
    path: str
    message: str

    def __str__(self):
        return f"{self.path}: {self.message}"


def _profile_findings(p, path: str, d: int, zero_integral: bool) -> list:
    out = []
    if not isinstance(p, dict):
        return [Finding(path, "must be a mapping")]
    try:
        prof = MacroscopicProfile.from_dict(p)
    except ConstructionError as exc:
        return [Finding(f"{path}.{exc.field}", str(exc).split(": ", 1)[-1])]
    except (TypeError, ValueError) as exc:
        return [Finding(path, str(exc))]
    if prof.d != d:
        out.append(Finding(f"{path}.center", f"profile is {prof.d}-dimensional, domain is {d}-dimensional"))
    if zero_integral and d <= 2:
        scale = abs(prof.amplitude) if prof.kind != "custom" else float(np.abs(prof.grid).sum())
        if abs(prof.integral) > 1e-9 * max(scale, 1e-300):
            out.append(Finding(path, f"integral is {prof.integral:.6g}; resolvent pairings in dimension "
                                     f"{d} need test functions with zero integral"))
    return out


def _is_int(x) -> bool:
    return isinstance(x, (int, np.integer)) and not isinstance(x, bool) or (isinstance(x, float) and x.is_integer())


def validate(config) -> list:
    """Schema and semantic checks; returns a list of Finding (empty when valid)."""
    raw = config.to_dict() if isinstance(config, ExperimentConfig) else config
    if not isinstance(raw, dict):
        return [Finding("", "config must be a mapping")]
    out: list = []
    cmd = raw.get("command")
    if cmd not in COMMANDS:
        return [Finding("command", f"unknown command {cmd!r}; choose from {', '.join(COMMANDS)}")]
    known = {"command", "seed", "domain", "law", "method", "tol", "params", "output"}
    out += [Finding(k, "unknown key") for k in raw if k not in known]
    cfg = ExperimentConfig.from_dict(raw)
    dom = None
    try:
        dom = LatticeDomain.from_dict(cfg.domain)
    except ConstructionError as exc:
        out.append(Finding(f"domain.{exc.field}", str(exc).split(": ", 1)[-1]))
    except (KeyError, TypeError, ValueError) as exc:
        out.append(Finding("domain", f"malformed: {exc}"))
    try:
        EnvironmentLaw.from_dict(cfg.law)
    except ConstructionError as exc:
        f = exc.field if exc.field.startswith("law") else f"law.{exc.field}"
        out.append(Finding(f, str(exc).split(": ", 1)[-1]))
    except (KeyError, TypeError, ValueError) as exc:
        out.append(Finding("law", f"malformed: {exc}"))
    if not _is_int(cfg.seed) or cfg.seed < 0:
        out.append(Finding("seed", "must be a nonnegative integer"))
    if cfg.method not in SOLVERS:
        out.append(Finding("method", f"must be one of {', '.join(SOLVERS)}"))
    if not isinstance(cfg.tol, (int, float)) or not cfg.tol > 0:
        out.append(Finding("tol", "must be a positive number"))
    fmt = cfg.output.get("format", "json") if isinstance(cfg.output, dict) else None
    if fmt not in FORMATS:
        out.append(Finding("output.format", f"must be one of {', '.join(FORMATS)}"))
    extra = set(cfg.params) - set(PARAM_DEFAULTS[cmd])
    out += [Finding(f"params.{k}", "unknown parameter") for k in sorted(extra)]
    out += _semantic(cmd, cfg.params, dom)
    return out


def _semantic(cmd: str, p: dict, dom) -> list:
    out = []
    d = dom.d if dom is not None else None
    if cmd in ("plate", "boxcond"):
        N = p.get("N")
        if not _is_int(N) or N < 1:
            out.append(Finding("params.N", "must be a positive integer"))
        elif dom is not None:
            if dom.periodic:
                out.append(Finding("domain.boundary", f"{cmd} needs a non-periodic box"))
            axes = range(d) if cmd == "boxcond" else [1 if d >= 2 else 0]
            if any(dom.sides[a] != 2 * int(N) + 1 for a in axes):
                out.append(Finding("domain.sides", f"{cmd} with N={int(N)} needs side {2 * int(N) + 1}"))
    if cmd == "embed" and dom is not None and dom.periodic:
        out.append(Finding("domain.boundary", "embedding needs a box"))
    if cmd in ("corrector", "diffmat") and dom is not None and not dom.periodic:
        out.append(Finding("domain.boundary", f"{cmd} needs a torus"))
    if cmd == "walk":
        if p.get("kind") not in ("discrete", "csrw", "vsrw"):
            out.append(Finding("params.kind", "must be discrete, csrw or vsrw"))
        if not _is_int(p.get("steps")) or p["steps"] < 0:
            out.append(Finding("params.steps", "must be a nonnegative integer"))
    if cmd == "isoperimetry":
        if not 0 < p.get("gamma", 0) < 1:
            out.append(Finding("params.gamma", "must lie in (0, 1)"))
        for i, e in enumerate(np.atleast_1d(p.get("eps", []))):
            if not 0 < e < 1:
                out.append(Finding(f"params.eps[{i}]", "must lie in (0, 1)"))
    if cmd == "trap" and not 0 < p.get("strength", 0) <= 1:
        out.append(Finding("params.strength", "must lie in (0, 1]"))
    if cmd == "gradfield":
        if p.get("gauge") not in ("pinned", "zero_mean", "boundary"):
            out.append(Finding("params.gauge", "must be pinned, zero_mean or boundary"))
        mix = p.get("mixture")
        if mix is not None:
            a, w = mix.get("atoms", []), mix.get("weights", [])
            if len(a) != len(w) or not a or min(a) <= 0 or abs(sum(w) - 1) > 1e-12 or min(w) < 0:
                out.append(Finding("params.mixture", "atoms must be positive with weights summing to 1"))
    if cmd in ("gff-scaling", "homogenize") and d is not None:
        out += _profile_findings(p.get("profile"), "params.profile", d, False)
    if cmd == "resolvent" and d is not None:
        out += _profile_findings(p.get("f"), "params.f", d, True)
        out += _profile_findings(p.get("g"), "params.g", d, True)
    for key in ("period", "t"):
        if key in p and not (isinstance(p[key], (int, float)) and p[key] > 0):
            out.append(Finding(f"params.{key}", "must be positive"))
    return out
