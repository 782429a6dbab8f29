"""Command-line driver: run a solver over a range of mesh levels and print a convergence table.

Examples
--------
    wgdd --test test1 --degree 2 --subdomains 4 --levels 1..5
    wgdd --test test3 --family superconvergent --mode hybrid-direct
    wgdd --config run.cfg --beta 19 --degree 5

A config file holds ``key = value`` lines using the long option names
(``max_iters`` or ``max-iters``); command-line flags win over the file.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .assembly import assemble, solve
from .ddsolver import (
    StopRule,
    build_subdomain_systems,
    default_beta,
    error_monitor,
    initial_state,
    run as run_iteration,
    solve_hybrid_direct,
    to_weak_function,
)
from .errors import ConvergenceTable, TableRow, emit_table, energy_error, l2_error, rates
from .exceptions import WGError
from .mesh import build_uniform_triangle_mesh, load_mesh, partition_grid, partition_per_element
from .meshgen import load_shipped_mesh
from .problems import PROBLEMS, get_problem
from .wgcore import Discretization, ElementFamily

log = logging.getLogger("wgdd")

EXIT_OK, EXIT_USAGE, EXIT_SOLVER, EXIT_NOCONV = 0, 1, 2, 3
MODES = ("monolithic", "dd-iter", "hybrid-direct")
GRIDS = ("triangle", "quadpent")
DEFAULTS = {
    "test": "test1",
    "family": "standard",
    "degree": "1",
    "subdomains": "2",
    "beta": None,
    "levels": "1..4",
    "mode": "dd-iter",
    "stop": "oracle",
    "tol": "1e-10",
    "max_iters": "1000",
    "out": None,
    "diagnostics": "false",
    "mesh_file": None,
    "format": "csv",
    "grid": "triangle",
    "jobs": "1",
}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    test: str = "test1"
    family: str = "standard"
    degree: int = 1
    subdomains: int | str = 2
    beta: float | None = None
    levels: tuple = (1, 4)
    mode: str = "dd-iter"
    stop: str = "oracle"
    tol: float = 1e-10
    max_iters: int = 1000
    out: Path | None = None
    diagnostics: bool = False
    mesh_file: list = field(default_factory=list)
    format: str = "csv"
    grid: str = "triangle"
    jobs: int = 1

    @property
    def element(self):
        return ElementFamily(self.family, self.degree)

    @property
    def beta_value(self):
        return default_beta(self.element) if self.beta is None else self.beta


def _parse_levels(text):
    a, sep, b = str(text).partition("..")
    try:
        lo = int(a)
        hi = int(b) if sep else lo
    except ValueError:
        raise UsageError(f"levels must look like A..B, got {text!r}") from None
    if lo < 1 or hi < lo:
        raise UsageError(f"bad level range {text!r}")
    return lo, hi


def _parse_bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


def read_config_file(path):
    """``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key = key.strip().replace("-", "_")
            if key not in DEFAULTS:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = value.strip()
    return values


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    ap = _Parser(prog="wgdd", description="Weak Galerkin solver with hybridized domain decomposition.")
    ap.add_argument("--config", type=Path, help="key = value file; flags override it")
    ap.add_argument("--test", help=f"test case: {', '.join(PROBLEMS)}")
    ap.add_argument("--family", help="standard or superconvergent")
    ap.add_argument("--degree", help="polynomial degree k, 1..6")
    ap.add_argument("--subdomains", help="m for an m x m grid partition, or per-element")
    ap.add_argument("--beta", help="Robin parameter (default depends on family and degree)")
    ap.add_argument("--levels", help="level range A..B; level l uses an n = 2^l grid")
    ap.add_argument("--mode", help="monolithic, dd-iter or hybrid-direct")
    ap.add_argument("--stop", help="oracle (stop at truncation error) or residual")
    ap.add_argument("--tol", help="interface residual tolerance for --stop residual")
    ap.add_argument("--max-iters", dest="max_iters")
    ap.add_argument("--out", help="table output path (default stdout)")
    ap.add_argument("--diagnostics", action="store_const", const="true",
                    help="log the energy functional and identity residuals (dd-iter)")
    ap.add_argument("--mesh-file", dest="mesh_file", help="comma-separated mesh files, one per level")
    ap.add_argument("--grid", help="mesh family when no mesh files are given: triangle or quadpent")
    ap.add_argument("--format", help="csv or markdown")
    ap.add_argument("--jobs", help="threads for subdomain solves")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def parse_config(argv=None):
    """Merge defaults, an optional config file and command-line flags into a :class:`RunConfig`."""
    ns = build_parser().parse_args(argv)
    merged = dict(DEFAULTS)
    if ns.config is not None:
        try:
            merged.update(read_config_file(ns.config))
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
    for key in DEFAULTS:
        value = getattr(ns, key, None)
        if value is not None:
            merged[key] = value
    return _validate(merged), ns.verbose


def _validate(v):
    cfg = RunConfig()
    if v["test"] not in PROBLEMS:
        raise UsageError(f"unknown test {v['test']!r}")
    cfg.test = v["test"]
    if v["family"] not in ("standard", "superconvergent"):
        raise UsageError(f"unknown family {v['family']!r}")
    cfg.family = v["family"]
    try:
        cfg.degree = int(v["degree"])
        cfg.tol = float(v["tol"])
        cfg.max_iters = int(v["max_iters"])
        cfg.jobs = int(v["jobs"])
        cfg.beta = None if v["beta"] in (None, "") else float(v["beta"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not 1 <= cfg.degree <= 6:
        raise UsageError(f"degree must be in 1..6, got {cfg.degree}")
    if cfg.beta is not None and not cfg.beta > 0:
        raise UsageError("beta must be positive")
    if not cfg.tol > 0 or cfg.max_iters < 1 or cfg.jobs < 1:
        raise UsageError("tol, max_iters and jobs must be positive")
    sub = str(v["subdomains"]).strip()
    if sub == "per-element":
        cfg.subdomains = sub
    else:
        try:
            cfg.subdomains = int(sub)
        except ValueError:
            raise UsageError(f"subdomains must be an integer or per-element, got {sub!r}") from None
        if cfg.subdomains < 1:
            raise UsageError("subdomains must be >= 1")
    cfg.levels = _parse_levels(v["levels"])
    for key, allowed in (("mode", MODES), ("stop", ("oracle", "residual")),
                         ("format", ("csv", "markdown")), ("grid", GRIDS)):
        if v[key] not in allowed:
            raise UsageError(f"{key} must be one of {', '.join(allowed)}")
        setattr(cfg, key, v[key])
    cfg.diagnostics = _parse_bool(v["diagnostics"])
    cfg.out = None if not v["out"] else Path(v["out"])
    if v["mesh_file"]:
        cfg.mesh_file = [Path(p.strip()) for p in str(v["mesh_file"]).split(",") if p.strip()]
        n_levels = cfg.levels[1] - cfg.levels[0] + 1
        if len(cfg.mesh_file) != n_levels:
            raise UsageError(f"{len(cfg.mesh_file)} mesh files given for {n_levels} levels")
    polygonal = bool(cfg.mesh_file) or cfg.grid != "triangle"
    if cfg.family == "superconvergent" and polygonal:
        raise UsageError("the superconvergent family needs triangular grids")
    return cfg


def level_mesh(cfg, level):
    if cfg.mesh_file:
        return load_mesh(str(cfg.mesh_file[level - cfg.levels[0]]))
    if cfg.grid == "quadpent":
        return load_shipped_mesh(level)
    return build_uniform_triangle_mesh(2 ** level)


def level_partition(cfg, mesh, level):
    if cfg.subdomains == "per-element":
        return partition_per_element(mesh)
    m = cfg.subdomains
    if not cfg.mesh_file and cfg.grid == "triangle":
        m = min(m, 2 ** level)
    return partition_grid(mesh, m)


@dataclass
class LevelResult:
    level: int
    l2: float
    energy: float
    iterations: int | None = None
    converged: bool = True
    log: object = None


def run_level(cfg, level):
    """Solve one level; errors are measured against Q_h u of the exact solution."""
    mesh = level_mesh(cfg, level)
    disc = Discretization(mesh, cfg.element, get_problem(cfg.test))
    if cfg.mode == "monolithic":
        uh = solve(assemble(disc))
        return LevelResult(level, l2_error(disc, uh), energy_error(disc, uh))
    dd = build_subdomain_systems(disc, level_partition(cfg, mesh, level), cfg.beta_value)
    if cfg.mode == "hybrid-direct":
        uh = solve_hybrid_direct(dd).function
        return LevelResult(level, l2_error(disc, uh), energy_error(disc, uh))
    reference = solve_hybrid_direct(dd) if cfg.diagnostics else None
    if cfg.stop == "oracle":
        # the truncation error of this level sets the target
        trunc = energy_error(disc, solve(assemble(disc)))
        stop = StopRule("oracle", max(trunc, 1e-300), cfg.max_iters)
        monitor = error_monitor(dd)
    else:
        stop = StopRule("residual", cfg.tol, cfg.max_iters)
        monitor = None
    state, ilog = run_iteration(
        initial_state(dd), dd, stop, error_fn=monitor, reference=reference,
        n_jobs=cfg.jobs, check_identities=cfg.diagnostics,
    )
    uh = to_weak_function(dd, state)
    return LevelResult(level, l2_error(disc, uh), energy_error(disc, uh), ilog.iterations, ilog.converged, ilog)


def _table(cfg, results):
    rows = [TableRow(r.level, r.l2, r.energy, r.iterations) for r in results]
    meta = {"test": cfg.test, "family": cfg.family, "degree": cfg.degree, "beta": cfg.beta_value,
            "subdomains": cfg.subdomains, "mode": cfg.mode}
    return ConvergenceTable(rates(rows), meta)


def _write_logs(cfg, results):
    stem = cfg.out.with_suffix("")
    with open(f"{stem}_iterations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "n", "residual", "energy_err"])
        for r in results:
            errs = r.log.errors or [""] * len(r.log.residuals)
            for n, (res, err) in enumerate(zip(r.log.residuals, errs), start=1):
                w.writerow([r.level, n, repr(res), "" if err == "" else repr(err)])
    if cfg.diagnostics:
        with open(f"{stem}_diagnostics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "n", "E", "identity_gap"])
            for r in results:
                gaps = [""] + [repr(g) for g in r.log.identity_gaps]
                for n, (E, g) in enumerate(zip(r.log.energies, gaps)):
                    w.writerow([r.level, n, repr(E), g])


def execute(cfg):
    """Run every level; returns ``(exit status, table text)``."""
    results = []
    for level in range(cfg.levels[0], cfg.levels[1] + 1):
        res = run_level(cfg, level)
        log.info("level %d: l2 %.3e energy %.3e iters %s", level, res.l2, res.energy, res.iterations)
        results.append(res)
    text = emit_table(_table(cfg, results), cfg.format)
    if cfg.out is not None:
        cfg.out.parent.mkdir(parents=True, exist_ok=True)
        cfg.out.write_text(text)
        if cfg.mode == "dd-iter":
            _write_logs(cfg, results)
    status = EXIT_OK if all(r.converged for r in results) else EXIT_NOCONV
    return status, text


def main(argv=None):
    try:
        cfg, verbose = parse_config(argv)
    except UsageError as exc:
        print(f"wgdd: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")
    try:
        status, text = execute(cfg)
    except (WGError, OSError) as exc:
        print(f"wgdd: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    if cfg.out is None:
        sys.stdout.write(text)
    if status == EXIT_NOCONV:
        print("wgdd: iteration did not converge within max_iters on some level", file=sys.stderr)
    return status
