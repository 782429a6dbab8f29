"""Error norms, convergence rates and table output."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TableRow",
    "ConvergenceTable",
    "l2_error",
    "energy_error",
    "triple_norm",
    "rates",
    "format_sci",
    "emit_table",
    "ROUNDOFF_FLOOR",
]

ROUNDOFF_FLOOR = 1e-8
CSV_COLUMNS = ("level", "l2_err", "l2_rate", "energy_err", "energy_rate", "iters")


def _difference(disc, solution, u):
    ref = disc.exact_projection if u is None else disc.interpolate(u)
    return ref - solution


def l2_error(disc, solution, u=None):
    """||Q_0 u - u_0|| summed over cells (u defaults to the problem's exact solution)."""
    diff = _difference(disc, solution, u)
    total = 0.0
    for ops in disc.groups.values():
        d = diff.v0[ops.cells]
        total += np.einsum("ci,cij,cj->", d, ops.M0, d)
    return math.sqrt(max(total, 0.0))


def energy_error(disc, solution, u=None):
    """||grad_w(Q_h u - u_h)|| computed cell by cell from the weak-gradient matrices."""
    return weak_gradient_norm(disc, _difference(disc, solution, u))


def weak_gradient_norm(disc, wf):
    total = 0.0
    for ops in disc.groups.values():
        g = np.einsum("cgi,ci->cg", ops.G, wf.local(ops.cells))
        total += np.einsum("cg,cgh,ch->", g, ops.Mg, g)
    return math.sqrt(max(total, 0.0))


def triple_norm(disc, wf, partition, j):
    """|||v|||_{1, Omega_j}: a-weighted H1 seminorm of v0, stabilizer, and
    the L2 norm of v_b on the subdomain boundary."""
    cells = partition.cells_of(j)
    mesh = disc.mesh
    total = 0.0
    for ops in disc.groups.values():
        mask = np.isin(ops.cells, cells)
        if not mask.any():
            continue
        loc = wf.local(ops.cells[mask])
        v0 = loc[:, : disc.family.n0]
        total += np.einsum("ci,cij,cj->", v0, ops.K0a[mask], v0)
        total += np.einsum("ci,cij,cj->", loc, ops.S[mask], loc)
    bedges = np.concatenate([partition.outer_boundary[j], partition.inner_boundary[j]])
    for e in bedges:
        left = mesh.edge_cells[e, 0]
        side = wf.vb[e] if (wf.vb_right is None or partition.cell_subdomain[left] == j) else wf.vb_right[e]
        total += side @ disc.edge_mass[e] @ side
    return math.sqrt(max(total, 0.0))


@dataclass
class TableRow:
    level: int
    l2_err: float
    energy_err: float
    iters: int | None = None
    l2_rate: float | None = None
    energy_rate: float | None = None


@dataclass
class ConvergenceTable:
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def _rate(prev, cur, floor):
    if cur == 0.0 or prev == 0.0 or cur < floor:
        return None
    return math.log2(prev / cur)


def rates(rows, floor=ROUNDOFF_FLOOR):
    """Fill rate columns with log2(e_{l-1}/e_l); the first row gets 0.0.

    A rate is ``None`` (printed as ``---``) when an error is zero or has
    dropped below the round-off ``floor``.
    """
    out = []
    for i, r in enumerate(rows):
        if i == 0:
            l2r = er = 0.0
        else:
            l2r = _rate(rows[i - 1].l2_err, r.l2_err, floor)
            er = _rate(rows[i - 1].energy_err, r.energy_err, floor)
        out.append(TableRow(r.level, r.l2_err, r.energy_err, r.iters, l2r, er))
    return out


def format_sci(x):
    """Paper-style scientific notation with a mantissa in [0.1, 1): 0.0684 -> '0.684E-01'."""
    if x == 0.0 or not math.isfinite(x):
        return "0.000E+00" if x == 0.0 else str(x)
    sign = "-" if x < 0 else ""
    x = abs(x)
    exp = math.floor(math.log10(x)) + 1
    mant = round(x / 10.0 ** exp, 3)
    if mant >= 1.0:
        mant /= 10.0
        exp += 1
    return f"{sign}{mant:.3f}E{exp:+03d}"


def _fmt_rate(r):
    return "---" if r is None else f"{r:.1f}"


def emit_table(table, fmt="csv"):
    """Render a :class:`ConvergenceTable` as ``csv`` or ``markdown`` text."""
    rows = [
        (str(r.level), format_sci(r.l2_err), _fmt_rate(r.l2_rate), format_sci(r.energy_err),
         _fmt_rate(r.energy_rate), "" if r.iters is None else str(r.iters))
        for r in table.rows
    ]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        w.writerows(rows)
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(CSV_COLUMNS) + " |", "|" + "---|" * len(CSV_COLUMNS)]
        lines += ["| " + " | ".join(r) + " |" for r in rows]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown table format {fmt!r}")
