"""Generator for the shipped quadrilateral/pentagon mesh family.

Start from an n x n square grid and split the horizontal edge between
rows j-1 and j at column i by a midpoint vertex whenever (i + j) is even.
Interior cells then carry exactly one split edge and become pentagons;
cells along the bottom and top boundary rows alternate between squares and
pentagons. All edges lie on grid lines, so grid partitions with m | n
align with cell edges.

Run ``python -m wgdd.meshgen OUTDIR`` to regenerate the data files.
"""
from __future__ import annotations

import argparse
from importlib import resources
from pathlib import Path

import numpy as np

from .mesh import Mesh, load_mesh, write_mesh

__all__ = ["quad_pentagon_mesh", "shipped_levels", "load_shipped_mesh", "SHIPPED_SIZES"]

SHIPPED_SIZES = (4, 8, 16, 32, 64)


def _split(i, j, n):
    """Whether the horizontal edge at height j (0..n) over column i carries a midpoint."""
    return 0 < j < n and (i + j) % 2 == 0


def quad_pentagon_mesh(n):
    if n < 2:
        raise ValueError("n must be at least 2")
    h = 1.0 / n
    verts = [(i * h, j * h) for j in range(n + 1) for i in range(n + 1)]

    def corner(i, j):
        return j * (n + 1) + i

    mid = {}
    for j in range(1, n):
        for i in range(n):
            if _split(i, j, n):
                mid[i, j] = len(verts)
                verts.append(((i + 0.5) * h, j * h))

    cells = []
    for j in range(n):
        for i in range(n):
            loop = [corner(i, j)]
            if (i, j) in mid:
                loop.append(mid[i, j])
            loop += [corner(i + 1, j), corner(i + 1, j + 1)]
            if (i, j + 1) in mid:
                loop.append(mid[i, j + 1])
            loop.append(corner(i, j + 1))
            cells.append(loop)
    return Mesh.from_cells(np.array(verts), cells)


def _data_dir():
    return resources.files("wgdd") / "data"


def shipped_levels():
    """Level index (1-based) -> file name of the shipped quad/pentagon meshes."""
    return {lev: f"quadpent_{n}.wgmesh" for lev, n in enumerate(SHIPPED_SIZES, start=1)}


def load_shipped_mesh(level):
    names = shipped_levels()
    if level not in names:
        raise ValueError(f"no shipped polygon mesh for level {level}; available {sorted(names)}")
    with resources.as_file(_data_dir() / names[level]) as path:
        return load_mesh(Path(path))


def main(argv=None):
    ap = argparse.ArgumentParser(description="write the quad/pentagon mesh family")
    ap.add_argument("outdir", type=Path)
    args = ap.parse_args(argv)
    args.outdir.mkdir(parents=True, exist_ok=True)
    for n in SHIPPED_SIZES:
        with open(args.outdir / f"quadpent_{n}.wgmesh", "w") as fh:
            write_mesh(quad_pentagon_mesh(n), fh)


if __name__ == "__main__":
    main()
