"""Mesh and discretization builders shared by the test modules."""

import numpy as np

from adaptiga.discrete import Discretization
from adaptiga.geom import Geometry, LevelSet, disk_levelset
from adaptiga.hmesh import INSIDE, AmbientGrid, build_background, refine
from adaptiga.thb import build_basis


def everywhere_inside(level, i, j):
    return INSIDE


def uniform_mesh(n, bbox=((0.0, 0.0), (1.0, 1.0)), rho0=4):
    return build_background(AmbientGrid(bbox, (n, n)), everywhere_inside, rho0)


def random_refinement(mesh, rng, rounds=3, fraction=0.3):
    """Refine a random subset of the refinable elements ``rounds`` times."""
    for _ in range(rounds):
        cand = [K for K in mesh.elements() if mesh.rho(K) > 0]
        if not cand:
            break
        pick = rng.random(len(cand)) < fraction
        if not pick.any():
            pick[rng.integers(len(cand))] = True
        mesh = refine(mesh, [K for K, p in zip(cand, pick) if p])
    return mesh


def full_box_levelset():
    return LevelSet(lambda x, y: np.ones(np.broadcast(x, y).shape), name="box")


def fitted_discretization(n, k, rho0=3, tagger=None, mesh_fn=None):
    """Domain equal to the unit ambient box; its edges become boundary facets."""
    grid = AmbientGrid(((0.0, 0.0), (1.0, 1.0)), (n, n))
    geom = Geometry(full_box_levelset(), grid, rho0)
    mesh = build_background(grid, geom.classify, rho0)
    if mesh_fn is not None:
        mesh = mesh_fn(mesh)
    return Discretization(mesh, build_basis(mesh, k), geom, tagger)


def disk_discretization(n, k, radius=0.37, center=(0.5, 0.5), rho0=4, bbox=((0.0, 0.0), (1.0, 1.0))):
    grid = AmbientGrid(bbox, (n, n))
    geom = Geometry(disk_levelset(radius, center), grid, rho0)
    mesh = build_background(grid, geom.classify, rho0)
    return Discretization(mesh, build_basis(mesh, k), geom)


ACCEPTANCE_LINES = []


def report(label, ok, detail):
    """Record one pass/fail line for the acceptance summary, then assert."""
    line = f"criterion {label}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line
