"""Dörfler marking, refinement masks and the solve-estimate-mark-refine loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import assembly, estimate
from .discrete import Discretization
from .geom import Geometry, LevelSet
from .hmesh import AmbientGrid, ElementRef, HierMesh, build_background, refine
from .thb import ThbBasis, build_basis

log = logging.getLogger(__name__)


def dorfler_mark(eta: np.ndarray, lam: float = 0.8) -> np.ndarray:
    """Smallest set of element indices carrying a ``lam**2`` share of the squared estimator.

    Elements are ranked by decreasing indicator, ties by element index.
    """
    if not 0.0 < lam <= 1.0:
        raise ValueError(f"marking fraction must lie in (0, 1], got {lam}")
    eta = np.asarray(eta, dtype=float)
    if np.any(eta < 0) or not np.all(np.isfinite(eta)):
        raise ValueError("indicators must be finite and non-negative")
    total = float(np.sum(eta ** 2))
    if total == 0.0:
        return np.zeros(0, dtype=int)
    order = np.lexsort((np.arange(eta.size), -eta))
    cum = np.cumsum(eta[order] ** 2)
    n = int(np.searchsorted(cum, lam ** 2 * total * (1 - 1e-14), side="left")) + 1
    return np.sort(order[:min(n, eta.size)])


def support_extension(basis: ThbBasis, K: ElementRef) -> set[ElementRef]:
    """Union of the supports of all THB functions that do not vanish on ``K``."""
    inc = basis.element_function_incidence()
    e = basis.mesh.index(K)
    funcs = inc[e].indices
    cols = inc.tocsc()[:, funcs]
    rows = np.unique(cols.indices)
    els = basis.elements
    return {els[r] for r in rows}


def refinement_mask(mesh: HierMesh, basis: ThbBasis, marked) -> list[ElementRef]:
    """Marked elements grown by their support extensions, restricted to equal or coarser levels."""
    inc = basis.element_function_incidence()
    S = (inc @ inc.T).tocsr()
    els = mesh.elements()
    out = set()
    for K in marked:
        e = mesh.index(K)
        for r in S.indices[S.indptr[e]:S.indptr[e + 1]]:
            L = els[r]
            if L.level <= K.level:
                out.add(L)
    return sorted((L for L in out if mesh.rho(L) > 0), key=ElementRef.sort_key)


@dataclass
class StepResult:
    mesh: HierMesh
    disc: Discretization
    solution: np.ndarray
    indicators: estimate.Indicators
    report: estimate.ErrorReport


@dataclass
class Simulation:
    """One boundary value problem on an immersed domain, ready to be solved on any mesh."""

    kind: str
    grid: AmbientGrid
    levelset: LevelSet
    problem: object
    k: int
    rho0: int
    tagger: Callable | None = None
    params: assembly.StabilizationParams = field(default_factory=assembly.StabilizationParams)
    exact: object = None
    name: str = "simulation"

    def __post_init__(self):
        if self.kind not in ("laplace", "stokes"):
            raise ValueError(f"unknown problem kind {self.kind!r}")
        self.geometry = Geometry(self.levelset, self.grid, self.rho0)

    def initial_mesh(self) -> HierMesh:
        return build_background(self.grid, self.geometry.classify, self.rho0)

    def discretize(self, mesh: HierMesh) -> Discretization:
        return Discretization(mesh, build_basis(mesh, self.k), self.geometry, self.tagger)

    def solve(self, mesh: HierMesh) -> StepResult:
        disc = self.discretize(mesh)
        if self.kind == "laplace":
            A, b = assembly.assemble_laplace(self.problem, disc, self.params)
            x = assembly.solve(A, b)
            ind = estimate.laplace_indicators(disc, self.problem, x, self.params)
            errs = estimate.laplace_errors(disc, self.exact, x, self.params) if self.exact else {}
            n = disc.n_dofs
        else:
            A, b = assembly.assemble_stokes(self.problem, disc, self.params)
            x = assembly.solve(A, b)
            ind = estimate.stokes_indicators(disc, self.problem, x, self.params)
            errs = (estimate.stokes_errors(disc, self.exact, x, self.problem.mu, self.params)
                    if self.exact else {})
            n = 3 * disc.n_dofs
        report = estimate.ErrorReport(n, ind.estimator, **errs)
        return StepResult(mesh, disc, x, ind, report)


@dataclass
class StepRecord:
    step: int
    n_dofs: int
    estimator: float
    err_L2: float
    err_H1: float
    err_energy: float
    n_marked: int
    n_refined: int
    err_p_L2: float = float("nan")


SUMMARY_COLUMNS = ("step", "n_dofs", "estimator", "err_L2", "err_H1", "err_energy", "n_marked", "n_refined")


@dataclass
class LoopResult:
    records: list
    final: StepResult
    stop_reason: str


def adaptive_loop(sim: Simulation, max_steps: int, lam: float = 0.8, tol: float = 1e-10,
                  mesh: HierMesh | None = None, mode: str = "adaptive", on_step=None) -> LoopResult:
    """Solve, estimate, mark, refine until the step budget, the tolerance or the depth runs out.

    ``mode="uniform"`` refines every refinable element instead of marking.
    """
    if max_steps < 0:
        raise ValueError("max_steps must be non-negative")
    mesh = mesh or sim.initial_mesh()
    records = []
    reason = "max_steps"
    for step in range(max_steps + 1):
        try:
            res = sim.solve(mesh)
        except assembly.SolverError as exc:
            raise assembly.SolverError(f"step {step}: {exc}", exc.pivot, step) from exc
        rep = res.report
        rec = StepRecord(step, rep.n_dofs, rep.estimator, rep.err_L2, rep.err_H1, rep.err_energy, 0, 0,
                         rep.err_p_L2)
        records.append(rec)
        log.info("step %d: dofs=%d estimator=%.6e energy=%.6e", step, rep.n_dofs, rep.estimator, rep.err_energy)
        if on_step is not None:
            on_step(rec, res)
        if step == max_steps:
            break
        if rep.estimator < tol:
            reason = "tolerance"
            break
        if mode == "uniform":
            marked_idx = np.arange(len(mesh.elements()))
            targets = [K for K in mesh.elements() if mesh.rho(K) > 0]
        else:
            marked_idx = dorfler_mark(res.indicators.eta, lam)
            marked = [mesh.elements()[e] for e in marked_idx]
            targets = refinement_mask(mesh, res.disc.basis, marked)
        rec.n_marked = int(len(marked_idx))
        rec.n_refined = len(targets)
        if not targets:
            reason = "depth_exhausted"
            break
        mesh = refine(mesh, targets)
    return LoopResult(records, res, reason)


def write_summary(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for r in records:
            w.writerow([r.step, r.n_dofs] + [f"{v:.17g}" for v in (r.estimator, r.err_L2, r.err_H1, r.err_energy)]
                       + [r.n_marked, r.n_refined])
