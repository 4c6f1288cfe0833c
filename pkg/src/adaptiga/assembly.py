"""Nitsche-type weak forms with ghost and skeleton stabilization, and the linear solve."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discrete import Discretization

DX, DY, D0 = (1, 0), (0, 1), (0, 0)


class AssemblyError(RuntimeError):
    pass


class SolverError(RuntimeError):
    def __init__(self, message: str, pivot: int | None = None, step: int | None = None):
        super().__init__(message)
        self.pivot = pivot
        self.step = step


@dataclass(frozen=True)
class StabilizationParams:
    """Nitsche penalty ``beta``, ghost ``gamma_g`` and pressure skeleton ``gamma_s``.

    Unset ghost parameters default to ``10**-(k+2)`` and ``10**-(k+1)``.
    """

    beta: float = 50.0
    gamma_g: float | None = None
    gamma_s: float | None = None

    def resolve(self, k: int) -> "StabilizationParams":
        gg = 10.0 ** -(k + 2) if self.gamma_g is None else self.gamma_g
        gs = 10.0 ** -(k + 1) if self.gamma_s is None else self.gamma_s
        if self.beta <= 0 or gg < 0 or gs < 0:
            raise ValueError("stabilization parameters must be positive")
        return StabilizationParams(float(self.beta), float(gg), float(gs))


@dataclass
class LaplaceProblem:
    """Source ``f(x, y)``, Dirichlet data ``g(x, y)`` and Neumann flux ``q(x, y, nx, ny)``."""

    f: Callable
    g: Callable
    q: Callable | None = None


@dataclass
class StokesProblem:
    """Vector source, Dirichlet velocity and Neumann traction ``t(x, y, nx, ny)``; each returns a pair."""

    f: Callable
    g: Callable
    t: Callable | None = None
    mu: float = 1.0


def _check_rows(A: sp.csr_matrix, what: str):
    row_size = np.asarray(abs(A).sum(axis=1)).ravel()
    bad = np.flatnonzero(row_size <= 1e-300)
    if bad.size:
        raise AssemblyError(f"{what}: degree of freedom {int(bad[0])} has an empty matrix row")


def _ghost_matrix(disc: Discretization, scale: float, power: int, mask_faces: np.ndarray | None):
    """``sum_F scale * h_F**power * int [d^k_n u][d^k_n v]`` over the selected faces."""
    k = disc.k
    fr = disc.faces()
    if len(fr.w) == 0:
        return sp.csr_matrix((disc.n_dofs, disc.n_dofs))
    mask = None if mask_faces is None else mask_faces[fr.face]
    if mask is not None and not mask.any():
        return sp.csr_matrix((disc.n_dofs, disc.n_dofs))
    J = fr.jump_operator(fr.normal_basis("L", k), fr.normal_basis("R", k), mask)
    wq = fr.w * scale * fr.hq ** power
    wq = wq if mask is None else wq[mask]
    return (J.T @ sp.diags(wq) @ J).tocsr()


def assemble_laplace(problem: LaplaceProblem, disc: Discretization, params: StabilizationParams = None):
    """Matrix and right-hand side of the stabilized Nitsche Laplace problem."""
    k = disc.k
    prm = (params or StabilizationParams()).resolve(k)
    V = disc.volume()
    loc = V.local_matrix(DX, DX) + V.local_matrix(DY, DY)
    bd = disc.boundary()
    if len(bd.w):
        dmask = bd.dirichlet.astype(float)
        B0 = bd.basis(D0)
        Bn = bd.normal_derivative_basis()
        sym = bd.local_matrix(B0, Bn, dmask)
        loc -= sym + sym.transpose(0, 2, 1)
        loc += bd.local_matrix(B0, B0, dmask * prm.beta / bd.h)
    A = disc.globalize(loc)
    A = A + _ghost_matrix(disc, prm.gamma_g, 2 * k - 1, disc.ghost_mask)
    rhs = V.test_integrals(np.asarray(problem.f(V.x[:, 0], V.x[:, 1]), dtype=float) * np.ones(len(V.w)))
    if len(bd.w):
        x, y = bd.x[:, 0], bd.x[:, 1]
        D = bd.dirichlet
        g = np.where(D, np.asarray(problem.g(x, y), dtype=float) * np.ones(len(x)), 0.0)
        rhs -= bd.test_integrals(g, Bn)
        rhs += bd.test_integrals(g * prm.beta / bd.h)
        if (~D).any():
            if problem.q is None:
                raise AssemblyError("Neumann facets present but no flux data given")
            q = np.asarray(problem.q(x, y, bd.n[:, 0], bd.n[:, 1]), dtype=float) * np.ones(len(x))
            rhs += bd.test_integrals(np.where(D, 0.0, q))
    A = A.tocsr()
    _check_rows(A, "laplace")
    return A, disc.globalize_vector(rhs)


def stokes_blocks(problem: StokesProblem, disc: Discretization, params: StabilizationParams = None):
    """Blocks ``(A1, B, A3)`` with ``A1`` the 2x2 velocity block."""
    k = disc.k
    mu = float(problem.mu)
    if mu <= 0:
        raise ValueError("viscosity must be positive")
    prm = (params or StabilizationParams()).resolve(k)
    V = disc.volume()
    dirs = (DX, DY)
    lm = {(a, b): V.local_matrix(dirs[a], dirs[b]) for a in range(2) for b in range(2)}
    lap = lm[0, 0] + lm[1, 1]
    a1 = [[None, None], [None, None]]
    bd = disc.boundary()
    has_bd = len(bd.w) > 0
    if has_bd:
        dm = bd.dirichlet.astype(float)
        B0 = bd.basis(D0)
        Bn = bd.normal_derivative_basis()
        Bd = (bd.basis(DX), bd.basis(DY))
        n = bd.n
        mass_pen = bd.local_matrix(B0, B0, dm * prm.beta * mu / bd.h)
        phi_dn = bd.local_matrix(B0, Bn, dm * mu)
    for l in range(2):
        for i in range(2):
            loc = mu * lm[i, l] + (mu * lap if i == l else 0.0)
            if has_bd:
                cons = bd.local_matrix(B0, Bd[l], dm * mu * n[:, i])
                if i == l:
                    cons = cons + phi_dn
                loc = loc - cons - bd.local_matrix(B0, Bd[i], dm * mu * n[:, l]).transpose(0, 2, 1)
                if i == l:
                    loc = loc - phi_dn.transpose(0, 2, 1) + mass_pen
            a1[l][i] = disc.globalize(loc)
    G = _ghost_matrix(disc, prm.gamma_g * mu, 2 * k - 1, disc.ghost_mask)
    a1[0][0] = a1[0][0] + G
    a1[1][1] = a1[1][1] + G
    Bblk = []
    for l in range(2):
        loc = -V.local_matrix(dirs[l], D0)
        if has_bd:
            loc = loc + bd.local_matrix(B0, B0, dm * n[:, l])
        Bblk.append(disc.globalize(loc))
    A3 = _ghost_matrix(disc, prm.gamma_s / mu, 2 * k + 1, None)
    return a1, Bblk, A3


def assemble_stokes(problem: StokesProblem, disc: Discretization, params: StabilizationParams = None):
    """Symmetric saddle-point system ``[[A1, B], [B^T, -A3]]`` on (u1, u2, p)."""
    k = disc.k
    mu = float(problem.mu)
    prm = (params or StabilizationParams()).resolve(k)
    a1, Bblk, A3 = stokes_blocks(problem, disc, params)
    Bfull = sp.vstack(Bblk)
    A = sp.bmat([[a1[0][0], a1[0][1], Bblk[0]],
                 [a1[1][0], a1[1][1], Bblk[1]],
                 [Bblk[0].T, Bblk[1].T, -A3]], format="csr")
    del Bfull
    V = disc.volume()
    fx, fy = problem.f(V.x[:, 0], V.x[:, 1])
    n_pts = len(V.w)
    rv = [V.test_integrals(np.asarray(fx, dtype=float) * np.ones(n_pts)),
          V.test_integrals(np.asarray(fy, dtype=float) * np.ones(n_pts))]
    rq = np.zeros((disc.n_el, disc.nb))
    bd = disc.boundary()
    if len(bd.w):
        x, y = bd.x[:, 0], bd.x[:, 1]
        D = bd.dirichlet
        n = bd.n
        gx, gy = problem.g(x, y)
        g = [np.where(D, np.asarray(gx, dtype=float) * np.ones(len(x)), 0.0),
             np.where(D, np.asarray(gy, dtype=float) * np.ones(len(x)), 0.0)]
        Bdx, Bdy = bd.basis(DX), bd.basis(DY)
        gdotgrad = Bdx * g[0][:, None] + Bdy * g[1][:, None]
        Bn = bd.normal_derivative_basis()
        B0 = bd.basis(D0)
        for l in range(2):
            rv[l] += bd.test_integrals(g[l] * prm.beta * mu / bd.h)
            rv[l] -= bd.test_integrals(mu * g[l], Bn)
            rv[l] -= _reduce_weighted(bd, gdotgrad * (mu * n[:, l])[:, None])
        rq += bd.test_integrals(g[0] * n[:, 0] + g[1] * n[:, 1], B0)
        if (~D).any():
            if problem.t is None:
                raise AssemblyError("Neumann facets present but no traction given")
            tx, ty = problem.t(x, y, n[:, 0], n[:, 1])
            rv[0] += bd.test_integrals(np.where(D, 0.0, np.asarray(tx, dtype=float) * np.ones(len(x))))
            rv[1] += bd.test_integrals(np.where(D, 0.0, np.asarray(ty, dtype=float) * np.ones(len(x))))
    rhs = np.concatenate([disc.globalize_vector(rv[0]), disc.globalize_vector(rv[1]),
                          disc.globalize_vector(rq)])
    _check_rows(a1[0][0], "stokes velocity")
    return A, rhs


def _reduce_weighted(bd, arr):
    from .discrete import _reduce_groups
    return _reduce_groups(arr * bd.w[:, None], bd.ptr)


def solve(A: sp.spmatrix, b: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Sparse LU solve with a singularity check on the pivots and a residual check."""
    A = sp.csc_matrix(A)
    n = A.shape[0]
    if A.shape != (n, n) or b.shape != (n,):
        raise ValueError("dimension mismatch")
    if n == 0:
        return np.zeros(0)
    try:
        lu = spla.splu(A, permc_spec="COLAMD", diag_pivot_thresh=1.0)
    except RuntimeError as exc:
        raise SolverError(f"sparse factorization failed: {exc}") from exc
    d = np.abs(lu.U.diagonal())
    scale = np.abs(A).max()
    small = np.flatnonzero(d <= 1e-13 * scale)
    if small.size:
        raise SolverError(f"matrix is numerically singular (pivot {int(small[0])})", int(small[0]))
    x = lu.solve(b)
    bn = max(np.linalg.norm(b), 1e-300)
    for _ in range(3):
        r = b - A @ x
        if np.linalg.norm(r) <= tol * bn:
            break
        x = x + lu.solve(r)
    res = np.linalg.norm(b - A @ x) / bn
    if not np.all(np.isfinite(x)) or (np.linalg.norm(b) > 0 and res > tol):
        raise SolverError(f"relative residual {res:.3e} above tolerance {tol:g}")
    return x
