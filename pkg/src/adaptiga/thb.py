"""Truncated hierarchical B-splines on uniform dyadic grids.

Level ``l`` carries the tensor B-splines of degree ``k`` on the uniform grid of
that level, extended past the ambient box so every spline touching the box is
a translate of the same cardinal B-spline.  The spline with index ``s`` along
an axis is supported on cells ``s .. s + k``; indices run from ``-k`` to
``n - 1``.

The basis is stored as an element extraction operator: for each active
element the restriction of every THB function is a tensor Bernstein
polynomial on the element, and ``ThbBasis.extraction`` maps THB coefficients
to the stacked Bernstein coefficients of all elements.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import comb, factorial
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .hmesh import ElementRef, HierMesh

COEFF_TOL = 1e-13


class UnivariateBspline(NamedTuple):
    """Cardinal B-spline of one level; knots ``origin + (index + m) * spacing``."""

    level: int
    degree: int
    index: int
    origin: float = 0.0
    base_spacing: float = 1.0

    @property
    def spacing(self) -> float:
        return self.base_spacing / 2 ** self.level

    @property
    def knots(self) -> np.ndarray:
        m = np.arange(self.degree + 2)
        return self.origin + (self.index + m) * self.spacing


def cox_de_boor(knots, degree: int, x, order: int = 0) -> np.ndarray:
    """Value or derivative of the B-spline on ``knots`` (length degree + 2)."""
    knots = np.asarray(knots, dtype=float)
    x = np.asarray(x, dtype=float)
    if order > degree:
        return np.zeros_like(x)
    if order > 0:
        out = np.zeros_like(x)
        d = knots[degree] - knots[0]
        if d > 0:
            out += degree / d * cox_de_boor(knots[:-1], degree - 1, x, order - 1)
        d = knots[degree + 1] - knots[1]
        if d > 0:
            out -= degree / d * cox_de_boor(knots[1:], degree - 1, x, order - 1)
        return out
    if degree == 0:
        return ((x >= knots[0]) & (x < knots[1])).astype(float)
    out = np.zeros_like(x)
    d = knots[degree] - knots[0]
    if d > 0:
        out += (x - knots[0]) / d * cox_de_boor(knots[:-1], degree - 1, x)
    d = knots[degree + 1] - knots[1]
    if d > 0:
        out += (knots[degree + 1] - x) / d * cox_de_boor(knots[1:], degree - 1, x)
    return out


def eval_univariate(b: UnivariateBspline, x, order: int = 0) -> np.ndarray:
    """Evaluate a univariate B-spline or one of its derivatives."""
    if order < 0:
        raise ValueError("derivative order must be non-negative")
    if order > b.degree:
        raise ValueError(f"derivative order {order} exceeds degree {b.degree}")
    return cox_de_boor(b.knots, b.degree, x, order)


@lru_cache(maxsize=None)
def _bernstein_monomials(k: int) -> np.ndarray:
    """Row ``i`` holds the monomial coefficients (increasing powers) of B_{i,k}."""
    out = np.zeros((k + 1, k + 1))
    for i in range(k + 1):
        for m in range(k - i + 1):
            out[i, i + m] = comb(k, i) * comb(k - i, m) * (-1) ** m
    return out


def bernstein_1d(k: int, t, order: int = 0) -> np.ndarray:
    """Derivatives of the degree-k Bernstein polynomials on [0, 1]; shape (len(t), k+1)."""
    t = np.asarray(t, dtype=float).ravel()
    coef = _bernstein_monomials(k)
    if order > k:
        return np.zeros((t.size, k + 1))
    powers = np.arange(k + 1)
    fac = np.array([factorial(p) / factorial(p - order) if p >= order else 0.0 for p in powers])
    dcoef = coef * fac
    V = np.zeros((t.size, k + 1))
    V[:, order] = 1.0
    for p in range(order + 1, k + 1):
        V[:, p] = V[:, p - 1] * t
    return V @ dcoef.T


def bernstein_tensor(k: int, xi, eta, dx: int = 0, dy: int = 0) -> np.ndarray:
    """Tensor Bernstein basis derivatives on the unit square, local index ``bx + (k+1) * by``."""
    bx = bernstein_1d(k, xi, dx)
    by = bernstein_1d(k, eta, dy)
    return (by[:, :, None] * bx[:, None, :]).reshape(bx.shape[0], (k + 1) ** 2)


@lru_cache(maxsize=None)
def bspline_to_bernstein(k: int) -> np.ndarray:
    """Matrix M with local B-spline ``a`` on a cell equal to ``sum_b M[a, b] B_b``.

    Local spline ``a`` is the cardinal spline whose support starts ``k - a``
    cells to the left, so its piece on the cell is piece number ``k - a``.
    """
    t = (np.arange(k + 1) + 0.5) / (k + 1)
    knots = np.arange(k + 2, dtype=float)
    B = bernstein_1d(k, t)
    M = np.empty((k + 1, k + 1))
    for a in range(k + 1):
        vals = cox_de_boor(knots, k, t + (k - a))
        M[a] = np.linalg.solve(B, vals)
    M[np.abs(M) < 1e-15] = 0.0
    return M


def two_scale_1d(n_coarse: int, k: int) -> sp.csr_matrix:
    """Coarse splines (rows, indices -k..n-1) in terms of fine ones (indices -k..2n-1)."""
    rows, cols, vals = [], [], []
    w = [comb(k + 1, a) / 2 ** k for a in range(k + 2)]
    for s in range(-k, n_coarse):
        for a in range(k + 2):
            t = 2 * s + a
            if -k <= t <= 2 * n_coarse - 1:
                rows.append(s + k)
                cols.append(t + k)
                vals.append(w[a])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n_coarse + k, 2 * n_coarse + k))


def two_scale_2d(shape, k: int) -> sp.csr_matrix:
    nx, ny = shape
    return sp.kron(two_scale_1d(ny, k), two_scale_1d(nx, k), format="csr")


def _window(mask: np.ndarray, k: int, pad_value: bool, mode: str) -> np.ndarray:
    """For every spline index, test all/any over the cells of its support.

    ``mask`` is indexed [j, i]; the result has shape (ny + k, nx + k) and
    cells outside the box take ``pad_value``.
    """
    padded = np.pad(mask.astype(np.int64), k, constant_values=int(pad_value))
    S = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1), dtype=np.int64)
    S[1:, 1:] = padded.cumsum(0).cumsum(1)
    w = k + 1
    tot = S[w:, w:] - S[:-w, w:] - S[w:, :-w] + S[:-w, :-w]
    if mode == "all":
        return tot == w * w
    return tot > 0


def contained_splines(region: np.ndarray, k: int) -> np.ndarray:
    """Splines whose support, clipped to the box, lies inside ``region``."""
    return _window(region, k, True, "all")


def touching_splines(region: np.ndarray, k: int) -> np.ndarray:
    return _window(region, k, False, "any")


def truncate(coarse: np.ndarray, finer_region: np.ndarray, k: int) -> np.ndarray:
    """Truncate level-l spline coefficients against a finer active region.

    ``coarse`` has shape (ny + k, nx + k) for a level with (nx, ny) cells and
    ``finer_region`` marks level-(l+1) cells, shape (2 ny, 2 nx).  Returns the
    level-(l+1) coefficients with children supported in the region removed.
    """
    coarse = np.asarray(coarse, dtype=float)
    ny, nx = coarse.shape[0] - k, coarse.shape[1] - k
    if finer_region.shape != (2 * ny, 2 * nx):
        raise ValueError("finer region has the wrong shape")
    fine = two_scale_1d(ny, k).T @ coarse @ two_scale_1d(nx, k)
    fine = np.asarray(fine)
    fine[contained_splines(finer_region, k)] = 0.0
    return fine


class ThbFunction(NamedTuple):
    level: int
    i: int
    j: int
    truncated: bool


class ThbBasis:
    """THB basis on an active hierarchical mesh.

    ``extraction`` has one row per (element, local Bernstein index) and one
    column per THB function; element order follows ``mesh.elements()``.
    """

    def __init__(self, mesh: HierMesh, k: int, functions, extraction: sp.csr_matrix):
        self.mesh = mesh
        self.k = k
        self.nb = (k + 1) ** 2
        self.functions = tuple(functions)
        self.extraction = extraction
        self._csc = None
        self._incidence = None

    @property
    def n_dofs(self) -> int:
        return len(self.functions)

    @property
    def elements(self) -> list[ElementRef]:
        return self.mesh.elements()

    def element_rows(self, e: int) -> slice:
        return slice(e * self.nb, (e + 1) * self.nb)

    def incidence(self, K: ElementRef):
        """THB function ids nonzero on ``K`` and their Bernstein blocks (n, k+1, k+1) indexed [by, bx]."""
        e = self.mesh.index(K)
        blk = self.extraction[self.element_rows(e)].tocsr()
        ids = np.unique(blk.indices)
        dense = blk[:, ids].toarray().T
        return ids, dense.reshape(len(ids), self.k + 1, self.k + 1)

    def element_function_incidence(self) -> sp.csr_matrix:
        """Boolean (n_elements, n_dofs) matrix: function nonzero on element."""
        if self._incidence is None:
            n_el = len(self.elements)
            C = self.extraction.tocoo()
            inc = sp.csr_matrix((np.ones(C.nnz), (C.row // self.nb, C.col)), shape=(n_el, self.n_dofs))
            inc.data[:] = 1.0
            self._incidence = inc
        return self._incidence

    def support(self, fid: int) -> list[ElementRef]:
        inc = self.element_function_incidence().tocsc()
        rows = inc.indices[inc.indptr[fid]:inc.indptr[fid + 1]]
        return [self.elements[e] for e in np.sort(rows)]

    def counts_per_level(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for f in self.functions:
            out[f.level] = out.get(f.level, 0) + 1
        return out


def eval_basis(basis: ThbBasis, K: ElementRef, x, orders=((0, 0),)):
    """Values of all THB functions nonzero on ``K`` at the point ``x``.

    Returns ``(ids, {order: array})`` with one entry per requested
    derivative order ``(dx, dy)``.
    """
    (x0, y0), (x1, y1) = basis.mesh.box(K)
    px, py = float(x[0]), float(x[1])
    tol = 1e-12 * max(x1 - x0, y1 - y0)
    if not (x0 - tol <= px <= x1 + tol and y0 - tol <= py <= y1 + tol):
        raise ValueError(f"point {x} is not in element {K}")
    hx, hy = x1 - x0, y1 - y0
    ids, blocks = basis.incidence(K)
    coeffs = blocks.reshape(len(ids), -1)
    out = {}
    for dx, dy in orders:
        if dx > basis.k or dy > basis.k:
            raise ValueError(f"derivative order {(dx, dy)} exceeds degree {basis.k}")
        B = bernstein_tensor(basis.k, [(px - x0) / hx], [(py - y0) / hy], dx, dy)[0]
        out[(dx, dy)] = coeffs @ B / (hx ** dx * hy ** dy)
    return ids, out


def build_basis(mesh: HierMesh, k: int) -> ThbBasis:
    """Select and truncate hierarchical splines, then extract element blocks.

    A level-l spline is selected when its support (clipped to the ambient
    box) lies in the level-l territory but not entirely in the level-(l+1)
    territory.  Territories include void cells, so the immersed boundary does
    not remove fine splines.  Splines that vanish on every active element are
    dropped.
    """
    if k < 1:
        raise ValueError("degree must be at least 1")
    grid = mesh.grid
    nb = (k + 1) ** 2
    Mk = np.kron(bspline_to_bernstein(k), bspline_to_bernstein(k))
    L = mesh.n_levels
    T = None
    funcs: list[tuple[int, int, int]] = []
    truncated: list[bool] = []
    blocks = []
    for m in range(L):
        nx, ny = grid.level_shape(m)
        ncols = (nx + k) * (ny + k)
        contained = contained_splines(mesh.territory(m), k)
        into_next = contained_splines(mesh.next_territory(m), k)
        sel = (contained & ~into_next).ravel()
        sel_idx = np.flatnonzero(sel)
        if T is not None:
            T = T @ two_scale_2d(grid.level_shape(m - 1), k)
            drop = contained.ravel()
            hit = T[:, np.flatnonzero(drop)]
            hit.eliminate_zeros()
            hit_rows = np.unique(hit.tocoo().row[np.abs(hit.tocoo().data) > COEFF_TOL])
            for r in hit_rows:
                truncated[r] = True
            T = (T @ sp.diags((~drop).astype(float))).tocsr()
        new = sp.csr_matrix((np.ones(sel_idx.size), (np.arange(sel_idx.size), sel_idx)),
                            shape=(sel_idx.size, ncols))
        T = new if T is None else sp.vstack([T, new], format="csr")
        stride = nx + k
        for s in sel_idx:
            funcs.append((m, int(s % stride) - k, int(s // stride) - k))
            truncated.append(False)
        T.data[np.abs(T.data) < COEFF_TOL] = 0.0
        T.eliminate_zeros()
        # extraction on the active elements of this level
        jj, ii = np.nonzero(mesh.status[m] == 1)
        if ii.size:
            a = np.arange(k + 1)
            cols = ((ii[:, None, None] + a[None, None, :])
                    + stride * (jj[:, None, None] + a[None, :, None])).reshape(-1)
            G = T[:, cols].T.tocsr()
            blocks.append(sp.kron(sp.identity(ii.size), sp.csr_matrix(Mk.T), format="csr") @ G)
        # keep only splines that reach the refined region of this level
        if m + 1 < L:
            keep = touching_splines(mesh.refined_mask(m), k).ravel()
            T = (T @ sp.diags(keep.astype(float))).tocsr()
            T.eliminate_zeros()
    n_total = len(funcs)
    blocks = [b if b.shape[1] == n_total else sp.hstack(
        [b, sp.csr_matrix((b.shape[0], n_total - b.shape[1]))], format="csr") for b in blocks]
    C = sp.vstack(blocks, format="csr")
    C.data[np.abs(C.data) < COEFF_TOL] = 0.0
    C.eliminate_zeros()
    used = np.flatnonzero(np.diff(C.tocsc().indptr) > 0)
    C = C[:, used].tocsr()
    functions = [ThbFunction(*funcs[u], truncated[u]) for u in used]
    assert C.shape[0] == len(mesh.elements()) * nb
    return ThbBasis(mesh, k, functions, C)
