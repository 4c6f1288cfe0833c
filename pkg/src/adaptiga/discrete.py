"""Quadrature data and element-local evaluation shared by assembly and estimation.

Every element uses the same local basis, the tensor Bernstein polynomials of
degree ``k`` on its box.  Fields are handled as element-local coefficient
arrays ``U_loc`` of shape (n_elements, nb) obtained from THB coefficients via
the extraction operator, and global matrices are formed as
``C.T @ blockdiag(local) @ C``.
"""

from __future__ import annotations

from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .geom import DIRICHLET, BoundaryFacet, Geometry, gauss_01, gauss_square
from .hmesh import CUT, FaceSet, HierMesh, ghost_faces, skeleton_faces
from .thb import ThbBasis, bernstein_tensor

def _segment_outer(ptr: np.ndarray, A: np.ndarray, B: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Sum of ``w_q A_q B_q^T`` over contiguous point groups delimited by ``ptr``."""
    n_groups = len(ptr) - 1
    out = np.zeros((n_groups, A.shape[1], B.shape[1]))
    limit = max(1, 4_000_000 // (A.shape[1] * B.shape[1]))
    g0 = 0
    while g0 < n_groups:
        g1 = int(np.searchsorted(ptr, ptr[g0] + limit, side="right")) - 1
        g1 = min(n_groups, max(g1, g0 + 1))
        p0, p1 = ptr[g0], ptr[g1]
        if p1 > p0:
            prod = (A[p0:p1] * w[p0:p1, None])[:, :, None] * B[p0:p1, None, :]
            nonempty = ptr[g0 + 1:g1 + 1] > ptr[g0:g1]
            out[g0:g1][nonempty] = np.add.reduceat(prod, (ptr[g0:g1] - p0)[nonempty], axis=0)
        g0 = g1
    return out


class VolumeRule:
    """Volume quadrature over the active mesh restricted to the domain.

    Uncut elements share a reference tensor Gauss rule; cut elements carry
    explicit points.  Flat arrays list regular points first, element by
    element, then cut points.
    """

    def __init__(self, disc: "Discretization", order: int):
        self.disc = disc
        self.order = order
        k = disc.k
        self.k = k
        cut = disc.cut
        self.regular = np.flatnonzero(~cut)
        self.cutel = np.flatnonzero(cut)
        self.ref_xi, self.ref_w = gauss_square(order)
        nq = len(self.ref_w)
        self.nq = nq
        pts, wts, counts = [], [], []
        for e in self.cutel:
            p, w = disc.tessellations[e].volume_rule(order)
            keep = w > 0
            pts.append(p[keep])
            wts.append(w[keep])
            counts.append(int(keep.sum()))
        self.cut_x = np.vstack(pts) if pts else np.zeros((0, 2))
        self.cut_w = np.concatenate(wts) if wts else np.zeros(0)
        self.cut_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(int)
        self.cut_elem = np.repeat(self.cutel, counts)
        org, size = disc.origin, disc.size
        self.cut_xi = (self.cut_x - org[self.cut_elem]) / size[self.cut_elem]
        reg_x = org[self.regular, None, :] + self.ref_xi[None] * size[self.regular, None, :]
        reg_w = self.ref_w[None, :] * (size[self.regular, 0] * size[self.regular, 1])[:, None]
        self.x = np.vstack([reg_x.reshape(-1, 2), self.cut_x])
        self.w = np.concatenate([reg_w.ravel(), self.cut_w])
        self.elem = np.concatenate([np.repeat(self.regular, nq), self.cut_elem])
        self._ref = {}
        self._cut = {}

    def ref_basis(self, d):
        if d not in self._ref:
            self._ref[d] = bernstein_tensor(self.k, self.ref_xi[:, 0], self.ref_xi[:, 1], *d)
        return self._ref[d]

    def cut_basis(self, d):
        """Physical derivatives of the local basis at cut points, shape (Nc, nb)."""
        if d not in self._cut:
            B = bernstein_tensor(self.k, self.cut_xi[:, 0], self.cut_xi[:, 1], *d)
            self._cut[d] = B / self.disc.scale(d)[self.cut_elem][:, None]
        return self._cut[d]

    def evaluate(self, U_loc: np.ndarray, d=(0, 0)) -> np.ndarray:
        reg = (U_loc[self.regular] @ self.ref_basis(d).T) / self.disc.scale(d)[self.regular][:, None]
        cut = np.einsum("qb,qb->q", U_loc[self.cut_elem], self.cut_basis(d))
        return np.concatenate([reg.ravel(), cut])

    def test_integrals(self, values: np.ndarray, d=(0, 0)) -> np.ndarray:
        """``int v d^d phi_b`` on every element, shape (n_el, nb)."""
        disc = self.disc
        out = np.zeros((disc.n_el, disc.nb))
        nreg = self.regular.size * self.nq
        vr = (values[:nreg] * self.w[:nreg]).reshape(-1, self.nq)
        out[self.regular] = (vr @ self.ref_basis(d)) / disc.scale(d)[self.regular][:, None]
        vc = values[nreg:] * self.cut_w
        contrib = self.cut_basis(d) * vc[:, None]
        if len(self.cutel):
            out[self.cutel] = _reduce_groups(contrib, self.cut_ptr)
        return out

    def local_matrix(self, d1, d2) -> np.ndarray:
        """``int d^d1 phi_a d^d2 phi_b`` per element, shape (n_el, nb, nb)."""
        disc = self.disc
        out = np.zeros((disc.n_el, disc.nb, disc.nb))
        R1, R2 = self.ref_basis(d1), self.ref_basis(d2)
        ref = (R1 * self.ref_w[:, None]).T @ R2
        size = disc.size[self.regular]
        fac = size[:, 0] * size[:, 1] / (disc.scale(d1)[self.regular] * disc.scale(d2)[self.regular])
        out[self.regular] = ref[None] * fac[:, None, None]
        if len(self.cutel):
            out[self.cutel] = _segment_outer(self.cut_ptr, self.cut_basis(d1), self.cut_basis(d2), self.cut_w)
        return out

    def element_sums(self, values: np.ndarray) -> np.ndarray:
        return np.bincount(self.elem, weights=values * self.w, minlength=self.disc.n_el)


def _reduce_groups(arr: np.ndarray, ptr: np.ndarray) -> np.ndarray:
    out = np.zeros((len(ptr) - 1,) + arr.shape[1:])
    nonempty = ptr[1:] > ptr[:-1]
    if nonempty.any():
        out[nonempty] = np.add.reduceat(arr, ptr[:-1][nonempty], axis=0)
    return out


class BoundaryRule:
    """Gauss points on all boundary facets, grouped by element."""

    def __init__(self, disc: "Discretization", order: int):
        self.disc = disc
        self.k = disc.k
        t, wt = gauss_01(order)
        nq = len(t)
        self.facets: list[BoundaryFacet] = [f for facets in disc.facets for f in facets]
        nf = len(self.facets)
        fel = np.repeat(np.arange(disc.n_el), [len(fs) for fs in disc.facets]).astype(int)
        if nf:
            P0 = np.array([f.p0 for f in self.facets], dtype=float)
            P1 = np.array([f.p1 for f in self.facets], dtype=float)
            N = np.array([f.normal for f in self.facets], dtype=float)
            D = np.array([f.tag == DIRICHLET for f in self.facets])
        else:
            P0 = P1 = N = np.zeros((0, 2))
            D = np.zeros(0, dtype=bool)
        L = np.linalg.norm(P1 - P0, axis=1)
        self.x = (P0[:, None, :] + t[None, :, None] * (P1 - P0)[:, None, :]).reshape(-1, 2)
        self.w = (L[:, None] * wt[None, :]).ravel()
        self.n = np.repeat(N, nq, axis=0)
        self.elem = np.repeat(fel, nq)
        self.dirichlet = np.repeat(D, nq)
        self.facet_id = np.repeat(np.arange(nf), nq)
        counts = np.bincount(fel, minlength=disc.n_el) * nq
        self.ptr = np.concatenate([[0], np.cumsum(counts)]).astype(int)
        self.xi = (self.x - disc.origin[self.elem]) / disc.size[self.elem] if len(self.x) else np.zeros((0, 2))
        self.h = disc.h[self.elem]
        self._basis = {}

    def basis(self, d):
        if d not in self._basis:
            B = bernstein_tensor(self.k, self.xi[:, 0], self.xi[:, 1], *d)
            self._basis[d] = B / self.disc.scale(d)[self.elem][:, None]
        return self._basis[d]

    def normal_derivative_basis(self):
        return self.basis((1, 0)) * self.n[:, :1] + self.basis((0, 1)) * self.n[:, 1:]

    def evaluate(self, U_loc, d=(0, 0)):
        return np.einsum("qb,qb->q", U_loc[self.elem], self.basis(d))

    def normal_derivative(self, U_loc):
        return self.evaluate(U_loc, (1, 0)) * self.n[:, 0] + self.evaluate(U_loc, (0, 1)) * self.n[:, 1]

    def test_integrals(self, values, B=None):
        B = self.basis((0, 0)) if B is None else B
        return _reduce_groups(B * (values * self.w)[:, None], self.ptr)

    def local_matrix(self, A, B, coef):
        return _segment_outer(self.ptr, A, B, self.w * coef)

    def element_sums(self, values):
        return np.bincount(self.elem, weights=values * self.w, minlength=self.disc.n_el)


class FaceRule:
    """Gauss points on skeleton faces with the local coordinates of both neighbours."""

    def __init__(self, disc: "Discretization", faces: FaceSet, order: int):
        self.disc = disc
        self.faces = faces
        self.k = disc.k
        t, wt = gauss_01(order)
        nF = len(faces)
        nq = len(t)
        self.nq = nq
        idx = disc.mesh.index
        self.left = np.array([idx(F.left) for F in faces], dtype=int)
        self.right = np.array([idx(F.right) for F in faces], dtype=int)
        self.axis = np.array([F.axis for F in faces], dtype=int)
        coord = np.array([F.coord for F in faces], dtype=float)
        span = np.array([F.span for F in faces], dtype=float).reshape(nF, 2)
        self.h_F = np.array([F.h_F for F in faces], dtype=float)
        tt = span[:, :1] + t[None, :] * (span[:, 1:] - span[:, :1])
        x = np.where(self.axis[:, None] == 0, coord[:, None], tt)
        y = np.where(self.axis[:, None] == 0, tt, coord[:, None])
        self.x = np.stack([x.ravel(), y.ravel()], axis=1)
        self.w = (wt[None, :] * (span[:, 1:] - span[:, :1])).ravel()
        self.face = np.repeat(np.arange(nF), nq)
        self.eL = np.repeat(self.left, nq)
        self.eR = np.repeat(self.right, nq)
        self.pax = np.repeat(self.axis, nq)
        self.hq = np.repeat(self.h_F, nq)
        self.xiL = (self.x - disc.origin[self.eL]) / disc.size[self.eL]
        self.xiR = (self.x - disc.origin[self.eR]) / disc.size[self.eR]
        self._basis = {}

    def basis(self, side: str, d):
        key = (side, d)
        if key not in self._basis:
            e, xi = (self.eL, self.xiL) if side == "L" else (self.eR, self.xiR)
            B = bernstein_tensor(self.k, xi[:, 0], xi[:, 1], *d)
            self._basis[key] = B / self.disc.scale(d)[e][:, None]
        return self._basis[key]

    def normal_basis(self, side: str, order: int):
        """Derivative of order ``order`` along each face normal."""
        bx = self.basis(side, (order, 0))
        by = self.basis(side, (0, order))
        return np.where(self.pax[:, None] == 0, bx, by)

    def jump_operator(self, BL: np.ndarray, BR: np.ndarray, mask=None) -> sp.csr_matrix:
        """Sparse map from THB coefficients to ``left - right`` values at face points."""
        disc = self.disc
        nb = disc.nb
        q = np.arange(len(self.w)) if mask is None else np.flatnonzero(mask)
        b = np.arange(nb)
        rows = np.repeat(np.arange(len(q)), 2 * nb)
        cols = np.concatenate([self.eL[q, None] * nb + b[None], self.eR[q, None] * nb + b[None]], axis=1).ravel()
        vals = np.concatenate([BL[q], -BR[q]], axis=1).ravel()
        J = sp.csr_matrix((vals, (rows, cols)), shape=(len(q), disc.n_el * nb))
        return (J @ disc.C).tocsr()

    def jump(self, U_loc, BL, BR):
        return np.einsum("qb,qb->q", U_loc[self.eL], BL) - np.einsum("qb,qb->q", U_loc[self.eR], BR)

    def face_sums(self, values):
        return np.bincount(self.face, weights=values * self.w, minlength=len(self.faces))

    def to_elements(self, per_face: np.ndarray, mask=None) -> np.ndarray:
        """Add each face value to both neighbouring elements."""
        sel = np.ones(len(per_face), dtype=bool) if mask is None else mask
        out = np.bincount(self.left[sel], weights=per_face[sel], minlength=self.disc.n_el)
        out += np.bincount(self.right[sel], weights=per_face[sel], minlength=self.disc.n_el)
        return out


class Discretization:
    """Mesh, basis and quadrature bundled for one solve.

    ``tagger(x, y)`` labels boundary facets by their midpoint, returning
    ``"D"`` or ``"N"``; the default tags everything Dirichlet.
    """

    def __init__(self, mesh: HierMesh, basis: ThbBasis, geometry: Geometry, tagger=None, gauss_order=None):
        from .geom import tag_facets

        self.mesh = mesh
        self.basis = basis
        self.geometry = geometry
        self.k = basis.k
        self.nb = basis.nb
        self.elements = mesh.elements()
        self.n_el = len(self.elements)
        self.C = basis.extraction
        self.n_dofs = basis.n_dofs
        self.order = gauss_order or self.k + 1
        boxes = np.array([mesh.box(K) for K in self.elements], dtype=float).reshape(-1, 2, 2)
        self.origin = boxes[:, 0]
        self.size = boxes[:, 1] - boxes[:, 0]
        self.h = np.sqrt(self.size[:, 0] * self.size[:, 1])
        self.cut = np.array([geometry.classify(*K) == CUT for K in self.elements], dtype=bool)
        self.tessellations = [geometry.tessellation(K) for K in self.elements]
        tagger = tagger or (lambda x, y: np.full(np.shape(x), DIRICHLET))
        self.facets = []
        for tess in self.tessellations:
            raw = [BoundaryFacet(tuple(f[0]), tuple(f[1]), tuple(n)) for f, n in zip(tess.facets, tess.normals)]
            self.facets.append(tag_facets(raw, tagger))
        self.skeleton = skeleton_faces(mesh)
        cut_set = {K for K, c in zip(self.elements, self.cut) if c}
        self.ghost_mask = np.array([F.left in cut_set or F.right in cut_set for F in self.skeleton], dtype=bool)
        self._volume = {}
        self._boundary = {}
        self._faces = {}

    @property
    def ghost(self) -> FaceSet:
        return FaceSet(tuple(F for F, g in zip(self.skeleton, self.ghost_mask) if g), "ghost")

    def scale(self, d) -> np.ndarray:
        dx, dy = d
        return self.size[:, 0] ** dx * self.size[:, 1] ** dy

    def volume(self, order=None) -> VolumeRule:
        order = order or self.order
        if order not in self._volume:
            self._volume[order] = VolumeRule(self, order)
        return self._volume[order]

    def boundary(self, order=None) -> BoundaryRule:
        order = order or self.order
        if order not in self._boundary:
            self._boundary[order] = BoundaryRule(self, order)
        return self._boundary[order]

    def faces(self, order=None) -> FaceRule:
        order = order or self.order
        if order not in self._faces:
            self._faces[order] = FaceRule(self, self.skeleton, order)
        return self._faces[order]

    def local(self, u: np.ndarray) -> np.ndarray:
        return (self.C @ u).reshape(self.n_el, self.nb)

    def globalize(self, local: np.ndarray) -> sp.csr_matrix:
        """``C.T @ blockdiag(local) @ C`` for local matrices of shape (n_el, nb, nb)."""
        nb = self.nb
        base = (np.arange(self.n_el) * nb)[:, None, None]
        a = np.arange(nb)
        rows = np.broadcast_to(base + a[None, :, None], local.shape).ravel()
        cols = np.broadcast_to(base + a[None, None, :], local.shape).ravel()
        blk = sp.csr_matrix((local.ravel(), (rows, cols)), shape=(self.n_el * nb, self.n_el * nb))
        return (self.C.T @ blk @ self.C).tocsr()

    def globalize_vector(self, local: np.ndarray) -> np.ndarray:
        return self.C.T @ local.ravel()

    @cached_property
    def area(self) -> float:
        return float(self.volume().w.sum())


def make_discretization(mesh, k, geometry, tagger=None, gauss_order=None) -> Discretization:
    from .thb import build_basis

    return Discretization(mesh, build_basis(mesh, k), geometry, tagger, gauss_order)
