"""Level-set geometry and cut-cell quadrature.

The physical domain is ``{psi > 0}`` intersected with the ambient box.  Cut
elements are bisected recursively into subcells down to the element's subcell
depth.  Subcells inside the domain get tensor Gauss rules; cut subcells at the
finest depth are tessellated from the linear interpolant of ``psi`` along
their edges.  All sign decisions read ``psi`` on the lattice of finest
subcell corners, so a child element sees exactly the subcells its parent saw.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np

from .hmesh import CUT, INSIDE, OUTSIDE, AmbientGrid, ElementRef

DIRICHLET, NEUMANN = "D", "N"


class GeometryError(ValueError):
    pass


class LevelSet:
    """Scalar field ``psi(x, y)``, positive inside the domain."""

    def __init__(self, fn: Callable, grad: Callable | None = None, name: str = "levelset"):
        self._fn = fn
        self._grad = grad
        self.name = name

    def __call__(self, x, y):
        return self._fn(np.asarray(x, dtype=float), np.asarray(y, dtype=float))

    def gradient(self, x, y, step: float = 1e-6):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if self._grad is not None:
            return self._grad(x, y)
        gx = (self(x + step, y) - self(x - step, y)) / (2 * step)
        gy = (self(x, y + step) - self(x, y - step)) / (2 * step)
        return gx, gy

    def rotated(self, angle_deg: float, center=(0.0, 0.0)) -> "LevelSet":
        """Level set of the domain rotated counter-clockwise by ``angle_deg`` about ``center``."""
        th = np.deg2rad(angle_deg)
        c, s = np.cos(th), np.sin(th)
        cx, cy = center

        def fn(x, y):
            dx, dy = x - cx, y - cy
            return self(cx + c * dx + s * dy, cy - s * dx + c * dy)

        grad = None
        if self._grad is not None:
            def grad(x, y):
                dx, dy = x - cx, y - cy
                gx, gy = self.gradient(cx + c * dx + s * dy, cy - s * dx + c * dy)
                return c * gx - s * gy, s * gx + c * gy
        return LevelSet(fn, grad, f"{self.name}@{angle_deg:g}deg")


def square_levelset(half: float = 0.5) -> LevelSet:
    return LevelSet(lambda x, y: np.minimum(half - np.abs(x), half - np.abs(y)), name="square")


def star_levelset(r1: float = 0.6, r2: float = 0.2, lobes: int = 5) -> LevelSet:
    def fn(x, y):
        return r1 + r2 * np.sin(lobes * np.arctan2(y, x)) - np.hypot(x, y)
    return LevelSet(fn, name="star")


def lshape_levelset() -> LevelSet:
    """[-1, 1]^2 without the third quadrant; re-entrant corner at the origin."""
    def fn(x, y):
        return np.minimum(np.minimum(1 - np.abs(x), 1 - np.abs(y)), np.maximum(x, y))
    return LevelSet(fn, name="lshape")


def annulus_levelset(r_in: float = 1.0, r_out: float = 4.0) -> LevelSet:
    """Annulus; restricting to a quadrant is left to the ambient box."""
    def fn(x, y):
        r = np.hypot(x, y)
        return np.minimum(r - r_in, r_out - r)
    return LevelSet(fn, name="annulus")


def disk_levelset(radius: float = 1.0, center=(0.0, 0.0)) -> LevelSet:
    cx, cy = center

    def fn(x, y):
        return radius - np.hypot(x - cx, y - cy)

    def grad(x, y):
        r = np.maximum(np.hypot(x - cx, y - cy), 1e-300)
        return -(x - cx) / r, -(y - cy) / r
    return LevelSet(fn, grad, name="disk")


def halfplane_levelset(normal, offset: float) -> LevelSet:
    """``offset - normal . x``: inside where normal . x < offset."""
    nx, ny = normal

    def fn(x, y):
        return offset - (nx * x + ny * y)
    return LevelSet(fn, lambda x, y: (np.full_like(x, -nx), np.full_like(y, -ny)), name="halfplane")


# ---------------------------------------------------------------- rules

@lru_cache(maxsize=None)
def gauss_01(n: int):
    """n-point Gauss-Legendre rule on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def gauss_square(n: int):
    x, w = gauss_01(n)
    X, Y = np.meshgrid(x, x)
    return np.column_stack([X.ravel(), Y.ravel()]), np.outer(w, w).ravel()


@lru_cache(maxsize=None)
def collapsed_triangle(n: int):
    """Collapsed Gauss rule on the reference triangle, exact to total degree 2n - 2.

    Returns barycentric-like factors ``(a, b)`` with point
    ``p0 + a (p1 - p0) + b (p2 - p0)`` and weights summing to 1/2.
    """
    u, wu = gauss_01(n)
    v, wv = gauss_01(n)
    U, V = np.meshgrid(u, v, indexing="ij")
    a = (U * (1 - V)).ravel()
    b = (U * V).ravel()
    w = (np.outer(wu * u, wv)).ravel()
    return a, b, w


def box_points(boxes: np.ndarray, n: int):
    """Tensor Gauss points on boxes given as rows (x0, y0, x1, y1)."""
    if len(boxes) == 0:
        return np.zeros((0, 2)), np.zeros(0)
    ref, w = gauss_square(n)
    lo = boxes[:, None, :2]
    size = boxes[:, None, 2:] - boxes[:, None, :2]
    pts = lo + ref[None] * size
    wts = w[None, :] * (size[..., 0] * size[..., 1])
    return pts.reshape(-1, 2), wts.ravel()


def triangle_points(tris: np.ndarray, n: int):
    if len(tris) == 0:
        return np.zeros((0, 2)), np.zeros(0)
    a, b, w = collapsed_triangle(n)
    p0, p1, p2 = tris[:, 0], tris[:, 1], tris[:, 2]
    e1, e2 = p1 - p0, p2 - p0
    area2 = np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    pts = p0[:, None] + a[None, :, None] * e1[:, None] + b[None, :, None] * e2[:, None]
    return pts.reshape(-1, 2), (area2[:, None] * w[None, :]).ravel()


def segment_points(segs: np.ndarray, n: int):
    if len(segs) == 0:
        return np.zeros((0, 2)), np.zeros(0)
    t, w = gauss_01(n)
    p0, p1 = segs[:, 0], segs[:, 1]
    length = np.linalg.norm(p1 - p0, axis=1)
    pts = p0[:, None] + t[None, :, None] * (p1 - p0)[:, None]
    return pts.reshape(-1, 2), (length[:, None] * w[None, :]).ravel()


# ---------------------------------------------------------------- tessellation

@dataclass(frozen=True)
class BoundaryFacet:
    p0: tuple
    p1: tuple
    normal: tuple
    tag: str = DIRICHLET

    @property
    def midpoint(self):
        return (0.5 * (self.p0[0] + self.p1[0]), 0.5 * (self.p0[1] + self.p1[1]))

    @property
    def length(self) -> float:
        return float(np.hypot(self.p1[0] - self.p0[0], self.p1[1] - self.p0[1]))


@dataclass
class Tessellation:
    """Integration cells of one element: inside boxes, cut triangles and boundary facets."""

    boxes: np.ndarray        # (nb, 4) rows x0, y0, x1, y1
    triangles: np.ndarray    # (nt, 3, 2)
    facets: np.ndarray       # (nf, 2, 2)
    normals: np.ndarray      # (nf, 2)

    def volume_rule(self, n: int):
        pb, wb = box_points(self.boxes, n)
        pt, wt = triangle_points(self.triangles, n + 1)
        return np.vstack([pb, pt]), np.concatenate([wb, wt])

    def facet_rule(self, n: int):
        return segment_points(self.facets, n)

    @property
    def area(self) -> float:
        return float(self.volume_rule(2)[1].sum())


def _interp(pa, pb, va, vb):
    t = va / (va - vb)
    return (pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1]))


def _tessellate_subcell(xs, ys, v, tris, facets, normals):
    """Inside part of a cut subcell with corner values ``v`` (counter-clockwise from lower left)."""
    corners = ((xs[0], ys[0]), (xs[1], ys[0]), (xs[1], ys[1]), (xs[0], ys[1]))
    inside = [val > 0 for val in v]
    walk = []  # (point, kind)
    for c in range(4):
        d = (c + 1) % 4
        if inside[c]:
            walk.append((corners[c], "corner"))
        if inside[c] != inside[d]:
            p = _interp(corners[c], corners[d], v[c], v[d])
            walk.append((p, "exit" if inside[c] else "entry"))
    saddle = inside[0] == inside[2] and inside[1] == inside[3] and inside[0] != inside[1]
    if saddle and sum(v) / 4.0 <= 0:
        entries = [n for n, (_, kind) in enumerate(walk) if kind == "entry"]
        first = walk[entries[0]:entries[1]]
        second = walk[entries[1]:] + walk[:entries[0]]
        polys = [first, second]
    else:
        polys = [walk]
    for poly in polys:
        pts = np.array([p for p, _ in poly])
        m = len(pts)
        if m < 3:
            continue
        c = pts.mean(axis=0)
        for a in range(m):
            b = (a + 1) % m
            p, q = pts[a], pts[b]
            area2 = (p[0] - c[0]) * (q[1] - c[1]) - (p[1] - c[1]) * (q[0] - c[0])
            if area2 > 1e-14 * (xs[1] - xs[0]) * (ys[1] - ys[0]):
                tris.append((c, p, q))
            if poly[a][1] == "exit" and poly[b][1] == "entry":
                d = q - p
                length = np.hypot(d[0], d[1])
                if length > 1e-14 * (xs[1] - xs[0]):
                    facets.append((p, q))
                    normals.append((d[1] / length, -d[0] / length))


def tessellate_block(vals: np.ndarray, origin, sub_h, on_box_edge=(False, False, False, False)) -> Tessellation:
    """Octree tessellation of an element from its lattice block.

    ``vals`` has shape (m + 1, m + 1), indexed [jj, ii], with ``m`` a power
    of two; ``sub_h`` is the finest subcell size.  ``on_box_edge`` flags the
    element sides (left, right, bottom, top) lying on the ambient boundary,
    where the inside part of the side becomes a boundary facet.
    """
    m = vals.shape[0] - 1
    if vals.shape != (m + 1, m + 1) or m & (m - 1):
        raise GeometryError("lattice block must be square with power-of-two cells")
    x0, y0 = origin
    hx, hy = sub_h
    pos = vals > 0
    boxes, tris, facets, normals = [], [], [], []

    def rec(i0, j0, size):
        block = pos[j0:j0 + size + 1, i0:i0 + size + 1]
        if block.all():
            boxes.append((x0 + i0 * hx, y0 + j0 * hy, x0 + (i0 + size) * hx, y0 + (j0 + size) * hy))
            return
        if not block.any():
            return
        if size == 1:
            xs = (x0 + i0 * hx, x0 + (i0 + 1) * hx)
            ys = (y0 + j0 * hy, y0 + (j0 + 1) * hy)
            v = (vals[j0, i0], vals[j0, i0 + 1], vals[j0 + 1, i0 + 1], vals[j0 + 1, i0])
            _tessellate_subcell(xs, ys, v, tris, facets, normals)
            return
        half = size // 2
        for dj in (0, half):
            for di in (0, half):
                rec(i0 + di, j0 + dj, half)

    rec(0, 0, m)
    left, right, bottom, top = on_box_edge
    sides = []
    if left:
        sides.append((vals[:, 0], lambda t: (x0, y0 + t * hy), (-1.0, 0.0)))
    if right:
        sides.append((vals[:, m], lambda t: (x0 + m * hx, y0 + t * hy), (1.0, 0.0)))
    if bottom:
        sides.append((vals[0, :], lambda t: (x0 + t * hx, y0), (0.0, -1.0)))
    if top:
        sides.append((vals[m, :], lambda t: (x0 + t * hx, y0 + m * hy), (0.0, 1.0)))
    for line, at, nrm in sides:
        for a in range(m):
            va, vb = line[a], line[a + 1]
            if va > 0 and vb > 0:
                ta, tb = a, a + 1
            elif va > 0:
                ta, tb = a, a + va / (va - vb)
            elif vb > 0:
                ta, tb = a + va / (va - vb), a + 1
            else:
                continue
            if tb - ta > 1e-14:
                facets.append((np.array(at(ta)), np.array(at(tb))))
                normals.append(nrm)
    return Tessellation(
        np.array(boxes, dtype=float).reshape(-1, 4),
        np.array(tris, dtype=float).reshape(-1, 3, 2),
        np.array(facets, dtype=float).reshape(-1, 2, 2),
        np.array(normals, dtype=float).reshape(-1, 2),
    )


def _sample_box(ls: LevelSet, box, rho: int) -> np.ndarray:
    (x0, y0), (x1, y1) = box
    m = 2 ** rho
    xs = x0 + (x1 - x0) * np.arange(m + 1) / m
    ys = y0 + (y1 - y0) * np.arange(m + 1) / m
    X, Y = np.meshgrid(xs, ys)
    return ls(X, Y)


def classify_element(ls: LevelSet, box, rho: int) -> str:
    """Sign test of ``psi`` on the corner lattice of the box's finest subcells."""
    pos = _sample_box(ls, box, rho) > 0
    if pos.all():
        return INSIDE
    if not pos.any():
        return OUTSIDE
    return CUT


@dataclass
class CutQuadrature:
    element: object
    points: np.ndarray
    weights: np.ndarray
    facets: list = field(default_factory=list)
    depth: int = 0


def cut_quadrature(ls: LevelSet, box, rho: int, gauss_order: int, element=None,
                   on_box_edge=(False, False, False, False)) -> CutQuadrature:
    """Volume and boundary rules for the part of ``box`` inside the domain."""
    if gauss_order < 1:
        raise GeometryError("gauss order must be at least 1")
    (x0, y0), (x1, y1) = box
    m = 2 ** rho
    tess = tessellate_block(_sample_box(ls, box, rho), (x0, y0), ((x1 - x0) / m, (y1 - y0) / m), on_box_edge)
    return quadrature_from_tessellation(tess, gauss_order, element, rho)


def quadrature_from_tessellation(tess: Tessellation, gauss_order: int, element=None, depth=0) -> CutQuadrature:
    pts, wts = tess.volume_rule(gauss_order)
    keep = wts > 0
    facets = [BoundaryFacet(tuple(f[0]), tuple(f[1]), tuple(n)) for f, n in zip(tess.facets, tess.normals)]
    return CutQuadrature(element, pts[keep], wts[keep], facets, depth)


def tag_facets(facets, tagger) -> list:
    """Attach a Dirichlet/Neumann tag decided at each facet midpoint."""
    if not facets:
        return []
    mids = np.array([f.midpoint for f in facets])
    tags = np.asarray(tagger(mids[:, 0], mids[:, 1]))
    tags = np.broadcast_to(tags, (len(facets),))
    out = []
    for f, t in zip(facets, tags):
        if t not in (DIRICHLET, NEUMANN):
            raise GeometryError(f"unknown boundary tag {t!r}")
        out.append(BoundaryFacet(f.p0, f.p1, f.normal, str(t)))
    return out


def write_facets_csv(facets, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x0", "y0", "x1", "y1", "nx", "ny", "tag"])
        for f in facets:
            w.writerow([repr(float(f.p0[0])), repr(float(f.p0[1])), repr(float(f.p1[0])),
                        repr(float(f.p1[1])), repr(float(f.normal[0])), repr(float(f.normal[1])), f.tag])


class Geometry:
    """Level set sampled on the global lattice of finest subcell corners.

    The lattice spacing is the level-0 cell size divided by ``2**rho0``.
    Element classification and tessellation both read this lattice, which
    makes them consistent across refinement.
    """

    def __init__(self, levelset: LevelSet, grid: AmbientGrid, rho0: int):
        if rho0 < 0:
            raise GeometryError("subcell depth must be non-negative")
        self.levelset = levelset
        self.grid = grid
        self.rho0 = int(rho0)
        nx, ny = grid.base_divisions
        m = 2 ** self.rho0
        (x0, y0), (x1, y1) = grid.bbox
        self._nx, self._ny = nx * m, ny * m
        xs = x0 + (x1 - x0) * np.arange(self._nx + 1) / self._nx
        ys = y0 + (y1 - y0) * np.arange(self._ny + 1) / self._ny
        self.lattice = np.empty((ys.size, xs.size))
        rows = max(1, 2 ** 21 // xs.size)  # bound the temporaries of the level set call
        for r in range(0, ys.size, rows):
            X, Y = np.meshgrid(xs, ys[r:r + rows])
            self.lattice[r:r + rows] = levelset(X, Y)
        if not np.all(np.isfinite(self.lattice)):
            raise GeometryError("level set returned non-finite values")
        S = np.zeros((ys.size + 1, xs.size + 1), dtype=np.int32)
        np.cumsum(self.lattice > 0, axis=0, dtype=np.int32, out=S[1:, 1:])
        np.cumsum(S[1:, 1:], axis=1, dtype=np.int32, out=S[1:, 1:])
        self._prefix = S
        self._tess: dict = {}

    def _block(self, level: int, i: int, j: int):
        s = 2 ** (self.rho0 - level)
        return i * s, j * s, s

    def classify(self, level: int, i: int, j: int) -> str:
        if level > self.rho0:
            raise GeometryError(f"level {level} exceeds subcell depth {self.rho0}")
        i0, j0, s = self._block(level, i, j)
        S = self._prefix
        cnt = S[j0 + s + 1, i0 + s + 1] - S[j0, i0 + s + 1] - S[j0 + s + 1, i0] + S[j0, i0]
        if cnt == (s + 1) ** 2:
            return INSIDE
        if cnt == 0:
            return OUTSIDE
        return CUT

    def tessellation(self, K: ElementRef) -> Tessellation:
        tess = self._tess.get(K)
        if tess is None:
            i0, j0, s = self._block(*K)
            vals = self.lattice[j0:j0 + s + 1, i0:i0 + s + 1]
            (bx0, by0), _ = self.grid.cell_box(*K)
            hx, hy = self.grid.cell_size(K.level)
            edge = (i0 == 0, i0 + s == self._nx, j0 == 0, j0 + s == self._ny)
            tess = tessellate_block(vals, (bx0, by0), (hx / s, hy / s), edge)
            self._tess[K] = tess
        return tess

    def cut_quadrature(self, K: ElementRef, gauss_order: int) -> CutQuadrature:
        return quadrature_from_tessellation(self.tessellation(K), gauss_order, K, self.rho0 - K.level)
