"""Benchmark catalog, convergence studies and the voxel-scan flow workflow.

Exact fields are symbolic; forcing, gradients and boundary data all come
from differentiating them, and a rigid rotation of the domain is applied to
the level set and the exact fields alike while the grid stays axis-aligned.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
import sympy as sy

from .adapt import LoopResult, Simulation, adaptive_loop
from .assembly import LaplaceProblem, StabilizationParams, StokesProblem
from .geom import DIRICHLET, NEUMANN, LevelSet, annulus_levelset, lshape_levelset, square_levelset, star_levelset
from .hmesh import AmbientGrid

log = logging.getLogger(__name__)

X, Y = sy.symbols("x y", real=True)


class CaseError(ValueError):
    pass


def _canonical(expr):
    """Map free symbols named ``x`` and ``y`` onto the module symbols."""
    expr = sy.sympify(expr)
    names = {"x": X, "y": Y}
    extra = [s for s in expr.free_symbols if s.name not in names]
    if extra:
        raise CaseError(f"exact fields may only depend on x and y, got {sorted(map(str, extra))}")
    return expr.subs({s: names[s.name] for s in expr.free_symbols})


def _lambdify(expr):
    fn = sy.lambdify((X, Y), expr, modules="numpy", cse=True)

    def wrapped(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return np.asarray(fn(x, y), dtype=float) * np.ones(np.broadcast(x, y).shape)
    return wrapped


def rotate_coordinates(expr, angle_deg: float):
    """Compose ``expr`` with the inverse rotation so its graph turns by ``angle_deg``."""
    if angle_deg == 0:
        return expr
    th = sy.pi * sy.nsimplify(angle_deg) / 180
    c, s = sy.cos(th), sy.sin(th)
    return expr.subs({X: c * X + s * Y, Y: -s * X + c * Y}, simultaneous=True)


class _Frame:
    """Rigid rotation about the origin; fields are differentiated in the unrotated frame."""

    def __init__(self, angle_deg: float):
        th = math.radians(angle_deg)
        self.c, self.s = math.cos(th), math.sin(th)

    def back(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return self.c * x + self.s * y, -self.s * x + self.c * y

    def vector(self, a, b):
        return self.c * a - self.s * b, self.s * a + self.c * b

    def gradient(self, gx, gy):
        return self.vector(gx, gy)

    def hessian(self, hxx, hxy, hyy):
        """``Q H Q^T`` for a symmetric ``H`` given by its three entries."""
        c, s = self.c, self.s
        rxx = c * c * hxx - 2 * c * s * hxy + s * s * hyy
        rxy = c * s * (hxx - hyy) + (c * c - s * s) * hxy
        ryy = s * s * hxx + 2 * c * s * hxy + c * c * hyy
        return rxx, rxy, ryy


_SECOND = ((X, X), (X, Y), (Y, Y))


class ExactScalar:
    """Scalar exact solution with derivatives up to second order."""

    def __init__(self, expr, angle_deg: float = 0.0):
        expr = _canonical(expr)
        self.expr = expr
        self.angle = angle_deg
        self._frame = _Frame(angle_deg)
        self._value = _lambdify(expr)
        self._grad = tuple(_lambdify(sy.diff(expr, v)) for v in (X, Y))
        self._hess = tuple(_lambdify(sy.diff(expr, *d)) for d in _SECOND)

    def value(self, x, y):
        return self._value(*self._frame.back(x, y))

    def grad(self, x, y):
        xb, yb = self._frame.back(x, y)
        return self._frame.gradient(self._grad[0](xb, yb), self._grad[1](xb, yb))

    def hessian(self, x, y):
        xb, yb = self._frame.back(x, y)
        return self._frame.hessian(*(h(xb, yb) for h in self._hess))

    def laplacian(self, x, y):
        hxx, _, hyy = self.hessian(x, y)
        return hxx + hyy


class ExactStokes:
    """Velocity-pressure exact solution; the velocity rotates as a vector."""

    def __init__(self, u1, u2, p, angle_deg: float = 0.0, mu: float = 1.0):
        u1, u2, p = (_canonical(e) for e in (u1, u2, p))
        self.mu = mu
        self.angle = angle_deg
        self.exprs = (u1, u2, p)
        self._frame = _Frame(angle_deg)
        self._u = (_lambdify(u1), _lambdify(u2))
        self._p = _lambdify(p)
        self._gu = [[_lambdify(sy.diff(e, v)) for v in (X, Y)] for e in (u1, u2)]
        self._gp = [_lambdify(sy.diff(p, v)) for v in (X, Y)]
        self._hu = [[_lambdify(sy.diff(e, *d)) for d in _SECOND] for e in (u1, u2)]

    def velocity(self, x, y):
        xb, yb = self._frame.back(x, y)
        return self._frame.vector(self._u[0](xb, yb), self._u[1](xb, yb))

    def velocity_grad(self, x, y):
        """``G[i][j] = d u_i / d x_j``."""
        xb, yb = self._frame.back(x, y)
        g = [[f(xb, yb) for f in row] for row in self._gu]
        # Q G Q^T: rotate rows then columns
        r0 = self._frame.vector(g[0][0], g[1][0])
        r1 = self._frame.vector(g[0][1], g[1][1])
        c0 = self._frame.vector(r0[0], r1[0])
        c1 = self._frame.vector(r0[1], r1[1])
        return [[c0[0], c0[1]], [c1[0], c1[1]]]

    def velocity_hessian(self, x, y):
        """``H[i] = (xx, xy, yy)`` second derivatives of ``u_i``."""
        xb, yb = self._frame.back(x, y)
        h = [self._frame.hessian(*(f(xb, yb) for f in row)) for row in self._hu]
        out = [self._frame.vector(h[0][m], h[1][m]) for m in range(3)]
        return [[out[m][0] for m in range(3)], [out[m][1] for m in range(3)]]

    def pressure(self, x, y):
        return self._p(*self._frame.back(x, y))

    def pressure_grad(self, x, y):
        xb, yb = self._frame.back(x, y)
        return self._frame.gradient(self._gp[0](xb, yb), self._gp[1](xb, yb))

    def divergence(self, x, y):
        g = self.velocity_grad(x, y)
        return g[0][0] + g[1][1]

    def traction(self, x, y, nx, ny):
        g = self.velocity_grad(x, y)
        p = self.pressure(x, y)
        mu = self.mu
        t1 = mu * (2 * g[0][0] * nx + (g[0][1] + g[1][0]) * ny) - p * nx
        t2 = mu * ((g[0][1] + g[1][0]) * nx + 2 * g[1][1] * ny) - p * ny
        return t1, t2


def derive_forcing(exact, kind: str, mu: float = 1.0):
    """Source term making ``exact`` a strong solution: ``-lap u`` or ``-div(2 mu sym grad u) + grad p``."""
    if kind == "laplace":
        return lambda x, y: -exact.laplacian(x, y)
    if kind == "stokes":
        def f(x, y):
            H = exact.velocity_hessian(x, y)  # H[i] = (xx, xy, yy)
            px, py = exact.pressure_grad(x, y)
            f1 = -mu * (2 * H[0][0] + H[0][2] + H[1][1]) + px
            f2 = -mu * (H[1][0] + 2 * H[1][2] + H[0][1]) + py
            return f1, f2
        return f
    raise CaseError(f"unknown operator {kind!r}")


# ---------------------------------------------------------------- catalog

SIN_SUM = sy.sin(sy.pi * X) + sy.sin(sy.pi * Y)
LSHAPE_LAPLACE = (X ** 2 + Y ** 2) ** sy.Rational(1, 3) * sy.cos(sy.Rational(2, 3) * sy.atan2(X - Y, X + Y))


def annulus_fields():
    r2 = X ** 2 + Y ** 2
    u1 = sy.Rational(1, 10 ** 6) * X ** 2 * Y ** 4 * (r2 - 1) * (r2 - 16) * (
        5 * X ** 4 + 18 * X ** 2 * Y ** 2 - 85 * X ** 2 + 13 * Y ** 4 - 153 * Y ** 2 + 80)
    u2 = sy.Rational(1, 10 ** 6) * X * Y ** 5 * (r2 - 1) * (r2 - 16) * (
        102 * X ** 2 + 34 * Y ** 2 - 10 * X ** 4 - 12 * X ** 2 * Y ** 2 - 2 * Y ** 4 - 32)
    p = sy.Rational(1, 10 ** 7) * X * Y * (Y ** 2 - X ** 2) * (r2 - 16) ** 2 * (r2 - 1) ** 2 * sy.exp(14 / sy.sqrt(r2))
    return u1, u2, p


CORNER_ALPHA = sy.Rational(856399, 1572864)


def corner_stokes_fields():
    """Singular corner flow; the angle runs from the negative y-axis counter-clockwise.

    The walls at angle 0 and 3 pi / 2 are the two legs of the re-entrant
    corner at the origin.  The angle has its branch cut in the removed
    quadrant.
    """
    a = CORNER_ALPHA
    w = 3 * sy.pi / 2
    t = sy.Symbol("t", real=True)
    psi = (sy.cos(a * w) / (1 + a) * sy.sin((1 + a) * t) - sy.cos(a * w) / (1 - a) * sy.sin((1 - a) * t)
           + sy.cos((1 - a) * t) - sy.cos((1 + a) * t))
    d1, d3 = sy.diff(psi, t), sy.diff(psi, t, 3)
    th = sy.atan2(Y - X, X + Y) + 3 * sy.pi / 4
    R = sy.sqrt(X ** 2 + Y ** 2)
    sub = lambda e: e.subs(t, th)
    u1 = R ** a * (sy.sin(th) * sub(d1) - (1 + a) * sy.cos(th) * sub(psi))
    u2 = -R ** a * (sy.cos(th) * sub(d1) + (1 + a) * sy.sin(th) * sub(psi))
    p = -R ** (a - 1) / (1 - a) * ((1 + a) ** 2 * sub(d1) + sub(d3))
    return u1, u2, p


def _rotate_back(x, y, angle_deg):
    th = np.deg2rad(angle_deg)
    c, s = np.cos(th), np.sin(th)
    return c * x + s * y, -s * x + c * y


def lshape_tagger(angle_deg: float):
    """Dirichlet on the two legs meeting at the re-entrant corner, Neumann elsewhere."""
    def tag(x, y):
        xr, yr = _rotate_back(np.asarray(x, dtype=float), np.asarray(y, dtype=float), angle_deg)
        outer = np.minimum(1 - np.abs(xr), 1 - np.abs(yr))
        legs = np.maximum(xr, yr)
        return np.where(legs < outer, DIRICHLET, NEUMANN)
    return tag


def annulus_tagger(x, y):
    """Neumann on the x = 0 edge, Dirichlet on both arcs and on y = 0."""
    return np.where(np.asarray(x) < 1e-9, NEUMANN, DIRICHLET)


def all_dirichlet(x, y):
    return np.full(np.shape(x), DIRICHLET)


@dataclass
class Case:
    """A manufactured benchmark: domain, ambient grid, boundary split and exact fields."""

    name: str
    kind: str
    grid: AmbientGrid
    levelset: LevelSet
    tagger: object
    exact: object
    angle: float = 0.0
    mu: float = 1.0
    beta: float = 50.0
    rho0: int = 6

    def problem(self):
        ex = self.exact
        if self.kind == "laplace":
            f = derive_forcing(ex, "laplace")

            def q(x, y, nx, ny):
                gx, gy = ex.grad(x, y)
                return gx * nx + gy * ny
            return LaplaceProblem(f=f, g=ex.value, q=q)
        return StokesProblem(f=derive_forcing(ex, "stokes", self.mu), g=ex.velocity, t=ex.traction, mu=self.mu)

    def params(self, beta=None, gamma_g=None, gamma_s=None) -> StabilizationParams:
        return StabilizationParams(self.beta if beta is None else beta, gamma_g, gamma_s)

    def simulation(self, k: int, rho0: int | None = None, **params) -> Simulation:
        return Simulation(self.kind, self.grid, self.levelset, self.problem(), k,
                          self.rho0 if rho0 is None else rho0, self.tagger, self.params(**params),
                          self.exact, self.name)


CASE_NAMES = ("unit-square", "star", "lshape", "annulus-stokes", "lshape-stokes")


@lru_cache(maxsize=None)
def _exact(name: str, angle: float):
    if name in ("unit-square", "star"):
        return ExactScalar(SIN_SUM, angle)
    if name == "lshape":
        return ExactScalar(LSHAPE_LAPLACE, angle)
    if name == "annulus-stokes":
        return ExactStokes(*annulus_fields(), angle_deg=angle)
    if name == "lshape-stokes":
        return ExactStokes(*corner_stokes_fields(), angle_deg=angle)
    raise CaseError(name)


def make_case(name: str, angle: float | None = None, rho0: int | None = None,
              corotate: bool = False) -> Case:
    """Catalog entry by name; ``angle`` overrides the default mesh rotation.

    For the smooth all-Dirichlet cases the exact field is a function of the
    grid coordinates and only the domain turns; ``corotate=True`` turns the
    field with the domain instead.  The corner cases always co-rotate since
    their singularity and boundary split are attached to the domain.
    """
    if name == "unit-square":
        a = 20.0 if angle is None else angle
        c = Case(name, "laplace", AmbientGrid(((-1, -1), (1, 1)), (8, 8)), square_levelset().rotated(a),
                 all_dirichlet, _exact(name, a if corotate else 0.0), a, rho0=6)
    elif name == "star":
        a = 20.0 if angle is None else angle
        c = Case(name, "laplace", AmbientGrid(((-1, -1), (1, 1)), (10, 10)), star_levelset().rotated(a),
                 all_dirichlet, _exact(name, a if corotate else 0.0), a, rho0=6)
    elif name == "lshape":
        a = 20.0 if angle is None else angle
        c = Case(name, "laplace", AmbientGrid(((-1.5, -1.5), (1.5, 1.5)), (10, 10)), lshape_levelset().rotated(a),
                 lshape_tagger(a), _exact(name, a), a, rho0=9)
    elif name == "annulus-stokes":
        a = 0.0 if angle is None else angle
        if a != 0.0:
            raise CaseError("the quarter annulus is fitted to its ambient box and cannot be rotated")
        c = Case(name, "stokes", AmbientGrid(((0, 0), (4, 4)), (9, 9)), annulus_levelset(1.0, 4.0),
                 annulus_tagger, _exact(name, 0.0), 0.0, rho0=6)
    elif name == "lshape-stokes":
        a = 20.0 if angle is None else angle
        c = Case(name, "stokes", AmbientGrid(((-1.5, -1.5), (1.5, 1.5)), (10, 10)), lshape_levelset().rotated(a),
                 lshape_tagger(a), _exact(name, a), a, rho0=9)
    else:
        raise CaseError(f"unknown case {name!r}; choose from {', '.join(CASE_NAMES)}")
    if rho0 is not None:
        c.rho0 = int(rho0)
    return c


def case_catalog() -> dict:
    return {name: make_case(name) for name in CASE_NAMES}


# ---------------------------------------------------------------- convergence

CONVERGENCE_COLUMNS = ("case", "k", "mode", "step", "n_dofs", "err_L2", "err_H1", "err_energy", "estimator")


def fit_rate(n_dofs, errors, last: int = 3) -> float:
    """Least-squares slope of log(error) against log(n_dofs) over the last points."""
    n = np.asarray(n_dofs, dtype=float)[-last:]
    e = np.asarray(errors, dtype=float)[-last:]
    if n.size < 2:
        raise CaseError("need at least two points for a rate")
    return float(np.polyfit(np.log(n), np.log(e), 1)[0])


@dataclass
class ConvergenceRecord:
    case: str
    k: int
    mode: str
    records: list
    stop_reason: str = ""

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def rate(self, name: str, last: int = 3) -> float:
        return fit_rate(self.column("n_dofs"), self.column(name), last)

    def rows(self):
        for r in self.records:
            yield (self.case, self.k, self.mode, r.step, r.n_dofs, r.err_L2, r.err_H1, r.err_energy, r.estimator)

    def write_csv(self, path) -> None:
        write_convergence_csv([self], path)


def write_convergence_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CONVERGENCE_COLUMNS)
        for rec in records:
            for row in rec.rows():
                w.writerow(list(row[:5]) + [f"{v:.17g}" for v in row[5:]])


def run_convergence(case: Case | str, k: int, mode: str = "uniform", steps: int = 4, lam: float = 0.8,
                    rho0: int | None = None, on_step=None) -> ConvergenceRecord:
    """Uniform or adaptive refinement study on a catalog case."""
    if isinstance(case, str):
        case = make_case(case)
    if mode not in ("uniform", "adaptive"):
        raise CaseError(f"unknown refinement mode {mode!r}")
    sim = case.simulation(k, rho0)
    res: LoopResult = adaptive_loop(sim, steps, lam, mode=mode, on_step=on_step)
    return ConvergenceRecord(case.name, k, mode, res.records, res.stop_reason)


# ---------------------------------------------------------------- voxel scan workflow

class VoxelError(ValueError):
    pass


@dataclass(frozen=True)
class VoxelImage:
    """Grayscale image, values in [0, 1], indexed ``[row, col]`` with row 0 at the top."""

    values: np.ndarray
    pixel_size: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.size == 0:
            raise VoxelError("image must be a non-empty 2D array")
        if v.min() < 0 or v.max() > 1:
            raise VoxelError("image values must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def extent(self):
        return ((0.0, 0.0), (self.width * self.pixel_size, self.height * self.pixel_size))


def _pgm_tokens(data: bytes, count: int, start: int = 0):
    tokens, pos = [], start
    while len(tokens) < count:
        while pos < len(data) and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        end = pos
        while end < len(data) and not data[end:end + 1].isspace() and data[end:end + 1] != b"#":
            end += 1
        if end == pos:
            raise VoxelError("truncated PGM header")
        tokens.append(data[pos:end])
        pos = end
    return tokens, pos


def load_voxels(path, pixel_size: float = 1.0) -> VoxelImage:
    """Read a binary (P5) or plain (P2) PGM image."""
    data = Path(path).read_bytes()
    if data[:2] not in (b"P2", b"P5"):
        raise VoxelError(f"{path}: not a PGM file")
    (w, h, maxval), pos = _pgm_tokens(data, 3, 2)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise VoxelError(f"{path}: malformed PGM header") from exc
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise VoxelError(f"{path}: invalid PGM dimensions")
    if data[:2] == b"P5":
        raw = data[pos + 1:]
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        need = w * h * np.dtype(dtype).itemsize
        if len(raw) < need:
            raise VoxelError(f"{path}: expected {w * h} pixels, file is truncated")
        vals = np.frombuffer(raw[:need], dtype=dtype).astype(float)
    else:
        parts = data[pos:].split()
        if len(parts) < w * h:
            raise VoxelError(f"{path}: expected {w * h} pixels, found {len(parts)}")
        try:
            vals = np.array([int(t) for t in parts[:w * h]], dtype=float)
        except ValueError as exc:
            raise VoxelError(f"{path}: non-integer pixel value") from exc
    if vals.max() > maxval:
        raise VoxelError(f"{path}: pixel value above maxval")
    return VoxelImage(vals.reshape(h, w) / maxval, pixel_size)


def save_pgm(img: VoxelImage, path) -> None:
    vals = np.rint(img.values * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.width} {img.height}\n255\n".encode())
        fh.write(vals.tobytes())


def _quadratic_bspline(t):
    """Cardinal quadratic B-spline centred at 0 and its derivative."""
    t = np.abs(np.asarray(t, dtype=float))
    val = np.where(t < 0.5, 0.75 - t ** 2, np.where(t < 1.5, 0.5 * (1.5 - t) ** 2, 0.0))
    return val


def _quadratic_bspline_d(t):
    t = np.asarray(t, dtype=float)
    a = np.abs(t)
    d = np.where(a < 0.5, -2 * a, np.where(a < 1.5, -(1.5 - a), 0.0))
    return np.sign(t) * d


def smooth_levelset(img: VoxelImage, threshold: float = 0.5) -> LevelSet:
    """Quadratic B-spline smoothing of ``intensity - threshold`` on the voxel grid.

    Each voxel value becomes the coefficient of a quadratic B-spline centred at
    the voxel; the image is extended by edge replication.  The physical frame
    has the origin at the lower-left corner of the image.
    """
    if not 0 < threshold < 1:
        raise VoxelError("threshold must lie in (0, 1)")
    coef = img.values[::-1] - threshold  # row 0 at the bottom
    if np.allclose(coef, 0.0):
        raise VoxelError("image is constant at the threshold; no interface")
    H, W = coef.shape
    padded = np.pad(coef, 2, mode="edge")
    s = img.pixel_size

    def _eval(x, y, dx=0, dy=0):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        u, v = x / s - 0.5, y / s - 0.5  # voxel-centre coordinates
        i0, j0 = np.floor(u + 0.5).astype(int), np.floor(v + 0.5).astype(int)
        out = np.zeros(np.broadcast(x, y).shape)
        for di in (-1, 0, 1):
            ci = i0 + di
            bx = _quadratic_bspline_d(u - ci) / s if dx else _quadratic_bspline(u - ci)
            for dj in (-1, 0, 1):
                cj = j0 + dj
                by = _quadratic_bspline_d(v - cj) / s if dy else _quadratic_bspline(v - cj)
                c = padded[np.clip(cj, -2, H + 1) + 2, np.clip(ci, -2, W + 1) + 2]
                out += c * bx * by
        return out

    return LevelSet(lambda x, y: _eval(x, y), lambda x, y: (_eval(x, y, 1, 0), _eval(x, y, 0, 1)), "voxels")


VESSEL_SEGMENTS = (
    # (start, end, half width) in unit-square coordinates
    ((0.5, -0.1), (0.5, 0.35), 0.13),
    ((0.5, 0.35), (0.17, 1.1), 0.09),
    ((0.5, 0.35), (0.8, 1.1), 0.06),
)


def synthetic_vessel(n: int = 32) -> VoxelImage:
    """Bifurcating channel image: trunk entering at the bottom edge, two unequal branches leaving at the top."""
    c = (np.arange(n) + 0.5) / n
    X, Yv = np.meshgrid(c, c[::-1])  # row 0 is the top of the image
    val = np.zeros((n, n))
    for (ax, ay), (bx, by), half in VESSEL_SEGMENTS:
        d = np.array([bx - ax, by - ay])
        t = np.clip(((X - ax) * d[0] + (Yv - ay) * d[1]) / (d @ d), 0.0, 1.0)
        dist = np.hypot(X - ax - t * d[0], Yv - ay - t * d[1])
        val = np.maximum(val, np.clip(0.5 + (half - dist) * n, 0.0, 1.0))
    return VoxelImage(np.rint(val * 255) / 255, 1.0 / n)


def sample_image_path() -> Path:
    return Path(str(resources.files("adaptiga") / "data" / "vessel32.pgm"))


def image_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class ScanFlow:
    """Channel flow driven by a pressure drop between inflow and outflow edges of the box."""

    simulation: Simulation
    inflow: object
    outflow: object
    outlets: dict

    def check_boundary(self, disc) -> None:
        """Raise when the inflow or outflow predicate selects no boundary facet."""
        mids = np.array([f.midpoint for facets in disc.facets for f in facets]).reshape(-1, 2)
        for name, sel in (("inflow", self.inflow), ("outflow", self.outflow)):
            if not np.any(sel(mids[:, 0], mids[:, 1])):
                raise CaseError(f"{name} selector covers no boundary facets")

    def run(self, steps: int, mode: str = "adaptive", lam: float = 0.8, on_step=None) -> LoopResult:
        """Refinement loop; the boundary split is checked on the first mesh."""
        def step(rec, res):
            if rec.step == 0:
                self.check_boundary(res.disc)
            if on_step is not None:
                on_step(rec, res)
        return adaptive_loop(self.simulation, steps, lam, mode=mode, on_step=step)

    def fluxes(self, res) -> dict:
        out = {name: boundary_flux(res.disc, res.solution, sel) for name, sel in self.outlets.items()}
        out["in"] = boundary_flux(res.disc, res.solution, self.inflow)
        return out


def scan_flow_case(levelset: LevelSet, grid: AmbientGrid, k: int = 2, rho0: int = 6, p_bar: float = 1.0,
                   mu: float = 1.0, beta: float = 100.0, inflow=None, outflow=None, outlets=None) -> ScanFlow:
    """Stokes problem with traction ``-p_bar n`` on the inflow, zero traction on the outflow, no slip elsewhere.

    ``inflow`` and ``outflow`` are position predicates; by default the inflow
    is the bottom edge of the box and the outflow the top edge.  ``outlets``
    maps names to predicates selecting outflow facets for flux reporting.
    """
    (x0, y0), (x1, y1) = grid.bbox
    tol = 1e-9 * max(x1 - x0, y1 - y0)
    inflow = inflow or (lambda x, y: np.asarray(y) < y0 + tol)
    outflow = outflow or (lambda x, y: np.asarray(y) > y1 - tol)
    xm = 0.5 * (x0 + x1)
    outlets = outlets or {"left": lambda x, y: outflow(x, y) & (np.asarray(x) < xm),
                          "right": lambda x, y: outflow(x, y) & (np.asarray(x) >= xm)}

    def tagger(x, y):
        return np.where(inflow(x, y) | outflow(x, y), NEUMANN, DIRICHLET)

    def traction(x, y, nx, ny):
        inn = inflow(x, y)
        return np.where(inn, -p_bar * nx, 0.0), np.where(inn, -p_bar * ny, 0.0)

    zero = lambda x, y: (np.zeros(np.shape(x)), np.zeros(np.shape(x)))
    problem = StokesProblem(f=zero, g=zero, t=traction, mu=mu)
    sim = Simulation("stokes", grid, levelset, problem, k, rho0, tagger,
                     StabilizationParams(beta), None, "scan")
    return ScanFlow(sim, inflow, outflow, outlets)


def boundary_flux(disc, solution: np.ndarray, select) -> float:
    """Integral of ``u . n`` over the boundary facets whose midpoints satisfy ``select``."""
    bd = disc.boundary()
    if len(bd.w) == 0:
        raise CaseError("no boundary facets")
    mids = np.array([f.midpoint for f in bd.facets]).reshape(-1, 2)
    chosen = np.asarray(select(mids[:, 0], mids[:, 1]), dtype=bool)
    if not chosen.any():
        raise CaseError("facet selection is empty")
    mask = chosen[bd.facet_id]
    n = disc.n_dofs
    U1, U2 = disc.local(solution[:n]), disc.local(solution[n:2 * n])
    un = bd.evaluate(U1) * bd.n[:, 0] + bd.evaluate(U2) * bd.n[:, 1]
    return float(np.sum(np.where(mask, un * bd.w, 0.0)))


def scan_grid(img: VoxelImage, divisions: int = 8) -> AmbientGrid:
    return AmbientGrid(img.extent, (divisions, divisions))
