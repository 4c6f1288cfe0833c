"""Hierarchical Cartesian background meshes.

A mesh is a stack of dyadic grids over a rectangular ambient box.  Level ``l``
has ``base_divisions * 2**l`` cells per axis.  Every level keeps a status
array, indexed ``[j, i]``, that records whether a cell was never created, is
active, has been refined, or was created but discarded because it misses the
physical domain.  Discarded ("void") cells still count as refined territory for
the spline hierarchy, which keeps the hierarchical space unaffected by the
immersed boundary.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)

NONE, ACTIVE, REFINED, VOID = 0, 1, 2, 3

INSIDE, OUTSIDE, CUT = "inside", "outside", "cut"


class MeshError(ValueError):
    """Raised for invalid mesh construction or refinement requests."""


class ElementRef(NamedTuple):
    level: int
    i: int
    j: int

    @property
    def cell_index(self) -> tuple[int, int]:
        return (self.i, self.j)

    def sort_key(self):
        return (self.level, self.j, self.i)


@dataclass(frozen=True)
class AmbientGrid:
    """Axis-aligned ambient box ``((xmin, ymin), (xmax, ymax))`` with a base grid."""

    bbox: tuple[tuple[float, float], tuple[float, float]]
    base_divisions: tuple[int, int]

    def __post_init__(self):
        (x0, y0), (x1, y1) = self.bbox
        if not (x1 > x0 and y1 > y0):
            raise MeshError(f"degenerate ambient box {self.bbox}")
        nx, ny = self.base_divisions
        if int(nx) < 1 or int(ny) < 1:
            raise MeshError(f"base divisions must be >= 1, got {self.base_divisions}")
        object.__setattr__(self, "bbox", ((float(x0), float(y0)), (float(x1), float(y1))))
        object.__setattr__(self, "base_divisions", (int(nx), int(ny)))

    @property
    def origin(self) -> tuple[float, float]:
        return self.bbox[0]

    @property
    def lengths(self) -> tuple[float, float]:
        (x0, y0), (x1, y1) = self.bbox
        return (x1 - x0, y1 - y0)

    def level_shape(self, level: int) -> tuple[int, int]:
        nx, ny = self.base_divisions
        return (nx << level, ny << level)

    def cell_size(self, level: int) -> tuple[float, float]:
        nx, ny = self.level_shape(level)
        lx, ly = self.lengths
        return (lx / nx, ly / ny)

    def cell_box(self, level: int, i: int, j: int):
        hx, hy = self.cell_size(level)
        x0, y0 = self.origin
        return ((x0 + i * hx, y0 + j * hy), (x0 + (i + 1) * hx, y0 + (j + 1) * hy))


ClassifyFn = Callable[[int, int, int], str]


class HierMesh:
    """Immutable hierarchical mesh.

    ``classify(level, i, j)`` returns ``"inside"``, ``"outside"`` or ``"cut"``
    for a background cell.  ``rho0`` is the subcell depth of level-0 cells;
    an element at level ``l`` has depth ``rho0 - l`` and cannot be refined
    once that reaches zero.
    """

    def __init__(self, grid: AmbientGrid, status: Sequence[np.ndarray], classify: ClassifyFn,
                 rho0: int, rejected: tuple = ()):
        self.grid = grid
        self.status = tuple(status)
        for s in self.status:
            s.setflags(write=False)
        self.classify = classify
        self.rho0 = int(rho0)
        self.rejected = tuple(rejected)
        self._elements = None
        self._index = None

    @property
    def n_levels(self) -> int:
        return len(self.status)

    def elements(self) -> list[ElementRef]:
        """Active elements ordered by (level, j, i)."""
        if self._elements is None:
            out = []
            for level, st in enumerate(self.status):
                jj, ii = np.nonzero(st == ACTIVE)
                out.extend(ElementRef(level, int(i), int(j)) for j, i in zip(jj, ii))
            self._elements = out
            self._index = {K: e for e, K in enumerate(out)}
        return self._elements

    def index(self, K: ElementRef) -> int:
        self.elements()
        return self._index[K]

    def __len__(self):
        return len(self.elements())

    def is_active(self, K: ElementRef) -> bool:
        if K.level >= self.n_levels:
            return False
        st = self.status[K.level]
        ny, nx = st.shape
        return 0 <= K.i < nx and 0 <= K.j < ny and st[K.j, K.i] == ACTIVE

    def rho(self, K: ElementRef) -> int:
        return self.rho0 - K.level

    def box(self, K: ElementRef):
        return self.grid.cell_box(K.level, K.i, K.j)

    def h(self, K: ElementRef) -> float:
        hx, hy = self.grid.cell_size(K.level)
        return float(np.sqrt(hx * hy))

    def refined_mask(self, level: int) -> np.ndarray:
        if level >= self.n_levels:
            nx, ny = self.grid.level_shape(level)
            return np.zeros((ny, nx), dtype=bool)
        return self.status[level] == REFINED

    def exists_mask(self, level: int) -> np.ndarray:
        if level >= self.n_levels:
            nx, ny = self.grid.level_shape(level)
            return np.zeros((ny, nx), dtype=bool)
        return self.status[level] != NONE

    def _void_cover(self, level: int) -> np.ndarray:
        """Level cells lying in a void cell of this or a coarser level."""
        nx, ny = self.grid.base_divisions
        cover = np.zeros((ny, nx), dtype=bool)
        for m in range(level + 1):
            if m > 0:
                cover = np.kron(cover, np.ones((2, 2), dtype=bool))
            if m < self.n_levels:
                cover |= self.status[m] == VOID
        return cover

    def territory(self, level: int) -> np.ndarray:
        """Cells of the level-``level`` refinement territory.

        These are the created cells plus everything covered by void cells;
        void cells hold no elements and count as refined at every finer level.
        """
        return self.exists_mask(level) | self._void_cover(level)

    def next_territory(self, level: int) -> np.ndarray:
        """Level cells that belong to the territory of the next level."""
        return self.refined_mask(level) | self._void_cover(level)

    def cut_elements(self) -> list[ElementRef]:
        return [K for K in self.elements() if self.classify(*K) == CUT]

    def covering_active(self, level: int, i: int, j: int):
        """Active element covering level-``level`` cell (i, j).

        Returns an ElementRef, the string ``"finer"`` when the cell has been
        refined, or None when the cell lies outside the box or is void.
        """
        nx, ny = self.grid.level_shape(level)
        if not (0 <= i < nx and 0 <= j < ny):
            return None
        for m in range(min(level, self.n_levels - 1), -1, -1):
            s = level - m
            im, jm = i >> s, j >> s
            st = self.status[m][jm, im]
            if st == ACTIVE:
                return ElementRef(m, im, jm)
            if st == VOID:
                return None
            if st == REFINED:
                return "finer" if m == level else None
        return None


def build_background(grid: AmbientGrid, inside_test: ClassifyFn, rho0: int) -> HierMesh:
    """Level-0 mesh keeping every cell that meets the domain."""
    if rho0 < 0:
        raise MeshError("rho0 must be non-negative")
    nx, ny = grid.base_divisions
    st = np.full((ny, nx), VOID, dtype=np.int8)
    for j in range(ny):
        for i in range(nx):
            if inside_test(0, i, j) != OUTSIDE:
                st[j, i] = ACTIVE
    if not (st == ACTIVE).any():
        raise MeshError("domain does not intersect the ambient box")
    return HierMesh(grid, [st], inside_test, rho0)


def refine(mesh: HierMesh, targets: Iterable[ElementRef]) -> HierMesh:
    """Bisect the target elements; children missing the domain are discarded.

    Targets with no subcell depth left are skipped and listed in ``rejected``
    on the returned mesh.
    """
    targets = sorted(set(targets), key=ElementRef.sort_key)
    status = [s.copy() for s in mesh.status]
    rejected = []
    for K in targets:
        if not mesh.is_active(K):
            raise MeshError(f"refinement target {K} is not an active element")
        if mesh.rho(K) <= 0:
            rejected.append(K)
            continue
        if K.level + 1 >= len(status):
            nx, ny = mesh.grid.level_shape(K.level + 1)
            status.append(np.zeros((ny, nx), dtype=np.int8))
        status[K.level][K.j, K.i] = REFINED
        fine = status[K.level + 1]
        for dj in (0, 1):
            for di in (0, 1):
                ci, cj = 2 * K.i + di, 2 * K.j + dj
                inside = mesh.classify(K.level + 1, ci, cj) != OUTSIDE
                fine[cj, ci] = ACTIVE if inside else VOID
    if rejected:
        log.info("refinement rejected for %d elements with exhausted subcell depth", len(rejected))
    return HierMesh(mesh.grid, status, mesh.classify, mesh.rho0, rejected)


def refine_uniform(mesh: HierMesh) -> HierMesh:
    return refine(mesh, [K for K in mesh.elements() if mesh.rho(K) > 0])


@dataclass(frozen=True)
class Face:
    """Interior face between ``left`` (smaller coordinate) and ``right``.

    ``axis`` is the coordinate axis of the unit normal, which points from
    left to right.  ``coord`` is the fixed coordinate and ``span`` the
    extent along the other axis.
    """

    left: ElementRef
    right: ElementRef
    axis: int
    coord: float
    span: tuple[float, float]
    h_F: float

    @property
    def normal(self) -> tuple[float, float]:
        return (1.0, 0.0) if self.axis == 0 else (0.0, 1.0)

    @property
    def segment(self):
        t0, t1 = self.span
        if self.axis == 0:
            return ((self.coord, t0), (self.coord, t1))
        return ((t0, self.coord), (t1, self.coord))

    @property
    def length(self) -> float:
        return self.span[1] - self.span[0]


@dataclass(frozen=True)
class FaceSet:
    faces: tuple
    kind: str

    def __len__(self):
        return len(self.faces)

    def __iter__(self):
        return iter(self.faces)


_SIDES = ((0, +1), (0, -1), (1, +1), (1, -1))


def skeleton_faces(mesh: HierMesh) -> FaceSet:
    """Maximal interior faces of the active mesh; hanging faces use the finer edge."""
    faces = []
    for K in mesh.elements():
        (x0, y0), (x1, y1) = mesh.box(K)
        for axis, sgn in _SIDES:
            ni = K.i + (sgn if axis == 0 else 0)
            nj = K.j + (sgn if axis == 1 else 0)
            nbr = mesh.covering_active(K.level, ni, nj)
            if nbr is None or nbr == "finer":
                continue
            if nbr.level == K.level and sgn < 0:
                continue
            left, right = (K, nbr) if sgn > 0 else (nbr, K)
            if axis == 0:
                coord, span = (x1 if sgn > 0 else x0), (y0, y1)
            else:
                coord, span = (y1 if sgn > 0 else y0), (x0, x1)
            hF = max(mesh.h(K), mesh.h(nbr))
            faces.append(Face(left, right, axis, coord, span, hF))
    return FaceSet(tuple(faces), "skeleton")


def ghost_faces(mesh: HierMesh, cut_set, skeleton: FaceSet | None = None) -> FaceSet:
    """Skeleton faces with at least one neighbouring cut element."""
    cut_set = set(cut_set)
    skeleton = skeleton if skeleton is not None else skeleton_faces(mesh)
    return FaceSet(tuple(F for F in skeleton if F.left in cut_set or F.right in cut_set), "ghost")


def write_vtk(mesh: HierMesh, path, cell_data: dict | None = None) -> None:
    """Legacy ASCII VTK unstructured grid, one quad per active element."""
    elements = mesh.elements()
    n = len(elements)
    data = {
        "level": np.array([K.level for K in elements], dtype=float),
        "h_K": np.array([mesh.h(K) for K in elements]),
        "rho": np.array([mesh.rho(K) for K in elements], dtype=float),
    }
    for key, val in (cell_data or {}).items():
        val = np.asarray(val, dtype=float)
        if val.shape != (n,):
            raise MeshError(f"cell data {key!r} has shape {val.shape}, expected ({n},)")
        data[key] = val
    lines = ["# vtk DataFile Version 3.0", "hierarchical mesh", "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {4 * n} double"]
    for K in elements:
        (x0, y0), (x1, y1) = mesh.box(K)
        for x, y in ((x0, y0), (x1, y0), (x1, y1), (x0, y1)):
            lines.append(f"{x!r} {y!r} 0.0")
    lines.append(f"CELLS {n} {5 * n}")
    lines.extend(f"4 {4 * e} {4 * e + 1} {4 * e + 2} {4 * e + 3}" for e in range(n))
    lines.append(f"CELL_TYPES {n}")
    lines.extend("9" for _ in range(n))
    lines.append(f"CELL_DATA {n}")
    for key, val in data.items():
        lines.append(f"SCALARS {key} double 1")
        lines.append("LOOKUP_TABLE default")
        lines.extend(repr(float(v)) for v in val)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
