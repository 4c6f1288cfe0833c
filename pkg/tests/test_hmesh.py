import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adaptiga.geom import Geometry, disk_levelset, square_levelset
from adaptiga.hmesh import (ACTIVE, CUT, INSIDE, OUTSIDE, REFINED, VOID, AmbientGrid, ElementRef, MeshError,
                            build_background, ghost_faces, refine, refine_uniform, skeleton_faces, write_vtk)

from helpers import everywhere_inside, random_refinement, uniform_mesh


def _sampled_cells(inside, grid, samples=129):
    """Cells containing at least one sample point for which ``inside`` holds."""
    hits = set()
    nx, ny = grid.base_divisions
    t = np.linspace(0.0, 1.0, samples)
    for j in range(ny):
        for i in range(nx):
            (x0, y0), (x1, y1) = grid.cell_box(0, i, j)
            X, Y = np.meshgrid(x0 + t * (x1 - x0), y0 + t * (y1 - y0))
            if inside(X, Y).any():
                hits.add((i, j))
    return hits


def test_rotated_square_background_matches_sampling_oracle():
    grid = AmbientGrid(((-1, -1), (1, 1)), (8, 8))
    geom = Geometry(square_levelset().rotated(20.0), grid, 6)
    mesh = build_background(grid, geom.classify, 6)
    th = np.deg2rad(20.0)

    def inside(x, y):
        xr, yr = np.cos(th) * x + np.sin(th) * y, -np.sin(th) * x + np.cos(th) * y
        return (np.abs(xr) < 0.5) & (np.abs(yr) < 0.5)

    oracle = _sampled_cells(inside, grid)
    assert {K.cell_index for K in mesh.elements()} == oracle
    # the rotated square only reaches 28 of the 64 cells
    assert len(mesh) == 28


def test_grid_inside_domain_is_fully_active():
    mesh = uniform_mesh(5)
    assert len(mesh) == 25
    assert all(st == ACTIVE for st in mesh.status[0].ravel())


def test_small_disk_activates_its_cell_only():
    grid = AmbientGrid(((0, 0), (1, 1)), (4, 4))
    geom = Geometry(disk_levelset(0.1, (0.375, 0.375)), grid, 5)
    mesh = build_background(grid, geom.classify, 5)
    assert mesh.elements() == [ElementRef(0, 1, 1)]
    assert (mesh.status[0] == VOID).sum() == 15


def test_disk_touching_neighbours_activates_them():
    grid = AmbientGrid(((0, 0), (1, 1)), (4, 4))
    geom = Geometry(disk_levelset(0.1, (0.3, 0.375)), grid, 5)
    mesh = build_background(grid, geom.classify, 5)
    assert {K.cell_index for K in mesh.elements()} == {(0, 1), (1, 1)}


def test_build_background_rejects_empty_domain():
    grid = AmbientGrid(((0, 0), (1, 1)), (2, 2))
    with pytest.raises(MeshError):
        build_background(grid, lambda l, i, j: OUTSIDE, 3)


def test_ambient_grid_validation():
    with pytest.raises(MeshError):
        AmbientGrid(((0, 0), (0, 1)), (2, 2))
    with pytest.raises(MeshError):
        AmbientGrid(((0, 0), (1, 1)), (0, 2))


def test_refine_interior_element():
    mesh = uniform_mesh(2)
    K = ElementRef(0, 1, 0)
    fine = refine(mesh, [K])
    assert not fine.is_active(K)
    assert fine.status[0][0, 1] == REFINED
    children = [L for L in fine.elements() if L.level == 1]
    assert sorted(L.cell_index for L in children) == [(2, 0), (2, 1), (3, 0), (3, 1)]
    assert len(fine) == 3 + 4


def test_refine_cut_element_gives_one_uncut_and_three_cut_children():
    grid = AmbientGrid(((0, 0), (1, 1)), (1, 1))
    geom = Geometry(disk_levelset(0.8, (0.0, 0.0)), grid, 4)
    mesh = build_background(grid, geom.classify, 4)
    assert geom.classify(0, 0, 0) == CUT
    fine = refine(mesh, mesh.elements())
    kinds = sorted(geom.classify(*K) for K in fine.elements())
    assert kinds == [CUT, CUT, CUT, INSIDE]


def test_refine_with_no_targets_is_identity():
    mesh = uniform_mesh(3)
    same = refine(mesh, [])
    assert same.elements() == mesh.elements()
    assert all(np.array_equal(a, b) for a, b in zip(same.status, mesh.status))


def test_refine_rejects_exhausted_depth():
    mesh = uniform_mesh(2, rho0=1)
    mesh = refine(mesh, [ElementRef(0, 0, 0)])
    K = ElementRef(1, 0, 0)
    assert mesh.rho(K) == 0
    again = refine(mesh, [K])
    assert again.rejected == (K,)
    assert again.is_active(K)


def test_refine_inactive_target_raises():
    mesh = uniform_mesh(2)
    with pytest.raises(MeshError):
        refine(mesh, [ElementRef(1, 0, 0)])


def test_refine_discards_children_outside_domain():
    grid = AmbientGrid(((0, 0), (1, 1)), (1, 1))
    geom = Geometry(disk_levelset(0.3, (0.0, 0.0)), grid, 4)
    mesh = refine(build_background(grid, geom.classify, 4), [ElementRef(0, 0, 0)])
    assert len(mesh) == 1
    assert (mesh.status[1] == VOID).sum() == 3


def test_element_size_examples():
    mesh = uniform_mesh(1)
    K = ElementRef(0, 0, 0)
    assert mesh.h(K) == 1.0
    assert refine(mesh, [K]).h(ElementRef(1, 0, 0)) == 0.5
    aniso = build_background(AmbientGrid(((0, 0), (1, 1)), (2, 8)), everywhere_inside, 2)
    assert aniso.h(ElementRef(0, 0, 0)) == pytest.approx(0.25, abs=1e-15)


def test_skeleton_face_counts():
    assert len(skeleton_faces(build_background(AmbientGrid(((0, 0), (2, 1)), (2, 1)), everywhere_inside, 2))) == 1
    assert len(skeleton_faces(uniform_mesh(2))) == 4
    assert len(skeleton_faces(uniform_mesh(1))) == 0


def test_ghost_face_examples():
    mesh = uniform_mesh(2)
    skel = skeleton_faces(mesh)
    assert set(ghost_faces(mesh, mesh.elements())) == set(skel)
    assert len(ghost_faces(mesh, [])) == 0
    corner = ElementRef(0, 0, 0)
    ghost = ghost_faces(mesh, [corner])
    assert len(ghost) == 2
    assert all(corner in (F.left, F.right) for F in ghost)


def test_hanging_faces_are_split_and_use_the_coarse_size():
    mesh = refine(uniform_mesh(2), [ElementRef(0, 0, 0)])
    faces = [F for F in skeleton_faces(mesh) if F.left.level != F.right.level]
    assert len(faces) == 4
    assert all(F.h_F == 0.5 and F.length == 0.25 for F in faces)


def _rasterized_interface_length(mesh):
    """Total length of active-element interfaces counted on the finest cells."""
    L = mesh.n_levels - 1
    nx, ny = mesh.grid.level_shape(L)
    owner = -np.ones((ny, nx), dtype=int)
    for e, K in enumerate(mesh.elements()):
        s = 2 ** (L - K.level)
        owner[K.j * s:(K.j + 1) * s, K.i * s:(K.i + 1) * s] = e
    hx, hy = mesh.grid.cell_size(L)
    vert = (owner[:, 1:] != owner[:, :-1]) & (owner[:, 1:] >= 0) & (owner[:, :-1] >= 0)
    horiz = (owner[1:, :] != owner[:-1, :]) & (owner[1:, :] >= 0) & (owner[:-1, :] >= 0)
    return vert.sum() * hy + horiz.sum() * hx


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(1, 4))
def test_mesh_invariants_under_random_refinement(seed, n):
    rng = np.random.default_rng(seed)
    mesh = random_refinement(uniform_mesh(n, rho0=3), rng, rounds=3, fraction=0.35)
    # partition of the ambient box
    area = sum(np.prod(np.subtract(*mesh.box(K)[::-1])) for K in mesh.elements())
    assert area == pytest.approx(1.0, rel=1e-12)
    # nestedness: every active element above level 0 has a refined parent
    for K in mesh.elements():
        if K.level > 0:
            assert mesh.status[K.level - 1][K.j // 2, K.i // 2] == REFINED
    # face completeness and the h_F rule
    faces = skeleton_faces(mesh)
    keys = [(F.left, F.right) for F in faces]
    assert len(keys) == len(set(keys))
    assert sum(F.length for F in faces) == pytest.approx(_rasterized_interface_length(mesh), rel=1e-12)
    for F in faces:
        assert F.h_F == max(mesh.h(F.left), mesh.h(F.right))


@settings(max_examples=10, deadline=None)
@given(cx=st.floats(0.2, 0.8), cy=st.floats(0.2, 0.8), r=st.floats(0.1, 0.4), seed=st.integers(0, 1000))
def test_immersed_partition_accounts_for_void_cells(cx, cy, r, seed):
    grid = AmbientGrid(((0, 0), (1, 1)), (4, 4))
    geom = Geometry(disk_levelset(r, (cx, cy)), grid, 4)
    mesh = random_refinement(build_background(grid, geom.classify, 4), np.random.default_rng(seed), rounds=2)
    active = sum(np.prod(np.subtract(*mesh.box(K)[::-1])) for K in mesh.elements())
    void = sum((st == VOID).sum() * np.prod(grid.cell_size(l)) for l, st in enumerate(mesh.status))
    assert active + void == pytest.approx(1.0, rel=1e-12)
    assert all(geom.classify(*K) != OUTSIDE for K in mesh.elements())


def test_element_order_is_level_then_row_then_column():
    mesh = random_refinement(uniform_mesh(3), np.random.default_rng(3), rounds=2, fraction=0.5)
    els = mesh.elements()
    assert els == sorted(els, key=ElementRef.sort_key)
    assert [mesh.index(K) for K in els] == list(range(len(els)))


def test_refine_uniform_halves_all_elements():
    mesh = refine_uniform(uniform_mesh(2))
    assert len(mesh) == 16
    assert {K.level for K in mesh.elements()} == {1}


def test_write_vtk(tmp_path):
    mesh = refine(uniform_mesh(2), [ElementRef(0, 1, 1)])
    path = tmp_path / "mesh.vtk"
    write_vtk(mesh, path, {"eta": np.arange(len(mesh), dtype=float)})
    text = path.read_text().splitlines()
    assert text[0] == "# vtk DataFile Version 3.0"
    assert f"CELLS {len(mesh)} {5 * len(mesh)}" in text
    assert "SCALARS eta double 1" in text
    assert "SCALARS level double 1" in text
    with pytest.raises(MeshError):
        write_vtk(mesh, path, {"eta": np.zeros(2)})
