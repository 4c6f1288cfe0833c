import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adaptiga.cases import make_case
from adaptiga.geom import (CUT, DIRICHLET, INSIDE, NEUMANN, OUTSIDE, BoundaryFacet, Geometry, GeometryError,
                           annulus_levelset, classify_element, cut_quadrature, disk_levelset, halfplane_levelset,
                           lshape_levelset, square_levelset, star_levelset, tag_facets, write_facets_csv)
from adaptiga.hmesh import AmbientGrid, ElementRef, build_background, refine


def test_classify_far_outside():
    assert classify_element(disk_levelset(0.2), ((2, 2), (3, 3)), 3) == OUTSIDE


def test_classify_box_around_small_disk_is_cut():
    assert classify_element(disk_levelset(0.1, (0.5, 0.5)), ((0, 0), (1, 1)), 4) == CUT


def test_classify_inside_star_agrees_with_dense_sampling():
    ls = star_levelset()
    box = ((-0.2, -0.2), (0.2, 0.2))
    X, Y = np.meshgrid(np.linspace(-0.2, 0.2, 401), np.linspace(-0.2, 0.2, 401))
    assert (ls(X, Y) > 0).all()
    assert classify_element(ls, box, 3) == INSIDE


def test_interior_element_gets_plain_gauss_rule():
    q = cut_quadrature(disk_levelset(5.0), ((0, 0), (0.5, 0.25)), 3, 2)
    assert q.weights.sum() == pytest.approx(0.125, rel=1e-14)
    assert q.facets == []


def test_disk_area_and_perimeter():
    q = cut_quadrature(disk_levelset(0.4, (0.5, 0.5)), ((0, 0), (1, 1)), 6, 3)
    assert q.weights.sum() == pytest.approx(np.pi * 0.16, abs=1e-3)
    assert sum(f.length for f in q.facets) == pytest.approx(2 * np.pi * 0.4, abs=1e-2)


@pytest.mark.parametrize("rho", [1, 2, 3, 4])
def test_half_plane_is_reproduced_exactly(rho):
    q = cut_quadrature(halfplane_levelset((1.0, 0.0), 0.5), ((0, 0), (1, 1)), rho, 2)
    assert q.weights.sum() == pytest.approx(0.5, abs=1e-14)
    assert sum(f.length for f in q.facets) == pytest.approx(1.0, abs=1e-14)


def test_gauss_order_must_be_positive():
    with pytest.raises(GeometryError):
        cut_quadrature(disk_levelset(1.0), ((0, 0), (1, 1)), 2, 0)


@settings(max_examples=20, deadline=None)
@given(cx=st.floats(0.3, 0.7), cy=st.floats(0.3, 0.7), r=st.floats(0.05, 0.3), rho=st.integers(0, 5),
       order=st.integers(1, 4))
def test_cut_rule_invariants(cx, cy, r, rho, order):
    ls = disk_levelset(r, (cx, cy))
    q = cut_quadrature(ls, ((0, 0), (1, 1)), rho, order)
    assert np.all(q.weights > 0)
    assert np.all((q.points >= -1e-14) & (q.points <= 1 + 1e-14))
    assert q.weights.sum() <= 1.0 + 1e-14
    for f in q.facets:
        assert np.hypot(*f.normal) == pytest.approx(1.0, abs=1e-14)
        if r > 4 * 2.0 ** -rho:  # normals only follow the gradient once the circle is resolved
            gx, gy = ls.gradient(*f.midpoint)
            assert f.normal[0] * gx + f.normal[1] * gy < 0


def test_disk_measure_converges_at_fourth_power_of_depth():
    ls = disk_levelset(0.4, (0.5, 0.5))
    errs = [abs(cut_quadrature(ls, ((0, 0), (1, 1)), rho, 3).weights.sum() - np.pi * 0.16) for rho in range(2, 7)]
    assert all(b < a for a, b in zip(errs, errs[1:]))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all(ratios > 3.0) and np.all(ratios < 5.5)
    slope = np.polyfit(np.arange(2, 7), np.log(errs), 1)[0]
    assert slope == pytest.approx(-np.log(4), rel=0.1)
    perim = [abs(sum(f.length for f in cut_quadrature(ls, ((0, 0), (1, 1)), rho, 2).facets) - 0.8 * np.pi)
             for rho in range(2, 7)]
    assert all(b < a for a, b in zip(perim, perim[1:]))


def _facet_key(f):
    return (tuple(np.round(f.p0, 12)), tuple(np.round(f.p1, 12)))


@settings(max_examples=10, deadline=None)
@given(angle=st.floats(0, 90), which=st.sampled_from(["star", "lshape", "square"]))
def test_geometry_is_invariant_under_refinement(angle, which):
    ls = {"star": star_levelset(), "lshape": lshape_levelset(), "square": square_levelset(0.6)}[which]
    ls = ls.rotated(angle)
    grid = AmbientGrid(((-1.5, -1.5), (1.5, 1.5)), (4, 4))
    geom = Geometry(ls, grid, 5)
    mesh = build_background(grid, geom.classify, 5)
    for K in mesh.cut_elements():
        parent = geom.cut_quadrature(K, 3)
        kids = [ElementRef(1, 2 * K.i + a, 2 * K.j + b) for a in (0, 1) for b in (0, 1)]
        kids = [L for L in kids if geom.classify(*L) != OUTSIDE]
        rules = [geom.cut_quadrature(L, 3) for L in kids]
        w = np.concatenate([q.weights for q in rules])
        x = np.vstack([q.points for q in rules])
        assert w.sum() == pytest.approx(parent.weights.sum(), abs=1e-12)
        assert np.sum(w * x[:, 0] * x[:, 1]) == pytest.approx(
            np.sum(parent.weights * parent.points[:, 0] * parent.points[:, 1]), abs=1e-12)
        kid_facets = sorted(_facet_key(f) for q in rules for f in q.facets)
        assert kid_facets == sorted(_facet_key(f) for f in parent.facets)


def test_refined_mesh_reproduces_domain_area():
    grid = AmbientGrid(((-1, -1), (1, 1)), (8, 8))
    geom = Geometry(star_levelset().rotated(30), grid, 4)
    mesh = build_background(grid, geom.classify, 4)
    area0 = sum(geom.tessellation(K).area for K in mesh.elements())
    fine = refine(mesh, mesh.cut_elements())
    area1 = sum(geom.tessellation(K).area for K in fine.elements())
    assert area1 == pytest.approx(area0, rel=1e-12)


@pytest.mark.parametrize("ls", [star_levelset().rotated(17), lshape_levelset().rotated(20),
                                square_levelset().rotated(20), disk_levelset(0.7)],
                         ids=["star", "lshape", "square", "disk"])
def test_normals_point_out_of_the_domain(ls):
    grid = AmbientGrid(((-1.5, -1.5), (1.5, 1.5)), (6, 6))
    geom = Geometry(ls, grid, 4)
    mesh = build_background(grid, geom.classify, 4)
    for K in mesh.cut_elements():
        for f in geom.cut_quadrature(K, 2).facets:
            # step inwards and outwards along the normal
            mx, my = f.midpoint
            d = 1e-3 * f.length
            assert ls(mx - d * f.normal[0], my - d * f.normal[1]) > ls(mx + d * f.normal[0], my + d * f.normal[1])


def test_annulus_normals_on_arcs_and_box_edge():
    grid = AmbientGrid(((0, 0), (4, 4)), (9, 9))
    ls = annulus_levelset()
    geom = Geometry(ls, grid, 4)
    mesh = build_background(grid, geom.classify, 4)
    edge = 0
    for K in mesh.elements():
        for f in geom.cut_quadrature(K, 2).facets:
            mx, my = f.midpoint
            if mx < 1e-12 or my < 1e-12:
                edge += 1
                assert f.normal in ((-1.0, 0.0), (0.0, -1.0))
            else:
                gx, gy = ls.gradient(mx, my)
                assert f.normal[0] * gx + f.normal[1] * gy < 0
    assert edge > 0


def test_facet_rule_weights_sum_to_length():
    grid = AmbientGrid(((0, 0), (1, 1)), (1, 1))
    geom = Geometry(disk_levelset(0.4, (0.5, 0.5)), grid, 3)
    tess = geom.tessellation(ElementRef(0, 0, 0))
    _, w = tess.facet_rule(3)
    lengths = np.linalg.norm(tess.facets[:, 1] - tess.facets[:, 0], axis=1)
    assert w.sum() == pytest.approx(lengths.sum(), rel=1e-14)


def _facets(ls, grid, rho=4):
    geom = Geometry(ls, grid, rho)
    mesh = build_background(grid, geom.classify, rho)
    return [f for K in mesh.elements() for f in geom.cut_quadrature(K, 2).facets]


def test_all_dirichlet_tagger():
    facets = _facets(disk_levelset(0.3), AmbientGrid(((-1, -1), (1, 1)), (4, 4)))
    tagged = tag_facets(facets, lambda x, y: np.full(np.shape(x), DIRICHLET))
    assert tagged and all(f.tag == DIRICHLET for f in tagged)


def test_unit_square_case_is_all_dirichlet():
    case = make_case("unit-square")
    tagged = tag_facets(_facets(case.levelset, case.grid), case.tagger)
    assert tagged and all(f.tag == DIRICHLET for f in tagged)


def test_lshape_tags_the_corner_legs_dirichlet():
    case = make_case("lshape", angle=0.0)
    tagged = tag_facets(_facets(case.levelset, case.grid), case.tagger)
    for f in tagged:
        mx, my = f.midpoint
        on_leg = (abs(mx) < 1e-9 and my < 0) or (abs(my) < 1e-9 and mx < 0)
        near_leg = min(abs(mx) + max(my, 0), abs(my) + max(mx, 0)) < 0.05 and max(abs(mx), abs(my)) < 0.95
        if on_leg or near_leg:
            assert f.tag == DIRICHLET
        elif max(abs(mx), abs(my)) > 0.95:
            assert f.tag == NEUMANN
    assert {f.tag for f in tagged} == {DIRICHLET, NEUMANN}
    # the exact solution vanishes on the Dirichlet legs
    pts = np.array([f.midpoint for f in tagged if f.tag == DIRICHLET])
    assert np.max(np.abs(case.exact.value(pts[:, 0], pts[:, 1]))) < 0.05


def test_unknown_tag_is_rejected():
    f = BoundaryFacet((0, 0), (1, 0), (0, -1))
    with pytest.raises(GeometryError):
        tag_facets([f], lambda x, y: np.array(["X"]))


def test_builtin_level_set_values():
    assert star_levelset()(0.0, 0.0) == pytest.approx(0.6)
    assert annulus_levelset()(2.5, 0.001) > 0
    assert lshape_levelset()(0.0, 0.0) == 0.0


def test_lattice_depth_limits_classification():
    grid = AmbientGrid(((0, 0), (1, 1)), (2, 2))
    geom = Geometry(disk_levelset(0.3, (0.5, 0.5)), grid, 2)
    with pytest.raises(GeometryError):
        geom.classify(3, 0, 0)
    with pytest.raises(GeometryError):
        Geometry(disk_levelset(0.3), grid, -1)


def test_write_facets_csv(tmp_path):
    facets = tag_facets(_facets(disk_levelset(0.3), AmbientGrid(((-1, -1), (1, 1)), (2, 2)), 2),
                        lambda x, y: np.where(np.asarray(x) > 0, NEUMANN, DIRICHLET))
    path = tmp_path / "facets.csv"
    write_facets_csv(facets, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["x0", "y0", "x1", "y1", "nx", "ny", "tag"]
    assert len(rows) == len(facets) + 1
    assert {r[-1] for r in rows[1:]} == {DIRICHLET, NEUMANN}
