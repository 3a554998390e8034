import numpy as np
import pytest

from dd_geometry import (
    FamilyError, NestedFamily, VRepSet, convex_weights, family_from_dict, family_to_dict,
    hull_union, membership, project_hull_2d, prune_redundant, smallest_level,
)
from dd_plant import ConstraintBoxes

SQUARE = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]


def _family(levels, boxes=None):
    boxes = boxes or ConstraintBoxes.symmetric(0.5, 4.0)
    return NestedFamily([VRepSet(v) for v in levels], T_ini=2, m=1, p=1, N=6, boxes=boxes)


def _nested_levels():
    return [
        np.zeros((1, 4)),
        [[0.0, 0.0, 0.0, 0.0], [0.1, 0.1, 1.0, 1.0], [-0.1, -0.1, -1.0, -1.0]],
        [[0.2, 0.2, 2.0, 2.0], [-0.2, -0.2, -2.0, -2.0], [0.0, 0.0, 2.0, -2.0]],
        [[0.4, 0.4, 4.0, 4.0], [-0.4, -0.4, -4.0, -4.0], [0.0, 0.0, 3.5, -3.5],
         [0.0, 0.0, -3.5, 3.5]],
    ]


def test_membership_of_vertices_and_midpoints():
    sq = VRepSet(SQUARE)
    for v in SQUARE:
        assert membership(sq, v)
    assert membership(sq, [0.5, 0.0])
    assert [0.25, 0.75] in sq


def test_membership_rejects_points_outside():
    sq = VRepSet(SQUARE)
    assert not membership(sq, [1.0 + 1e-3, 0.5])
    assert not membership(sq, [1.5, 1.5])
    # inside the bounding box but outside the triangle
    tri = VRepSet([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert not membership(tri, [0.9, 0.9])


def test_convex_weights_reproduce_the_point():
    sq = VRepSet(SQUARE)
    lam = convex_weights(sq, [0.3, 0.6])
    assert lam is not None
    assert np.all(lam >= 0.0) and lam.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(sq.vertices.T @ lam, [0.3, 0.6], atol=1e-7)


def test_membership_agrees_with_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(200):
        d = int(rng.integers(1, 4))
        k = int(rng.integers(1, 6))
        V = rng.uniform(-1.0, 1.0, (k, d))
        if rng.random() < 0.5:
            # a point built as a convex combination is always inside
            lam = rng.dirichlet(np.ones(k))
            assert membership(VRepSet(V), V.T @ lam)
        else:
            x = rng.uniform(-1.5, 1.5, d)
            grid = rng.dirichlet(np.ones(k), size=4000)
            closest = np.min(np.max(np.abs(grid @ V - x), axis=1))
            if closest <= 1e-7:
                assert membership(VRepSet(V), x)
            if not membership(VRepSet(V), x):
                assert closest > 1e-7


def test_dimension_mismatch_raises():
    with pytest.raises(ValueError, match="dimension"):
        membership(VRepSet(SQUARE), [0.0, 0.0, 0.0])


def test_hull_union_absorbs_collinear_point():
    seg = VRepSet([[0.0, 0.0], [1.0, 0.0]])
    grown = hull_union(seg, [[2.0, 0.0]])
    assert sorted(map(tuple, grown.vertices)) == [(0.0, 0.0), (2.0, 0.0)]


def test_hull_union_with_interior_point_is_unchanged():
    sq = VRepSet(SQUARE)
    assert hull_union(sq, [[0.5, 0.5]]) is sq


def test_hull_union_is_idempotent_on_members():
    sq = VRepSet(SQUARE)
    again = hull_union(sq, SQUARE)
    for v in sq.vertices:
        assert membership(again, v)
    for v in again.vertices:
        assert membership(sq, v)


def test_prune_keeps_simplex_and_drops_collinear_middle():
    simplex = VRepSet(np.vstack([np.zeros(3), np.eye(3)]))
    assert prune_redundant(simplex).n_vertices == 4
    line = prune_redundant(VRepSet([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]))
    assert sorted(map(tuple, line.vertices)) == [(0.0, 0.0), (2.0, 2.0)]


def test_prune_preserves_the_hull_of_random_points():
    rng = np.random.default_rng(9)
    pts = rng.standard_normal((100, 4))
    pruned = prune_redundant(VRepSet(pts))
    assert pruned.n_vertices < 100
    for x in pts:
        assert membership(pruned, x)


def test_smallest_level_examples():
    fam = _family(_nested_levels())
    assert smallest_level(fam, np.zeros(4)) == 0
    assert smallest_level(fam, [0.0, 0.0, 3.5, -3.5]) == 3
    assert smallest_level(fam, [0.05, 0.05, 0.5, 0.5]) == 1
    assert smallest_level(fam, [0.0, 0.0, 100.0, 100.0]) is None


def test_validate_accepts_nested_family_and_rejects_bad_ones():
    _family(_nested_levels()).validate()

    not_nested = _nested_levels()
    not_nested[2] = [[0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 2.0, -2.0]]
    with pytest.raises(FamilyError, match="not in level 2"):
        _family(not_nested).validate()

    out_of_box = _nested_levels()
    out_of_box[3] = out_of_box[3] + [[0.0, 0.0, 4.5, 4.5]]
    with pytest.raises(FamilyError, match="outside the constraint boxes"):
        _family(out_of_box).validate()

    shifted = _nested_levels()
    shifted[0] = [[0.1, 0.0, 0.0, 0.0]]
    with pytest.raises(FamilyError, match="equilibrium"):
        _family(shifted).validate()


def test_family_dimension_is_checked():
    with pytest.raises(FamilyError, match="dimension"):
        _family([np.zeros((1, 3))])


def test_family_dict_round_trip_is_bitwise():
    fam = _family(_nested_levels())
    back = family_from_dict(family_to_dict(fam))
    assert back.n_star == 3
    for a, b in zip(fam.levels, back.levels):
        np.testing.assert_array_equal(a.vertices, b.vertices)
    np.testing.assert_array_equal(back.boxes.y_hi, [4.0])


def test_family_dict_version_mismatch_names_both_versions():
    data = family_to_dict(_family(_nested_levels()))
    data["version"] = 99
    with pytest.raises(FamilyError, match="99.*version 1"):
        family_from_dict(data)


def test_family_dict_missing_field():
    data = family_to_dict(_family(_nested_levels()))
    del data["levels"]
    with pytest.raises(FamilyError, match="malformed"):
        family_from_dict(data)


def test_projection_of_embedded_square_is_ccw():
    V = np.zeros((4, 4))
    V[:, 2:] = SQUARE
    poly = project_hull_2d(VRepSet(V), (2, 3))
    assert len(poly) == 4
    x, y = poly[:, 0], poly[:, 1]
    area = 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
    assert area == pytest.approx(1.0)


def test_degenerate_projections():
    same = VRepSet([[0.0, 1.0, 5.0], [0.0, 1.0, -5.0]])
    assert project_hull_2d(same, (0, 1)).shape == (1, 2)
    line = VRepSet([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
    np.testing.assert_array_equal(project_hull_2d(line, (0, 1)), [[0.0, 0.0], [2.0, 2.0]])


def test_prune_keeps_membership_of_random_points():
    rng = np.random.default_rng(31)
    vset = VRepSet(rng.uniform(-1.0, 1.0, (60, 4)))
    pruned = prune_redundant(vset)
    for x in rng.uniform(-1.2, 1.2, (1000, 4)):
        assert membership(pruned, x) == membership(vset, x), x


def test_every_vertex_is_a_member_at_tight_and_loose_tolerances():
    rng = np.random.default_rng(32)
    vset = VRepSet(rng.uniform(-4.0, 4.0, (150, 4)))
    for tol in (1e-7, 1e-5):
        for v in vset.vertices:
            w = convex_weights(vset, v, tol)
            assert w is not None
            assert np.max(np.abs(vset.vertices.T @ w - v)) <= tol + 1e-9
