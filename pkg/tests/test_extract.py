"""Level-set extraction: case tables, chaining, convergence, file formats."""

import numpy as np
import pytest

from steik import extract
from steik.extract import (Contour2D, Mesh, grid_field, load_contour_csv,
                           load_obj, marching_cubes, marching_squares,
                           save_contour_csv, save_obj, triangle_areas)


def circle_field(P):
    return np.sqrt((P ** 2).sum(-1)) - 0.5


def sphere_field(P):
    return np.sqrt((P ** 2).sum(-1)) - 0.5


def all_points(contour):
    return np.concatenate(list(contour.polylines), axis=0)


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------

def test_mesh_validation():
    v = np.zeros((3, 3))
    Mesh(v, np.array([[0, 1, 2]]))
    Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    with pytest.raises(ValueError):
        Mesh(v, np.array([[0, 1, 3]]))       # index out of range
    with pytest.raises(ValueError):
        Mesh(v, np.array([[0, 1, -1]]))
    with pytest.raises(ValueError):
        Mesh(np.zeros((3, 2)), np.array([[0, 1, 2]]))


def test_contour_validation():
    Contour2D([np.array([[0.0, 0.0], [1.0, 0.0]])])
    with pytest.raises(ValueError):
        Contour2D([np.array([[0.0, 0.0], [0.0, 0.0]])])
    with pytest.raises(ValueError):
        Contour2D([np.array([[0.0, 0.0]])])
    with pytest.raises(ValueError):
        Contour2D([np.zeros((4, 3))])


# ---------------------------------------------------------------------------
# marching squares
# ---------------------------------------------------------------------------

def test_circle_contour_single_closed_loop():
    c = marching_squares(circle_field, (-1.0, 1.0), 256)
    assert len(c.polylines) == 1
    line = c.polylines[0]
    assert np.array_equal(line[0], line[-1])
    assert c.total_length() == pytest.approx(2 * np.pi * 0.5, rel=0.02)
    r = np.linalg.norm(all_points(c), axis=1)
    assert np.abs(r - 0.5).max() < 1e-3


def test_constant_fields_give_empty_contour():
    for sign in (1.0, -1.0):
        c = marching_squares(lambda P: sign * np.ones(len(P)), (-1, 1), 16)
        assert c.polylines == []


def test_square_contour_has_four_right_angle_corners():
    # Chebyshev-norm field: the contour is the square itself, so every
    # point satisfies max(|x|,|y|) = 0.3 exactly and the turning angle
    # concentrates 90 degrees at each corner
    sq = lambda P: np.maximum(np.abs(P[:, 0]), np.abs(P[:, 1])) - 0.3
    c = marching_squares(sq, (-1.0, 1.0), 128)
    assert len(c.polylines) == 1
    line = c.polylines[0]
    assert np.array_equal(line[0], line[-1])
    assert np.abs(np.max(np.abs(line), axis=1) - 0.3).max() == 0.0
    assert c.total_length() == pytest.approx(2.4, rel=0.02)

    seg = np.diff(line, axis=0)                # closed: segments wrap
    ang = np.arctan2(seg[:, 1], seg[:, 0])
    turn = (np.diff(ang, append=ang[:1]) + np.pi) % (2 * np.pi) - np.pi
    verts = np.vstack([line[1:-1], line[:1]])  # vertex following each turn
    h = 2.0 / 128
    for corner in ([0.3, 0.3], [0.3, -0.3], [-0.3, 0.3], [-0.3, -0.3]):
        near = np.abs(verts - corner).max(axis=1) < 2 * h
        total = np.abs(turn[near]).sum()
        assert total == pytest.approx(np.pi / 2, abs=0.02)
    far = ~np.any([np.abs(verts - c0).max(axis=1) < 2 * h for c0 in
                   ([0.3, 0.3], [0.3, -0.3], [-0.3, 0.3], [-0.3, -0.3])],
                  axis=0)
    assert np.abs(turn[far]).max() < 1e-9


def test_saddle_cells_follow_center_sample():
    # checkerboard corner values make every cell ambiguous; the bilinear
    # cell-center sign selects the topology
    flat = np.array([[-1.0, 1.0, -1.0],
                     [1.0, -1.0, 1.0],
                     [-1.0, 1.0, -1.0]])
    deep = np.array([[-3.0, 1.0, -3.0],
                     [1.0, -3.0, 1.0],
                     [-3.0, 1.0, -3.0]])
    c_out = marching_squares(grid_field(flat, (0.0, 1.0)), (0.0, 1.0), 2)
    c_in = marching_squares(grid_field(deep, (0.0, 1.0)), (0.0, 1.0), 2)
    # centers exactly 0 count as outside: isolated inside corners plus a
    # closed diamond around the middle node
    assert len(c_out.polylines) == 5
    assert sum(np.array_equal(l[0], l[-1]) for l in c_out.polylines) == 1
    # negative centers connect the inside regions: four open chains
    assert len(c_in.polylines) == 4
    assert all(not np.array_equal(l[0], l[-1]) for l in c_in.polylines)


def test_every_crossing_separates_opposite_signs():
    field = lambda P: np.sin(3 * P[:, 0]) * np.cos(2 * P[:, 1]) + 0.1 * P[:, 0]
    res = 64
    c = marching_squares(field, (-2.0, 2.0), res)
    xs = np.linspace(-2.0, 2.0, res + 1)
    x_index = {float(x): i for i, x in enumerate(xs)}
    vals = field(np.stack(np.meshgrid(xs, xs, indexing="ij"),
                          axis=-1).reshape(-1, 2)).reshape(res + 1, res + 1)
    inside = vals < 0
    checked = 0
    for p in all_points(c):
        on_x = float(p[0]) in x_index
        on_y = float(p[1]) in x_index
        if on_x and on_y:
            continue                           # crossing exactly at a node
        if on_y:                               # edge along axis 0
            j = x_index[float(p[1])]
            i = int(np.searchsorted(xs, p[0]) - 1)
            assert inside[i, j] != inside[i + 1, j]
        else:
            i = x_index[float(p[0])]
            j = int(np.searchsorted(xs, p[1]) - 1)
            assert inside[i, j] != inside[i, j + 1]
        checked += 1
    assert checked > 100


def test_contour_resolution_convergence():
    errs = []
    for res in (32, 64, 128):
        c = marching_squares(circle_field, (-1.0, 1.0), res)
        r = np.linalg.norm(all_points(c), axis=1)
        errs.append(np.abs(r - 0.5).max())
    assert errs[1] <= 0.5 * errs[0]
    assert errs[2] <= 0.5 * errs[1]


def test_marching_squares_is_deterministic():
    a = marching_squares(circle_field, (-1.0, 1.0), 64)
    b = marching_squares(circle_field, (-1.0, 1.0), 64)
    assert len(a.polylines) == len(b.polylines)
    for la, lb in zip(a.polylines, b.polylines):
        assert np.array_equal(la, lb)


def test_rejects_bad_resolution_and_domain():
    with pytest.raises(ValueError):
        marching_squares(circle_field, (-1.0, 1.0), 1)
    with pytest.raises(ValueError):
        marching_cubes(sphere_field, (-1.0, 1.0), 1)
    with pytest.raises(ValueError):
        marching_squares(circle_field, (1.0, -1.0), 8)
    with pytest.raises(ValueError):
        marching_squares(circle_field, ((0, 1), (0, 1), (0, 1)), 8)


def test_nonfinite_field_reports_coordinates():
    bad = lambda P: np.where(P[:, 0] > 0, np.nan, 1.0)
    with pytest.raises(ValueError, match="non-finite value at"):
        marching_squares(bad, (-1.0, 1.0), 8)
    try:
        marching_squares(bad, (-1.0, 1.0), 8)
    except ValueError as err:
        assert "0.25" in str(err)              # first offending lattice x


def test_field_evaluated_in_bounded_slabs():
    sizes = []

    def recording(P):
        sizes.append(len(P))
        return circle_field(P)

    marching_squares(recording, (-1.0, 1.0), 256)
    assert max(sizes) <= extract.SLAB_POINTS
    assert len(sizes) >= 2                     # 257^2 points need two slabs


# ---------------------------------------------------------------------------
# marching cubes
# ---------------------------------------------------------------------------

def test_sphere_mesh_vertex_norms():
    res = 64
    h = 2.0 / res
    m = marching_cubes(sphere_field, (-1.0, 1.0), res)
    assert m.n_triangles > 0
    norms = np.linalg.norm(m.vertices, axis=1)
    assert norms.min() >= 0.5 - 2 * h
    assert norms.max() <= 0.5 + 2 * h
    assert triangle_areas(m).min() > extract.DEGENERATE_AREA


def test_sphere_mesh_surface_area():
    m = marching_cubes(sphere_field, (-1.0, 1.0), 128)
    area = float(triangle_areas(m).sum())
    assert area == pytest.approx(4 * np.pi * 0.25, rel=0.02)


def test_constant_positive_field_gives_empty_mesh():
    m = marching_cubes(lambda P: np.ones(len(P)), (-1.0, 1.0), 8)
    assert m.n_vertices == 0 and m.n_triangles == 0


def test_mesh_resolution_convergence():
    errs = []
    for res in (16, 32, 64):
        m = marching_cubes(sphere_field, (-1.0, 1.0), res)
        norms = np.linalg.norm(m.vertices, axis=1)
        errs.append(np.abs(norms - 0.5).max())
    assert errs[1] <= 0.5 * errs[0]
    assert errs[2] <= 0.5 * errs[1]


def test_per_axis_domain():
    off = lambda P: np.sqrt(((P - [0.5, 0.0, 0.0]) ** 2).sum(-1)) - 0.25
    m = marching_cubes(off, ((-0.1, 1.1), (-0.6, 0.6), (-0.6, 0.6)), 48)
    d = np.linalg.norm(m.vertices - [0.5, 0.0, 0.0], axis=1)
    assert np.abs(d - 0.25).max() < 0.01


# ---------------------------------------------------------------------------
# grid-backed fields
# ---------------------------------------------------------------------------

def test_grid_field_reproduces_nodes_and_bilinear_functions():
    rng = np.random.default_rng(2)
    vals = rng.standard_normal((9, 7))
    f = grid_field(vals, ((0.0, 2.0), (-1.0, 1.0)))
    xs = np.linspace(0.0, 2.0, 9)
    ys = np.linspace(-1.0, 1.0, 7)
    nodes = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
    assert np.allclose(f(nodes), vals.ravel(), atol=1e-12)

    bil = lambda X, Y: 2.0 + 3.0 * X - Y + 0.5 * X * Y
    g = grid_field(bil(xs[:, None], ys[None, :]), ((0.0, 2.0), (-1.0, 1.0)))
    pts = rng.uniform([0.0, -1.0], [2.0, 1.0], size=(200, 2))
    assert np.allclose(g(pts), bil(pts[:, 0], pts[:, 1]), atol=1e-12)


def test_grid_field_clips_outside_queries():
    vals = np.arange(64, dtype=np.float64).reshape(8, 8)
    f = grid_field(vals, (0.0, 1.0))
    assert f(np.array([[-5.0, -5.0]]))[0] == vals[0, 0]
    assert f(np.array([[9.0, 9.0]]))[0] == vals[-1, -1]


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def test_obj_roundtrip_and_one_based_indices(tmp_path):
    rng = np.random.default_rng(5)
    mesh = Mesh(rng.uniform(-2, 2, (12, 3)),
                rng.integers(0, 12, (20, 3)))
    path = tmp_path / "m.obj"
    save_obj(mesh, str(path))
    text = path.read_text()
    f_lines = [l for l in text.splitlines() if l.startswith("f ")]
    idx = np.array([[int(t) for t in l.split()[1:]] for l in f_lines])
    assert idx.min() >= 1                      # OBJ indices are 1-based
    back = load_obj(str(path))
    assert np.allclose(back.vertices, mesh.vertices, rtol=1e-8, atol=1e-12)
    assert np.array_equal(back.triangles, mesh.triangles)


def test_obj_empty_mesh_roundtrip(tmp_path):
    path = tmp_path / "empty.obj"
    save_obj(Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)),
             str(path))
    back = load_obj(str(path))
    assert back.n_vertices == 0 and back.n_triangles == 0


def test_contour_csv_roundtrip_with_blank_separators(tmp_path):
    c = Contour2D([np.array([[0.0, 0.0], [1.0, 0.5], [2.0, 0.25]]),
                   np.array([[-1.0, -1.0], [-2.0, -0.5]])])
    path = tmp_path / "c.csv"
    save_contour_csv(c, str(path))
    assert "\n\n" in path.read_text()
    back = load_contour_csv(str(path))
    assert len(back.polylines) == 2
    for la, lb in zip(back.polylines, c.polylines):
        assert np.allclose(la, lb, rtol=1e-8, atol=1e-12)
