"""Zero-level-set extraction from scalar fields: contours in 2D, meshes in 3D.

Fields are batched evaluators ((m, d) points -> (m,) values) so the same
code extracts from a trained network, an analytic SDF, or an interpolated
grid. Sampling happens lattice point by lattice point in bounded slabs, 2D
cells go through a hand-rolled 16-case lookup with cell-center saddle
disambiguation, and 3D volumes go through the standard 256-case table
(scikit-image's Lewiner implementation) with linear edge interpolation.
Emitted vertices sit where the linearly interpolated field crosses zero.
"""

from dataclasses import dataclass, field

import numpy as np

from .fieldnet import Array

DEGENERATE_AREA = 1e-12   # triangles at or below this area are dropped
DEFAULT_RES_3D = 512
DEFAULT_RES_2D = 256
SLAB_POINTS = 1 << 16     # largest point batch handed to a field evaluator


@dataclass
class Mesh:
    """Triangle mesh: float vertices [V, 3] and integer index triples [T, 3]."""

    vertices: Array
    triangles: Array

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64)
        tris = np.asarray(self.triangles, dtype=np.int64)
        if verts.size == 0:
            verts = verts.reshape(0, 3)
        if tris.size == 0:
            tris = tris.reshape(0, 3)
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise ValueError("vertices must be an [V, 3] array")
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise ValueError("triangles must be an [T, 3] index array")
        if tris.size and (tris.min() < 0 or tris.max() >= verts.shape[0]):
            raise ValueError("triangle index out of vertex range")
        self.vertices = verts
        self.triangles = tris

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]


def triangle_areas(mesh: Mesh) -> Array:
    """Area of every triangle; the mesh surface area is their sum."""
    a = mesh.vertices[mesh.triangles[:, 0]]
    b = mesh.vertices[mesh.triangles[:, 1]]
    c = mesh.vertices[mesh.triangles[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass
class Contour2D:
    """Polylines tracing the 2D zero set.

    Each polyline is an [m, 2] array with consecutive points distinct;
    closed loops repeat their first point at the end, so first == last
    marks closure and segment sums give the full loop length.
    """

    polylines: list = field(default_factory=list)

    def __post_init__(self):
        lines = []
        for line in self.polylines:
            arr = np.asarray(line, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 2:
                raise ValueError("polyline must be an [m, 2] array with m >= 2")
            if np.any(np.all(arr[1:] == arr[:-1], axis=1)):
                raise ValueError("polyline has repeated consecutive points")
            lines.append(arr)
        self.polylines = lines

    @property
    def n_points(self) -> int:
        return sum(line.shape[0] for line in self.polylines)

    def total_length(self) -> float:
        total = 0.0
        for line in self.polylines:
            total += float(np.sum(np.linalg.norm(np.diff(line, axis=0),
                                                 axis=1)))
        return total


# ---------------------------------------------------------------------------
# field sampling
# ---------------------------------------------------------------------------

def _domain_axes(domain, dim: int):
    """Per-axis (lo, hi) pairs from a scalar pair or a sequence of pairs."""
    dom = np.asarray(domain, dtype=np.float64)
    if dom.shape == (2,):
        dom = np.tile(dom, (dim, 1))
    if dom.shape != (dim, 2):
        raise ValueError(f"domain must be (lo, hi) or {dim} such pairs")
    if np.any(dom[:, 0] >= dom[:, 1]):
        raise ValueError("domain lo must be below hi on every axis")
    return dom


def _eval_field(field_fn, pts: Array) -> Array:
    """Evaluate in slabs of at most SLAB_POINTS; reject non-finite values."""
    out = np.empty(pts.shape[0])
    for s in range(0, pts.shape[0], SLAB_POINTS):
        chunk = pts[s:s + SLAB_POINTS]
        vals = np.asarray(field_fn(chunk), dtype=np.float64).reshape(-1)
        if vals.shape[0] != chunk.shape[0]:
            raise ValueError("field evaluator returned wrong batch length")
        bad = np.flatnonzero(~np.isfinite(vals))
        if bad.size:
            where = ", ".join(f"{c:.6g}" for c in chunk[bad[0]])
            raise ValueError(f"field returned non-finite value at ({where})")
        out[s:s + SLAB_POINTS] = vals
    return out


def _sample_lattice(field_fn, dom, resolution: int):
    """Field values on the (resolution+1)^d lattice plus the axis arrays."""
    axes = [np.linspace(lo, hi, resolution + 1) for lo, hi in dom]
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    vals = _eval_field(field_fn, pts).reshape(grids[0].shape)
    return vals, axes


# ---------------------------------------------------------------------------
# 2D: 16-case marching squares
# ---------------------------------------------------------------------------

# cell corners, counterclockwise in index space:
#   c0=(i,j)  c1=(i+1,j)  c2=(i+1,j+1)  c3=(i,j+1)
# cell edges: e0 = c0-c1, e1 = c1-c2, e2 = c2-c3, e3 = c3-c0.
# Segments per inside-corner bitmask; cases 5 and 10 are the two saddles.
_MS_TABLE = {
    1: [(3, 0)], 2: [(0, 1)], 3: [(3, 1)], 4: [(1, 2)],
    6: [(0, 2)], 7: [(3, 2)], 8: [(2, 3)], 9: [(0, 2)],
    11: [(1, 2)], 12: [(1, 3)], 13: [(0, 1)], 14: [(3, 0)],
}
_MS_SADDLE = {
    # case: (segments when the cell center is inside, when it is outside)
    5: ([(0, 1), (2, 3)], [(3, 0), (1, 2)]),
    10: ([(3, 0), (1, 2)], [(0, 1), (2, 3)]),
}


def _edge_key(i: int, j: int, edge: int):
    """Lattice-global identifier of a cell-local edge (axis, node i, node j)."""
    if edge == 0:
        return (0, i, j)          # bottom, along axis 0
    if edge == 1:
        return (1, i + 1, j)      # right, along axis 1
    if edge == 2:
        return (0, i, j + 1)      # top
    return (1, i, j)              # left


def _crossing(vals, axes, key):
    """Linear zero crossing on the lattice edge named by key."""
    axis, i, j = key
    if axis == 0:
        fa, fb = vals[i, j], vals[i + 1, j]
        t = fa / (fa - fb)
        return np.array([axes[0][i] + t * (axes[0][i + 1] - axes[0][i]),
                         axes[1][j]])
    fa, fb = vals[i, j], vals[i, j + 1]
    t = fa / (fa - fb)
    return np.array([axes[0][i],
                     axes[1][j] + t * (axes[1][j + 1] - axes[1][j])])


def _chain_segments(segments, points):
    """Join shared-edge segments into polylines, deterministically.

    Each lattice edge touches at most two segments, so walking from any
    unused segment and extending both ends is unambiguous. Closed loops get
    their first point appended again.
    """
    by_key = {}
    for idx, (ka, kb) in enumerate(segments):
        by_key.setdefault(ka, []).append(idx)
        by_key.setdefault(kb, []).append(idx)
    used = [False] * len(segments)
    polylines = []

    def next_seg(key, exclude):
        for idx in by_key[key]:
            if not used[idx] and idx != exclude:
                return idx
        return None

    for start in range(len(segments)):
        if used[start]:
            continue
        used[start] = True
        ka, kb = segments[start]
        keys = [ka, kb]
        closed = False
        # forward from kb, then backward from ka
        cur = kb
        while True:
            idx = next_seg(cur, -1)
            if idx is None:
                break
            used[idx] = True
            sa, sb = segments[idx]
            cur = sb if sa == cur else sa
            if cur == keys[0]:
                closed = True
                break
            keys.append(cur)
        if not closed:
            cur = ka
            while True:
                idx = next_seg(cur, -1)
                if idx is None:
                    break
                used[idx] = True
                sa, sb = segments[idx]
                cur = sb if sa == cur else sa
                keys.insert(0, cur)
        pts = [points[k] for k in keys]
        if closed:
            pts.append(points[keys[0]])
        # crossings that land exactly on a shared lattice node can repeat
        dedup = [pts[0]]
        for p in pts[1:]:
            if not np.array_equal(p, dedup[-1]):
                dedup.append(p)
        if len(dedup) >= 2:
            polylines.append(np.array(dedup))
    return polylines


def marching_squares(field_fn, domain, resolution: int = DEFAULT_RES_2D) -> Contour2D:
    """Zero contour of a 2D field on a resolution x resolution cell grid.

    Inside means field < 0. Crossings are linearly interpolated along cell
    edges; the two ambiguous saddle cases follow the sign of the field
    sampled at the cell center.
    """
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    dom = _domain_axes(domain, 2)
    vals, axes = _sample_lattice(field_fn, dom, resolution)
    inside = vals < 0
    case = (inside[:-1, :-1].astype(np.int8)
            + 2 * inside[1:, :-1]
            + 4 * inside[1:, 1:]
            + 8 * inside[:-1, 1:])
    ci, cj = np.nonzero((case != 0) & (case != 15))
    saddle = np.isin(case[ci, cj], (5, 10))
    center_inside = {}
    if np.any(saddle):
        si, sj = ci[saddle], cj[saddle]
        centers = np.stack([0.5 * (axes[0][si] + axes[0][si + 1]),
                            0.5 * (axes[1][sj] + axes[1][sj + 1])], axis=-1)
        cvals = _eval_field(field_fn, centers)
        center_inside = {(int(a), int(b)): v < 0
                         for a, b, v in zip(si, sj, cvals)}

    segments = []
    points = {}
    for i, j in zip(ci, cj):
        c = int(case[i, j])
        if c in _MS_SADDLE:
            segs = _MS_SADDLE[c][0 if center_inside[(i, j)] else 1]
        else:
            segs = _MS_TABLE[c]
        for ea, eb in segs:
            ka, kb = _edge_key(i, j, ea), _edge_key(i, j, eb)
            for key in (ka, kb):
                if key not in points:
                    points[key] = _crossing(vals, axes, key)
            segments.append((ka, kb))
    return Contour2D(_chain_segments(segments, points))


# ---------------------------------------------------------------------------
# 3D: marching cubes
# ---------------------------------------------------------------------------

def marching_cubes(field_fn, domain, resolution: int = DEFAULT_RES_3D) -> Mesh:
    """Zero isosurface of a 3D field on a resolution^3 cell grid.

    Uses the standard 256-case table with linear edge interpolation, then
    drops triangles whose area is at or below DEGENERATE_AREA. A field with
    no sign change yields an empty mesh.
    """
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    dom = _domain_axes(domain, 3)
    vals, axes = _sample_lattice(field_fn, dom, resolution)
    if vals.min() >= 0.0 or vals.max() <= 0.0:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    from skimage import measure  # deferred: keeps 2D-only use light

    spacing = tuple((hi - lo) / resolution for lo, hi in dom)
    verts, faces = measure.marching_cubes(vals, level=0.0,
                                          spacing=spacing)[:2]
    verts = verts + dom[:, 0]
    mesh = Mesh(verts, faces.astype(np.int64))
    keep = triangle_areas(mesh) > DEGENERATE_AREA
    return Mesh(mesh.vertices, mesh.triangles[keep])


# ---------------------------------------------------------------------------
# grid-backed fields
# ---------------------------------------------------------------------------

def grid_field(values: Array, domain):
    """Batched bilinear interpolant of a 2D node grid over domain.

    Queries are clipped to the domain, and lattice nodes reproduce the grid
    values exactly, so extracting at resolution n-1 over the same domain
    sees the stored samples themselves.
    """
    vals = np.asarray(values, dtype=np.float64)
    if vals.ndim != 2:
        raise ValueError("grid values must be 2D")
    dom = _domain_axes(domain, 2)
    n0, n1 = vals.shape

    def interp(pts):
        pts = np.asarray(pts, dtype=np.float64)
        tx = (pts[:, 0] - dom[0, 0]) / (dom[0, 1] - dom[0, 0]) * (n0 - 1)
        ty = (pts[:, 1] - dom[1, 0]) / (dom[1, 1] - dom[1, 0]) * (n1 - 1)
        tx = np.clip(tx, 0.0, n0 - 1.0)
        ty = np.clip(ty, 0.0, n1 - 1.0)
        i = np.minimum(tx.astype(np.int64), n0 - 2)
        j = np.minimum(ty.astype(np.int64), n1 - 2)
        fx, fy = tx - i, ty - j
        return ((1 - fx) * (1 - fy) * vals[i, j]
                + fx * (1 - fy) * vals[i + 1, j]
                + (1 - fx) * fy * vals[i, j + 1]
                + fx * fy * vals[i + 1, j + 1])

    return interp


# ---------------------------------------------------------------------------
# mesh and contour files
# ---------------------------------------------------------------------------

def save_obj(mesh: Mesh, path: str) -> None:
    """ASCII OBJ: "v x y z" then "f i j k" with 1-based indices."""
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def load_obj(path: str) -> Mesh:
    """Read vertices and triangular faces from an ASCII OBJ file."""
    verts, tris = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise ValueError("only triangular faces are supported")
                tris.append([int(tok.split("/")[0]) - 1 for tok in parts[1:]])
    return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                np.array(tris, dtype=np.int64).reshape(-1, 3))


def save_contour_csv(contour: Contour2D, path: str) -> None:
    """One "x,y" row per point; a blank line separates polylines."""
    with open(path, "w") as fh:
        for li, line in enumerate(contour.polylines):
            if li:
                fh.write("\n")
            for p in line:
                fh.write(f"{p[0]:.9g},{p[1]:.9g}\n")


def load_contour_csv(path: str) -> Contour2D:
    """Read polylines written by save_contour_csv."""
    polylines, current = [], []
    with open(path) as fh:
        for raw in fh:
            row = raw.strip()
            if not row:
                if current:
                    polylines.append(np.array(current))
                    current = []
                continue
            x, y = row.split(",")
            current.append([float(x), float(y)])
    if current:
        polylines.append(np.array(current))
    return Contour2D(polylines)
