"""Point-cloud loading, canonical normalization, and batch sampling.

Clouds are normalized to the frame every preset assumes: centroid at the
origin and the largest point norm equal to 1. The sampling domain is the
axis-aligned bounding box of the normalized cloud scaled by 1.1 about its
center; axes with zero extent (planar or collinear clouds) are padded to a
half-width of 0.1 times the largest half-extent so the box never collapses.

Randomness: callers pass a numpy Generator (PCG64, 64-bit state, seedable,
splittable into per-iteration streams via SeedSequence.spawn), so identical
seeds reproduce identical batches regardless of how work is divided.
"""

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .fieldnet import Array

NORMAL_TOL = 1e-6        # allowed deviation of stored normals from unit norm
DEGENERATE_REL = 1e-12   # extent below this fraction of the largest counts as zero

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class PointCloud:
    """Points with optional per-point unit normals."""

    points: Array                    # [N, n]
    normals: Optional[Array] = None  # [N, n], each |.| = 1 +- NORMAL_TOL

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ValueError("points must be a non-empty [N, n] array")
        self.points = pts
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise ValueError("normals count does not match points")
            lens = np.linalg.norm(nrm, axis=1)
            bad = np.flatnonzero(np.abs(lens - 1.0) > NORMAL_TOL)
            if bad.size:
                raise ValueError(
                    f"normal {int(bad[0])} has norm {lens[bad[0]]:.6g}, not 1")
            self.normals = nrm

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass
class Domain:
    """Axis-aligned sampling box.

    Degenerate axes (min == max) are representable so that zero-measure
    boxes can still be sampled; normalize() itself never produces one.
    """

    bbox_min: Array
    bbox_max: Array

    def __post_init__(self):
        lo = np.asarray(self.bbox_min, dtype=np.float64)
        hi = np.asarray(self.bbox_max, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("bbox_min and bbox_max must be vectors of equal length")
        if np.any(lo > hi):
            raise ValueError("bbox_min exceeds bbox_max")
        self.bbox_min, self.bbox_max = lo, hi

    @property
    def dim(self) -> int:
        return self.bbox_min.shape[0]


@dataclass
class NormalizeTransform:
    """y = (x - center) / scale; invert undoes it exactly."""

    center: Array
    scale: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def apply(self, points: Array) -> Array:
        return (np.asarray(points, dtype=np.float64) - self.center) / self.scale

    def invert(self, points: Array) -> Array:
        return np.asarray(points, dtype=np.float64) * self.scale + self.center


# ---------------------------------------------------------------------------
# file loading
# ---------------------------------------------------------------------------

def load_pointcloud(path: str, fmt: Optional[str] = None) -> PointCloud:
    """Read an XYZ or PLY point cloud.

    fmt is "xyz" or "ply"; None sniffs the file extension. XYZ lines are
    whitespace-separated "x y z" or "x y z nx ny nz"; PLY may be ascii or
    binary little-endian with x,y,z and optional nx,ny,nz vertex properties.
    Either all points carry normals or none do.
    """
    if fmt is None:
        ext = str(path).rsplit(".", 1)[-1].lower()
        fmt = ext if ext in ("xyz", "ply") else "xyz"
    fmt = fmt.lower()
    if fmt == "xyz":
        return _load_xyz(path)
    if fmt == "ply":
        return _load_ply(path)
    raise ValueError(f"unknown point cloud format {fmt!r}")


def _load_xyz(path: str) -> PointCloud:
    points, normals = [], []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            tok = raw.split()
            if not tok:
                continue
            if len(tok) not in (3, 6):
                raise ValueError(
                    f"{path}: line {lineno}: expected 3 or 6 values, got {len(tok)}")
            try:
                vals = [float(t) for t in tok]
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: not a number") from None
            if len(vals) == 6:
                if points and not normals:
                    raise ValueError(
                        f"{path}: line {lineno}: normal appears after points without normals")
                normals.append(vals[3:])
            elif normals:
                raise ValueError(
                    f"{path}: line {lineno}: point without normal after points with normals")
            points.append(vals[:3])
    if not points:
        raise ValueError(f"{path}: no points")
    return PointCloud(np.array(points), np.array(normals) if normals else None)


def _read_ply_header(fh, path):
    """Parse header lines; returns (is_binary, vertex_count, properties)."""
    def next_line(expect_what):
        line = fh.readline()
        if not line:
            raise ValueError(f"{path}: truncated header, expected {expect_what}")
        return line.decode("ascii", "replace").strip()

    if next_line("magic") != "ply":
        raise ValueError(f"{path}: line 1: not a PLY file")
    is_binary = None
    vertex_count = None
    props = []          # (name, dtype char) of the vertex element
    in_vertex = False
    lineno = 1
    while True:
        line = next_line("end_header")
        lineno += 1
        tok = line.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if tok[1] == "ascii":
                is_binary = False
            elif tok[1] == "binary_little_endian":
                is_binary = True
            else:
                raise ValueError(f"{path}: line {lineno}: unsupported format {tok[1]}")
        elif tok[0] == "element":
            if tok[1] == "vertex":
                if props or vertex_count is not None:
                    raise ValueError(f"{path}: line {lineno}: repeated vertex element")
                vertex_count = int(tok[2])
                in_vertex = True
            else:
                in_vertex = False
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise ValueError(
                    f"{path}: line {lineno}: list property in vertex element")
            if tok[1] not in _PLY_TYPES:
                raise ValueError(f"{path}: line {lineno}: unknown type {tok[1]}")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
        elif tok[0] == "end_header":
            break
    if is_binary is None or vertex_count is None:
        raise ValueError(f"{path}: header missing format or vertex element")
    names = [n for n, _ in props]
    for need in ("x", "y", "z"):
        if need not in names:
            raise ValueError(f"{path}: vertex element lacks property {need!r}")
    has_normals = all(n in names for n in ("nx", "ny", "nz"))
    return is_binary, vertex_count, props, has_normals, lineno


def _load_ply(path: str) -> PointCloud:
    with open(path, "rb") as fh:
        is_binary, count, props, has_normals, header_lines = \
            _read_ply_header(fh, path)
        names = [n for n, _ in props]
        want = ["x", "y", "z"] + (["nx", "ny", "nz"] if has_normals else [])
        cols = [names.index(w) for w in want]
        if is_binary:
            dtype = np.dtype([(f"f{i}", "<" + ch) for i, (_, ch) in enumerate(props)])
            buf = fh.read(dtype.itemsize * count)
            if len(buf) < dtype.itemsize * count:
                raise ValueError(f"{path}: truncated vertex data")
            rec = np.frombuffer(buf, dtype=dtype, count=count)
            data = np.stack([rec[f"f{c}"].astype(np.float64) for c in cols], axis=1)
        else:
            rows = []
            for i in range(count):
                line = fh.readline()
                if not line:
                    raise ValueError(
                        f"{path}: line {header_lines + i + 1}: missing vertex {i}")
                tok = line.split()
                if len(tok) != len(props):
                    raise ValueError(
                        f"{path}: line {header_lines + i + 1}: expected "
                        f"{len(props)} values, got {len(tok)}")
                try:
                    rows.append([float(tok[c]) for c in cols])
                except ValueError:
                    raise ValueError(
                        f"{path}: line {header_lines + i + 1}: not a number") from None
            data = np.array(rows, dtype=np.float64)
    if count == 0:
        raise ValueError(f"{path}: no points")
    points = data[:, :3]
    normals = data[:, 3:6] if has_normals else None
    return PointCloud(points, normals)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def normalize(pc: PointCloud):
    """Center to zero, make the largest norm 1, and build the sampling box.

    Returns (normalized cloud, transform, domain). The transform maps
    original coordinates into the canonical frame via apply() and back via
    invert(). Normals are unchanged: the map is translation plus uniform
    scaling.
    """
    pts = pc.points
    if pc.n_points < 2:
        raise ValueError("degenerate point cloud: zero extent")
    center = pts.mean(axis=0)
    centered = pts - center
    scale = float(np.max(np.linalg.norm(centered, axis=1)))
    if scale <= 0.0:
        raise ValueError("degenerate point cloud: zero extent")
    out = centered / scale
    tf = NormalizeTransform(center=center, scale=scale)

    lo, hi = out.min(axis=0), out.max(axis=0)
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    top = float(half.max())
    # box = shape bbox scaled 1.1x about its center; flat axes get a fixed
    # pad so the domain keeps positive measure
    span = np.where(half > DEGENERATE_REL * top, 1.1 * half, 0.1 * top)
    domain = Domain(mid - span, mid + span)
    normals = None if pc.normals is None else pc.normals.copy()
    return PointCloud(out, normals), tf, domain


# ---------------------------------------------------------------------------
# batch sampling
# ---------------------------------------------------------------------------

def sample_surface(pc: PointCloud, k: int, rng: np.random.Generator,
                   return_normals: bool = False):
    """k cloud points drawn uniformly with replacement."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    idx = rng.integers(0, pc.n_points, size=k)
    pts = pc.points[idx]
    if not return_normals:
        return pts
    if pc.normals is None:
        raise ValueError("cloud has no normals")
    return pts, pc.normals[idx]


def sample_uniform(domain: Domain, k: int, rng: np.random.Generator) -> Array:
    """k i.i.d. uniform points in the box (degenerate axes stay constant)."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    return rng.uniform(domain.bbox_min, domain.bbox_max,
                       size=(k, domain.dim))
