"""Indexed triangle meshes and geometric queries against them.

The mesh convention throughout the library: vertices in world units inside
the cube [-0.5, 0.5]^3 once normalized, triangles as index triples with
counter-clockwise winding seen from outside, optional per-vertex RGB colors
in [0, 1].

Distance queries come in two flavors:

* :func:`closest_point_distances` — exact point/triangle distance for paired
  arrays (the building block of the exhaustive oracle used in tests).
* :class:`MeshDistanceQuery` — the accelerated path. Candidate triangles are
  pruned with a KD-tree over triangle centroids plus a radius bound, then the
  exact distance is evaluated only on candidates, so results match the
  exhaustive scan to floating-point accuracy.

Inside/outside classification uses ray parity along the three coordinate
axes with a majority vote, which is robust to grazing hits on watertight
meshes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "TriMesh",
    "MeshDistanceQuery",
    "closest_point_distances",
    "brute_force_signed_distance",
    "save_mesh",
    "load_mesh",
]

_RAY_EPS = (7.1030937e-8, 2.4142135e-7)  # transverse query jitter, extent units


@dataclass
class TriMesh:
    """Indexed triangle mesh with optional per-vertex colors."""

    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int64
    vertex_colors: Optional[np.ndarray] = None  # (V, 3) float64 in [0, 1]
    watertight: Optional[bool] = None  # None = not checked
    normalized: Optional[bool] = None

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError("vertices must be (V, 3)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ValueError("triangles must be (T, 3)")
        if self.triangles.size and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index exceeds vertex count")
        if self.triangles.size and self.triangles.min() < 0:
            raise ValueError("negative triangle index")
        if self.vertex_colors is not None:
            self.vertex_colors = np.ascontiguousarray(self.vertex_colors, dtype=np.float64)
            if self.vertex_colors.shape != self.vertices.shape:
                raise ValueError("vertex_colors must match vertices")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    def is_empty(self) -> bool:
        return self.num_triangles == 0

    def corners(self):
        """Vertex positions of each triangle as three (T, 3) arrays."""
        v, t = self.vertices, self.triangles
        return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]

    def check_watertight(self) -> bool:
        """Every undirected edge shared by exactly two triangles."""
        if self.is_empty():
            return False
        t = self.triangles
        edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        edges = np.sort(edges, axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        ok = bool(np.all(counts == 2))
        self.watertight = ok
        return ok

    def check_normalized(self, tol: float = 1e-6) -> bool:
        ok = bool(np.abs(self.vertices).max(initial=0.0) <= 0.5 + tol)
        self.normalized = ok
        return ok

    def normalize(self) -> "TriMesh":
        """Center on the bounding-box midpoint and scale to fit [-0.5, 0.5]^3."""
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        center = 0.5 * (lo + hi)
        half = float(np.max(hi - lo)) / 2.0
        if half <= 0:
            raise ValueError("cannot normalize a zero-extent mesh")
        verts = (self.vertices - center) * (0.5 / half)
        out = replace(self, vertices=verts)
        out.normalized = True
        return out

    def triangle_areas(self) -> np.ndarray:
        a, b, c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def surface_area(self) -> float:
        return float(self.triangle_areas().sum())

    def face_normals(self) -> np.ndarray:
        a, b, c = self.corners()
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.maximum(norm, 1e-30)

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted average of incident face normals, normalized."""
        a, b, c = self.corners()
        fn = np.cross(b - a, c - a)  # area-weighted (length = 2*area)
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(vn, self.triangles[:, k], fn)
        norm = np.linalg.norm(vn, axis=1, keepdims=True)
        return vn / np.maximum(norm, 1e-30)

    def sample_surface(self, n: int, rng: np.random.Generator):
        """Area-weighted uniform surface samples.

        Returns (points (n,3), triangle ids (n,)); colors can be looked up by
        interpolating ``vertex_colors`` with the same barycentrics if needed.
        """
        if self.is_empty():
            raise ValueError("cannot sample an empty mesh")
        areas = self.triangle_areas()
        total = areas.sum()
        if total <= 0:
            raise ValueError("degenerate mesh: zero total area")
        cdf = np.cumsum(areas) / total
        tri = np.searchsorted(cdf, rng.random(n), side="right")
        tri = np.minimum(tri, len(areas) - 1)
        u = rng.random(n)
        v = rng.random(n)
        flip = u + v > 1.0
        u[flip] = 1.0 - u[flip]
        v[flip] = 1.0 - v[flip]
        a, b, c = self.corners()
        pts = a[tri] + u[:, None] * (b[tri] - a[tri]) + v[:, None] * (c[tri] - a[tri])
        return pts, tri


def closest_point_distances(points, a, b, c):
    """Exact distance from ``points[i]`` to triangle ``(a[i], b[i], c[i])``.

    Vectorized closest-point-on-triangle (Ericson's region method).
    """
    points = np.asarray(points, dtype=np.float64)
    ab = b - a
    ac = c - a
    ap = points - a

    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = points - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = points - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = np.where(d1 - d3 != 0, d1 / (d1 - d3), 0.0)
        t_ac = np.where(d2 - d6 != 0, d2 / (d2 - d6), 0.0)
        denom_bc = (d4 - d3) + (d5 - d6)
        t_bc = np.where(denom_bc != 0, (d4 - d3) / denom_bc, 0.0)
        denom = va + vb + vc
        v_in = np.where(denom != 0, vb / denom, 0.0)
        w_in = np.where(denom != 0, vc / denom, 0.0)

    # interior by default, then overwrite edge/vertex regions (later wins)
    closest = a + v_in[:, None] * ab + w_in[:, None] * ac
    m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    closest[m] = b[m] + t_bc[m, None] * (c[m] - b[m])
    m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    closest[m] = a[m] + t_ac[m, None] * ac[m]
    m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    closest[m] = a[m] + t_ab[m, None] * ab[m]
    m = (d6 >= 0) & (d5 <= d6)
    closest[m] = c[m]
    m = (d3 >= 0) & (d4 <= d3)
    closest[m] = b[m]
    m = (d1 <= 0) & (d2 <= 0)
    closest[m] = a[m]

    return np.linalg.norm(points - closest, axis=1)


class MeshDistanceQuery:
    """Accelerated unsigned/signed distance queries against one mesh.

    Candidate pruning: a KD-tree over triangle centroids gives an upper bound
    (nearest centroid distance + max triangle radius); every triangle whose
    centroid lies within that bound + max radius can contain the true closest
    point, and the exact distance is evaluated on those only. Inside tests
    cast axis rays through 2D bins of the triangles.
    """

    def __init__(self, mesh: TriMesh, bins: int = 64):
        if mesh.is_empty():
            raise ValueError("empty mesh")
        self.mesh = mesh
        a, b, c = mesh.corners()
        self._a, self._b, self._c = a, b, c
        self._centroids = (a + b + c) / 3.0
        rad = np.maximum(
            np.linalg.norm(a - self._centroids, axis=1),
            np.maximum(
                np.linalg.norm(b - self._centroids, axis=1),
                np.linalg.norm(c - self._centroids, axis=1),
            ),
        )
        self._max_rad = float(rad.max())
        self._tree = cKDTree(self._centroids)
        self._bins = bins
        self._axis_bins: dict[int, tuple] = {}

    def distances(self, points: np.ndarray, clamp: float | None = None, chunk: int = 8192) -> np.ndarray:
        """Unsigned distance from each point to the mesh surface.

        With ``clamp`` set, points provably farther than ``clamp`` (nearest
        centroid minus max triangle radius >= clamp) are reported as exactly
        ``clamp``; everything nearer is exact. Without ``clamp`` every value
        is exact.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n_pts = len(points)
        n_tri = len(self._a)
        k = min(8, n_tri)
        d_cent, cand = self._tree.query(points, k=k)
        d_cent = d_cent.reshape(n_pts, k)
        cand = cand.reshape(n_pts, k)

        out = np.empty(n_pts)
        d_up = np.empty(n_pts)
        for s in range(0, n_pts, chunk):
            e = min(s + chunk, n_pts)
            rep = np.repeat(points[s:e], k, axis=0)
            flat = cand[s:e].ravel()
            d = closest_point_distances(rep, self._a[flat], self._b[flat], self._c[flat])
            d_up[s:e] = d.reshape(-1, k).min(axis=1)

        d_low = d_cent[:, 0] - self._max_rad
        far = np.zeros(n_pts, dtype=bool)
        if clamp is not None:
            far = d_low >= clamp
            out[far] = clamp
        # k-NN set already covers the candidate ball -> upper bound is exact
        settled = ~far & (d_cent[:, k - 1] >= d_up + self._max_rad)
        out[settled] = d_up[settled]
        rest = np.nonzero(~far & ~settled)[0]
        if len(rest):
            groups = self._tree.query_ball_point(points[rest], d_up[rest] + self._max_rad)
            for s in range(0, len(rest), 1024):
                block = rest[s : s + 1024]
                gblock = groups[s : s + 1024]
                counts = np.fromiter((len(g) for g in gblock), dtype=np.int64, count=len(gblock))
                if counts.sum() == 0:
                    out[block] = d_up[block]
                    continue
                flat = np.concatenate([np.asarray(g, dtype=np.int64) for g in gblock])
                pt_rep = np.repeat(block, counts)
                d = closest_point_distances(
                    points[pt_rep], self._a[flat], self._b[flat], self._c[flat]
                )
                best = d_up[block].copy()
                np.minimum.at(best, np.searchsorted(block, pt_rep), d)
                out[block] = best
        if clamp is not None:
            np.minimum(out, clamp, out=out)
        return out

    def _bins_for_axis(self, axis: int):
        """2D binning of triangles over the plane transverse to ``axis``."""
        if axis in self._axis_bins:
            return self._axis_bins[axis]
        u, v = [ax for ax in range(3) if ax != axis]
        pts = self.mesh.vertices
        lo = pts[:, [u, v]].min(axis=0) - 1e-9
        hi = pts[:, [u, v]].max(axis=0) + 1e-9
        span = np.maximum(hi - lo, 1e-12)
        nb = self._bins
        tu = np.stack([self._a[:, u], self._b[:, u], self._c[:, u]], axis=1)
        tv = np.stack([self._a[:, v], self._b[:, v], self._c[:, v]], axis=1)
        bu0 = np.clip(((tu.min(1) - lo[0]) / span[0] * nb).astype(int), 0, nb - 1)
        bu1 = np.clip(((tu.max(1) - lo[0]) / span[0] * nb).astype(int), 0, nb - 1)
        bv0 = np.clip(((tv.min(1) - lo[1]) / span[1] * nb).astype(int), 0, nb - 1)
        bv1 = np.clip(((tv.max(1) - lo[1]) / span[1] * nb).astype(int), 0, nb - 1)
        buckets: list[list[int]] = [[] for _ in range(nb * nb)]
        for t in range(len(self._a)):
            for iu in range(bu0[t], bu1[t] + 1):
                for iv in range(bv0[t], bv1[t] + 1):
                    buckets[iu * nb + iv].append(t)
        packed = [np.asarray(bk, dtype=np.int64) for bk in buckets]
        self._axis_bins[axis] = (u, v, lo, span, packed)
        return self._axis_bins[axis]

    def _parity_axis(self, points: np.ndarray, axis: int) -> np.ndarray:
        u, v, lo, span, buckets = self._bins_for_axis(axis)
        nb = self._bins
        extent = float(span.max())
        pu = points[:, u] + _RAY_EPS[0] * extent
        pv = points[:, v] + _RAY_EPS[1] * extent
        pw = points[:, axis]
        iu = np.clip(((pu - lo[0]) / span[0] * nb).astype(int), 0, nb - 1)
        iv = np.clip(((pv - lo[1]) / span[1] * nb).astype(int), 0, nb - 1)
        inside = np.zeros(len(points), dtype=bool)
        au, av = self._a[:, u], self._a[:, v]
        bu, bv = self._b[:, u], self._b[:, v]
        cu, cv = self._c[:, u], self._c[:, v]
        aw, bw, cw = self._a[:, axis], self._b[:, axis], self._c[:, axis]
        for i in range(len(points)):
            tris = buckets[iu[i] * nb + iv[i]]
            if len(tris) == 0:
                continue
            d0u = bu[tris] - au[tris]
            d0v = bv[tris] - av[tris]
            d1u = cu[tris] - au[tris]
            d1v = cv[tris] - av[tris]
            den = d0u * d1v - d0v * d1u
            qu = pu[i] - au[tris]
            qv = pv[i] - av[tris]
            with np.errstate(divide="ignore", invalid="ignore"):
                s = (qu * d1v - qv * d1u) / den
                t = (d0u * qv - d0v * qu) / den
            hit = (np.abs(den) > 1e-30) & (s >= 0) & (t >= 0) & (s + t <= 1)
            if not hit.any():
                continue
            w_hit = (
                aw[tris][hit]
                + s[hit] * (bw[tris][hit] - aw[tris][hit])
                + t[hit] * (cw[tris][hit] - aw[tris][hit])
            )
            inside[i] = (np.count_nonzero(w_hit > pw[i]) % 2) == 1
        return inside

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Inside test via ray parity on all 3 axes, majority vote."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        votes = sum(self._parity_axis(points, ax).astype(np.int8) for ax in range(3))
        return votes >= 2

    def signed_distances(self, points: np.ndarray) -> np.ndarray:
        """Negative inside, positive outside."""
        d = self.distances(points)
        sign = np.where(self.contains(points), -1.0, 1.0)
        return sign * d


def brute_force_signed_distance(mesh: TriMesh, points: np.ndarray) -> np.ndarray:
    """Exhaustive all-triangle signed distance — the test oracle.

    O(points x triangles); sign by the same 3-axis ray parity as the
    accelerated path, distance by scanning every triangle.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    a, b, c = mesh.corners()
    n_t = len(a)
    dmin = np.full(len(points), np.inf)
    for i, p in enumerate(points):
        rep = np.broadcast_to(p, (n_t, 3))
        dmin[i] = closest_point_distances(rep, a, b, c).min()
    sign = np.where(MeshDistanceQuery(mesh).contains(points), -1.0, 1.0)
    return sign * dmin


# ---------------------------------------------------------------------------
# mesh I/O: OBJ (colors as extension triplets after xyz) and binary PLY
# ---------------------------------------------------------------------------


def save_mesh(mesh: TriMesh, path) -> None:
    path = str(path)
    if path.endswith(".obj"):
        _save_obj(mesh, path)
    elif path.endswith(".ply"):
        _save_ply(mesh, path)
    else:
        raise ValueError(f"unsupported mesh extension: {path}")


def load_mesh(path) -> TriMesh:
    path = str(path)
    if path.endswith(".obj"):
        return _load_obj(path)
    if path.endswith(".ply"):
        return _load_ply(path)
    raise ValueError(f"unsupported mesh extension: {path}")


def _save_obj(mesh: TriMesh, path: str) -> None:
    with open(path, "w") as f:
        if mesh.vertex_colors is not None:
            for v, col in zip(mesh.vertices, mesh.vertex_colors):
                f.write(
                    f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g} "
                    f"{col[0]:.9g} {col[1]:.9g} {col[2]:.9g}\n"
                )
        else:
            for v in mesh.vertices:
                f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def _load_obj(path: str) -> TriMesh:
    verts, cols, tris = [], [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vals = [float(x) for x in parts[1:]]
                verts.append(vals[:3])
                if len(vals) >= 6:
                    cols.append(vals[3:6])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) - 1 for tok in parts[1:4]]
                tris.append(idx)
    colors = np.asarray(cols) if len(cols) == len(verts) and cols else None
    return TriMesh(
        np.asarray(verts, dtype=np.float64).reshape(-1, 3),
        np.asarray(tris, dtype=np.int64).reshape(-1, 3),
        vertex_colors=colors,
    )


_PLY_HEADER = """ply
format binary_little_endian 1.0
element vertex {nv}
property float x
property float y
property float z
{color_props}element face {nf}
property list uchar int vertex_indices
end_header
"""


def _save_ply(mesh: TriMesh, path: str) -> None:
    has_color = mesh.vertex_colors is not None
    color_props = (
        "property float red\nproperty float green\nproperty float blue\n"
        if has_color
        else ""
    )
    header = _PLY_HEADER.format(
        nv=mesh.num_vertices, nf=mesh.num_triangles, color_props=color_props
    )
    if has_color:
        vdata = np.hstack([mesh.vertices, mesh.vertex_colors]).astype("<f4")
    else:
        vdata = mesh.vertices.astype("<f4")
    fdata = np.empty(
        mesh.num_triangles, dtype=[("n", "u1"), ("idx", "<i4", (3,))]
    )
    fdata["n"] = 3
    fdata["idx"] = mesh.triangles.astype("<i4")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(vdata.tobytes())
        f.write(fdata.tobytes())


def _load_ply(path: str) -> TriMesh:
    with open(path, "rb") as f:
        header_lines = []
        while True:
            line = f.readline().decode("ascii").strip()
            header_lines.append(line)
            if line == "end_header":
                break
        nv = nf = 0
        vprops = []
        in_vertex = False
        for line in header_lines:
            parts = line.split()
            if parts[:2] == ["element", "vertex"]:
                nv = int(parts[2])
                in_vertex = True
            elif parts[:2] == ["element", "face"]:
                nf = int(parts[2])
                in_vertex = False
            elif parts and parts[0] == "property" and in_vertex:
                vprops.append(parts[2])
        ncols = len(vprops)
        vdata = np.frombuffer(f.read(nv * ncols * 4), dtype="<f4").reshape(nv, ncols)
        fdata = np.frombuffer(
            f.read(nf * 13), dtype=[("n", "u1"), ("idx", "<i4", (3,))]
        )
    colors = vdata[:, 3:6].astype(np.float64) if ncols >= 6 else None
    return TriMesh(
        vdata[:, :3].astype(np.float64),
        fdata["idx"].astype(np.int64),
        vertex_colors=colors,
    )
