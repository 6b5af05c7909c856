"""Dense and sparse voxel volumes over the fixed [-0.5, 0.5]^3 cube.

Grid convention: a volume of resolution n has n^3 cells; the center of cell
(i, j, k) sits at ``lo + (i + 0.5) * voxel_size`` per axis, with i along x.
Dense data is stored as an (n, n, n, channels) float32 array indexed
``data[i, j, k, c]``; serialization writes cells x-fastest.

SDF volumes are truncated to ``spec.sdf_truncation`` world units and divided
by it, so stored values live in [-1, 1] with negative inside. Occupancy
volumes are binary {0, 1} shells marking cells whose unnormalized |SDF| is
below the threshold tau — a surface crust, not a solid fill.
"""

from __future__ import annotations

import io
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .meshes import MeshDistanceQuery, TriMesh, _RAY_EPS

__all__ = [
    "VolumeSpec",
    "DenseVolume",
    "SparseVolume",
    "ColoredPointCloud",
    "compute_sdf_volume",
    "sdf_to_occupancy",
    "build_color_volume",
    "subdivide_occupancy",
    "shell_iou",
    "save_volume",
    "load_volume",
    "grid_inside",
    "occupancy_from_mesh",
]

EXTENT_LO = -0.5
EXTENT_HI = 0.5


@dataclass(frozen=True)
class VolumeSpec:
    """Grid geometry plus the occupancy/truncation thresholds (world units)."""

    resolution: int
    occupancy_threshold: float
    sdf_truncation: float
    extent_lo: float = EXTENT_LO
    extent_hi: float = EXTENT_HI

    def __post_init__(self):
        r = self.resolution
        if r < 1 or (r & (r - 1)) != 0:
            raise ValueError(f"resolution must be a power of two, got {r}")
        if self.occupancy_threshold <= 0:
            raise ValueError("occupancy threshold must be positive")
        if self.sdf_truncation < self.occupancy_threshold:
            raise ValueError("sdf_truncation must be >= occupancy threshold")
        if self.extent_hi <= self.extent_lo:
            raise ValueError("bad extent")

    @classmethod
    def default(cls, resolution: int, tau_voxels: float = 1.0, trunc_voxels: float = 3.0):
        """tau = 1 voxel (closed one-voxel shell), truncation = 3 voxels."""
        h = (EXTENT_HI - EXTENT_LO) / resolution
        return cls(resolution, tau_voxels * h, trunc_voxels * h)

    @property
    def extent_width(self) -> float:
        return self.extent_hi - self.extent_lo

    @property
    def voxel_size(self) -> float:
        return self.extent_width / self.resolution

    def axis_centers(self) -> np.ndarray:
        n = self.resolution
        return self.extent_lo + (np.arange(n) + 0.5) * self.voxel_size

    def cell_centers(self) -> np.ndarray:
        """All cell centers, shape (n, n, n, 3) indexed [i, j, k]."""
        c = self.axis_centers()
        gi, gj, gk = np.meshgrid(c, c, c, indexing="ij")
        return np.stack([gi, gj, gk], axis=-1)

    def index_centers(self, indices: np.ndarray) -> np.ndarray:
        """World centers of the given (M, 3) voxel indices."""
        return self.extent_lo + (np.asarray(indices, dtype=np.float64) + 0.5) * self.voxel_size

    def half(self) -> "VolumeSpec":
        return VolumeSpec(
            self.resolution // 2,
            self.occupancy_threshold,
            self.sdf_truncation,
            self.extent_lo,
            self.extent_hi,
        )


@dataclass
class DenseVolume:
    spec: VolumeSpec
    data: np.ndarray  # (n, n, n, channels) float32

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        n = self.spec.resolution
        if self.data.ndim != 4 or self.data.shape[:3] != (n, n, n):
            raise ValueError(f"data must be ({n}, {n}, {n}, C), got {self.data.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def occupied_indices(self) -> np.ndarray:
        """Sorted (M, 3) indices of nonzero cells (binary volumes)."""
        idx = np.argwhere(self.data[..., 0] != 0)
        return idx[np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0]))]

    def to_sparse(self, indices: np.ndarray | None = None) -> "SparseVolume":
        if indices is None:
            indices = self.occupied_indices()
        vals = self.data[indices[:, 0], indices[:, 1], indices[:, 2]]
        return SparseVolume(self.spec, indices, vals)


@dataclass
class SparseVolume:
    spec: VolumeSpec
    indices: np.ndarray  # (V, 3) int64, strictly lexicographically sorted
    values: np.ndarray  # (V, C) float32

    def __post_init__(self):
        self.indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.indices.ndim != 2 or self.indices.shape[1] != 3:
            raise ValueError("indices must be (V, 3)")
        if self.values.ndim != 2 or len(self.values) != len(self.indices):
            raise ValueError("values must be (V, C) matching indices")
        n = self.spec.resolution
        if len(self.indices):
            if self.indices.min() < 0 or self.indices.max() >= n:
                raise ValueError("voxel index out of range")
            lin = self.linear_indices()
            if np.any(np.diff(lin) <= 0):
                raise ValueError("indices must be strictly sorted and unique")

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def linear_indices(self) -> np.ndarray:
        n = self.spec.resolution
        i = self.indices
        return (i[:, 0] * n + i[:, 1]) * n + i[:, 2]

    def to_dense(self, fill: float = 0.0) -> DenseVolume:
        n = self.spec.resolution
        data = np.full((n, n, n, self.channels), fill, dtype=np.float32)
        data[self.indices[:, 0], self.indices[:, 1], self.indices[:, 2]] = self.values
        return DenseVolume(self.spec, data)


@dataclass
class ColoredPointCloud:
    points: np.ndarray  # (P, 3)
    colors: np.ndarray  # (P, 3) in [0, 1]

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64)
        if self.points.shape != self.colors.shape or self.points.ndim != 2:
            raise ValueError("points and colors must both be (P, 3)")

    def __len__(self) -> int:
        return len(self.points)


def sort_voxel_indices(indices: np.ndarray) -> np.ndarray:
    """Lexicographic (i, j, k) sort with duplicates removed."""
    indices = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    if len(indices) == 0:
        return indices
    order = np.lexsort((indices[:, 2], indices[:, 1], indices[:, 0]))
    indices = indices[order]
    keep = np.ones(len(indices), dtype=bool)
    keep[1:] = np.any(np.diff(indices, axis=0) != 0, axis=1)
    return indices[keep]


# ---------------------------------------------------------------------------
# inside/outside on a grid: axis column scans with parity + majority vote
# ---------------------------------------------------------------------------


def grid_inside(mesh: TriMesh, resolution: int, lo: float = EXTENT_LO, hi: float = EXTENT_HI) -> np.ndarray:
    """Boolean (n, n, n) inside mask at cell centers, 3-axis parity vote.

    All cell centers along one axis share a ray, so crossings are computed
    once per grid column. Query lines are jittered by a sub-voxel epsilon to
    dodge edge-aligned degeneracies; the majority vote over the three axes
    absorbs whatever survives.
    """
    n = resolution
    h = (hi - lo) / n
    centers = lo + (np.arange(n) + 0.5) * h
    votes = np.zeros((n, n, n), dtype=np.int8)
    a, b, c = mesh.corners()
    for axis in range(3):
        u, v = [ax for ax in range(3) if ax != axis]
        cu = centers + _RAY_EPS[0] * (hi - lo)
        cv = centers + _RAY_EPS[1] * (hi - lo)
        au, av, aw = a[:, u], a[:, v], a[:, axis]
        bu, bv, bw = b[:, u], b[:, v], b[:, axis]
        cu3, cv3, cw3 = c[:, u], c[:, v], c[:, axis]
        # candidate (triangle, column) pairs from 2D bounding boxes
        tu = np.stack([au, bu, cu3], 1)
        tv = np.stack([av, bv, cv3], 1)
        ju0 = np.clip(np.searchsorted(cu, tu.min(1)), 0, n)
        ju1 = np.clip(np.searchsorted(cu, tu.max(1)), 0, n)
        jv0 = np.clip(np.searchsorted(cv, tv.min(1)), 0, n)
        jv1 = np.clip(np.searchsorted(cv, tv.max(1)), 0, n)
        nu = ju1 - ju0
        nv = jv1 - jv0
        counts = nu * nv
        live = counts > 0
        if not live.any():
            continue
        tri_rep = np.repeat(np.nonzero(live)[0], counts[live])
        # enumerate the (ju, jv) lattice covered by each triangle bbox
        local = np.arange(len(tri_rep)) - np.repeat(
            np.concatenate([[0], np.cumsum(counts[live])[:-1]]), counts[live]
        )
        width_v = nv[tri_rep]
        ju = ju0[tri_rep] + local // width_v
        jv = jv0[tri_rep] + local % width_v
        pu = cu[ju]
        pv = cv[jv]
        d0u = bu[tri_rep] - au[tri_rep]
        d0v = bv[tri_rep] - av[tri_rep]
        d1u = cu3[tri_rep] - au[tri_rep]
        d1v = cv3[tri_rep] - av[tri_rep]
        den = d0u * d1v - d0v * d1u
        qu = pu - au[tri_rep]
        qv = pv - av[tri_rep]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (qu * d1v - qv * d1u) / den
            t = (d0u * qv - d0v * qu) / den
        hit = (np.abs(den) > 1e-30) & (s >= 0) & (t >= 0) & (s + t <= 1)
        if not hit.any():
            continue
        w_cross = (
            aw[tri_rep][hit]
            + s[hit] * (bw[tri_rep][hit] - aw[tri_rep][hit])
            + t[hit] * (cw3[tri_rep][hit] - aw[tri_rep][hit])
        )
        col = ju[hit] * n + jv[hit]
        order = np.argsort(col, kind="stable")
        col = col[order]
        w_cross = w_cross[order]
        starts = np.searchsorted(col, np.arange(n * n))
        ends = np.searchsorted(col, np.arange(n * n), side="right")
        inside_axis = np.zeros((n, n, n), dtype=bool)
        for cidx in np.unique(col):
            ws = np.sort(w_cross[starts[cidx] : ends[cidx]])
            # parity of crossings beyond each center along the ray
            n_greater = len(ws) - np.searchsorted(ws, centers, side="right")
            line_inside = (n_greater % 2) == 1
            ju_i, jv_i = divmod(int(cidx), n)
            if axis == 0:
                inside_axis[:, ju_i, jv_i] = line_inside
            elif axis == 1:
                inside_axis[ju_i, :, jv_i] = line_inside
            else:
                inside_axis[ju_i, jv_i, :] = line_inside
        votes += inside_axis
    return votes >= 2


# ---------------------------------------------------------------------------
# spec operations
# ---------------------------------------------------------------------------


def compute_sdf_volume(mesh: TriMesh, spec: VolumeSpec) -> DenseVolume:
    """Truncated, normalized SDF sampled at every cell center.

    Each cell stores the signed distance from its center to the nearest
    surface point (negative inside), clamped to +-sdf_truncation and divided
    by sdf_truncation. Requires a watertight, normalized mesh.
    """
    if mesh.is_empty():
        raise ValueError("empty mesh")
    if mesh.watertight is None:
        mesh.check_watertight()
    if not mesh.watertight:
        t = mesh.triangles
        edges = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        bad = int(np.count_nonzero(counts != 2))
        raise ValueError(f"mesh is not watertight: {bad} edges not shared by exactly 2 triangles")
    if mesh.triangle_areas().max(initial=0.0) <= 1e-18:
        raise ValueError("degenerate mesh: all triangles have zero area")
    if mesh.normalized is None:
        mesh.check_normalized()
    if not mesh.normalized:
        raise ValueError("mesh is not normalized to [-0.5, 0.5]^3")

    n = spec.resolution
    centers = spec.cell_centers().reshape(-1, 3)
    query = MeshDistanceQuery(mesh)
    dist = query.distances(centers, clamp=spec.sdf_truncation)
    inside = grid_inside(mesh, n, spec.extent_lo, spec.extent_hi).reshape(-1)
    sdf = np.where(inside, -dist, dist)
    sdf = np.clip(sdf, -spec.sdf_truncation, spec.sdf_truncation) / spec.sdf_truncation
    return DenseVolume(spec, sdf.reshape(n, n, n, 1).astype(np.float32))


def sdf_volume_at_indices(mesh: TriMesh, spec: VolumeSpec, indices: np.ndarray) -> np.ndarray:
    """Normalized truncated SDF at the centers of selected voxels only."""
    centers = spec.index_centers(indices)
    query = MeshDistanceQuery(mesh)
    dist = query.distances(centers, clamp=spec.sdf_truncation)
    inside_grid = grid_inside(mesh, spec.resolution, spec.extent_lo, spec.extent_hi)
    inside = inside_grid[indices[:, 0], indices[:, 1], indices[:, 2]]
    sdf = np.where(inside, -dist, dist)
    return (np.clip(sdf, -spec.sdf_truncation, spec.sdf_truncation) / spec.sdf_truncation).astype(
        np.float32
    )


def sdf_to_occupancy(sdf: DenseVolume, tau: float | None = None) -> DenseVolume:
    """Binary shell: cell = 1 iff unnormalized |SDF| < tau."""
    if sdf.channels != 1:
        raise ValueError("expected a 1-channel SDF volume")
    if tau is None:
        tau = sdf.spec.occupancy_threshold
    if not np.isfinite(tau) or tau <= 0:
        raise ValueError("tau must be positive and finite")
    unnorm = np.abs(sdf.data[..., 0].astype(np.float64)) * sdf.spec.sdf_truncation
    occ = (unnorm < tau).astype(np.float32)[..., None]
    return DenseVolume(sdf.spec, occ)


def build_color_volume(
    cloud: ColoredPointCloud, occ_indices: np.ndarray, spec: VolumeSpec
) -> SparseVolume:
    """Nearest-cloud-point color per occupied voxel, remapped to [-1, 1]."""
    if len(cloud) == 0:
        raise ValueError("empty point cloud")
    occ_indices = sort_voxel_indices(occ_indices)
    if len(occ_indices) and occ_indices.max() >= spec.resolution:
        raise ValueError("occupied index out of range")
    centers = spec.index_centers(occ_indices)
    tree = cKDTree(cloud.points)
    _, nn = tree.query(centers, k=1)
    colors = cloud.colors[nn] * 2.0 - 1.0
    return SparseVolume(spec, occ_indices, colors.astype(np.float32))


def subdivide_occupancy(occ) -> np.ndarray:
    """Each occupied voxel at resolution n emits its 8 children at 2n.

    Accepts a binary DenseVolume or an (M, 3) index array; returns sorted
    unique (8M, 3) child indices.
    """
    if isinstance(occ, DenseVolume):
        parents = occ.occupied_indices()
    else:
        parents = sort_voxel_indices(occ)
    if len(parents) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    offs = np.stack(np.meshgrid([0, 1], [0, 1], [0, 1], indexing="ij"), -1).reshape(8, 3)
    children = (parents[:, None, :] * 2 + offs[None, :, :]).reshape(-1, 3)
    return sort_voxel_indices(children)


def shell_iou(a, b) -> float:
    """Intersection over union of two same-resolution binary shells."""

    def as_lin(x):
        if isinstance(x, DenseVolume):
            idx, n = x.occupied_indices(), x.spec.resolution
        elif isinstance(x, SparseVolume):
            idx, n = x.indices, x.spec.resolution
        else:
            raise TypeError("expected DenseVolume or SparseVolume")
        return (idx[:, 0] * n + idx[:, 1]) * n + idx[:, 2], n

    la, na = as_lin(a)
    lb, nb = as_lin(b)
    if na != nb:
        raise ValueError(f"resolution mismatch: {na} vs {nb}")
    union = np.union1d(la, lb)
    if len(union) == 0:
        warnings.warn("shell_iou of two empty volumes is degenerate, returning 1.0")
        return 1.0
    inter = np.intersect1d(la, lb, assume_unique=True)
    return float(len(inter)) / float(len(union))


def occupancy_from_mesh(mesh: TriMesh, spec: VolumeSpec, tau: float | None = None) -> np.ndarray:
    """Sorted occupied-shell indices of a watertight mesh at ``spec``.

    Unlike compute_sdf_volume this skips the normalization precondition so
    evaluation can voxelize aligned predictions that poke past the cube.
    """
    if tau is None:
        tau = spec.occupancy_threshold
    centers = spec.cell_centers().reshape(-1, 3)
    dist = MeshDistanceQuery(mesh).distances(centers, clamp=2.0 * tau)
    occ = dist < tau
    idx = np.argwhere(occ.reshape((spec.resolution,) * 3))
    return sort_voxel_indices(idx)


# ---------------------------------------------------------------------------
# VXL1 serialization
# ---------------------------------------------------------------------------

_VXL_MAGIC = b"VXL1"
_DENSE, _SPARSE = 0, 1


def save_volume(vol, path) -> None:
    """Write a volume in the VXL1 binary format (little-endian float32)."""
    buf = io.BytesIO()
    spec = vol.spec
    is_sparse = isinstance(vol, SparseVolume)
    buf.write(_VXL_MAGIC)
    buf.write(
        struct.pack(
            "<IIffffB",
            spec.resolution,
            vol.channels,
            spec.extent_lo,
            spec.extent_hi,
            spec.occupancy_threshold,
            spec.sdf_truncation,
            _SPARSE if is_sparse else _DENSE,
        )
    )
    if is_sparse:
        buf.write(struct.pack("<I", len(vol.indices)))
        buf.write(vol.indices.astype("<u2").tobytes())
        buf.write(vol.values.astype("<f4").tobytes())
    else:
        # cells x-fastest, channels contiguous per cell
        buf.write(vol.data.transpose(2, 1, 0, 3).astype("<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_volume(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _VXL_MAGIC:
        raise ValueError(f"{path}: bad magic, not a VXL1 volume")
    res, channels, lo, hi, tau, trunc, flag = struct.unpack_from("<IIffffB", raw, 4)
    spec = VolumeSpec(res, tau, trunc, lo, hi)
    off = 4 + struct.calcsize("<IIffffB")
    if flag == _SPARSE:
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        idx = np.frombuffer(raw, dtype="<u2", count=count * 3, offset=off).reshape(count, 3)
        off += count * 6
        vals = np.frombuffer(raw, dtype="<f4", count=count * channels, offset=off)
        return SparseVolume(spec, idx.astype(np.int64), vals.reshape(count, channels))
    data = np.frombuffer(raw, dtype="<f4", count=res**3 * channels, offset=off)
    data = data.reshape(res, res, res, channels).transpose(2, 1, 0, 3)
    return DenseVolume(spec, data)
