"""Isosurface extraction from SDF volumes (marching cubes).

Sample points are cell centers. The input volume is padded with one ring of
outside values (+truncation in the volume's normalization) before cube
traversal, which closes the surface wherever the shell touches the volume
boundary. Mesh vertices are placed on cube edges by linear interpolation of
the two endpoint samples; per-vertex colors interpolate the color channels
with the same weight. Shared cube edges resolve to a single welded vertex,
so the connectivity of a closed isosurface is watertight.

Triangle winding is fixed so normals point toward positive SDF (outward for
the negative-inside convention).
"""

from __future__ import annotations

import warnings

import numpy as np

from ._mc_tables import EDGE_TABLE, TRI_TABLE
from .meshes import TriMesh
from .volumes import DenseVolume, SparseVolume

__all__ = ["marching_cubes"]

# corner offsets and edge->(cell offset, axis) mapping matching the tables
_CORNERS = np.array(
    [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0), (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)],
    dtype=np.int64,
)
_EDGE_CELL = np.array(
    [
        (0, 0, 0, 0),  # e0: x edge at cell corner
        (1, 0, 0, 1),  # e1: y edge at +x
        (0, 1, 0, 0),  # e2: x edge at +y
        (0, 0, 0, 1),  # e3: y edge
        (0, 0, 1, 0),  # e4: x edge at +z
        (1, 0, 1, 1),  # e5
        (0, 1, 1, 0),  # e6
        (0, 0, 1, 1),  # e7
        (0, 0, 0, 2),  # e8: z edge
        (1, 0, 0, 2),  # e9
        (1, 1, 0, 2),  # e10
        (0, 1, 0, 2),  # e11
    ],
    dtype=np.int64,
)
_NTRI = (TRI_TABLE >= 0).sum(axis=1) // 3


def marching_cubes(
    vol,
    iso: float = 0.0,
    pad_value: float = 1.0,
    color_range: tuple[float, float] = (-1.0, 1.0),
) -> TriMesh:
    """Extract the iso-surface of the SDF channel as a colored triangle mesh.

    ``vol`` is a DenseVolume (1 channel SDF, or 4 channels SDF+RGB) or a
    SparseVolume with 4 channels. ``pad_value`` is the outside value used for
    the boundary ring and for unoccupied sparse cells (+1.0 for normalized
    SDFs, +truncation for world-unit SDFs). Color channels in ``color_range``
    are remapped to [0, 1] on output.
    """
    spec = vol.spec
    n = spec.resolution
    m = n + 2
    scalars = np.full((m, m, m), pad_value, dtype=np.float64)
    colors = None
    defined = np.zeros((m, m, m), dtype=bool)
    if isinstance(vol, SparseVolume):
        if vol.channels != 4:
            raise ValueError("sparse marching cubes expects 4 channels (SDF + RGB)")
        i, j, k = vol.indices[:, 0] + 1, vol.indices[:, 1] + 1, vol.indices[:, 2] + 1
        scalars[i, j, k] = vol.values[:, 0]
        colors = np.zeros((m, m, m, 3), dtype=np.float64)
        colors[i, j, k] = vol.values[:, 1:4]
        defined[i, j, k] = True
    elif isinstance(vol, DenseVolume):
        scalars[1:-1, 1:-1, 1:-1] = vol.data[..., 0]
        defined[1:-1, 1:-1, 1:-1] = True
        if vol.channels >= 4:
            colors = np.zeros((m, m, m, 3), dtype=np.float64)
            colors[1:-1, 1:-1, 1:-1] = vol.data[..., 1:4]
    else:
        raise TypeError("expected DenseVolume or SparseVolume")

    inside = scalars < iso
    nc = m - 1
    cfg = np.zeros((nc, nc, nc), dtype=np.int32)
    for bit, (dx, dy, dz) in enumerate(_CORNERS):
        cfg |= inside[dx : dx + nc, dy : dy + nc, dz : dz + nc].astype(np.int32) << bit

    # one welded vertex per crossing grid edge, per axis
    h = spec.voxel_size
    axis_pts = spec.extent_lo + (np.arange(m) - 0.5) * h
    vid = []
    verts = []
    vcols = []
    next_id = 0
    for ax in range(3):
        s0 = scalars
        s1 = np.roll(scalars, -1, axis=ax)
        sl = [slice(None)] * 3
        sl[ax] = slice(0, m - 1)
        sl = tuple(sl)
        cross = (inside ^ np.roll(inside, -1, axis=ax))[sl]
        ids = np.full(cross.shape, -1, dtype=np.int64)
        loc = np.argwhere(cross)
        ids[loc[:, 0], loc[:, 1], loc[:, 2]] = next_id + np.arange(len(loc))
        next_id += len(loc)
        vid.append(ids)
        if len(loc) == 0:
            continue
        a = s0[sl][loc[:, 0], loc[:, 1], loc[:, 2]]
        b = s1[sl][loc[:, 0], loc[:, 1], loc[:, 2]]
        with np.errstate(invalid="ignore", divide="ignore"):
            t = np.where(b != a, (iso - a) / (b - a), 0.5)
        p0 = axis_pts[loc]  # (L, 3) component-wise start coords
        p = p0.copy()
        p[:, ax] += t * h
        verts.append(p)
        if colors is not None:
            c0 = colors[loc[:, 0], loc[:, 1], loc[:, 2]].copy()
            loc1 = loc.copy()
            loc1[:, ax] += 1
            c1 = colors[loc1[:, 0], loc1[:, 1], loc1[:, 2]].copy()
            d0 = defined[loc[:, 0], loc[:, 1], loc[:, 2]]
            d1 = defined[loc1[:, 0], loc1[:, 1], loc1[:, 2]]
            c0[~d0] = c1[~d0]  # crossing edges have at least one defined end
            c1[~d1] = c0[~d1]
            vcols.append(c0 + t[:, None] * (c1 - c0))

    if next_id == 0:
        warnings.warn("no iso crossing anywhere: empty mesh")
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    vertices = np.concatenate(verts)
    vertex_colors = None
    if colors is not None:
        lo_c, hi_c = color_range
        vertex_colors = np.clip((np.concatenate(vcols) - lo_c) / (hi_c - lo_c), 0.0, 1.0)

    # assemble triangles from the per-configuration table
    cells = np.argwhere(EDGE_TABLE[cfg] != 0)
    ccfg = cfg[cells[:, 0], cells[:, 1], cells[:, 2]]
    ntri = _NTRI[ccfg]
    rep = np.repeat(np.arange(len(cells)), ntri)
    slot = np.arange(len(rep)) - np.repeat(
        np.concatenate([[0], np.cumsum(ntri)[:-1]]), ntri
    )
    tri_edges = TRI_TABLE[ccfg[rep][:, None], (3 * slot)[:, None] + np.arange(3)]
    tris = np.empty(tri_edges.shape, dtype=np.int64)
    base = cells[rep]
    for col in range(3):
        e = tri_edges[:, col]
        off = _EDGE_CELL[e]
        ci = base[:, 0] + off[:, 0]
        cj = base[:, 1] + off[:, 1]
        ck = base[:, 2] + off[:, 2]
        for ax in range(3):
            sel = off[:, 3] == ax
            tris[sel, col] = vid[ax][ci[sel], cj[sel], ck[sel]]

    # table winding encloses the inside; flip so normals face positive SDF
    tris = tris[:, [0, 2, 1]]
    return TriMesh(vertices, tris, vertex_colors=vertex_colors)
