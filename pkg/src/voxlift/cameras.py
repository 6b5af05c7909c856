"""The fixed six-view camera scheme, projection, and software rasterizer.

World frame: +z is up, cameras look at the origin. A pose is parameterized
by elevation/azimuth/radius (plus field of view and square image size); the
camera body can additionally carry a small perturbation (rotation delta and
position offset) on top of the nominal orientation, which is how training
time pose jitter is represented without giving up the nominal rig fields.

The six target poses alternate elevations of +30 and -20 degrees, with
azimuths at input + 30 + 60*k degrees.

Image convention: pixel (row, col) covers the unit square centered at
(col + 0.5, row + 0.5) in continuous (u, v), v growing downward. Background
pixels are white (1, 1, 1) with depth +inf and mask 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .volumes import EXTENT_HI, EXTENT_LO, ColoredPointCloud
from .meshes import TriMesh

__all__ = [
    "CameraPose",
    "PoseRig",
    "RenderedView",
    "make_pose_rig",
    "project",
    "unproject",
    "rasterize",
    "unproject_views",
    "tile_views",
    "untile_views",
    "perturb_poses",
    "degrade_views",
    "save_view",
    "load_view",
]

BACKGROUND = np.array([1.0, 1.0, 1.0])
TARGET_ELEVATIONS = (30.0, -20.0)
AZIMUTH_START = 30.0
AZIMUTH_STEP = 60.0
_NEAR = 1e-6


@dataclass
class CameraPose:
    elevation: float  # degrees, (-90, 90)
    azimuth: float  # degrees, absolute in the world frame
    radius: float
    fov_y: float  # degrees
    resolution: int  # square image, pixels per side
    rot_delta: np.ndarray = field(default_factory=lambda: np.eye(3))
    trans_delta: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not -90.0 < self.elevation < 90.0:
            raise ValueError("elevation must be in (-90, 90) degrees")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        self.rot_delta = np.asarray(self.rot_delta, dtype=np.float64)
        self.trans_delta = np.asarray(self.trans_delta, dtype=np.float64)

    @property
    def focal(self) -> float:
        return (self.resolution / 2.0) / np.tan(np.deg2rad(self.fov_y) / 2.0)

    def extrinsics(self):
        """(position, right, down, forward) of the possibly perturbed camera."""
        el = np.deg2rad(self.elevation)
        az = np.deg2rad(self.azimuth)
        pos = self.radius * np.array(
            [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)]
        )
        fwd = -pos / np.linalg.norm(pos)
        right = np.cross(fwd, [0.0, 0.0, 1.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = self.rot_delta
        return pos + self.trans_delta, R @ right, R @ down, R @ fwd

    def is_perturbed(self) -> bool:
        return not (
            np.allclose(self.rot_delta, np.eye(3)) and np.allclose(self.trans_delta, 0)
        )


@dataclass
class PoseRig:
    input_pose: CameraPose
    target_poses: list  # exactly 6 CameraPose

    def __post_init__(self):
        if len(self.target_poses) != 6:
            raise ValueError("rig must hold exactly 6 target poses")

    def validate(self) -> None:
        for k, p in enumerate(self.target_poses):
            want_el = TARGET_ELEVATIONS[k % 2]
            want_az = (self.input_pose.azimuth + AZIMUTH_START + AZIMUTH_STEP * k) % 360.0
            if abs(p.elevation - want_el) > 1e-9:
                raise ValueError(f"target {k}: elevation {p.elevation} != {want_el}")
            if abs((p.azimuth - want_az + 180.0) % 360.0 - 180.0) > 1e-9:
                raise ValueError(f"target {k}: azimuth {p.azimuth} != {want_az}")
            if p.radius != self.input_pose.radius or p.fov_y != self.input_pose.fov_y:
                raise ValueError(f"target {k}: radius/fov differ from input pose")


@dataclass
class RenderedView:
    rgb: np.ndarray  # (H, W, 3) float in [0, 1]
    depth: np.ndarray  # (H, W) float, +inf background
    mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.rgb = np.ascontiguousarray(self.rgb, dtype=np.float64)
        self.depth = np.ascontiguousarray(self.depth, dtype=np.float64)
        self.mask = np.ascontiguousarray(self.mask, dtype=bool)

    @property
    def resolution(self) -> int:
        return self.rgb.shape[0]


def make_pose_rig(
    input_elevation: float,
    input_azimuth: float,
    radius: float = 1.5,
    fov_y: float = 45.0,
    resolution: int = 128,
) -> PoseRig:
    """Input pose plus the six fixed-elevation, relative-azimuth targets."""
    inp = CameraPose(input_elevation, input_azimuth % 360.0, radius, fov_y, resolution)
    targets = [
        CameraPose(
            TARGET_ELEVATIONS[k % 2],
            (input_azimuth + AZIMUTH_START + AZIMUTH_STEP * k) % 360.0,
            radius,
            fov_y,
            resolution,
        )
        for k in range(6)
    ]
    return PoseRig(inp, targets)


def project_points(points: np.ndarray, pose: CameraPose):
    """Vectorized pinhole projection.

    Returns (uv (N, 2), depth (N,), valid (N,)); invalid entries are behind
    the camera or outside the image and must not be used.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    pos, right, down, fwd = pose.extrinsics()
    q = points - pos
    x = q @ right
    y = q @ down
    z = q @ fwd
    f = pose.focal
    res = pose.resolution
    with np.errstate(divide="ignore", invalid="ignore"):
        u = res / 2.0 + f * x / z
        v = res / 2.0 + f * y / z
    valid = (z > _NEAR) & (u >= 0) & (u < res) & (v >= 0) & (v < res)
    return np.stack([u, v], axis=1), z, valid


def project(point, pose: CameraPose):
    """Single-point projection; returns (u, v, depth) or None if out of frustum."""
    uv, z, valid = project_points(np.asarray(point, dtype=np.float64)[None], pose)
    if not valid[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1]), float(z[0])


def unproject(uv: np.ndarray, depth: np.ndarray, pose: CameraPose) -> np.ndarray:
    """Inverse of projection: pixel coordinates + depth back to world points."""
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    depth = np.atleast_1d(np.asarray(depth, dtype=np.float64))
    pos, right, down, fwd = pose.extrinsics()
    f = pose.focal
    res = pose.resolution
    x = (uv[:, 0] - res / 2.0) * depth / f
    y = (uv[:, 1] - res / 2.0) * depth / f
    return pos + x[:, None] * right + y[:, None] * down + depth[:, None] * fwd


def rasterize(mesh: TriMesh, pose: CameraPose, unlit: bool = True) -> RenderedView:
    """Z-buffered perspective rasterization with barycentric vertex colors.

    A pixel is covered when its center falls inside the projected triangle.
    Depth is perspective-correct (1/z interpolation); colors use screen-space
    barycentrics. Equal-depth ties resolve to the lower triangle index, so
    output is independent of triangle submission order.
    """
    res = pose.resolution
    rgb = np.ones((res, res, 3))
    depth = np.full((res, res), np.inf)
    mask = np.zeros((res, res), dtype=bool)
    if mesh.is_empty():
        return RenderedView(rgb, depth, mask)
    if unlit and mesh.vertex_colors is None:
        raise ValueError("unlit rendering requires vertex colors")

    uv, z, _ = project_points(mesh.vertices, pose)
    tri = mesh.triangles
    tz = z[tri]
    ok = (tz > _NEAR).all(axis=1)  # no near-plane clipping: drop such triangles
    tri = tri[ok]
    if len(tri) == 0:
        return RenderedView(rgb, depth, mask)
    tuv = uv[tri]  # (T, 3, 2)
    tz = z[tri]

    # candidate (triangle, pixel) pairs from projected bounding boxes
    lo = np.maximum(np.floor(tuv.min(axis=1) - 0.5).astype(np.int64), 0)
    hi = np.minimum(np.ceil(tuv.max(axis=1) - 0.5).astype(np.int64), res - 1)
    nu = np.maximum(hi[:, 0] - lo[:, 0] + 1, 0)
    nv = np.maximum(hi[:, 1] - lo[:, 1] + 1, 0)
    counts = nu * nv
    live = counts > 0
    if not live.any():
        return RenderedView(rgb, depth, mask)
    t_rep = np.repeat(np.nonzero(live)[0], counts[live])
    local = np.arange(len(t_rep)) - np.repeat(
        np.concatenate([[0], np.cumsum(counts[live])[:-1]]), counts[live]
    )
    w = nv[t_rep]
    px = lo[t_rep, 0] + local // w
    py = lo[t_rep, 1] + local % w
    cu = px + 0.5
    cv = py + 0.5

    a = tuv[t_rep, 0]
    e1 = tuv[t_rep, 1] - a
    e2 = tuv[t_rep, 2] - a
    den = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    qu = cu - a[:, 0]
    qv = cv - a[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (qu * e2[:, 1] - qv * e2[:, 0]) / den
        t = (e1[:, 0] * qv - e1[:, 1] * qu) / den
    inside = (np.abs(den) > 1e-30) & (s >= 0) & (t >= 0) & (s + t <= 1)
    if not inside.any():
        return RenderedView(rgb, depth, mask)
    t_rep = t_rep[inside]
    px, py, s, t = px[inside], py[inside], s[inside], t[inside]

    zt = tz[t_rep]
    inv_z = (1 - s - t) / zt[:, 0] + s / zt[:, 1] + t / zt[:, 2]
    zpix = 1.0 / inv_z

    pix = py * res + px  # row-major pixel id (v is the row)
    order = np.lexsort((t_rep, zpix, pix))
    pix, zpix, t_rep, s, t = pix[order], zpix[order], t_rep[order], s[order], t[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]

    pr, pc = np.divmod(pix[first], res)
    depth[pr, pc] = zpix[first]
    mask[pr, pc] = True
    if unlit:
        tc = mesh.vertex_colors[mesh.triangles[ok][t_rep[first]]]
        bary = np.stack([1 - s[first] - t[first], s[first], t[first]], axis=1)
        rgb[pr, pc] = np.clip(np.einsum("pk,pkc->pc", bary, tc), 0.0, 1.0)
    else:
        rgb[pr, pc] = 0.5
    return RenderedView(rgb, depth, mask)


def unproject_views(views: list, poses: list) -> ColoredPointCloud:
    """Lift every foreground pixel of every view to a colored 3D point.

    Points outside the volume extent are dropped; all-background input is an
    error (there is nothing to build a color volume from).
    """
    pts, cols = [], []
    for view, pose in zip(views, poses):
        rows, colsx = np.nonzero(view.mask)
        if len(rows) == 0:
            continue
        uv = np.stack([colsx + 0.5, rows + 0.5], axis=1)
        p = unproject(uv, view.depth[rows, colsx], pose)
        keep = np.all((p >= EXTENT_LO) & (p <= EXTENT_HI), axis=1)
        pts.append(p[keep])
        cols.append(view.rgb[rows, colsx][keep])
    if not pts or sum(len(p) for p in pts) == 0:
        raise ValueError("all views are background: empty point cloud")
    return ColoredPointCloud(np.concatenate(pts), np.concatenate(cols))


def tile_views(rgbs: list) -> np.ndarray:
    """Pack six images into one 3-rows x 2-cols composite (row-major)."""
    if len(rgbs) != 6:
        raise ValueError("expected 6 views")
    shapes = {im.shape for im in rgbs}
    if len(shapes) != 1:
        raise ValueError(f"mismatched view shapes: {sorted(shapes)}")
    h, w = rgbs[0].shape[:2]
    out = np.zeros((3 * h, 2 * w, 3), dtype=rgbs[0].dtype)
    for k, im in enumerate(rgbs):
        r, c = divmod(k, 2)
        out[r * h : (r + 1) * h, c * w : (c + 1) * w] = im
    return out


def untile_views(image: np.ndarray) -> list:
    """Exact inverse of :func:`tile_views`."""
    hh, ww = image.shape[:2]
    if hh % 3 or ww % 2:
        raise ValueError("tiled image dimensions must be (3H, 2W)")
    h, w = hh // 3, ww // 2
    return [
        image[r * h : (r + 1) * h, c * w : (c + 1) * w].copy()
        for r in range(3)
        for c in range(2)
    ]


def _random_rotation(rng: np.random.Generator, max_deg: float) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = np.deg2rad(rng.uniform(0.0, max_deg))
    k = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    return np.eye(3) + np.sin(ang) * k + (1 - np.cos(ang)) * (k @ k)


def perturb_poses(
    rig: PoseRig, rot_deg_max: float, trans_frac_max: float, seed
) -> PoseRig:
    """Independent random body rotation and position offset per target pose.

    Deterministic per seed; the input pose is untouched. Passing zero
    magnitudes returns an identical rig.
    """
    if rot_deg_max < 0 or trans_frac_max < 0:
        raise ValueError("perturbation magnitudes must be >= 0")
    rng = np.random.Generator(np.random.PCG64(seed))
    targets = []
    for p in rig.target_poses:
        rot = _random_rotation(rng, rot_deg_max) if rot_deg_max > 0 else np.eye(3)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        mag = rng.uniform(0.0, trans_frac_max) * p.radius
        trans = direction * mag if trans_frac_max > 0 else np.zeros(3)
        targets.append(replace(p, rot_delta=rot @ p.rot_delta, trans_delta=p.trans_delta + trans))
    return PoseRig(rig.input_pose, targets)


def degrade_views(views: list, level: float, seed) -> list:
    """Simulate imperfect predicted views: color shift, noise, mask wobble.

    Per view (independent, deterministic per seed): a global foreground color
    shift up to 0.1*level, additive Gaussian pixel noise with sigma
    0.05*level, and at level >= 0.5 mask erosion or dilation by one pixel.
    Depth maps pass through untouched (they are training-only data).
    """
    if not 0.0 <= level <= 1.0:
        raise ValueError("level must be in [0, 1]")
    if level == 0.0:
        return [RenderedView(v.rgb.copy(), v.depth.copy(), v.mask.copy()) for v in views]
    rng = np.random.Generator(np.random.PCG64(seed))
    out = []
    for view in views:
        rgb = view.rgb.copy()
        mask = view.mask.copy()
        shift = rng.uniform(-0.1 * level, 0.1 * level, size=3)
        rgb[mask] += shift
        if level >= 0.5:
            if rng.random() < 0.5:
                new_mask = ndimage.binary_erosion(mask)
            else:
                new_mask = ndimage.binary_dilation(mask)
            grown = new_mask & ~mask
            if grown.any():
                # new foreground pixels copy their nearest original color
                _, (ir, ic) = ndimage.distance_transform_edt(
                    ~mask, return_indices=True
                )
                rgb[grown] = view.rgb[ir[grown], ic[grown]]
            rgb[mask & ~new_mask] = BACKGROUND
            mask = new_mask
        rgb += rng.normal(0.0, 0.05 * level, size=rgb.shape)
        rgb = np.clip(rgb, 0.0, 1.0)
        out.append(RenderedView(rgb, view.depth.copy(), mask))
    return out


# ---------------------------------------------------------------------------
# image I/O: 8-bit PNG for rgb, DPT1 float32 sidecar for depth
# ---------------------------------------------------------------------------


def save_view(view: RenderedView, rgb_path, depth_path=None) -> None:
    arr = np.clip(np.round(view.rgb * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(rgb_path, format="PNG")
    if depth_path is not None:
        h, w = view.depth.shape
        with open(depth_path, "wb") as f:
            f.write(b"DPT1")
            f.write(np.array([h, w], dtype="<u4").tobytes())
            f.write(view.depth.astype("<f4").tobytes())


def load_view(rgb_path, depth_path=None) -> RenderedView:
    rgb = np.asarray(Image.open(rgb_path).convert("RGB"), dtype=np.float64) / 255.0
    if depth_path is not None:
        with open(depth_path, "rb") as f:
            raw = f.read()
        if raw[:4] != b"DPT1":
            raise ValueError(f"{depth_path}: bad magic, not a DPT1 depth map")
        h, w = np.frombuffer(raw, dtype="<u4", count=2, offset=4)
        depth = np.frombuffer(raw, dtype="<f4", count=h * w, offset=12).reshape(h, w)
        depth = depth.astype(np.float64)
    else:
        depth = np.full(rgb.shape[:2], np.inf)
    mask = np.isfinite(depth)
    if depth_path is None:
        # without depth, foreground = non-background pixels
        mask = np.any(np.abs(rgb - BACKGROUND) > 2.0 / 255.0, axis=-1)
    return RenderedView(rgb, depth, mask)
