"""Procedural watertight shape corpus and training-sample assembly.

Shapes are CSG unions of randomly posed primitives (sphere, box, cylinder,
torus, superellipsoid), composed by SDF-min on a dense generator grid and
triangulated with marching cubes, so every mesh is watertight by
construction. Primitives carry random base colors with an optional two-tone
stripe/checker detail pattern that gives the texture stages high-frequency
content to recover.

A training sample bundles: the mesh, the coarse SDF/occupancy volumes, the
fine sparse SDF+color volume on the subdivided occupancy, six posed renders
plus the input view, and the rig. Corpus building is deterministic per
(seed, config) and every sample is re-validated at load time.
"""

from __future__ import annotations

import json
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cameras import (
    PoseRig,
    RenderedView,
    load_view,
    make_pose_rig,
    rasterize,
    save_view,
    unproject_views,
)
from .meshes import TriMesh, load_mesh, save_mesh
from .marching import marching_cubes
from .seeding import derive_rng
from .volumes import (
    DenseVolume,
    sort_voxel_indices,
    SparseVolume,
    VolumeSpec,
    build_color_volume,
    compute_sdf_volume,
    load_volume,
    save_volume,
    sdf_to_occupancy,
    sdf_volume_at_indices,
    subdivide_occupancy,
)

__all__ = [
    "ShapeSample",
    "CorpusManifest",
    "generate_shape",
    "build_sample",
    "build_corpus",
    "load_sample",
    "load_manifest",
    "val_split_ids",
]

_GEN_EXTENT = 0.65  # generator grid half-width; primitives never reach it


# ---------------------------------------------------------------------------
# primitive SDFs (exact zero sets; distances exact except ellipsoid/superell.)
# ---------------------------------------------------------------------------


def _sd_ellipsoid(p, radii):
    k0 = np.linalg.norm(p / radii, axis=-1)
    k1 = np.linalg.norm(p / (radii * radii), axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(k1 > 0, k0 * (k0 - 1.0) / k1, -radii.min())
    return d


def _sd_box(p, half):
    q = np.abs(p) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


def _sd_cylinder(p, r, h):
    dxy = np.linalg.norm(p[..., :2], axis=-1) - r
    dz = np.abs(p[..., 2]) - h
    outside = np.sqrt(np.maximum(dxy, 0.0) ** 2 + np.maximum(dz, 0.0) ** 2)
    inside = np.minimum(np.maximum(dxy, dz), 0.0)
    return outside + inside


def _sd_torus(p, major, minor):
    q = np.stack([np.linalg.norm(p[..., :2], axis=-1) - major, p[..., 2]], axis=-1)
    return np.linalg.norm(q, axis=-1) - minor


def _sd_superellipsoid(p, radii, e):
    # radial scaling estimate: exact on the zero set, monotone across it
    f = (np.abs(p / radii) ** e).sum(axis=-1)
    r = np.linalg.norm(p, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.where(f > 0, f ** (-1.0 / e), np.inf)
        d = np.where(np.isfinite(lam), r * (1.0 - lam), -radii.min())
    d = np.where(r == 0, -radii.min(), d)
    return d


@dataclass
class _Primitive:
    kind: str
    rotation: np.ndarray  # (3, 3)
    center: np.ndarray  # (3,)
    params: dict
    base_color: np.ndarray
    alt_color: np.ndarray
    pattern: str  # "flat" | "stripe" | "checker"
    pattern_dirs: np.ndarray  # (2, 3) local-frame directions
    pattern_width: float

    def sdf(self, points: np.ndarray) -> np.ndarray:
        local = (points - self.center) @ self.rotation  # R^T applied row-wise
        if self.kind == "sphere":
            return _sd_ellipsoid(local, self.params["radii"])
        if self.kind == "box":
            return _sd_box(local, self.params["half"])
        if self.kind == "cylinder":
            return _sd_cylinder(local, self.params["r"], self.params["h"])
        if self.kind == "torus":
            return _sd_torus(local, self.params["major"], self.params["minor"])
        if self.kind == "superellipsoid":
            return _sd_superellipsoid(local, self.params["radii"], self.params["e"])
        raise ValueError(self.kind)

    def color(self, points: np.ndarray) -> np.ndarray:
        local = (points - self.center) @ self.rotation
        n = len(points)
        if self.pattern == "flat":
            return np.broadcast_to(self.base_color, (n, 3)).copy()
        t0 = np.floor(local @ self.pattern_dirs[0] / self.pattern_width).astype(np.int64)
        if self.pattern == "stripe":
            odd = t0 % 2 == 1
        else:
            t1 = np.floor(local @ self.pattern_dirs[1] / self.pattern_width).astype(np.int64)
            odd = (t0 + t1) % 2 == 1
        out = np.broadcast_to(self.base_color, (n, 3)).copy()
        out[odd] = self.alt_color
        return out


def _random_unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _random_rotation(rng):
    axis = _random_unit(rng)
    ang = rng.uniform(0.0, 2 * np.pi)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(ang) * k + (1 - np.cos(ang)) * (k @ k)


def _random_color(rng):
    # random hue, saturated-ish, keeps colors distinguishable after render
    h = rng.uniform(0.0, 6.0)
    s = rng.uniform(0.45, 1.0)
    v = rng.uniform(0.45, 1.0)
    c = v * s
    x = c * (1 - abs(h % 2 - 1))
    sector = int(h) % 6
    rgb = [(c, x, 0), (x, c, 0), (0, c, x), (0, x, c), (x, 0, c), (c, 0, x)][sector]
    return np.array(rgb) + (v - c)


def _draw_primitive(rng, first: bool, texture_detail: bool) -> _Primitive:
    kind = rng.choice(["sphere", "box", "cylinder", "torus", "superellipsoid"])
    scale = rng.uniform(0.14, 0.28)
    aniso = rng.uniform(0.65, 1.3, size=3)
    center = rng.uniform(-0.1, 0.1, size=3) if first else rng.uniform(-0.28, 0.28, size=3)
    if kind == "sphere":
        params = {"radii": scale * aniso}
    elif kind == "box":
        params = {"half": scale * aniso * 0.85}
    elif kind == "cylinder":
        params = {"r": scale * aniso[0] * 0.8, "h": scale * aniso[2]}
    elif kind == "torus":
        minor = scale * rng.uniform(0.2, 0.4)
        params = {"major": scale * 0.85 - minor, "minor": minor}
    else:
        params = {"radii": scale * aniso, "e": rng.uniform(2.5, 6.0)}
    base = _random_color(rng)
    alt = _random_color(rng)
    pattern = rng.choice(["stripe", "checker", "flat"], p=[0.45, 0.35, 0.2]) if texture_detail else "flat"
    dirs = np.stack([_random_unit(rng), _random_unit(rng)])
    width = rng.uniform(0.045, 0.1)
    return _Primitive(kind, _random_rotation(rng), center, params, base, alt, pattern, dirs, width)


def generate_shape(
    seed: int,
    complexity: int,
    gen_resolution: int = 128,
    texture_detail: bool = True,
    max_attempts: int = 8,
) -> TriMesh:
    """Deterministic watertight CSG shape, normalized to [-0.5, 0.5]^3.

    complexity 1 always yields a single primitive; higher tiers draw up to
    2 + complexity primitives. Degenerate draws (too few triangles, sliver
    bounding boxes, failed watertight check) retry on the same stream.
    """
    if not 1 <= complexity <= 5:
        raise ValueError("complexity must be in 1..5")
    rng = derive_rng(seed, "generate_shape")
    spec = VolumeSpec(
        gen_resolution, 1e-3, 1.0, extent_lo=-_GEN_EXTENT, extent_hi=_GEN_EXTENT
    )
    centers = spec.cell_centers().reshape(-1, 3)
    for _ in range(max_attempts):
        if complexity == 1:
            count = 1
        else:
            count = int(rng.integers(2, 2 + complexity + 1))
        prims = [_draw_primitive(rng, i == 0, texture_detail) for i in range(count)]
        sdf = np.stack([p.sdf(centers) for p in prims]).min(axis=0)
        n = spec.resolution
        vol = DenseVolume(spec, sdf.reshape(n, n, n, 1).astype(np.float32))
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            mesh = marching_cubes(vol, pad_value=1.0)
        if mesh.num_triangles < 500:
            continue
        bbox = mesh.vertices.max(0) - mesh.vertices.min(0)
        if bbox.min() < 0.12:
            continue
        if not mesh.check_watertight():
            continue
        # per-vertex color from the owning (argmin SDF) primitive
        per_prim = np.stack([p.sdf(mesh.vertices) for p in prims])
        owner = per_prim.argmin(axis=0)
        colors = np.zeros((mesh.num_vertices, 3))
        for i, p in enumerate(prims):
            sel = owner == i
            if sel.any():
                colors[sel] = p.color(mesh.vertices[sel])
        mesh.vertex_colors = np.clip(colors, 0.0, 1.0)
        out = mesh.normalize()
        out.watertight = True
        return out
    raise RuntimeError(f"generate_shape: no valid shape after {max_attempts} attempts (seed={seed})")


# ---------------------------------------------------------------------------
# training samples
# ---------------------------------------------------------------------------


@dataclass
class ShapeSample:
    shape_id: str
    mesh: TriMesh
    sdf_vol: DenseVolume  # coarse normalized SDF, 1 channel
    occ_vol: DenseVolume  # coarse binary shell
    fine_sparse: SparseVolume  # 4 channels: normalized SDF + RGB in [-1, 1]
    views: list  # 6 RenderedView
    poses: PoseRig
    input_view: RenderedView
    # fine values on the one-ring dilation of the shell: supplies targets for
    # voxels that occupancy-corruption augmentation adds during training
    fine_extended: SparseVolume | None = None

    def validate(self) -> None:
        want = subdivide_occupancy(self.occ_vol)
        if want.shape != self.fine_sparse.indices.shape or not np.array_equal(
            want, self.fine_sparse.indices
        ):
            raise ValueError(f"{self.shape_id}: fine indices != subdivided coarse occupancy")
        # Lipschitz sign consistency: where the parent-center |SDF| exceeds
        # the parent-to-child center distance, the child sign must agree.
        cs, fs = self.sdf_vol.spec, self.fine_sparse.spec
        parents = self.fine_sparse.indices // 2
        coarse = self.sdf_vol.data[parents[:, 0], parents[:, 1], parents[:, 2], 0].astype(
            np.float64
        ) * cs.sdf_truncation
        fine = self.fine_sparse.values[:, 0].astype(np.float64) * fs.sdf_truncation
        margin = math.sqrt(3.0) * cs.voxel_size / 4.0
        decisive = (np.abs(coarse) > margin) & (fine != 0)
        if np.any(np.sign(fine[decisive]) != np.sign(coarse[decisive])):
            bad = int(np.count_nonzero(np.sign(fine[decisive]) != np.sign(coarse[decisive])))
            raise ValueError(f"{self.shape_id}: {bad} fine/coarse SDF sign conflicts")


def build_sample(
    mesh: TriMesh,
    coarse_spec: VolumeSpec,
    fine_spec: VolumeSpec,
    rig_params: dict,
    seed: int,
    shape_id: str = "sample",
) -> ShapeSample:
    """Volumes + renders + unprojected color volume for one shape."""
    if fine_spec.resolution != 2 * coarse_spec.resolution:
        raise ValueError("fine resolution must be twice the coarse resolution")
    rng = derive_rng(seed, "input_pose")
    elev = rng.uniform(*rig_params.get("input_elevation_range", (-10.0, 40.0)))
    azim = rng.uniform(0.0, 360.0)
    rig = make_pose_rig(
        elev,
        azim,
        radius=rig_params.get("radius", 1.5),
        fov_y=rig_params.get("fov_y", 45.0),
        resolution=rig_params.get("resolution", 128),
    )
    views = [rasterize(mesh, p) for p in rig.target_poses]
    input_view = rasterize(mesh, rig.input_pose)

    sdf_vol = compute_sdf_volume(mesh, coarse_spec)
    occ_vol = sdf_to_occupancy(sdf_vol)
    fine_idx = subdivide_occupancy(occ_vol)
    n = fine_spec.resolution
    offs = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])
    ring = (fine_idx[:, None, :] + offs[None]).reshape(-1, 3)
    ring = ring[np.all((ring >= 0) & (ring < n), axis=1)]
    ext_idx = sort_voxel_indices(np.concatenate([fine_idx, ring]))
    ext_sdf = sdf_volume_at_indices(mesh, fine_spec, ext_idx)
    cloud = unproject_views(views, rig.target_poses)
    color_vol = build_color_volume(cloud, ext_idx, fine_spec)
    ext_values = np.concatenate([ext_sdf[:, None], color_vol.values], axis=1)
    fine_extended = SparseVolume(fine_spec, ext_idx, ext_values)

    ext_lin = fine_extended.linear_indices()
    gt_lin = (fine_idx[:, 0] * n + fine_idx[:, 1]) * n + fine_idx[:, 2]
    rows = np.searchsorted(ext_lin, gt_lin)
    fine_sparse = SparseVolume(fine_spec, fine_idx, ext_values[rows])

    sample = ShapeSample(
        shape_id, mesh, sdf_vol, occ_vol, fine_sparse, views, rig, input_view, fine_extended
    )
    sample.validate()
    return sample


# ---------------------------------------------------------------------------
# corpus on disk
# ---------------------------------------------------------------------------


@dataclass
class CorpusManifest:
    corpus_seed: int
    n_samples: int
    val_fraction: float
    coarse: VolumeSpec
    fine: VolumeSpec
    rig_params: dict
    samples: list  # [{"id", "seed", "complexity", "split"}]
    root: Path

    def ids(self, split: str | None = None) -> list:
        return [s["id"] for s in self.samples if split is None or s["split"] == split]

    def sample_dir(self, shape_id: str) -> Path:
        return self.root / "samples" / shape_id


def _split_hash(corpus_seed: int, shape_id: str) -> int:
    digest = hashlib.blake2b(
        f"{corpus_seed}:{shape_id}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


def val_split_ids(corpus_seed: int, ids: list, val_fraction: float) -> set:
    """The ceil(frac * n) ids with the smallest hashes become validation."""
    n_val = math.ceil(val_fraction * len(ids))
    ranked = sorted(ids, key=lambda s: _split_hash(corpus_seed, s))
    return set(ranked[:n_val])


def build_corpus(
    n_samples: int,
    seed: int,
    out_dir,
    coarse_spec: VolumeSpec,
    fine_spec: VolumeSpec,
    rig_params: dict | None = None,
    val_fraction: float = 0.1,
    complexity_choices=(2, 3, 4),
    texture_detail: bool = True,
    progress=None,
) -> CorpusManifest:
    rig_params = dict(rig_params or {})
    root = Path(out_dir)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    ids = [f"shape_{i:05d}" for i in range(n_samples)]
    val_ids = val_split_ids(seed, ids, val_fraction)
    entries = []
    for i, shape_id in enumerate(ids):
        rng = derive_rng(seed, "corpus", shape_id)
        complexity = int(rng.choice(np.asarray(complexity_choices)))
        shape_seed = int(rng.integers(0, 2**62))
        mesh = generate_shape(shape_seed, complexity, texture_detail=texture_detail)
        sample = build_sample(
            mesh, coarse_spec, fine_spec, rig_params, seed=shape_seed, shape_id=shape_id
        )
        _write_sample(sample, root / "samples" / shape_id)
        entries.append(
            {
                "id": shape_id,
                "seed": shape_seed,
                "complexity": complexity,
                "split": "val" if shape_id in val_ids else "train",
            }
        )
        if progress:
            progress(i + 1, n_samples)
    manifest = CorpusManifest(
        seed, n_samples, val_fraction, coarse_spec, fine_spec, rig_params, entries, root
    )
    _write_manifest(manifest)
    return manifest


def _pose_dict(p):
    return {
        "elevation": p.elevation,
        "azimuth": p.azimuth,
        "radius": p.radius,
        "fov_y": p.fov_y,
        "resolution": p.resolution,
    }


def _write_sample(sample: ShapeSample, d: Path) -> None:
    d.mkdir(parents=True, exist_ok=True)
    save_mesh(sample.mesh, d / "mesh.ply")
    save_volume(sample.sdf_vol, d / "coarse.vxl")
    save_volume(sample.fine_sparse, d / "fine.vxl")
    if sample.fine_extended is not None:
        save_volume(sample.fine_extended, d / "fine_ext.vxl")
    for k, v in enumerate(sample.views):
        save_view(v, d / f"view_{k}.png", d / f"depth_{k}.dpt")
    save_view(sample.input_view, d / "input.png", d / "depth_input.dpt")
    rig = sample.poses
    poses = {
        "input": _pose_dict(rig.input_pose),
        "targets": [_pose_dict(p) for p in rig.target_poses],
    }
    (d / "poses.txt").write_text(json.dumps(poses, indent=1, sort_keys=True))


def load_sample(path, validate: bool = True) -> ShapeSample:
    d = Path(path)
    mesh = load_mesh(d / "mesh.ply")
    mesh.check_watertight()
    mesh.check_normalized()
    sdf_vol = load_volume(d / "coarse.vxl")
    fine_sparse = load_volume(d / "fine.vxl")
    ext_path = d / "fine_ext.vxl"
    fine_extended = load_volume(ext_path) if ext_path.exists() else None
    occ_vol = sdf_to_occupancy(sdf_vol)
    poses = json.loads((d / "poses.txt").read_text())
    rig = make_pose_rig(
        poses["input"]["elevation"],
        poses["input"]["azimuth"],
        poses["input"]["radius"],
        poses["input"]["fov_y"],
        poses["input"]["resolution"],
    )
    views = [load_view(d / f"view_{k}.png", d / f"depth_{k}.dpt") for k in range(6)]
    input_view = load_view(d / "input.png", d / "depth_input.dpt")
    sample = ShapeSample(
        d.name, mesh, sdf_vol, occ_vol, fine_sparse, views, rig, input_view, fine_extended
    )
    if validate:
        sample.validate()
    return sample


def _write_manifest(m: CorpusManifest) -> None:
    def spec_dict(s: VolumeSpec):
        return {
            "resolution": s.resolution,
            "occupancy_threshold": s.occupancy_threshold,
            "sdf_truncation": s.sdf_truncation,
            "extent_lo": s.extent_lo,
            "extent_hi": s.extent_hi,
        }

    doc = {
        "format": "corpus-manifest-v1",
        "corpus_seed": m.corpus_seed,
        "n_samples": m.n_samples,
        "val_fraction": m.val_fraction,
        "coarse": spec_dict(m.coarse),
        "fine": spec_dict(m.fine),
        "rig_params": m.rig_params,
        "samples": m.samples,
    }
    (m.root / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_manifest(root) -> CorpusManifest:
    root = Path(root)
    doc = json.loads((root / "manifest.json").read_text())
    if doc.get("format") != "corpus-manifest-v1":
        raise ValueError(f"{root}: not a corpus manifest")
    coarse = VolumeSpec(**doc["coarse"])
    fine = VolumeSpec(**doc["fine"])
    missing = [
        s["id"] for s in doc["samples"] if not (root / "samples" / s["id"]).is_dir()
    ]
    if missing:
        raise FileNotFoundError(f"{root}: missing sample dirs: {missing[:4]}")
    return CorpusManifest(
        doc["corpus_seed"],
        doc["n_samples"],
        doc["val_fraction"],
        coarse,
        fine,
        doc["rig_params"],
        doc["samples"],
        root,
    )
