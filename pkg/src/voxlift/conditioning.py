"""Multi-view conditioning: patch features lifted into 3D feature volumes.

The chain mirrors the conditioning path of the volumetric denoisers: a small
trainable strided-convolution encoder turns each posed view into a P x P
grid of patch features; every voxel center projects into every view and
bilinearly samples that grid (out-of-frustum voxels get a zero feature);
each per-view vector is extended with a validity bit and the normalized
view-space depth, pushed through a shared MLP, and max-pooled over views
into the voxel's feature. A small convolution pyramid then produces one
condition volume per UNet level, densely for stage 1 and over pooled sparse
index sets for stage 2.

View aggregation is symmetric (max), and views are canonicalized by their
view id before stacking, so permuting the input order leaves every produced
volume bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cameras import CameraPose, RenderedView, project_points
from .params import ParameterStore
from .volumes import VolumeSpec, sort_voxel_indices

__all__ = [
    "PatchFeatureGrid",
    "PatchEncoder",
    "ViewMLP",
    "ConditionPyramid",
    "SparseHierarchy",
    "encode_patches",
    "encode_patch_grids",
    "build_feature_volume",
    "condition_pyramid_dense",
    "condition_pyramid_sparse",
    "project_colors",
    "global_condition",
]


@dataclass
class PatchFeatureGrid:
    grid: Tensor  # (P, P, D); rows follow image rows
    view_id: int
    patch_size: int


def _he(rng, *shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def _gn_groups(c: int) -> int:
    for g in (8, 4, 2):
        if c % g == 0:
            return g
    return 1


class PatchEncoder:
    """Four stride-2 conv blocks: (H, W, 3) image -> (H/16, W/16, D) grid."""

    PATCH = 16

    def __init__(self, store: ParameterStore, prefix: str, out_dim: int, widths, rng):
        chans = [3, *widths, out_dim]
        self.layers = []
        for i in range(len(chans) - 1):
            ci, co = chans[i], chans[i + 1]
            w = store.parameter(f"{prefix}.conv{i}.w", _he(rng, co, ci, 1, 3, 3, fan_in=ci * 9))
            b = store.parameter(f"{prefix}.conv{i}.b", np.zeros(co, dtype=np.float32))
            if i < len(chans) - 2:
                g = store.parameter(f"{prefix}.gn{i}.g", np.ones(co, dtype=np.float32))
                be = store.parameter(f"{prefix}.gn{i}.b", np.zeros(co, dtype=np.float32))
            else:
                g = be = None
            self.layers.append((w, b, g, be))
        self.out_dim = out_dim

    def forward_batch(self, images: np.ndarray) -> Tensor:
        """images (m, H, W, 3) in [0, 1] -> Tensor (m, P, P, D)."""
        m, h, w = images.shape[:3]
        if h % self.PATCH or w % self.PATCH:
            raise ValueError(f"image resolution {h}x{w} not divisible by patch size {self.PATCH}")
        x = Tensor((images.astype(np.float32) * 2.0 - 1.0)[:, None])  # (m, 1, H, W, 3)
        for wt, bt, g, be in self.layers:
            x = ad.conv3d(x, wt, bt, stride=(1, 2, 2))
            if g is not None:
                x = ad.group_norm(x, g, be, groups=_gn_groups(g.data.shape[0]))
                x = ad.silu(x)
        p = x.data.shape[2]
        return ad.reshape(x, (m, p, p, self.out_dim))

    def forward(self, image: np.ndarray) -> Tensor:
        """image (H, W, 3) in [0, 1] -> Tensor (P, P, D)."""
        batch = self.forward_batch(image[None])
        return ad.reshape(batch, batch.data.shape[1:])


def encode_patches(view: RenderedView, encoder: PatchEncoder, view_id: int = 0) -> PatchFeatureGrid:
    return PatchFeatureGrid(encoder.forward(view.rgb), view_id, encoder.PATCH)


def encode_patch_grids(views: list, encoder: PatchEncoder) -> list:
    """Encode several views in one batched pass (one grid per view)."""
    batch = encoder.forward_batch(np.stack([v.rgb for v in views]))
    return [
        PatchFeatureGrid(ad.slice_axis0(batch, k), k, encoder.PATCH)
        for k in range(len(views))
    ]


class ViewMLP:
    """Shared per-view MLP applied before max pooling over views."""

    def __init__(self, store: ParameterStore, prefix: str, dim: int, rng):
        fin = dim + 2  # feature + validity bit + normalized depth
        self.w1 = store.parameter(f"{prefix}.l1.w", _he(rng, fin, dim, fan_in=fin))
        self.b1 = store.parameter(f"{prefix}.l1.b", np.zeros(dim, dtype=np.float32))
        self.w2 = store.parameter(f"{prefix}.l2.w", _he(rng, dim, dim, fan_in=dim))
        self.b2 = store.parameter(f"{prefix}.l2.b", np.zeros(dim, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ad.linear(ad.silu(ad.linear(x, self.w1, self.b1)), self.w2, self.b2)


def build_feature_volume(
    grids: list,
    poses: list,
    centers: np.ndarray,
    mlp: ViewMLP,
    extent_width: float = 1.0,
) -> Tensor:
    """Per-voxel feature (V, D) aggregated from m views by shared-MLP + max.

    ``centers`` are the voxel centers (V, 3) of whichever level is being
    conditioned; ``grids``/``poses`` are parallel lists. Views are processed
    in ascending view-id order so the result is independent of input order.
    """
    order = np.argsort([g.view_id for g in grids], kind="stable")
    per_view = []
    for vi in order:
        grid, pose = grids[vi], poses[vi]
        uv, z, valid = project_points(centers, pose)
        patch = grid.patch_size
        coords = np.stack(
            [uv[:, 1] / patch - 0.5, uv[:, 0] / patch - 0.5], axis=1
        )  # (row, col) in grid index space
        coords = np.where(valid[:, None], coords, 0.0)
        feats = ad.grid_sample_2d(grid.grid, coords)
        mask = np.broadcast_to(
            valid[:, None].astype(np.float32), feats.data.shape
        ).copy()
        feats = ad.mul(feats, Tensor(mask))
        nd = np.where(valid, (z - pose.radius) / extent_width + 0.5, 0.0)
        extra = np.stack([valid.astype(np.float32), nd.astype(np.float32)], axis=1)
        per_view.append(mlp.forward(ad.concat([feats, Tensor(extra)], axis=1)))
    v, d = per_view[0].data.shape
    stacked = ad.concat([ad.reshape(t, (v, 1, d)) for t in per_view], axis=1)
    return ad.max_over_axis(stacked, axis=1)


class ConditionPyramid:
    """1x1x1 entry projection then stride-2 convolutions, one map per level."""

    def __init__(self, store: ParameterStore, prefix: str, in_dim: int, width: int, levels: int, rng):
        self.entry_w = store.parameter(
            f"{prefix}.entry.w", _he(rng, width, in_dim, 1, 1, 1, fan_in=in_dim)
        )
        self.entry_b = store.parameter(f"{prefix}.entry.b", np.zeros(width, dtype=np.float32))
        self.downs = []
        for i in range(levels - 1):
            w = store.parameter(
                f"{prefix}.down{i}.w", _he(rng, width, width, 3, 3, 3, fan_in=width * 27)
            )
            b = store.parameter(f"{prefix}.down{i}.b", np.zeros(width, dtype=np.float32))
            self.downs.append((w, b))
        # sparse variants reuse the same weights reshaped to (27, Cin, Cout)
        self.width = width


def _dense_volume_tensor(flat_feats: Tensor, res: int) -> Tensor:
    d = flat_feats.data.shape[1]
    return ad.reshape(flat_feats, (1, res, res, res, d))


def condition_pyramid_dense(feats: Tensor, res: int, pyramid: ConditionPyramid) -> list:
    """Entry features (res^3, D) -> [volume (1, W, r, r, r) per level]."""
    x = _dense_volume_tensor(feats, res)
    levels = [ad.conv3d(x, pyramid.entry_w, pyramid.entry_b)]
    for w, b in pyramid.downs:
        levels.append(ad.conv3d(ad.silu(levels[-1]), w, b, stride=2))
    return levels


class SparseHierarchy:
    """Index sets, kernel maps, and pooling maps for a sparse level stack.

    Level 0 is the input index set; each next level holds the unique parent
    voxels (coordinates halved). ``pool`` maps parent row -> 8 child rows
    (-1 where the child is inactive); ``child_parent`` maps child row -> its
    parent's row.
    """

    _OFFS = np.stack(np.meshgrid([0, 1], [0, 1], [0, 1], indexing="ij"), -1).reshape(8, 3)

    def __init__(self, indices: np.ndarray, resolution: int, levels: int):
        from .autodiff import build_kernel_map

        self.resolution = resolution
        self.indices = [np.asarray(indices, dtype=np.int64)]
        self.kmaps = [build_kernel_map(self.indices[0], resolution)]
        self.pool: list = []
        self.child_parent: list = []
        res = resolution
        for _ in range(levels - 1):
            child = self.indices[-1]
            parent = sort_voxel_indices(child // 2)
            res //= 2
            child_lin = (child[:, 0] * 2 * res + child[:, 1]) * 2 * res + child[:, 2]
            cand = parent[:, None, :] * 2 + self._OFFS[None]
            cand_lin = (cand[..., 0] * 2 * res + cand[..., 1]) * 2 * res + cand[..., 2]
            pos = np.searchsorted(child_lin, cand_lin.reshape(-1))
            pos_c = np.minimum(pos, len(child_lin) - 1)
            found = child_lin[pos_c] == cand_lin.reshape(-1)
            pool = np.where(found, pos_c, -1).reshape(len(parent), 8)
            parent_lin = (parent[:, 0] * res + parent[:, 1]) * res + parent[:, 2]
            cp_lin = ((child // 2)[:, 0] * res + (child // 2)[:, 1]) * res + (child // 2)[:, 2]
            cp = np.searchsorted(parent_lin, cp_lin)
            self.pool.append(pool)
            self.child_parent.append(cp)
            self.indices.append(parent)
            self.kmaps.append(build_kernel_map(parent, res))

    def centers(self, level: int, spec: VolumeSpec) -> np.ndarray:
        res = self.resolution >> level
        h = spec.extent_width / res
        return spec.extent_lo + (self.indices[level].astype(np.float64) + 0.5) * h


def _sparse_maxpool(x: Tensor, pool: np.ndarray) -> Tensor:
    vp = pool.shape[0]
    c = x.data.shape[1]
    gathered = ad.gather_rows(x, pool.reshape(-1), fill=-np.inf)
    return ad.max_over_axis(ad.reshape(gathered, (vp, 8, c)), axis=1)


def condition_pyramid_sparse(
    feats: Tensor, hier: SparseHierarchy, pyramid: ConditionPyramid
) -> list:
    """Entry features (V0, D) -> [features (V_l, W) per level] on pooled sets."""
    entry_w = ad.reshape(pyramid.entry_w, pyramid.entry_w.data.shape[:2])  # (W, D)
    x = ad.linear(feats, ad.moveaxis(entry_w, 0, 1), pyramid.entry_b)
    levels = [x]
    for lvl, (w, b) in enumerate(pyramid.downs):
        pooled = _sparse_maxpool(ad.silu(levels[-1]), hier.pool[lvl])
        w27 = ad.reshape(
            ad.moveaxis(ad.moveaxis(w, 0, 4), 0, 3), (27, w.data.shape[1], w.data.shape[0])
        )
        levels.append(ad.sparse_conv3d(pooled, w27, b, hier.kmaps[lvl + 1]))
    return levels


def _bilinear_rgb(image: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Plain numpy bilinear sample of an (H, W, 3) image at pixel coords."""
    h, w = image.shape[:2]
    r = np.clip(uv[:, 1] - 0.5, 0, h - 1)
    c = np.clip(uv[:, 0] - 0.5, 0, w - 1)
    r0 = np.clip(np.floor(r).astype(np.int64), 0, h - 2)
    c0 = np.clip(np.floor(c).astype(np.int64), 0, w - 2)
    tr = r - r0
    tc = c - c0
    out = (
        image[r0, c0] * ((1 - tr) * (1 - tc))[:, None]
        + image[r0, c0 + 1] * ((1 - tr) * tc)[:, None]
        + image[r0 + 1, c0] * (tr * (1 - tc))[:, None]
        + image[r0 + 1, c0 + 1] * (tr * tc)[:, None]
    )
    return out


def project_colors(views: list, poses: list, centers: np.ndarray) -> np.ndarray:
    """Validity-weighted mean of the projected view colors per voxel.

    Returns (V, 4): mean RGB remapped to [-1, 1] plus the validity fraction;
    voxels seen by no view are zero with validity 0. Not differentiated —
    views are data, and this feeds only the final UNet layer as a constant.
    """
    acc = np.zeros((len(centers), 3))
    cnt = np.zeros(len(centers))
    for view, pose in zip(views, poses):
        uv, _, valid = project_points(centers, pose)
        rgb = _bilinear_rgb(view.rgb, np.where(valid[:, None], uv, 1.0))
        acc[valid] += rgb[valid]
        cnt += valid
    seen = cnt > 0
    mean = np.zeros_like(acc)
    mean[seen] = acc[seen] / cnt[seen, None]
    out = np.zeros((len(centers), 4), dtype=np.float32)
    out[seen, :3] = mean[seen] * 2.0 - 1.0
    out[:, 3] = cnt / max(len(views), 1)
    return out


def global_condition(
    input_view: RenderedView,
    encoder: PatchEncoder,
    proj_w: Tensor,
    proj_b: Tensor,
) -> Tensor:
    """Mean-pooled patch features of the input view through a learned map."""
    grid = encoder.forward(input_view.rgb)  # (P, P, D)
    p = grid.data.shape[0]
    pooled = ad.mean_over_axis(ad.reshape(grid, (p * p, grid.data.shape[2])), axis=0)
    return ad.linear(ad.reshape(pooled, (1, -1)), proj_w, proj_b)  # (1, TE)
