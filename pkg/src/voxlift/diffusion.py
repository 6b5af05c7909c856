"""Two-stage conditional volumetric denoising diffusion.

Stage 1 denoises the coarse binary occupancy shell (encoded +-1) with a
dense 3D UNet; stage 2 denoises normalized SDF + color values on the sparse
index set obtained by subdividing each occupied coarse voxel, with a
submanifold sparse UNet. Both predict the clean signal x0 directly and train
with MSE against it, conditioned on the multi-view feature volumes from
:mod:`conditioning`.

Sampling is a deterministic DDIM-style loop over sub-sampled timesteps: the
predicted x0 is clamped to [-1, 1], the implied noise re-derived, and the
state re-noised to the next level; per (seed, steps, weights) the result is
bit-reproducible in single-threaded mode.

Training augmentations mirror the robustness recipe: random camera-pose
perturbations when building conditions, and random corruption of the
stage-2 index set (dropping voxels / adding face neighbors) so the second
stage tolerates imperfect first-stage shells.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cameras import PoseRig, degrade_views, perturb_poses
from .conditioning import (
    ConditionPyramid,
    PatchEncoder,
    SparseHierarchy,
    ViewMLP,
    _gn_groups,
    _he,
    build_feature_volume,
    condition_pyramid_dense,
    condition_pyramid_sparse,
    encode_patch_grids,
    global_condition,
    project_colors,
)
from .corpus import CorpusManifest, ShapeSample, load_sample
from .params import ParameterStore, apply_checkpoint, load_checkpoint, save_checkpoint
from .seeding import derive_rng, derive_seed
from .volumes import (
    DenseVolume,
    SparseVolume,
    VolumeSpec,
    sort_voxel_indices,
    subdivide_occupancy,
)

__all__ = [
    "NoiseSchedule",
    "StageModel",
    "stage_defaults",
    "build_stage_model",
    "corrupt_occupancy",
    "q_sample",
    "loss_x0",
    "train_stage",
    "sample_stage1",
    "sample_stage2",
    "infer_pipeline",
    "PipelineError",
    "save_stage_model",
    "load_stage_model",
]


class PipelineError(RuntimeError):
    """Raised when a pipeline stage produces an unusable result."""


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # (T,)
    alpha_bar: np.ndarray  # (T + 1,), alpha_bar[0] == 1

    def __post_init__(self):
        b = self.betas
        if not (0.0 < b[0] and b[0] < b[-1] < 1.0):
            raise ValueError("betas must satisfy 0 < beta_1 < beta_T < 1")
        if self.alpha_bar[0] != 1.0 or np.any(np.diff(self.alpha_bar) >= 0):
            raise ValueError("alpha_bar must start at 1 and decrease monotonically")

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(betas, alpha_bar)

    @property
    def T(self) -> int:
        return len(self.betas)


def q_sample(schedule: NoiseSchedule, x0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
    """Forward noising: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    if not 0 <= t <= schedule.T:
        raise ValueError(f"t={t} outside [0, {schedule.T}]")
    if eps.shape != x0.shape:
        raise ValueError("eps shape must match x0")
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def corrupt_occupancy(indices: np.ndarray, p_flip: float, seed, resolution: int) -> np.ndarray:
    """Randomly drop voxels and add face neighbors of survivors.

    Each input voxel is removed with probability p_flip; each face neighbor
    of a surviving voxel is added with probability p_flip. Deterministic per
    seed; p_flip = 0 is the identity.
    """
    if not 0.0 <= p_flip <= 0.2:
        raise ValueError("p_flip must be in [0, 0.2]")
    indices = np.asarray(indices, dtype=np.int64)
    if p_flip == 0.0 or len(indices) == 0:
        return indices.copy()
    rng = np.random.Generator(np.random.PCG64(seed))
    keep = rng.random(len(indices)) >= p_flip
    survivors = indices[keep]
    offs = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])
    cand = (survivors[:, None, :] + offs[None]).reshape(-1, 3)
    add = rng.random(len(cand)) < p_flip
    cand = cand[add]
    cand = cand[np.all((cand >= 0) & (cand < resolution), axis=1)]
    return sort_voxel_indices(np.concatenate([survivors, cand]))


# ---------------------------------------------------------------------------
# UNet building blocks
# ---------------------------------------------------------------------------


class _DenseResBlock:
    def __init__(self, store, prefix, cin, cout, time_width, rng):
        self.gn1 = (
            store.parameter(f"{prefix}.gn1.g", np.ones(cin, dtype=np.float32)),
            store.parameter(f"{prefix}.gn1.b", np.zeros(cin, dtype=np.float32)),
        )
        self.conv1 = (
            store.parameter(f"{prefix}.conv1.w", _he(rng, cout, cin, 3, 3, 3, fan_in=cin * 27)),
            store.parameter(f"{prefix}.conv1.b", np.zeros(cout, dtype=np.float32)),
        )
        self.tproj = (
            store.parameter(f"{prefix}.t.w", _he(rng, time_width, cout, fan_in=time_width)),
            store.parameter(f"{prefix}.t.b", np.zeros(cout, dtype=np.float32)),
        )
        self.gn2 = (
            store.parameter(f"{prefix}.gn2.g", np.ones(cout, dtype=np.float32)),
            store.parameter(f"{prefix}.gn2.b", np.zeros(cout, dtype=np.float32)),
        )
        self.conv2 = (
            store.parameter(f"{prefix}.conv2.w", _he(rng, cout, cout, 3, 3, 3, fan_in=cout * 27)),
            store.parameter(f"{prefix}.conv2.b", np.zeros(cout, dtype=np.float32)),
        )
        self.skip = None
        if cin != cout:
            self.skip = (
                store.parameter(f"{prefix}.skip.w", _he(rng, cout, cin, 1, 1, 1, fan_in=cin)),
                store.parameter(f"{prefix}.skip.b", np.zeros(cout, dtype=np.float32)),
            )
        self.cin, self.cout = cin, cout

    def forward(self, x: Tensor, t_feat: Tensor) -> Tensor:
        h = ad.silu(ad.group_norm(x, *self.gn1, groups=_gn_groups(self.cin)))
        h = ad.conv3d(h, *self.conv1)
        tb = ad.linear(t_feat, *self.tproj)
        h = ad.add_bias(h, ad.reshape(tb, (self.cout,)))
        h = ad.silu(ad.group_norm(h, *self.gn2, groups=_gn_groups(self.cout)))
        h = ad.conv3d(h, *self.conv2)
        s = x if self.skip is None else ad.conv3d(x, *self.skip)
        return ad.add(h, s)


class DenseUNet:
    """Encoder-decoder over (1, C, n, n, n) tensors with per-level condition concat."""

    def __init__(self, store, prefix, in_ch, out_ch, widths, cond_ch, time_width, rng):
        self.widths = list(widths)
        self.cond_ch = cond_ch
        L = len(widths)
        self.stem = (
            store.parameter(f"{prefix}.stem.w", _he(rng, widths[0], in_ch, 3, 3, 3, fan_in=in_ch * 27)),
            store.parameter(f"{prefix}.stem.b", np.zeros(widths[0], dtype=np.float32)),
        )
        self.enc = [
            _DenseResBlock(store, f"{prefix}.enc{i}", widths[i] + cond_ch, widths[i], time_width, rng)
            for i in range(L)
        ]
        self.down = [
            (
                store.parameter(
                    f"{prefix}.down{i}.w",
                    _he(rng, widths[i + 1], widths[i], 3, 3, 3, fan_in=widths[i] * 27),
                ),
                store.parameter(f"{prefix}.down{i}.b", np.zeros(widths[i + 1], dtype=np.float32)),
            )
            for i in range(L - 1)
        ]
        self.up = [
            (
                store.parameter(
                    f"{prefix}.up{i}.w",
                    _he(rng, widths[i + 1], widths[i], 2, 2, 2, fan_in=widths[i + 1]),
                ),
                store.parameter(f"{prefix}.up{i}.b", np.zeros(widths[i], dtype=np.float32)),
            )
            for i in range(L - 1)
        ]
        self.dec = [
            _DenseResBlock(store, f"{prefix}.dec{i}", 2 * widths[i], widths[i], time_width, rng)
            for i in range(L - 1)
        ]
        self.head_gn = (
            store.parameter(f"{prefix}.head.gn.g", np.ones(widths[0], dtype=np.float32)),
            store.parameter(f"{prefix}.head.gn.b", np.zeros(widths[0], dtype=np.float32)),
        )
        self.head = (
            store.parameter(f"{prefix}.head.w", _he(rng, out_ch, widths[0], 3, 3, 3, fan_in=widths[0] * 27)),
            store.parameter(f"{prefix}.head.b", np.zeros(out_ch, dtype=np.float32)),
        )

    def forward(self, x: Tensor, t_feat: Tensor, conds: list | None) -> Tensor:
        L = len(self.widths)
        h = ad.conv3d(x, *self.stem)
        skips = []
        for i in range(L):
            if conds is not None:
                h = ad.concat([h, conds[i]], axis=-1)
            h = self.enc[i].forward(h, t_feat)
            if i < L - 1:
                skips.append(h)
                h = ad.conv3d(h, *self.down[i], stride=2)
        for i in range(L - 2, -1, -1):
            h = ad.conv3d_transpose(h, *self.up[i], stride=2)
            h = ad.concat([h, skips[i]], axis=-1)
            h = self.dec[i].forward(h, t_feat)
        h = ad.silu(ad.group_norm(h, *self.head_gn, groups=_gn_groups(self.widths[0])))
        return ad.conv3d(h, *self.head)


def _gn_rows(x: Tensor, g: Tensor, b: Tensor, groups: int) -> Tensor:
    v, c = x.data.shape
    h = ad.group_norm(ad.reshape(x, (1, v, c)), g, b, groups=groups)
    return ad.reshape(h, (v, c))


class _SparseResBlock:
    def __init__(self, store, prefix, cin, cout, time_width, rng):
        self.gn1 = (
            store.parameter(f"{prefix}.gn1.g", np.ones(cin, dtype=np.float32)),
            store.parameter(f"{prefix}.gn1.b", np.zeros(cin, dtype=np.float32)),
        )
        self.conv1 = (
            store.parameter(f"{prefix}.conv1.w", _he(rng, 27, cin, cout, fan_in=cin * 27)),
            store.parameter(f"{prefix}.conv1.b", np.zeros(cout, dtype=np.float32)),
        )
        self.tproj = (
            store.parameter(f"{prefix}.t.w", _he(rng, time_width, cout, fan_in=time_width)),
            store.parameter(f"{prefix}.t.b", np.zeros(cout, dtype=np.float32)),
        )
        self.gn2 = (
            store.parameter(f"{prefix}.gn2.g", np.ones(cout, dtype=np.float32)),
            store.parameter(f"{prefix}.gn2.b", np.zeros(cout, dtype=np.float32)),
        )
        self.conv2 = (
            store.parameter(f"{prefix}.conv2.w", _he(rng, 27, cout, cout, fan_in=cout * 27)),
            store.parameter(f"{prefix}.conv2.b", np.zeros(cout, dtype=np.float32)),
        )
        self.skip = None
        if cin != cout:
            self.skip = (
                store.parameter(f"{prefix}.skip.w", _he(rng, cin, cout, fan_in=cin)),
                store.parameter(f"{prefix}.skip.b", np.zeros(cout, dtype=np.float32)),
            )
        self.cin, self.cout = cin, cout

    def forward(self, x: Tensor, t_feat: Tensor, kmap) -> Tensor:
        h = ad.silu(_gn_rows(x, *self.gn1, groups=_gn_groups(self.cin)))
        h = ad.sparse_conv3d(h, *self.conv1, kmap)
        tb = ad.linear(t_feat, *self.tproj)
        h = ad.add_bias(h, ad.reshape(tb, (self.cout,)))
        h = ad.silu(_gn_rows(h, *self.gn2, groups=_gn_groups(self.cout)))
        h = ad.sparse_conv3d(h, *self.conv2, kmap)
        s = x if self.skip is None else ad.linear(x, *self.skip)
        return ad.add(h, s)


class SparseUNet:
    """Same topology as DenseUNet over submanifold index-set hierarchies."""

    def __init__(self, store, prefix, in_ch, out_ch, widths, cond_ch, extra_ch, time_width, rng):
        self.widths = list(widths)
        self.cond_ch = cond_ch
        L = len(widths)
        self.stem = (
            store.parameter(f"{prefix}.stem.w", _he(rng, 27, in_ch, widths[0], fan_in=in_ch * 27)),
            store.parameter(f"{prefix}.stem.b", np.zeros(widths[0], dtype=np.float32)),
        )
        self.enc = [
            _SparseResBlock(store, f"{prefix}.enc{i}", widths[i] + cond_ch, widths[i], time_width, rng)
            for i in range(L)
        ]
        self.down = [
            (
                store.parameter(f"{prefix}.down{i}.w", _he(rng, 27, widths[i], widths[i + 1], fan_in=widths[i] * 27)),
                store.parameter(f"{prefix}.down{i}.b", np.zeros(widths[i + 1], dtype=np.float32)),
            )
            for i in range(L - 1)
        ]
        self.up = [
            (
                store.parameter(f"{prefix}.up{i}.w", _he(rng, widths[i + 1], widths[i], fan_in=widths[i + 1])),
                store.parameter(f"{prefix}.up{i}.b", np.zeros(widths[i], dtype=np.float32)),
            )
            for i in range(L - 1)
        ]
        self.dec = [
            _SparseResBlock(store, f"{prefix}.dec{i}", 2 * widths[i], widths[i], time_width, rng)
            for i in range(L - 1)
        ]
        self.head_gn = (
            store.parameter(f"{prefix}.head.gn.g", np.ones(widths[0], dtype=np.float32)),
            store.parameter(f"{prefix}.head.gn.b", np.zeros(widths[0], dtype=np.float32)),
        )
        self.head = (
            store.parameter(
                f"{prefix}.head.w",
                _he(rng, 27, widths[0] + extra_ch, out_ch, fan_in=(widths[0] + extra_ch) * 27),
            ),
            store.parameter(f"{prefix}.head.b", np.zeros(out_ch, dtype=np.float32)),
        )

    def forward(self, x: Tensor, t_feat: Tensor, conds: list | None, hier: SparseHierarchy, extra: Tensor | None) -> Tensor:
        from .conditioning import _sparse_maxpool

        L = len(self.widths)
        h = ad.sparse_conv3d(x, *self.stem, hier.kmaps[0])
        skips = []
        for i in range(L):
            if conds is not None:
                h = ad.concat([h, conds[i]], axis=1)
            h = self.enc[i].forward(h, t_feat, hier.kmaps[i])
            if i < L - 1:
                skips.append(h)
                h = ad.sparse_conv3d(_sparse_maxpool(h, hier.pool[i]), *self.down[i], hier.kmaps[i + 1])
        for i in range(L - 2, -1, -1):
            h = ad.linear(ad.gather_rows(h, hier.child_parent[i]), *self.up[i])
            h = ad.concat([h, skips[i]], axis=1)
            h = self.dec[i].forward(h, t_feat, hier.kmaps[i])
        h = ad.silu(_gn_rows(h, *self.head_gn, groups=_gn_groups(self.widths[0])))
        if extra is not None:
            h = ad.concat([h, extra], axis=1)
        return ad.sparse_conv3d(h, *self.head, hier.kmaps[0])


# ---------------------------------------------------------------------------
# stage model
# ---------------------------------------------------------------------------


def stage_defaults(stage: int) -> dict:
    """Desk-scale defaults; every entry overridable through RunConfig."""
    common = {
        "time_width": 64,
        "cond_dim": 32,
        "pyramid_width": 32,
        "encoder_widths": [8, 16, 32],
        "condition": "local",  # local | global_only | multi_global
        "use_global": True,
        "image_source": "render",  # render | degraded
        "degrade_level": 0.5,
        "perturb_rot_deg": 5.0,
        "perturb_trans_frac": 0.02,
        "T": 1000,
        "beta_start": 1e-4,
        "beta_end": 0.02,
        "lr": 3e-4,
        "grad_accum": 4,
        "steps": 4000,
        "ckpt_every": 2000,
        "sample_steps": 50,
        "log_every": 25,
    }
    if stage == 1:
        common["widths"] = [16, 32, 64, 64]
    else:
        common["widths"] = [16, 32, 64, 64, 64]
        common["corrupt_p"] = 0.05
    return common


@dataclass
class StageModel:
    stage: int
    spec: VolumeSpec
    config: dict
    schedule: NoiseSchedule
    store: ParameterStore
    encoder: PatchEncoder | None
    mlp: ViewMLP | None
    pyramid: ConditionPyramid | None
    unet: object
    time_mlp: tuple
    global_proj: tuple | None
    multi_proj: tuple | None

    @property
    def out_channels(self) -> int:
        return 1 if self.stage == 1 else 4

    def time_features(self, t_norm: float, global_vec: Tensor | None) -> Tensor:
        emb = ad.sinusoidal_embedding(t_norm, self.config["time_width"])
        w1, b1, w2, b2 = self.time_mlp
        h = ad.linear(ad.reshape(emb, (1, -1)), w1, b1)
        h = ad.linear(ad.silu(h), w2, b2)
        if global_vec is not None:
            h = ad.add(h, global_vec)
        return h


def build_stage_model(stage: int, spec: VolumeSpec, config: dict | None = None, seed: int = 0) -> StageModel:
    cfg = stage_defaults(stage)
    cfg.update(config or {})
    widths = cfg["widths"]
    levels = len(widths)
    if spec.resolution >> (levels - 1) < 1:
        raise ValueError("too many UNet levels for this resolution")
    rng = derive_rng(seed, "init", stage)
    store = ParameterStore()
    te = cfg["time_width"]
    d = cfg["cond_dim"]

    mode = cfg["condition"]
    local = mode == "local"
    encoder = PatchEncoder(store, "enc", d, cfg["encoder_widths"], rng)
    mlp = ViewMLP(store, "mlp", d, rng) if local else None
    pyramid = ConditionPyramid(store, "pyr", d, cfg["pyramid_width"], levels, rng) if local else None
    cond_ch = cfg["pyramid_width"] if local else 0

    time_mlp = (
        store.parameter("time.l1.w", _he(rng, te, te, fan_in=te)),
        store.parameter("time.l1.b", np.zeros(te, dtype=np.float32)),
        store.parameter("time.l2.w", _he(rng, te, te, fan_in=te)),
        store.parameter("time.l2.b", np.zeros(te, dtype=np.float32)),
    )
    global_proj = None
    if cfg["use_global"]:
        global_proj = (
            store.parameter("global.w", _he(rng, d, te, fan_in=d)),
            store.parameter("global.b", np.zeros(te, dtype=np.float32)),
        )
    multi_proj = None
    if mode == "multi_global":
        multi_proj = (
            store.parameter("multiglobal.w", _he(rng, 6 * d, te, fan_in=6 * d)),
            store.parameter("multiglobal.b", np.zeros(te, dtype=np.float32)),
        )

    out_ch = 1 if stage == 1 else 4
    if stage == 1:
        unet = DenseUNet(store, "unet", out_ch, out_ch, widths, cond_ch, te, rng)
    else:
        unet = SparseUNet(store, "unet", out_ch, out_ch, widths, cond_ch, extra_ch=4, time_width=te, rng=rng)
    schedule = NoiseSchedule.linear(cfg["T"], cfg["beta_start"], cfg["beta_end"])
    return StageModel(stage, spec, cfg, schedule, store, encoder, mlp, pyramid, unet, time_mlp, global_proj, multi_proj)


# ---------------------------------------------------------------------------
# condition assembly
# ---------------------------------------------------------------------------


@dataclass
class Conditions:
    pyramid: list | None  # per-level condition volumes / feature rows
    global_vec: Tensor | None  # (1, time_width)
    proj_rgb: Tensor | None  # (V, 4) stage-2 projected colors


def _pooled_grid_vec(grid) -> Tensor:
    p = grid.grid.data.shape[0]
    return ad.mean_over_axis(ad.reshape(grid.grid, (p * p, grid.grid.data.shape[2])), axis=0)


def build_conditions(
    model: StageModel,
    views: list,
    poses: list,
    input_view,
    hier: SparseHierarchy | None = None,
) -> Conditions:
    """Assemble whatever conditioning the configuration asks for.

    Stage 1 passes hier=None and conditions the dense grid; stage 2 passes
    the sparse hierarchy of the active index set.
    """
    cfg = model.config
    mode = cfg["condition"]
    global_vec = None
    if model.global_proj is not None:
        global_vec = global_condition(input_view, model.encoder, *model.global_proj)

    pyramid = None
    proj_rgb = None
    if mode == "local":
        grids = encode_patch_grids(views, model.encoder)
        if hier is None:
            centers = model.spec.cell_centers().reshape(-1, 3)
            feats = build_feature_volume(grids, poses, centers, model.mlp, model.spec.extent_width)
            pyramid = condition_pyramid_dense(feats, model.spec.resolution, model.pyramid)
        else:
            centers = hier.centers(0, model.spec)
            feats = build_feature_volume(grids, poses, centers, model.mlp, model.spec.extent_width)
            pyramid = condition_pyramid_sparse(feats, hier, model.pyramid)
            proj_rgb = Tensor(project_colors(views, poses, centers))
    elif mode == "multi_global":
        grids = encode_patch_grids(views, model.encoder)
        pooled = ad.concat([_pooled_grid_vec(g) for g in grids], axis=0)
        vec = ad.linear(ad.reshape(pooled, (1, -1)), *model.multi_proj)
        global_vec = ad.add(global_vec, vec) if global_vec is not None else vec
    elif mode != "global_only":
        raise ValueError(f"unknown condition mode: {mode}")
    if hier is not None and proj_rgb is None:
        proj_rgb = Tensor(np.zeros((len(hier.indices[0]), 4), dtype=np.float32))
    return Conditions(pyramid, global_vec, proj_rgb)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _denoise(model: StageModel, x_t: np.ndarray, t: int, conds: Conditions, hier=None) -> Tensor:
    t_feat = model.time_features(t / model.schedule.T, conds.global_vec)
    x = Tensor(x_t.astype(np.float32))
    if model.stage == 1:
        return model.unet.forward(x, t_feat, conds.pyramid)
    return model.unet.forward(x, t_feat, conds.pyramid, hier, conds.proj_rgb)


def loss_x0(model: StageModel, x0: np.ndarray, conds: Conditions, t: int, eps: np.ndarray, hier=None) -> Tensor:
    """MSE between the UNet's prediction at (x_t, t, c) and the clean x0."""
    x_t = q_sample(model.schedule, x0, t, eps)
    pred = _denoise(model, x_t, t, conds, hier)
    return ad.mse(pred, Tensor(x0.astype(np.float32)))


def _stage1_target(sample: ShapeSample) -> np.ndarray:
    occ = sample.occ_vol.data[..., 0]
    return (occ * 2.0 - 1.0).astype(np.float32)[None, ..., None]  # (1, n, n, n, 1)


def _stage2_target(sample: ShapeSample, indices: np.ndarray) -> np.ndarray:
    """GT SDF+color values at an arbitrary (corrupted) index set."""
    ext = sample.fine_extended if sample.fine_extended is not None else sample.fine_sparse
    n = ext.spec.resolution
    lin = ext.linear_indices()
    want = (indices[:, 0] * n + indices[:, 1]) * n + indices[:, 2]
    pos = np.searchsorted(lin, want)
    pos_c = np.minimum(pos, len(lin) - 1)
    found = lin[pos_c] == want
    vals = np.ones((len(indices), ext.channels), dtype=np.float32)
    vals[:, 1:] = 0.0  # unseen voxels: outside SDF (+1), neutral color
    vals[found] = ext.values[pos_c[found]]
    return vals


def training_step(model: StageModel, sample: ShapeSample, step_seed) -> tuple[Tensor, dict]:
    """One training example -> loss tensor plus bookkeeping."""
    cfg = model.config
    rng = np.random.Generator(np.random.PCG64(step_seed))
    views = sample.views
    if cfg["image_source"] == "degraded":
        views = degrade_views(views, cfg["degrade_level"], derive_seed(int(rng.integers(2**62)), "degrade"))
    rig = sample.poses
    if cfg["perturb_rot_deg"] > 0 or cfg["perturb_trans_frac"] > 0:
        rig = perturb_poses(
            rig, cfg["perturb_rot_deg"], cfg["perturb_trans_frac"], derive_seed(int(rng.integers(2**62)), "perturb")
        )
    poses = rig.target_poses

    t = int(rng.integers(1, model.schedule.T + 1))
    if model.stage == 1:
        x0 = _stage1_target(sample)
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        conds = build_conditions(model, views, poses, sample.input_view)
        loss = loss_x0(model, x0, conds, t, eps)
        info = {"t": t}
    else:
        base = sample.fine_sparse.indices
        p = cfg.get("corrupt_p", 0.0)
        indices = corrupt_occupancy(base, p, derive_seed(int(rng.integers(2**62)), "corrupt"), model.spec.resolution)
        hier = SparseHierarchy(indices, model.spec.resolution, len(cfg["widths"]))
        x0 = _stage2_target(sample, indices)
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        conds = build_conditions(model, views, poses, sample.input_view, hier)
        loss = loss_x0(model, x0, conds, t, eps, hier)
        info = {"t": t, "voxels": len(indices)}
    return loss, info


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


class _SampleCache:
    def __init__(self, manifest: CorpusManifest, capacity: int = 48):
        self.manifest = manifest
        self.capacity = capacity
        self._cache: dict[str, ShapeSample] = {}
        self._order: list[str] = []

    def get(self, shape_id: str) -> ShapeSample:
        if shape_id in self._cache:
            return self._cache[shape_id]
        sample = load_sample(self.manifest.sample_dir(shape_id), validate=False)
        self._cache[shape_id] = sample
        self._order.append(shape_id)
        if len(self._order) > self.capacity:
            evict = self._order.pop(0)
            del self._cache[evict]
        return sample


def train_stage(
    manifest: CorpusManifest,
    stage: int,
    config: dict | None = None,
    out_dir=None,
    root_seed: int = 0,
    log_cb=None,
) -> tuple[StageModel, list]:
    """Train one stage over the corpus train split; returns model + loss curve.

    Deterministic per (root_seed, config) in single-threaded mode. Writes
    train_log.csv and periodic checkpoints when out_dir is given.
    """
    spec = manifest.coarse if stage == 1 else manifest.fine
    model = build_stage_model(stage, spec, config, seed=root_seed)
    cfg = model.config
    train_ids = manifest.ids("train") or manifest.ids()
    cache = _SampleCache(manifest)
    curve = []
    writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_f = open(out_dir / f"train_log_stage{stage}.csv", "w", newline="")
        writer = csv.writer(log_f)
        writer.writerow(["step", "loss", "lr", "wall_time"])
    t_start = time.time()
    accum = max(1, int(cfg["grad_accum"]))
    try:
        for step in range(int(cfg["steps"])):
            rng = derive_rng(root_seed, "train", stage, step)
            shape_id = train_ids[int(rng.integers(len(train_ids)))]
            sample = cache.get(shape_id)
            loss, _ = training_step(model, sample, derive_seed(root_seed, "step", stage, step))
            ad.backward(loss)
            lv = float(loss.data)
            curve.append(lv)
            if (step + 1) % accum == 0:
                model.store.adam_step(cfg["lr"])
            if writer and (step % cfg["log_every"] == 0 or step == cfg["steps"] - 1):
                writer.writerow([step, f"{lv:.6f}", cfg["lr"], f"{time.time() - t_start:.1f}"])
                log_f.flush()
            if log_cb:
                log_cb(step, lv)
            if out_dir is not None and cfg["ckpt_every"] and (step + 1) % cfg["ckpt_every"] == 0:
                save_stage_model(model, out_dir / f"stage{stage}_step{step + 1:06d}.ckpt")
        # flush a trailing partial accumulation window
        if any(p.grad is not None for p in model.store.params.values()):
            model.store.adam_step(cfg["lr"])
    finally:
        if writer:
            log_f.close()
    if out_dir is not None:
        save_stage_model(model, out_dir / f"stage{stage}_final.ckpt")
    return model, curve


def save_stage_model(model: StageModel, path) -> None:
    save_checkpoint(model.store, path)


def load_stage_model(path, stage: int, spec: VolumeSpec, config: dict | None = None) -> StageModel:
    model = build_stage_model(stage, spec, config, seed=0)
    named, step_count = load_checkpoint(path)
    apply_checkpoint(model.store, named, step_count)
    return model


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def _ddim_taus(T: int, steps: int) -> np.ndarray:
    taus = np.unique(np.round(np.linspace(0, T, steps + 1)).astype(np.int64))[::-1]
    if taus[0] != T or taus[-1] != 0:
        raise ValueError("bad timestep subsampling")
    return taus


def _ddim_loop(model: StageModel, x: np.ndarray, conds: Conditions, steps: int, hier=None) -> np.ndarray:
    """Deterministic x0-prediction DDIM with per-step clamping."""
    ab = model.schedule.alpha_bar
    taus = _ddim_taus(model.schedule.T, steps)
    with ad.no_grad():
        for i in range(len(taus) - 1):
            t, s = int(taus[i]), int(taus[i + 1])
            x0_hat = np.clip(_denoise(model, x, t, conds, hier).data, -1.0, 1.0)
            if s == 0:
                x = x0_hat
                break
            eps_imp = (x - np.sqrt(ab[t]) * x0_hat) / np.sqrt(1.0 - ab[t])
            x = np.sqrt(ab[s]) * x0_hat + np.sqrt(1.0 - ab[s]) * eps_imp
    return x


def sample_stage1(model: StageModel, views, poses, input_view, seed, steps: int | None = None) -> DenseVolume:
    """Gaussian init -> denoised coarse occupancy shell (binary volume)."""
    steps = steps or model.config["sample_steps"]
    n = model.spec.resolution
    rng = np.random.Generator(np.random.PCG64(seed))
    x = rng.standard_normal((1, n, n, n, 1)).astype(np.float32)
    with ad.no_grad():
        conds = build_conditions(model, views, poses, input_view)
    x = _ddim_loop(model, x, conds, steps)
    occ = (x[0, ..., 0] > 0.0).astype(np.float32)[..., None]
    return DenseVolume(model.spec, occ)


def sample_stage2(model: StageModel, occ: DenseVolume, views, poses, input_view, seed, steps: int | None = None) -> SparseVolume:
    """Subdivide the coarse shell, denoise SDF+color on it, de-normalize."""
    steps = steps or model.config["sample_steps"]
    indices = subdivide_occupancy(occ)
    if len(indices) == 0:
        raise PipelineError("no occupied voxels: stage-1 output is empty")
    hier = SparseHierarchy(indices, model.spec.resolution, len(model.config["widths"]))
    rng = np.random.Generator(np.random.PCG64(seed))
    x = rng.standard_normal((len(indices), 4)).astype(np.float32)
    with ad.no_grad():
        conds = build_conditions(model, views, poses, input_view, hier)
    x = _ddim_loop(model, x, conds, steps, hier)
    values = x.copy()
    values[:, 0] = np.clip(values[:, 0], -1.0, 1.0) * model.spec.sdf_truncation
    values[:, 1:] = (np.clip(values[:, 1:], -1.0, 1.0) + 1.0) / 2.0
    return SparseVolume(model.spec, indices, values)


def infer_pipeline(
    views, rig: PoseRig, model1: StageModel, model2: StageModel, seed, input_view=None
) -> tuple:
    """Six condition views + rig -> textured mesh (pre-refinement) + report.

    ``input_view`` feeds the global condition; when absent the first
    condition view stands in.
    """
    from .marching import marching_cubes

    if input_view is None:
        input_view = views[0]
    report = {}
    t0 = time.time()
    occ = sample_stage1(model1, views, rig.target_poses, input_view, derive_seed(seed, "s1"))
    report["stage1_seconds"] = round(time.time() - t0, 2)
    report["stage1_occupied"] = int(occ.data.sum())
    if report["stage1_occupied"] == 0:
        raise PipelineError("stage 1 produced an empty occupancy volume")
    t0 = time.time()
    fine = sample_stage2(model2, occ, views, rig.target_poses, input_view, derive_seed(seed, "s2"))
    report["stage2_seconds"] = round(time.time() - t0, 2)
    report["fine_voxels"] = len(fine.indices)
    t0 = time.time()
    mesh = marching_cubes(fine, pad_value=fine.spec.sdf_truncation, color_range=(0.0, 1.0))
    report["marching_seconds"] = round(time.time() - t0, 2)
    report["vertices"] = mesh.num_vertices
    report["triangles"] = mesh.num_triangles
    if mesh.is_empty():
        raise PipelineError("marching cubes produced an empty mesh")
    return mesh, report
