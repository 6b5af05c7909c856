"""Central finite-difference validation of every differentiable operator.

Each case builds a tiny float64 problem, computes analytic gradients via the
recorded graph, then compares against (f(x+e) - f(x-e)) / 2e elementwise.
The reported number per operator is max |analytic - numeric| normalized by
the largest numeric gradient magnitude.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = ["run_all", "check_case"]

_EPS = 1e-3


def _loss_through(out: Tensor, rng) -> tuple[Tensor, np.ndarray]:
    target = rng.normal(size=out.data.shape)
    return ad.mse(out, Tensor(target)), target


def check_case(build, inputs: dict[str, np.ndarray], eps: float = _EPS) -> float:
    """``build(tensors) -> scalar loss Tensor``; returns max relative error."""
    tensors = {k: Tensor(v.astype(np.float64), requires_grad=True) for k, v in inputs.items()}
    loss = build(tensors)
    ad.backward(loss)
    worst = 0.0
    for name, t in tensors.items():
        analytic = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fplus = float(build({k: Tensor(v.data) for k, v in tensors.items()}).data)
            flat[i] = orig - eps
            fminus = float(build({k: Tensor(v.data) for k, v in tensors.items()}).data)
            flat[i] = orig
            nflat[i] = (fplus - fminus) / (2 * eps)
        scale = max(np.abs(numeric).max(), 1e-8)
        worst = max(worst, float(np.abs(analytic - numeric).max() / scale))
    return worst


def _spread_values(rng, shape, axis):
    """Random values with comfortable gaps along ``axis`` (no argmax ties)."""
    n = shape[axis]
    rest = shape[:axis] + shape[axis + 1 :]
    base = np.broadcast_to(np.arange(n, dtype=np.float64), rest + (n,)).copy()
    base = rng.permuted(np.moveaxis(base, -1, axis), axis=axis)
    return base * 0.1 + rng.uniform(0, 0.03, size=shape)


def run_all(seed: int = 0) -> dict[str, float]:
    """Finite-difference check every operator; returns {op: max rel error}."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    def with_loss(op):
        def build(ts):
            out = op(ts)
            loss, _ = _loss_through(out, np.random.default_rng(123))
            return loss

        return build

    x5 = rng.normal(size=(1, 4, 5, 3, 2))
    w3 = rng.normal(size=(3, 2, 3, 3, 3)) * 0.5
    b3 = rng.normal(size=3)
    results["conv3d_s1"] = check_case(
        with_loss(lambda t: ad.conv3d(t["x"], t["w"], t["b"], stride=1)),
        {"x": x5, "w": w3, "b": b3},
    )
    x6 = rng.normal(size=(1, 4, 6, 4, 2))
    results["conv3d_s2"] = check_case(
        with_loss(lambda t: ad.conv3d(t["x"], t["w"], t["b"], stride=2)),
        {"x": x6, "w": w3, "b": b3},
    )
    wt = rng.normal(size=(2, 3, 2, 2, 2)) * 0.5
    results["conv3d_transpose"] = check_case(
        with_loss(lambda t: ad.conv3d_transpose(t["x"], t["w"], t["b"], stride=2)),
        {"x": rng.normal(size=(1, 2, 3, 2, 2)), "w": wt, "b": b3},
    )

    idx = np.array(
        [[0, 0, 0], [0, 0, 1], [0, 1, 0], [1, 1, 1], [1, 1, 2], [2, 2, 2], [3, 3, 3]],
        dtype=np.int64,
    )
    kmap = ad.build_kernel_map(idx, 4)
    results["sparse_conv3d"] = check_case(
        with_loss(lambda t: ad.sparse_conv3d(t["f"], t["w"], t["b"], kmap)),
        {"f": rng.normal(size=(7, 2)), "w": rng.normal(size=(27, 2, 3)) * 0.3, "b": b3},
    )

    results["linear"] = check_case(
        with_loss(lambda t: ad.linear(t["x"], t["w"], t["b"])),
        {"x": rng.normal(size=(5, 4)), "w": rng.normal(size=(4, 3)), "b": b3},
    )
    results["silu"] = check_case(
        with_loss(lambda t: ad.silu(t["x"])), {"x": rng.normal(size=(4, 5))}
    )
    results["group_norm"] = check_case(
        with_loss(lambda t: ad.group_norm(t["x"], t["g"], t["b"], groups=2)),
        {
            "x": rng.normal(size=(2, 3, 2, 2, 4)),
            "g": rng.normal(size=4),
            "b": rng.normal(size=4),
        },
    )
    results["max_over_axis"] = check_case(
        with_loss(lambda t: ad.max_over_axis(t["x"], axis=1)),
        {"x": _spread_values(rng, (5, 6, 3), axis=1)},
    )
    results["mean_over_axis"] = check_case(
        with_loss(lambda t: ad.mean_over_axis(t["x"], axis=0)),
        {"x": rng.normal(size=(6, 4))},
    )

    coords2 = rng.uniform(-0.5, 4.5, size=(9, 2))
    results["grid_sample_2d"] = check_case(
        with_loss(lambda t: ad.grid_sample_2d(t["g"], coords2)),
        {"g": rng.normal(size=(4, 5, 3))},
    )
    coords3 = rng.uniform(-0.5, 3.5, size=(9, 3))
    results["grid_sample_3d"] = check_case(
        with_loss(lambda t: ad.grid_sample_3d(t["g"], coords3)),
        {"g": rng.normal(size=(4, 4, 4, 2))},
    )
    dirs = rng.normal(size=(6, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    results["sh_blend"] = check_case(
        with_loss(lambda t: ad.sh_blend(t["s"], dirs)), {"s": rng.normal(size=(6, 12))}
    )

    results["concat"] = check_case(
        with_loss(lambda t: ad.concat([t["a"], t["b"]], axis=1)),
        {"a": rng.normal(size=(3, 2, 2)), "b": rng.normal(size=(3, 3, 2))},
    )
    results["add"] = check_case(
        with_loss(lambda t: ad.add(t["a"], t["b"])),
        {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4))},
    )
    results["mul"] = check_case(
        with_loss(lambda t: ad.mul(t["a"], t["b"])),
        {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4))},
    )
    results["smul"] = check_case(
        with_loss(lambda t: ad.smul(t["x"], 1.7)), {"x": rng.normal(size=(3, 4))}
    )
    results["add_bias"] = check_case(
        with_loss(lambda t: ad.add_bias(t["x"], t["b"], axis=1)),
        {"x": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=3)},
    )
    results["add_bias_last"] = check_case(
        with_loss(lambda t: ad.add_bias(t["x"], t["b"])),
        {"x": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=4)},
    )
    results["reshape"] = check_case(
        with_loss(lambda t: ad.reshape(t["x"], (6, 2))), {"x": rng.normal(size=(3, 4))}
    )
    results["moveaxis"] = check_case(
        with_loss(lambda t: ad.moveaxis(t["x"], 0, 2)), {"x": rng.normal(size=(3, 4, 2))}
    )
    gidx = np.array([0, 2, 2, -1, 4, 1], dtype=np.int64)
    results["gather_rows"] = check_case(
        with_loss(lambda t: ad.gather_rows(t["x"], gidx, fill=0.25)),
        {"x": rng.normal(size=(5, 3))},
    )
    tgt = rng.normal(size=(4, 3))
    results["mse"] = check_case(
        lambda t: ad.mse(t["a"], t["b"]), {"a": rng.normal(size=(4, 3)), "b": tgt}
    )
    return results
