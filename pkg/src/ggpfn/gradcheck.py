"""Central finite-difference checks for every differentiable op and the full loss."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from . import model as M
from . import ops
from .config import GgpfnConfig
from .tensor import Tensor, backward, make_result

TOLERANCE = 1e-4


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                      indices: Optional[np.ndarray] = None) -> float:
    """Max over elements of ``|analytic - central| / max(1, |analytic|)``.

    ``x`` must be a leaf; its data is perturbed in place and restored.
    ``indices`` restricts the check to a subset of flat element indices.
    """
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.grad_link:
        backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    ana = analytic.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        num = (fp - fm) / (2 * h)
        worst = max(worst, abs(ana[i] - num) / max(1.0, abs(ana[i])))
    x.grad = None
    return worst


def _weighted_sum(t: Tensor, w: np.ndarray) -> Tensor:
    return ops.total(ops.mul(t, Tensor(w)))


def _check_inputs(rng, fn, shapes, positive=()):
    """Check ``fn`` w.r.t. each input in turn, contracting its output with random weights."""
    arrays = [rng.standard_normal(s) for s in shapes]
    for i in positive:
        arrays[i] = np.abs(arrays[i]) + 0.1
    out_shape = fn(*[Tensor(a) for a in arrays]).shape
    w = rng.standard_normal(out_shape)
    worst = 0.0
    for i in range(len(arrays)):
        leaves = [Tensor(a.copy()) for a in arrays]

        def f(x, i=i, leaves=leaves):
            args = list(leaves)
            args[i] = x
            return _weighted_sum(fn(*args), w)

        worst = max(worst, finite_diff_check(f, leaves[i]))
    return worst


def _op_cases() -> dict:
    def pool_input(rng, shape):
        # distinct values keep argmax stable under perturbation
        return rng.permutation(np.prod(shape)).reshape(shape) * 0.1 + rng.uniform(0, 0.01, shape)

    def max_pool_case(rng):
        worst = 0.0
        for shape, window in (((2, 4, 6), (2, 2)), ((2, 3, 4, 4), (1, 2, 2))):
            x = Tensor(pool_input(rng, shape))
            w = rng.standard_normal((shape[0],) + tuple(n // k for n, k in zip(shape[1:], window)))
            worst = max(worst, finite_diff_check(lambda t: _weighted_sum(ops.max_pool(t, window), w), x))
        return worst

    def relu_case(rng):
        x = Tensor(rng.standard_normal((3, 5, 5)))
        x.data[np.abs(x.data) < 1e-3] = 0.5
        w = rng.standard_normal(x.shape)
        return finite_diff_check(lambda t: _weighted_sum(ops.relu(t), w), x)

    def bce_case(rng):
        p = Tensor(rng.uniform(0.05, 0.95, (1, 6, 6)))
        g = (rng.random((1, 6, 6)) > 0.5).astype(float)
        return finite_diff_check(lambda t: ops.bce_loss(t, g), p)

    def bilinear_case(rng):
        coords = rng.uniform(0, 1, (7, 2))
        return _check_inputs(rng, lambda m: ops.bilinear_sample(m, coords), [(3, 4, 5)])

    return {
        "conv2d": lambda rng: _check_inputs(rng, ops.conv2d, [(2, 5, 6), (3, 2, 3, 3), (3,)]),
        "conv2d_stride2": lambda rng: _check_inputs(
            rng, lambda x, k, b: ops.conv2d(x, k, b, stride=2), [(2, 6, 6), (3, 2, 3, 3), (3,)]),
        "conv3d_dvalid": lambda rng: _check_inputs(rng, ops.conv3d_dvalid, [(2, 5, 4, 4), (3, 2, 3, 3, 3), (3,)]),
        "pointwise_conv": lambda rng: _check_inputs(rng, ops.pointwise_conv, [(3, 4, 4), (2, 3), (2,)]),
        "transposed_conv2d": lambda rng: _check_inputs(rng, ops.transposed_conv2d, [(3, 3, 4), (3, 2, 2, 2), (2,)]),
        "max_pool": max_pool_case,
        "relu": relu_case,
        "sigmoid": lambda rng: _check_inputs(rng, ops.sigmoid, [(3, 4, 4)]),
        "concat_channels": lambda rng: _check_inputs(rng, ops.concat_channels, [(2, 3, 3), (3, 3, 3)]),
        "center_crop": lambda rng: _check_inputs(rng, lambda x: ops.center_crop(x, (1, 3, 3)), [(2, 5, 5, 5)]),
        "reshape": lambda rng: _check_inputs(rng, lambda x: ops.reshape(x, (6, 4)), [(2, 3, 4)]),
        "bilinear_sample": bilinear_case,
        "bce_loss": bce_case,
        "add": lambda rng: _check_inputs(rng, ops.add, [(3, 4), (3, 4)]),
        "mul": lambda rng: _check_inputs(rng, ops.mul, [(3, 4), (3, 4)]),
        "sum": lambda rng: _check_inputs(rng, ops.total, [(3, 4)]),
    }


OP_CASES = _op_cases()


def _broken_sigmoid(x: Tensor) -> Tensor:
    # deliberately wrong derivative (missing the 1 - s factor)
    out = ops.sigmoid(Tensor(x.data)).data
    return make_result(out, (x,), lambda g: (g * out,), "broken_sigmoid")


# injectable faults for exercising the failure path
FAULTY_CASES = {
    "broken_sigmoid": lambda rng: _check_inputs(rng, _broken_sigmoid, [(3, 4, 4)]),
}


def gradcheck_config() -> GgpfnConfig:
    return GgpfnConfig.tiny()


def synthetic_sample(config: GgpfnConfig, rng: np.random.Generator, slice_extents=(64, 64)):
    """A training sample built directly from random data (two windows on one slice)."""
    from .patches import TrainingSample, decompose
    from .volume_io import downsample_mask, downsample_slice

    h, w = slice_extents
    vol = rng.uniform(0, 1, (config.depth, h, w))
    mask = np.zeros((h, w), dtype=np.float32)
    mask[h // 4:h // 2 + 3, w // 3:w // 2 + 5] = 1
    plan = decompose((h, w), (config.patch_h, config.patch_w), config.overlap)
    picks = [plan.windows[0], plan.windows[-1]]
    windows = [(y0, x0, config.patch_h, config.patch_w) for y0, x0 in picks]
    patches = [vol[:, y0:y0 + ph, x0:x0 + pw] for y0, x0, ph, pw in windows]
    targets = [mask[None, y0:y0 + ph, x0:x0 + pw] for y0, x0, ph, pw in windows]
    return TrainingSample(config.T, (h, w), windows, patches, targets,
                          downsample_slice(vol[config.T], config.hg, config.wg),
                          downsample_mask(mask, config.hg, config.wg)[0])


def model_loss_check(config: Optional[GgpfnConfig] = None, seed: int = 0, per_tensor: int = 12,
                     alpha: float = 0.5, beta: float = 0.5) -> dict:
    """Finite-difference check of the full training loss w.r.t. every parameter tensor (float64).

    Tensors with at most ``per_tensor`` elements are checked exhaustively,
    larger ones on a random subset of that size. Returns name -> max error.
    """
    from .training import sample_loss

    config = config or gradcheck_config()
    rng = np.random.default_rng(seed)
    params = M.build_model(config, seed, dtype=np.float64)
    for k, t in params.items():
        if k.endswith(".b"):
            t.data[:] = rng.uniform(-0.1, 0.1, t.shape)
    sample = synthetic_sample(config, rng)
    errors = {}
    for name, t in params.items():
        def f(x, name=name):
            params.tensors[name] = x
            return sample_loss(params, config, sample, alpha, beta)

        idx = None if t.data.size <= per_tensor else rng.choice(t.data.size, per_tensor, replace=False)
        params.zero_grad()
        errors[name] = finite_diff_check(f, t, indices=idx)
        params.tensors[name] = t
    return errors


def run_suite(seed: int = 0, repeats: int = 10, include_model: bool = True, cases: Optional[dict] = None,
              inject: Sequence[str] = ()) -> dict:
    """Per-op max relative error over ``repeats`` random instances (plus the full loss).

    ``inject`` adds named entries of ``FAULTY_CASES``.
    """
    rng = np.random.default_rng(seed)
    cases = dict(OP_CASES if cases is None else cases)
    for name in inject:
        cases[name] = FAULTY_CASES[name]
    report = {name: max(fn(rng) for _ in range(repeats)) for name, fn in cases.items()}
    if include_model:
        report["total_loss"] = max(model_loss_check(seed=seed).values())
    return report


def passed(report: dict, tol: float = TOLERANCE) -> bool:
    return all(np.isfinite(v) and v <= tol for v in report.values())
