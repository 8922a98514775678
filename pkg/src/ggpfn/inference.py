"""Per-slice inference, per-view volumes, pseudo-3D fusion and metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from . import model as M
from .config import GgpfnConfig
from .errors import ShapeError
from .patches import decompose, merge, neighbour_stack, pad_to, padded_extents
from .tensor import no_grad
from .volume_io import VolumeGrid, ViewPlane, downsample_slice, unstack_view, view_stack

VIEW_ORDER = (ViewPlane.AXIAL, ViewPlane.SAGITTAL, ViewPlane.CORONAL)


@dataclass
class SegmentationResult:
    probability: np.ndarray
    mask: np.ndarray
    dsc: Optional[float] = None


def segment_slice(A, neighbors, params: M.ParamStore, config: GgpfnConfig,
                  patch=None, overlap: Optional[int] = None, whole_slice: bool = False) -> np.ndarray:
    """Probability map for one slice.

    ``neighbors`` is the ``[2T+1, h, w]`` stack centred on ``A``. The slice
    is downsampled for the global branch, tiled into overlapping windows,
    each window is encoded and decoded with its gathered global features,
    and the windows are merged keeping only their central shares.
    ``whole_slice`` uses a single window covering the slice.
    """
    A = np.asarray(A, dtype=np.float32)
    h, w = A.shape
    neighbors = np.asarray(neighbors, dtype=np.float32)
    if neighbors.shape != (config.depth, h, w):
        raise ShapeError(f"neighbour stack {neighbors.shape} must be {(config.depth, h, w)}")
    ext = padded_extents((h, w), config)
    stack = pad_to(neighbors, ext)
    if whole_slice:
        patch, overlap = ext, 0
    else:
        patch = patch if patch is not None else (config.patch_h, config.patch_w)
        overlap = config.overlap if overlap is None else overlap
    plan = decompose(ext, patch, overlap)
    ph, pw = plan.patch

    with no_grad():
        gf = None
        if config.global_enabled:
            gf = M.global_forward(downsample_slice(pad_to(A, ext), config.hg, config.wg), params, config)
        maps = []
        for (y0, x0) in plan.windows:
            p3d = stack[None, :, y0:y0 + ph, x0:x0 + pw]
            pk, _ = M.forward_patch(p3d, (y0, x0, ph, pw), ext, gf, params, config)
            maps.append(pk.data[0])
    return merge(maps, plan)[:h, :w]


def segment_volume_view(vg, plane, params: M.ParamStore, config: GgpfnConfig, **kwargs) -> np.ndarray:
    """Segment every slice of ``plane`` and return probabilities in (l, h, w) order."""
    vol = vg.intensities if isinstance(vg, VolumeGrid) else np.asarray(vg, dtype=np.float32)
    stack = view_stack(vol, plane)
    out = np.empty(stack.shape, dtype=np.float32)
    for i in range(stack.shape[0]):
        out[i] = segment_slice(stack[i], neighbour_stack(stack, i, config.T), params, config, **kwargs)
    return unstack_view(out, plane)


def fuse_p3d(Va, Vs, Vc, weights) -> np.ndarray:
    """Voxelwise ``w_a Va + w_s Vs + w_c Vc``."""
    vols = [np.asarray(v, dtype=np.float64) for v in (Va, Vs, Vc)]
    if not vols[0].shape == vols[1].shape == vols[2].shape:
        raise ShapeError(f"fuse_p3d: extents differ {[v.shape for v in vols]}")
    weights = tuple(float(x) for x in weights)
    if len(weights) != 3 or abs(sum(weights) - 1.0) > 1e-6:
        raise ValueError(f"fusion weights must be 3 values summing to 1, got {weights}")
    return weights[0] * vols[0] + weights[1] * vols[1] + weights[2] * vols[2]


def segment_p3d(vg, models: Mapping, views=VIEW_ORDER, weights=None, **kwargs):
    """Per-view segmentation with one ``(params, config)`` per view, then fusion.

    A single requested view is returned as-is. Returns ``(fused, per_view)``.
    """
    views = [ViewPlane(v) for v in views]
    models = {ViewPlane(k): v for k, v in models.items()}
    for v in views:
        if v not in models:
            raise KeyError(f"no model for view {v.value!r}")
    per_view = {v: segment_volume_view(vg, v, *models[v], **kwargs) for v in views}
    if len(views) == 1:
        return per_view[views[0]], per_view
    if len(views) != 3:
        raise ValueError("pseudo-3D fusion needs exactly the three views")
    if weights is None:
        weights = models[ViewPlane.AXIAL][1].view_weights
    fused = fuse_p3d(per_view[ViewPlane.AXIAL], per_view[ViewPlane.SAGITTAL], per_view[ViewPlane.CORONAL], weights)
    return fused, per_view


# ---------------------------------------------------------------- metrics

def threshold_mask(V, t: float = 0.5) -> np.ndarray:
    """Binary mask ``V >= t``."""
    return (np.asarray(V) >= t).astype(np.uint8)


def dsc(pred_mask, gt_mask) -> float:
    """Dice coefficient; two empty masks score 1.0."""
    p = np.asarray(pred_mask).astype(bool)
    g = np.asarray(gt_mask).astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"dsc: extents {p.shape} and {g.shape} differ")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def evaluate(probability, gt) -> SegmentationResult:
    mask = threshold_mask(probability)
    return SegmentationResult(np.asarray(probability), mask, dsc(mask, gt) if gt is not None else None)


def pr_curve(V, gt, n_thresholds: int = 101) -> list:
    """``(threshold, precision, recall)`` at ``n_thresholds`` evenly spaced thresholds in [0, 1].

    A voxel is predicted positive when ``V >= threshold``. Precision with no
    predicted positives is 1.
    """
    v = np.asarray(V, dtype=np.float64).ravel()
    g = np.asarray(gt).astype(bool).ravel()
    if v.shape != g.shape:
        raise ShapeError("pr_curve: extents differ")
    n_pos = int(g.sum())
    if n_pos == 0:
        raise ValueError("pr_curve: recall is undefined for an empty ground truth")
    order = np.sort(v)
    pos_sorted = np.sort(v[g])
    rows = []
    for t in np.linspace(0.0, 1.0, n_thresholds):
        pred = v.size - np.searchsorted(order, t, side="left")
        tp = n_pos - np.searchsorted(pos_sorted, t, side="left")
        precision = tp / pred if pred else 1.0
        rows.append((float(t), float(precision), tp / n_pos))
    return rows


def f_score(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def write_pr_table(rows, path, delimiter: str = "\t") -> None:
    with open(path, "w") as fh:
        for t, p, r in rows:
            fh.write(delimiter.join(f"{x:.6f}" for x in (t, p, r, f_score(p, r))) + "\n")
