"""Overlapping slice tiling and training-patch sampling."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import DecompositionError, ShapeError
from .volume_io import VolumeGrid, downsample_mask, downsample_slice, view_stack


# ---------------------------------------------------------------- tiling

def _axis_positions(n: int, p: int, overlap: int) -> list:
    stride = p - overlap
    pos = list(range(0, n - p + 1, stride))
    if pos[-1] + p < n:
        pos.append(n - p)
    return pos


def _axis_keep(pos: list, p: int, n: int) -> list:
    """Split each overlap at its midpoint; returns (lo, hi) kept per window."""
    keeps = []
    for i, s in enumerate(pos):
        lo = 0 if i == 0 else (s + pos[i - 1] + p) // 2
        hi = n if i == len(pos) - 1 else (pos[i + 1] + s + p) // 2
        keeps.append((lo, hi))
    return keeps


@dataclass
class PatchPlan:
    slice_extents: tuple
    patch: tuple
    overlap: int
    windows: list            # (y0, x0) per window
    keeps: list              # (y_lo, y_hi, x_lo, x_hi) in slice coordinates

    def __len__(self) -> int:
        return len(self.windows)

    def extract(self, slice2d) -> list:
        ph, pw = self.patch
        return [slice2d[..., y0:y0 + ph, x0:x0 + pw] for y0, x0 in self.windows]


def decompose(slice_extents, patch, overlap: int) -> PatchPlan:
    """Windows at multiples of ``patch - overlap``, the last one clamped to the border."""
    h, w = slice_extents
    ph, pw = (patch, patch) if np.isscalar(patch) else patch
    if ph > h or pw > w:
        raise DecompositionError(f"patch {(ph, pw)} larger than slice {(h, w)}")
    if not 0 <= overlap < min(ph, pw):
        raise DecompositionError(f"overlap {overlap} must be in [0, {min(ph, pw)})")
    ys, xs = _axis_positions(h, ph, overlap), _axis_positions(w, pw, overlap)
    ky, kx = _axis_keep(ys, ph, h), _axis_keep(xs, pw, w)
    windows, keeps = [], []
    for y0, (ylo, yhi) in zip(ys, ky):
        for x0, (xlo, xhi) in zip(xs, kx):
            windows.append((y0, x0))
            keeps.append((ylo, yhi, xlo, xhi))
    return PatchPlan((h, w), (ph, pw), overlap, windows, keeps)


def merge(patch_maps, plan: PatchPlan) -> np.ndarray:
    """Assemble a slice map, each pixel taken from the window that keeps it."""
    if len(patch_maps) != len(plan):
        raise ShapeError(f"merge: {len(patch_maps)} maps for {len(plan)} windows")
    first = np.asarray(patch_maps[0])
    lead = first.shape[:-2]
    out = np.empty(lead + tuple(plan.slice_extents), dtype=first.dtype)
    for pm, (y0, x0), (ylo, yhi, xlo, xhi) in zip(patch_maps, plan.windows, plan.keeps):
        pm = np.asarray(pm)
        if pm.shape[-2:] != tuple(plan.patch):
            raise ShapeError(f"merge: patch map {pm.shape} does not match plan patch {plan.patch}")
        out[..., ylo:yhi, xlo:xhi] = pm[..., ylo - y0:yhi - y0, xlo - x0:xhi - x0]
    return out


# ---------------------------------------------------------------- neighbours & padding

def padded_extents(extents, config) -> tuple:
    """Slice extents grown (zero padding at bottom/right) to fit a patch and the global input.

    The result is rounded up to a multiple of 8 so a whole-slice window is a valid patch.
    """
    h, w = extents
    h, w = max(h, config.patch_h, config.hg), max(w, config.patch_w, config.wg)
    return -(-h // 8) * 8, -(-w // 8) * 8


def pad_to(arr: np.ndarray, extents) -> np.ndarray:
    h, w = arr.shape[-2:]
    H, W = extents
    if (h, w) == (H, W):
        return arr
    pad = [(0, 0)] * (arr.ndim - 2) + [(0, H - h), (0, W - w)]
    return np.pad(arr, pad)


def neighbour_stack(stack: np.ndarray, index: int, T: int) -> np.ndarray:
    """Slices ``index - T .. index + T`` with the boundary slice replicated outside."""
    idx = np.clip(np.arange(index - T, index + T + 1), 0, stack.shape[0] - 1)
    return stack[idx]


# ---------------------------------------------------------------- training samples

@dataclass
class TrainingSample:
    """Two patches from one slice with their targets and the slice-level global input."""

    slice_index: int
    slice_extents: tuple
    windows: list                 # (y0, x0, ph, pw)
    patches: list                 # [2T+1, ph, pw] each
    targets: list                 # [1, ph, pw] each
    slice_g: np.ndarray           # [1, hg, wg]
    mask_g: np.ndarray            # [hg, wg]
    centers: list = field(default_factory=list)


def label_bbox(labels: np.ndarray):
    """Inclusive-exclusive bounding box ``((z0, z1), (y0, y1), (x0, x1))`` or None."""
    nz = np.nonzero(labels)
    if len(nz[0]) == 0:
        return None
    return tuple((int(a.min()), int(a.max()) + 1) for a in nz)


def _window_at(center, extents, patch):
    (cy, cx), (h, w), (ph, pw) = center, extents, patch
    y0 = int(np.clip(cy - ph // 2, 0, h - ph))
    x0 = int(np.clip(cx - pw // 2, 0, w - pw))
    return y0, x0, ph, pw


def sample_training_patches(vg: VolumeGrid, plane, rng: np.random.Generator, config,
                            slice_index: Optional[int] = None) -> TrainingSample:
    """Foreground-balanced pair of patches from one slice of ``plane``.

    The first patch center is uniform over the slice; the second is uniform
    over the in-plane label bounding box. Without any label both are
    uniform. The slice is uniform over the view unless given.
    """
    if vg.labels is None:
        raise ShapeError("training sampling needs a labelled volume")
    img = view_stack(vg.intensities, plane)
    lab = view_stack(vg.labels, plane)
    n, h, w = img.shape
    if slice_index is None:
        slice_index = int(rng.integers(n))
    ext = padded_extents((h, w), config)
    patch = (config.patch_h, config.patch_w)

    box = label_bbox(lab)
    centers = [(int(rng.integers(h)), int(rng.integers(w)))]
    if box is None:
        centers.append((int(rng.integers(h)), int(rng.integers(w))))
    else:
        (_, _), (y0, y1), (x0, x1) = box
        centers.append((int(rng.integers(y0, y1)), int(rng.integers(x0, x1))))

    stack = pad_to(neighbour_stack(img, slice_index, config.T), ext)
    target_slice = pad_to(lab[slice_index].astype(np.float32), ext)
    windows, patches, targets = [], [], []
    for c in centers:
        y0, x0, ph, pw = _window_at(c, ext, patch)
        windows.append((y0, x0, ph, pw))
        patches.append(stack[:, y0:y0 + ph, x0:x0 + pw])
        targets.append(target_slice[None, y0:y0 + ph, x0:x0 + pw])
    slice_g = downsample_slice(stack[config.T], config.hg, config.wg)
    mask_g = downsample_mask(target_slice, config.hg, config.wg)[0]
    return TrainingSample(slice_index, ext, windows, patches, targets, slice_g, mask_g, centers)


# ---------------------------------------------------------------- augmentation

@dataclass
class AugmentParams:
    max_angle_deg: float = 15.0
    grid: int = 8
    sigma: float = 8.0
    alpha_def: float = 10.0


def random_displacement(shape, rng, params: AugmentParams) -> np.ndarray:
    """Smooth field ``[2, h, w]`` from a control grid, scaled so its max magnitude is ``alpha_def``."""
    h, w = shape
    ctrl = rng.uniform(-1, 1, size=(2, params.grid, params.grid))
    field_ = np.stack([ndimage.zoom(c, (h / params.grid, w / params.grid), order=1) for c in ctrl])
    field_ = field_[:, :h, :w]
    field_ = np.stack([ndimage.gaussian_filter(f, params.sigma) for f in field_])
    mag = np.sqrt((field_ ** 2).sum(axis=0)).max()
    if mag > 0:
        field_ *= params.alpha_def / mag
    return field_


def warp_coordinates(shape, angle_deg: float, displacement: Optional[np.ndarray]) -> np.ndarray:
    """Source coordinates for each output pixel: rotate about the center, then displace."""
    h, w = shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    cy, cx = (h - 1) / 2, (w - 1) / 2
    if angle_deg:
        t = np.deg2rad(angle_deg)
        c, s = np.cos(t), np.sin(t)
        dy, dx = yy - cy, xx - cx
        yy, xx = cy + c * dy - s * dx, cx + s * dy + c * dx
    if displacement is not None:
        yy = yy + displacement[0]
        xx = xx + displacement[1]
    return np.stack([yy, xx])


def apply_warp(patch3d: np.ndarray, target: np.ndarray, coords: np.ndarray):
    """Warp every slice of ``patch3d`` (bilinear) and ``target`` (nearest) with the same map.

    Both replicate their edge pixels where the map points outside the patch.
    """
    out = np.stack([ndimage.map_coordinates(s, coords, order=1, mode="nearest") for s in patch3d])
    tgt = target[0] if target.ndim == 3 else target
    tgt = ndimage.map_coordinates(tgt, coords, order=0, mode="nearest")
    tgt = tgt[None] if target.ndim == 3 else tgt
    return out.astype(patch3d.dtype), tgt.astype(target.dtype)


def augment(patch3d: np.ndarray, target: np.ndarray, rng: np.random.Generator,
            params: Optional[AugmentParams] = None):
    """Random in-plane rotation and elastic deformation shared by all slices and the mask."""
    params = params or AugmentParams()
    shape = patch3d.shape[-2:]
    angle = rng.uniform(-params.max_angle_deg, params.max_angle_deg)
    disp = random_displacement(shape, rng, params) if params.alpha_def > 0 else None
    return apply_warp(patch3d, target, warp_coordinates(shape, angle, disp))
