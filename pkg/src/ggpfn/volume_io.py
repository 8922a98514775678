"""Volume persistence, view slicing, resampling and synthetic phantoms.

Two on-disk formats are supported:

``raw_v1``
    little-endian header ``b"GGPFNVOL"``, uint32 version, 3 x uint32 extents
    (l, h, w), 3 x float64 spacing, uint32 flags (bit 0: labels present),
    then l*h*w float32 intensities, then l*h*w uint8 labels if flagged.

``nifti1_subset``
    uncompressed single-file NIfTI-1 (``.nii``) with int16 or float32 data.
    Orientation matrices are ignored (identity orientation assumed) and
    gzip-compressed files are rejected. Labels are not stored.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ParseError, ShapeError, UnsupportedFormatError

RAW_MAGIC = b"GGPFNVOL"
RAW_VERSION = 1
_RAW_HEADER = struct.Struct("<8sI3I3dI")
RAW_HEADER_SIZE = _RAW_HEADER.size

NIFTI_HEADER_SIZE = 348
_NIFTI_DTYPES = {4: np.dtype("int16"), 16: np.dtype("float32")}


class ViewPlane(str, enum.Enum):
    AXIAL = "axial"
    SAGITTAL = "sagittal"
    CORONAL = "coronal"


# axes of the (l, h, w) volume that become (slice index, rows, cols)
_VIEW_AXES = {
    ViewPlane.AXIAL: (0, 1, 2),
    ViewPlane.SAGITTAL: (2, 0, 1),
    ViewPlane.CORONAL: (1, 0, 2),
}


@dataclass
class VolumeGrid:
    intensities: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    labels: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=np.float32)
        if self.intensities.ndim != 3 or min(self.intensities.shape) < 1:
            raise ShapeError(f"volume must be 3D with positive extents, got {self.intensities.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != self.intensities.shape:
                raise ShapeError(f"labels {lab.shape} do not match intensities {self.intensities.shape}")
            if not np.isin(lab, (0, 1)).all():
                raise ValueError("labels must be binary")
            self.labels = lab.astype(np.uint8)

    @property
    def extents(self) -> tuple:
        return self.intensities.shape


def _plane(plane) -> ViewPlane:
    return plane if isinstance(plane, ViewPlane) else ViewPlane(plane)


# ---------------------------------------------------------------- persistence

def save_volume(vg: VolumeGrid, path, format: str = "raw_v1") -> None:
    path = Path(path)
    if format == "raw_v1":
        l, h, w = vg.extents
        flags = 1 if vg.labels is not None else 0
        with open(path, "wb") as fh:
            fh.write(_RAW_HEADER.pack(RAW_MAGIC, RAW_VERSION, l, h, w, *vg.spacing, flags))
            fh.write(vg.intensities.astype("<f4").tobytes())
            if vg.labels is not None:
                fh.write(vg.labels.astype(np.uint8).tobytes())
    elif format == "nifti1_subset":
        _save_nifti(vg, path)
    else:
        raise UnsupportedFormatError(f"unknown volume format {format!r}")


def load_volume(path, format: Optional[str] = None) -> VolumeGrid:
    path = Path(path)
    if format is None:
        format = "nifti1_subset" if path.suffix == ".nii" else "raw_v1"
    blob = path.read_bytes()
    if format == "raw_v1":
        return _load_raw(blob)
    if format == "nifti1_subset":
        return _load_nifti(blob)
    raise UnsupportedFormatError(f"unknown volume format {format!r}")


def _load_raw(blob: bytes) -> VolumeGrid:
    if len(blob) < RAW_HEADER_SIZE:
        raise ParseError("raw_v1: file shorter than header")
    magic, version, l, h, w, s0, s1, s2, flags = _RAW_HEADER.unpack_from(blob)
    if magic != RAW_MAGIC:
        raise ParseError(f"raw_v1: bad magic {magic!r}")
    if version != RAW_VERSION:
        raise ParseError(f"raw_v1: unsupported version {version}")
    n = l * h * w
    expected = RAW_HEADER_SIZE + 4 * n + (n if flags & 1 else 0)
    if len(blob) != expected:
        raise ParseError(f"raw_v1: expected {expected} bytes, found {len(blob)}")
    off = RAW_HEADER_SIZE
    inten = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(l, h, w).astype(np.float32)
    labels = None
    if flags & 1:
        labels = np.frombuffer(blob, dtype=np.uint8, count=n, offset=off + 4 * n).reshape(l, h, w).copy()
    return VolumeGrid(inten, (s0, s1, s2), labels)


def _load_nifti(blob: bytes) -> VolumeGrid:
    if blob[:2] == b"\x1f\x8b":
        raise UnsupportedFormatError("nifti1_subset: compressed files are not supported")
    if len(blob) < NIFTI_HEADER_SIZE:
        raise ParseError("nifti1_subset: file shorter than 348-byte header")
    for endian in "<>":
        if struct.unpack_from(endian + "i", blob, 0)[0] == NIFTI_HEADER_SIZE:
            break
    else:
        raise ParseError("nifti1_subset: sizeof_hdr is not 348")
    if blob[344:347] != b"n+1":
        raise UnsupportedFormatError("nifti1_subset: only single-file n+1 volumes are supported")
    dim = struct.unpack_from(endian + "8h", blob, 40)
    datatype = struct.unpack_from(endian + "h", blob, 70)[0]
    pixdim = struct.unpack_from(endian + "8f", blob, 76)
    vox_offset, slope, inter = struct.unpack_from(endian + "3f", blob, 108)
    if dim[0] < 3 or any(d != 1 for d in dim[4:dim[0] + 1]):
        raise UnsupportedFormatError(f"nifti1_subset: need a single 3D volume, dim={dim}")
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedFormatError(f"nifti1_subset: datatype {datatype} not supported")
    nx, ny, nz = dim[1:4]
    dt = _NIFTI_DTYPES[datatype].newbyteorder(endian)
    n = nx * ny * nz
    off = int(vox_offset)
    if len(blob) < off + n * dt.itemsize:
        raise ParseError("nifti1_subset: truncated voxel data")
    # x varies fastest on disk, so C-order (z, y, x) reads it directly
    data = np.frombuffer(blob, dtype=dt, count=n, offset=off).reshape(nz, ny, nx).astype(np.float32)
    if slope != 0 and not (slope == 1 and inter == 0):
        data = data * np.float32(slope) + np.float32(inter)
    spacing = tuple(abs(p) if p > 0 else 1.0 for p in (pixdim[3], pixdim[2], pixdim[1]))
    return VolumeGrid(data, spacing)


def nifti_header(extents_xyz, datatype: int, spacing_xyz=(1.0, 1.0, 1.0),
                 slope: float = 0.0, inter: float = 0.0, vox_offset: float = 352.0) -> bytes:
    """Build a little-endian NIfTI-1 header (348 bytes) for a 3D volume."""
    bitpix = {4: 16, 16: 32}[datatype]
    hdr = bytearray(NIFTI_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *extents_xyz, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, datatype, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing_xyz, 0, 0, 0, 0)
    struct.pack_into("<3f", hdr, 108, vox_offset, slope, inter)
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def _save_nifti(vg: VolumeGrid, path: Path) -> None:
    l, h, w = vg.extents
    hdr = nifti_header((w, h, l), 16, (vg.spacing[2], vg.spacing[1], vg.spacing[0]))
    with open(path, "wb") as fh:
        fh.write(hdr)
        fh.write(b"\x00" * 4)
        fh.write(vg.intensities.astype("<f4").tobytes())


# ---------------------------------------------------------------- views

def view_stack(volume: np.ndarray, plane) -> np.ndarray:
    """Reorder an (l, h, w) array so axis 0 indexes slices of ``plane``."""
    return np.ascontiguousarray(volume.transpose(_VIEW_AXES[_plane(plane)]))


def unstack_view(stack: np.ndarray, plane) -> np.ndarray:
    """Inverse of :func:`view_stack`."""
    axes = _VIEW_AXES[_plane(plane)]
    return np.ascontiguousarray(np.asarray(stack).transpose(np.argsort(axes)))


def extract_view_slices(vg, plane) -> list:
    """Axial: l slices (h, w); sagittal: w slices (l, h); coronal: h slices (l, w)."""
    vol = vg.intensities if isinstance(vg, VolumeGrid) else np.asarray(vg)
    return list(view_stack(vol, plane))


def stack_view_slices(slices, plane) -> np.ndarray:
    return unstack_view(np.stack(slices), plane)


# ---------------------------------------------------------------- resampling

def _area_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row i averages source interval [i*n_in/n_out, (i+1)*n_in/n_out)."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo = np.arange(n_in)
    hi = lo + 1
    overlap = np.clip(np.minimum(edges[1:, None], hi) - np.maximum(edges[:-1, None], lo), 0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def downsample_slice(slice2d, hg: int, wg: int) -> np.ndarray:
    """Area-average a 2D slice to ``(hg, wg)``; returns shape ``(1, hg, wg)``."""
    s = np.asarray(slice2d, dtype=np.float64)
    if s.ndim == 3:
        s = s[0]
    h, w = s.shape
    if hg > h or wg > w:
        raise ShapeError(f"downsample_slice: target {(hg, wg)} exceeds source {(h, w)}")
    if (hg, wg) == (h, w):
        out = s
    else:
        out = _area_matrix(hg, h) @ s @ _area_matrix(wg, w).T
    return out[None].astype(np.float32)


def downsample_mask(mask2d, hg: int, wg: int) -> np.ndarray:
    """A target cell is 1 if any source pixel it covers is 1."""
    m = np.asarray(mask2d)
    if m.ndim == 3:
        m = m[0]
    return (downsample_slice(m, hg, wg) > 0).astype(np.float32)


def gt_pyramid(mask, n_scales: int) -> list:
    """``[G1, ..., Gn]`` with G1 = mask and each level a 2x2 max of the previous.

    Odd extents are zero-padded before pooling. A leading channel axis of
    size 1 is kept if present.
    """
    m = np.asarray(mask)
    lead = m.ndim == 3
    cur = m[0] if lead else m
    levels = [cur]
    for _ in range(n_scales - 1):
        h, w = cur.shape
        padded = np.zeros((h + h % 2, w + w % 2), dtype=cur.dtype)
        padded[:h, :w] = cur
        cur = padded.reshape(padded.shape[0] // 2, 2, padded.shape[1] // 2, 2).max(axis=(1, 3))
        levels.append(cur)
    return [lv[None] for lv in levels] if lead else levels


# ---------------------------------------------------------------- phantoms

def _ellipsoid_mask(shape, center, radii, rotation) -> np.ndarray:
    zz, yy, xx = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    d = np.stack([zz - center[0], yy - center[1], xx - center[2]], axis=-1) @ rotation
    return ((d / np.asarray(radii)) ** 2).sum(axis=-1) <= 1.0


def _random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


def make_phantom(seed: int, extents=(24, 64, 64), n_blobs: int = 3, n_distractors: int = 0,
                 noise: float = 0.05, contrast: float = 0.45) -> VolumeGrid:
    """Deterministic abdominal-style phantom with a small labelled organ.

    The labelled organ is a union of ``n_blobs`` ellipsoids clustered in the
    upper-central region of each axial slice (fixed anatomical position).
    ``n_distractors`` unlabelled ellipsoids of identical brightness are put
    in the lower half, so only positional context separates them.
    """
    extents = tuple(int(e) for e in extents)
    if min(extents) < 16:
        raise ShapeError(f"phantom extents must be >= 16 per axis, got {extents}")
    rng = np.random.default_rng(seed)
    l, h, w = extents

    zz, yy, xx = np.meshgrid(np.arange(l), np.arange(h), np.arange(w), indexing="ij")
    body = ((yy - 0.5 * h) / (0.46 * h)) ** 2 + ((xx - 0.5 * w) / (0.48 * w)) ** 2 <= 1.0
    background = ndimage.gaussian_filter(rng.standard_normal(extents), sigma=(2.0, 6.0, 6.0))
    background = 0.1 * background / (np.abs(background).max() + 1e-12)
    intensities = np.where(body, 0.3 + background, 0.0)

    # organ anchor, then blobs jittered around it
    anchor = np.array([rng.uniform(0.4, 0.6) * l, rng.uniform(0.3, 0.4) * h, rng.uniform(0.4, 0.6) * w])
    labels = np.zeros(extents, dtype=bool)
    for _ in range(n_blobs):
        center = anchor + rng.uniform(-1, 1, 3) * np.array([0.1 * l, 0.06 * h, 0.12 * w])
        radii = rng.uniform(0.6, 1.0, 3) * np.array([0.16 * l, 0.07 * h, 0.1 * w])
        labels |= _ellipsoid_mask(extents, center, radii, _random_rotation(rng))
    decoys = np.zeros(extents, dtype=bool)
    for _ in range(n_distractors):
        center = np.array([rng.uniform(0.3, 0.7) * l, rng.uniform(0.65, 0.8) * h, rng.uniform(0.25, 0.75) * w])
        radii = rng.uniform(0.6, 1.0, 3) * np.array([0.16 * l, 0.07 * h, 0.1 * w])
        decoys |= _ellipsoid_mask(extents, center, radii, _random_rotation(rng)) & ~labels

    intensities = intensities + contrast * (labels | decoys)
    intensities = intensities + noise * rng.standard_normal(extents)
    return VolumeGrid(intensities.astype(np.float32), (2.5, 0.8, 0.8), labels.astype(np.uint8),
                      meta={"seed": seed})
