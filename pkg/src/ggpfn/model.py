"""Globally guided progressive fusion network: parameters, forward passes, loss."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ops
from .config import GgpfnConfig
from .errors import DepthError, ShapeError
from .tensor import Tensor
from .volume_io import gt_pyramid

N_SCALES = 4


# ---------------------------------------------------------------- geometry

def required_depth(config) -> int:
    """Number of input slices the encoder consumes: 2T + 1."""
    T = config.T if isinstance(config, GgpfnConfig) else int(config)
    return 2 * T + 1


def rf_recurrence(layers) -> int:
    """Receptive field of a 1D layer sequence ``[("conv"|"pool", k), ...]`` in forward order.

    ``rf += (k - 1) * jump`` per layer; pooling then multiplies the jump by ``k``.
    """
    rf, jump = 1, 1
    for kind, k in layers:
        rf += (k - 1) * jump
        if kind == "pool":
            jump *= k
    return rf


def network_layers(config, include_decoder: bool = False) -> list:
    """H/W layer sequence of the encoder (optionally followed by the decoder's 3x3 convs)."""
    group_convs = config.group_convs if isinstance(config, GgpfnConfig) else tuple(config)
    layers = []
    for g, n in enumerate(group_convs):
        if g > 0:
            layers.append(("pool", 2))
        layers += [("conv", 3)] * n
    if include_decoder:
        # upsampling is a 2x2/stride-2 transposed conv: each output sees one input pixel
        for _ in range(3):
            layers += [("up", 2), ("conv", 3), ("conv", 3)]
    return layers


def receptive_field(config, include_decoder: bool = False) -> tuple:
    """Encoder receptive field in H/W via the jump/extent recurrence.

    With ``include_decoder`` the two 3x3 convs of each decoder stage are
    added at their own scale.
    """
    rf, jump = 1, 1
    for kind, k in network_layers(config, include_decoder):
        if kind == "up":
            jump //= k
            continue
        rf += (k - 1) * jump
        if kind == "pool":
            jump *= k
    return rf, rf


def tiling_margin(config: GgpfnConfig) -> int:
    """Distance from an interior window edge beyond which tiled inference is exact.

    Support intervals are propagated backwards through the full network
    (encoder, skips and decoder). Window edges are assumed to lie on
    multiples of the total downsampling factor, which ``decompose`` always
    produces for padded slices. A pixel is affected by a window's zero
    padding when its support crosses that window edge; the margin is one
    more than the largest distance at which that still happens. Unlike
    ``receptive_field`` this accounts for the decoder convs and for the
    asymmetry that pooling introduces.
    """
    convs = list(config.group_convs)
    if config.fusion_mode == "one_off":
        convs[0] += 1  # the slice-fusing conv

    def enc(j, lo, hi):
        # support in input coords of encoder scale j (1-based), interval in its own coords
        lo, hi = lo - convs[j - 1], hi + convs[j - 1]
        if j == 1:
            return lo, hi
        return enc(j - 1, 2 * lo, 2 * hi + 1)

    def dec(j, lo, hi):
        lo, hi = lo - 2, hi + 2
        a = enc(j, lo, hi)
        b = enc(N_SCALES, lo // 2, hi // 2) if j == N_SCALES - 1 else dec(j + 1, lo // 2, hi // 2)
        return min(a[0], b[0]), max(a[1], b[1])

    # window [0, size) with size a multiple of the downsampling factor and far larger than any reach
    factor = 2 ** (N_SCALES - 1)
    size = factor * (4 + 2 * sum(convs) + 8)
    margin = 0
    for y in range(size):
        lo, hi = dec(1, y, y)
        if lo < 0:
            margin = max(margin, y + 1)
        if hi > size - 1:
            margin = max(margin, size - y)
    return margin


def encoder_widths(config: GgpfnConfig) -> tuple:
    """Channel width of each scale's last feature map (conv-less groups keep their input width)."""
    widths, cur = [], None
    for n, c in zip(config.group_convs, config.channels):
        cur = c if n > 0 or cur is None else cur
        widths.append(cur)
    return tuple(widths)


def _group_plan(n: int) -> list:
    """Layer kinds for a group with ``n`` depth-shrinking convs."""
    if n >= 2:
        return ["conv"] * (n - 2) + ["res"]
    return ["conv"] * n


# ---------------------------------------------------------------- parameters

def param_specs(config: GgpfnConfig) -> list:
    """Ordered ``(name, shape, fan_in)`` for every learnable tensor."""
    config.validate()
    specs = []
    k3 = (3, 3, 3) if config.fusion_mode == "progressive" else (3, 3)

    def conv(name, cout, cin, kernel=k3):
        fan = cin * int(np.prod(kernel))
        specs.append((f"{name}.w", (cout, cin) + tuple(kernel), fan))
        specs.append((f"{name}.b", (cout,), fan))

    def point(name, cout, cin):
        specs.append((f"{name}.w", (cout, cin), cin))
        specs.append((f"{name}.b", (cout,), cin))

    cin = 1
    if config.fusion_mode == "one_off":
        conv("enc.fuse", config.channels[0], config.depth, (3, 3))
        cin = config.channels[0]
    widths = encoder_widths(config)
    for g, n in enumerate(config.group_convs):
        cout = widths[g]
        for i, kind in enumerate(_group_plan(n)):
            if kind == "conv":
                conv(f"enc.g{g + 1}.conv{i}", cout, cin)
            else:
                conv(f"enc.g{g + 1}.res.conv1", cout, cin)
                conv(f"enc.g{g + 1}.res.conv2", cout, cout)
                if cin != cout:
                    point(f"enc.g{g + 1}.res.proj", cout, cin)
            cin = cout

    dec = config.dec_channels
    gch = config.global_channels
    cin = widths[3] + (gch[4] if config.global_enabled else 0)
    for j in (3, 2, 1):
        cout = dec[j - 1]
        specs.append((f"dec.s{j}.up.w", (cin, cout, 2, 2), cin))
        specs.append((f"dec.s{j}.up.b", (cout,), cin))
        conv(f"dec.s{j}.conv1", cout, cout + widths[j - 1], (3, 3))
        conv(f"dec.s{j}.conv2", cout, cout, (3, 3))
        cin = cout
    point("dec.out", 1, cin)
    for j in range(1, N_SCALES + 1):
        point(f"head.s{j}", 1, widths[j - 1])

    cin = 1
    for st, (n, c) in enumerate(zip(config.global_convs, gch)):
        for i in range(n):
            conv(f"glob.s{st + 1}.conv{i}", c, cin, (3, 3))
            cin = c
    conv("glob.down", gch[4], cin, (3, 3))
    point("glob.head_f", 1, gch[4])
    point("glob.head_fp", 1, cin)
    return specs


def param_group(name: str) -> str:
    """``"global"`` for the guidance branch and its heads, ``"pfn"`` otherwise."""
    return "global" if name.startswith("glob.") else "pfn"


class ParamStore:
    """Named, ordered learnable tensors plus Adam moment buffers."""

    def __init__(self, tensors: "OrderedDict[str, Tensor]", config: Optional[GgpfnConfig] = None):
        self.tensors = tensors
        self.config = config
        self.m = OrderedDict((k, np.zeros_like(t.data)) for k, t in tensors.items())
        self.v = OrderedDict((k, np.zeros_like(t.data)) for k, t in tensors.items())
        # Adam step count per tensor: frozen tensors keep theirs across stages
        self.t = OrderedDict((k, 0) for k in tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self, group: Optional[str] = None) -> list:
        return [k for k in self.tensors if group in (None, "all") or param_group(k) == group]

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def num_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ParamStore":
        out = ParamStore(OrderedDict((k, Tensor(t.data.copy(), requires_grad=True, name=k))
                                     for k, t in self.tensors.items()), self.config)
        out.m = OrderedDict((k, a.copy()) for k, a in self.m.items())
        out.v = OrderedDict((k, a.copy()) for k, a in self.v.items())
        out.t = OrderedDict(self.t)
        return out

    def astype(self, dtype) -> "ParamStore":
        out = self.copy()
        for k, t in out.tensors.items():
            t.data = t.data.astype(dtype)
        return out

    def equals(self, other: "ParamStore") -> bool:
        """Bit-exact comparison of names, tensors, moments and step counts."""
        if list(self.tensors) != list(other.tensors) or self.t != other.t:
            return False
        for k in self.tensors:
            for a, b in ((self[k].data, other[k].data), (self.m[k], other.m[k]), (self.v[k], other.v[k])):
                if a.dtype != b.dtype or a.shape != b.shape or a.tobytes() != b.tobytes():
                    return False
        return True


def build_model(config: GgpfnConfig, seed: int = 0, dtype=np.float32) -> ParamStore:
    """Kernels ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)), biases zero."""
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    for name, shape, fan_in in param_specs(config):
        if name.endswith(".b"):
            data = np.zeros(shape, dtype=dtype)
        else:
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(dtype)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return ParamStore(tensors, config)


# ---------------------------------------------------------------- encoder

@dataclass
class EncoderPyramid:
    """Last feature map of each encoder scale, as ``[C, D, H, W]``."""

    scales: list
    depths: tuple

    @property
    def E_k(self) -> Tensor:
        return ops.central_slice(self.scales[-1])

    def skip(self, j: int) -> Tensor:
        """Central-depth slice of scale ``j`` (1-based)."""
        return ops.central_slice(self.scales[j - 1])


def _as_input(x, params: ParamStore) -> Tensor:
    if isinstance(x, Tensor):
        return x if x.dtype == params.dtype else Tensor(x.data.astype(params.dtype))
    return Tensor(np.asarray(x, dtype=params.dtype))


def _res_block(x, params, prefix, conv, crop):
    y = ops.relu(conv(x, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"]))
    y = conv(y, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"])
    idn = crop(x, y)
    if f"{prefix}.proj.w" in params:
        idn = ops.pointwise_conv(idn, params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"])
    return ops.relu(y + idn)


def _run_groups(x, params, config, conv, crop, pool_window):
    scales, depths = [], []
    for g, n in enumerate(config.group_convs):
        if g > 0:
            x = ops.max_pool(x, pool_window)
        for i, kind in enumerate(_group_plan(n)):
            if kind == "conv":
                name = f"enc.g{g + 1}.conv{i}"
                x = ops.relu(conv(x, params[f"{name}.w"], params[f"{name}.b"]))
            else:
                x = _res_block(x, params, f"enc.g{g + 1}.res", conv, crop)
        scales.append(x)
        depths.append(x.shape[1] if x.ndim == 4 else 1)
    return scales, tuple(depths)


def encoder_forward(patch3d, params: ParamStore, config: GgpfnConfig) -> EncoderPyramid:
    """Progressive fusion: every 3D conv drops the two outermost slices."""
    if config.fusion_mode != "progressive":
        return one_off_encoder_forward(patch3d, params, config)
    x = _as_input(patch3d, params)
    if x.ndim == 3:
        x = ops.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[0] != 1:
        raise ShapeError(f"encoder input must be [1, D, H, W], got {x.shape}")
    if x.shape[1] != config.depth:
        raise DepthError(f"encoder expects {config.depth} slices (2T+1), got {x.shape[1]}")
    if x.shape[2] % 8 or x.shape[3] % 8:
        raise ShapeError(f"patch extents {x.shape[2:]} must be multiples of 8")

    def crop(idn, y):
        return ops.center_crop(idn, (idn.shape[0],) + y.shape[1:])

    scales, depths = _run_groups(x, params, config, ops.conv3d_dvalid, crop, (1, 2, 2))
    return EncoderPyramid(scales, depths)


def one_off_encoder_forward(patch3d, params: ParamStore, config: GgpfnConfig) -> EncoderPyramid:
    """Ablation encoder: one conv treats the 2T+1 slices as channels, then a 2D encoder."""
    x = _as_input(patch3d, params)
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ShapeError(f"encoder input must be [1, D, H, W], got {x.shape}")
        x = ops.reshape(x, x.shape[1:])
    if x.shape[0] != config.depth:
        raise DepthError(f"encoder expects {config.depth} slices (2T+1), got {x.shape[0]}")
    if x.shape[1] % 8 or x.shape[2] % 8:
        raise ShapeError(f"patch extents {x.shape[1:]} must be multiples of 8")
    x = ops.relu(ops.conv2d(x, params["enc.fuse.w"], params["enc.fuse.b"]))
    scales, depths = _run_groups(x, params, config, ops.conv2d, lambda idn, y: idn, (2, 2))
    scales = [ops.reshape(s, (s.shape[0], 1) + s.shape[1:]) for s in scales]
    return EncoderPyramid(scales, depths)


def encode(patch3d, params, config) -> EncoderPyramid:
    if config.fusion_mode == "one_off":
        return one_off_encoder_forward(patch3d, params, config)
    return encoder_forward(patch3d, params, config)


# ---------------------------------------------------------------- global branch

@dataclass
class GlobalFeatures:
    F: Tensor
    F_prime: Tensor


def global_forward(slice_g, params: ParamStore, config: GgpfnConfig) -> GlobalFeatures:
    x = _as_input(slice_g, params)
    if x.ndim == 2:
        x = ops.reshape(x, (1,) + x.shape)
    _, h, w = x.shape
    if h % 32 or w % 32:
        raise ShapeError(f"global branch input {(h, w)} must be divisible by 32")
    for st, n in enumerate(config.global_convs):
        if st > 0:
            x = ops.max_pool(x, (2, 2))
        for i in range(n):
            name = f"glob.s{st + 1}.conv{i}"
            x = ops.relu(ops.conv2d(x, params[f"{name}.w"], params[f"{name}.b"]))
    f_prime = x
    f = ops.relu(ops.conv2d(x, params["glob.down.w"], params["glob.down.b"], stride=2))
    return GlobalFeatures(f, f_prime)


def gather_coords(window, slice_extents, ek_extents) -> np.ndarray:
    """Normalized centers of the E_k pixels of ``window`` within the slice."""
    y0, x0, ph, pw = window
    h, w = slice_extents
    eh, ew = ek_extents
    if y0 < 0 or x0 < 0 or y0 + ph > h or x0 + pw > w:
        raise ShapeError(f"patch window {window} outside slice {slice_extents}")
    ys = (y0 + (np.arange(eh) + 0.5) * (ph / eh)) / h
    xs = (x0 + (np.arange(ew) + 0.5) * (pw / ew)) / w
    uu, vv = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([uu.ravel(), vv.ravel()], axis=1)


def subpixel_gather(F: Tensor, window, slice_extents, ek_extents) -> Tensor:
    """Bilinearly sample ``F`` at every E_k pixel center -> ``[Cg, eh, ew]``."""
    coords = gather_coords(window, slice_extents, ek_extents)
    sampled = ops.bilinear_sample(F, coords)
    return ops.reshape(sampled, (F.shape[0],) + tuple(ek_extents))


# ---------------------------------------------------------------- decoder & heads

def decoder_forward(pyramid: EncoderPyramid, Fk: Optional[Tensor], params: ParamStore,
                    config: GgpfnConfig) -> Tensor:
    x = pyramid.E_k
    if config.global_enabled:
        if Fk is None:
            raise ShapeError("global guidance enabled but no gathered global features given")
        if Fk.shape[1:] != x.shape[1:]:
            raise ShapeError(f"global features {Fk.shape} do not match E_k {x.shape}")
        x = ops.concat_channels(x, Fk)
    for j in (3, 2, 1):
        x = ops.transposed_conv2d(x, params[f"dec.s{j}.up.w"], params[f"dec.s{j}.up.b"])
        x = ops.concat_channels(x, pyramid.skip(j))
        x = ops.relu(ops.conv2d(x, params[f"dec.s{j}.conv1.w"], params[f"dec.s{j}.conv1.b"]))
        x = ops.relu(ops.conv2d(x, params[f"dec.s{j}.conv2.w"], params[f"dec.s{j}.conv2.b"]))
    return ops.sigmoid(ops.pointwise_conv(x, params["dec.out.w"], params["dec.out.b"]))


def multiscale_heads(pyramid: EncoderPyramid, params: ParamStore) -> list:
    """Training-only probability maps ``[P1..P4]`` from each encoder scale."""
    return [ops.sigmoid(ops.pointwise_conv(pyramid.skip(j), params[f"head.s{j}.w"], params[f"head.s{j}.b"]))
            for j in range(1, N_SCALES + 1)]


def global_heads(gf: GlobalFeatures, params: ParamStore) -> tuple:
    pf = ops.sigmoid(ops.pointwise_conv(gf.F, params["glob.head_f.w"], params["glob.head_f.b"]))
    pfp = ops.sigmoid(ops.pointwise_conv(gf.F_prime, params["glob.head_fp.w"], params["glob.head_fp.b"]))
    return pf, pfp


def forward_patch(patch3d, window, slice_extents, gf: Optional[GlobalFeatures],
                  params: ParamStore, config: GgpfnConfig):
    """Encoder, gather and decoder for one patch; returns ``(P_k, pyramid)``."""
    pyramid = encode(patch3d, params, config)
    fk = None
    if config.global_enabled:
        fk = subpixel_gather(gf.F, window, slice_extents, pyramid.E_k.shape[1:])
    return decoder_forward(pyramid, fk, params, config), pyramid


# ---------------------------------------------------------------- loss

def total_loss(Pk_list: Sequence[Tensor], Gk_list, Pj_lists, Pf=None, Pf_prime=None, Gf=None,
               Gf_prime=None, alpha: float = 0.0, beta: float = 0.0, Gj_lists=None) -> Tensor:
    """Patch BCE plus averaged multiscale BCE, plus weighted global-branch terms.

    ``L = mean_k [C(P_k, G_k) + 1/4 sum_j C(P_k^j, G_k^j)] + alpha C(Pf, Gf) + beta C(Pf', Gf')``

    Per-scale targets default to max-downsampled pyramids of each ``G_k``.
    Global terms are skipped when their prediction is ``None``.
    """
    n = len(Pk_list)
    if n == 0 and Pf is None:
        raise ShapeError("total_loss needs at least one patch or global prediction")
    if len(Gk_list) != n or (Pj_lists is not None and len(Pj_lists) != n):
        raise ShapeError("total_loss: per-patch lists have different lengths")
    loss = None
    for k in range(n):
        term = ops.bce_loss(Pk_list[k], Gk_list[k])
        if Pj_lists is not None:
            pjs = Pj_lists[k]
            gjs = Gj_lists[k] if Gj_lists is not None else gt_pyramid(_arr(Gk_list[k]), len(pjs))
            ms = None
            for pj, gj in zip(pjs, gjs):
                c = ops.bce_loss(pj, gj)
                ms = c if ms is None else ms + c
            term = term + ms * (1.0 / len(pjs))
        loss = term if loss is None else loss + term
    if loss is not None:
        loss = loss * (1.0 / n)
    for weight, p, g in ((alpha, Pf, Gf), (beta, Pf_prime, Gf_prime)):
        if p is None or weight == 0:
            continue
        term = ops.bce_loss(p, g) * weight
        loss = term if loss is None else loss + term
    if loss is None:
        loss = Tensor(np.zeros((), dtype=np.float64))
    return loss


def _arr(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)
