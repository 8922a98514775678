"""Brute-force reference implementations used as test oracles.

Everything here is written with explicit loops and no shared code with the
package, so agreement is evidence of correctness rather than of consistency.
"""
import numpy as np


def conv2d_loops(x, k, b=None, stride=1):
    """Zero same-padded 2D convolution, direct 6-nested loop."""
    C, H, W = x.shape
    K, _, kh, kw = k.shape
    ph, pw = kh // 2, kw // 2
    Ho, Wo = -(-H // stride), -(-W // stride)
    out = np.zeros((K, Ho, Wo))
    for o in range(K):
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0 if b is None else float(b[o])
                for c in range(C):
                    for a in range(kh):
                        for d in range(kw):
                            y, xx = i * stride + a - ph, j * stride + d - pw
                            if 0 <= y < H and 0 <= xx < W:
                                acc += x[c, y, xx] * k[o, c, a, d]
                out[o, i, j] = acc
    return out


def conv3d_dvalid_loops(x, k, b=None):
    """Depth-valid, H/W same-padded 3D convolution, direct 7-nested loop (plus channels)."""
    C, D, H, W = x.shape
    K = k.shape[0]
    out = np.zeros((K, D - 2, H, W))
    for o in range(K):
        for z in range(D - 2):
            for i in range(H):
                for j in range(W):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(C):
                        for t in range(3):
                            for a in range(3):
                                for d in range(3):
                                    y, xx = i + a - 1, j + d - 1
                                    if 0 <= y < H and 0 <= xx < W:
                                        acc += x[c, z + t, y, xx] * k[o, c, t, a, d]
                    out[o, z, i, j] = acc
    return out


def transposed_conv2d_scatter(x, k, b=None):
    """Scatter form: every input pixel adds ``x * kernel`` into its 2x2 output block."""
    C, H, W = x.shape
    K = k.shape[1]
    out = np.zeros((K, 2 * H, 2 * W))
    for c in range(C):
        for i in range(H):
            for j in range(W):
                for o in range(K):
                    for a in range(2):
                        for d in range(2):
                            out[o, 2 * i + a, 2 * j + d] += x[c, i, j] * k[c, o, a, d]
    if b is not None:
        out += np.asarray(b).reshape(-1, 1, 1)
    return out


def strided_conv_down(y, k):
    """The stride-2, 2x2, unpadded convolution whose adjoint is the transposed conv."""
    K, H2, W2 = y.shape
    C = k.shape[0]
    out = np.zeros((C, H2 // 2, W2 // 2))
    for c in range(C):
        for i in range(H2 // 2):
            for j in range(W2 // 2):
                out[c, i, j] = np.sum(y[:, 2 * i:2 * i + 2, 2 * j:2 * j + 2] * k[c])
    return out


def pr_counts(V, gt, thresholds):
    """Precision/recall by counting voxels one at a time."""
    v = np.asarray(V).ravel()
    g = np.asarray(gt).astype(bool).ravel()
    rows = []
    for t in thresholds:
        tp = fp = fn = 0
        for vi, gi in zip(v, g):
            pos = vi >= t
            if pos and gi:
                tp += 1
            elif pos:
                fp += 1
            elif gi:
                fn += 1
        precision = tp / (tp + fp) if tp + fp else 1.0
        rows.append((t, precision, tp / (tp + fn)))
    return rows


def bilinear_formula(fmap, u, v):
    """Textbook bilinear interpolation at normalized (u, v)."""
    C, Hm, Wm = fmap.shape
    y = min(max(u * Hm - 0.5, 0.0), Hm - 1)
    x = min(max(v * Wm - 0.5, 0.0), Wm - 1)
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    y1, x1 = min(y0 + 1, Hm - 1), min(x0 + 1, Wm - 1)
    dy, dx = y - y0, x - x0
    return ((1 - dy) * (1 - dx) * fmap[:, y0, x0] + (1 - dy) * dx * fmap[:, y0, x1]
            + dy * (1 - dx) * fmap[:, y1, x0] + dy * dx * fmap[:, y1, x1])


def window_or_pyramid(mask, n):
    """Level j cell (i, k) is 1 iff any pixel in its 2^j x 2^j footprint is 1."""
    mask = np.asarray(mask).astype(bool)
    levels = [mask.astype(np.float32)]
    for j in range(1, n):
        f = 2 ** j
        h, w = -(-mask.shape[0] // f), -(-mask.shape[1] // f)
        out = np.zeros((h, w), dtype=np.float32)
        for i in range(h):
            for k in range(w):
                out[i, k] = mask[i * f:(i + 1) * f, k * f:(k + 1) * f].any()
        levels.append(out)
    return levels


def receptive_field_enumerate(ops):
    """RF by propagating a single output pixel's support backwards through ``ops``.

    ``ops`` lists ``("conv", k)`` or ``("pool", k)`` in forward order. The
    support interval is grown layer by layer from the output back to the input.
    """
    lo, hi = 0, 0
    for kind, k in reversed(ops):
        if kind == "conv":
            lo, hi = lo - k // 2, hi + k // 2
        else:
            lo, hi = lo * k, hi * k + k - 1
    return hi - lo + 1


def adam_reference(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar-by-scalar Adam written from the textbook recurrence."""
    theta = np.array(theta, dtype=np.float64)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, 1):
        for i in np.ndindex(theta.shape):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            theta[i] -= lr * mh / (np.sqrt(vh) + eps)
    return theta, m, v


def keep_coverage(plan):
    """Count how many keep-rectangles cover each pixel."""
    cov = np.zeros(plan.slice_extents, dtype=int)
    for ylo, yhi, xlo, xhi in plan.keeps:
        cov[ylo:yhi, xlo:xhi] += 1
    return cov


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def interior_edge_distance(plan, extents):
    """Per pixel: distance from the window that keeps it to that window's nearest non-border edge."""
    h, w = extents
    ph, pw = plan.patch
    dist = np.empty(extents, dtype=np.int64)
    for (y0, x0), (ylo, yhi, xlo, xhi) in zip(plan.windows, plan.keeps):
        yy, xx = np.mgrid[ylo:yhi, xlo:xhi]
        ds = [np.full(yy.shape, 10 ** 6)]
        if y0 > 0:
            ds.append(yy - y0)
        if y0 + ph < h:
            ds.append(y0 + ph - 1 - yy)
        if x0 > 0:
            ds.append(xx - x0)
        if x0 + pw < w:
            ds.append(x0 + pw - 1 - xx)
        dist[ylo:yhi, xlo:xhi] = np.min(ds, axis=0)
    return dist
