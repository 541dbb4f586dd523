"""Dense 4-axis tensor kernels and their hand-written backward passes.

Every value in the pipeline is a numpy array of shape (N, C, H, W), row-major
with width fastest. Compute stays in the dtype of the inputs: float32 for
normal runs, float64 for gradient checking. Kernels are pure functions; the
backward of each op takes the original inputs plus the upstream gradient, so
no hidden state survives between calls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor extents do not satisfy an operation's contract."""


def tensor(data, dtype=np.float32) -> np.ndarray:
    """Validate and return a 4-axis array (N, C, H, W) of the given dtype."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected 4 axes (N,C,H,W), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor values must be finite")
    return arr


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max absolute difference normalized by the larger magnitude of a and b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), 1e-30)
    return float(np.max(np.abs(a - b), initial=0.0) / denom)


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-d cross-correlation.

    Padding is zero-fill, applied symmetrically per axis. The effective kernel
    extent along an axis is (k - 1) * dilation + 1.
    """

    kh: int = 3
    kw: int = 3
    stride: int = 1
    pad_h: int = 0
    pad_w: int = 0
    dilation: int = 1

    def __post_init__(self):
        if self.kh < 1 or self.kw < 1:
            raise ShapeError(f"kernel extents must be positive, got {self.kh}x{self.kw}")
        if self.stride < 1:
            raise ShapeError(f"stride must be positive, got {self.stride}")
        if self.dilation < 1:
            raise ShapeError(f"dilation must be positive, got {self.dilation}")
        if self.pad_h < 0 or self.pad_w < 0:
            raise ShapeError("padding must be non-negative")

    def out_extent(self, size: int, axis: int) -> int:
        k, pad = (self.kh, self.pad_h) if axis == 0 else (self.kw, self.pad_w)
        eff = (k - 1) * self.dilation + 1
        return (size + 2 * pad - eff) // self.stride + 1


def _patch_indices(spec: ConvSpec, oh: int, ow: int):
    # rows[i, oi] = input row read by kernel row i at output row oi (in padded coords)
    rows = np.arange(spec.kh)[:, None] * spec.dilation + np.arange(oh)[None, :] * spec.stride
    cols = np.arange(spec.kw)[:, None] * spec.dilation + np.arange(ow)[None, :] * spec.stride
    return rows, cols


def _im2col(x: np.ndarray, spec: ConvSpec, oh: int, ow: int) -> np.ndarray:
    """Gather patches of x into shape (N, C, kh, kw, oh, ow)."""
    xp = np.pad(x, ((0, 0), (0, 0), (spec.pad_h, spec.pad_h), (spec.pad_w, spec.pad_w)))
    rows, cols = _patch_indices(spec, oh, ow)
    return xp[:, :, rows[:, None, :, None], cols[None, :, None, :]]


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Cross-correlate x (N,Cin,H,W) with w (Cout,Cin,kh,kw) plus bias b (Cout,).

    No kernel flip; zero padding; dilation spaces the taps spec.dilation pixels
    apart. Output extents follow floor((S + 2*pad - (k-1)*d - 1) / stride) + 1.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d wants 4-axis tensors, got x{x.shape}, w{w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, weight expects {wcin}")
    if (kh, kw) != (spec.kh, spec.kw):
        raise ShapeError(f"weight is {kh}x{kw} but spec says {spec.kh}x{spec.kw}")
    if b.shape != (cout,):
        raise ShapeError(f"bias must be ({cout},), got {b.shape}")
    oh, ow = spec.out_extent(h, 0), spec.out_extent(wd, 1)
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d output would be {oh}x{ow} for input {h}x{wd} with {spec}")
    patches = _im2col(x, spec, oh, ow)
    y = np.tensordot(w, patches, axes=([1, 2, 3], [1, 2, 3]))
    y = np.ascontiguousarray(y.transpose(1, 0, 2, 3))
    y += b[None, :, None, None]
    return y


def conv2d_backward(x: np.ndarray, w: np.ndarray, spec: ConvSpec, gy: np.ndarray):
    """Gradients of conv2d w.r.t. (x, w, b) given upstream gy (N,Cout,oh,ow)."""
    n, cin, h, wd = x.shape
    oh, ow = gy.shape[2], gy.shape[3]
    gb = gy.sum(axis=(0, 2, 3))
    patches = _im2col(x, spec, oh, ow)
    gw = np.tensordot(gy, patches, axes=([0, 2, 3], [0, 4, 5]))
    gpat = np.einsum("ocij,nohw->ncijhw", w, gy)
    gxp = np.zeros((n, cin, h + 2 * spec.pad_h, wd + 2 * spec.pad_w), dtype=x.dtype)
    d, s = spec.dilation, spec.stride
    for i in range(spec.kh):
        for j in range(spec.kw):
            gxp[:, :, i * d: i * d + oh * s: s, j * d: j * d + ow * s: s] += gpat[:, :, i, j]
    gx = gxp[:, :, spec.pad_h: spec.pad_h + h, spec.pad_w: spec.pad_w + wd]
    return np.ascontiguousarray(gx), gw, gb


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Mean over the spatial axes, kept as (N, C, 1, 1)."""
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"global_avg_pool wants non-empty (N,C,H,W), got {x.shape}")
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(x_shape, gy: np.ndarray) -> np.ndarray:
    n, c, h, w = x_shape
    return np.broadcast_to(gy / (h * w), x_shape).astype(gy.dtype).copy()


def _resize_axis(in_size: int, out_size: int, dtype):
    # Source coordinate per output index, align-corners-false, edge-clamped.
    scale = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = (src - lo).astype(dtype)
    return lo, hi, frac


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the spatial extents by bilinear interpolation.

    Same-size resize returns a bitwise copy of the input.
    """
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output extents must be positive, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return x.copy()
    r0, r1, fr = _resize_axis(h, out_h, x.dtype)
    c0, c1, fc = _resize_axis(w, out_w, x.dtype)
    fr = fr[:, None]
    fc = fc[None, :]
    top = x[:, :, r0[:, None], c0[None, :]] * (1 - fc) + x[:, :, r0[:, None], c1[None, :]] * fc
    bot = x[:, :, r1[:, None], c0[None, :]] * (1 - fc) + x[:, :, r1[:, None], c1[None, :]] * fc
    return top * (1 - fr) + bot * fr


def bilinear_resize_backward(x_shape, gy: np.ndarray) -> np.ndarray:
    n, c, h, w = x_shape
    out_h, out_w = gy.shape[2], gy.shape[3]
    if (out_h, out_w) == (h, w):
        return gy.copy()
    r0, r1, fr = _resize_axis(h, out_h, gy.dtype)
    c0, c1, fc = _resize_axis(w, out_w, gy.dtype)
    fr = fr[:, None]
    fc = fc[None, :]
    gx = np.zeros(x_shape, dtype=gy.dtype)
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    for ri, wr in ((r0, 1 - fr), (r1, fr)):
        for cj, wc in ((c0, 1 - fc), (c1, fc)):
            np.add.at(gx, (ni, ci, ri[None, None, :, None], cj[None, None, None, :]),
                      gy * (wr * wc))
    return gx


def _sample_planes(x: np.ndarray, rows: np.ndarray, cols: np.ndarray):
    """Bilinear read of x (N,C,H,W) at fractional (rows, cols), shape (N,T,h,w).

    Out-of-bounds corner taps contribute zero. Returns the sampled values of
    shape (N, C, T, h, w) together with the pieces the backward pass needs.
    """
    n, c, h, w = x.shape
    r0 = np.floor(rows)
    c0 = np.floor(cols)
    fr = (rows - r0).astype(x.dtype)
    fc = (cols - c0).astype(x.dtype)
    r0 = r0.astype(np.intp)
    c0 = c0.astype(np.intp)

    corners = []
    for dr, dc, wgt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                        (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        ri = r0 + dr
        cj = c0 + dc
        valid = (ri >= 0) & (ri < h) & (cj >= 0) & (cj < w)
        ric = np.clip(ri, 0, h - 1)
        cjc = np.clip(cj, 0, w - 1)
        corners.append((ric, cjc, valid, wgt))

    ni = np.arange(n).reshape(n, 1, 1, 1, 1)
    ci = np.arange(c).reshape(1, c, 1, 1, 1)
    out = np.zeros((n, c) + rows.shape[1:], dtype=x.dtype)
    vals4 = []
    for ric, cjc, valid, wgt in corners:
        v = x[ni, ci, ric[:, None], cjc[:, None]] * valid[:, None].astype(x.dtype)
        vals4.append(v)
        out += v * wgt[:, None]
    return out, (r0, c0, fr, fc, corners, vals4)


def _sample_planes_backward(x_shape, cache, gy: np.ndarray):
    """Backward of _sample_planes: gradients w.r.t. x and the (rows, cols)."""
    n, c, h, w = x_shape
    r0, c0, fr, fc, corners, vals4 = cache
    gx = np.zeros(x_shape, dtype=gy.dtype)
    ni = np.arange(n).reshape(n, 1, 1, 1, 1)
    ci = np.arange(c).reshape(1, c, 1, 1, 1)
    for (ric, cjc, valid, wgt), _v in zip(corners, vals4):
        contrib = gy * wgt[:, None] * valid[:, None].astype(gy.dtype)
        np.add.at(gx, (ni, ci, ric[:, None], cjc[:, None]), contrib)
    v00, v01, v10, v11 = vals4
    # d(out)/d(row) = (1-fc)*(v10-v00) + fc*(v11-v01), summed over channels
    dvr = (1 - fc)[:, None] * (v10 - v00) + fc[:, None] * (v11 - v01)
    dvc = (1 - fr)[:, None] * (v01 - v00) + fr[:, None] * (v11 - v10)
    grows = (gy * dvr).sum(axis=1)
    gcols = (gy * dvc).sum(axis=1)
    return gx, grows, gcols


def bilinear_sample(x: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Sample every (n, c) plane of x at fractional (row, col) points.

    points is (P, 2). Neighbours outside the plane contribute zero, so a point
    fully outside reads 0. Returns values of shape (N, C, P).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ShapeError(f"points must be (P, 2), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("sample points must be finite")
    n = x.shape[0]
    p = pts.shape[0]
    rows = np.broadcast_to(pts[:, 0].reshape(1, p, 1, 1), (n, p, 1, 1))
    cols = np.broadcast_to(pts[:, 1].reshape(1, p, 1, 1), (n, p, 1, 1))
    out, _ = _sample_planes(x, rows, cols)
    return out.reshape(n, x.shape[1], p)


def bilinear_sample_backward(x: np.ndarray, points: np.ndarray, gy: np.ndarray):
    """Gradients of bilinear_sample w.r.t. x and the points array."""
    pts = np.asarray(points, dtype=np.float64)
    n, c = x.shape[0], x.shape[1]
    p = pts.shape[0]
    rows = np.broadcast_to(pts[:, 0].reshape(1, p, 1, 1), (n, p, 1, 1))
    cols = np.broadcast_to(pts[:, 1].reshape(1, p, 1, 1), (n, p, 1, 1))
    _, cache = _sample_planes(x, rows, cols)
    gx, grows, gcols = _sample_planes_backward(x.shape, cache, gy.reshape(n, c, p, 1, 1))
    gpts = np.stack([grows.sum(axis=0).reshape(p), gcols.sum(axis=0).reshape(p)], axis=1)
    return gx, gpts


def concat_channels(parts) -> np.ndarray:
    """Concatenate along the channel axis; all parts must share N, H, W."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    n, _, h, w = parts[0].shape
    for i, part in enumerate(parts):
        if part.ndim != 4 or part.shape[0] != n or part.shape[2:] != (h, w):
            raise ShapeError(
                f"concat part {i} has shape {part.shape}, expected (N={n}, *, {h}, {w})")
    return np.concatenate(parts, axis=1)


def concat_channels_backward(channel_counts, gy: np.ndarray):
    """Split the upstream gradient back into the per-part slices."""
    splits = np.cumsum(channel_counts)[:-1]
    return [np.ascontiguousarray(g) for g in np.split(gy, splits, axis=1)]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    return gy * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def sigmoid_backward(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    # takes the forward output y, not the pre-activation
    return gy * y * (1.0 - y)


def numeric_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f at x, evaluated in float64.

    The oracle against which every analytic backward pass is checked. f must
    be pure; it receives float64 copies of x with one coordinate nudged.
    """
    x64 = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x64)
    flat = x64.reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = float(f(x64.reshape(x64.shape)))
        flat[j] = orig - h
        fm = float(f(x64.reshape(x64.shape)))
        flat[j] = orig
        gflat[j] = (fp - fm) / (2.0 * h)
    return grad
