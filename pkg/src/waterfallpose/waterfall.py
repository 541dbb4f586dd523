"""Waterfall pose head: pyramid fusion, cascaded dilated convolutions,
low-level fusion, and adaptive-convolution keypoint/offset heads.

The module runs at base resolution throughout. Stages:

  1. fuse_pyramid      - upsample levels 1..3 to level-0 extents, concatenate.
  2. waterfall_forward - four sequential 3x3 convolutions at increasing
                         dilation, each feeding the next; their outputs plus a
                         pooled branch are concatenated and reduced by 1x1.
  3. fuse_low_level    - project the low-level map, add, two more 1x1 stages,
                         the last cutting the width to a quarter of the fused
                         input width.
  4. heads_forward     - a keypoint head (adaptive conv, sigmoid scores for
                         each joint plus a person-center channel) and a
                         disentangled offset head (one adaptive-conv group per
                         keypoint regressing a 2-vector toward that joint).

An adaptive convolution displaces the nine taps of a 3x3 kernel per pixel;
the displacements come from a 1x1 predictor emitting a 2x2 matrix and a
translation applied to the canonical tap grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import FeaturePyramid

S1 = T.ConvSpec(1, 1)

# canonical 3x3 tap grid, row-major: (-1,-1), (-1,0), ... (1,1)
TAP_GRID = np.array([(r, c) for r in (-1, 0, 1) for c in (-1, 0, 1)], dtype=np.float64)

# bias that makes the affine predictor emit exactly the canonical grid
IDENTITY_AFFINE = np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0])


@dataclass(frozen=True)
class WaterfallConfig:
    """Widths and switches for the whole head; every kernel shape follows
    from these fields alone."""

    level_widths: tuple = (32, 64, 128, 256)
    low_level_width: int = 32
    dilations: tuple = (1, 6, 12, 18)
    branch_width: int = 128
    out_width: int | None = None       # width after the waterfall 1x1, default fused
    final_width: int | None = None     # width entering the heads, default fused // 4
    keypoints: int = 17
    group_width: int = 15
    center_map: bool = True
    per_keypoint_offsets: bool = True

    def __post_init__(self):
        if len(self.level_widths) != 4 or any(c < 0 for c in self.level_widths):
            raise ValueError(f"need 4 non-negative level widths, got {self.level_widths}")
        if self.fused_width < 1:
            raise ValueError("at least one pyramid level must have channels")
        if len(self.dilations) != 4 or any(d < 1 for d in self.dilations):
            raise ValueError(f"need 4 positive dilation rates, got {self.dilations}")
        if self.branch_width < 1 or self.low_level_width < 1:
            raise ValueError("branch and low-level widths must be positive")
        if self.keypoints < 1:
            raise ValueError("need at least one keypoint")
        if self.group_width < 1:
            raise ValueError("regression group width must be positive")
        if self.head_width < self.keypoints:
            raise ValueError(
                f"final width {self.head_width} cannot support {self.keypoints} "
                "regression groups")

    @property
    def fused_width(self) -> int:
        return sum(self.level_widths)

    @property
    def waterfall_width(self) -> int:
        return self.out_width if self.out_width is not None else self.fused_width

    @property
    def head_width(self) -> int:
        return self.final_width if self.final_width is not None else self.fused_width // 4

    @property
    def heatmap_channels(self) -> int:
        return self.keypoints + (1 if self.center_map else 0)

    @property
    def offset_groups(self) -> int:
        return self.keypoints if self.per_keypoint_offsets else 1

    @property
    def offset_channels(self) -> int:
        return 2 * self.offset_groups


@dataclass
class PoseMaps:
    """Network output: per-joint (plus center) score maps in (0,1), and the
    per-keypoint (dx, dy) offset field, both at base resolution."""

    heatmaps: np.ndarray
    offsets: np.ndarray


def init_waterfall_weights(cfg: WaterfallConfig, rng: np.random.Generator,
                           dtype=np.float32, offset_init="canonical") -> dict:
    """Build every kernel of the head.

    offset_init "canonical" zeroes the tap predictors and biases them to the
    identity affine, so training starts from plain 3x3 convolutions;
    "random" draws them like any other layer (used by gradient checks).
    """
    weights = {}

    def conv(name, cout, cin, k=1):
        std = np.sqrt(2.0 / (cin * k * k))
        weights[name + ".w"] = (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype)
        weights[name + ".b"] = np.zeros(cout, dtype=dtype)

    def predictor(name, cin):
        conv(name, 6, cin)
        if offset_init == "canonical":
            weights[name + ".w"][:] = 0.0
            weights[name + ".b"][:] = IDENTITY_AFFINE.astype(dtype)
        elif offset_init == "random":
            weights[name + ".b"][:] = (rng.standard_normal(6) * 0.3).astype(dtype)
        else:
            raise ValueError(f"unknown offset_init {offset_init!r}")

    def adaptive(name, cout, cin):
        std = np.sqrt(2.0 / (cin * 9))
        weights[name + ".w"] = (rng.standard_normal((cout, cin, 3, 3)) * std).astype(dtype)

    prev = cfg.fused_width
    for i, d in enumerate(cfg.dilations):
        conv(f"wf.branch{i}", cfg.branch_width, prev, k=3)
        prev = cfg.branch_width
    conv("wf.pool", cfg.branch_width, cfg.fused_width)
    conv("wf.out", cfg.waterfall_width, 5 * cfg.branch_width)
    conv("llf.proj", cfg.waterfall_width, cfg.low_level_width)
    conv("llf.mid", cfg.waterfall_width, cfg.waterfall_width)
    conv("llf.out", cfg.head_width, cfg.waterfall_width)

    f = cfg.head_width
    predictor("head.kp.taps", f)
    adaptive("head.kp.adapt", f, f)
    conv("head.kp.out", cfg.heatmap_channels, f)
    g = cfg.group_width
    conv("head.off.expand", cfg.offset_groups * g, f)
    for k in range(cfg.offset_groups):
        predictor(f"head.off.g{k}.taps", g)
        adaptive(f"head.off.g{k}.adapt", g, g)
        conv(f"head.off.g{k}.out", 2, g)
    return weights


# ---------------------------------------------------------------------------
# stage 1: pyramid fusion

def fuse_pyramid(p: FeaturePyramid):
    """Resize levels 1..3 to level-0 extents and concatenate in level order.

    Zero-width levels contribute no channels. Returns (g0, cache).
    """
    h, w = p.base_extents()
    parts = []
    widths = []
    for lv, f in enumerate(p.levels):
        widths.append(f.shape[1])
        if f.shape[1] == 0:
            continue
        parts.append(f if lv == 0 else T.bilinear_resize(f, h, w))
    g0 = T.concat_channels(parts)
    cache = {"widths": widths, "shapes": [f.shape for f in p.levels]}
    return g0, cache


def fuse_pyramid_backward(cache, gy):
    counts = [c for c in cache["widths"] if c > 0]
    slices = T.concat_channels_backward(counts, gy)
    grads = []
    it = iter(slices)
    for lv, shape in enumerate(cache["shapes"]):
        if shape[1] == 0:
            grads.append(np.zeros(shape, dtype=gy.dtype))
            continue
        g = next(it)
        grads.append(g if lv == 0 else T.bilinear_resize_backward(shape, g))
    return grads


# ---------------------------------------------------------------------------
# stage 2: waterfall cascade

def waterfall_forward(g0: np.ndarray, weights: dict, cfg: WaterfallConfig):
    """Cascade of dilated 3x3 convolutions plus a pooled branch.

    Each branch output feeds the next branch; the four branch outputs and the
    pooled branch are concatenated and a 1x1 brings the width to
    cfg.waterfall_width. Returns (f_waterfall, cache).
    """
    if g0.shape[1] != cfg.fused_width:
        raise T.ShapeError(
            f"fused input has {g0.shape[1]} channels, config says {cfg.fused_width}")
    h, w = g0.shape[2], g0.shape[3]
    cache = {"g0": g0, "branches": []}
    x = g0
    outs = []
    for i, d in enumerate(cfg.dilations):
        spec = T.ConvSpec(3, 3, pad_h=d, pad_w=d, dilation=d)
        pre = T.conv2d(x, weights[f"wf.branch{i}.w"], weights[f"wf.branch{i}.b"], spec)
        y = T.relu(pre)
        cache["branches"].append((x, pre, spec))
        outs.append(y)
        x = y
    pooled = T.global_avg_pool(g0)
    pool_pre = T.conv2d(pooled, weights["wf.pool.w"], weights["wf.pool.b"], S1)
    pool_map = T.bilinear_resize(pool_pre, h, w)
    cache["pool"] = (pooled, pool_pre.shape)
    cat = T.concat_channels(outs + [pool_map])
    out = T.conv2d(cat, weights["wf.out.w"], weights["wf.out.b"], S1)
    cache["cat"] = cat
    return out, cache


def waterfall_backward(cache, gy, weights, cfg: WaterfallConfig, grads: dict):
    cat = cache["cat"]
    gcat, gw, gb = T.conv2d_backward(cat, weights["wf.out.w"], S1, gy)
    grads["wf.out.w"] += gw
    grads["wf.out.b"] += gb
    parts = T.concat_channels_backward([cfg.branch_width] * 5, gcat)
    g_branch_out = parts[:4]
    g_pool_map = parts[4]

    pooled, pool_pre_shape = cache["pool"]
    g_pool_pre = T.bilinear_resize_backward(pool_pre_shape, g_pool_map)
    g_pooled, gw, gb = T.conv2d_backward(pooled, weights["wf.pool.w"], S1, g_pool_pre)
    grads["wf.pool.w"] += gw
    grads["wf.pool.b"] += gb
    g_g0 = T.global_avg_pool_backward(cache["g0"].shape, g_pooled)

    g_next = None
    for i in reversed(range(4)):
        x, pre, spec = cache["branches"][i]
        g_out = g_branch_out[i] if g_next is None else g_branch_out[i] + g_next
        gpre = T.relu_backward(pre, g_out)
        gx, gw, gb = T.conv2d_backward(x, weights[f"wf.branch{i}.w"], spec, gpre)
        grads[f"wf.branch{i}.w"] += gw
        grads[f"wf.branch{i}.b"] += gb
        g_next = gx
    return g_g0 + g_next


# ---------------------------------------------------------------------------
# stage 3: low-level fusion and reduction

def fuse_low_level(low_level: np.ndarray, f_waterfall: np.ndarray,
                   weights: dict, cfg: WaterfallConfig):
    """Project the low-level map to the waterfall width, add, then two 1x1
    stages, the last reducing to cfg.head_width. Returns (f_maps, cache)."""
    if low_level.shape[2:] != f_waterfall.shape[2:]:
        raise T.ShapeError(
            f"low-level extents {low_level.shape[2:]} do not match waterfall "
            f"extents {f_waterfall.shape[2:]}")
    proj = T.conv2d(low_level, weights["llf.proj.w"], weights["llf.proj.b"], S1)
    s = proj + f_waterfall
    mid = T.conv2d(s, weights["llf.mid.w"], weights["llf.mid.b"], S1)
    out = T.conv2d(mid, weights["llf.out.w"], weights["llf.out.b"], S1)
    cache = {"low_level": low_level, "s": s, "mid": mid}
    return out, cache


def fuse_low_level_backward(cache, gy, weights, grads: dict):
    gmid, gw, gb = T.conv2d_backward(cache["mid"], weights["llf.out.w"], S1, gy)
    grads["llf.out.w"] += gw
    grads["llf.out.b"] += gb
    gs, gw, gb = T.conv2d_backward(cache["s"], weights["llf.mid.w"], S1, gmid)
    grads["llf.mid.w"] += gw
    grads["llf.mid.b"] += gb
    g_low, gw, gb = T.conv2d_backward(cache["low_level"], weights["llf.proj.w"], S1, gs)
    grads["llf.proj.w"] += gw
    grads["llf.proj.b"] += gb
    return g_low, gs  # gs is also the gradient on f_waterfall


# ---------------------------------------------------------------------------
# adaptive convolution

def affine_to_offsets(params: np.ndarray) -> np.ndarray:
    """Expand per-pixel affine parameters (N,6,h,w) into tap displacements.

    params channels are (a_rr, a_rc, a_cr, a_cc, t_r, t_c); tap i of the
    canonical grid p_i maps to A @ p_i + t. Output is (N,18,h,w) with channel
    2i the row displacement of tap i and 2i+1 the column displacement.
    """
    n, c, h, w = params.shape
    if c != 6:
        raise T.ShapeError(f"affine parameters need 6 channels, got {c}")
    a_rr, a_rc, a_cr, a_cc, t_r, t_c = (params[:, i] for i in range(6))
    out = np.empty((n, 18, h, w), dtype=params.dtype)
    for i, (pr, pc) in enumerate(TAP_GRID):
        out[:, 2 * i] = a_rr * pr + a_rc * pc + t_r
        out[:, 2 * i + 1] = a_cr * pr + a_cc * pc + t_c
    return out


def affine_to_offsets_backward(g_offsets: np.ndarray) -> np.ndarray:
    n, c, h, w = g_offsets.shape
    g = np.zeros((n, 6, h, w), dtype=g_offsets.dtype)
    for i, (pr, pc) in enumerate(TAP_GRID):
        gr = g_offsets[:, 2 * i]
        gc = g_offsets[:, 2 * i + 1]
        g[:, 0] += gr * pr
        g[:, 1] += gr * pc
        g[:, 2] += gc * pr
        g[:, 3] += gc * pc
        g[:, 4] += gr
        g[:, 5] += gc
    return g


def predict_offsets(features: np.ndarray, weights: dict, name: str):
    """1x1 predictor emitting 6 affine parameters per pixel, expanded to the
    18-channel tap displacement field. Returns (offsets, cache)."""
    params = T.conv2d(features, weights[name + ".w"], weights[name + ".b"], S1)
    return affine_to_offsets(params), {"features": features}


def predict_offsets_backward(cache, g_offsets, weights, name, grads: dict):
    g_params = affine_to_offsets_backward(g_offsets)
    gx, gw, gb = T.conv2d_backward(cache["features"], weights[name + ".w"], S1, g_params)
    grads[name + ".w"] += gw
    grads[name + ".b"] += gb
    return gx


def canonical_offsets(n: int, h: int, w: int, dtype=np.float32) -> np.ndarray:
    """Tap displacements that make adaptive_conv read the regular 3x3 grid."""
    out = np.empty((n, 18, h, w), dtype=dtype)
    for i, (pr, pc) in enumerate(TAP_GRID):
        out[:, 2 * i] = pr
        out[:, 2 * i + 1] = pc
    return out


def adaptive_conv(x: np.ndarray, w9: np.ndarray, offsets: np.ndarray):
    """3x3 convolution whose nine taps are displaced per pixel.

    y(c) = sum_i  w_i @ x(c + g_i(c)), with x read bilinearly and zero
    outside. w9 is (Cout, Cin, 3, 3); offsets is (N, 18, h, w) holding the
    per-tap (row, col) displacements. Returns (y, cache).
    """
    n, cin, h, w = x.shape
    if offsets.shape != (n, 18, h, w):
        raise T.ShapeError(
            f"offsets must be (N, 18, {h}, {w}), got {offsets.shape}")
    if w9.shape[1] != cin or w9.shape[2:] != (3, 3):
        raise T.ShapeError(f"tap weights {w9.shape} do not match input {x.shape}")
    base_r = np.arange(h, dtype=np.float64).reshape(1, 1, h, 1)
    base_c = np.arange(w, dtype=np.float64).reshape(1, 1, 1, w)
    rows = base_r + offsets[:, 0::2].astype(np.float64)   # (N, 9, h, w)
    cols = base_c + offsets[:, 1::2].astype(np.float64)
    sampled, scache = T._sample_planes(x, rows, cols)
    y = np.tensordot(w9.reshape(w9.shape[0], cin, 9), sampled,
                     axes=([1, 2], [1, 2])).transpose(1, 0, 2, 3)
    cache = {"x": x, "sampled": sampled, "scache": scache, "w9": w9}
    return np.ascontiguousarray(y), cache


def adaptive_conv_backward(cache, gy):
    """Gradients w.r.t. the input, the tap weights, and the offset field."""
    x = cache["x"]
    sampled = cache["sampled"]
    w9 = cache["w9"]
    cin = x.shape[1]
    w3 = w9.reshape(w9.shape[0], cin, 9)
    gw9 = np.einsum("nohw,ncthw->oct", gy, sampled).reshape(w9.shape)
    g_sampled = np.einsum("oct,nohw->ncthw", w3, gy)
    gx, grows, gcols = T._sample_planes_backward(x.shape, cache["scache"], g_sampled)
    n, _, h, w = x.shape
    g_off = np.empty((n, 18, h, w), dtype=gy.dtype)
    g_off[:, 0::2] = grows.astype(gy.dtype)
    g_off[:, 1::2] = gcols.astype(gy.dtype)
    return gx, gw9, g_off


# ---------------------------------------------------------------------------
# stage 4: heads

def heads_forward(f_maps: np.ndarray, weights: dict, cfg: WaterfallConfig):
    """Keypoint and offset heads over the fused feature map.

    Keypoint head: offset-predicted adaptive conv, ReLU, 1x1 to the score
    channels, sigmoid. Offset head: 1x1 expansion into per-keypoint groups,
    each with its own adaptive conv and 1x1 down to a (dx, dy) pair.
    Returns (PoseMaps, cache).
    """
    if f_maps.shape[1] != cfg.head_width:
        raise T.ShapeError(
            f"head input has {f_maps.shape[1]} channels, config says {cfg.head_width}")
    cache = {}

    kp_off, c1 = predict_offsets(f_maps, weights, "head.kp.taps")
    kp_ad, c2 = adaptive_conv(f_maps, weights["head.kp.adapt.w"], kp_off)
    kp_act = T.relu(kp_ad)
    kp_pre = T.conv2d(kp_act, weights["head.kp.out.w"], weights["head.kp.out.b"], S1)
    heat = T.sigmoid(kp_pre)
    cache["kp"] = (c1, c2, kp_ad, kp_act, heat)

    g = cfg.group_width
    expanded = T.conv2d(f_maps, weights["head.off.expand.w"],
                        weights["head.off.expand.b"], S1)
    cache["expanded"] = expanded
    cache["groups"] = []
    outs = []
    for k in range(cfg.offset_groups):
        feat = np.ascontiguousarray(expanded[:, k * g:(k + 1) * g])
        off, c3 = predict_offsets(feat, weights, f"head.off.g{k}.taps")
        ad, c4 = adaptive_conv(feat, weights[f"head.off.g{k}.adapt.w"], off)
        act = T.relu(ad)
        out = T.conv2d(act, weights[f"head.off.g{k}.out.w"],
                       weights[f"head.off.g{k}.out.b"], S1)
        cache["groups"].append((feat, c3, c4, ad, act))
        outs.append(out)
    offsets = T.concat_channels(outs)
    cache["f_maps"] = f_maps
    return PoseMaps(heat, offsets), cache


def heads_backward(cache, g_heat, g_offsets, weights, cfg: WaterfallConfig, grads):
    f_maps = cache["f_maps"]
    g = cfg.group_width

    c1, c2, kp_ad, kp_act, heat = cache["kp"]
    g_pre = T.sigmoid_backward(heat, g_heat)
    g_act, gw, gb = T.conv2d_backward(kp_act, weights["head.kp.out.w"], S1, g_pre)
    grads["head.kp.out.w"] += gw
    grads["head.kp.out.b"] += gb
    g_ad = T.relu_backward(kp_ad, g_act)
    gx, gw9, g_off = adaptive_conv_backward(c2, g_ad)
    grads["head.kp.adapt.w"] += gw9
    g_fmaps = gx + predict_offsets_backward(c1, g_off, weights, "head.kp.taps", grads)

    g_parts = T.concat_channels_backward([2] * cfg.offset_groups, g_offsets)
    g_expanded = np.zeros_like(cache["expanded"])
    for k in range(cfg.offset_groups):
        feat, c3, c4, ad, act = cache["groups"][k]
        g_out = g_parts[k]
        g_act, gw, gb = T.conv2d_backward(act, weights[f"head.off.g{k}.out.w"], S1, g_out)
        grads[f"head.off.g{k}.out.w"] += gw
        grads[f"head.off.g{k}.out.b"] += gb
        g_ad = T.relu_backward(ad, g_act)
        gx, gw9, g_off = adaptive_conv_backward(c4, g_ad)
        grads[f"head.off.g{k}.adapt.w"] += gw9
        g_feat = gx + predict_offsets_backward(c3, g_off, weights,
                                               f"head.off.g{k}.taps", grads)
        g_expanded[:, k * g:(k + 1) * g] += g_feat
    gx, gw, gb = T.conv2d_backward(f_maps, weights["head.off.expand.w"], S1, g_expanded)
    grads["head.off.expand.w"] += gw
    grads["head.off.expand.b"] += gb
    return g_fmaps + gx


# ---------------------------------------------------------------------------
# full module

def waterfall_module_forward(p: FeaturePyramid, weights: dict, cfg: WaterfallConfig):
    """fuse_pyramid -> waterfall -> low-level fusion -> heads."""
    g0, c_fuse = fuse_pyramid(p)
    f_wf, c_wf = waterfall_forward(g0, weights, cfg)
    f_maps, c_llf = fuse_low_level(p.low_level, f_wf, weights, cfg)
    maps, c_heads = heads_forward(f_maps, weights, cfg)
    cache = {"fuse": c_fuse, "wf": c_wf, "llf": c_llf, "heads": c_heads}
    return maps, cache


def waterfall_module_backward(cache, g_heat, g_offsets, weights,
                              cfg: WaterfallConfig, grads: dict):
    """Returns (per-level gradients, gradient on the low-level map)."""
    g_fmaps = heads_backward(cache["heads"], g_heat, g_offsets, weights, cfg, grads)
    g_low, g_wf = fuse_low_level_backward(cache["llf"], g_fmaps, weights, grads)
    g_g0 = waterfall_backward(cache["wf"], g_wf, weights, cfg, grads)
    g_levels = fuse_pyramid_backward(cache["fuse"], g_g0)
    return g_levels, g_low
