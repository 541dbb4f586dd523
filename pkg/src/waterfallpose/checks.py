"""Runtime self-verification: the gradient suite and the module oracle suite
behind the gradcheck and selftest commands.

Everything runs at toy widths in 64-bit and returns (name, passed, detail)
triples so the CLI can print one line per check.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from . import waterfall as W
from .backbone import PyramidConfig
from .decode import DecodeConfig, decode_poses
from .metrics import OksParams, oks, evaluate, DEFAULT_THRESHOLDS
from .model import init_model_weights, model_forward, model_backward
from .targets import Keypoint, PersonAnnotation, render_keypoint_heatmaps, \
    render_offset_targets
from .train import TrainConfig, lr_at_epoch, heatmap_loss, offset_loss, total_loss
from .waterfall import WaterfallConfig, PoseMaps

GRAD_TOL = 1e-6


def _toy_model(seed=0, dtype=np.float64):
    pyr = PyramidConfig(widths=(2, 3, 2, 2), stem_width=2)
    wf = WaterfallConfig(level_widths=(2, 3, 2, 2), low_level_width=2,
                         branch_width=2, out_width=3, final_width=2,
                         keypoints=2, group_width=2)
    weights = init_model_weights(pyr, wf, seed=seed, dtype=dtype,
                                 offset_init="random")
    rng = np.random.default_rng(seed + 1)
    for name in weights:  # keep ReLU pre-activations off the exact kink
        if name.endswith(".b") and "taps" not in name:
            weights[name] = rng.standard_normal(weights[name].shape) * 0.1
    return pyr, wf, weights


def _naive_conv(x, w, b, spec):
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    oh, ow = spec.out_extent(h, 0), spec.out_extent(wd, 1)
    y = np.zeros((n, cout, oh, ow))
    for bi in range(n):
        for oc in range(cout):
            for oi in range(oh):
                for oj in range(ow):
                    acc = 0.0
                    for ic in range(cin):
                        for ki in range(spec.kh):
                            for kj in range(spec.kw):
                                ri = oi * spec.stride - spec.pad_h + ki * spec.dilation
                                cj = oj * spec.stride - spec.pad_w + kj * spec.dilation
                                if 0 <= ri < h and 0 <= cj < wd:
                                    acc += float(x[bi, ic, ri, cj] * w[oc, ic, ki, kj])
                    y[bi, oc, oi, oj] = acc + float(b[oc])
    return y


def _grad_vs_numeric(analytic, f, x, h=1e-6):
    num = T.numeric_gradient(f, x.reshape(1, 1, 1, -1) if x.ndim != 4 else x, h=h)
    return T.relative_error(analytic, num.reshape(analytic.shape))


def gradient_checks():
    """Per-layer and full-model analytic-vs-numeric gradient checks."""
    rng = np.random.default_rng(42)
    results = []

    def record(name, err):
        results.append((name, err <= GRAD_TOL, f"rel err {err:.2e}"))

    # conv2d
    spec = T.ConvSpec(3, 3, stride=2, pad_h=2, pad_w=2, dilation=2)
    x = rng.standard_normal((1, 2, 7, 7))
    w = rng.standard_normal((2, 2, 3, 3))
    b = rng.standard_normal(2)
    gy = rng.standard_normal(T.conv2d(x, w, b, spec).shape)
    gx, gw, gb = T.conv2d_backward(x, w, spec, gy)
    record("conv2d/input", _grad_vs_numeric(
        gx, lambda v: float((T.conv2d(v, w, b, spec) * gy).sum()), x))
    record("conv2d/weight", _grad_vs_numeric(
        gw, lambda v: float((T.conv2d(x, v.reshape(w.shape), b, spec) * gy).sum()), w))

    # pooling
    gp = rng.standard_normal((1, 2, 1, 1))
    record("global_avg_pool", _grad_vs_numeric(
        T.global_avg_pool_backward(x.shape, gp),
        lambda v: float((T.global_avg_pool(v) * gp).sum()), x))

    # resize
    gr = rng.standard_normal((1, 2, 5, 9))
    record("bilinear_resize", _grad_vs_numeric(
        T.bilinear_resize_backward(x.shape, gr),
        lambda v: float((T.bilinear_resize(v, 5, 9) * gr).sum()), x))

    # point sampling
    pts = rng.uniform(0.3, 5.7, size=(4, 2))
    gs = rng.standard_normal((1, 2, 4))
    gx, gpts = T.bilinear_sample_backward(x, pts, gs)
    record("bilinear_sample/input", _grad_vs_numeric(
        gx, lambda v: float((T.bilinear_sample(v, pts) * gs).sum()), x))
    record("bilinear_sample/points", _grad_vs_numeric(
        gpts, lambda v: float((T.bilinear_sample(x, v.reshape(4, 2)) * gs).sum()),
        pts))

    # adaptive conv
    xa = rng.standard_normal((1, 2, 5, 5))
    w9 = rng.standard_normal((2, 2, 3, 3))
    off = W.canonical_offsets(1, 5, 5, dtype=np.float64)
    off += rng.uniform(0.1, 0.4, size=off.shape)
    ga = rng.standard_normal((1, 2, 5, 5))
    _, cache = W.adaptive_conv(xa, w9, off)
    gxa, gw9, goff = W.adaptive_conv_backward(cache, ga)
    record("adaptive_conv/input", _grad_vs_numeric(
        gxa, lambda v: float((W.adaptive_conv(v, w9, off)[0] * ga).sum()), xa))
    record("adaptive_conv/weights", _grad_vs_numeric(
        gw9, lambda v: float((W.adaptive_conv(xa, v.reshape(w9.shape), off)[0]
                              * ga).sum()), w9))
    record("adaptive_conv/offsets", _grad_vs_numeric(
        goff, lambda v: float((W.adaptive_conv(xa, w9, v)[0] * ga).sum()), off))

    # heads
    pyr, wf, weights = _toy_model()
    fm = rng.standard_normal((1, wf.head_width, 8, 8))
    gh = rng.standard_normal((1, wf.heatmap_channels, 8, 8))
    go = rng.standard_normal((1, wf.offset_channels, 8, 8))
    maps, hcache = W.heads_forward(fm, weights, wf)
    grads = {k: np.zeros_like(v) for k, v in weights.items()}
    g_fm = W.heads_backward(hcache, gh, go, weights, wf, grads)

    def head_loss(v):
        m, _ = W.heads_forward(v, weights, wf)
        return float((m.heatmaps * gh).sum() + (m.offsets * go).sum())

    record("heads/input", _grad_vs_numeric(g_fm, head_loss, fm))
    for name in ("head.kp.adapt.w", "head.off.g0.taps.w"):
        def f(v, name=name):
            trial = dict(weights)
            trial[name] = v.reshape(weights[name].shape)
            m, _ = W.heads_forward(fm, trial, wf)
            return float((m.heatmaps * gh).sum() + (m.offsets * go).sum())
        record("heads/" + name, _grad_vs_numeric(grads[name], f, weights[name]))

    # losses
    pred = rng.uniform(0.1, 0.9, size=(1, 3, 6, 6))
    target = rng.uniform(0, 1, size=(1, 3, 6, 6))
    _, ghm = heatmap_loss(pred, target)
    record("heatmap_loss", _grad_vs_numeric(
        ghm, lambda v: heatmap_loss(v, target)[0], pred))
    offp = rng.standard_normal((1, 4, 6, 6)) * 2
    offt = rng.standard_normal((1, 4, 6, 6))
    mask = (rng.uniform(size=offp.shape) < 0.5).astype(np.float64)
    scale = rng.uniform(0.5, 3.0, size=(1, 1, 6, 6))
    e = np.abs((offp - offt) / scale)
    offp += ((e > 0.98) & (e < 1.02)) * 0.1
    _, gol = offset_loss(offp, offt, mask, scale)
    record("offset_loss", _grad_vs_numeric(
        gol, lambda v: offset_loss(v, offt, mask, scale)[0], offp))

    # full model through the losses, sampled parameter coordinates
    img = rng.uniform(0, 1, size=(1, 3, 32, 32))
    anns = [PersonAnnotation([Keypoint(3.2, 4.1, 2), Keypoint(5.5, 2.2, 2)],
                             area=16.0)]
    heat_t = render_keypoint_heatmaps(anns, 2, 8, 8).astype(np.float64)
    off_t, off_m, off_s = (a.astype(np.float64)
                           for a in render_offset_targets(anns, 2, 8, 8))
    tcfg = TrainConfig()

    def model_loss(wset):
        m, _ = model_forward(img, wset, pyr, wf)
        return total_loss(m, heat_t, off_t, off_m, off_s, tcfg)[0]

    maps, cache = model_forward(img, weights, pyr, wf)
    _, _, _, gh, go = total_loss(maps, heat_t, off_t, off_m, off_s, tcfg)
    grads, _ = model_backward(cache, gh, go, weights, pyr, wf)
    check_rng = np.random.default_rng(7)
    worst = 0.0
    for name in sorted(weights):
        flat = weights[name].reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > 6:
            coords = check_rng.choice(flat.size, size=6, replace=False)
        for j in coords:
            orig = flat[j]
            h = 1e-6
            flat[j] = orig + h
            fp = model_loss(weights)
            flat[j] = orig - h
            fm_ = model_loss(weights)
            flat[j] = orig
            num = (fp - fm_) / (2 * h)
            ana = grads[name].reshape(-1)[j]
            denom = max(abs(num), abs(ana), 1e-3)
            worst = max(worst, abs(num - ana) / denom)
    results.append(("full_model/sampled_params", worst <= GRAD_TOL,
                    f"worst rel err {worst:.2e}"))
    return results


def selftest_checks():
    """Condensed module oracle suite."""
    rng = np.random.default_rng(11)
    results = []

    def record(name, ok, detail=""):
        results.append((name, bool(ok), detail))

    # convolution vs naive oracle
    worst = 0.0
    for dilation in (1, 2, 6):
        spec = T.ConvSpec(3, 3, pad_h=dilation, pad_w=dilation, dilation=dilation)
        x = rng.standard_normal((1, 3, 9, 9)).astype(np.float32)
        w = rng.standard_normal((2, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(2).astype(np.float32)
        worst = max(worst, T.relative_error(
            T.conv2d(x, w, b, spec), _naive_conv(x, w, b, spec)))
    record("conv_oracle", worst <= 1e-5, f"max rel err {worst:.2e}")

    # adaptive conv degeneracy
    x = rng.standard_normal((1, 3, 7, 7)).astype(np.float32)
    w9 = rng.standard_normal((2, 3, 3, 3)).astype(np.float32)
    y, _ = W.adaptive_conv(x, w9, W.canonical_offsets(1, 7, 7))
    ref = T.conv2d(x, w9, np.zeros(2, dtype=np.float32),
                   T.ConvSpec(3, 3, pad_h=1, pad_w=1))
    err = T.relative_error(y, ref)
    record("adaptive_conv_degeneracy", err <= 1e-6, f"rel err {err:.2e}")

    # render -> decode round trip
    k = 3
    ok_all = True
    params = OksParams.uniform(k)
    dcfg = DecodeConfig(falloffs=params.falloffs)
    for _ in range(10):
        anns = _random_scene(rng, k)
        heat = render_keypoint_heatmaps(anns, k, 64, 64)
        offs, _, _ = render_offset_targets(anns, k, 64, 64)
        poses = decode_poses(PoseMaps(heat, offs), dcfg)
        ok_all &= len(poses) == len(anns)
        for ann in anns:
            ok_all &= max(oks(p, ann, params) for p in poses) >= 0.99
    record("render_decode_round_trip", ok_all)

    # evaluator vs brute force
    ok_eval = True
    for _ in range(40):
        preds, gts, params2 = _random_eval_scene(rng)
        res = evaluate(preds, gts, params2)
        ap_ref, ar_ref = _bruteforce_eval(preds, gts, params2)
        ok_eval &= (res.ap == ap_ref and res.ar == ar_ref)
    record("evaluator_bruteforce_equivalence", ok_eval)

    # schedule
    cfg = TrainConfig()
    record("lr_schedule",
           lr_at_epoch(0, cfg) == 1e-3
           and abs(lr_at_epoch(95, cfg) - 1e-4) < 1e-12
           and abs(lr_at_epoch(125, cfg) - 1e-5) < 1e-12)

    # determinism of a tiny training run
    from .model import init_model_weights as imw
    from .train import train_loop
    from .dataio import save_checkpoint
    pyr = PyramidConfig(widths=(2, 2, 2, 2), stem_width=2)
    wf = WaterfallConfig(level_widths=(2, 2, 2, 2), low_level_width=2,
                         branch_width=2, out_width=2, final_width=2,
                         keypoints=1, group_width=1)
    img = rng.uniform(0, 1, size=(1, 3, 32, 32)).astype(np.float32)
    samples = [(img, [PersonAnnotation([Keypoint(12.0, 14.0, 2)], area=36.0)])]
    tcfg = TrainConfig(epochs=2, seed=5)
    blobs = []
    for _ in range(2):
        w0 = imw(pyr, wf, seed=3)
        w1, state, _ = train_loop(samples, w0, pyr, wf, tcfg)
        blobs.append(save_checkpoint(w1, state, 2, "selftest"))
    record("training_determinism", blobs[0] == blobs[1])
    return results


def _random_scene(rng, k):
    anns = []
    centers = []
    n = int(rng.integers(1, 4))
    while len(anns) < n:
        cx = float(rng.uniform(10, 54))
        cy = float(rng.uniform(10, 54))
        if any((cx - a) ** 2 + (cy - b) ** 2 < 64 for a, b in centers):
            continue
        deltas = rng.uniform(-5, 5, size=(k, 2))
        deltas -= deltas.mean(axis=0)
        kps = [Keypoint(cx + float(dx), cy + float(dy), 2) for dx, dy in deltas]
        anns.append(PersonAnnotation(kps, area=120.0))
        centers.append((cx, cy))
    return anns


def _random_eval_scene(rng):
    from .decode import PoseInstance
    params = OksParams.uniform(2)
    preds, gts = {}, {}
    for img in range(2):
        gts[img] = []
        for _ in range(int(rng.integers(0, 5))):
            pts = rng.uniform(0, 40, size=(2, 2))
            gts[img].append(PersonAnnotation(
                [Keypoint(float(x), float(y), 2) for x, y in pts],
                area=float(rng.uniform(4, 120))))
        preds[img] = []
        for _ in range(int(rng.integers(0, 7))):
            pts = rng.uniform(0, 40, size=(2, 2)) + rng.standard_normal((2, 2)) * 3
            preds[img].append(PoseInstance(
                [(float(x), float(y), 1.0) for x, y in pts],
                float(rng.uniform(0, 1))))
    return preds, gts, params


def _bruteforce_eval(preds_by_image, gts_by_image, params):
    """Plain-loop reference: greedy matching and direct PR integration."""
    image_ids = sorted(set(gts_by_image) | set(preds_by_image))
    n_gt = sum(len([g for g in gts_by_image.get(i, []) if g.num_labeled()])
               for i in image_ids)
    if n_gt == 0:
        return 0.0, 0.0
    aps, ars = [], []
    for t in DEFAULT_THRESHOLDS:
        tagged = []
        for img in image_ids:
            gts = [g for g in gts_by_image.get(img, []) if g.num_labeled()]
            preds = sorted(preds_by_image.get(img, []), key=lambda p: -p.score)
            used = set()
            for rank, p in enumerate(preds):
                choices = [(oks(p, g, params), -gi) for gi, g in enumerate(gts)
                           if gi not in used]
                choices.sort(reverse=True)
                hit = bool(choices) and choices[0][0] >= t
                if hit:
                    used.add(-choices[0][1])
                tagged.append((-p.score, img, rank, hit))
        tagged.sort()
        tp = 0
        curve = []
        for rank, (_, _, _, hit) in enumerate(tagged, start=1):
            tp += 1 if hit else 0
            curve.append((tp / n_gt, tp / rank))
        total = 0.0
        for j in range(101):
            r = j / 100.0
            total += max((p for rec, p in curve if rec >= r), default=0.0)
        aps.append(total / 101)
        ars.append(tp / n_gt)
    return sum(aps) / len(aps), sum(ars) / len(ars)
