"""Decoding multi-person pose instances from network output maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .targets import Keypoint, PersonAnnotation
from .waterfall import PoseMaps


@dataclass
class PoseInstance:
    """Decoded person: K scored keypoints (x, y, score) and an instance score."""

    keypoints: list          # (x, y, score) triples
    score: float

    def bbox_area(self) -> float:
        xs = [p[0] for p in self.keypoints]
        ys = [p[1] for p in self.keypoints]
        return max(max(xs) - min(xs), 1.0) * max(max(ys) - min(ys), 1.0)


@dataclass(frozen=True)
class DecodeConfig:
    center_threshold: float = 0.1
    nms_window: int = 3
    max_instances: int = 30
    duplicate_oks: float = 0.9
    # per-keypoint falloffs for duplicate suppression; None means uniform 0.1
    falloffs: tuple | None = None

    def __post_init__(self):
        if not 0.0 <= self.center_threshold <= 1.0:
            raise ValueError("center threshold must lie in [0, 1]")
        if self.nms_window < 1 or self.nms_window % 2 == 0:
            raise ValueError("NMS window must be a positive odd extent")
        if self.max_instances < 1:
            raise ValueError("max_instances must be positive")
        if not 0.0 < self.duplicate_oks <= 1.0:
            raise ValueError("duplicate OKS threshold must lie in (0, 1]")


def nms_peaks(plane: np.ndarray, cfg: DecodeConfig):
    """Strict local maxima of a 2-d score plane.

    A pixel is a peak iff it strictly beats every other pixel of its window
    (a flat plateau has no peak) and its score reaches the center threshold.
    Returns (x, y, score) tuples sorted by descending score, equal scores
    ordered by smaller row then column, at most cfg.max_instances of them.
    """
    if plane.ndim != 2:
        raise T.ShapeError(f"expected a 2-d plane, got shape {plane.shape}")
    h, w = plane.shape
    r = cfg.nms_window // 2
    padded = np.full((h + 2 * r, w + 2 * r), -np.inf, dtype=np.float64)
    padded[r: r + h, r: r + w] = plane
    is_peak = plane >= cfg.center_threshold
    for dr in range(-r, r + 1):
        for dc in range(-r, r + 1):
            if dr == 0 and dc == 0:
                continue
            neigh = padded[r + dr: r + dr + h, r + dc: r + dc + w]
            is_peak &= plane > neigh
    ys, xs = np.nonzero(is_peak)
    peaks = sorted(((float(plane[y, x]), int(y), int(x)) for y, x in zip(ys, xs)),
                   key=lambda t: (-t[0], t[1], t[2]))
    return [(x, y, s) for s, y, x in peaks[: cfg.max_instances]]


def _pairwise_oks(a: PoseInstance, b: PoseInstance, falloffs) -> float:
    # b plays the reference role; scale from its keypoint bounding box
    s2 = b.bbox_area()
    total = 0.0
    for (ax, ay, _), (bx, by, _), kf in zip(a.keypoints, b.keypoints, falloffs):
        d2 = (ax - bx) ** 2 + (ay - by) ** 2
        total += float(np.exp(-d2 / (2.0 * s2 * kf * kf)))
    return total / len(a.keypoints)


def decode_poses(maps: PoseMaps, cfg: DecodeConfig):
    """Turn heatmaps and offsets into scored pose instances.

    For every center peak c, joint k sits at c + offsets(2k:2k+1, c), scored
    by sampling heatmap channel k there; the instance score is the center
    score times the mean joint score. Instances that duplicate a
    higher-scored one (pairwise OKS above cfg.duplicate_oks) are dropped.
    """
    heat = maps.heatmaps
    offs = maps.offsets
    if heat.shape[0] != 1 or offs.shape[0] != 1:
        raise T.ShapeError("decode_poses works on single-image maps")
    if offs.shape[1] % 2:
        raise T.ShapeError(f"offset field needs 2K channels, got {offs.shape[1]}")
    k = offs.shape[1] // 2
    if heat.shape[1] != k + 1:
        raise T.ShapeError(
            f"expected {k + 1} heatmap channels (K joints + center), got {heat.shape[1]}")

    candidates = []
    for cx, cy, cs in nms_peaks(heat[0, k].astype(np.float64), cfg):
        joints = []
        scores = []
        for j in range(k):
            x = cx + float(offs[0, 2 * j, cy, cx])
            y = cy + float(offs[0, 2 * j + 1, cy, cx])
            sc = float(T.bilinear_sample(heat[:, j: j + 1], np.array([[y, x]]))[0, 0, 0])
            joints.append((x, y, sc))
            scores.append(sc)
        candidates.append(PoseInstance(joints, cs * (sum(scores) / k)))

    candidates.sort(key=lambda inst: -inst.score)
    falloffs = cfg.falloffs if cfg.falloffs is not None else (0.1,) * k
    if len(falloffs) != k:
        raise ValueError(f"need {k} falloffs, got {len(falloffs)}")
    kept = []
    for cand in candidates:
        if all(_pairwise_oks(cand, prev, falloffs) <= cfg.duplicate_oks for prev in kept):
            kept.append(cand)
    return kept


def instance_to_annotation(inst: PoseInstance) -> PersonAnnotation:
    """View a decoded instance as an annotation (all keypoints labeled
    visible, area from the keypoint bounding box)."""
    kps = [Keypoint(x, y, 2) for x, y, _ in inst.keypoints]
    return PersonAnnotation(kps, inst.bbox_area())
