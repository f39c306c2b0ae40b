"""Structural and pixel-wise metrics for artery/vein masks.

Structure is read off a skeleton graph: one vertex per skeleton pixel, edges
between pixels that fall inside a small Chebyshev window. Branch points are
vertices of degree >= 3 and the loop count is the cycle rank
``|E| - |V| + components``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from skimage.morphology import skeletonize as _sk_skeletonize

from .synthvessel import AVMask

DEFAULT_WINDOW_RADIUS = 1
DEFAULT_EMPTY_THRESHOLD = 0.005

_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass
class VesselGraph:
    vertices: np.ndarray  # (V, 2) row, col
    edges: np.ndarray  # (E, 2) vertex indices, i < j
    window_radius: int

    @property
    def degree(self) -> np.ndarray:
        deg = np.zeros(len(self.vertices), dtype=np.int64)
        if len(self.edges):
            np.add.at(deg, self.edges.ravel(), 1)
        return deg

    def component_count(self) -> int:
        n = len(self.vertices)
        if n == 0:
            return 0
        e = self.edges
        adj = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])) if len(e) else ([], ([], [])), shape=(n, n))
        return int(connected_components(adj, directed=False)[0])

    def cycle_rank(self) -> int:
        return len(self.edges) - len(self.vertices) + self.component_count()


@dataclass
class ChannelReport:
    component_count: int
    branch_point_count: int
    trifurcation_count: int
    loop_count: int
    foreground_fraction: float


@dataclass
class StructReport:
    artery: ChannelReport
    vein: ChannelReport
    crossing_pixel_count: int
    foreground_fraction: float
    empty_flag: bool

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PixelMetrics:
    """Rates are None when their denominator is zero."""

    tp: int
    tn: int
    fp: int
    fn: int
    accuracy: float | None
    sensitivity: float | None
    specificity: float | None
    auc: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def skeletonize(channel) -> np.ndarray:
    """One-pixel-wide, topology-preserving skeleton of a binary image."""
    img = np.asarray(channel).astype(bool)
    if not img.any():
        return np.zeros(img.shape, np.uint8)
    return _sk_skeletonize(img).astype(np.uint8)


def build_vessel_graph(skeleton, window_radius: int = DEFAULT_WINDOW_RADIUS, prune_corners: bool = True) -> VesselGraph:
    """Window graph over skeleton pixels.

    With ``prune_corners`` a diagonal edge is dropped when the two pixels
    also share a 4-neighbour on the skeleton. Such corners otherwise form
    3-cycles at every staircase step and junction, inflating loop and branch
    counts. Connectivity is unaffected because the 2-step path remains.
    """
    if window_radius < 1:
        raise ValueError(f"window_radius must be >= 1, got {window_radius}")
    sk = np.asarray(skeleton).astype(bool)
    coords = np.argwhere(sk)
    index = -np.ones(sk.shape, dtype=np.int64)
    index[tuple(coords.T)] = np.arange(len(coords))
    h, w = sk.shape
    r = window_radius
    pairs = []
    for dy in range(0, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx <= 0:
                continue
            ys, xs = coords[:, 0] + dy, coords[:, 1] + dx
            ok = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
            src = np.flatnonzero(ok)
            dst = index[ys[ok], xs[ok]]
            hit = dst >= 0
            src, dst = src[hit], dst[hit]
            if prune_corners and abs(dx) == 1 and dy == 1:
                y0, x0 = coords[src, 0], coords[src, 1]
                corner = sk[y0, x0 + dx] | sk[y0 + 1, x0]
                src, dst = src[~corner], dst[~corner]
            pairs.append(np.stack([np.minimum(src, dst), np.maximum(src, dst)], axis=1))
    edges = np.concatenate(pairs) if pairs else np.zeros((0, 2), np.int64)
    return VesselGraph(coords, edges.astype(np.int64).reshape(-1, 2), window_radius)


def channel_report(channel, window_radius: int = DEFAULT_WINDOW_RADIUS) -> ChannelReport:
    ch = np.asarray(channel).astype(bool)
    g = build_vessel_graph(skeletonize(ch), window_radius)
    deg = g.degree
    return ChannelReport(
        component_count=g.component_count(),
        branch_point_count=int((deg >= 3).sum()),
        trifurcation_count=int((deg >= 4).sum()),
        loop_count=g.cycle_rank(),
        foreground_fraction=float(ch.mean()) if ch.size else 0.0,
    )


def struct_report(mask: AVMask, window_radius: int = DEFAULT_WINDOW_RADIUS,
                  empty_threshold: float = DEFAULT_EMPTY_THRESHOLD) -> StructReport:
    frac = mask.foreground_fraction
    return StructReport(
        artery=channel_report(mask.artery, window_radius),
        vein=channel_report(mask.vein, window_radius),
        crossing_pixel_count=int((mask.artery & mask.vein).sum()),
        foreground_fraction=frac,
        empty_flag=bool(frac < empty_threshold),
    )


def count_components(channel) -> int:
    """8-connected component count of a binary image."""
    return int(ndimage.label(np.asarray(channel).astype(bool), structure=_EIGHT)[1])


def count_holes(channel) -> int:
    """4-connected background components that do not touch the border."""
    bg = ~np.pad(np.asarray(channel).astype(bool), 1)
    return int(ndimage.label(bg)[1]) - 1


def pixel_metrics(pred, gt) -> PixelMetrics:
    pred, gt = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from ground truth {gt.shape}")
    tp = int((pred & gt).sum())
    tn = int((~pred & ~gt).sum())
    fp = int((pred & ~gt).sum())
    fn = int((~pred & gt).sum())

    def rate(num, den):
        return num / den if den else None

    return PixelMetrics(tp, tn, fp, fn, rate(tp + tn, tp + tn + fp + fn), rate(tp, tp + fn), rate(tn, tn + fp))


def auc(scores, labels) -> float:
    """ROC AUC via the Mann-Whitney rank statistic, ties counted as 1/2."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    pos = labels.astype(bool)
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative labels")
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(s.size, dtype=np.float64)
    # tied runs share the mean of their 1-based ranks
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    ends = np.r_[starts[1:], s.size]
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def empty_sample_rate(masks, threshold: float = DEFAULT_EMPTY_THRESHOLD) -> float:
    masks = list(masks)
    if not masks:
        raise ValueError("empty_sample_rate needs at least one mask")
    return sum(m.foreground_fraction < threshold for m in masks) / len(masks)
