"""Frame-level phase labels and boundary-offset targets from action annotations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class Instance:
    start: int
    end: int
    label: int = 0

    @property
    def duration(self):
        return self.end - self.start


@dataclass
class AnnotationSet:
    video_length: int
    instances: list[Instance] = field(default_factory=list)

    def __post_init__(self):
        self.instances = [i if isinstance(i, Instance) else Instance(*i) for i in self.instances]
        for inst in self.instances:
            if not 0 <= inst.start < inst.end < self.video_length:
                raise AnnotationError(
                    f"instance ({inst.start}, {inst.end}) violates 0 <= start < end < {self.video_length}"
                )

    def segments(self):
        return np.array([(i.start, i.end) for i in self.instances], dtype=np.float64).reshape(-1, 2)


@dataclass
class PhaseLabels:
    g_c: np.ndarray
    g_s: np.ndarray
    g_e: np.ndarray


@dataclass
class OffsetTargets:
    o_s: np.ndarray
    o_e: np.ndarray
    mask_s: np.ndarray
    mask_e: np.ndarray


def round_half_up(x):
    return int(math.floor(x + 0.5))


def boundary_region(t, delta, T):
    """Closed frame interval [t - delta, t + delta], rounded and clipped; None if empty."""
    lo = max(round_half_up(t - delta), 0)
    hi = min(round_half_up(t + delta), T - 1)
    return (lo, hi) if lo <= hi else None


def _in_window(inst, T):
    return inst.end >= 0 and inst.start <= T - 1


def make_phase_labels(annotations: AnnotationSet, T: int) -> PhaseLabels:
    g_c = np.zeros(T)
    g_s = np.zeros(T)
    g_e = np.zeros(T)
    for inst in annotations.instances:
        if not _in_window(inst, T):
            continue
        delta = 0.1 * inst.duration
        g_c[max(inst.start, 0) : min(inst.end, T - 1) + 1] = 1.0
        for g, t in ((g_s, inst.start), (g_e, inst.end)):
            region = boundary_region(t, delta, T)
            if region is not None:
                g[region[0] : region[1] + 1] = 1.0
    return PhaseLabels(g_c, g_s, g_e)


def make_offset_targets(annotations: AnnotationSet, T: int) -> OffsetTargets:
    """Offsets (boundary - t) in frames over each boundary region.

    Where regions of several instances overlap, the nearest boundary wins;
    equal distances go to the instance listed first after sorting by start.
    """
    out = []
    for which in ("start", "end"):
        off = np.zeros(T)
        dist = np.full(T, np.inf)
        mask = np.zeros(T)
        for inst in sorted(annotations.instances, key=lambda i: (i.start, i.end)):
            if not _in_window(inst, T):
                continue
            b = getattr(inst, which)
            region = boundary_region(b, 0.1 * inst.duration, T)
            if region is None:
                continue
            t = np.arange(region[0], region[1] + 1)
            d = np.abs(b - t)
            closer = d < dist[t]
            off[t[closer]] = b - t[closer]
            dist[t[closer]] = d[closer]
            mask[t] = 1.0
        out.append((off, mask))
    (o_s, m_s), (o_e, m_e) = out
    return OffsetTargets(o_s, o_e, m_s, m_e)


def window_video(features, annotations: AnnotationSet, window_length: int, min_retained=0.5):
    """Split a video into non-overlapping windows of ``window_length`` frames.

    The last window is zero-padded. Instances cut by a window edge are kept
    only if at least ``min_retained`` of their frames fall inside it.
    Returns a list of (features, AnnotationSet, offset) with offset the
    window's first frame in video coordinates.
    """
    if window_length < 1:
        raise ValueError("window_length must be >= 1")
    features = np.asarray(features)
    T, C = features.shape
    n_windows = max(1, math.ceil(T / window_length))
    windows = []
    for w in range(n_windows):
        lo = w * window_length
        chunk = np.zeros((window_length, C), dtype=features.dtype)
        part = features[lo : lo + window_length]
        chunk[: len(part)] = part
        kept = []
        for inst in annotations.instances:
            s = max(inst.start, lo)
            e = min(inst.end, lo + window_length - 1)
            if e < s:
                continue
            if (e - s + 1) / (inst.end - inst.start + 1) < min_retained:
                continue
            if e - s < 1:
                continue
            kept.append(Instance(s - lo, e - lo, inst.label))
        windows.append((chunk, AnnotationSet(window_length, kept), lo))
    return windows
