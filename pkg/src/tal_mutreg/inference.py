"""Bottom-up proposal generation from per-frame phase probabilities."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import model as M
from .formats import Proposal


@dataclass(frozen=True)
class InferenceConfig:
    sigma: float = 0.5
    score_floor: float = 1e-3
    top_k: int = 200
    decay: str = "gaussian"
    linear_threshold: float = 0.5
    rise_rule: bool = False
    refine: bool = True
    refine_before_score: bool = False
    max_duration: int | None = None

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.decay not in ("gaussian", "linear"):
            raise ValueError(f"decay must be 'gaussian' or 'linear', got {self.decay!r}")
        if self.score_floor < 0:
            raise ValueError("score_floor must be >= 0")
        if self.max_duration is not None and self.max_duration < 1:
            raise ValueError("max_duration must be >= 1")

    def to_dict(self):
        return asdict(self)


def select_candidates(p, rise_rule=False) -> np.ndarray:
    """Frames whose probability is above the mid-range, or that sit at a peak.

    A peak is a strict local maximum p[t-1] < p[t] > p[t+1] for interior t.
    With ``rise_rule`` the second rule is read literally as
    p[t-1] < p[t] < p[t+1] instead.
    """
    p = np.asarray(p, dtype=np.float64)
    chosen = p > 0.5 * (p.max() + p.min())
    if len(p) >= 3:
        left, mid, right = p[:-2], p[1:-1], p[2:]
        second = (left < mid) & (mid < right) if rise_rule else (left < mid) & (mid > right)
        chosen[1:-1] |= second
    return np.flatnonzero(chosen)


def generate_proposals(starts, ends, max_duration) -> list[tuple[int, int]]:
    """All (s, e) with s < e and e - s <= max_duration, ordered by s then e."""
    ends = np.asarray(ends)
    out = []
    for s in starts:
        for e in ends[(ends > s) & (ends - s <= max_duration)]:
            out.append((int(s), int(e)))
    return out


def score_proposals(pairs, p_s, p_e) -> list[Proposal]:
    return [Proposal(float(s), float(e), float(p_s[int(s)] * p_e[int(e)])) for s, e in pairs]


def refine_boundaries(proposals, o_s, o_e, length=None) -> list[Proposal]:
    """Shift each boundary by the offset predicted at it; keep the original
    boundaries when the shifted segment would be empty or inverted."""
    T = len(o_s) if length is None else length
    out = []
    for p in proposals:
        s = min(max(p.start + o_s[int(p.start)], 0.0), T)
        e = min(max(p.end + o_e[int(p.end)], 0.0), T)
        out.append(replace(p, start=float(s), end=float(e)) if s < e else p)
    return out


def segment_iou(start, end, starts, ends):
    """tIoU of one segment against arrays of segments on the real line."""
    inter = np.clip(np.minimum(end, ends) - np.maximum(start, starts), 0.0, None)
    union = (end - start) + (ends - starts) - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    identical = (starts == start) & (ends == end)
    return np.where(identical, 1.0, iou)


def soft_nms(proposals, sigma=0.5, score_floor=1e-3, top_k=200, decay="gaussian", linear_threshold=0.5):
    """Soft-NMS: repeatedly take the best remaining proposal and decay the rest.

    Gaussian decay multiplies by exp(-iou^2 / sigma); linear decay by
    (1 - iou) when iou >= ``linear_threshold``. Remaining proposals that fall
    below ``score_floor`` are dropped. Ties go to the earlier proposal.
    """
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    if not proposals:
        return []
    starts = np.array([p.start for p in proposals])
    ends = np.array([p.end for p in proposals])
    scores = np.array([p.score for p in proposals], dtype=np.float64)
    alive = scores >= score_floor
    kept = []
    while len(kept) < top_k and alive.any():
        i = int(np.argmax(np.where(alive, scores, -np.inf)))
        kept.append(replace(proposals[i], score=float(scores[i])))
        alive[i] = False
        rest = np.flatnonzero(alive)
        if not len(rest):
            break
        iou = segment_iou(starts[i], ends[i], starts[rest], ends[rest])
        if decay == "gaussian":
            scores[rest] *= np.exp(-(iou**2) / sigma)
        else:
            scores[rest] *= np.where(iou >= linear_threshold, 1.0 - iou, 1.0)
        alive[rest] = scores[rest] >= score_floor
    kept.sort(key=lambda p: -p.score)
    return kept


def propose(p_s, p_e, o_s, o_e, max_duration, cfg: InferenceConfig, length=None) -> list[Proposal]:
    """Candidates -> pairs -> scored (and refined) proposals for one window, before NMS."""
    p_s = np.asarray(p_s)
    p_e = np.asarray(p_e)
    T = len(p_s) if length is None else length
    pairs = generate_proposals(select_candidates(p_s, cfg.rise_rule), select_candidates(p_e, cfg.rise_rule), max_duration)
    if not cfg.refine:
        return score_proposals(pairs, p_s, p_e)
    if not cfg.refine_before_score:
        return refine_boundaries(score_proposals(pairs, p_s, p_e), o_s, o_e, T)
    last = len(p_s) - 1
    refined = refine_boundaries([Proposal(float(s), float(e), 0.0) for s, e in pairs], o_s, o_e, T)
    return [
        replace(
            r,
            score=float(p_s[min(int(np.floor(r.start + 0.5)), last)] * p_e[min(int(np.floor(r.end + 0.5)), last)]),
        )
        for r in refined
    ]


def assign_classes(proposals, features, centroids) -> list[Proposal]:
    """Label each proposal with the class whose centroid is nearest the mean
    feature vector over the proposal's frames."""
    if centroids is None or len(centroids) == 0:
        return list(proposals)
    centroids = np.asarray(centroids)
    T = len(features)
    out = []
    for p in proposals:
        lo = min(max(int(np.floor(p.start)), 0), T - 1)
        hi = min(max(int(np.ceil(p.end)), lo), T - 1)
        mean = features[lo : hi + 1].mean(axis=0)
        label = int(np.argmin(((centroids - mean) ** 2).sum(axis=1)))
        out.append(replace(p, label=label))
    return out


def propose_video(features, params, net: M.NetworkConfig, cfg: InferenceConfig, max_duration, centroids=None):
    """Whole-video proposals: run the network on consecutive windows, shift each
    window's proposals by its offset, concatenate, Soft-NMS, then classify."""
    features = np.asarray(features, dtype=np.float64)
    T, C = features.shape
    L = net.window_length
    collected = []
    for lo in range(0, max(T, 1), L):
        chunk = np.zeros((L, C))
        part = features[lo : lo + L]
        chunk[: len(part)] = part
        valid = len(part)
        out = M.forward(params, chunk, net)
        cut = [a.data[:valid] for a in (out.p_s, out.p_e, out.o_s, out.o_e)]
        for p in propose(*cut, max_duration, cfg, valid):
            collected.append(replace(p, start=p.start + lo, end=p.end + lo))
    return finish_video(collected, features, cfg, centroids)


def finish_video(proposals, features, cfg: InferenceConfig, centroids=None):
    kept = soft_nms(proposals, cfg.sigma, cfg.score_floor, cfg.top_k, cfg.decay, cfg.linear_threshold)
    if centroids is not None:
        kept = assign_classes(kept, features, centroids)
    return kept
