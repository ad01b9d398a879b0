"""Proposal and detection metrics: tIoU, AR@AN, AUC, AP/mAP, and the
ground-truth oracle rescorings."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .inference import segment_iou

# tolerance on "tIoU >= threshold" so that e.g. 6/10 counts at threshold 0.6
IOU_EPS = 1e-9


class MetricError(ValueError):
    pass


def _grid(lo, hi, step):
    n = int(round((hi - lo) / step)) + 1
    return tuple(round(lo + i * step, 10) for i in range(n))


@dataclass(frozen=True)
class EvalConfig:
    iou_grid_proposals: tuple = field(default_factory=lambda: _grid(0.5, 1.0, 0.05))
    iou_grid_map: tuple = field(default_factory=lambda: _grid(0.5, 0.95, 0.05))
    an_values: tuple = (10, 50, 100, 200)
    map_ious: tuple = (0.3, 0.4, 0.5, 0.6, 0.7)

    def __post_init__(self):
        for name in ("iou_grid_proposals", "iou_grid_map", "map_ious"):
            grid = tuple(float(x) for x in getattr(self, name))
            object.__setattr__(self, name, grid)
            if not grid or any(not 0 < x <= 1 for x in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
                raise ValueError(f"{name} must be strictly increasing within (0, 1]")
        ans = tuple(int(a) for a in self.an_values)
        object.__setattr__(self, "an_values", ans)
        if not ans or ans[0] < 1 or any(b <= a for a, b in zip(ans, ans[1:])):
            raise ValueError("an_values must be strictly increasing positive integers")

    def to_dict(self):
        return {k: list(getattr(self, k)) for k in ("iou_grid_proposals", "iou_grid_map", "an_values", "map_ious")}


def tiou(a, b) -> float:
    """Intersection over union of two (start, end) segments on the real line.

    Zero-length segments overlap only with an identical segment.
    """
    return float(segment_iou(float(a[0]), float(a[1]), np.array([float(b[0])]), np.array([float(b[1])]))[0])


def _iou_matrix(props, gts):
    props = np.asarray(props, dtype=np.float64).reshape(-1, 2)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 2)
    if not len(props) or not len(gts):
        return np.zeros((len(props), len(gts)))
    return np.stack([segment_iou(s, e, gts[:, 0], gts[:, 1]) for s, e in props])


def _segments(proposals):
    return [(p.start, p.end) for p in proposals]


def recall_table(proposals_by_video, gt_by_video, an_values, iou_grid):
    """Pooled recall, shape (len(an_values), len(iou_grid)).

    Each video is cut to its top-AN proposals by score; a GT instance counts
    as recalled at a threshold if some kept proposal reaches it.
    """
    total = sum(len(g.instances) for g in gt_by_video.values())
    if total == 0:
        raise MetricError("no ground-truth instances: recall is undefined")
    an_values = [int(a) for a in an_values]
    thresholds = np.asarray(iou_grid, dtype=np.float64) - IOU_EPS
    hits = np.zeros((len(an_values), len(thresholds)))
    for vid, gt in gt_by_video.items():
        if not gt.instances:
            continue
        props = sorted(proposals_by_video.get(vid, []), key=lambda p: -p.score)
        if not props:
            continue
        # best tIoU per GT over the first k proposals, for every k
        running = np.maximum.accumulate(_iou_matrix(_segments(props), gt.segments()), axis=0)
        for a, an in enumerate(an_values):
            best = running[min(an, len(props)) - 1]
            hits[a] += (best[None, :] >= thresholds[:, None]).sum(axis=1)
    return hits / total


def average_recall(proposals_by_video, gt_by_video, an, iou_grid) -> float:
    return float(recall_table(proposals_by_video, gt_by_video, [an], iou_grid)[0].mean())


def ar_an_curve(proposals_by_video, gt_by_video, an_values, iou_grid):
    return [float(r) for r in recall_table(proposals_by_video, gt_by_video, an_values, iou_grid).mean(axis=1)]


def ar_an_auc(an_values, ar_values) -> float:
    """Trapezoidal area under AR(AN), divided by the AN span."""
    an = np.asarray(an_values, dtype=np.float64)
    ar = np.asarray(ar_values, dtype=np.float64)
    if len(an) == 1:
        return float(ar[0])
    if np.any(np.diff(an) <= 0):
        raise ValueError("AN values must be increasing")
    area = float(np.sum((ar[1:] + ar[:-1]) * np.diff(an) / 2.0))
    return area / float(an[-1] - an[0])


def average_precision(hits, n_gt) -> float:
    """All-points interpolated AP from rank-ordered hit indicators.

    Sum over ranks of (recall step) x (best precision at this rank or later).
    """
    hits = np.asarray(hits, dtype=np.float64)
    if n_gt == 0 or not len(hits):
        return 0.0
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * envelope))


def match_detections(detections, gt_segments_by_video, iou_threshold):
    """Greedy matching of score-ranked detections to same-video GT.

    ``detections``: list of (video_id, start, end, score). Each detection, in
    descending score order (stable), takes the unmatched GT with the highest
    tIoU if that tIoU reaches the threshold. Returns the hit indicator in
    rank order.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i][3])
    used = {vid: np.zeros(len(segs), dtype=bool) for vid, segs in gt_segments_by_video.items()}
    hits = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        vid, s, e, _ = detections[i]
        segs = gt_segments_by_video.get(vid)
        if segs is None or not len(segs):
            continue
        iou = segment_iou(s, e, segs[:, 0], segs[:, 1])
        iou = np.where(used[vid], -1.0, iou)
        j = int(np.argmax(iou))
        if iou[j] >= iou_threshold - IOU_EPS:
            used[vid][j] = True
            hits[rank] = True
    return hits


def mean_average_precision(proposals_by_video, gt_by_video, iou_threshold, num_classes=None):
    """Per-class all-points AP and their mean over classes that occur in GT.

    Unlabeled proposals never match. Classes seen only in detections get AP 0
    and are left out of the mean.
    """
    gt_classes = sorted({i.label for g in gt_by_video.values() for i in g.instances})
    det_classes = sorted({p.label for ps in proposals_by_video.values() for p in ps if p.label is not None})
    per_class = {}
    for c in sorted(set(gt_classes) | set(det_classes)):
        gts = {
            vid: np.array([(i.start, i.end) for i in g.instances if i.label == c], dtype=np.float64).reshape(-1, 2)
            for vid, g in gt_by_video.items()
        }
        n_gt = sum(len(s) for s in gts.values())
        dets = [(vid, p.start, p.end, p.score) for vid, ps in proposals_by_video.items() for p in ps if p.label == c]
        per_class[c] = average_precision(match_detections(dets, gts, iou_threshold), n_gt) if n_gt else 0.0
    m = float(np.mean([per_class[c] for c in gt_classes])) if gt_classes else 0.0
    return per_class, m


def oracle_rank(proposals, gt) -> list:
    """Replace every score with the proposal's best tIoU against the video's GT."""
    if not proposals:
        return []
    best = _iou_matrix(_segments(proposals), gt.segments())
    best = best.max(axis=1) if best.shape[1] else np.zeros(len(proposals))
    out = [replace(p, score=float(b)) for p, b in zip(proposals, best)]
    out.sort(key=lambda p: -p.score)
    return out


def oracle_cls(proposals, gt) -> list:
    """Give each proposal the class of its highest-tIoU GT instance (ties to the
    earliest-starting instance); proposals overlapping nothing lose their label."""
    insts = sorted(gt.instances, key=lambda i: (i.start, i.end))
    if not proposals:
        return []
    segs = np.array([(i.start, i.end) for i in insts], dtype=np.float64).reshape(-1, 2)
    iou = _iou_matrix(_segments(proposals), segs)
    out = []
    for p, row in zip(proposals, iou):
        if not len(row) or row.max() <= 0:
            out.append(replace(p, label=None))
        else:
            out.append(replace(p, label=insts[int(np.argmax(row))].label))
    return out


ORACLE_MODES = ("none", "rank", "cls", "both")


def apply_oracle(proposals_by_video, gt_by_video, mode):
    if mode not in ORACLE_MODES:
        raise ValueError(f"unknown oracle mode {mode!r}")
    out = {}
    for vid, props in proposals_by_video.items():
        gt = gt_by_video.get(vid)
        if gt is None:
            out[vid] = list(props)
            continue
        if mode in ("cls", "both"):
            props = oracle_cls(props, gt)
        if mode in ("rank", "both"):
            props = oracle_rank(props, gt)
        out[vid] = list(props)
    return out


def evaluate(proposals_by_video, gt_by_video, cfg: EvalConfig | None = None, oracle="none", curve_max=None):
    """Full metrics report as a plain dict (JSON-ready)."""
    cfg = cfg or EvalConfig()
    props = apply_oracle(proposals_by_video, gt_by_video, oracle)
    ar = dict(zip(cfg.an_values, ar_an_curve(props, gt_by_video, cfg.an_values, cfg.iou_grid_proposals)))
    curve_max = curve_max or cfg.an_values[-1]
    curve_an = list(range(1, curve_max + 1))
    curve = ar_an_curve(props, gt_by_video, curve_an, cfg.iou_grid_proposals)
    map_at = {}
    for thr in cfg.map_ious:
        _, m = mean_average_precision(props, gt_by_video, thr)
        map_at[thr] = m
    avg_map = float(np.mean([mean_average_precision(props, gt_by_video, thr)[1] for thr in cfg.iou_grid_map]))
    return {
        "oracle": oracle,
        "num_videos": len(gt_by_video),
        "num_gt": sum(len(g.instances) for g in gt_by_video.values()),
        "num_proposals": sum(len(p) for p in props.values()),
        "ar_at_an": {str(k): v for k, v in ar.items()},
        "auc": ar_an_auc(curve_an, curve),
        "map_at_iou": {f"{k:.2f}": v for k, v in map_at.items()},
        "average_map": avg_map,
        "curve": {"an": curve_an, "ar": curve},
    }
