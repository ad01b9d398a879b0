"""Mini-batch SGD with momentum over the total loss."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import model as M
from .labels import OffsetTargets, PhaseLabels, make_offset_targets, make_phase_labels, window_video


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr_early: float = 1e-3
    lr_late: float = 1e-4
    switch_epoch: int = 10
    momentum: float = 0.9
    batch_size: int = 8
    seed: int = 0
    loss_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    clip_grad_norm: float | None = None
    fast_intra: bool = True

    def __post_init__(self):
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_early < 0 or self.lr_late < 0:
            raise ValueError("learning rates must be >= 0")
        # epochs == 0 only writes the initial checkpoint, so the schedule is moot
        if self.switch_epoch < 0 or (self.epochs > 0 and self.switch_epoch > self.epochs):
            raise ValueError(f"switch_epoch {self.switch_epoch} must lie in [0, epochs={self.epochs}]")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if len(self.loss_weights) != 4 or any(w < 0 for w in self.loss_weights):
            raise ValueError("loss_weights must be 4 nonnegative reals")
        if self.clip_grad_norm is not None and self.clip_grad_norm <= 0:
            raise ValueError("clip_grad_norm must be positive")

    def lr_at(self, epoch):
        return self.lr_early if epoch < self.switch_epoch else self.lr_late

    def to_dict(self):
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d


@dataclass
class TrainWindow:
    features: np.ndarray
    labels: PhaseLabels
    targets: OffsetTargets


def make_windows(videos, window_length) -> list[TrainWindow]:
    """``videos``: iterable of (features, AnnotationSet)."""
    out = []
    for features, ann in videos:
        for chunk, wann, _ in window_video(features, ann, window_length):
            out.append(TrainWindow(chunk, make_phase_labels(wann, window_length), make_offset_targets(wann, window_length)))
    return out


@dataclass
class TrainResult:
    params: dict
    history: list = field(default_factory=list)
    velocity: dict = field(default_factory=dict)
    epoch: int = 0


def window_gradients(params, window, net: M.NetworkConfig, weights, fast_intra=True):
    """Forward + backward on one window with private leaves over shared data."""
    leaves = {k: ad.Tensor(v.data, requires_grad=True) for k, v in params.items()}
    out = M.forward(leaves, window.features, net)
    loss, report = L.total_loss(out, window.labels, window.targets, weights, fast_intra=fast_intra)
    _check_finite(report)
    ad.backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return grads, report


def _check_finite(report):
    bad = [k for k, v in report.to_dict().items() if not math.isfinite(v)]
    if bad:
        raise NumericalError(f"non-finite loss component(s): {', '.join(bad)}")


def sgd_momentum_step(params, grads, velocity, lr, momentum):
    """v <- momentum * v - lr * g;  p <- p + v  (in place)."""
    for k, p in params.items():
        v = momentum * velocity[k] - lr * grads[k]
        velocity[k] = v
        p.data = p.data + v


def train(
    params,
    windows,
    net: M.NetworkConfig,
    config: TrainConfig,
    start_epoch=0,
    velocity=None,
    on_step: Callable[[dict], None] | None = None,
    threads=1,
    on_epoch: Callable[[int, dict, dict], None] | None = None,
) -> TrainResult:
    """Run epochs ``start_epoch`` .. ``config.epochs - 1`` of the schedule.

    Resuming from a checkpoint taken after epoch k (with its velocity) and
    running to the same ``config.epochs`` reproduces an uninterrupted run.

    Window order is reshuffled every epoch from (config.seed, epoch). Batch
    gradients are the mean of per-window gradients, summed in window order
    whatever ``threads`` is.
    """
    if not windows:
        raise ValueError("empty training set")
    if not 0 <= start_epoch <= config.epochs:
        raise ValueError(f"start_epoch {start_epoch} outside the {config.epochs}-epoch schedule")
    for w in windows:
        if w.features.shape != (net.window_length, net.input_channels):
            raise ValueError(f"window of shape {w.features.shape} does not match {net}")
    params = {k: ad.Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()}
    if velocity is None:
        velocity = {k: np.zeros_like(v.data) for k, v in params.items()}
    else:
        velocity = {k: np.array(v, dtype=np.float64) for k, v in velocity.items()}
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    history = []
    steps_per_epoch = math.ceil(len(windows) / config.batch_size)
    step = start_epoch * steps_per_epoch
    try:
        for epoch in range(start_epoch, config.epochs):
            lr = config.lr_at(epoch)
            rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(epoch,)))
            order = rng.permutation(len(windows))
            reports = []
            for b in range(0, len(order), config.batch_size):
                batch = [windows[i] for i in order[b : b + config.batch_size]]

                def job(w):
                    return window_gradients(params, w, net, config.loss_weights, config.fast_intra)

                results = list(pool.map(job, batch)) if pool else [job(w) for w in batch]
                grads = {k: np.zeros_like(v.data) for k, v in params.items()}
                for g, _ in results:
                    for k in grads:
                        grads[k] += g[k]
                for k in grads:
                    grads[k] /= len(batch)
                if config.clip_grad_norm is not None:
                    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                    if norm > config.clip_grad_norm:
                        for k in grads:
                            grads[k] *= config.clip_grad_norm / norm
                sgd_momentum_step(params, grads, velocity, lr, config.momentum)
                batch_reports = [r for _, r in results]
                reports.extend(batch_reports)
                if on_step is not None:
                    on_step({"step": step, "epoch": epoch, "lr": lr, **L.LossReport.mean(batch_reports).to_dict()})
                step += 1
            history.append(L.LossReport.mean(reports))
            if on_epoch is not None:
                on_epoch(epoch + 1, params, velocity)
    finally:
        if pool:
            pool.shutdown()
    return TrainResult(params, history, velocity, config.epochs)


def dataset_stats(annotation_sets, features_list=None, num_classes=None):
    """Longest instance (frames) and, if features are given, per-class mean
    feature vectors over instance frames."""
    max_duration = 0
    for ann in annotation_sets:
        for inst in ann.instances:
            max_duration = max(max_duration, inst.duration)
    stats = {"max_duration": int(max_duration)}
    if features_list is not None and num_classes:
        sums = None
        counts = np.zeros(num_classes)
        for ann, feats in zip(annotation_sets, features_list):
            if sums is None:
                sums = np.zeros((num_classes, feats.shape[1]))
            for inst in ann.instances:
                seg = feats[inst.start : inst.end + 1]
                sums[inst.label] += seg.sum(axis=0)
                counts[inst.label] += len(seg)
        centroids = np.where(counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None], 0.0)
        stats["class_centroids"] = centroids.tolist()
    return stats
