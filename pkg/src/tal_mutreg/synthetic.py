"""Synthetic untrimmed "videos": per-frame feature vectors with planted action instances.

Background frames are N(0, noise_sigma^2) per channel. A frame inside an
instance of class a is drawn around w(t) * mu_a, where mu_a has norm
``class_sep`` and w(t) ramps 1/3, 2/3, 1, ..., 1, 2/3, 1/3 across the
instance, so the first and last two frames are only partially "on".
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .labels import AnnotationSet, Instance

RAMP_WIDTH = 2
MAX_PACKING_TRIES = 100


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 0
    num_train: int = 200
    num_test: int = 50
    length: int = 128
    num_classes: int = 5
    channels: int = 8
    instances_per_video: tuple[int, int] = (1, 4)
    duration: tuple[int, int] = (8, 40)
    noise_sigma: float = 0.5
    class_sep: float = 2.0
    fps: float = 25.0

    def __post_init__(self):
        object.__setattr__(self, "instances_per_video", tuple(self.instances_per_video))
        object.__setattr__(self, "duration", tuple(self.duration))
        lo, hi = self.instances_per_video
        dlo, dhi = self.duration
        if self.num_train < 0 or self.num_test < 0:
            raise ValueError("video counts must be >= 0")
        if self.length < 1 or self.channels < 1 or self.num_classes < 1:
            raise ValueError("length, channels and num_classes must be >= 1")
        if not 0 <= lo <= hi:
            raise ValueError(f"bad instances_per_video {self.instances_per_video}")
        if not 1 <= dlo <= dhi:
            raise ValueError(f"bad duration range {self.duration}")
        if dhi >= self.length:
            raise GenerationError(f"max duration {dhi} does not fit in {self.length} frames")
        if lo * (dlo + 1) > self.length:
            raise GenerationError(
                f"{lo} instances of >= {dlo} frames cannot fit in {self.length} frames without overlap"
            )
        if self.noise_sigma < 0 or self.class_sep < 0:
            raise ValueError("noise_sigma and class_sep must be >= 0")

    @property
    def num_videos(self):
        return self.num_train + self.num_test

    def to_dict(self):
        d = asdict(self)
        d["instances_per_video"] = list(self.instances_per_video)
        d["duration"] = list(self.duration)
        return d


@dataclass
class Video:
    video_id: str
    split: str
    features: np.ndarray
    annotations: AnnotationSet


def class_means(spec: SyntheticSpec) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(0,)))
    mu = rng.normal(size=(spec.num_classes, spec.channels))
    mu /= np.linalg.norm(mu, axis=1, keepdims=True)
    return mu * spec.class_sep


def ramp_weights(start, end):
    """Plateau height per frame of the closed interval [start, end]."""
    t = np.arange(start, end + 1)
    w = np.minimum((t - start + 1) / (RAMP_WIDTH + 1), (end - t + 1) / (RAMP_WIDTH + 1))
    return np.minimum(w, 1.0)


def _place_instances(rng, spec):
    lo, hi = spec.instances_per_video
    n = int(rng.integers(lo, hi + 1))
    if n == 0:
        return []
    dlo, dhi = spec.duration
    for _ in range(MAX_PACKING_TRIES):
        durations = rng.integers(dlo, dhi + 1, size=n)
        free = spec.length - int((durations + 1).sum())
        if free >= 0:
            break
    else:
        raise GenerationError(f"could not pack {n} non-overlapping instances into {spec.length} frames")
    gaps = rng.multinomial(free, np.full(n + 1, 1.0 / (n + 1)))
    labels = rng.integers(0, spec.num_classes, size=n)
    instances = []
    t = int(gaps[0])
    for d, g, a in zip(durations, gaps[1:], labels):
        instances.append(Instance(t, t + int(d), int(a)))
        t += int(d) + 1 + int(g)
    return instances


def generate_video(spec: SyntheticSpec, index: int, means=None) -> Video:
    means = class_means(spec) if means is None else means
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(1, index)))
    instances = _place_instances(rng, spec)
    features = rng.normal(scale=spec.noise_sigma, size=(spec.length, spec.channels))
    for inst in instances:
        w = ramp_weights(inst.start, inst.end)
        features[inst.start : inst.end + 1] += w[:, None] * means[inst.label]
    split = "train" if index < spec.num_train else "test"
    return Video(f"video_{index:04d}", split, features, AnnotationSet(spec.length, instances))


def generate(spec: SyntheticSpec) -> list[Video]:
    """All videos, train split first. Each video has its own RNG stream keyed by
    (seed, index), so any subset can be regenerated independently."""
    means = class_means(spec)
    return [generate_video(spec, i, means) for i in range(spec.num_videos)]
