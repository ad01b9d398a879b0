"""In-process experiment drivers: the loss-term ablation and the oracle-gap study.

Both run on an in-memory synthetic corpus, so they need no files. The CLI
pipeline produces the same numbers for the same configuration.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field, replace

from . import evaluation as E
from . import inference as I
from . import model as M
from . import trainer as T
from .synthetic import SyntheticSpec, generate

ABLATIONS = {
    "baseline": (1.0, 1.0, 0.0, 0.0),
    "intra_only": (1.0, 1.0, 1.0, 0.0),
    "inter_only": (1.0, 1.0, 0.0, 1.0),
    "full": (1.0, 1.0, 1.0, 1.0),
}


@dataclass
class Corpus:
    train: list
    test: list
    max_duration: int
    centroids: list
    num_classes: int


def build_corpus(spec: SyntheticSpec | None = None) -> Corpus:
    spec = spec or SyntheticSpec()
    videos = generate(spec)
    train = [v for v in videos if v.split == "train"]
    test = [v for v in videos if v.split == "test"]
    stats = T.dataset_stats([v.annotations for v in train], [v.features for v in train], spec.num_classes)
    return Corpus(train, test, stats["max_duration"], stats["class_centroids"], spec.num_classes)


def train_model(corpus: Corpus, weights, seed, net=None, train_cfg=None):
    net = net or M.NetworkConfig()
    cfg = replace(train_cfg or T.TrainConfig(), loss_weights=tuple(weights), seed=seed)
    windows = T.make_windows([(v.features, v.annotations) for v in corpus.train], net.window_length)
    return T.train(M.init_params(net, seed), windows, net, cfg)


def predict(corpus: Corpus, params, net=None, inf_cfg=None):
    net = net or M.NetworkConfig()
    inf_cfg = inf_cfg or I.InferenceConfig()
    return {
        v.video_id: I.propose_video(v.features, params, net, inf_cfg, corpus.max_duration, corpus.centroids)
        for v in corpus.test
    }


def ground_truth(corpus: Corpus):
    return {v.video_id: v.annotations for v in corpus.test}


@dataclass
class AblationResult:
    an: int
    per_seed: dict = field(default_factory=dict)  # config -> [AR@an per seed]
    seconds: float = 0.0

    def median(self, name):
        return statistics.median(self.per_seed[name])


def run_ablation(seeds=(0, 1, 2, 3, 4), configs=None, an=10, corpus=None, train_cfg=None, log=None):
    """AR@``an`` on the test split for every (config, seed)."""
    corpus = corpus or build_corpus()
    configs = configs or ABLATIONS
    gt = ground_truth(corpus)
    result = AblationResult(an)
    t0 = time.perf_counter()
    for name, weights in configs.items():
        for seed in seeds:
            trained = train_model(corpus, weights, seed, train_cfg=train_cfg)
            props = predict(corpus, trained.params)
            ar = E.average_recall(props, gt, an, E.EvalConfig().iou_grid_proposals)
            result.per_seed.setdefault(name, []).append(ar)
            if log:
                log(f"{name:<11} seed={seed} AR@{an}={ar:.4f}  ({time.perf_counter() - t0:.0f}s)")
    result.seconds = time.perf_counter() - t0
    return result


def oracle_gap(corpus: Corpus, params, eval_cfg=None, modes=("none", "rank", "cls", "both")):
    """mAP at each reported IoU for model scores and each oracle mode."""
    eval_cfg = eval_cfg or E.EvalConfig()
    props = predict(corpus, params)
    gt = ground_truth(corpus)
    out = {}
    for mode in modes:
        scored = E.apply_oracle(props, gt, mode)
        out[mode] = {thr: E.mean_average_precision(scored, gt, thr)[1] for thr in eval_cfg.map_ious}
    return out
