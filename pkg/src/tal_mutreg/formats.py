"""On-disk formats.

Feature file (``.feat``)
    16-byte little-endian header ``<4sIII``: magic ``b"TALF"``, version (1),
    T, C; then T*C float32 little-endian values, row-major (frame by frame).

Annotation file (JSON)
    ``{"format": "tal-annotations", "version": 1, "classes": [names...],
    "videos": [{"id", "split", "num_frames", "fps", "feature_file",
    "instances": [{"start_frame", "end_frame", "label"}]}]}``.
    Frames are 0-based; ``end_frame`` is inclusive; ``label`` is a class name.

Proposal file (tab-separated text)
    A header line ``# video_id t_start t_end score class`` then one proposal per
    line. ``class`` is a class name or ``-``. Lines of one video are
    contiguous and sorted by score, highest first.

Checkpoint (binary)
    magic ``b"TALCKPT\\0"``, version u32, header length u64, a UTF-8 JSON
    header (network config, epoch, metadata, and the ordered list of
    ``{"name", "shape"}`` arrays), then every array's float64 little-endian
    values, row-major, in header order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .labels import AnnotationSet, Instance
from .model import NetworkConfig


class FormatError(ValueError):
    pass


class ConfigMismatchError(ValueError):
    pass


# --- features -----------------------------------------------------------------

FEATURE_MAGIC = b"TALF"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIII")


def write_features(path, features):
    features = np.asarray(features)
    T, C = features.shape
    with open(path, "wb") as f:
        f.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, T, C))
        f.write(np.ascontiguousarray(features, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _FEATURE_HEADER.size:
        raise FormatError(f"{path}: truncated feature header")
    magic, version, T, C = _FEATURE_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature version {version}")
    expected = _FEATURE_HEADER.size + 4 * T * C
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {T}x{C} features, found {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4", offset=_FEATURE_HEADER.size)
    return values.reshape(T, C).astype(np.float64)


# --- annotations --------------------------------------------------------------


@dataclass
class VideoRecord:
    video_id: str
    split: str
    num_frames: int
    fps: float
    feature_file: str
    annotations: AnnotationSet


@dataclass
class AnnotationFile:
    classes: list[str]
    videos: list[VideoRecord] = field(default_factory=list)

    def split(self, name):
        return [v for v in self.videos if v.split == name]

    def by_id(self):
        return {v.video_id: v for v in self.videos}


def write_annotations(path, ann: AnnotationFile):
    doc = {
        "format": "tal-annotations",
        "version": 1,
        "classes": list(ann.classes),
        "videos": [
            {
                "id": v.video_id,
                "split": v.split,
                "num_frames": v.num_frames,
                "fps": v.fps,
                "feature_file": v.feature_file,
                "instances": [
                    {"start_frame": i.start, "end_frame": i.end, "label": ann.classes[i.label]}
                    for i in v.annotations.instances
                ],
            }
            for v in ann.videos
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def read_annotations(path) -> AnnotationFile:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON: {e}") from None
    if doc.get("format") != "tal-annotations" or doc.get("version") != 1:
        raise FormatError(f"{path}: not a version-1 tal-annotations document")
    classes = list(doc["classes"])
    index = {c: i for i, c in enumerate(classes)}
    videos = []
    for v in doc["videos"]:
        try:
            insts = [Instance(int(i["start_frame"]), int(i["end_frame"]), index[i["label"]]) for i in v["instances"]]
            videos.append(
                VideoRecord(
                    v["id"],
                    v.get("split", "test"),
                    int(v["num_frames"]),
                    float(v.get("fps", 0.0)),
                    v.get("feature_file", ""),
                    AnnotationSet(int(v["num_frames"]), insts),
                )
            )
        except (KeyError, ValueError) as e:
            raise FormatError(f"{path}: video {v.get('id', '?')}: {e}") from None
    return AnnotationFile(classes, videos)


# --- proposals ----------------------------------------------------------------

PROPOSAL_HEADER = "# video_id\tt_start\tt_end\tscore\tclass"


@dataclass(frozen=True)
class Proposal:
    start: float
    end: float
    score: float
    label: int | None = None


def write_proposals(path, proposals_by_video, classes):
    """``proposals_by_video``: mapping video id -> list of Proposal (any order)."""
    lines = [PROPOSAL_HEADER]
    for vid in sorted(proposals_by_video):
        ranked = sorted(proposals_by_video[vid], key=lambda p: -p.score)
        for p in ranked:
            label = "-" if p.label is None else classes[p.label]
            lines.append(f"{vid}\t{p.start:.4f}\t{p.end:.4f}\t{p.score:.8f}\t{label}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_proposals(path, classes) -> dict[str, list[Proposal]]:
    index = {c: i for i, c in enumerate(classes)}
    out: dict[str, list[Proposal]] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            try:
                if len(parts) != 5:
                    raise ValueError(f"expected 5 tab-separated fields, got {len(parts)}")
                vid, s, e, score, label = parts
                s, e, score = float(s), float(e), float(score)
                if not all(math.isfinite(x) for x in (s, e, score)):
                    raise ValueError("non-finite value")
                if not s < e:
                    raise ValueError(f"start {s} >= end {e}")
                if label == "-":
                    cls = None
                elif label in index:
                    cls = index[label]
                else:
                    raise ValueError(f"unknown class {label!r}")
            except ValueError as err:
                raise FormatError(f"{path}:{lineno}: {err}") from None
            out.setdefault(vid, []).append(Proposal(s, e, score, cls))
    for vid in out:
        out[vid].sort(key=lambda p: -p.score)
    return out


# --- checkpoints --------------------------------------------------------------

CKPT_MAGIC = b"TALCKPT\x00"
CKPT_VERSION = 1
_CKPT_PREFIX = struct.Struct("<8sIQ")


def save_checkpoint(path, params, config: NetworkConfig, epoch, meta=None, state=None):
    """Write parameters (and optional extra arrays such as optimizer velocity)."""
    arrays = [(name, np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)) for name, t in params.items()]
    extra = [(name, np.asarray(a, dtype=np.float64)) for name, a in (state or {}).items()]
    header = {
        "network": config.to_dict(),
        "epoch": int(epoch),
        "meta": meta or {},
        "params": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "state": [{"name": n, "shape": list(a.shape)} for n, a in extra],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(hbytes)))
        f.write(hbytes)
        for _, a in arrays + extra:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


@dataclass
class Checkpoint:
    config: NetworkConfig
    epoch: int
    params: dict
    meta: dict
    state: dict


def load_checkpoint(path, expect_config: NetworkConfig | None = None) -> Checkpoint:
    """Read a checkpoint in full; nothing is returned unless every byte checks out."""
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_PREFIX.size:
        raise FormatError(f"{path}: truncated checkpoint header")
    magic, version, hlen = _CKPT_PREFIX.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    start = _CKPT_PREFIX.size
    if len(raw) < start + hlen:
        raise FormatError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(raw[start : start + hlen].decode())
        config = NetworkConfig(**header["network"])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"{path}: corrupt checkpoint header: {e}") from None
    if expect_config is not None and config != expect_config:
        raise ConfigMismatchError(f"{path}: checkpoint network {config} != expected {expect_config}")

    offset = start + hlen
    groups = {}
    for group in ("params", "state"):
        out = {}
        for entry in header.get(group, []):
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            end = offset + 8 * n
            if end > len(raw):
                raise FormatError(f"{path}: truncated data for {entry['name']}")
            out[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
            offset = end
        groups[group] = out
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    expected = [f"{name}.{kind}" for name, *_ in config.layer_shapes() for kind in ("weight", "bias")]
    if list(groups["params"]) != expected:
        raise FormatError(f"{path}: parameter names do not match the network config")
    params = {k: Tensor(v, requires_grad=True) for k, v in groups["params"].items()}
    return Checkpoint(config, int(header["epoch"]), params, header.get("meta", {}), groups["state"])
