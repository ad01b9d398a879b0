import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tal_mutreg import formats as F
from tal_mutreg.labels import AnnotationSet, Instance
from tal_mutreg.model import NetworkConfig, init_params


def test_features_round_trip(tmp_path):
    x = np.random.default_rng(0).normal(size=(37, 5))
    F.write_features(tmp_path / "a.feat", x)
    raw = (tmp_path / "a.feat").read_bytes()
    assert raw[:4] == b"TALF" and struct.unpack_from("<III", raw, 4) == (1, 37, 5)
    assert len(raw) == 16 + 37 * 5 * 4
    y = F.read_features(tmp_path / "a.feat")
    assert np.array_equal(y, x.astype(np.float32).astype(np.float64))


@pytest.mark.parametrize(
    "mutate,msg",
    [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
        (lambda b: b[:-4], "expected"),
        (lambda b: b[:10], "truncated"),
    ],
)
def test_feature_format_errors(tmp_path, mutate, msg):
    F.write_features(tmp_path / "a.feat", np.zeros((4, 2)))
    p = tmp_path / "a.feat"
    p.write_bytes(mutate(p.read_bytes()))
    with pytest.raises(F.FormatError, match=msg):
        F.read_features(p)


def test_annotations_round_trip(tmp_path):
    ann = F.AnnotationFile(
        ["walk", "jump"],
        [
            F.VideoRecord("v0", "train", 50, 25.0, "features/v0.feat", AnnotationSet(50, [Instance(3, 9, 1), Instance(20, 40, 0)])),
            F.VideoRecord("v1", "test", 60, 25.0, "features/v1.feat", AnnotationSet(60, [])),
        ],
    )
    F.write_annotations(tmp_path / "a.json", ann)
    back = F.read_annotations(tmp_path / "a.json")
    assert back.classes == ann.classes
    assert [v.annotations.instances for v in back.videos] == [v.annotations.instances for v in ann.videos]
    assert [v.video_id for v in back.split("test")] == ["v1"]


def test_annotation_errors(tmp_path):
    p = tmp_path / "a.json"
    p.write_text("{not json")
    with pytest.raises(F.FormatError):
        F.read_annotations(p)
    p.write_text('{"format": "tal-annotations", "version": 1, "classes": ["a"], "videos": '
                 '[{"id": "v", "num_frames": 10, "instances": [{"start_frame": 5, "end_frame": 12, "label": "a"}]}]}')
    with pytest.raises(F.FormatError, match="video v"):
        F.read_annotations(p)


def test_proposals_round_trip_sorted(tmp_path):
    props = {"b": [F.Proposal(1.0, 5.5, 0.2, None), F.Proposal(2.25, 9.0, 0.9, 1)], "a": [F.Proposal(0.0, 3.0, 0.5, 0)]}
    F.write_proposals(tmp_path / "p.tsv", props, ["x", "y"])
    lines = (tmp_path / "p.tsv").read_text().splitlines()
    assert lines[0] == F.PROPOSAL_HEADER
    assert lines[1].startswith("a\t") and lines[2].split("\t")[3] == "0.90000000" and lines[3].endswith("\t-")
    back = F.read_proposals(tmp_path / "p.tsv", ["x", "y"])
    assert [p.score for p in back["b"]] == [0.9, 0.2] and back["b"][0].label == 1 and back["b"][1].label is None


@pytest.mark.parametrize(
    "line,msg",
    [
        ("v\t1.0\t2.0\t0.5", "5 tab-separated"),
        ("v\t3.0\t2.0\t0.5\t-", "start"),
        ("v\tabc\t2.0\t0.5\t-", "could not convert"),
        ("v\t1.0\t2.0\t0.5\tzebra", "unknown class"),
        ("v\t1.0\tnan\t0.5\t-", "non-finite"),
    ],
)
def test_malformed_proposal_names_line(tmp_path, line, msg):
    p = tmp_path / "p.tsv"
    p.write_text(F.PROPOSAL_HEADER + "\nv\t0.0\t1.0\t0.3\t-\n" + line + "\n")
    with pytest.raises(F.FormatError, match=rf"p.tsv:3: .*{msg}"):
        F.read_proposals(p, ["x"])


def test_checkpoint_round_trip_bitwise(tmp_path):
    cfg = NetworkConfig(input_channels=3, base_channels=4, head_channels=2)
    params = init_params(cfg, 11)
    state = {"velocity.base.0.weight": np.random.default_rng(0).normal(size=params["base.0.weight"].shape)}
    F.save_checkpoint(tmp_path / "c.ckpt", params, cfg, 7, {"max_duration": 30}, state)
    ck = F.load_checkpoint(tmp_path / "c.ckpt", expect_config=cfg)
    assert ck.config == cfg and ck.epoch == 7 and ck.meta == {"max_duration": 30}
    assert list(ck.params) == list(params)
    assert all(ck.params[k].data.tobytes() == params[k].data.tobytes() for k in params)
    assert ck.state["velocity.base.0.weight"].tobytes() == state["velocity.base.0.weight"].tobytes()


@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 6))
def test_checkpoint_round_trip_property(seed, c_in, width):
    import tempfile
    from pathlib import Path

    cfg = NetworkConfig(input_channels=c_in, base_channels=width, head_channels=width, base_layers=1)
    params = init_params(cfg, seed)
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "c.ckpt"
        F.save_checkpoint(path, params, cfg, 0)
        ck = F.load_checkpoint(path)
    assert ck.config == cfg and all(np.array_equal(ck.params[k].data, params[k].data) for k in params)


def test_checkpoint_errors(tmp_path):
    cfg = NetworkConfig(input_channels=2, base_channels=3, head_channels=2)
    F.save_checkpoint(tmp_path / "c.ckpt", init_params(cfg, 0), cfg, 1)
    raw = (tmp_path / "c.ckpt").read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"GARBAGE!" + raw[8:])
    with pytest.raises(F.FormatError, match="magic"):
        F.load_checkpoint(bad)
    bad.write_bytes(raw[:8] + struct.pack("<I", 99) + raw[12:])
    with pytest.raises(F.FormatError, match="version"):
        F.load_checkpoint(bad)
    bad.write_bytes(raw[:-3])
    with pytest.raises(F.FormatError, match="truncated"):
        F.load_checkpoint(bad)
    bad.write_bytes(raw + b"\0")
    with pytest.raises(F.FormatError, match="trailing"):
        F.load_checkpoint(bad)
    with pytest.raises(F.ConfigMismatchError):
        F.load_checkpoint(tmp_path / "c.ckpt", expect_config=NetworkConfig())
