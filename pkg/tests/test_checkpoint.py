import json

import numpy as np
import pytest
import torch

from tokalign.checkpoint import MAGIC, CheckpointError, loadCheckpoint, read_manifest, saveCheckpoint
from tokalign.model import CodecLM, ModelConfig


def tiny(seed=0, **kw):
    kw = {"encoderLayers": 1, "decoderLayers": 2, "hiddenDim": 16, "ffnDim": 32, "heads": 2, **kw}
    return CodecLM(ModelConfig(**kw), seed=seed)


def test_round_trip_is_byte_identical(tmp_path):
    m = tiny(3)
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    ident = saveCheckpoint(m, a, {"note": "x"})
    back = loadCheckpoint(a)
    assert back.checkpoint_id == ident
    for (k, x), (_, y) in zip(m.state_dict().items(), back.state_dict().items()):
        assert torch.equal(x, y), k
    saveCheckpoint(back, b, {"note": "x"})
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes().startswith(MAGIC)
    manifest, _ = read_manifest(a)
    assert manifest["extra"] == {"note": "x"}
    assert manifest["config"]["hiddenDim"] == 16


def test_truncated_file_rejected(tmp_path):
    p = tmp_path / "m.ckpt"
    saveCheckpoint(tiny(), p)
    data = p.read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(data[:-10])
    with pytest.raises(CheckpointError):
        loadCheckpoint(tmp_path / "cut.ckpt")
    (tmp_path / "head.ckpt").write_bytes(data[:12])
    with pytest.raises(CheckpointError):
        loadCheckpoint(tmp_path / "head.ckpt")
    (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT" + data[8:])
    with pytest.raises(CheckpointError):
        loadCheckpoint(tmp_path / "bad.ckpt")


def test_corrupted_blob_rejected(tmp_path):
    p = tmp_path / "m.ckpt"
    saveCheckpoint(tiny(), p)
    data = bytearray(p.read_bytes())
    data[-3] ^= 0xFF
    p.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="checksum"):
        loadCheckpoint(p)


def _rewrite_manifest(path, edit):
    data = path.read_bytes()
    n = int.from_bytes(data[8:16], "little")
    manifest = json.loads(data[16 : 16 + n])
    edit(manifest)
    raw = json.dumps(manifest, sort_keys=True).encode()
    path.write_bytes(MAGIC + len(raw).to_bytes(8, "little") + raw + data[16 + n :])


def test_shape_mismatch_names_the_array(tmp_path):
    p = tmp_path / "m.ckpt"
    saveCheckpoint(tiny(), p)

    def bend(m):
        for a in m["arrays"]:
            if a["name"] == "head.bias":
                a["shape"] = [a["shape"][0] // 5, 5]

    _rewrite_manifest(p, bend)
    with pytest.raises(CheckpointError, match="head.bias"):
        loadCheckpoint(p)


def test_missing_array_named(tmp_path):
    p = tmp_path / "m.ckpt"
    saveCheckpoint(tiny(), p)
    _rewrite_manifest(p, lambda m: m.__setitem__("arrays", [a for a in m["arrays"] if a["name"] != "norm.weight"]))
    with pytest.raises(CheckpointError, match="norm.weight"):
        loadCheckpoint(p)


def test_unknown_version_rejected(tmp_path):
    p = tmp_path / "m.ckpt"
    saveCheckpoint(tiny(), p)
    _rewrite_manifest(p, lambda m: m.__setitem__("format_version", "9.0"))
    with pytest.raises(CheckpointError):
        loadCheckpoint(p)


def test_expected_config_mismatch(tmp_path):
    p = tmp_path / "m.ckpt"
    saveCheckpoint(tiny(), p)
    with pytest.raises(CheckpointError):
        loadCheckpoint(p, expected=ModelConfig(hiddenDim=32, encoderLayers=1, decoderLayers=2, ffnDim=32, heads=2))
    assert loadCheckpoint(p, expected=tiny().cfg).cfg == tiny().cfg


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        loadCheckpoint(tmp_path / "absent.ckpt")
