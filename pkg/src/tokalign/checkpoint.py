"""Checkpoint files: a JSON manifest followed by a little-endian float32 blob.

Layout: 8-byte magic, 8-byte little-endian manifest length, manifest bytes,
then the concatenated arrays in manifest order.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np
import torch

from .model import CodecLM, ModelConfig

MAGIC = b"TKALCKPT"
CKPT_FORMAT = "tokalign.ckpt"
CKPT_VERSION = "1.0"


class CheckpointError(ValueError):
    pass


def _arrays(model: CodecLM) -> list[tuple[str, np.ndarray]]:
    return [(name, t.detach().cpu().numpy().astype("<f4")) for name, t in model.state_dict().items()]


def saveCheckpoint(model: CodecLM, path, extra: dict | None = None) -> str:
    """Write ``model``; returns the content id (sha256 prefix of the blob)."""
    entries, blobs, offset = [], [], 0
    for name, arr in _arrays(model):
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    blob = b"".join(blobs)
    digest = hashlib.sha256(blob).hexdigest()[:16]
    manifest = {
        "format": CKPT_FORMAT,
        "format_version": CKPT_VERSION,
        "endianness": "little",
        "dtype": "float32",
        "config": model.cfg.to_dict(),
        "version": int(model.version),
        "arrays": entries,
        "blob_bytes": len(blob),
        "sha256": digest,
        "extra": extra or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<Q", len(head)) + head + blob)
    return digest


def read_manifest(path) -> tuple[dict, bytes]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise CheckpointError(f"{path}: {e.strerror}") from None
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    if len(data) < 16 + n:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[16 : 16 + n])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt manifest ({e})") from None
    if manifest.get("format") != CKPT_FORMAT:
        raise CheckpointError(f"{path}: unexpected format {manifest.get('format')!r}")
    if str(manifest.get("format_version", "")).split(".")[0] != CKPT_VERSION.split(".")[0]:
        raise CheckpointError(f"{path}: unsupported format_version {manifest.get('format_version')!r}")
    if manifest.get("endianness") != "little" or manifest.get("dtype") != "float32":
        raise CheckpointError(f"{path}: unsupported storage {manifest.get('endianness')}/{manifest.get('dtype')}")
    blob = data[16 + n :]
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(f"{path}: blob has {len(blob)} bytes, manifest says {manifest['blob_bytes']} "
                              "(file truncated or corrupted)")
    return manifest, blob


def loadCheckpoint(path, expected: ModelConfig | None = None) -> CodecLM:
    """Rebuild the model; nothing is loaded unless every array checks out."""
    manifest, blob = read_manifest(path)
    cfg = ModelConfig(**manifest["config"])
    if expected is not None and expected.to_dict() != cfg.to_dict():
        diff = sorted(k for k, v in expected.to_dict().items() if cfg.to_dict().get(k) != v)
        raise CheckpointError(f"{path}: config mismatch on {', '.join(diff)}")
    if hashlib.sha256(blob).hexdigest()[:16] != manifest["sha256"]:
        raise CheckpointError(f"{path}: blob checksum mismatch")
    model = CodecLM(cfg)
    own = model.state_dict()
    names = [e["name"] for e in manifest["arrays"]]
    missing = [k for k in own if k not in names]
    if missing:
        raise CheckpointError(f"{path}: missing array {missing[0]}")
    state = {}
    for e in manifest["arrays"]:
        name = e["name"]
        if name not in own:
            raise CheckpointError(f"{path}: unexpected array {name}")
        if list(own[name].shape) != list(e["shape"]):
            raise CheckpointError(f"{path}: array {name} has shape {e['shape']}, "
                                  f"config expects {list(own[name].shape)}")
        count = int(np.prod(e["shape"], dtype=np.int64))
        if e["nbytes"] != 4 * count or e["offset"] + e["nbytes"] > len(blob):
            raise CheckpointError(f"{path}: array {name} extent is inconsistent")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"])
        state[name] = torch.from_numpy(arr.astype(np.float32))
    model.load_state_dict(state)
    model.version = int(manifest["version"])
    model.checkpoint_id = manifest["sha256"]
    model.eval()
    return model
