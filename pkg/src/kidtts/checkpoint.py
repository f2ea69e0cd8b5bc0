"""Single-file model container.

Layout: magic, format version, length-prefixed UTF-8 JSON header (configs,
codebook metadata, corpus digest, epoch, validation loss, tensor index),
then each tensor as a length-prefixed name + shape + float32 little-endian
row-major payload, then a sha256 digest over all tensor payload bytes.
Writes are atomic (temp file + rename).
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .flowdec import FlowConfig
from .speechcodec import Codebook
from .tokenlm import LMConfig

MAGIC = b"KTTSCKP1"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Checkpoint:
    lm_config: LMConfig
    lm_params: dict
    flow_config: FlowConfig
    flow_params: dict
    codebook: Codebook
    corpus_digest: str
    epoch: int
    val_loss: float
    language_filter: str | None = None

    def __post_init__(self):
        if not np.isfinite(self.val_loss):
            raise DataError("checkpoint validation loss must be finite")


def _tensor_items(ckpt: Checkpoint):
    for name in sorted(ckpt.lm_params):
        yield f"lm.{name}", ckpt.lm_params[name]
    for name in sorted(ckpt.flow_params):
        yield f"flow.{name}", ckpt.flow_params[name]
    yield "codebook.centroids", ckpt.codebook.centroids


def save(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tensors = list(_tensor_items(ckpt))
    header = {
        "format_version": FORMAT_VERSION,
        "lm_config": ckpt.lm_config.to_json(),
        "flow_config": ckpt.flow_config.to_json(),
        "codebook": {"k": ckpt.codebook.k, "n_mels": ckpt.codebook.n_mels,
                     "version": ckpt.codebook.version},
        "corpus_digest": ckpt.corpus_digest,
        "epoch": ckpt.epoch,
        "val_loss": ckpt.val_loss,
        "language_filter": ckpt.language_filter,
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    digest = hashlib.sha256()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for name, tensor in tensors:
            name_b = name.encode("utf-8")
            data = np.ascontiguousarray(tensor, dtype="<f4").tobytes()
            f.write(struct.pack("<I", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<I", tensor.ndim))
            for dim in tensor.shape:
                f.write(struct.pack("<I", dim))
            f.write(struct.pack("<Q", len(data)))
            f.write(data)
            digest.update(data)
        f.write(digest.digest())
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise DataError(f"truncated checkpoint while reading {what}")
    return data


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        if _read_exact(f, len(MAGIC), "magic") != MAGIC:
            raise DataError(f"{path}: not a model checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported format version {version}")
        (hlen,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
        header = json.loads(_read_exact(f, hlen, "header").decode("utf-8"))
        digest = hashlib.sha256()
        tensors = {}
        for entry in header["tensors"]:
            (nlen,) = struct.unpack("<I", _read_exact(f, 4, "tensor name length"))
            name = _read_exact(f, nlen, "tensor name").decode("utf-8")
            if name != entry["name"]:
                raise DataError(f"{path}: tensor order mismatch ({name})")
            (ndim,) = struct.unpack("<I", _read_exact(f, 4, "tensor rank"))
            shape = tuple(
                struct.unpack("<I", _read_exact(f, 4, "tensor dim"))[0]
                for _ in range(ndim)
            )
            if list(shape) != entry["shape"]:
                raise DataError(f"{path}: shape mismatch for {name}")
            (blen,) = struct.unpack("<Q", _read_exact(f, 8, "tensor byte length"))
            data = _read_exact(f, blen, f"tensor {name}")
            digest.update(data)
            arr = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float64)
            tensors[name] = arr
        stored = _read_exact(f, 32, "integrity digest")
        if stored != digest.digest():
            raise DataError(f"{path}: integrity digest mismatch")

    lm_params = {k[3:]: v for k, v in tensors.items() if k.startswith("lm.")}
    flow_params = {k[5:]: v for k, v in tensors.items() if k.startswith("flow.")}
    codebook = Codebook(
        centroids=tensors["codebook.centroids"],
        version=header["codebook"]["version"],
    )
    return Checkpoint(
        lm_config=LMConfig.from_json(header["lm_config"]),
        lm_params=lm_params,
        flow_config=FlowConfig.from_json(header["flow_config"]),
        flow_params=flow_params,
        codebook=codebook,
        corpus_digest=header["corpus_digest"],
        epoch=int(header["epoch"]),
        val_loss=float(header["val_loss"]),
        language_filter=header.get("language_filter"),
    )
