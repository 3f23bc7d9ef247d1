"""Self-describing binary container for named arrays.

Layout: 8 magic bytes, a little-endian uint32 version, a uint64 header length,
a UTF-8 JSON header, then each array's raw little-endian bytes in header order.
The header is written with sorted keys so identical content gives identical
bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from tppt.errors import ContractError

MAGIC = b"TPPTARR\x00"
VERSION = 1
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


def _code(a: np.ndarray) -> str:
    if np.issubdtype(a.dtype, np.floating):
        return "f8"
    if np.issubdtype(a.dtype, np.integer) or a.dtype == np.bool_:
        return "i8"
    raise ContractError(f"cannot store arrays of dtype {a.dtype}")


def dumps(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        code = _code(a)
        raw = np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(blobs)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if buf[:8] != MAGIC:
        raise ContractError("not an array container (bad magic)")
    if len(buf) < 20:
        raise ContractError("truncated container header")
    version, hlen = struct.unpack("<IQ", buf[8:20])
    if version != VERSION:
        raise ContractError(f"unsupported container version {version}")
    start = 20 + hlen
    if len(buf) < start:
        raise ContractError("truncated container header")
    header = json.loads(buf[20:start].decode("utf-8"))
    arrays = {}
    for e in header["arrays"]:
        lo, hi = start + e["offset"], start + e["offset"] + e["nbytes"]
        if hi > len(buf):
            raise ContractError(f"array {e['name']} runs past the end of the container")
        dt = _DTYPES[e["dtype"]]
        arrays[e["name"]] = np.frombuffer(buf[lo:hi], dtype=dt).reshape(e["shape"]).astype(dt.newbyteorder("="))
    return arrays, header["meta"]


def save(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(arrays, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())


def save_encoder(path, encoder) -> None:
    save(path, encoder.state_arrays(), {"kind": "encoder", "config": encoder.cfg.to_dict()})


def load_encoder(path):
    from tppt.encoders import DualEncoder, EncoderConfig

    arrays, meta = load(path)
    if meta.get("kind") != "encoder":
        raise ContractError(f"{path} does not hold an encoder")
    enc = DualEncoder(EncoderConfig(**meta["config"]))
    enc.load_arrays(arrays)
    return enc.freeze()


def save_pool(path, pool) -> None:
    save(path, pool.arrays(), {"kind": "prompt_pool", **pool.metadata()})


def save_dataset(path, dataset) -> None:
    arrays = {}
    for split in ("train", "test", "pretrain"):
        s = getattr(dataset, split)
        arrays[f"{split}.images"] = s.images
        arrays[f"{split}.labels"] = s.labels
    arrays["centroids"] = dataset.centroids
    arrays["texts"] = dataset.texts
    save(path, arrays, {"kind": "dataset", "config": dataset.config.to_dict()})
