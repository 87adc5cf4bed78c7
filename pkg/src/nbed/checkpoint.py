"""Versioned named-array container used for checkpoints and raw prediction maps.

Layout (little-endian)::

    b"NBEDCKPT" | u32 format_version | u32 header_len | header (UTF-8 JSON) | data

The header carries free-form metadata, the CRC32 and length of the data
section, and an array directory of ``name, dtype, shape, offset, nbytes``
entries with offsets relative to the start of the data section.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig

MAGIC = b"NBEDCKPT"
FORMAT_VERSION = 1
_ALLOWED_DTYPES = {"<f4", "<f8", "<i8"}


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


def write_container(path, meta: dict, arrays: dict[str, np.ndarray], version: int = FORMAT_VERSION) -> None:
    directory, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<").str
        if dtype not in _ALLOWED_DTYPES:
            raise CheckpointError(f"array {name!r} has unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        directory.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    data = b"".join(chunks)
    header = json.dumps({"meta": meta, "arrays": directory, "data_bytes": len(data),
                         "data_crc32": zlib.crc32(data)}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", version, len(header)) + header + data)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such checkpoint file: {path}")
    blob = path.read_bytes()
    if len(blob) < len(MAGIC) + 8 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointIntegrityError(f"{path}: not an NBED container (bad magic or truncated)")
    version, header_len = struct.unpack_from("<II", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version} is incompatible with supported version {FORMAT_VERSION}")
    start = len(MAGIC) + 8
    if len(blob) < start + header_len:
        raise CheckpointIntegrityError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointIntegrityError(f"{path}: corrupt header ({exc})") from exc
    data = blob[start + header_len:]
    if len(data) != header["data_bytes"]:
        raise CheckpointIntegrityError(
            f"{path}: data section has {len(data)} bytes, header declares {header['data_bytes']} (truncated?)")
    if zlib.crc32(data) != header["data_crc32"]:
        raise CheckpointIntegrityError(f"{path}: data checksum mismatch")
    arrays = {}
    for entry in header["arrays"]:
        raw = data[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
    return header["meta"], arrays


@dataclass
class Checkpoint:
    model_config: ModelConfig
    named_arrays: dict[str, np.ndarray]
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0
    format_version: int = FORMAT_VERSION

    def arrays_equal(self, other: "Checkpoint") -> bool:
        """Bitwise comparison of model and optimizer arrays."""
        def same(a, b):
            return a.keys() == b.keys() and all(
                a[k].dtype == b[k].dtype and a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes()
                for k in a)
        return same(self.named_arrays, other.named_arrays) and same(self.optimizer_state, other.optimizer_state)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    arrays = {f"model/{k}": v for k, v in ckpt.named_arrays.items()}
    arrays.update({f"optim/{k}": v for k, v in ckpt.optimizer_state.items()})
    meta = {"model_config": dataclasses.asdict(ckpt.model_config), "iteration": ckpt.iteration}
    write_container(path, meta, arrays, ckpt.format_version)


def load_checkpoint(path) -> Checkpoint:
    meta, arrays = read_container(path)
    model = {k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")}
    optim = {k[len("optim/"):]: v for k, v in arrays.items() if k.startswith("optim/")}
    cfg = ModelConfig(**meta["model_config"])
    return Checkpoint(cfg, model, optim, int(meta["iteration"]))


def save_edge_map(path, edge: np.ndarray) -> None:
    write_container(path, {"kind": "edge_map"}, {"edge": np.asarray(edge, dtype=np.float32)})


def load_edge_map(path) -> np.ndarray:
    _, arrays = read_container(path)
    if "edge" not in arrays:
        raise CheckpointIntegrityError(f"{path}: no 'edge' array in container")
    return arrays["edge"]
