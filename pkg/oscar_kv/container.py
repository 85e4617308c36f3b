"""
Binary tensor container used for activation dumps and rotation bundles.

Layout (little-endian):
    b"OSCR" | u32 version | u32 array count
    per array: u16 name length | UTF-8 name | u8 dtype tag | u8 rank |
               u64 dims[rank] | raw payload
dtype tags: 0 = float32, 1 = uint8.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np

from oscar_kv.calibration import ActivationDump, RotationBundle, RotationSlot
from oscar_kv.errors import FormatError

logger = logging.getLogger(__name__)

MAGIC = b"OSCR"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_TAGS = {np.dtype("float32"): 0, np.dtype("uint8"): 1}

PathLike = Union[str, Path]


def encode_container(arrays: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        tag = _TAGS.get(arr.dtype)
        if tag is None:
            raise FormatError(f"array {name!r} has unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise FormatError(f"array {name!r} name or rank too large")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return b"".join(parts)


def decode_container(data: bytes) -> Dict[str, np.ndarray]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("container is truncated")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError("not an OSCR container (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")

    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError("array name is not valid UTF-8") from e
        if name in arrays:
            raise FormatError(f"duplicate array name {name!r}")
        tag, rank = struct.unpack("<BB", take(2))
        if tag not in _DTYPES:
            raise FormatError(f"unknown dtype tag {tag} for {name!r}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        dtype = _DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.uint64)) * dtype.itemsize
        payload = take(nbytes)
        arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after the last array")
    return arrays


def write_container(path: PathLike, arrays: Dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_container(arrays))
    logger.debug("wrote %d arrays to %s", len(arrays), path)
    return path


def read_container(path: PathLike) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"container not found: {path}")
    return decode_container(path.read_bytes())


# ============================================
# ACTIVATION DUMPS
# ============================================

def dump_to_arrays(dump: ActivationDump) -> Dict[str, np.ndarray]:
    return {"q": dump.q, "k": dump.k, "v": dump.v}


def dump_from_arrays(arrays: Dict[str, np.ndarray]) -> ActivationDump:
    missing = [n for n in ("q", "k", "v") if n not in arrays]
    if missing:
        raise FormatError(f"activation container lacks arrays {missing}")
    return ActivationDump(q=arrays["q"], k=arrays["k"], v=arrays["v"])


# ============================================
# ROTATION BUNDLES
# ============================================

def _nearest_orthogonal(r: np.ndarray) -> np.ndarray:
    # float32 storage perturbs orthogonality; project back with the polar factor
    u, _, vt = np.linalg.svd(np.asarray(r, dtype=np.float64))
    return u @ vt


def bundle_to_arrays(bundle: RotationBundle) -> Dict[str, np.ndarray]:
    """Rotations and eigen-factors as float32 stacks, metadata as a JSON byte array."""
    meta = {
        "bits": bundle.bits,
        "group_size_k": bundle.group_size_k,
        "group_size_v": bundle.group_size_v,
        "share_heads": bundle.share_heads,
        "clip_k": [[s.clip_k for s in row] for row in bundle.slots],
        "clip_v": [[s.clip_v for s in row] for row in bundle.slots],
        "provenance": bundle.provenance,
    }
    out = {
        name: np.array([[getattr(s, name) for s in row] for row in bundle.slots], dtype=np.float32)
        for name in ("r_k", "r_v", "u_k", "u_v", "lambda_k", "lambda_v")
    }
    out["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    return out


def bundle_from_arrays(arrays: Dict[str, np.ndarray]) -> RotationBundle:
    needed = ("r_k", "r_v", "u_k", "u_v", "lambda_k", "lambda_v", "meta")
    missing = [n for n in needed if n not in arrays]
    if missing:
        raise FormatError(f"bundle container lacks arrays {missing}")
    try:
        meta = json.loads(arrays["meta"].tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError("bundle metadata is not valid JSON") from e

    if arrays["r_k"].ndim != 4:
        raise FormatError(f"r_k must be (layers, slots, d, d), got {arrays['r_k'].shape}")
    try:
        return _bundle_from_meta(arrays, meta)
    except (KeyError, IndexError, TypeError) as e:
        raise FormatError(f"bundle metadata is incomplete: {e}") from e


def _bundle_from_meta(arrays: Dict[str, np.ndarray], meta: dict) -> RotationBundle:
    layers, per_layer = arrays["r_k"].shape[:2]
    slots = []
    for i in range(layers):
        row = []
        for j in range(per_layer):
            row.append(
                RotationSlot(
                    r_k=_nearest_orthogonal(arrays["r_k"][i, j]),
                    r_v=_nearest_orthogonal(arrays["r_v"][i, j]),
                    u_k=_nearest_orthogonal(arrays["u_k"][i, j]),
                    u_v=_nearest_orthogonal(arrays["u_v"][i, j]),
                    lambda_k=arrays["lambda_k"][i, j].astype(np.float64),
                    lambda_v=arrays["lambda_v"][i, j].astype(np.float64),
                    clip_k=float(meta["clip_k"][i][j]),
                    clip_v=float(meta["clip_v"][i][j]),
                )
            )
        slots.append(row)
    return RotationBundle(
        slots=slots,
        group_size_k=int(meta["group_size_k"]),
        group_size_v=int(meta["group_size_v"]),
        bits=int(meta["bits"]),
        share_heads=bool(meta["share_heads"]),
        provenance=meta.get("provenance", {}),
    )
