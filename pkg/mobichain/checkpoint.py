"""Binary checkpoint files.

Layout: 8-byte magic, header length as little-endian uint64, a UTF-8 JSON
header, then the raw little-endian tensor bytes in manifest order. The header
holds the format version, the model config, the tensor manifest (name, shape,
dtype, byte offset) with its digest and a digest of the payload.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Any

import numpy as np

from .const import CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MAGIC
from .errors import CheckpointError, InvalidConfigError
from .model import ModelConfig, ModelParams, parameter_shapes
from .numerics import Tensor
from .utils import json_digest

_LOGGER = logging.getLogger(__name__)

_LENGTH = struct.Struct("<Q")


def _manifest_digest(config: dict[str, Any], manifest: list[dict[str, Any]]) -> str:
    return json_digest({"config": config, "manifest": manifest})


def save_checkpoint(path: str | Path, params: ModelParams, extra: dict[str, Any] | None = None) -> Path:
    """
    Write parameters to ``path``.

    Args:
        path: Destination file; parent directories are created
        params: Parameters to store
        extra: Optional JSON-serialisable metadata kept in the header

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    manifest: list[dict[str, Any]] = []
    chunks: list[bytes] = []
    offset = 0
    for name, tensor in params.tensors.items():
        array = np.ascontiguousarray(tensor.data, dtype=tensor.dtype.newbyteorder("<"))
        raw = array.tobytes()
        manifest.append({"name": name, "shape": list(array.shape), "dtype": array.dtype.str, "offset": offset})
        chunks.append(raw)
        offset += len(raw)

    payload = b"".join(chunks)
    config = asdict(params.config)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": config,
        "manifest": manifest,
        "manifest_digest": _manifest_digest(config, manifest),
        "payload_digest": hashlib.sha256(payload).hexdigest(),
        "trainable_groups": sorted(params.trainable_groups),
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    tmp_path = path.with_suffix(path.suffix + ".tmp")
    with open(tmp_path, "wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(_LENGTH.pack(len(header_bytes)))
        handle.write(header_bytes)
        handle.write(payload)
    os.replace(tmp_path, path)
    _LOGGER.debug("Saved checkpoint %s (%d tensors, %d bytes)", path, len(manifest), len(payload))
    return path


def read_header(path: str | Path) -> tuple[dict[str, Any], bytes]:
    with open(path, "rb") as handle:
        blob = handle.read()
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a mobichain checkpoint")
    cursor = len(CHECKPOINT_MAGIC)
    if len(blob) < cursor + _LENGTH.size:
        raise CheckpointError(f"{path} is truncated")
    (header_length,) = _LENGTH.unpack_from(blob, cursor)
    cursor += _LENGTH.size
    try:
        header = json.loads(blob[cursor:cursor + header_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path} has a corrupt header") from err
    return header, blob[cursor + header_length:]


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict[str, Any]]:
    """
    Read parameters written by :func:`save_checkpoint`.

    Returns:
        The parameters (with their stored trainable groups) and the ``extra`` metadata

    Raises:
        CheckpointError: On bad magic, unsupported version, digest or manifest mismatch
    """
    header, payload = read_header(path)
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")

    config_dict, manifest = header.get("config", {}), header.get("manifest", [])
    if _manifest_digest(config_dict, manifest) != header.get("manifest_digest"):
        raise CheckpointError(f"{path}: manifest digest mismatch")
    if hashlib.sha256(payload).hexdigest() != header.get("payload_digest"):
        raise CheckpointError(f"{path}: payload digest mismatch")

    try:
        config = ModelConfig(**config_dict)
    except (TypeError, InvalidConfigError) as err:
        raise CheckpointError(f"{path}: invalid model config: {err}") from err

    expected = parameter_shapes(config)
    if [(entry["name"], tuple(entry["shape"])) for entry in manifest] != expected:
        raise CheckpointError(f"{path}: tensor manifest does not match the model architecture")

    tensors: dict[str, Tensor] = {}
    for entry in manifest:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"]))
        end = entry["offset"] + count * dtype.itemsize
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past the payload")
        array = np.frombuffer(payload, dtype=dtype, count=count, offset=entry["offset"]).reshape(entry["shape"])
        native = array.astype(dtype.newbyteorder("="))
        tensors[entry["name"]] = Tensor(native, name=entry["name"], dtype=native.dtype)

    params = ModelParams(config, tensors)
    params.set_trainable(header.get("trainable_groups", []) or params.trainable_groups)
    _LOGGER.debug("Loaded checkpoint %s", path)
    return params, header.get("extra", {})
