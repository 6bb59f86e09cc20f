"""Checkpoint files: a JSON manifest followed by raw little-endian parameters.

Layout::

    b"FXCK" | u32 version | u32 manifest length | manifest (UTF-8 JSON) | payload

Manifest offsets are relative to the start of the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

from .encoder import EncoderDescriptor, ModelParams, ParamRecord, RecordError, export_params, import_params

MAGIC = b"FXCK"
VERSION = 1
_HEAD = struct.Struct("<4sII")


def save_checkpoint(params: ModelParams, path, round_index: int = 0, config_hash: str = "",
                    **extra) -> None:
    record = export_params(params)
    manifest = dict(record.manifest, round=round_index, config_hash=config_hash, **extra)
    blob = json.dumps(manifest, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        fh.write(record.payload)
    tmp.replace(path)


def read_checkpoint(path) -> ParamRecord:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise RecordError(f"{path}: too short for a checkpoint header")
    magic, version, length = _HEAD.unpack_from(raw)
    if magic != MAGIC or version != VERSION:
        raise RecordError(f"{path}: not a version-{VERSION} checkpoint")
    if _HEAD.size + length > len(raw):
        raise RecordError(f"{path}: manifest truncated")
    try:
        manifest = json.loads(raw[_HEAD.size:_HEAD.size + length])
    except ValueError as exc:
        raise RecordError(f"{path}: manifest is not JSON ({exc})") from exc
    return ParamRecord(manifest, raw[_HEAD.size + length:])


def load_checkpoint(path, expected: EncoderDescriptor | None = None) -> tuple[ModelParams, dict]:
    record = read_checkpoint(path)
    return import_params(record, expected), record.manifest
