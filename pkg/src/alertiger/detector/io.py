"""Versioned binary weight files.

Layout::

    b"ALERTIGER\\n"               magic
    uint64 little-endian         header length
    header                       UTF-8 JSON, sorted keys
    payload                      concatenated little-endian float64 tensors

The header lists every model (config + tensor table) and the SHA-256 of the
payload, so truncation and corruption are detected on load.  Files are a
pure function of the weights: saving the same models twice gives the same
bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from . import network as nw
from .model import DetectorBundle, ForecastModel
from .network import ModelConfig

MAGIC = b"ALERTIGER\n"
FORMAT_VERSION = 1


class ModelFileError(ValueError):
    pass


class ModelVersionError(ModelFileError):
    pass


def dumps_models(models: Iterable[ForecastModel]) -> bytes:
    payload = bytearray()
    entries = []
    for model in models:
        tensors = []
        for name in nw.param_names():
            arr = np.asarray(model.params[name], dtype="<f8")
            tensors.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
            payload += arr.tobytes()
        entries.append({"config": model.config.as_dict(), "tensors": tensors})
    header = {
        "format_version": FORMAT_VERSION,
        "models": entries,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + bytes(payload)


def loads_models(blob: bytes) -> list[ForecastModel]:
    if not blob.startswith(MAGIC):
        raise ModelFileError("not an alertiger weight file (bad magic)")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise ModelFileError("truncated weight file (header length)")
    (hlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    if len(blob) < pos + hlen:
        raise ModelFileError("truncated weight file (header)")
    try:
        header = json.loads(blob[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFileError(f"corrupt header: {exc}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelVersionError(f"unsupported weight file version {version!r} (expected {FORMAT_VERSION})")
    payload = blob[pos + hlen :]
    if len(payload) != header["payload_bytes"]:
        raise ModelFileError(f"truncated weight file: payload {len(payload)} of {header['payload_bytes']} bytes")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ModelFileError("weight payload checksum mismatch")

    models = []
    for entry in header["models"]:
        config = ModelConfig(**entry["config"])
        params = {}
        for t in entry["tensors"]:
            shape = tuple(t["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(payload, dtype="<f8", count=count, offset=t["offset"])
            params[t["name"]] = arr.reshape(shape).astype(np.float64)
        models.append(ForecastModel(config, params))
    return models


def save_models(models: Iterable[ForecastModel] | DetectorBundle, path: str | Path) -> None:
    if isinstance(models, DetectorBundle):
        models = models.models.values()
    Path(path).write_bytes(dumps_models(models))


def load_models(path: str | Path) -> list[ForecastModel]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ModelFileError(f"cannot read weight file {path}: {exc}") from exc
    return loads_models(blob)


def save_model(model: ForecastModel, path: str | Path) -> None:
    save_models([model], path)


def load_model(path: str | Path) -> ForecastModel:
    models = load_models(path)
    if len(models) != 1:
        raise ModelFileError(f"{path} holds {len(models)} models; use load_bundle")
    return models[0]


def load_bundle(path: str | Path) -> DetectorBundle:
    return DetectorBundle(load_models(path))
