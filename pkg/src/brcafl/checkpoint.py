"""Binary checkpoints for model parameters and anomaly detectors.

File layout::

    magic        8 bytes   b"BRCAFL01"
    header_len   uint32    little-endian
    header       JSON      utf-8, ``header_len`` bytes
    values       float64   little-endian, one per parameter

The header records the :class:`ModelSpec` fields and, for detectors, the
adaptation count and learning rate. Values are written bit for bit, so a
loaded checkpoint reproduces scores exactly.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Union

import numpy as np

from .aadm import DetectorState
from .models import ModelSpec
from .params import DimensionError, ParamVector

MAGIC = b"BRCAFL01"
PathLike = Union[str, os.PathLike]


class CheckpointError(ValueError):
    pass


def _write(path: PathLike, header: dict, values: np.ndarray) -> None:
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())
    os.replace(tmp, path)


def _read(path: PathLike) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12 : 12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    body = raw[12 + n :]
    if len(body) % 8:
        raise CheckpointError(f"{path}: truncated parameter block")
    return header, np.frombuffer(body, dtype="<f8").astype(np.float64)


def _spec_from(header: dict) -> ModelSpec:
    spec = dict(header["spec"])
    spec["hidden_dims"] = tuple(spec["hidden_dims"])
    return ModelSpec(**spec)


def _load_params(spec: ModelSpec, values: np.ndarray, path: PathLike) -> ParamVector:
    try:
        return ParamVector(values, spec.layout())
    except DimensionError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc


def save_model(path: PathLike, spec: ModelSpec, params: ParamVector) -> None:
    if params.layout != spec.layout():
        raise DimensionError("params do not match spec")
    _write(path, {"type": "model", "spec": asdict(spec)}, params.values)


def load_model(path: PathLike) -> tuple[ModelSpec, ParamVector]:
    header, values = _read(path)
    if header.get("type") != "model":
        raise CheckpointError(f"{path}: expected a model checkpoint, got {header.get('type')!r}")
    spec = _spec_from(header)
    return spec, _load_params(spec, values, path)


def save_detector(path: PathLike, detector: DetectorState) -> None:
    header = {
        "type": "detector",
        "spec": asdict(detector.spec),
        "adapt_count": detector.adapt_count,
        "lr": detector.lr,
    }
    _write(path, header, detector.params.values)


def load_detector(path: PathLike) -> DetectorState:
    header, values = _read(path)
    if header.get("type") != "detector":
        raise CheckpointError(f"{path}: expected a detector checkpoint, got {header.get('type')!r}")
    spec = _spec_from(header)
    return DetectorState(spec, _load_params(spec, values, path), int(header["adapt_count"]), float(header["lr"]))
