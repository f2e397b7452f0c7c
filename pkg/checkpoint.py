"""
Формат чекпоинтов .ftckpt (и датасетов .ftdata).

Раскладка файла:
    8 байт  magic ("FTCKPT01" / "FTDATA01")
    4 байта длина манифеста, little-endian uint32
    N байт  UTF-8 JSON манифест {version, config, tensors: [{name, shape, dtype, offset, len}]}
    blob    сырые данные тензоров подряд, offset считается от начала blob

Формат описан полностью, чтобы внешние инструменты могли читать его без этого кода.
"""
import json
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass
from typing import Any, Dict, List, Tuple

import numpy as np
from loguru import logger

from errors import ConfigError, FormatError
from mininet import Model, ModelConfig, build_model
from settings import validate_config
from synth_data import Dataset

CKPT_MAGIC = b"FTCKPT01"
DATA_MAGIC = b"FTDATA01"
FORMAT_VERSION = 1
HEADER_SIZE = len(CKPT_MAGIC) + 4

DTYPES = {
    "f32le": np.dtype("<f4"),
    "i32le": np.dtype("<i4"),
}


@dataclass(frozen=True)
class TensorEntry:
    name: str
    shape: Tuple[int, ...]
    dtype: str
    offset: int
    length: int

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "shape": list(self.shape), "dtype": self.dtype,
                "offset": self.offset, "len": self.length}


@dataclass
class Checkpoint:
    """Разобранный файл: манифест, config из манифеста и тензоры в порядке манифеста"""
    manifest: List[TensorEntry]
    meta: Dict[str, Any]
    tensors: "OrderedDict[str, np.ndarray]"

    @property
    def config(self) -> Dict[str, Any]:
        return self.meta.get("config", {})


# ==================== LOW LEVEL ====================

def atomic_write(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(directory):
        raise ConfigError(f"output directory does not exist: {directory}")
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp_path, path)
    except Exception:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def encode_container(magic: bytes, meta: Dict[str, Any], tensors: List[Tuple[str, np.ndarray, str]]) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, array, tag in tensors:
        data = np.ascontiguousarray(array, dtype=DTYPES[tag]).tobytes()
        entries.append(TensorEntry(name, tuple(int(d) for d in array.shape), tag, offset, len(data)).to_dict())
        chunks.append(data)
        offset += len(data)
    manifest = dict(meta)
    manifest["version"] = FORMAT_VERSION
    manifest["tensors"] = entries
    manifest_bytes = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    return magic + struct.pack("<I", len(manifest_bytes)) + manifest_bytes + b"".join(chunks)


def decode_container(payload: bytes, magic: bytes, source: str = "<bytes>") -> Checkpoint:
    size = len(payload)
    if size < HEADER_SIZE:
        raise FormatError(f"{source}: file too short for header ({size} bytes)", offset=size)
    if payload[:len(magic)] != magic:
        raise FormatError(f"{source}: bad magic {payload[:len(magic)]!r}, expected {magic!r}", offset=0)
    (manifest_len,) = struct.unpack("<I", payload[len(magic):HEADER_SIZE])
    blob_start = HEADER_SIZE + manifest_len
    if blob_start > size:
        raise FormatError(f"{source}: manifest length {manifest_len} runs past end of file", offset=len(magic))

    try:
        manifest = json.loads(payload[HEADER_SIZE:blob_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{source}: manifest is not valid UTF-8 JSON ({e})", offset=HEADER_SIZE) from e
    if not isinstance(manifest, dict) or not isinstance(manifest.get("tensors"), list):
        raise FormatError(f"{source}: manifest must be an object with a 'tensors' list", offset=HEADER_SIZE)
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"{source}: unsupported format version {manifest.get('version')!r}", offset=HEADER_SIZE)

    entries = [_parse_entry(raw, source) for raw in manifest["tensors"]]
    names = [e.name for e in entries]
    if len(set(names)) != len(names):
        raise FormatError(f"{source}: duplicate tensor names in manifest", offset=HEADER_SIZE)

    blob_len = size - blob_start
    covered = 0
    for entry in sorted(entries, key=lambda e: e.offset):
        if entry.offset < covered:
            raise FormatError(f"{source}: tensor '{entry.name}' overlaps the previous tensor",
                              offset=blob_start + entry.offset)
        if entry.offset + entry.length > blob_len:
            raise FormatError(f"{source}: blob truncated inside tensor '{entry.name}'", offset=blob_start + blob_len)
        covered = entry.offset + entry.length
    if sum(e.length for e in entries) != blob_len:
        raise FormatError(f"{source}: blob length {blob_len} inconsistent with manifest", offset=blob_start + covered)

    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for entry in entries:
        dtype = DTYPES[entry.dtype]
        raw = np.frombuffer(payload, dtype=dtype, count=entry.length // dtype.itemsize,
                            offset=blob_start + entry.offset)
        tensors[entry.name] = raw.astype(dtype.newbyteorder("="), copy=True).reshape(entry.shape)

    meta = {k: v for k, v in manifest.items() if k != "tensors"}
    return Checkpoint(entries, meta, tensors)


def _parse_entry(raw: Any, source: str) -> TensorEntry:
    try:
        name, shape, tag = raw["name"], raw["shape"], raw["dtype"]
        offset, length = raw["offset"], raw["len"]
    except (TypeError, KeyError) as e:
        raise FormatError(f"{source}: malformed manifest entry {raw!r}", offset=HEADER_SIZE) from e
    if not isinstance(name, str) or not isinstance(shape, list) or not 1 <= len(shape) <= 4:
        raise FormatError(f"{source}: bad name/shape in manifest entry {raw!r}", offset=HEADER_SIZE)
    if not all(isinstance(d, int) and d > 0 for d in shape):
        raise FormatError(f"{source}: tensor '{name}' has non-positive dimensions", offset=HEADER_SIZE)
    if tag not in DTYPES:
        raise FormatError(f"{source}: tensor '{name}' has unsupported dtype {tag!r}", offset=HEADER_SIZE)
    if not isinstance(offset, int) or not isinstance(length, int) or offset < 0:
        raise FormatError(f"{source}: tensor '{name}' has bad offset/len", offset=HEADER_SIZE)
    expected = int(np.prod(shape)) * DTYPES[tag].itemsize
    if length != expected:
        raise FormatError(f"{source}: tensor '{name}' len {length} != {expected} implied by shape", offset=HEADER_SIZE)
    return TensorEntry(name, tuple(shape), tag, offset, length)


def _read(path: str) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from e


# ==================== CHECKPOINTS ====================

def save_checkpoint(model: Model, path: str) -> None:
    tensors = [(name, value, "f32le") for name, value in model.state_tensors().items()]
    payload = encode_container(CKPT_MAGIC, {"config": model.config.model_dump()}, tensors)
    atomic_write(path, payload)
    logger.info(f"Checkpoint saved: {path} ({len(tensors)} tensors, {len(payload)} bytes)")


def read_checkpoint(path: str) -> Checkpoint:
    """Только разбор файла, без сборки модели (используется анализатором дивергенции)"""
    ckpt = decode_container(_read(path), CKPT_MAGIC, path)
    if not isinstance(ckpt.meta.get("config"), dict):
        raise FormatError(f"{path}: manifest has no model config", offset=HEADER_SIZE)
    for entry in ckpt.manifest:
        if entry.dtype != "f32le":
            raise FormatError(f"{path}: checkpoint tensor '{entry.name}' must be f32le", offset=HEADER_SIZE)
    return ckpt


def load_checkpoint(path: str) -> Model:
    ckpt = read_checkpoint(path)
    try:
        config = validate_config(ModelConfig, ckpt.config, "checkpoint config")
        model = build_model(config)
    except ConfigError as e:
        raise FormatError(f"{path}: {e}", offset=HEADER_SIZE) from e

    expected = model.state_tensors()
    if list(expected) != list(ckpt.tensors):
        missing = sorted(set(expected) - set(ckpt.tensors))
        extra = sorted(set(ckpt.tensors) - set(expected))
        raise FormatError(f"{path}: tensors do not match architecture (missing {missing}, unexpected {extra})",
                          offset=HEADER_SIZE)
    for name, target in expected.items():
        source = ckpt.tensors[name]
        if source.shape != target.shape:
            raise FormatError(f"{path}: tensor '{name}' has shape {source.shape}, expected {target.shape}",
                              offset=HEADER_SIZE)
        np.copyto(target, source)
    logger.info(f"Checkpoint loaded: {path}")
    return model


# ==================== DATASETS ====================

def save_dataset(dataset: Dataset, path: str, meta: Dict[str, Any] = None) -> None:
    tensors = [
        ("images", dataset.images, "f32le"),
        ("labels", dataset.labels, "i32le"),
    ]
    payload = encode_container(DATA_MAGIC, {"config": dict(meta or {})}, tensors)
    atomic_write(path, payload)
    logger.info(f"Dataset saved: {path} ({len(dataset)} samples)")


def load_dataset(path: str) -> Dataset:
    ckpt = decode_container(_read(path), DATA_MAGIC, path)
    images, labels = ckpt.tensors.get("images"), ckpt.tensors.get("labels")
    if images is None or labels is None or images.ndim != 4 or labels.ndim != 1:
        raise FormatError(f"{path}: dataset needs images [N,C,H,W] and labels [N]", offset=HEADER_SIZE)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{path}: {images.shape[0]} images but {labels.shape[0]} labels", offset=HEADER_SIZE)
    return Dataset(images.astype(np.float32), labels.astype(np.int64))
