"""Binary checkpoint and dataset files.

Checkpoint layout: magic "DICO", u32 version, u32 config-text length plus
UTF-8 bytes, then tensor records.  Each record is a u32 name length, the
UTF-8 name, a u8 rank, rank u32 dims, then little-endian float32 data.
Record names are namespaced: param/, adam_m/, adam_v/, ema/, meta/.

Dataset layout: magic "DIDS", u32 version, u32 N/C/H/W, N u32 labels, then
N*C*H*W little-endian float32 pixels.
"""

from __future__ import annotations

import dataclasses
import struct
from typing import BinaryIO

import numpy as np

from .errors import SerializationError
from .modules import DiCoModel, ModelConfig
from .train import AdamW, Ema, ToyDataset

CHECKPOINT_MAGIC = b"DICO"
DATASET_MAGIC = b"DIDS"
CHECKPOINT_VERSION = 1
DATASET_VERSION = 1


# -- model config text --------------------------------------------------------


def config_to_text(config: ModelConfig) -> str:
    """Stable key=value serialization of a model config."""
    lines = []
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> ModelConfig:
    kwargs = {}
    field_types = {f.name: f for f in dataclasses.fields(ModelConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SerializationError(f"malformed config line {lineno}: {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in field_types:
            raise SerializationError(f"unknown model config key {key!r}")
        kwargs[key] = _parse_field(key, value)
    return ModelConfig(**kwargs)


def _parse_field(key: str, value: str):
    if key in ("depths", "stage_width_multipliers"):
        return tuple(int(v) for v in value.split(","))
    if key in ("ffn_ratio", "label_dropout_prob"):
        return float(value)
    if key in ("activation",):
        return value
    if key in ("use_cca",):
        return value.lower() in ("true", "1", "yes")
    return int(value)


# -- low-level records ----------------------------------------------------------


def _write_record(f: BinaryIO, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    f.write(struct.pack("<I", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        f.write(struct.pack("<I", dim))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(f: BinaryIO, count: int, what: str) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise SerializationError(f"file truncated while reading {what}")
    return data


def _read_record(f: BinaryIO) -> tuple[str, np.ndarray] | None:
    head = f.read(4)
    if not head:
        return None
    if len(head) != 4:
        raise SerializationError("file truncated while reading record header")
    (name_len,) = struct.unpack("<I", head)
    name = _read_exact(f, name_len, "record name").decode("utf-8")
    (rank,) = struct.unpack("<B", _read_exact(f, 1, f"rank of {name!r}"))
    dims = [
        struct.unpack("<I", _read_exact(f, 4, f"dims of {name!r}"))[0] for _ in range(rank)
    ]
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    raw = _read_exact(f, count * 4, f"data of {name!r}")
    arr = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    return name, arr


def _read_all_records(f: BinaryIO) -> dict[str, np.ndarray]:
    records: dict[str, np.ndarray] = {}
    while True:
        item = _read_record(f)
        if item is None:
            return records
        records[item[0]] = item[1]


# -- checkpoints ---------------------------------------------------------------------


def save_checkpoint(path, model: DiCoModel, opt: AdamW, ema: Ema, step: int) -> None:
    """Write parameters, optimizer moments, EMA shadows, and the step counter."""
    config_text = config_to_text(model.config).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(config_text)))
        f.write(config_text)
        named = list(model.named_parameters())
        for name, p in named:
            _write_record(f, f"param/{name}", p.data)
        for name, _ in named:
            _write_record(f, f"adam_m/{name}", opt.m[name])
        for name, _ in named:
            _write_record(f, f"adam_v/{name}", opt.v[name])
        for name, _ in named:
            _write_record(f, f"ema/{name}", ema.shadow[name])
        _write_record(f, "meta/step", np.array([step], dtype=np.float32))
        _write_record(f, "meta/opt_step", np.array([opt.step_count], dtype=np.float32))


def read_checkpoint_config(path) -> ModelConfig:
    """The model config embedded in a checkpoint, without loading tensors."""
    with open(path, "rb") as f:
        _check_header(f)
        return config_from_text(_read_config_text(f))


def _check_header(f: BinaryIO) -> None:
    magic = _read_exact(f, 4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise SerializationError(
            f"bad checkpoint magic {magic!r}; expected {CHECKPOINT_MAGIC!r}"
        )
    (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
    if version != CHECKPOINT_VERSION:
        raise SerializationError(
            f"unsupported checkpoint version {version}; expected {CHECKPOINT_VERSION}"
        )


def _read_config_text(f: BinaryIO) -> str:
    (length,) = struct.unpack("<I", _read_exact(f, 4, "config length"))
    return _read_exact(f, length, "config text").decode("utf-8")


def load_checkpoint(path, model: DiCoModel, opt: AdamW | None = None, ema: Ema | None = None) -> int:
    """Restore state in place; returns the stored training step.

    The embedded config must match the model's config exactly; missing
    sections (e.g. from truncation) are reported by name.
    """
    with open(path, "rb") as f:
        _check_header(f)
        stored = config_from_text(_read_config_text(f))
        if stored != model.config:
            raise SerializationError(
                "checkpoint config does not match the model: "
                f"stored {stored!r}, model {model.config!r}"
            )
        truncation: SerializationError | None = None
        try:
            records = _read_all_records(f)
        except SerializationError as exc:
            truncation = exc
            records = {}

    if truncation is not None:
        # Re-read what is intact so the missing-section check can name it.
        with open(path, "rb") as f:
            _check_header(f)
            _read_config_text(f)
            records = {}
            while True:
                try:
                    item = _read_record(f)
                except SerializationError:
                    break
                if item is None:
                    break
                records[item[0]] = item[1]

    named = list(model.named_parameters())
    required = [f"param/{name}" for name, _ in named]
    if opt is not None:
        required += [f"adam_m/{name}" for name, _ in named]
        required += [f"adam_v/{name}" for name, _ in named]
    if ema is not None:
        required += [f"ema/{name}" for name, _ in named]
    required += ["meta/step", "meta/opt_step"]
    for key in required:
        if key not in records:
            raise SerializationError(f"checkpoint truncated: missing section {key!r}")

    for name, p in named:
        arr = records[f"param/{name}"]
        if arr.shape != p.data.shape:
            raise SerializationError(
                f"shape mismatch for {name!r}: stored {arr.shape}, model {p.data.shape}"
            )
        p.data = arr.copy()
    if opt is not None:
        for name, _ in named:
            opt.m[name] = records[f"adam_m/{name}"].copy()
            opt.v[name] = records[f"adam_v/{name}"].copy()
        opt.step_count = int(records["meta/opt_step"][0])
    if ema is not None:
        ema.load_state({name: records[f"ema/{name}"].copy() for name, _ in named})
    return int(records["meta/step"][0])


# -- datasets ---------------------------------------------------------------------------


def save_dataset(path, dataset: ToyDataset) -> None:
    n, c, h, w = dataset.images.shape
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<IIIII", DATASET_VERSION, n, c, h, w))
        f.write(dataset.labels.astype("<u4").tobytes())
        f.write(np.ascontiguousarray(dataset.images, dtype="<f4").tobytes())


def load_dataset(path) -> ToyDataset:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != DATASET_MAGIC:
            raise SerializationError(f"bad dataset magic {magic!r}; expected {DATASET_MAGIC!r}")
        version, n, c, h, w = struct.unpack("<IIIII", _read_exact(f, 20, "dataset header"))
        if version != DATASET_VERSION:
            raise SerializationError(
                f"unsupported dataset version {version}; expected {DATASET_VERSION}"
            )
        labels = np.frombuffer(_read_exact(f, n * 4, "labels"), dtype="<u4").astype(np.int64)
        raw = _read_exact(f, n * c * h * w * 4, "pixels")
        images = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(n, c, h, w)
    return ToyDataset(images=images, labels=labels, spec=None)
