"""
Checkpoint files.

Layout (little-endian):

    b"XMLPCKPT" | u32 version | section*

    section := u16 name_len | name (utf-8) | u64 payload_len | payload
               | u32 crc32(payload)

The first section, "meta", is sorted-key JSON describing the model spec,
train config, train state, RNG state and the shape/dtype of every array
section that follows. Array payloads are raw little-endian bytes.
"""
import json
import struct
import typing as t
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelSpec, TrainConfig
from .data import NormStats
from .errors import CheckpointError
from .logging import get_logger
from .model import Model, build_model
from .train import TrainState

logger = get_logger()

MAGIC = b"XMLPCKPT"
VERSION = 1

_HEADER = struct.Struct("<8sI")
_NAME_LEN = struct.Struct("<H")
_PAYLOAD_LEN = struct.Struct("<Q")
_CRC = struct.Struct("<I")


@dataclass
class Checkpoint:
    model: Model
    state: TrainState
    stats: NormStats
    train_cfg: TrainConfig
    dataset: str


def _le(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def _arrays(model: Model, state: TrainState,
            stats: NormStats) -> t.List[t.Tuple[str, np.ndarray]]:
    out = [(f"param/{p.name}", p.value) for p in model.params()]
    out += [(f"buffer/{name}", buf) for name, buf in model.buffers()]
    out += [(f"velocity/{name}", v) for name, v in sorted(state.velocity.items())]
    out += [("norm/mean", stats.mean), ("norm/std", stats.std)]
    return out


def _section(name: str, payload: bytes) -> bytes:
    raw_name = name.encode()
    return (_NAME_LEN.pack(len(raw_name)) + raw_name + _PAYLOAD_LEN.pack(len(payload))
            + payload + _CRC.pack(zlib.crc32(payload)))


def dumps(model: Model, state: TrainState, stats: NormStats,
          train_cfg: TrainConfig, dataset: str = "") -> bytes:
    arrays = [(name, _le(arr)) for name, arr in _arrays(model, state, stats)]
    meta = {
        "model": model.spec.model_dump(mode="json"),
        "train": train_cfg.model_dump(mode="json"),
        "dataset": dataset,
        "state": {
            "lr": state.lr,
            "epoch": state.epoch,
            "loss_history": list(state.loss_history),
            "best_test_acc": state.best_test_acc,
            "best_epoch": state.best_epoch,
            "last_decay_epoch": state.last_decay_epoch,
            "rng": state.rng.bit_generator.state,
        },
        "arrays": {
            name: {"shape": list(arr.shape), "dtype": arr.dtype.str}
            for name, arr in arrays
        },
    }

    out = [_HEADER.pack(MAGIC, VERSION)]
    out.append(_section("meta", json.dumps(meta, sort_keys=True).encode()))
    out.extend(_section(name, arr.tobytes()) for name, arr in arrays)
    return b"".join(out)


def save_checkpoint(path: Path, model: Model, state: TrainState, stats: NormStats,
                    train_cfg: TrainConfig, dataset: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(model, state, stats, train_cfg, dataset))
    tmp.replace(path)
    logger.info("wrote checkpoint %s (epoch %d)", path, state.epoch)
    return path


def _read_sections(raw: bytes, path: t.Any) -> t.Dict[str, bytes]:
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not an xmlp checkpoint")
    if version != VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version} (expected {VERSION})")

    sections: t.Dict[str, bytes] = {}
    pos = _HEADER.size
    while pos < len(raw):
        start = pos
        try:
            (name_len,) = _NAME_LEN.unpack_from(raw, pos)
            pos += _NAME_LEN.size
            name = raw[pos:pos + name_len].decode()
            pos += name_len
            (size,) = _PAYLOAD_LEN.unpack_from(raw, pos)
            pos += _PAYLOAD_LEN.size
            if pos + size + _CRC.size > len(raw):
                raise CheckpointError(
                    f"{path}: truncated section {name!r} at byte {start}")
            payload = raw[pos:pos + size]
            pos += size
            (crc,) = _CRC.unpack_from(raw, pos)
            pos += _CRC.size
        except (struct.error, UnicodeDecodeError):
            raise CheckpointError(
                f"{path}: truncated section at byte {start}") from None

        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"{path}: checksum mismatch in section {name!r}")
        sections[name] = payload

    if "meta" not in sections:
        raise CheckpointError(f"{path}: missing meta section")
    return sections


def loads(raw: bytes, path: t.Any = "<bytes>") -> Checkpoint:
    sections = _read_sections(raw, path)
    try:
        meta = json.loads(sections["meta"])
        spec = ModelSpec(**meta["model"])
        train_cfg = TrainConfig(**meta["train"])
        layout = meta["arrays"]
        st = meta["state"]
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: malformed meta section: {e}") from None

    def array(name: str) -> np.ndarray:
        if name not in sections or name not in layout:
            raise CheckpointError(f"{path}: missing array {name!r}")
        info = layout[name]
        dtype = np.dtype(info["dtype"])
        data = sections[name]
        expected = int(np.prod(info["shape"], dtype=np.int64)) * dtype.itemsize
        if len(data) != expected:
            raise CheckpointError(
                f"{path}: array {name!r} has {len(data)} bytes, expected {expected}")
        arr = np.frombuffer(data, dtype=dtype).reshape(info["shape"])
        return arr.astype(dtype.newbyteorder("="))

    if "param/classifier.weight" not in layout:
        raise CheckpointError(f"{path}: missing array 'param/classifier.weight'")
    dtype = np.dtype(layout["param/classifier.weight"]["dtype"]).newbyteorder("=")
    model = build_model(spec, dtype=dtype)
    params = {p.name: p for p in model.params()}
    for p in model.params():
        value = array(f"param/{p.name}")
        if value.shape != p.value.shape:
            raise CheckpointError(
                f"{path}: {p.name} has shape {value.shape}, "
                f"expected {p.value.shape}")
        p.value[...] = value
    for name, buf in model.buffers():
        value = array(f"buffer/{name}")
        if value.shape != buf.shape:
            raise CheckpointError(
                f"{path}: buffer {name} has shape {value.shape}, "
                f"expected {buf.shape}")
        buf[...] = value

    rng = np.random.default_rng()
    try:
        rng.bit_generator.state = st["rng"]
    except (ValueError, TypeError, KeyError) as e:
        raise CheckpointError(f"{path}: bad RNG state: {e}") from None

    velocity = {
        name[len("velocity/"):]: array(name)
        for name in sorted(layout) if name.startswith("velocity/")
    }
    try:
        state = TrainState(
            lr=float(st["lr"]),
            rng=rng,
            epoch=int(st["epoch"]),
            velocity=velocity,
            loss_history=[float(v) for v in st["loss_history"]],
            best_test_acc=float(st["best_test_acc"]),
            best_epoch=int(st["best_epoch"]),
            last_decay_epoch=st["last_decay_epoch"],
        )
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: malformed train state: {e!r}") from None
    for name, vel in velocity.items():
        if name not in params:
            raise CheckpointError(f"{path}: momentum buffer for unknown {name!r}")
        if vel.shape != params[name].value.shape:
            raise CheckpointError(
                f"{path}: momentum buffer {name} has shape {vel.shape}, "
                f"expected {params[name].value.shape}")
    stats = NormStats(array("norm/mean"), array("norm/std"))
    return Checkpoint(model, state, stats, train_cfg, meta.get("dataset", ""))


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} doesn't exist")
    ckpt = loads(path.read_bytes(), path)
    logger.info("loaded checkpoint %s (epoch %d)", path, ckpt.state.epoch)
    return ckpt
