"""Binary checkpoint format.

Layout (little-endian)::

    b"IRCM"  u16 version  u32 record_count
    record_count x ( u16 name_len  name(utf-8)  u8 rank  u32 dims[rank]  f32 payload )
    u32 config_len  config(utf-8 JSON of IrcamConfig)
"""

import logging
import struct
from pathlib import Path
from typing import Dict, Mapping, Tuple, Union

import numpy as np

from .config import IrcamConfig, network_config_from_text
from .errors import CheckpointError, ConfigError
from .network import IrcamNetwork
from .tensor import parameter

logger = logging.getLogger(__name__)

MAGIC = b"IRCM"
FORMAT_VERSION = 1
SUFFIX = ".ircm"


def encode_checkpoint(cfg: IrcamConfig, values: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(values))]
    for name, value in values.items():
        encoded = name.encode("utf-8")
        array = np.asarray(value, dtype="<f4")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array).tobytes())
    config_text = cfg.model_dump_json().encode("utf-8")
    chunks.append(struct.pack("<I", len(config_text)))
    chunks.append(config_text)
    return b"".join(chunks)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        available = len(self.blob) - self.offset
        if n > available:
            raise CheckpointError(
                f"truncated checkpoint: {what} needs {n} bytes, {available} left",
                self.offset,
            )
        chunk = self.blob[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(blob: bytes) -> Tuple[IrcamConfig, Dict[str, np.ndarray]]:
    reader = _Reader(blob)
    magic = reader.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version, count = reader.unpack("<HI", "header")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}", 4)

    values: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "name length")
        start = reader.offset
        try:
            name = reader.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"record name is not UTF-8: {e}", start) from e
        (rank,) = reader.unpack("<B", f"rank of {name}")
        dims = reader.unpack(f"<{rank}I", f"dims of {name}")
        n_values = int(np.prod(dims)) if rank else 1
        start = reader.offset
        payload = reader.take(4 * n_values, f"payload of {name}")
        array = np.frombuffer(payload, dtype="<f4")
        finite = np.isfinite(array)
        if not np.all(finite):
            first = int(np.argmin(finite))
            raise CheckpointError(
                f"{name} holds a non-finite value ({array[first]})", start + 4 * first
            )
        values[name] = array.reshape(dims).copy()

    (config_len,) = reader.unpack("<I", "config length")
    start = reader.offset
    text = reader.take(config_len, "config")
    try:
        cfg = network_config_from_text(text.decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as e:
        raise CheckpointError(f"embedded config is invalid: {e}", start) from e
    if reader.offset != len(blob):
        raise CheckpointError(
            f"{len(blob) - reader.offset} trailing bytes after config", reader.offset
        )
    return cfg, values


def write_checkpoint(path: Union[str, Path], network: IrcamNetwork) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = {name: p.data for name, p in network.params.items()}
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(network.cfg, values))
    tmp.replace(path)
    logger.info("wrote checkpoint %s", path)
    return path


def read_checkpoint(path: Union[str, Path]) -> Tuple[IrcamConfig, Dict[str, np.ndarray]]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(blob)


def load_network(path: Union[str, Path]) -> IrcamNetwork:
    """Rebuild the network stored in a checkpoint."""
    cfg, values = read_checkpoint(path)
    expected = IrcamNetwork(cfg)
    missing = set(expected.params) ^ set(values)
    if missing:
        raise CheckpointError(
            f"checkpoint records do not match its config: {sorted(missing)[:5]}"
        )
    params = {}
    for name, template in expected.params.items():
        if values[name].shape != template.shape:
            raise CheckpointError(
                f"{name}: stored shape {values[name].shape}, config expects {template.shape}"
            )
        params[name] = parameter(values[name])
    return IrcamNetwork(cfg, params)


def checkpoint_name(agent_steps: int) -> str:
    return f"ckpt_{agent_steps}{SUFFIX}"
