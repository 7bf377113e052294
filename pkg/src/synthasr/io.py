"""On-disk formats: spectrogram files, WAV input, checkpoint containers.

Spectrogram file (little-endian)::

    b"SMEL" | u16 version | u32 n_mels | u32 L | 8-byte MelConfig digest
    | n_mels * L float32, row-major

Checkpoint container (little-endian)::

    b"SASRCKPT" | u32 version | u32 header length | UTF-8 JSON header
    | tensor blobs in header order

The header is canonical JSON (sorted keys, no whitespace) and lists each
tensor's name, dtype, shape, offset and size, so a container loaded and
saved again is byte-identical.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mel import MelConfig, MelSpectrogram, compute_log_mel

MEL_MAGIC = b"SMEL"
MEL_VERSION = 1
_MEL_HEADER = struct.Struct("<4sHII8s")

CKPT_MAGIC = b"SASRCKPT"
CKPT_VERSION = 1
_CKPT_PREFIX = struct.Struct("<8sII")

_DTYPES = {"float32": np.float32, "float64": np.float64, "int64": np.int64, "int32": np.int32}


class FormatError(ValueError):
    pass


def encode_mel(mel: MelSpectrogram) -> bytes:
    header = _MEL_HEADER.pack(MEL_MAGIC, MEL_VERSION, mel.n_mels, mel.L, mel.config.config_hash())
    return header + mel.values.astype("<f4").tobytes(order="C")


def write_mel(path: str | os.PathLike, mel: MelSpectrogram) -> None:
    Path(path).write_bytes(encode_mel(mel))


def read_mel(path: str | os.PathLike, config: MelConfig | None = None) -> MelSpectrogram:
    config = config or MelConfig()
    data = Path(path).read_bytes()
    if len(data) < _MEL_HEADER.size:
        raise FormatError(f"{path}: truncated spectrogram header")
    magic, version, n_mels, length, digest = _MEL_HEADER.unpack_from(data)
    if magic != MEL_MAGIC:
        raise FormatError(f"{path}: not a spectrogram file")
    if version != MEL_VERSION:
        raise FormatError(f"{path}: unsupported spectrogram version {version}")
    if n_mels != config.n_mels or digest != config.config_hash():
        raise FormatError(f"{path}: spectrogram was extracted with different mel parameters")
    body = data[_MEL_HEADER.size:]
    if len(body) != 4 * n_mels * length:
        raise FormatError(f"{path}: expected {n_mels}x{length} floats, got {len(body)} bytes")
    values = np.frombuffer(body, dtype="<f4").reshape(n_mels, length)
    return MelSpectrogram(values.astype(np.float32), config)


def read_wav(path: str | os.PathLike, config: MelConfig | None = None) -> np.ndarray:
    """Mono 16-bit PCM WAV as float samples in [-1, 1)."""
    from scipy.io import wavfile

    config = config or MelConfig()
    rate, data = wavfile.read(path)
    if rate != config.sample_rate_hz:
        raise FormatError(f"{path}: sample rate {rate} Hz, expected {config.sample_rate_hz} Hz")
    if data.ndim != 1:
        raise FormatError(f"{path}: expected mono audio")
    if data.dtype != np.int16:
        raise FormatError(f"{path}: expected 16-bit PCM, got {data.dtype}")
    return data.astype(np.float64) / 32768.0


def load_features(path: str | os.PathLike, config: MelConfig | None = None) -> MelSpectrogram:
    """Spectrogram file as-is, or a WAV file through the speech front-end."""
    config = config or MelConfig()
    if str(path).lower().endswith(".wav"):
        return compute_log_mel(read_wav(path, config), config)
    return read_mel(path, config)


@dataclass
class Checkpoint:
    component: str
    config: dict
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        index = []
        blobs = []
        offset = 0
        for name, arr in self.tensors.items():
            arr = np.ascontiguousarray(arr)
            dtype = arr.dtype.name
            if dtype not in _DTYPES:
                raise FormatError(f"tensor {name!r} has unsupported dtype {dtype}")
            raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
            index.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = {
            "component": self.component,
            "config": self.config,
            "meta": self.meta,
            "tensors": index,
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return _CKPT_PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < _CKPT_PREFIX.size:
            raise FormatError("truncated checkpoint")
        magic, version, hlen = _CKPT_PREFIX.unpack_from(data)
        if magic != CKPT_MAGIC:
            raise FormatError("not a checkpoint container")
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        start = _CKPT_PREFIX.size
        header = json.loads(data[start:start + hlen].decode("utf-8"))
        body = memoryview(data)[start + hlen:]
        tensors = OrderedDict()
        for item in header["tensors"]:
            dtype = np.dtype(_DTYPES[item["dtype"]]).newbyteorder("<")
            raw = body[item["offset"]:item["offset"] + item["nbytes"]]
            tensors[item["name"]] = np.frombuffer(raw, dtype=dtype).reshape(item["shape"]).astype(_DTYPES[item["dtype"]])
        return cls(header["component"], header["config"], tensors, header["meta"])

    def save(self, path: str | os.PathLike) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(str(path) + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
