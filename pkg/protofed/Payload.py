"""Binary layouts for round payloads and parameter checkpoints.

Both layouts are sequences of little-endian tensor records::

    u16 name length | name (utf-8) | u8 dtype code | u8 ndim | u32 extents...
    | raw little-endian elements

A payload starts with ``PFPL``, the format version, client id, round, sample
count, group flags and the record counts of the adapter and prototype/head
groups. A checkpoint starts with ``PFCK``, the format version and a count of
named groups, each followed by its records.
"""
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Union

import numpy as np

import protofed.protofed_types as internal
from .protofed_aux import PayloadGroups, ProtocolError, VersionError

PAYLOAD_MAGIC = b"PFPL"
PAYLOAD_VERSION = 1
CHECKPOINT_MAGIC = b"PFCK"
CHECKPOINT_VERSION = 1

_PAYLOAD_HEADER = struct.Struct("<4sHIIQBII")
_CHECKPOINT_HEADER = struct.Struct("<4sHB")
_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


@dataclass
class RoundPayload(object):
    client_id: int
    round: int
    num_samples: int
    groups: PayloadGroups
    alpha: dict = field(default_factory=dict)
    phi: dict = field(default_factory=dict)
    byte_length: int = 0

    def __repr__(self):
        return "'RoundPayload: client {}, round {}, |D|={}, {}, {} bytes'".format(
            self.client_id, self.round, self.num_samples, self.groups.strings(),
            self.byte_length)

    @property
    def tensors(self) -> dict:
        return {**self.alpha, **self.phi}


def _encode_records(tensors: Mapping[str, np.ndarray]) -> bytes:
    chunks = []
    for name, value in tensors.items():
        arr = np.asarray(value)
        dtype = arr.dtype.newbyteorder("<")
        if dtype not in internal.__DtypeCode__:
            raise ProtocolError(f"cannot serialize tensor '{name}' of dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        chunks.append(_U16.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U8.pack(internal.__DtypeCode__[dtype]))
        chunks.append(_U8.pack(arr.ndim))
        chunks.extend(_U32.pack(extent) for extent in arr.shape)
        chunks.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return b"".join(chunks)


def _take(buf: bytes, offset: int, count: int, what: str) -> tuple[bytes, int]:
    end = offset + count
    if end > len(buf):
        raise ProtocolError(f"truncated {what}", offset=offset)
    return buf[offset:end], end


def _decode_name(raw: bytes, offset: int, what: str) -> str:
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ProtocolError(f"{what} is not valid UTF-8", offset=offset + e.start) from e


def _decode_records(buf: bytes, offset: int, count: int) -> tuple[dict, int]:
    tensors = {}
    for _ in range(count):
        raw, offset = _take(buf, offset, _U16.size, "record name length")
        (length,) = _U16.unpack(raw)
        raw, offset = _take(buf, offset, length, "record name")
        name = _decode_name(raw, offset - length, "record name")
        raw, offset = _take(buf, offset, 2, f"record header of '{name}'")
        code, ndim = raw[0], raw[1]
        if code not in internal.__CodeDtype__:
            raise ProtocolError(f"unknown dtype code {code} for '{name}'",
                                offset=offset - 2)
        dtype = internal.__CodeDtype__[code]
        raw, offset = _take(buf, offset, _U32.size * ndim,
                            f"extents of '{name}'")
        shape = struct.unpack(f"<{ndim}I", raw)
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        raw, offset = _take(buf, offset, nbytes, f"elements of '{name}'")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return tensors, offset


def serialize_payload(payload: RoundPayload) -> bytes:
    """Encodes a payload and records its size in ``byte_length``."""
    header = _PAYLOAD_HEADER.pack(
        PAYLOAD_MAGIC, PAYLOAD_VERSION, payload.client_id, payload.round,
        payload.num_samples, int(payload.groups), len(payload.alpha),
        len(payload.phi))
    data = header + _encode_records(payload.alpha) + _encode_records(payload.phi)
    payload.byte_length = len(data)
    return data


def deserialize_payload(data: bytes) -> RoundPayload:
    raw, offset = _take(data, 0, _PAYLOAD_HEADER.size, "payload header")
    (magic, version, client_id, rnd, num_samples, flags, n_alpha,
     n_phi) = _PAYLOAD_HEADER.unpack(raw)
    if magic != PAYLOAD_MAGIC:
        raise ProtocolError(f"bad payload magic {magic!r}", offset=0)
    if version != PAYLOAD_VERSION:
        raise ProtocolError(f"unsupported payload version {version}", offset=4)
    alpha, offset = _decode_records(data, offset, n_alpha)
    phi, offset = _decode_records(data, offset, n_phi)
    if offset != len(data):
        raise ProtocolError("trailing bytes after payload", offset=offset)
    return RoundPayload(client_id=client_id, round=rnd, num_samples=num_samples,
                        groups=PayloadGroups(flags), alpha=alpha, phi=phi,
                        byte_length=len(data))


def encode_checkpoint(groups: Mapping[str, Mapping[str, np.ndarray]]) -> bytes:
    chunks = [_CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                                      len(groups))]
    for group, tensors in groups.items():
        encoded = group.encode("utf-8")
        chunks.append(_U8.pack(len(encoded)) + encoded)
        chunks.append(_U32.pack(len(tensors)))
        chunks.append(_encode_records(tensors))
    return b"".join(chunks)


def decode_checkpoint(data: bytes) -> dict:
    raw, offset = _take(data, 0, _CHECKPOINT_HEADER.size, "checkpoint header")
    magic, version, count = _CHECKPOINT_HEADER.unpack(raw)
    if magic != CHECKPOINT_MAGIC:
        raise ProtocolError(f"bad checkpoint magic {magic!r}", offset=0)
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    groups = {}
    for _ in range(count):
        raw, offset = _take(data, offset, 1, "group name length")
        raw, offset = _take(data, offset, raw[0], "group name")
        group = _decode_name(raw, offset - len(raw), "group name")
        raw, offset = _take(data, offset, _U32.size, f"size of group '{group}'")
        (n,) = _U32.unpack(raw)
        groups[group], offset = _decode_records(data, offset, n)
    if offset != len(data):
        raise ProtocolError("trailing bytes after checkpoint", offset=offset)
    return groups


def save_checkpoint(groups: Mapping[str, Mapping[str, np.ndarray]],
                    path: Union[str, Path]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_checkpoint(groups)
    path.write_bytes(data)
    return len(data)


def load_checkpoint(path: Union[str, Path]) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Could not open checkpoint. File {path} does not exist.")
    return decode_checkpoint(path.read_bytes())
