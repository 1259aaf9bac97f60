"""Binary parameter files.

Layout:

    8 bytes   magic b"DEFREGNN"
    u32 LE    format version (1)
    u32 LE    descriptor length in bytes
    ...       descriptor: UTF-8 JSON of the architecture (sorted keys)
    ...       parameter tensors in declaration order, little-endian f32
    [optional checkpoint section]
    8 bytes   tag b"ADAMSTAT"
    u32 LE    section version (1)
    u64 LE    optimizer step count
    ...       Adam m then v tensors, same order/layout as the parameters

The descriptor pins the architecture (widths, block counts, group count,
activation slope), not the init seed: a file may be loaded into any model
instance compiled with the same architecture. Mismatches are rejected.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from defreg.errors import FileFormatError, ValidationError
from defreg.scnet.model import ScNetModel

MAGIC = b"DEFREGNN"
OPT_TAG = b"ADAMSTAT"
FORMAT_VERSION = 1

__all__ = ["save_params", "load_params", "read_descriptor"]


def _descriptor_bytes(model: ScNetModel) -> bytes:
    return json.dumps(model.config.architecture(), sort_keys=True).encode("utf-8")


def save_params(path, model: ScNetModel, optimizer_state: dict | None = None) -> None:
    desc = _descriptor_bytes(model)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(desc)))
        fh.write(desc)
        for _, value, _ in model.params():
            fh.write(np.ascontiguousarray(value, dtype="<f4").tobytes())
        if optimizer_state is not None:
            fh.write(OPT_TAG)
            fh.write(struct.pack("<IQ", 1, int(optimizer_state["step"])))
            for key in ("m", "v"):
                for arr in optimizer_state[key]:
                    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_descriptor(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise FileFormatError(f"{path}: not a parameter file")
        version, desc_len = struct.unpack("<II", fh.read(8))
        if version != FORMAT_VERSION:
            raise FileFormatError(f"{path}: unsupported format version {version}")
        try:
            return json.loads(fh.read(desc_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FileFormatError(f"{path}: bad descriptor: {exc}") from None


def load_params(path, model: ScNetModel) -> dict | None:
    """Fill the model's parameters from a file; returns optimizer state if
    the file carries a checkpoint section, else None. The file descriptor
    must match the model's compiled architecture exactly."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise FileFormatError(f"{path}: not a parameter file")
    version, desc_len = struct.unpack("<II", data[8:16])
    if version != FORMAT_VERSION:
        raise FileFormatError(f"{path}: unsupported format version {version}")
    offset = 16
    try:
        descriptor = json.loads(data[offset:offset + desc_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FileFormatError(f"{path}: bad descriptor: {exc}") from None
    offset += desc_len
    expected = model.config.architecture()
    if descriptor != expected:
        raise ValidationError(
            f"{path}: architecture descriptor mismatch: file {descriptor}, model {expected}"
        )

    params = model.params()
    for name, value, _ in params:
        nbytes = value.size * 4
        if offset + nbytes > len(data):
            raise FileFormatError(f"{path}: truncated at parameter {name}")
        value[...] = np.frombuffer(data, dtype="<f4", count=value.size, offset=offset).reshape(value.shape)
        offset += nbytes

    if offset == len(data):
        return None
    tag = data[offset:offset + 8]
    if tag != OPT_TAG:
        raise FileFormatError(f"{path}: trailing bytes are not a checkpoint section")
    offset += 8
    _, step = struct.unpack("<IQ", data[offset:offset + 12])
    offset += 12
    state = {"step": step, "m": [], "v": []}
    for key in ("m", "v"):
        for name, value, _ in params:
            nbytes = value.size * 4
            if offset + nbytes > len(data):
                raise FileFormatError(f"{path}: truncated optimizer state at {name}")
            arr = np.frombuffer(data, dtype="<f4", count=value.size, offset=offset).reshape(value.shape)
            state[key].append(arr.astype(np.float64))
            offset += nbytes
    if offset != len(data):
        raise FileFormatError(f"{path}: {len(data) - offset} unexpected trailing bytes")
    return state
