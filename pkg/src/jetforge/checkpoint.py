"""Self-describing binary checkpoint container.

Byte layout (all integers little-endian)::

    magic     4 bytes   b"JFCK"
    version   uint32    1
    hlen      uint32    length of the JSON header
    header    hlen      UTF-8 JSON: {"config": {...}, "format": str, "meta": {...}}
    count     uint32    number of tensors
    count x tensor record:
        nlen    uint16  length of the name
        name    nlen    UTF-8
        dtype   uint8   0 = float64, 1 = float32, 2 = packed sign bits
        ndim    uint8
        dims    ndim x uint32
        payload         float64/float32 little-endian values, or
                        ceil(n / 8) bytes of sign bits, row-major,
                        least-significant bit first, bit 1 = +1

A packed BitLinear weight ``X.weight`` is followed by a float32 scalar
``X.weight.beta``. Batch-norm running statistics are stored as
``<norm>.running_mean`` and ``<norm>.running_var``.
"""

import io
import json
import struct

import numpy as np

from .bitlinear import pack_signs, unpack_signs, weight_quant
from .errors import ContractError, ParseError
from .model import ModelConfig, assemble, is_bitlinear

MAGIC = b"JFCK"
VERSION = 1
F64, F32, SIGN1 = 0, 1, 2
FORMATS = ("f64", "f32", "packed")


def _write_tensor(buf, name, dtype, array):
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<BB", dtype, array.ndim))
    buf.write(struct.pack(f"<{array.ndim}I", *array.shape))
    if dtype == SIGN1:
        buf.write(pack_signs(array))
    else:
        buf.write(np.ascontiguousarray(array, dtype="<f8" if dtype == F64 else "<f4").tobytes())


def _records(state, fmt):
    float_code = F64 if fmt == "f64" else F32
    for name, p in state.params.items():
        if fmt == "packed" and is_bitlinear(name):
            if name in state.frozen:
                signs, beta = state.frozen[name]
            else:
                _, beta, signs, _ = weight_quant(p.data)
            yield name, SIGN1, signs
            yield f"{name}.beta", F32, np.asarray(beta)
        else:
            yield name, float_code, p.data
    for name, buf in state.buffers().items():
        yield name, float_code, buf


def to_bytes(state, fmt="f64", meta=None):
    """Serialize ``state``; ``fmt`` is "f64", "f32" or "packed"."""
    if fmt not in FORMATS:
        raise ContractError(f"unknown checkpoint format {fmt!r}; expected one of {FORMATS}")
    if fmt == "packed" and not state.config.quantized:
        raise ContractError("packed format needs a quantized model")
    header = json.dumps({"config": state.config.to_dict(), "format": fmt, "meta": meta or {}}).encode()
    records = list(_records(state, fmt))
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(records)))
    for name, dtype, array in records:
        _write_tensor(buf, name, dtype, np.asarray(array))
    return buf.getvalue()


def save_checkpoint(path, state, fmt="f64", meta=None):
    data = to_bytes(state, fmt, meta)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def read_container(data):
    """Parse raw bytes into ``(header, {name: (dtype, array)})``."""
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise ParseError("not a jetforge checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", view, 4)
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    pos = 12
    header = json.loads(bytes(view[pos : pos + hlen]).decode("utf-8"))
    pos += hlen
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos : pos + nlen]).decode("utf-8")
        pos += nlen
        dtype, ndim = struct.unpack_from("<BB", view, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", view, pos)
        pos += 4 * ndim
        n = int(np.prod(shape))
        if dtype == SIGN1:
            size = (n + 7) // 8
            array = unpack_signs(bytes(view[pos : pos + size]), shape)
        elif dtype in (F64, F32):
            width = 8 if dtype == F64 else 4
            size = n * width
            array = np.frombuffer(view[pos : pos + size], dtype="<f8" if dtype == F64 else "<f4")
            array = array.astype(np.float64).reshape(shape)
        else:
            raise ParseError(f"tensor {name!r}: unknown dtype tag {dtype}")
        pos += size
        tensors[name] = (dtype, array)
    return header, tensors


def from_bytes(data):
    header, tensors = read_container(data)
    config = ModelConfig.from_dict(header["config"])
    arrays, running, frozen = {}, {}, {}
    for name, (dtype, array) in tensors.items():
        if name.endswith(".beta"):
            continue
        if dtype == SIGN1:
            beta = float(tensors[f"{name}.beta"][1])
            frozen[name] = (array, beta)
            arrays[name] = beta * array.astype(np.float64)
        elif name.endswith((".running_mean", ".running_var")):
            running[name] = array
        else:
            arrays[name] = array
    state = assemble(config, arrays, running)
    state.frozen = frozen
    return state


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
