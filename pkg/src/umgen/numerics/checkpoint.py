"""Binary checkpoint format for named parameter sets.

Layout: magic "UMGC", u32 version, u32 header length + UTF-8 JSON header
(zero length when absent), u32 parameter count, then per parameter a u16
name length, the UTF-8 name, u8 ndim, u32 dims, and little-endian f32 data.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from ..errors import FormatError
from .tensor import Tensor

_MAGIC = b"UMGC"
_VERSION = 1


def save_checkpoint(path: str, params: dict[str, Tensor],
                    header: dict | None = None) -> None:
    hdr = json.dumps(header, separators=(",", ":")).encode() if header else b""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(hdr)))
        fh.write(hdr)
        fh.write(struct.pack("<I", len(params)))
        for name, p in params.items():
            nb = name.encode()
            arr = np.ascontiguousarray(p.data, dtype="<f4")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str, requires_grad: bool = False
                    ) -> tuple[dict[str, Tensor], dict | None]:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise FormatError("not a checkpoint file")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode()) if hlen else None
        (count,) = struct.unpack("<I", fh.read(4))
        params: dict[str, Tensor] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            data = fh.read(n * 4)
            if len(data) != n * 4:
                raise FormatError(f"truncated parameter {name}")
            arr = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
            params[name] = Tensor(arr, requires_grad=requires_grad, name=name)
    return params, header
