"""Parameter blob: the binary handoff from training to the deployed engine.

Layout (little-endian)::

    magic   4 bytes  b"KNJ1"
    version u16      1
    record* until end of data:
        name_len u16, name (utf-8)
        bits u8, frac_bits i8, ndim u8, dims u32 * ndim
        data: prod(dims) * bits/8 bytes, two's complement

Tensors that carry only a format (activation outputs, the preprocessed
input) are written with ``ndim = 1, dims = [0]`` and no data. Record order
follows ``ExecutionPlan.param_order``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, PlanError, StateError
from .quant import QFormat, quantize

MAGIC = b"KNJ1"
VERSION = 1
_HEADER = struct.Struct("<4sH")
_DTYPES = {8: "<i1", 16: "<i2", 32: "<i4"}


@dataclass
class BlobRecord:
    name: str
    format: QFormat
    data: np.ndarray  # int codes; shape (0,) for format-only records

    def to_bytes(self) -> bytes:
        name = self.name.encode("utf-8")
        dims = self.data.shape
        head = struct.pack(f"<H{len(name)}sBbB{len(dims)}I", len(name), name, self.format.bits,
                           self.format.frac_bits, len(dims), *dims)
        return head + self.data.astype(_DTYPES[self.format.bits]).tobytes()


@dataclass
class ParameterBlob:
    records: list = field(default_factory=list)
    version: int = VERSION

    def to_bytes(self) -> bytes:
        return _HEADER.pack(MAGIC, self.version) + b"".join(r.to_bytes() for r in self.records)

    def __getitem__(self, name: str) -> BlobRecord:
        for r in self.records:
            if r.name == name:
                return r
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [r.name for r in self.records]


def record_size(name: str, bits: int, dims) -> int:
    return 2 + len(name.encode("utf-8")) + 3 + 4 * len(dims) + int(np.prod(dims)) * bits // 8


def parse_blob(raw: bytes) -> ParameterBlob:
    raw = bytes(raw)
    if len(raw) < _HEADER.size:
        raise InvalidInputError("parameter blob shorter than its header")
    magic, version = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise InvalidInputError(f"bad blob magic {magic!r}")
    if version != VERSION:
        raise InvalidInputError(f"unsupported blob version {version}")
    pos = _HEADER.size
    records = []
    while pos < len(raw):
        start = pos
        try:
            (n,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + n].decode("utf-8")
            pos += n
            bits, frac, ndim = struct.unpack_from("<BbB", raw, pos)
            pos += 3
            dims = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
        except (struct.error, UnicodeDecodeError) as exc:
            raise InvalidInputError(f"truncated blob record at byte offset {start}") from exc
        if bits not in _DTYPES:
            raise InvalidInputError(f"record {name!r}: unsupported bit width {bits}")
        size = int(np.prod(dims)) * bits // 8
        if pos + size > len(raw):
            raise InvalidInputError(f"record {name!r} at byte offset {start} runs past the end of the blob")
        data = np.frombuffer(raw, dtype=_DTYPES[bits], count=int(np.prod(dims)), offset=pos).reshape(dims)
        pos += size
        records.append(BlobRecord(name, QFormat(bits, frac), data.astype(np.int64)))
    return ParameterBlob(records, version)


def export_params(graph, plan) -> ParameterBlob:
    """Quantize the trained parameters with their frozen formats, in plan order."""
    if not graph.frozen:
        raise StateError("freeze the range trackers before exporting parameters")
    if plan.scheme != "symmetric_pow2":
        raise PlanError(f"{plan.scheme} plans have no integer parameters to export")
    fq = graph.formats()
    formats = {t: fq[nid] for t, nid in graph.meta["tensor_fq"].items()}
    preproc = graph.meta.get("preproc")
    records = []
    for name in plan.param_order:
        if name == "preprocess.mu":
            records.append(BlobRecord(name, QFormat(16, 0), preproc.mu.astype(np.int64)))
        elif name == "preprocess.out":
            records.append(BlobRecord(name, QFormat(8, preproc.sigma_shift), np.zeros(0, np.int64)))
        elif name.endswith((".weight", ".bias")):
            q = quantize(graph.params[name], formats[name])
            records.append(BlobRecord(name, q.format, q.data.astype(np.int64)))
        else:
            records.append(BlobRecord(name, formats[name], np.zeros(0, np.int64)))
    return ParameterBlob(records)
