"""Binary ``.maiq`` model files.

Little-endian layout::

    "MAIQ" | version u16 | mode u8 | input h, w, c u16 x3
    | norm scale f64 | norm offset f64 | input qparams (flag u8 + block)
    | layer count u16
    | per layer: kind u8, activation u8, kind-specific spec fields,
      edge params (n u8, then name + qparams block each),
      blob table (n u8, then name, dtype u8, shape u32 x4, qparams, nbytes u32)
    | labels (n u16, then u16 length + UTF-8 bytes each)
    | weight region (blobs in table order)
    | CRC32 u32 of every preceding byte

A qparams block is granularity u8, count u32, scales f64 x n, zero points i8 x n.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Dict, List

import numpy as np

from maiq.errors import BadMagic, ChecksumMismatch, TruncatedFile, UnsupportedVersion
from maiq.graph import InputSpec, LayerKind, LayerSpec, Mode, ModelGraph, _weight_shapes
from maiq.kernels import Activation, BneckSpec, ConvSpec, Padding
from maiq.tensor import Granularity, QuantParams, Tensor

MAGIC = b"MAIQ"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("i1"), 2: np.dtype("<i4")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.int8): 1, np.dtype(np.int32): 2}


class _Writer:
    def __init__(self):
        self.parts: List[bytes] = []

    def pack(self, fmt: str, *vals):
        self.parts.append(struct.pack("<" + fmt, *vals))

    def name(self, s: str):
        raw = s.encode("utf-8")
        self.pack("B", len(raw))
        self.parts.append(raw)

    def qparams(self, p: QuantParams):
        n = len(p)
        self.pack("BI", p.granularity.value, n)
        self.pack(f"{n}d", *p.scales)
        self.pack(f"{n}b", *p.zero_points)

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf = buf
        self.end = end
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedFile(f"need {n} bytes at offset {self.pos}, file body ends at {self.end}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals

    def name(self) -> str:
        return self.take(self.unpack("B")).decode("utf-8")

    def qparams(self) -> QuantParams:
        gran, n = self.unpack("BI")
        scales = struct.unpack(f"<{n}d", self.take(8 * n))
        zps = struct.unpack(f"<{n}b", self.take(n))
        return QuantParams(scales, zps, Granularity(gran))


def _write_spec(w: _Writer, spec: LayerSpec):
    w.pack("BB", spec.kind.value, spec.activation.value)
    if spec.kind is LayerKind.CONV:
        c = spec.conv
        w.pack("HHBBBH", c.kernel_h, c.kernel_w, c.stride, c.padding.value, int(c.depthwise), c.out_channels)
    elif spec.kind is LayerKind.BNECK:
        b = spec.bneck
        w.pack("HBBBH", b.expansion_size, b.kernel, b.stride, int(b.use_se), b.out_channels)
    elif spec.kind is LayerKind.FC:
        w.pack("H", spec.units)
    elif spec.kind is LayerKind.AVGPOOL:
        w.pack("B", spec.pool)
    elif spec.kind is LayerKind.RESIZE:
        w.pack("HH", *spec.size)


def _read_spec(r: _Reader) -> LayerSpec:
    kind, act = r.unpack("BB")
    kind, act = LayerKind(kind), Activation(act)
    if kind is LayerKind.CONV:
        kh, kw, s, pad, dw, out = r.unpack("HHBBBH")
        return LayerSpec(kind, act, conv=ConvSpec(kh, kw, s, Padding(pad), bool(dw), out))
    if kind is LayerKind.BNECK:
        e, k, s, se, out = r.unpack("HBBBH")
        return LayerSpec(kind, act, bneck=BneckSpec(e, s, bool(se), out, k))
    if kind is LayerKind.FC:
        return LayerSpec(kind, act, units=r.unpack("H"))
    if kind is LayerKind.AVGPOOL:
        return LayerSpec(kind, act, pool=r.unpack("B"))
    if kind is LayerKind.RESIZE:
        return LayerSpec(kind, act, size=tuple(r.unpack("HH")))
    return LayerSpec(kind, act)


def to_bytes(g: ModelGraph) -> bytes:
    w = _Writer()
    w.parts.append(MAGIC)
    w.pack("HB", VERSION, g.mode.value)
    w.pack("HHH", *g.input.shape)
    w.pack("dd", g.input.norm_scale, g.input.norm_offset)
    w.pack("B", int(g.input_params is not None))
    if g.input_params is not None:
        w.qparams(g.input_params)
    w.pack("H", len(g.layers))
    region = []
    shapes = g.shapes()
    for i, spec in enumerate(g.layers):
        _write_spec(w, spec)
        edges = g.act_params[i] if g.mode is Mode.QUANTIZED else {}
        w.pack("B", len(edges))
        for name in sorted(edges):
            w.name(name)
            w.qparams(edges[name])
        names = list(_weight_shapes(spec, shapes[i]))
        w.pack("B", len(names))
        for name in names:
            blob = g.weights[i][name]
            arr = blob.data if isinstance(blob, Tensor) else np.asarray(blob)
            qp = blob.qparams if isinstance(blob, Tensor) else None
            raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            w.name(name)
            w.pack("B", _DTYPE_CODES[arr.dtype])
            w.pack("4I", *arr.shape)
            w.pack("B", int(qp is not None))
            if qp is not None:
                w.qparams(qp)
            w.pack("I", len(raw))
            region.append(raw)
    w.pack("H", len(g.labels))
    for label in g.labels:
        raw = label.encode("utf-8")
        w.pack("H", len(raw))
        w.parts.append(raw)
    w.parts.extend(region)
    body = w.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(buf: bytes) -> ModelGraph:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagic(f"not a maiq model (magic {buf[:4]!r})")
    if len(buf) < 10:
        raise TruncatedFile("file shorter than the fixed header")
    version = struct.unpack_from("<H", buf, 4)[0]
    if version != VERSION:
        raise UnsupportedVersion(f"format version {version}; this build reads {VERSION}")
    crc_ok = zlib.crc32(buf[:-4]) == struct.unpack_from("<I", buf, len(buf) - 4)[0]
    try:
        return _parse(buf)
    except TruncatedFile:
        raise
    except (ValueError, KeyError, UnicodeDecodeError, struct.error) as exc:
        if not crc_ok:
            raise ChecksumMismatch("CRC32 mismatch") from exc
        raise


def _parse(buf: bytes) -> ModelGraph:
    r = _Reader(buf, len(buf) - 4)
    r.take(6)
    mode = Mode(r.unpack("B"))
    h, wd, c = r.unpack("HHH")
    norm_scale, norm_offset = r.unpack("dd")
    input_params = r.qparams() if r.unpack("B") else None
    n_layers = r.unpack("H")
    layers, act_params, tables = [], [], []
    for _ in range(n_layers):
        layers.append(_read_spec(r))
        edges = {}
        for _ in range(r.unpack("B")):
            name = r.name()
            edges[name] = r.qparams()
        act_params.append(edges)
        table = []
        for _ in range(r.unpack("B")):
            name = r.name()
            dtype = _DTYPES[r.unpack("B")]
            shape = r.unpack("4I")
            qp = r.qparams() if r.unpack("B") else None
            table.append((name, dtype, shape, qp, r.unpack("I")))
        tables.append(table)
    labels = []
    for _ in range(r.unpack("H")):
        labels.append(r.take(r.unpack("H")).decode("utf-8"))
    expected_end = r.pos + sum(entry[4] for table in tables for entry in table)
    if expected_end > r.end:
        raise TruncatedFile(f"weight region needs {expected_end - r.pos} bytes, {r.end - r.pos} present")
    stored = struct.unpack_from("<I", buf, len(buf) - 4)[0]
    if expected_end != r.end or zlib.crc32(buf[: len(buf) - 4]) != stored:
        raise ChecksumMismatch("CRC32 mismatch")
    weights: List[Dict[str, object]] = []
    for table in tables:
        blobs = {}
        for name, dtype, shape, qp, nbytes in table:
            arr = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape)
            arr = arr.astype(dtype.newbyteorder("="))
            blobs[name] = Tensor(arr, qp) if qp is not None else arr
        weights.append(blobs)
    return ModelGraph(
        InputSpec(h, wd, c, norm_scale, norm_offset), layers, weights, labels,
        mode, act_params if mode is Mode.QUANTIZED else [], input_params,
    )


def save(g: ModelGraph, path) -> int:
    data = to_bytes(g)
    Path(path).write_bytes(data)
    return len(data)


def load(path) -> ModelGraph:
    return from_bytes(Path(path).read_bytes())


def serialized_size(g: ModelGraph) -> int:
    return len(to_bytes(g))
