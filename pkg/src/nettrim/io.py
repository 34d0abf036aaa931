"""Binary weight (NTNF) and data (NTDF) files, little-endian.

NTNF layout::

    b"NTRM" | u32 version=1 | u32 L
    L x ( u32 rows | u32 cols | u8 has_bias | u8 apply_activation
          | rows*cols f64 row-major weights | [cols f64 bias] )
    optional extension block:
    u32 K | K x ( u8 layer_kind=1 | 11 x u32 conv spec | filters f64 (o, i, r, c) )

The conv spec fields are, in order: kernel_h, kernel_w, in_channels,
out_channels, stride_h, stride_w, pad_h, pad_w, in_h, in_w, batch.

NTDF layout::

    b"NTDT" | u32 version=1 | u32 rows | u32 cols | rows*cols f64 row-major
"""

from __future__ import annotations

import struct

import numpy as np

from .conv import ConvLayer, ConvSpec
from .network import Layer, Network

__all__ = [
    "FormatError",
    "save_ntnf",
    "load_ntnf",
    "save_ntdf",
    "load_ntdf",
    "read_network",
    "write_network",
    "read_data",
    "write_data",
]

NTNF_MAGIC = b"NTRM"
NTDF_MAGIC = b"NTDT"
VERSION = 1
LAYER_DENSE = 0
LAYER_CONV = 1
_MAX_DIM = 2**31 - 1


class FormatError(ValueError):
    pass


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated payload at byte {self.pos} (need {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return bytes(out)

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    @property
    def remaining(self) -> int:
        return len(self.buf) - self.pos


def _header(r: _Reader, magic: bytes):
    got = r.take(4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")


def _check_dim(n: int, what: str):
    if n > _MAX_DIM:
        raise FormatError(f"{what} {n} exceeds 2^31 - 1")


def save_ntnf(net: Network) -> bytes:
    parts = [NTNF_MAGIC, struct.pack("<II", VERSION, len(net.layers))]
    for layer in net.layers:
        rows, cols = layer.weights.shape
        _check_dim(rows, "rows")
        _check_dim(cols, "cols")
        parts.append(struct.pack("<IIBB", rows, cols, int(layer.has_bias), int(layer.apply_activation)))
        parts.append(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
        if layer.has_bias:
            parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    if net.conv_layers:
        parts.append(struct.pack("<I", len(net.conv_layers)))
        for cl in net.conv_layers:
            s = cl.spec
            parts.append(struct.pack(
                "<B11I", LAYER_CONV, s.kernel_h, s.kernel_w, s.in_channels, s.out_channels,
                s.stride[0], s.stride[1], s.padding[0], s.padding[1], s.in_h, s.in_w, s.batch))
            parts.append(np.ascontiguousarray(cl.filters, dtype="<f8").tobytes())
    return b"".join(parts)


def load_ntnf(buf: bytes) -> Network:
    r = _Reader(buf)
    _header(r, NTNF_MAGIC)
    n_layers = r.u32()
    if n_layers == 0:
        raise FormatError("network file holds no layers")
    layers = []
    for _ in range(n_layers):
        rows, cols = r.u32(), r.u32()
        has_bias, act = r.u8(), r.u8()
        if has_bias > 1 or act > 1:
            raise FormatError("flag bytes must be 0 or 1")
        w = r.f64(rows * cols).reshape(rows, cols)
        b = r.f64(cols) if has_bias else None
        try:
            layers.append(Layer(w, b, bool(act)))
        except ValueError as exc:
            raise FormatError(str(exc)) from None
    conv_layers = []
    if r.remaining:
        count = r.u32()
        for _ in range(count):
            kind = r.u8()
            if kind != LAYER_CONV:
                raise FormatError(f"unknown extension layer kind {kind}")
            kh, kw, ci, co, sh, sw, ph, pw, ih, iw, batch = struct.unpack("<11I", r.take(44))
            try:
                spec = ConvSpec(kh, kw, ci, co, ih, iw, batch, (sh, sw), (ph, pw))
                f = r.f64(co * ci * kh * kw).reshape(spec.weight_shape)
                conv_layers.append(ConvLayer(spec, f))
            except ValueError as exc:
                if isinstance(exc, FormatError):
                    raise
                raise FormatError(str(exc)) from None
        if r.remaining:
            raise FormatError(f"{r.remaining} trailing bytes after network payload")
    try:
        return Network(tuple(layers), tuple(conv_layers))
    except ValueError as exc:
        raise FormatError(str(exc)) from None


def save_ntdf(x: np.ndarray) -> bytes:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("data matrix must be 2-D")
    _check_dim(x.shape[0], "rows")
    _check_dim(x.shape[1], "cols")
    return b"".join([NTDF_MAGIC, struct.pack("<III", VERSION, *x.shape),
                     np.ascontiguousarray(x, dtype="<f8").tobytes()])


def load_ntdf(buf: bytes) -> np.ndarray:
    r = _Reader(buf)
    _header(r, NTDF_MAGIC)
    rows, cols = r.u32(), r.u32()
    x = r.f64(rows * cols).reshape(rows, cols)
    if r.remaining:
        raise FormatError(f"{r.remaining} trailing bytes after data payload")
    return x


def read_network(path) -> Network:
    with open(path, "rb") as fh:
        return load_ntnf(fh.read())


def write_network(path, net: Network):
    with open(path, "wb") as fh:
        fh.write(save_ntnf(net))


def read_data(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return load_ntdf(fh.read())


def write_data(path, x: np.ndarray):
    with open(path, "wb") as fh:
        fh.write(save_ntdf(x))
