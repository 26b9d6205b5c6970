"""Hard-quantized inference: frozen models, bit-packed kernels and the SQNT file.

Integer codes travel through the network together with a pending positive
scale, so a quantized layer always accumulates ``codes_in @ codes_w`` in
integers (or in float64, which is exact for these magnitudes) and applies one
float multiply at the end. The packed kernels compute the same integer
accumulation with popcounts, which makes the packed and unpacked paths
bitwise identical.

This module depends only on :mod:`sigquant.core` so that a saved model can be
loaded and run without the training code.
"""

from __future__ import annotations

import io
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import _ops
from .core import QuantLevels, QuantParams, quantize_codes
from .exceptions import ContractError, EncodingError, ParseError

__all__ = [
    "ActQuantOp",
    "BitPlanes",
    "DenseOp",
    "InferenceModel",
    "PackedMatrix",
    "benchmark",
    "load_packed",
    "pack",
    "pack_codes",
    "packed_dot",
    "packed_gemv",
    "save_packed",
]

MAGIC = b"SQNT"
VERSION = 1
_WORD = 64
_CHUNK = 1 << 22


def _bits_to_words(bits: np.ndarray) -> np.ndarray:
    """(rows, cols) bool -> (rows, ceil(cols/64)) uint64, element j at word j//64 bit j%64."""
    rows, cols = bits.shape
    words = max(1, -(-cols // _WORD))
    padded = np.zeros((rows, words * _WORD), dtype=bool)
    padded[:, :cols] = bits
    packed = np.packbits(padded, axis=1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").reshape(rows, words)


def _words_to_bits(words: np.ndarray, cols: int) -> np.ndarray:
    rows = words.shape[0]
    raw = np.ascontiguousarray(words.astype("<u8")).view(np.uint8).reshape(rows, -1)
    return np.unpackbits(raw, axis=1, bitorder="little")[:, :cols].astype(bool)


@dataclass
class BitPlanes:
    """Sign plane plus magnitude bit-planes of a signed integer matrix.

    ``value = (-1)**sign * sum_b 2**b * mags[b]``. When ``mags`` is empty every
    element is ±1 (the pure binary case, which enables the XNOR kernel).
    """

    rows: int
    cols: int
    sign: np.ndarray
    mags: list = field(default_factory=list)
    _ones: list | None = field(default=None, repr=False, compare=False)

    @property
    def is_binary(self) -> bool:
        return not self.mags

    def magnitude_planes(self):
        if self.mags:
            return self.mags
        if self._ones is None:
            self._ones = [_bits_to_words(np.ones((self.rows, self.cols), dtype=bool))]
        return self._ones

    def decode(self) -> np.ndarray:
        sign = _words_to_bits(self.sign, self.cols)
        if not self.mags:
            mag = np.ones((self.rows, self.cols), dtype=np.int64)
        else:
            mag = sum((_words_to_bits(m, self.cols).astype(np.int64) << b) for b, m in enumerate(self.mags))
        return np.where(sign, -mag, mag).astype(np.int64)


def pack_codes(codes, binary: bool | None = None) -> BitPlanes:
    """Bit-plane encode an integer matrix (or vector, as one row)."""
    c = np.asarray(codes)
    if c.ndim == 1:
        c = c[None, :]
    if c.ndim != 2:
        raise ContractError("pack_codes expects a vector or a matrix")
    ci = np.rint(c).astype(np.int64)
    if not np.array_equal(ci, c):
        raise EncodingError("codes must be integers")
    mag = np.abs(ci)
    if binary is None:
        binary = bool(np.all(mag == 1))
    sign = _bits_to_words(ci < 0)
    if binary:
        if not np.all(mag == 1):
            raise EncodingError("binary encoding needs every code in {-1, 1}")
        return BitPlanes(ci.shape[0], ci.shape[1], sign, [])
    nbits = max(1, int(mag.max()).bit_length()) if mag.size else 1
    mags = [_bits_to_words(((mag >> b) & 1).astype(bool)) for b in range(nbits)]
    return BitPlanes(ci.shape[0], ci.shape[1], sign, mags)


def _popsum(a):
    return np.bitwise_count(a).sum(axis=-1, dtype=np.int64)


def packed_dot(a: BitPlanes, b: BitPlanes) -> np.ndarray:
    """Exact integer ``decode(a) @ decode(b).T`` computed with popcounts."""
    if a.cols != b.cols:
        raise ContractError(f"inner dimensions differ: {a.cols} vs {b.cols}")
    out = np.empty((a.rows, b.rows), dtype=np.int64)
    step = max(1, _CHUNK // max(1, b.rows * a.sign.shape[1]))
    for lo in range(0, a.rows, step):
        hi = min(a.rows, lo + step)
        sa = a.sign[lo:hi, None, :]
        sb = b.sign[None, :, :]
        diff = sa ^ sb
        if a.is_binary and b.is_binary:
            # XNOR identity; padding bits are zero in both sign planes.
            out[lo:hi] = a.cols - 2 * _popsum(diff)
            continue
        acc = np.zeros((hi - lo, b.rows), dtype=np.int64)
        for i, ma in enumerate(a.magnitude_planes()):
            ma = ma[lo:hi, None, :]
            for j, mb in enumerate(b.magnitude_planes()):
                both = ma & mb[None, :, :]
                acc += (_popsum(both) - 2 * _popsum(both & diff)) << (i + j)
        out[lo:hi] = acc
    return out


@dataclass
class PackedMatrix:
    """A binary or ternary weight matrix in bit planes plus its output scale."""

    rows: int
    cols: int
    bit_width: int
    planes: BitPlanes
    alpha: float
    levels: QuantLevels

    def unpack(self) -> np.ndarray:
        return self.planes.decode()

    @property
    def payload_bytes(self) -> int:
        return self.bit_width * (-(-self.rows * self.cols // 8))


_PACKABLE = {(-1, 1): 1, (-1, 0, 1): 2}


def pack(weight_codes, levels, alpha: float = 1.0) -> PackedMatrix:
    """Losslessly encode a matrix of binary ``{-1,1}`` or ternary ``{-1,0,1}`` codes."""
    levels = QuantLevels.from_spec(levels)
    width = _PACKABLE.get(levels.levels)
    if width is None:
        raise EncodingError(f"only binary and ternary level sets can be packed, got {levels}")
    codes = np.asarray(weight_codes)
    if codes.ndim != 2:
        raise ContractError("pack expects a 2-D code matrix")
    bad = ~np.isin(codes, levels.levels)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise EncodingError(f"code {codes[idx]} at {idx} is not in the level set {levels}")
    planes = pack_codes(codes, binary=width == 1)
    return PackedMatrix(codes.shape[0], codes.shape[1], width, planes, float(alpha), levels)


def packed_gemv(packed: PackedMatrix, x_codes, x_alpha: float = 1.0) -> np.ndarray:
    """``alpha * x_alpha * (W_codes @ x_codes)`` with integer accumulation."""
    x = x_codes if isinstance(x_codes, BitPlanes) else pack_codes(np.asarray(x_codes).reshape(1, -1))
    if x.rows != 1:
        raise ContractError("packed_gemv expects a single vector")
    if x.cols != packed.cols:
        raise ContractError(f"vector length {x.cols} does not match matrix columns {packed.cols}")
    acc = packed_dot(packed.planes, x)[:, 0]
    return acc * (packed.alpha * float(x_alpha))


# -- frozen models -----------------------------------------------------------


@dataclass
class DenseOp:
    """Linear (``k == 0``) or convolutional layer in inference form.

    Exactly one of ``weight`` (float), ``codes`` (quantized) is set;
    ``packed`` optionally mirrors ``codes`` in bit-packed form.
    """

    out_features: int
    in_features: int
    bias: np.ndarray
    weight: np.ndarray | None = None
    codes: np.ndarray | None = None
    alpha: float = 1.0
    levels: QuantLevels | None = None
    packed: PackedMatrix | None = None
    k: int = 0
    stride: int = 1
    padding: int = 0

    @property
    def quantized(self) -> bool:
        return self.codes is not None

    def matrix(self):
        return self.codes if self.quantized else self.weight

    def _accumulate(self, x, use_packed, codes_in):
        w = self.matrix()
        if use_packed and self.packed is not None and codes_in:
            return packed_dot(pack_codes(x), self.packed.planes).astype(np.float64)
        if use_packed and self.packed is not None:
            w = self.packed.unpack().astype(np.float64)
        return x @ w.T

    def __call__(self, x, scale, use_packed=False):
        if not self.quantized and scale is not None:
            x, scale = x * scale, None
        codes_in = scale is not None
        if self.k:
            n = x.shape[0]
            cols, (ho, wo) = _ops.im2col(x, self.k, self.stride, self.padding)
            acc = self._accumulate(cols, use_packed, codes_in)
        else:
            acc = self._accumulate(x, use_packed, codes_in)
        if self.quantized:
            acc = acc * (self.alpha if scale is None else self.alpha * scale)
        out = acc + self.bias
        if self.k:
            out = out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)
        return out


@dataclass
class ActQuantOp:
    levels: QuantLevels
    params: QuantParams


class InferenceModel:
    """A frozen network whose quantizers all use the step form.

    ``ops`` is a list of :class:`DenseOp`, :class:`ActQuantOp` or one of the
    strings ``"relu"``, ``"flatten"``, ``("pool", size)``.
    """

    def __init__(self, ops, input_shape):
        self.ops = list(ops)
        self.input_shape = tuple(input_shape)

    @classmethod
    def from_network(cls, network) -> "InferenceModel":
        ops = []
        for layer in network.layers:
            if layer.has_params:
                k = getattr(layer, "kernel_size", 0)
                w = layer.weight.reshape(layer.weight.shape[0], -1)
                op = DenseOp(w.shape[0], w.shape[1], layer.bias.copy(), k=k,
                             stride=getattr(layer, "stride", 1), padding=getattr(layer, "padding", 0))
                q = layer.weight_quantizer
                if q is not None and q.active:
                    op.codes = quantize_codes(w, q.levels, q.params)
                    op.alpha = q.params.alpha
                    op.levels = q.levels
                else:
                    op.weight = w.copy()
                ops.append(op)
            elif layer.kind == "relu":
                ops.append("relu")
            elif layer.kind == "maxpool2d":
                ops.append(("pool", layer.size))
            else:
                ops.append("flatten")
            q = layer.activation_quantizer
            if q is not None and q.active:
                ops.append(ActQuantOp(q.levels, q.params))
        return cls(ops, network.input_shape)

    @property
    def has_quantizers(self) -> bool:
        return any(isinstance(op, ActQuantOp) or (isinstance(op, DenseOp) and op.quantized) for op in self.ops)

    def dense_ops(self):
        return [op for op in self.ops if isinstance(op, DenseOp)]

    def packed(self) -> "InferenceModel":
        """Copy whose binary/ternary layers carry bit-packed weights."""
        ops = []
        for op in self.ops:
            if isinstance(op, DenseOp) and op.quantized and op.levels.levels in _PACKABLE:
                op = DenseOp(**{**op.__dict__, "packed": pack(op.codes, op.levels, op.alpha)})
            ops.append(op)
        return InferenceModel(ops, self.input_shape)

    def forward(self, x, use_packed: bool = False):
        x = np.asarray(x, dtype=np.float64)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ContractError(f"batch shape {x.shape[1:]} does not match model input {self.input_shape}")
        scale = None
        for op in self.ops:
            if isinstance(op, DenseOp):
                x, scale = op(x, scale, use_packed), None
            elif isinstance(op, ActQuantOp):
                if scale is not None:
                    x = x * scale
                x, scale = quantize_codes(x, op.levels, op.params), op.params.alpha
            elif op == "relu":
                x = np.maximum(x, 0.0)
            elif op == "flatten":
                x = x.reshape(x.shape[0], -1)
            else:
                x, _ = _ops.maxpool_forward(x, op[1])
        return x if scale is None else x * scale

    def predict(self, x, use_packed: bool = False, batch_size: int = 1024):
        parts = [self.forward(x[i:i + batch_size], use_packed).argmax(axis=1)
                 for i in range(0, len(x), batch_size)]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    def accuracy(self, x, y, use_packed: bool = False) -> float:
        return float(np.mean(self.predict(x, use_packed) == np.asarray(y))) * 100.0


# -- SQNT file format --------------------------------------------------------
#
# header : "SQNT" | u16 version | u16 n_ops | u8 ndim | u32[ndim] input shape
# op     : u8 tag, then
#   1 dense  : u32 out | u32 in | u16 k | u16 stride | u16 padding | u8 wmode
#              wmode 0: f64[out*in] weights
#              wmode 1/2/3: f64 alpha | u16 n_levels | i32[n_levels] levels | payload
#                1 (binary):  sign bits, ceil(out*in/8) bytes
#                2 (ternary): sign bits then nonzero-mask bits
#                3 (other):   i8[out*in] codes
#              then f64[out] bias
#   2 relu, 3 flatten, 4 pool: u16 size
#   5 act quant: u16 n_levels | i32[n_levels] levels | f64 alpha | f64 beta | f64 T | f64[n] biases
# All integers and floats little-endian; bit planes are row-major, LSB first.

_TAG_DENSE, _TAG_RELU, _TAG_FLATTEN, _TAG_POOL, _TAG_ACT = 1, 2, 3, 4, 5


def _write_levels(buf, levels):
    buf.write(struct.pack("<H", len(levels.levels)))
    buf.write(np.asarray(levels.levels, dtype="<i4").tobytes())


def dense_record(op: DenseOp) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<BIIHHH", _TAG_DENSE, op.out_features, op.in_features, op.k, op.stride, op.padding))
    if not op.quantized:
        buf.write(struct.pack("<B", 0))
        buf.write(np.asarray(op.weight, dtype="<f8").tobytes())
    else:
        mode = _PACKABLE.get(op.levels.levels, 3)
        buf.write(struct.pack("<Bd", mode, op.alpha))
        _write_levels(buf, op.levels)
        buf.write(weight_payload(op.codes, mode))
    buf.write(np.asarray(op.bias, dtype="<f8").tobytes())
    return buf.getvalue()


def weight_payload(codes, mode: int) -> bytes:
    flat = np.asarray(codes).reshape(-1)
    if mode == 3:
        if flat.size and (flat.min() < -128 or flat.max() > 127):
            raise EncodingError("codes outside the int8 range cannot be serialized")
        return flat.astype("<i1").tobytes()
    out = np.packbits(flat < 0, bitorder="little").tobytes()
    if mode == 2:
        out += np.packbits(flat != 0, bitorder="little").tobytes()
    return out


def save_packed(model: InferenceModel, path) -> int:
    """Write ``model`` as an SQNT file; returns the number of bytes written."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HHB", VERSION, len(model.ops), len(model.input_shape)))
    buf.write(struct.pack(f"<{len(model.input_shape)}I", *model.input_shape))
    for op in model.ops:
        if isinstance(op, DenseOp):
            buf.write(dense_record(op))
        elif isinstance(op, ActQuantOp):
            buf.write(struct.pack("<B", _TAG_ACT))
            _write_levels(buf, op.levels)
            p = op.params
            buf.write(struct.pack("<ddd", p.alpha, p.beta, p.temperature))
            buf.write(np.asarray(p.biases, dtype="<f8").tobytes())
        elif op == "relu":
            buf.write(struct.pack("<B", _TAG_RELU))
        elif op == "flatten":
            buf.write(struct.pack("<B", _TAG_FLATTEN))
        else:
            buf.write(struct.pack("<BH", _TAG_POOL, op[1]))
    data = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ParseError(f"truncated SQNT file at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count):
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).astype(dt.newbyteorder("="))

    def levels(self):
        (n,) = self.unpack("<H")
        return QuantLevels.from_spec(tuple(int(v) for v in self.array("<i4", n)))


def load_packed(path) -> InferenceModel:
    """Read an SQNT file into a packed :class:`InferenceModel`."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != MAGIC:
        raise ParseError("bad magic at byte 0: not an SQNT file")
    version, n_ops, ndim = r.unpack("<HHB")
    if version != VERSION:
        raise ParseError(f"unsupported SQNT version {version} at byte 4")
    shape = r.unpack(f"<{ndim}I")
    ops = []
    for _ in range(n_ops):
        at = r.pos
        (tag,) = r.unpack("<B")
        if tag == _TAG_DENSE:
            out_f, in_f, k, stride, pad = r.unpack("<IIHHH")
            (mode,) = r.unpack("<B")
            op = DenseOp(out_f, in_f, None, k=k, stride=stride, padding=pad)
            if mode == 0:
                op.weight = r.array("<f8", out_f * in_f).reshape(out_f, in_f)
            else:
                (op.alpha,) = r.unpack("<d")
                op.levels = r.levels()
                count = out_f * in_f
                if mode == 3:
                    codes = r.array("<i1", count).astype(np.float64)
                else:
                    nbytes = -(-count // 8)
                    neg = np.unpackbits(r.array("u1", nbytes), bitorder="little")[:count].astype(bool)
                    nz = (np.unpackbits(r.array("u1", nbytes), bitorder="little")[:count].astype(bool)
                          if mode == 2 else np.ones(count, dtype=bool))
                    codes = np.where(nz, np.where(neg, -1.0, 1.0), 0.0)
                op.codes = codes.reshape(out_f, in_f)
                if mode in (1, 2):
                    op.packed = pack(op.codes, op.levels, op.alpha)
            op.bias = r.array("<f8", out_f)
            ops.append(op)
        elif tag == _TAG_RELU:
            ops.append("relu")
        elif tag == _TAG_FLATTEN:
            ops.append("flatten")
        elif tag == _TAG_POOL:
            ops.append(("pool", r.unpack("<H")[0]))
        elif tag == _TAG_ACT:
            levels = r.levels()
            alpha, beta, t = r.unpack("<ddd")
            biases = r.array("<f8", levels.n)
            ops.append(ActQuantOp(levels, QuantParams(alpha, beta, biases, t)))
        else:
            raise ParseError(f"unknown record tag {tag} at byte {at}")
    if r.pos != len(r.data):
        raise ParseError(f"trailing bytes after record {n_ops} at byte {r.pos}")
    return InferenceModel(ops, shape)


def benchmark(sizes=(256, 1024, 2048), repeats: int = 5, seed: int = 0) -> list[dict]:
    """Packed vs float32 matrix-vector throughput and weight-memory ratios.

    Conditions: square ``size x size`` weights, one vector, activations with
    the same codebook as the weights, best of ``repeats`` wall-clock timings.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for name, levels in (("binary", QuantLevels((-1, 1))), ("ternary", QuantLevels((-1, 0, 1)))):
        for n in sizes:
            codes = rng.choice(levels.levels, size=(n, n))
            x = rng.choice(levels.levels, size=n)
            pm = pack(codes, levels)
            xp = pack_codes(x, binary=name == "binary")
            wf, xf = codes.astype(np.float32), x.astype(np.float32)

            def best(fn):
                times = []
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    fn()
                    times.append(time.perf_counter() - t0)
                return min(times)

            t_packed = best(lambda: packed_gemv(pm, xp))
            t_float = best(lambda: wf @ xf)
            rows.append({
                "codebook": name,
                "size": n,
                "float_bytes": wf.nbytes,
                "packed_bytes": pm.payload_bytes,
                "memory_ratio": wf.nbytes / pm.payload_bytes,
                "float_seconds": t_float,
                "packed_seconds": t_packed,
                "speedup": t_float / t_packed if t_packed > 0 else float("inf"),
            })
    return rows
